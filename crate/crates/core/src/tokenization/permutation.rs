//! Distance-bounded pixel permutations: T disjoint transpositions, each pair
//! within Chebyshev distance < δ, shared across every image of a study.

use super::TokenizationError;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

/// Swap distance threshold. `Finite(2)` permits exactly the pairs that fit
/// in a 2×2 box (Chebyshev distance < 2); `Unbounded` permits any pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DeltaBound {
    Finite(u32),
    Unbounded,
}

impl DeltaBound {
    pub fn allows(&self, a: (usize, usize), b: (usize, usize)) -> bool {
        match self {
            DeltaBound::Unbounded => true,
            DeltaBound::Finite(d) => {
                let dr = a.0.abs_diff(b.0);
                let dc = a.1.abs_diff(b.1);
                dr.max(dc) < *d as usize
            }
        }
    }
}

impl fmt::Display for DeltaBound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeltaBound::Finite(d) => write!(f, "{}", d),
            DeltaBound::Unbounded => write!(f, "inf"),
        }
    }
}

impl FromStr for DeltaBound {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inf" | "Inf" | "INF" => Ok(DeltaBound::Unbounded),
            other => other
                .parse::<u32>()
                .map(DeltaBound::Finite)
                .map_err(|_| format!("delta must be an integer or \"inf\", got {:?}", other)),
        }
    }
}

impl Serialize for DeltaBound {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        match self {
            DeltaBound::Finite(d) => ser.serialize_u32(*d),
            DeltaBound::Unbounded => ser.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for DeltaBound {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = DeltaBound;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an integer threshold or the string \"inf\"")
            }
            fn visit_u64<E: serde::de::Error>(self, v: u64) -> Result<DeltaBound, E> {
                Ok(DeltaBound::Finite(v as u32))
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> Result<DeltaBound, E> {
                if v < 0 {
                    return Err(E::custom("delta must be nonnegative"));
                }
                Ok(DeltaBound::Finite(v as u32))
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> Result<DeltaBound, E> {
                v.parse().map_err(E::custom)
            }
        }
        de.deserialize_any(V)
    }
}

/// Provenance of a generated permutation; enough to regenerate it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermProvenance {
    pub height: usize,
    pub width: usize,
    pub swaps: usize,
    pub delta: DeltaBound,
    pub seed: u64,
}

/// A bijection on H·W pixel indices composed of disjoint transpositions.
#[derive(Debug, Clone, PartialEq)]
pub struct PermutationMap {
    mapping: Vec<usize>,
    transpositions: Vec<(usize, usize)>,
    pub provenance: PermProvenance,
}

impl PermutationMap {
    pub fn size(&self) -> usize {
        self.mapping.len()
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn transpositions(&self) -> &[(usize, usize)] {
        &self.transpositions
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().enumerate().all(|(i, &m)| i == m)
    }

    pub fn apply_index(&self, i: usize) -> usize {
        self.mapping[i]
    }

    /// Disjoint transpositions square to the identity, so the inverse is a copy.
    pub fn inverse(&self) -> PermutationMap {
        self.clone()
    }

    pub fn moved_count(&self) -> usize {
        self.mapping.iter().enumerate().filter(|&(i, &m)| i != m).count()
    }

    /// Checks bijection, involution, disjointness, and the distance bound.
    pub fn validate(&self) -> Result<(), TokenizationError> {
        let n = self.mapping.len();
        let (h, w) = (self.provenance.height, self.provenance.width);
        if h * w != n {
            return Err(TokenizationError::InvalidPermutation(format!(
                "mapping over {} indices for a {}x{} grid",
                n, h, w
            )));
        }
        let mut seen = vec![false; n];
        for &m in &self.mapping {
            if m >= n || seen[m] {
                return Err(TokenizationError::InvalidPermutation(
                    "mapping is not a bijection".into(),
                ));
            }
            seen[m] = true;
        }
        for (i, &m) in self.mapping.iter().enumerate() {
            if self.mapping[m] != i {
                return Err(TokenizationError::InvalidPermutation(
                    "mapping is not an involution".into(),
                ));
            }
        }
        if self.transpositions.len() > self.provenance.swaps {
            return Err(TokenizationError::InvalidPermutation(format!(
                "{} transpositions exceed declared T={}",
                self.transpositions.len(),
                self.provenance.swaps
            )));
        }
        let mut touched = vec![false; n];
        for &(a, b) in &self.transpositions {
            if a >= n || b >= n || a == b {
                return Err(TokenizationError::InvalidPermutation(format!(
                    "bad transposition ({}, {})",
                    a, b
                )));
            }
            if touched[a] || touched[b] {
                return Err(TokenizationError::InvalidPermutation(
                    "transpositions are not disjoint".into(),
                ));
            }
            touched[a] = true;
            touched[b] = true;
            let pa = (a / w, a % w);
            let pb = (b / w, b % w);
            if !self.provenance.delta.allows(pa, pb) {
                return Err(TokenizationError::InvalidPermutation(format!(
                    "pair ({:?}, {:?}) violates delta {}",
                    pa, pb, self.provenance.delta
                )));
            }
        }
        // mapping must equal the product of the listed transpositions
        let mut expect: Vec<usize> = (0..n).collect();
        for &(a, b) in &self.transpositions {
            expect.swap(a, b);
        }
        if expect != self.mapping {
            return Err(TokenizationError::InvalidPermutation(
                "mapping does not match transposition list".into(),
            ));
        }
        Ok(())
    }

    /// Text format: `PERM v1 H W T delta seed`, then one `i j` per swap.
    pub fn to_text(&self) -> String {
        let p = &self.provenance;
        let mut s = format!(
            "PERM v1 {} {} {} {} {}\n",
            p.height, p.width, p.swaps, p.delta, p.seed
        );
        for &(a, b) in &self.transpositions {
            s.push_str(&format!("{} {}\n", a, b));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizationError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<PermutationMap, TokenizationError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(TokenizationError::Parse {
            line: 1,
            detail: "empty file".into(),
        })?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 7 || fields[0] != "PERM" || fields[1] != "v1" {
            return Err(TokenizationError::Parse {
                line: 1,
                detail: format!("expected \"PERM v1 H W T delta seed\", got {:?}", header),
            });
        }
        let parse_usize = |s: &str, what: &str| {
            s.parse::<usize>().map_err(|_| TokenizationError::Parse {
                line: 1,
                detail: format!("bad {}: {:?}", what, s),
            })
        };
        let height = parse_usize(fields[2], "H")?;
        let width = parse_usize(fields[3], "W")?;
        let swaps = parse_usize(fields[4], "T")?;
        let delta: DeltaBound = fields[5].parse().map_err(|e| TokenizationError::Parse {
            line: 1,
            detail: e,
        })?;
        let seed = fields[6].parse::<u64>().map_err(|_| TokenizationError::Parse {
            line: 1,
            detail: format!("bad seed: {:?}", fields[6]),
        })?;
        let n = height * width;
        let mut mapping: Vec<usize> = (0..n).collect();
        let mut transpositions = Vec::new();
        for (ln, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let pair: Vec<&str> = line.split_whitespace().collect();
            if pair.len() != 2 {
                return Err(TokenizationError::Parse {
                    line: ln + 1,
                    detail: format!("expected \"i j\", got {:?}", line),
                });
            }
            let a = pair[0].parse::<usize>().map_err(|_| TokenizationError::Parse {
                line: ln + 1,
                detail: format!("bad index {:?}", pair[0]),
            })?;
            let b = pair[1].parse::<usize>().map_err(|_| TokenizationError::Parse {
                line: ln + 1,
                detail: format!("bad index {:?}", pair[1]),
            })?;
            if a >= n || b >= n {
                return Err(TokenizationError::Parse {
                    line: ln + 1,
                    detail: format!("index out of range for {}x{} grid: {} {}", height, width, a, b),
                });
            }
            mapping.swap(a, b);
            transpositions.push((a, b));
        }
        let perm = PermutationMap {
            mapping,
            transpositions,
            provenance: PermProvenance { height, width, swaps, delta, seed },
        };
        perm.validate()?;
        Ok(perm)
    }

    pub fn load(path: &Path) -> Result<PermutationMap, TokenizationError> {
        let mut text = String::new();
        BufReader::new(std::fs::File::open(path)?).read_to_string(&mut text)?;
        PermutationMap::parse(&text)
    }
}

/// Maximum number of disjoint pixel pairs on an H×W grid.
pub fn swap_capacity(height: usize, width: usize) -> usize {
    height * width / 2
}

/// Builds T disjoint transpositions by rejection sampling: each attempt draws
/// an unused pixel and an unused partner inside its δ-window. Deterministic
/// for a given (H, W, T, δ, seed); the attempt budget is 1000·T.
pub fn generate_permutation(
    height: usize,
    width: usize,
    t: usize,
    delta: DeltaBound,
    seed: u64,
) -> Result<PermutationMap, TokenizationError> {
    if let DeltaBound::Finite(d) = delta {
        if d < 2 {
            return Err(TokenizationError::BadDelta(d));
        }
    }
    let n = height * width;
    let capacity = swap_capacity(height, width);
    if t > capacity {
        return Err(TokenizationError::TooManySwaps { t, capacity, h: height, w: width });
    }
    let provenance = PermProvenance { height, width, swaps: t, delta, seed };
    let mut mapping: Vec<usize> = (0..n).collect();
    let mut transpositions = Vec::with_capacity(t);
    if t == 0 {
        return Ok(PermutationMap { mapping, transpositions, provenance });
    }
    let delta_key = match delta {
        DeltaBound::Finite(d) => d as u64,
        DeltaBound::Unbounded => u64::MAX,
    };
    let mut rng = crate::rng::substream(seed, "pixel-permutation", &[
        height as u64,
        width as u64,
        t as u64,
        delta_key,
    ]);
    let mut used = vec![false; n];
    let budget = 1000usize.saturating_mul(t);
    let mut attempts = 0usize;
    while transpositions.len() < t {
        if attempts >= budget {
            return Err(TokenizationError::SwapBudgetExhausted {
                needed: t,
                found: transpositions.len(),
                attempts,
                delta,
            });
        }
        attempts += 1;
        let a = rng.gen_range(0..n);
        if used[a] {
            continue;
        }
        let (ar, ac) = (a / width, a % width);
        let b = match delta {
            DeltaBound::Unbounded => rng.gen_range(0..n),
            DeltaBound::Finite(d) => {
                let r = d as usize - 1; // Chebyshev distance strictly below d
                let lo_r = ar.saturating_sub(r);
                let hi_r = (ar + r).min(height - 1);
                let lo_c = ac.saturating_sub(r);
                let hi_c = (ac + r).min(width - 1);
                let br = rng.gen_range(lo_r..=hi_r);
                let bc = rng.gen_range(lo_c..=hi_c);
                br * width + bc
            }
        };
        if b == a || used[b] {
            continue;
        }
        used[a] = true;
        used[b] = true;
        mapping.swap(a, b);
        transpositions.push((a, b));
    }
    Ok(PermutationMap { mapping, transpositions, provenance })
}
