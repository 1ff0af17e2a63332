//! Position embeddings: learned (trainable table), fixed 2D sin-cos, or none.

use crate::numerics::Tensor;
use crate::scalar::Real;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeMode {
    Learned,
    SinCos,
    None,
}

impl std::fmt::Display for PeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PeMode::Learned => "learned",
            PeMode::SinCos => "sincos",
            PeMode::None => "none",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionEmbeddingSpec {
    pub mode: PeMode,
    pub dim: usize,
    pub grid: (usize, usize),
    pub includes_cls_slot: bool,
}

impl PositionEmbeddingSpec {
    pub fn table_rows(&self) -> usize {
        self.grid.0 * self.grid.1 + usize::from(self.includes_cls_slot)
    }

    /// Fixed (non-trainable) table for this spec, or `None` for the learned
    /// mode whose table is a parameter. Mode `none` yields zeros; the cls
    /// slot of a sin-cos table is zero.
    pub fn fixed_table<F: Real>(&self) -> Option<Tensor<F>> {
        match self.mode {
            PeMode::Learned => None,
            PeMode::None => Some(Tensor::zeros(vec![self.table_rows(), self.dim])),
            PeMode::SinCos => {
                let grid_table = sincos2d::<F>(self.grid.0, self.grid.1, self.dim);
                if !self.includes_cls_slot {
                    return Some(grid_table);
                }
                let mut data = vec![F::zero(); self.dim];
                data.extend_from_slice(grid_table.data());
                Some(
                    Tensor::from_vec(vec![self.table_rows(), self.dim], data)
                        .expect("cls slot prepended"),
                )
            }
        }
    }
}

/// 2D sin-cos embedding table over an H'×W' grid: the first d/2 channels
/// encode the row, the last d/2 the column, each via the 1D scheme with
/// frequency base 10000. `dim` must be divisible by 4.
pub fn sincos2d<F: Real>(grid_h: usize, grid_w: usize, dim: usize) -> Tensor<F> {
    assert!(dim % 4 == 0, "sin-cos embedding dim must be divisible by 4, got {dim}");
    let quarter = dim / 4;
    let omegas: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(grid_h * grid_w * dim);
    for r in 0..grid_h {
        for c in 0..grid_w {
            for pos in [r, c] {
                for &omega in &omegas {
                    data.push(F::of_f64((pos as f64 * omega).sin()));
                }
                for &omega in &omegas {
                    data.push(F::of_f64((pos as f64 * omega).cos()));
                }
            }
        }
    }
    Tensor::from_vec(vec![grid_h * grid_w, dim], data).expect("table sized by construction")
}
