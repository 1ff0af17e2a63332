use super::*;
use crate::numerics::Tensor;
use rand::Rng;

fn const_image(h: usize, w: usize, rgb: [u8; 3]) -> ImageTensor<f32> {
    let bytes: Vec<u8> = (0..h * w).flat_map(|_| rgb).collect();
    ImageTensor::from_bytes(h, w, &bytes).normalize(NormStats::unit())
}

fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor<f32> {
    let mut rng = crate::rng::stream(seed, "test-image");
    let bytes: Vec<u8> = (0..h * w * 3).map(|_| rng.gen()).collect();
    ImageTensor::from_bytes(h, w, &bytes).normalize(NormStats::cifar())
}

fn proj(d_in: usize, d: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = crate::rng::stream(seed, "test-proj");
    let w = Tensor::trunc_normal(vec![d_in, d], 0.2, &mut rng);
    let b = Tensor::trunc_normal(vec![d], 0.2, &mut rng);
    (w, b)
}

#[test]
fn pixel_tokenize_counts() {
    let (w, b) = proj(3, 8, 0);
    let cls = Tensor::filled(vec![8], 0.1f32);
    let img32 = random_image(32, 32, 1);
    let seq = pixel_tokenize(&img32, &w, &b, None, Some(&cls)).unwrap();
    assert_eq!(seq.len(), 1024 + 1);
    assert!(seq.has_cls);
    assert_eq!(seq.coords[0], None);

    // the 28x28 ImageNet desk setting
    let img28 = random_image(28, 28, 2);
    let seq28 = pixel_tokenize(&img28, &w, &b, None, None).unwrap();
    assert_eq!(seq28.len(), 784);
}

#[test]
fn pixel_tokenize_requires_normalized_input() {
    let raw = ImageTensor::<f32>::from_bytes(2, 2, &[0u8; 12]);
    let (w, b) = proj(3, 4, 3);
    assert!(matches!(
        pixel_tokenize(&raw, &w, &b, None, None),
        Err(TokenizationError::ImageNotNormalized)
    ));
}

#[test]
fn constant_image_without_pe_gives_identical_tokens() {
    let img = const_image(4, 6, [120, 30, 210]);
    let (w, b) = proj(3, 8, 4);
    let seq = pixel_tokenize(&img, &w, &b, None, None).unwrap();
    let first = &seq.tokens.data()[0..8];
    for row in seq.tokens.data().chunks(8) {
        assert_eq!(row, first);
    }
}

#[test]
fn patchify_counts_match_paper_settings() {
    let (w16, b16) = proj(3 * 16 * 16, 8, 5);
    let img224 = random_image(224, 224, 6);
    let seq = patchify(&img224, 16, &w16, &b16, None, None).unwrap();
    assert_eq!(seq.len(), 196);

    let (w2, b2) = proj(3 * 2 * 2, 8, 7);
    let img32 = random_image(32, 32, 8);
    let seq2 = patchify(&img32, 2, &w2, &b2, None, None).unwrap();
    assert_eq!(seq2.len(), 256);
}

#[test]
fn patchify_rejects_non_divisible() {
    let img = random_image(30, 32, 9);
    let (w, b) = proj(3 * 4 * 4, 8, 10);
    assert!(matches!(
        patchify(&img, 4, &w, &b, None, None),
        Err(TokenizationError::NonDivisible { .. })
    ));
}

#[test]
fn patchify_p1_is_bitwise_pixel_tokenize() {
    let img = random_image(8, 8, 11);
    let (raw_px, coords_px) = extract_pixels(&img);
    let (raw_p1, coords_p1) = extract_patches(&img, 1).unwrap();
    assert_eq!(raw_px, raw_p1);
    assert_eq!(coords_px, coords_p1);

    let (w, b) = proj(3, 8, 12);
    let a = pixel_tokenize(&img, &w, &b, None, None).unwrap();
    let c = patchify(&img, 1, &w, &b, None, None).unwrap();
    assert_eq!(a.tokens.data(), c.tokens.data());
    assert_eq!(a.coords, c.coords);
}

#[test]
fn tokenization_without_pe_is_reorder_equivariant() {
    // feeding the pixels in a different order reorders the tokens identically
    let img = random_image(4, 4, 13);
    let (w, b) = proj(3, 8, 14);
    let base = pixel_tokenize(&img, &w, &b, None, None).unwrap();

    let perm = generate_permutation(4, 4, 8, DeltaBound::Unbounded, 99).unwrap();
    let shuffled = img.apply_permutation(&perm).unwrap();
    let moved = pixel_tokenize(&shuffled, &w, &b, None, None).unwrap();
    for i in 0..16 {
        let j = perm.apply_index(i);
        assert_eq!(
            &base.tokens.data()[i * 8..(i + 1) * 8],
            &moved.tokens.data()[j * 8..(j + 1) * 8]
        );
    }
}

#[test]
fn normalize_denormalize_round_trips_within_one_step() {
    let mut rng = crate::rng::stream(15, "bytes");
    let bytes: Vec<u8> = (0..4 * 4 * 3).map(|_| rng.gen()).collect();
    let img = ImageTensor::<f32>::from_bytes(4, 4, &bytes);
    let back = img.normalize(NormStats::cifar()).denormalize();
    for (orig, rec) in bytes.iter().zip(back.data()) {
        assert!((*orig as f32 - rec).abs() <= 1.0, "{} vs {}", orig, rec);
    }
}

mod permutation_tests {
    use super::*;

    #[test]
    fn t0_is_identity() {
        let p = generate_permutation(8, 8, 0, DeltaBound::Unbounded, 0).unwrap();
        assert!(p.is_identity());
        assert_eq!(p.moved_count(), 0);
        p.validate().unwrap();
    }

    #[test]
    fn capacity_at_224_matches_paper() {
        assert_eq!(swap_capacity(224, 224), 25_088);
        assert!(matches!(
            generate_permutation(224, 224, 25_089, DeltaBound::Unbounded, 0),
            Err(TokenizationError::TooManySwaps { .. })
        ));
    }

    #[test]
    fn small_grid_brute_force_verification() {
        // 4x4 grid, T=2, delta=2: exactly 2 transpositions, each within the
        // bound, and map∘map = identity.
        let p = generate_permutation(4, 4, 2, DeltaBound::Finite(2), 7).unwrap();
        assert_eq!(p.transpositions().len(), 2);
        p.validate().unwrap();
        for i in 0..16 {
            assert_eq!(p.apply_index(p.apply_index(i)), i);
        }
        for &(a, b) in p.transpositions() {
            let (ar, ac) = (a / 4, a % 4);
            let (br, bc) = (b / 4, b % 4);
            assert!(ar.abs_diff(br).max(ac.abs_diff(bc)) < 2);
        }
        assert_eq!(p.moved_count(), 4);
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = generate_permutation(16, 16, 40, DeltaBound::Finite(4), 3).unwrap();
        let b = generate_permutation(16, 16, 40, DeltaBound::Finite(4), 3).unwrap();
        assert_eq!(a, b);
        let c = generate_permutation(16, 16, 40, DeltaBound::Finite(4), 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn delta_below_two_rejected() {
        assert!(matches!(
            generate_permutation(4, 4, 1, DeltaBound::Finite(1), 0),
            Err(TokenizationError::BadDelta(1))
        ));
    }

    #[test]
    fn budget_exhaustion_is_reported() {
        // 3x3 grid, delta=2, T=4 (full capacity): some placements strand the
        // remaining unused pixels with no legal partner, e.g. after
        // (1,3),(5,7),(0,4) the cells {2,6,8} are pairwise farther than the
        // bound. Sweep seeds until one such trap exhausts the budget.
        let mut exhausted = false;
        let mut succeeded = false;
        for seed in 0..500 {
            match generate_permutation(3, 3, 4, DeltaBound::Finite(2), seed) {
                Ok(p) => {
                    p.validate().unwrap();
                    succeeded = true;
                }
                Err(TokenizationError::SwapBudgetExhausted { needed, found, .. }) => {
                    assert_eq!(needed, 4);
                    assert!(found < 4);
                    exhausted = true;
                }
                Err(other) => panic!("unexpected error: {other}"),
            }
            if exhausted && succeeded {
                break;
            }
        }
        assert!(exhausted, "no seed exhausted the rejection budget");
        assert!(succeeded, "no seed produced a full permutation");
    }

    #[test]
    fn moved_pixels_bounded_by_2t() {
        for t in [0usize, 3, 10, 32] {
            let p = generate_permutation(8, 8, t, DeltaBound::Unbounded, 21).unwrap();
            assert_eq!(p.moved_count(), 2 * t);
            p.validate().unwrap();
        }
    }

    #[test]
    fn apply_permutation_round_trips() {
        let img = random_image(4, 4, 30);
        let ident = generate_permutation(4, 4, 0, DeltaBound::Unbounded, 0).unwrap();
        assert_eq!(img.apply_permutation(&ident).unwrap(), img);

        let p = generate_permutation(4, 4, 5, DeltaBound::Unbounded, 31).unwrap();
        let moved = img.apply_permutation(&p).unwrap();
        let back = moved.apply_permutation(&p.inverse()).unwrap();
        assert_eq!(back, img);
        assert_ne!(moved, img);
    }

    #[test]
    fn single_swap_on_2x2_exchanges_the_two_pixels() {
        let mut img = const_image(2, 2, [0, 0, 0]);
        img.set_pixel(0, 0, [1.0, 2.0, 3.0]);
        img.set_pixel(1, 1, [9.0, 8.0, 7.0]);
        // find a seed whose single unbounded swap is exactly (0,0)<->(1,1)
        let mut found = false;
        for seed in 0..200 {
            let p = generate_permutation(2, 2, 1, DeltaBound::Unbounded, seed).unwrap();
            let t = p.transpositions()[0];
            if (t.0.min(t.1), t.0.max(t.1)) == (0, 3) {
                let out = img.apply_permutation(&p).unwrap();
                assert_eq!(out.pixel(0, 0), [9.0, 8.0, 7.0]);
                assert_eq!(out.pixel(1, 1), [1.0, 2.0, 3.0]);
                assert_eq!(out.pixel(0, 1), img.pixel(0, 1));
                found = true;
                break;
            }
        }
        assert!(found, "no seed produced the (0,3) swap in 200 tries");
    }

    #[test]
    fn text_round_trip_and_validation() {
        let p = generate_permutation(6, 6, 8, DeltaBound::Finite(3), 77).unwrap();
        let text = p.to_text();
        assert!(text.starts_with("PERM v1 6 6 8 3 77\n"));
        let back = PermutationMap::parse(&text).unwrap();
        assert_eq!(back, p);

        let unbounded = generate_permutation(4, 4, 2, DeltaBound::Unbounded, 5).unwrap();
        let text2 = unbounded.to_text();
        assert!(text2.starts_with("PERM v1 4 4 2 inf 5\n"));
        assert_eq!(PermutationMap::parse(&text2).unwrap(), unbounded);
    }

    #[test]
    fn loader_rejects_distance_violations_and_non_bijections() {
        // pair (0, 5) on a 4x4 grid is Chebyshev distance 1 -> fine for
        // delta 2; (0, 15) is distance 3 -> must be rejected.
        let bad = "PERM v1 4 4 1 2 0\n0 15\n";
        assert!(matches!(
            PermutationMap::parse(bad),
            Err(TokenizationError::InvalidPermutation(_))
        ));
        let overlapping = "PERM v1 4 4 2 inf 0\n0 1\n1 2\n";
        assert!(matches!(
            PermutationMap::parse(overlapping),
            Err(TokenizationError::InvalidPermutation(_))
        ));
        let bad_header = "PERM v2 4 4 1 2 0\n0 1\n";
        assert!(matches!(PermutationMap::parse(bad_header), Err(TokenizationError::Parse { .. })));
    }

    #[test]
    fn exhaustive_distance_check_small_grids() {
        for (h, w) in [(8usize, 8usize), (16, 16), (32, 32)] {
            for (t_frac, delta) in
                [(4usize, DeltaBound::Finite(2)), (3, DeltaBound::Finite(4)), (2, DeltaBound::Unbounded)]
            {
                let t = h * w / 2 / t_frac;
                let p = generate_permutation(h, w, t, delta, 1234).unwrap();
                p.validate().unwrap();
            }
        }
    }
}

mod sincos_tests {
    use super::*;

    #[test]
    fn origin_embedding_is_sin0_cos1() {
        let table = sincos2d::<f64>(4, 4, 16);
        let row0 = &table.data()[0..16];
        // layout per half: quarter sins then quarter coss
        for i in 0..4 {
            assert_eq!(row0[i], 0.0); // row sins
            assert_eq!(row0[4 + i], 1.0); // row coss
            assert_eq!(row0[8 + i], 0.0); // col sins
            assert_eq!(row0[12 + i], 1.0); // col coss
        }
    }

    #[test]
    fn same_row_shares_row_half() {
        let table = sincos2d::<f64>(4, 4, 16);
        let a = &table.data()[(2 * 4 + 1) * 16..(2 * 4 + 1) * 16 + 8];
        let b = &table.data()[(2 * 4 + 3) * 16..(2 * 4 + 3) * 16 + 8];
        assert_eq!(a, b);
    }

    #[test]
    fn dot_product_decays_with_distance_on_8x8() {
        let table = sincos2d::<f64>(8, 8, 32);
        let get = |r: usize, c: usize| &table.data()[(r * 8 + c) * 32..(r * 8 + c + 1) * 32];
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(&x, &y)| x * y).sum::<f64>();
        let q = get(3, 3);
        let d0 = dot(q, get(3, 3));
        let d1 = dot(q, get(3, 4));
        let d2 = dot(q, get(3, 5));
        assert!(d0 > d1 && d1 > d2, "{} {} {}", d0, d1, d2);
        let v1 = dot(q, get(4, 3));
        let v2 = dot(q, get(5, 3));
        assert!(d0 > v1 && v1 > v2);
    }

    #[test]
    fn fixed_table_modes() {
        let spec = PositionEmbeddingSpec {
            mode: PeMode::None,
            dim: 8,
            grid: (2, 2),
            includes_cls_slot: true,
        };
        let t = spec.fixed_table::<f32>().unwrap();
        assert_eq!(t.shape(), &[5, 8]);
        assert!(t.data().iter().all(|&v| v == 0.0));

        let sc = PositionEmbeddingSpec {
            mode: PeMode::SinCos,
            dim: 8,
            grid: (2, 2),
            includes_cls_slot: true,
        };
        let t2 = sc.fixed_table::<f32>().unwrap();
        assert_eq!(t2.shape(), &[5, 8]);
        assert!(t2.data()[0..8].iter().all(|&v| v == 0.0), "cls slot is zero");

        let learned = PositionEmbeddingSpec {
            mode: PeMode::Learned,
            dim: 8,
            grid: (2, 2),
            includes_cls_slot: false,
        };
        assert!(learned.fixed_table::<f32>().is_none());
    }
}
