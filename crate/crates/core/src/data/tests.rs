use super::synthetic::quadrant_label_of_image;
use super::*;
use crate::tokenization::PixelRange;
use rand::Rng;

fn test_records(n: usize, seed: u64) -> Vec<(u8, u8, Vec<u8>)> {
    let mut rng = crate::rng::stream(seed, "cifar-records");
    (0..n)
        .map(|_| {
            let img: Vec<u8> = (0..32 * 32 * 3).map(|_| rng.gen()).collect();
            (rng.gen_range(0..20), rng.gen_range(0..100), img)
        })
        .collect()
}

#[test]
fn cifar_round_trip_is_bitwise() {
    let records = test_records(10, 1);
    let mut buf = Vec::new();
    write_cifar100(&mut buf, &records).unwrap();
    assert_eq!(buf.len(), 10 * CIFAR_RECORD_BYTES);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.bin");
    std::fs::write(&path, &buf).unwrap();
    let ds = load_cifar100_file(&path).unwrap();
    assert_eq!(ds.len(), 10);
    assert_eq!(ds.height, 32);
    assert_eq!(ds.width, 32);
    for (i, (_, fine, img)) in records.iter().enumerate() {
        assert_eq!(ds.labels[i], *fine as usize);
        assert_eq!(&ds.images[i], img);
    }
}

#[test]
fn truncated_file_names_the_offset() {
    let records = test_records(3, 2);
    let mut buf = Vec::new();
    write_cifar100(&mut buf, &records).unwrap();
    buf.truncate(2 * CIFAR_RECORD_BYTES + 100);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.bin");
    std::fs::write(&path, &buf).unwrap();
    match load_cifar100_file(&path) {
        Err(DataError::Truncated { offset, len, .. }) => {
            assert_eq!(offset, 2 * CIFAR_RECORD_BYTES as u64);
            assert_eq!(len, buf.len() as u64);
        }
        other => panic!("expected Truncated, got {:?}", other.map(|d| d.len())),
    }
}

#[test]
fn out_of_range_label_is_rejected() {
    let mut records = test_records(2, 3);
    records[1].1 = 100;
    let mut buf = Vec::new();
    write_cifar100(&mut buf, &records).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.bin");
    std::fs::write(&path, &buf).unwrap();
    assert!(matches!(
        load_cifar100_file(&path),
        Err(DataError::BadLabel { index: 1, label: 100, .. })
    ));
}

#[test]
fn raw_folder_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let img: Vec<u8> = (0..4 * 4 * 3).map(|v| v as u8).collect();
    std::fs::write(dir.path().join("a.raw"), &img).unwrap();
    std::fs::write(dir.path().join("index.tsv"), "a.raw\t2\n").unwrap();
    let spec = DatasetSpec {
        source: DatasetSource::RawFolder {
            path: dir.path().to_path_buf(),
            height: 4,
            width: 4,
            num_classes: 4,
        },
        split: Split::Train,
        normalization: crate::tokenization::NormStats::unit(),
    };
    let ds = spec.load(std::path::Path::new(".")).unwrap();
    assert_eq!(ds.len(), 1);
    assert_eq!(ds.labels[0], 2);
    assert_eq!(ds.images[0], img);

    std::fs::write(dir.path().join("index.tsv"), "a.raw\t9\n").unwrap();
    assert!(matches!(spec.load(std::path::Path::new(".")), Err(DataError::BadIndexFile { .. })));
}

mod synthetic_tests {
    use super::*;

    #[test]
    fn quadrant_class_of_known_cell() {
        assert_eq!(quadrant_class(2, 2, 8, 8), 0);
        assert_eq!(quadrant_class(1, 6, 8, 8), 1);
        assert_eq!(quadrant_class(5, 0, 8, 8), 2);
        assert_eq!(quadrant_class(7, 7, 8, 8), 3);
    }

    #[test]
    fn quadrant_labels_recomputable_from_pixels() {
        let ds = synthetic_dataset(SyntheticKind::Quadrant, 64, 5, 8, 8);
        for i in 0..ds.len() {
            assert_eq!(quadrant_label_of_image(&ds.images[i], 8, 8), ds.labels[i], "image {i}");
        }
    }

    #[test]
    fn class_histogram_is_roughly_uniform() {
        let ds = synthetic_dataset(SyntheticKind::Color, 10_000, 7, 8, 8);
        let mut counts = [0usize; 4];
        for &l in &ds.labels {
            counts[l] += 1;
        }
        for c in counts {
            let frac = c as f64 / 10_000.0;
            assert!((frac - 0.25).abs() < 0.05, "class fraction {frac}");
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = synthetic_dataset(SyntheticKind::Quadrant, 32, 11, 8, 8);
        let b = synthetic_dataset(SyntheticKind::Quadrant, 32, 11, 8, 8);
        assert_eq!(a, b);
        let c = synthetic_dataset(SyntheticKind::Quadrant, 32, 12, 8, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn color_label_matches_dominant_channel() {
        let ds = synthetic_dataset(SyntheticKind::Color, 64, 13, 8, 8);
        for i in 0..ds.len() {
            let img = &ds.images[i];
            let mut sums = [0u64; 3];
            for p in 0..64 {
                for ch in 0..3 {
                    sums[ch] += img[p * 3 + ch] as u64;
                }
            }
            let label = ds.labels[i];
            match label {
                0 => assert!(sums[0] > sums[1] && sums[0] > sums[2]),
                1 => assert!(sums[1] > sums[0] && sums[1] > sums[2]),
                2 => assert!(sums[2] > sums[0] && sums[2] > sums[1]),
                _ => assert!(sums[0] > sums[2] && sums[1] > sums[2]),
            }
        }
    }
}

mod augment_tests {
    use super::*;

    #[test]
    fn disabled_augmentations_are_identity() {
        let img: Vec<u8> = (0..48).map(|v| v as u8).collect();
        let mut rng = crate::rng::stream(1, "aug");
        let out = basic_augment(&img, 4, 4, &AugmentationConfig::none(), &mut rng);
        assert_eq!(out, img);
    }

    #[test]
    fn flip_twice_is_identity() {
        let img: Vec<u8> = (0..48).map(|v| v as u8).collect();
        let flipped = hflip(&img, 4, 4);
        assert_ne!(flipped, img);
        assert_eq!(hflip(&flipped, 4, 4), img);
    }

    #[test]
    fn crop_output_keeps_size_over_many_draws() {
        let img: Vec<u8> = (0..32 * 32 * 3).map(|v| (v % 251) as u8).collect();
        let cfg = AugmentationConfig::cifar_supervised();
        for draw in 0..1000u64 {
            let mut rng = crate::rng::substream(2, "aug", &[draw]);
            let out = basic_augment(&img, 32, 32, &cfg, &mut rng);
            assert_eq!(out.len(), 32 * 32 * 3);
        }
    }

    #[test]
    fn randaug_is_deterministic_and_size_preserving() {
        let img: Vec<u8> = (0..32 * 32 * 3).map(|v| (v % 256) as u8).collect();
        let cfg = AugmentationConfig {
            randaug: Some(RandAugConfig { magnitude: 9.0, mag_std: 0.5, num_ops: 2 }),
            ..AugmentationConfig::none()
        };
        let mut r1 = crate::rng::stream(3, "ra");
        let mut r2 = crate::rng::stream(3, "ra");
        let a = basic_augment(&img, 32, 32, &cfg, &mut r1);
        let b = basic_augment(&img, 32, 32, &cfg, &mut r2);
        assert_eq!(a, b);
        assert_eq!(a.len(), img.len());
    }

    fn batch_of(n: usize, classes: usize) -> Batch<f32> {
        let images = (0..n)
            .map(|i| {
                let bytes = vec![(i * 40) as u8; 4 * 4 * 3];
                crate::tokenization::ImageTensor::from_bytes(4, 4, &bytes)
                    .normalize(crate::tokenization::NormStats::unit())
            })
            .collect();
        let mut labels = vec![0.0f32; n * classes];
        for i in 0..n {
            labels[i * classes + (i % classes)] = 1.0;
        }
        Batch { images, labels, num_classes: classes }
    }

    #[test]
    fn mixup_lambda_one_is_identity() {
        let mut batch = batch_of(4, 4);
        let before = batch.labels.clone();
        let imgs_before: Vec<_> = batch.images.iter().map(|i| i.data().to_vec()).collect();
        mixup_with_lambda(&mut batch, 1.0);
        assert_eq!(batch.labels, before);
        for (img, orig) in batch.images.iter().zip(&imgs_before) {
            assert_eq!(img.data(), &orig[..]);
        }
    }

    #[test]
    fn mixed_labels_stay_on_simplex() {
        let mut batch = batch_of(6, 4);
        let mut rng = crate::rng::stream(4, "mix");
        mixup(&mut batch, 0.8, &mut rng);
        for row in batch.labels.chunks(4) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        let mut batch2 = batch_of(6, 4);
        cutmix(&mut batch2, 1.0, &mut rng);
        for row in batch2.labels.chunks(4) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cutmix_lambda_matches_pasted_pixel_count() {
        let mut batch = batch_of(2, 4);
        // image 0 is all zeros (byte 0), image 1 all byte 40
        let mut rng = crate::rng::stream(5, "cut");
        let effective = cutmix_with_lambda(&mut batch, 0.4, &mut rng);
        let img0 = &batch.images[0];
        let v_foreign = batch.images[1].data()[0]; // uniform images
        let foreign =
            img0.data().chunks(3).filter(|px| (px[0] - v_foreign).abs() < 1e-9).count();
        // with distinct uniform images every pasted pixel is detectable
        let expect = 1.0 - foreign as f64 / 16.0;
        assert!((effective - expect).abs() < 1e-12, "{effective} vs {expect}");
        // labels mixed by the effective lambda
        let l0 = batch.labels[0];
        assert!((l0 as f64 - effective).abs() < 1e-6);
    }

    #[test]
    fn assemble_batch_is_reproducible() {
        let ds = synthetic_dataset(SyntheticKind::Quadrant, 16, 21, 8, 8);
        let cfg = AugmentationConfig::imagenet_style();
        let norm = crate::tokenization::NormStats::unit();
        let a: Batch<f32> = assemble_batch(&ds, &[0, 3, 5, 7], &cfg, norm, 9, 2, 1);
        let b: Batch<f32> = assemble_batch(&ds, &[0, 3, 5, 7], &cfg, norm, 9, 2, 1);
        assert_eq!(a.labels, b.labels);
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.data(), y.data());
            assert!(matches!(x.range, PixelRange::Normalized(_)));
        }
        let c: Batch<f32> = assemble_batch(&ds, &[0, 3, 5, 7], &cfg, norm, 9, 2, 2);
        assert!(a.labels != c.labels || a.images[0].data() != c.images[0].data());
    }

    #[test]
    fn epoch_order_is_a_permutation_and_varies() {
        let a = epoch_order(50, 1, 0);
        let b = epoch_order(50, 1, 1);
        assert_ne!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(50, 1, 0));
    }
}
