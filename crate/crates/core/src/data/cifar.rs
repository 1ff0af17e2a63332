//! CIFAR-100 binary records: [coarse u8][fine u8][1024 R][1024 G][1024 B],
//! row-major planes, 3074 bytes per record. The fine label is the class.

use super::{DataError, InMemoryDataset};
use std::io::Write;
use std::path::Path;

pub const CIFAR_RECORD_BYTES: usize = 3074;
const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;

pub fn load_cifar100_file(path: &Path) -> Result<InMemoryDataset, DataError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        let offset = (bytes.len() / CIFAR_RECORD_BYTES) * CIFAR_RECORD_BYTES;
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
            record: CIFAR_RECORD_BYTES as u64,
            offset: offset as u64,
        });
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (index, rec) in bytes.chunks(CIFAR_RECORD_BYTES).enumerate() {
        let fine = rec[1];
        if fine >= 100 {
            return Err(DataError::BadLabel { path: path.to_path_buf(), index, label: fine });
        }
        labels.push(fine as usize);
        // planar RGB -> interleaved HWC
        let mut img = vec![0u8; PLANE * 3];
        let planes = &rec[2..];
        for p in 0..PLANE {
            img[p * 3] = planes[p];
            img[p * 3 + 1] = planes[PLANE + p];
            img[p * 3 + 2] = planes[2 * PLANE + p];
        }
        images.push(img);
    }
    Ok(InMemoryDataset { height: SIDE, width: SIDE, images, labels, num_classes: 100 })
}

/// Writer for the same binary layout; images are interleaved HWC bytes.
/// The reader/writer pair is its own round-trip oracle.
pub fn write_cifar100<W: Write>(
    w: &mut W,
    records: &[(u8, u8, Vec<u8>)],
) -> std::io::Result<()> {
    for (coarse, fine, img) in records {
        assert_eq!(img.len(), PLANE * 3, "image must be 32x32x3 interleaved");
        w.write_all(&[*coarse, *fine])?;
        let mut planes = vec![0u8; PLANE * 3];
        for p in 0..PLANE {
            planes[p] = img[p * 3];
            planes[PLANE + p] = img[p * 3 + 1];
            planes[2 * PLANE + p] = img[p * 3 + 2];
        }
        w.write_all(&planes)?;
    }
    Ok(())
}
