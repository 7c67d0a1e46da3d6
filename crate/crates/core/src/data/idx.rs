use std::path::Path;

use super::{DatasetSplit, Image, LabelledExample};
use crate::error::{Error, Result};

/// Unsigned-byte data with three dimensions (count, rows, cols).
pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
/// Unsigned-byte data with one dimension (count).
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            needed: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found,
            expected,
        });
    }
    Ok(())
}

fn check_len(bytes: &[u8], needed: usize, path: &Path) -> Result<()> {
    if bytes.len() < needed {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            needed,
            found: bytes.len(),
        });
    }
    Ok(())
}

/// Reads an IDX image/label file pair (MNIST layout). Pixels map to `v / 255`;
/// the class count is one past the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<DatasetSplit> {
    let img = read(images_path)?;
    let lab = read(labels_path)?;
    check_magic(&img, IDX_IMAGE_MAGIC, images_path)?;
    check_magic(&lab, IDX_LABEL_MAGIC, labels_path)?;

    let count = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let n_labels = be_u32(&lab, 4, labels_path)? as usize;
    if count != n_labels {
        return Err(Error::CountMismatch {
            images: count,
            labels: n_labels,
        });
    }
    let pixels = rows * cols;
    if pixels == 0 {
        return Err(Error::Format {
            path: images_path.to_path_buf(),
            detail: format!("degenerate image size {rows}x{cols}"),
        });
    }
    check_len(&img, 16 + count * pixels, images_path)?;
    check_len(&lab, 8 + count, labels_path)?;

    let labels = &lab[8..8 + count];
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let examples = (0..count)
        .map(|i| {
            let raw = &img[16 + i * pixels..16 + (i + 1) * pixels];
            let data = raw.iter().map(|&b| b as f64 / 255.0).collect();
            Ok(LabelledExample {
                image: Image::new(rows, cols, 1, data)?,
                label: labels[i] as usize,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    DatasetSplit::new(name, examples, classes)
}
