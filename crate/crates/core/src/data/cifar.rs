use std::path::Path;

use super::{DatasetSplit, Image, LabelledExample};
use crate::error::{Error, Result};

/// One label byte followed by 1024 red, 1024 green and 1024 blue bytes.
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 1024;

/// Reads CIFAR-10 binary batches into one split of 32x32x3 images.
pub fn load_cifar10_binary<P: AsRef<Path>>(paths: &[P]) -> Result<DatasetSplit> {
    let mut examples = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % CIFAR_RECORD_LEN != 0 {
            return Err(Error::BadRecordLength {
                path: path.to_path_buf(),
                len: bytes.len(),
                record: CIFAR_RECORD_LEN,
                offset: bytes.len() / CIFAR_RECORD_LEN * CIFAR_RECORD_LEN,
            });
        }
        for (r, record) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
            let label = record[0] as usize;
            if label >= 10 {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    detail: format!(
                        "label {label} at offset {} is not a CIFAR-10 class",
                        r * CIFAR_RECORD_LEN
                    ),
                });
            }
            let planes = &record[1..];
            let mut data = Vec::with_capacity(3072);
            for p in 0..1024 {
                for c in 0..3 {
                    data.push(planes[c * 1024 + p] as f64 / 255.0);
                }
            }
            examples.push(LabelledExample {
                image: Image::new(32, 32, 3, data)?,
                label,
            });
        }
    }
    DatasetSplit::new("cifar10", examples, 10)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_gray_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        let mut rec = vec![7u8];
        rec.extend(std::iter::repeat(128u8).take(3072));
        std::fs::write(&path, &rec).unwrap();
        let split = load_cifar10_binary(&[&path]).unwrap();
        assert_eq!(split.len(), 1);
        assert_eq!(split.examples[0].label, 7);
        assert!(split.examples[0]
            .image
            .data()
            .iter()
            .all(|&v| v == 128.0 / 255.0));
    }

    #[test]
    fn planes_are_interleaved_to_channels_last() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        let mut rec = vec![1u8];
        rec.extend(std::iter::repeat(255u8).take(1024));
        rec.extend(std::iter::repeat(0u8).take(1024));
        rec.extend(std::iter::repeat(51u8).take(1024));
        std::fs::write(&path, &rec).unwrap();
        let img = &load_cifar10_binary(&[&path]).unwrap().examples[0].image;
        assert_eq!(img.pixel(31, 0), &[1.0, 0.0, 0.2]);
    }

    #[test]
    fn bad_length_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        std::fs::write(&path, vec![0u8; CIFAR_RECORD_LEN + 10]).unwrap();
        match load_cifar10_binary(&[&path]) {
            Err(Error::BadRecordLength { offset, .. }) => assert_eq!(offset, CIFAR_RECORD_LEN),
            other => panic!("unexpected {other:?}"),
        }
    }
}
