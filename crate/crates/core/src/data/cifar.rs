//! CIFAR binary batch files.
//!
//! CIFAR-10 records are one label byte followed by 3072 pixel bytes: the
//! 1024-byte red plane, then green, then blue, each row-major 32×32.
//! CIFAR-100 records carry a coarse and a fine label byte before the pixels.

use std::path::Path;

use super::{Dataset, Image, Item, Split};
use crate::error::{Error, Result};

pub const SIDE: usize = 32;
pub const PLANE: usize = SIDE * SIDE;
pub const PIXELS: usize = 3 * PLANE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarFormat {
    Cifar10,
    /// Uses the fine label; the coarse label is retained on re-serialization
    /// only through [`serialize_batch`]'s `coarse` argument.
    Cifar100,
}

impl CifarFormat {
    fn label_bytes(self) -> usize {
        match self {
            CifarFormat::Cifar10 => 1,
            CifarFormat::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + PIXELS
    }

    pub fn class_count(self) -> usize {
        match self {
            CifarFormat::Cifar10 => 10,
            CifarFormat::Cifar100 => 100,
        }
    }
}

/// Parses a whole batch file into items with pixels scaled to `[0, 1]`.
pub fn parse_batch(bytes: &[u8], format: CifarFormat) -> Result<Vec<Item>> {
    let rec = format.record_len();
    if !bytes.len().is_multiple_of(rec) {
        return Err(Error::TruncatedRecord { len: bytes.len(), record: rec });
    }
    let classes = format.class_count();
    bytes
        .chunks_exact(rec)
        .map(|r| {
            let label = r[format.label_bytes() - 1] as usize;
            if label >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
            let px = &r[format.label_bytes()..];
            let mut data = vec![0.0; PIXELS];
            for c in 0..3 {
                for i in 0..PLANE {
                    data[i * 3 + c] = px[c * PLANE + i] as f64 / 255.0;
                }
            }
            Ok(Item { image: Image::new(SIDE, SIDE, 3, data)?, label })
        })
        .collect()
}

/// Inverse of [`parse_batch`]. For CIFAR-100 the coarse label byte is taken
/// from `coarse` (zero when absent).
pub fn serialize_batch(items: &[Item], format: CifarFormat, coarse: Option<&[u8]>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(items.len() * format.record_len());
    for (n, it) in items.iter().enumerate() {
        if it.image.shape() != (SIDE, SIDE, 3) {
            return Err(Error::InvalidImage(format!("CIFAR records are 32x32x3, got {:?}", it.image.shape())));
        }
        if it.label >= format.class_count() {
            return Err(Error::LabelOutOfRange { label: it.label, classes: format.class_count() });
        }
        if format == CifarFormat::Cifar100 {
            out.push(coarse.and_then(|c| c.get(n)).copied().unwrap_or(0));
        }
        out.push(it.label as u8);
        let data = it.image.as_slice();
        for c in 0..3 {
            for i in 0..PLANE {
                out.push((data[i * 3 + c] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(out)
}

fn read_batch(path: &Path, format: CifarFormat) -> Result<Vec<Item>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    parse_batch(&std::fs::read(path)?, format)
}

/// Reads `data_batch_1.bin` .. `data_batch_5.bin` and `test_batch.bin`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train = Vec::new();
    for i in 1..=5 {
        train.extend(read_batch(&dir.join(format!("data_batch_{i}.bin")), CifarFormat::Cifar10)?);
    }
    let test = read_batch(&dir.join("test_batch.bin"), CifarFormat::Cifar10)?;
    Ok((Dataset::new(train, Split::Train, 10)?, Dataset::new(test, Split::Test, 10)?))
}

/// Reads `train.bin` and `test.bin` using fine labels.
pub fn load_cifar100(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = read_batch(&dir.join("train.bin"), CifarFormat::Cifar100)?;
    let test = read_batch(&dir.join("test.bin"), CifarFormat::Cifar100)?;
    Ok((Dataset::new(train, Split::Train, 100)?, Dataset::new(test, Split::Test, 100)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..PIXELS).map(fill));
        r
    }

    #[test]
    fn plane_layout() {
        // red plane 10, green 20, blue 30, except pixel (1, 2) red = 255
        let rec = record(3, |i| match i {
            i if i == 32 + 2 => 255,
            i if i < PLANE => 10,
            i if i < 2 * PLANE => 20,
            _ => 30,
        });
        let items = parse_batch(&rec, CifarFormat::Cifar10).unwrap();
        assert_eq!(items[0].label, 3);
        let img = &items[0].image;
        assert_eq!(img.get(1, 2, 0), 1.0);
        assert_eq!(img.get(0, 0, 1), 20.0 / 255.0);
        assert_eq!(img.get(31, 31, 2), 30.0 / 255.0);
    }

    #[test]
    fn framing_errors() {
        assert!(matches!(
            parse_batch(&vec![0u8; 3072], CifarFormat::Cifar10),
            Err(Error::TruncatedRecord { len: 3072, record: 3073 })
        ));
        assert!(matches!(
            parse_batch(&record(10, |_| 0), CifarFormat::Cifar10),
            Err(Error::LabelOutOfRange { label: 10, .. })
        ));
        assert!(parse_batch(&[], CifarFormat::Cifar10).unwrap().is_empty());
    }

    #[test]
    fn full_size_batch_record_count() {
        let bytes: Vec<u8> = (0..10_000).flat_map(|n| record((n % 10) as u8, |i| (i * 7 + n) as u8)).collect();
        assert_eq!(bytes.len(), 30_730_000);
        let items = parse_batch(&bytes, CifarFormat::Cifar10).unwrap();
        assert_eq!(items.len(), 10_000);
        assert_eq!(serialize_batch(&items, CifarFormat::Cifar10, None).unwrap(), bytes);
    }

    #[test]
    fn cifar100_round_trip() {
        let mut bytes = vec![7u8, 99];
        bytes.extend((0..PIXELS).map(|i| (i % 251) as u8));
        let items = parse_batch(&bytes, CifarFormat::Cifar100).unwrap();
        assert_eq!(items[0].label, 99);
        assert_eq!(serialize_batch(&items, CifarFormat::Cifar100, Some(&[7])).unwrap(), bytes);
    }

    #[test]
    fn missing_directory() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_cifar10(dir.path()), Err(Error::MissingFile(_))));
    }
}
