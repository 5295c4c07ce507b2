//! IDX files: a big-endian magic (`0x0803` images, `0x0801` labels), one
//! big-endian u32 per dimension, then the raw u8 payload.

use std::path::Path;

use super::{pixel_to_unit, Dataset};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const IDX_IMAGES: u32 = 0x0000_0803;
pub const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(Error::TruncatedFile {
            expected: at + 4,
            found: bytes.len(),
        })
}

fn header(bytes: &[u8], what: &'static str, magic: u32, rank: usize) -> Result<Vec<usize>> {
    let found = be_u32(bytes, 0)?;
    if found != magic {
        return Err(Error::BadMagic { what, found });
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| be_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<_>>()?;
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::DimMismatch(format!("{what} has a zero dimension: {dims:?}")));
    }
    let expected = 4 + 4 * rank + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(Error::TruncatedFile {
            expected,
            found: bytes.len(),
        });
    }
    Ok(dims)
}

/// Parses an image file into `[M, 1, H, W]` values in `[-1, 1]`.
pub fn parse_idx_images<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let dims = header(bytes, "IDX images", IDX_IMAGES, 3)?;
    if dims[1] != dims[2] {
        return Err(Error::DimMismatch(format!(
            "images must be square, got {}x{}",
            dims[1], dims[2]
        )));
    }
    let n = dims.iter().product::<usize>();
    let data = bytes[16..16 + n].iter().map(|&p| pixel_to_unit(p)).collect();
    Tensor::new(&[dims[0], 1, dims[1], dims[2]], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let dims = header(bytes, "IDX labels", IDX_LABELS, 1)?;
    Ok(bytes[8..8 + dims[0]].to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an image file and, optionally, the matching label file.
pub fn load_idx<T: Real>(images: &Path, labels: Option<&Path>) -> Result<Dataset<T>> {
    let imgs = parse_idx_images(&read(images)?)?;
    let labels = match labels {
        Some(p) => {
            let l = parse_idx_labels(&read(p)?)?;
            if l.len() != imgs.shape()[0] {
                return Err(Error::DimMismatch(format!(
                    "{} labels for {} images",
                    l.len(),
                    imgs.shape()[0]
                )));
            }
            Some(l)
        }
        None => None,
    };
    Ok(Dataset {
        images: imgs,
        labels,
        source: images.display().to_string(),
    })
}

/// Encodes `count` square `size x size` u8 images.
pub fn write_idx_images(count: usize, size: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IDX_IMAGES.to_be_bytes());
    for d in [count, size, size] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_image() {
        let bytes = write_idx_images(1, 28, &[0; 784]);
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        let t = parse_idx_images::<f32>(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 1, 28, 28]);
        assert!(t.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn errors() {
        let mut bytes = write_idx_images(2, 4, &[7; 32]);
        assert!(matches!(
            parse_idx_images::<f32>(&bytes[..40]),
            Err(Error::TruncatedFile { expected: 48, found: 40 })
        ));
        assert!(matches!(
            parse_idx_images::<f32>(&bytes[..6]),
            Err(Error::TruncatedFile { .. })
        ));
        bytes[3] = 1;
        assert!(matches!(
            parse_idx_images::<f32>(&bytes),
            Err(Error::BadMagic { found: 0x0801, .. })
        ));
        let mut labels = IDX_LABELS.to_be_bytes().to_vec();
        labels.extend_from_slice(&3u32.to_be_bytes());
        labels.extend_from_slice(&[1, 2, 3]);
        assert_eq!(parse_idx_labels(&labels).unwrap(), vec![1, 2, 3]);
        assert!(matches!(parse_idx_images::<f32>(&labels), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn label_count_must_match() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        std::fs::write(&img, write_idx_images(2, 2, &[0, 255, 0, 255, 1, 2, 3, 4])).unwrap();
        let mut labels = IDX_LABELS.to_be_bytes().to_vec();
        labels.extend_from_slice(&1u32.to_be_bytes());
        labels.push(5);
        std::fs::write(&lab, labels).unwrap();
        assert!(matches!(
            load_idx::<f32>(&img, Some(&lab)),
            Err(Error::DimMismatch(_))
        ));
        let ds = load_idx::<f32>(&img, None).unwrap();
        assert_eq!(ds.len(), 2);
        assert!(matches!(
            load_idx::<f32>(&dir.path().join("missing"), None),
            Err(Error::Io { .. })
        ));
    }
}
