//! Binary PGM/PPM grids and raw tensor dumps.

use std::path::Path;

use super::unit_to_pixel;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

const SEPARATOR: usize = 2;
const SEPARATOR_VALUE: u8 = 128;
const TENSOR_MAGIC: &[u8; 4] = b"SDTN";

/// Lays `[N, C, H, W]` images out in a grid with `cols` columns. C must be 1
/// (PGM) or 3 (PPM).
pub fn encode_image_grid<T: Real>(images: &Tensor<T>, cols: usize) -> Result<Vec<u8>> {
    let &[n, c, h, w] = images.shape() else {
        return Err(Error::shape("write_image_grid", format!("expected [N, C, H, W], got {:?}", images.shape())));
    };
    if !(c == 1 || c == 3) || cols == 0 {
        return Err(Error::BadParam(format!("grid needs 1 or 3 channels and cols >= 1, got C={c}, cols={cols}")));
    }
    let cols = cols.min(n);
    let rows = n.div_ceil(cols);
    let width = cols * w + (cols - 1) * SEPARATOR;
    let height = rows * h + (rows - 1) * SEPARATOR;
    let mut pix = vec![SEPARATOR_VALUE; width * height * c];
    let data = images.data();
    for i in 0..n {
        let (oy, ox) = ((i / cols) * (h + SEPARATOR), (i % cols) * (w + SEPARATOR));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = data[((i * c + ch) * h + y) * w + x];
                    pix[((oy + y) * width + ox + x) * c + ch] = unit_to_pixel(v);
                }
            }
        }
    }
    let kind = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{kind}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&pix);
    Ok(out)
}

pub fn write_image_grid<T: Real>(images: &Tensor<T>, path: &Path, cols: usize) -> Result<()> {
    let bytes = encode_image_grid(images, cols)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `SDTN`, dtype tag, rank (u32 LE), dims (u32 LE), little-endian values.
pub fn write_tensor<T: Real>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let mut out = TENSOR_MAGIC.to_vec();
    out.push(T::DTYPE);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let short = |expected| Error::TruncatedFile {
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 9 {
        return Err(short(9));
    }
    if &bytes[..4] != TENSOR_MAGIC {
        let found = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
        return Err(Error::BadMagic { what: "tensor dump", found });
    }
    if bytes[4] != T::DTYPE {
        return Err(Error::Malformed(format!("tensor dump dtype {} is not {}", bytes[4], T::NAME)));
    }
    let rank = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let body = 9 + 4 * rank;
    if bytes.len() < body {
        return Err(short(body));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u32::from_le_bytes(bytes[9 + 4 * i..13 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let n: usize = shape.iter().product();
    if bytes.len() != body + n * T::BYTES {
        return Err(short(body + n * T::BYTES));
    }
    let data = bytes[body..].chunks(T::BYTES).map(T::read_le).collect();
    Tensor::new(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_image() {
        let t = Tensor::<f32>::ones(&[1, 1, 4, 4]);
        let bytes = encode_image_grid(&t, 1).unwrap();
        let header = b"P5\n4 4\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0xFF; 16]);
    }

    #[test]
    fn grid_layout() {
        let t = Tensor::<f32>::zeros(&[4, 3, 5, 6]);
        let bytes = encode_image_grid(&t, 2).unwrap();
        let header = b"P6\n14 12\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 14 * 12 * 3);
    }

    #[test]
    fn tensor_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let t = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 * 0.1);
        write_tensor(&t, &p).unwrap();
        assert_eq!(read_tensor::<f64>(&p).unwrap(), t);
        assert!(read_tensor::<f32>(&p).is_err());
    }
}
