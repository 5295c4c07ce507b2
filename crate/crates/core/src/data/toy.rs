//! Synthetic image sets small enough to learn on a CPU.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::real::{r, Real};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyKind {
    /// One to three Gaussian bumps on a dark background.
    Blobs,
    /// A single one-pixel bright bar, horizontal or vertical.
    Bars,
}

impl FromStr for ToyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(Self::Blobs),
            "bars" => Ok(Self::Bars),
            _ => Err(Error::Config(format!("unknown toy dataset '{s}' (expected blobs or bars)"))),
        }
    }
}

impl fmt::Display for ToyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Blobs => "blobs",
            Self::Bars => "bars",
        })
    }
}

pub fn gen_toy_dataset<T: Real>(
    kind: ToyKind,
    n: usize,
    size: usize,
    channels: usize,
    seed: u64,
) -> Result<Dataset<T>> {
    if ![8, 16, 28].contains(&size) {
        return Err(Error::BadParam(format!("toy image size must be 8, 16 or 28, got {size}")));
    }
    if n == 0 || !(channels == 1 || channels == 3) {
        return Err(Error::BadParam(format!(
            "need n >= 1 and 1 or 3 channels, got n={n}, channels={channels}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = size * size;
    let mut data = Vec::with_capacity(n * channels * plane);
    for _ in 0..n {
        match kind {
            ToyKind::Bars => {
                let vertical = rng.random_bool(0.5);
                let at = rng.random_range(0..size);
                for _ in 0..channels {
                    for y in 0..size {
                        for x in 0..size {
                            let on = if vertical { x == at } else { y == at };
                            data.push(if on { T::one() } else { -T::one() });
                        }
                    }
                }
            }
            ToyKind::Blobs => {
                let count = rng.random_range(1..=3);
                let s = size as f64;
                let bumps: Vec<_> = (0..count)
                    .map(|_| {
                        let cy = rng.random_range(0.0..s);
                        let cx = rng.random_range(0.0..s);
                        let sigma = rng.random_range(s / 10.0..s / 5.0);
                        let color: Vec<f64> = (0..channels)
                            .map(|_| if channels == 1 { 1.0 } else { rng.random_range(0.3..1.0) })
                            .collect();
                        (cy, cx, sigma, color)
                    })
                    .collect();
                for c in 0..channels {
                    for y in 0..size {
                        for x in 0..size {
                            let g = bumps
                                .iter()
                                .map(|(cy, cx, sigma, color)| {
                                    let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                                    color[c] * (-d2 / (2.0 * sigma * sigma)).exp()
                                })
                                .fold(0.0, f64::max);
                            data.push(r(2.0 * g - 1.0));
                        }
                    }
                }
            }
        }
    }
    Ok(Dataset {
        images: Tensor::new(&[n, channels, size, size], data)?,
        labels: None,
        source: format!("toy:{kind}:n={n}:size={size}:channels={channels}:seed={seed}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let a = gen_toy_dataset::<f32>(ToyKind::Blobs, 5, 16, 3, 9).unwrap();
        let b = gen_toy_dataset::<f32>(ToyKind::Blobs, 5, 16, 3, 9).unwrap();
        assert_eq!(a, b);
        let c = gen_toy_dataset::<f32>(ToyKind::Blobs, 5, 16, 3, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn bars_have_one_bright_line() {
        let ds = gen_toy_dataset::<f64>(ToyKind::Bars, 50, 8, 1, 1).unwrap();
        for img in ds.images.data().chunks(64) {
            let row_mean = |y: usize| (0..8).map(|x| img[y * 8 + x]).sum::<f64>() / 8.0;
            let col_mean = |x: usize| (0..8).map(|y| img[y * 8 + x]).sum::<f64>() / 8.0;
            let bright = (0..8).filter(|&y| row_mean(y) > 0.0).count()
                + (0..8).filter(|&x| col_mean(x) > 0.0).count();
            assert_eq!(bright, 1);
        }
    }

    #[test]
    fn blobs_are_mostly_dark() {
        for size in [8, 16, 28] {
            let ds = gen_toy_dataset::<f64>(ToyKind::Blobs, 40, size, 1, 2).unwrap();
            let m = ds.images.mean();
            assert!(m > -1.0 && m < 0.0, "{m}");
            assert!(ds.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn bad_sizes() {
        assert!(gen_toy_dataset::<f32>(ToyKind::Bars, 5, 10, 1, 0).is_err());
        assert!(gen_toy_dataset::<f32>(ToyKind::Bars, 0, 8, 1, 0).is_err());
        assert!(gen_toy_dataset::<f32>(ToyKind::Bars, 5, 8, 2, 0).is_err());
    }
}
