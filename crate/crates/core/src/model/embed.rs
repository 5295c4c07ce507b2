//! Patch and time-step embeddings, and the inverse patch layout.
//!
//! A patch flattens as `(row in patch, column in patch, channel)`, and
//! patches are numbered in raster order.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::real::{r, Real};
use crate::tensor::{Tensor, Var};

/// Gather indices taking `[B, C, H, W]` to `[B, N, P*P*C]`.
pub fn patchify_index(batch: usize, channels: usize, size: usize, patch: usize) -> Rc<[usize]> {
    let side = size / patch;
    let pd = patch * patch * channels;
    let mut idx = Vec::with_capacity(batch * side * side * pd);
    for b in 0..batch {
        for pi in 0..side {
            for pj in 0..side {
                for y in 0..patch {
                    for x in 0..patch {
                        for c in 0..channels {
                            let row = pi * patch + y;
                            let col = pj * patch + x;
                            idx.push(((b * channels + c) * size + row) * size + col);
                        }
                    }
                }
            }
        }
    }
    idx.into()
}

/// Gather indices taking `[B, N, P*P*C]` back to `[B, C, H, W]`.
pub fn unpatchify_index(batch: usize, channels: usize, size: usize, patch: usize) -> Rc<[usize]> {
    let side = size / patch;
    let pd = patch * patch * channels;
    let n = side * side;
    let mut idx = Vec::with_capacity(batch * channels * size * size);
    for b in 0..batch {
        for c in 0..channels {
            for row in 0..size {
                for col in 0..size {
                    let token = (row / patch) * side + col / patch;
                    let within = ((row % patch) * patch + col % patch) * channels + c;
                    idx.push((b * n + token) * pd + within);
                }
            }
        }
    }
    idx.into()
}

/// `[B, C, H, W]` image to `[B, N, P*P*C]` patch rows.
pub fn patchify<'t, T: Real>(x: Var<'t, T>, patch: usize) -> Result<Var<'t, T>> {
    let (b, c, h) = image_dims(&x.shape(), patch)?;
    let side = h / patch;
    x.gather(
        &[b, side * side, patch * patch * c],
        patchify_index(b, c, h, patch),
    )
}

/// Inverse of [`patchify`] for square images with `channels` channels.
pub fn unpatchify<'t, T: Real>(x: Var<'t, T>, channels: usize, patch: usize) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let [b, n, pd] = shape[..] else {
        return Err(Error::shape("unpatchify", format!("expected [B, N, P*P*C], got {shape:?}")));
    };
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n || pd != patch * patch * channels {
        return Err(Error::shape(
            "unpatchify",
            format!("{shape:?} is not a square grid of {patch}x{patch}x{channels} patches"),
        ));
    }
    let size = side * patch;
    x.gather(&[b, channels, size, size], unpatchify_index(b, channels, size, patch))
}

fn image_dims(shape: &[usize], patch: usize) -> Result<(usize, usize, usize)> {
    match *shape {
        [b, c, h, w] if h == w && patch > 0 && h % patch == 0 => Ok((b, c, h)),
        _ => Err(Error::shape(
            "patchify",
            format!("expected square [B, C, H, W] divisible by {patch}, got {shape:?}"),
        )),
    }
}

/// Linear patch projection plus a learned position embedding.
pub fn patch_embed<'t, T: Real>(
    x: Var<'t, T>,
    patch: usize,
    w: Var<'t, T>,
    b: Var<'t, T>,
    pos: Var<'t, T>,
) -> Result<Var<'t, T>> {
    patchify(x, patch)?.matmul(w)?.add(b)?.add(pos)
}

/// Sinusoidal features `[cos(t f_j) ..., sin(t f_j) ...]` with
/// `f_j = 10000^(-j / (dim/2))`; odd widths get a trailing zero.
pub fn sinusoidal<T: Real>(t: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = vec![T::zero(); t.len() * dim];
    for (row, &step) in data.chunks_mut(dim).zip(t) {
        for j in 0..half {
            let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
            let a = step as f64 * freq;
            row[j] = r(a.cos());
            row[half + j] = r(a.sin());
        }
    }
    Tensor::from_parts(vec![t.len(), dim], data)
}

/// Time-step MLP on sinusoidal features: `[B] -> [B, D]`.
pub fn timestep_embed<'t, T: Real>(
    t: &[usize],
    diffusion_steps: usize,
    mlp: [Var<'t, T>; 4],
) -> Result<Var<'t, T>> {
    if let Some(&bad) = t.iter().find(|&&s| s >= diffusion_steps) {
        return Err(Error::OutOfRange {
            what: "timestep",
            value: bad.to_string(),
            range: format!("[0, {diffusion_steps})"),
        });
    }
    let [w1, b1, w2, b2] = mlp;
    let d = w1.shape()[0];
    let feats = w1.tape().constant(sinusoidal(t, d));
    feats.matmul(w1)?.add(b1)?.silu()?.matmul(w2)?.add(b2)
}

/// Repeats `[B, D]` rows over `n` tokens: `[B, n, D]`.
pub fn broadcast_tokens<'t, T: Real>(x: Var<'t, T>, n: usize) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let [b, d] = shape[..] else {
        return Err(Error::shape("broadcast_tokens", format!("expected [B, D], got {shape:?}")));
    };
    let idx: Vec<usize> = (0..b)
        .flat_map(|bi| (0..n).flat_map(move |_| (0..d).map(move |j| bi * d + j)))
        .collect();
    x.gather(&[b, n, d], idx.into())
}
