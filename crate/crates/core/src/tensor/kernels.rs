//! Slice-level forward/backward loops for the heavier primitives.

use crate::real::Real;

/// `[rows, k] x [k, p] -> [rows, p]`
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], rows: usize, k: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * p];
    for i in 0..rows {
        let orow = &mut out[i * p..(i + 1) * p];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    }
    out
}

/// Gradient of `matmul` w.r.t. the left operand: `g [rows,p] x b^T`.
pub(crate) fn matmul_grad_a<T: Real>(g: &[T], b: &[T], rows: usize, k: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * k];
    for i in 0..rows {
        let grow = &g[i * p..(i + 1) * p];
        for kk in 0..k {
            let brow = &b[kk * p..(kk + 1) * p];
            out[i * k + kk] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// Gradient of `matmul` w.r.t. the right operand: `a^T x g`, summed over rows.
pub(crate) fn matmul_grad_b<T: Real>(g: &[T], a: &[T], rows: usize, k: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * p];
    for i in 0..rows {
        let grow = &g[i * p..(i + 1) * p];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let orow = &mut out[kk * p..(kk + 1) * p];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o = *o + aik * gv;
            }
        }
    }
    out
}

/// Per-row mean and reciprocal standard deviation.
pub(crate) fn row_stats<T: Real>(x: &[T], d: usize, eps: T) -> Vec<(T, T)> {
    let n = T::from_usize(d).unwrap();
    x.chunks_exact(d)
        .map(|row| {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            (mean, T::one() / (var + eps).sqrt())
        })
        .collect()
}

pub(crate) fn layer_norm<T: Real>(x: &[T], gamma: &[T], beta: &[T], eps: T) -> Vec<T> {
    let d = gamma.len();
    let stats = row_stats(x, d, eps);
    let mut out = Vec::with_capacity(x.len());
    for (row, &(mean, rstd)) in x.chunks_exact(d).zip(&stats) {
        for j in 0..d {
            out.push((row[j] - mean) * rstd * gamma[j] + beta[j]);
        }
    }
    out
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn layer_norm_backward<T: Real>(
    x: &[T],
    gamma: &[T],
    eps: T,
    g: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = gamma.len();
    let n = T::from_usize(d).unwrap();
    let stats = row_stats(x, d, eps);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let mut xhat = vec![T::zero(); d];
    let mut gxhat = vec![T::zero(); d];
    for (r, &(mean, rstd)) in stats.iter().enumerate() {
        let row = &x[r * d..(r + 1) * d];
        let grow = &g[r * d..(r + 1) * d];
        for j in 0..d {
            xhat[j] = (row[j] - mean) * rstd;
            gxhat[j] = grow[j] * gamma[j];
            dgamma[j] = dgamma[j] + grow[j] * xhat[j];
            dbeta[j] = dbeta[j] + grow[j];
        }
        let mean_g = gxhat.iter().copied().sum::<T>() / n;
        let mean_gx = gxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / n;
        for j in 0..d {
            dx[r * d + j] = rstd * (gxhat[j] - mean_g - xhat[j] * mean_gx);
        }
    }
    (dx, dgamma, dbeta)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvDims {
    /// Visits every (output index, input index, weight index) triple of a
    /// 3x3, stride 1, padding 1 cross-correlation.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let ConvDims {
            batch,
            c_in,
            c_out,
            h,
            w,
        } = *self;
        for b in 0..batch {
            for o in 0..c_out {
                for c in 0..c_in {
                    for di in 0..3 {
                        for dj in 0..3 {
                            let widx = ((o * c_in + c) * 3 + di) * 3 + dj;
                            for i in 0..h {
                                let ii = i + di;
                                if ii < 1 || ii > h {
                                    continue;
                                }
                                let ii = ii - 1;
                                for j in 0..w {
                                    let jj = j + dj;
                                    if jj < 1 || jj > w {
                                        continue;
                                    }
                                    let jj = jj - 1;
                                    let oidx = ((b * c_out + o) * h + i) * w + j;
                                    let xidx = ((b * c_in + c) * h + ii) * w + jj;
                                    f(oidx, xidx, widx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3x3<T: Real>(x: &[T], weight: &[T], bias: &[T], dims: ConvDims) -> Vec<T> {
    let plane = dims.h * dims.w;
    let mut out = Vec::with_capacity(dims.batch * dims.c_out * plane);
    for _ in 0..dims.batch {
        for &bv in bias {
            out.extend(std::iter::repeat_n(bv, plane));
        }
    }
    dims.for_each_tap(|o, xi, wi| out[o] = out[o] + weight[wi] * x[xi]);
    out
}

/// Returns `(dx, dweight, dbias)`.
pub(crate) fn conv3x3_backward<T: Real>(
    x: &[T],
    weight: &[T],
    g: &[T],
    dims: ConvDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); weight.len()];
    let plane = dims.h * dims.w;
    let mut db = vec![T::zero(); dims.c_out];
    for (chunk_idx, chunk) in g.chunks_exact(plane).enumerate() {
        let o = chunk_idx % dims.c_out;
        db[o] = db[o] + chunk.iter().copied().sum();
    }
    dims.for_each_tap(|o, xi, wi| {
        dx[xi] = dx[xi] + weight[wi] * g[o];
        dw[wi] = dw[wi] + x[xi] * g[o];
    });
    (dx, dw, db)
}
