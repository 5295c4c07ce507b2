//! RWKV token mixing over a token sequence `[B, L, D]`.
//!
//! The WKV operator is an exponentially decayed weighted average of past
//! values with a bonus for the current token:
//!
//! ```text
//!          sum_{i<t} exp(-(t-1-i) w + k_i) v_i + exp(u + k_t) v_t
//! wkv_t = --------------------------------------------------------
//!          sum_{i<t} exp(-(t-1-i) w + k_i)     + exp(u + k_t)
//! ```
//!
//! with the decay `w = softplus(w_raw) >= 0` per channel. It is evaluated as
//! a recurrence over `(numerator, denominator, shift)` so no exponential ever
//! sees an argument above zero.

use std::cell::Cell;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::init;
use crate::params::{Binding, ParamId, ParamStore};
use crate::real::{r, Real};
use crate::tensor::{Function, GATHER_ZERO};
use crate::tensor::{Tensor, Var};

/// Time-Mixing parameters, generic over storage (`ParamId`) or a bound tape
/// handle (`Var`).
#[derive(Clone, Copy, Debug)]
pub struct TimeMix<H> {
    pub w_r: H,
    pub w_k: H,
    pub w_v: H,
    pub w_o: H,
    /// Raw decay; the scan uses `softplus(decay)`.
    pub decay: H,
    pub bonus: H,
    /// Raw token-shift mixes; squashed through a sigmoid.
    pub mix_r: H,
    pub mix_k: H,
    pub mix_v: H,
}

#[derive(Clone, Copy, Debug)]
pub struct ChannelMix<H> {
    pub w_r: H,
    pub w_k: H,
    pub w_v: H,
    pub mix_r: H,
    pub mix_k: H,
}

pub type TimeMixParams = TimeMix<ParamId>;
pub type ChannelMixParams = ChannelMix<ParamId>;

/// Per-channel decay targets spread over several orders of magnitude, so
/// some channels average over long token ranges and some stay local.
fn initial_decay(d: usize, dim: usize) -> f64 {
    let ratio = if dim > 1 { d as f64 / (dim - 1) as f64 } else { 0.0 };
    let target = (-5.0 + 8.0 * ratio.powf(0.7)).exp();
    // inverse softplus
    target.exp_m1().ln()
}

impl TimeMix<ParamId> {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut lin = |name: &str, rng: &mut _| {
            store.add(format!("{prefix}.{name}"), init::linear(rng, dim, dim))
        };
        let w_r = lin("w_r", rng);
        let w_k = lin("w_k", rng);
        let w_v = lin("w_v", rng);
        let w_o = lin("w_o", rng);
        let decay = store.add(
            format!("{prefix}.decay"),
            Tensor::from_fn(&[dim], |d| r(initial_decay(d, dim))),
        );
        let bonus = store.add(
            format!("{prefix}.bonus"),
            Tensor::from_fn(&[dim], |d| r(0.3f64.ln() + 0.25 * (((d + 1) % 3) as f64 - 1.0))),
        );
        let mut mix = |name: &str| store.add(format!("{prefix}.{name}"), Tensor::zeros(&[dim]));
        Self {
            w_r,
            w_k,
            w_v,
            w_o,
            decay,
            bonus,
            mix_r: mix("mix_r"),
            mix_k: mix("mix_k"),
            mix_v: mix("mix_v"),
        }
    }

    pub fn bind<'t, T: Real>(&self, b: &Binding<'t, T>) -> TimeMix<Var<'t, T>> {
        TimeMix {
            w_r: b[self.w_r],
            w_k: b[self.w_k],
            w_v: b[self.w_v],
            w_o: b[self.w_o],
            decay: b[self.decay],
            bonus: b[self.bonus],
            mix_r: b[self.mix_r],
            mix_k: b[self.mix_k],
            mix_v: b[self.mix_v],
        }
    }

    pub fn ids(&self) -> [ParamId; 9] {
        [
            self.w_r, self.w_k, self.w_v, self.w_o, self.decay, self.bonus, self.mix_r,
            self.mix_k, self.mix_v,
        ]
    }
}

impl ChannelMix<ParamId> {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        ff_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w_r = store.add(format!("{prefix}.w_r"), init::linear(rng, dim, dim));
        let w_k = store.add(format!("{prefix}.w_k"), init::linear(rng, dim, ff_dim));
        let w_v = store.add(format!("{prefix}.w_v"), init::linear(rng, ff_dim, dim));
        let mix_r = store.add(format!("{prefix}.mix_r"), Tensor::zeros(&[dim]));
        let mix_k = store.add(format!("{prefix}.mix_k"), Tensor::zeros(&[dim]));
        Self {
            w_r,
            w_k,
            w_v,
            mix_r,
            mix_k,
        }
    }

    pub fn bind<'t, T: Real>(&self, b: &Binding<'t, T>) -> ChannelMix<Var<'t, T>> {
        ChannelMix {
            w_r: b[self.w_r],
            w_k: b[self.w_k],
            w_v: b[self.w_v],
            mix_r: b[self.mix_r],
            mix_k: b[self.mix_k],
        }
    }

    pub fn ids(&self) -> [ParamId; 5] {
        [self.w_r, self.w_k, self.w_v, self.mix_r, self.mix_k]
    }
}

fn seq_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match *shape {
        [b, l, d] => Ok((b, l, d)),
        _ => Err(Error::shape(op, format!("expected [B, L, D], got {shape:?}"))),
    }
}

/// Moves every token one position later along the sequence; position 0
/// becomes zeros.
pub fn shift_right<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let (b, l, d) = seq_dims(&shape, "token_shift")?;
    let index: Rc<[usize]> = (0..b * l * d)
        .map(|i| {
            let t = (i / d) % l;
            if t == 0 {
                GATHER_ZERO
            } else {
                i - d
            }
        })
        .collect();
    x.gather(&shape, index)
}

/// `mu * x[t] + (1 - mu) * x[t-1]`, with `x[-1] = 0`.
pub fn token_shift<'t, T: Real>(x: Var<'t, T>, mu: Var<'t, T>) -> Result<Var<'t, T>> {
    let (_, _, d) = seq_dims(&x.shape(), "token_shift")?;
    if mu.shape() != [d] {
        return Err(Error::shape(
            "token_shift",
            format!("mix has shape {:?}, feature dim is {d}", mu.shape()),
        ));
    }
    let prev = shift_right(x)?;
    x.mul(mu)?.add(prev.mul(mu.one_minus()?)?)
}

/// `log(1 + e^x)` without overflow.
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

thread_local! {
    static FLIP_WKV_BACKWARD_SIGN: Cell<bool> = const { Cell::new(false) };
}

/// Fault injection for mutation-testing the gradient checks. Affects only
/// the calling thread.
#[doc(hidden)]
pub fn set_wkv_backward_sign_flip(on: bool) {
    FLIP_WKV_BACKWARD_SIGN.with(|c| c.set(on));
}

/// Stabilized forward scan over one channel of one sequence. `k`, `v`, and
/// `out` are strided views: element `t` lives at `base + t * stride`.
struct Channel<'a, T> {
    k: &'a [T],
    v: &'a [T],
    base: usize,
    stride: usize,
    len: usize,
    decay: T,
    bonus: T,
}

impl<T: Real> Channel<'_, T> {
    #[inline]
    fn at(&self, t: usize) -> usize {
        self.base + t * self.stride
    }

    fn forward(&self, out: &mut [T]) {
        let (mut a, mut b, mut p) = (T::zero(), T::zero(), T::neg_infinity());
        for t in 0..self.len {
            let i = self.at(t);
            let (kt, vt) = (self.k[i], self.v[i]);
            let ww = self.bonus + kt;
            let q = p.max(ww);
            let e1 = (p - q).exp();
            let e2 = (ww - q).exp();
            out[i] = (e1 * a + e2 * vt) / (e1 * b + e2);

            let pw = p - self.decay;
            let q = pw.max(kt);
            let f1 = (pw - q).exp();
            let f2 = (kt - q).exp();
            a = f1 * a + f2 * vt;
            b = f1 * b + f2;
            p = q;
        }
    }

    /// Accumulates gradients for `k`, `v` (strided) and returns
    /// `(d decay, d bonus)` for this channel.
    fn backward(&self, g: &[T], dk: &mut [T], dv: &mut [T]) -> (T, T) {
        let n = self.len;
        // Forward recomputation, keeping per-step quantities.
        let mut wkv = vec![T::zero(); n];
        let mut q_out = vec![T::zero(); n];
        let mut s_hat = vec![T::zero(); n];
        let (mut a, mut b, mut p) = (T::zero(), T::zero(), T::neg_infinity());
        // Decay-weighted sums sharing the shift of (a, b).
        let (mut pa, mut pb) = (T::zero(), T::zero());
        let mut d_decay = T::zero();
        let mut d_bonus = T::zero();
        for t in 0..n {
            let i = self.at(t);
            let (kt, vt) = (self.k[i], self.v[i]);
            let ww = self.bonus + kt;
            let q = p.max(ww);
            let e1 = (p - q).exp();
            let e2 = (ww - q).exp();
            let den = e1 * b + e2;
            let y = (e1 * a + e2 * vt) / den;
            wkv[t] = y;
            q_out[t] = q;
            let sh = g[i] / den;
            s_hat[t] = sh;

            let bonus_term = sh * e2;
            dv[i] = dv[i] + bonus_term;
            dk[i] = dk[i] + bonus_term * (vt - y);
            d_bonus = d_bonus + bonus_term * (vt - y);
            d_decay = d_decay - sh * e1 * (pa - y * pb);

            let pw = p - self.decay;
            let qn = pw.max(kt);
            let f1 = (pw - qn).exp();
            let f2 = (kt - qn).exp();
            pa = f1 * (pa + a);
            pb = f1 * (pb + b);
            a = f1 * a + f2 * vt;
            b = f1 * b + f2;
            p = qn;
        }

        // Reverse accumulation of the history terms, kept as
        // (c, e) * exp(rho).
        let (mut c, mut e, mut rho) = (T::zero(), T::zero(), T::neg_infinity());
        for t in (0..n).rev() {
            let i = self.at(t);
            let (kt, vt) = (self.k[i], self.v[i]);
            let scale = (kt + rho).exp();
            dv[i] = dv[i] + c * scale;
            dk[i] = dk[i] + (vt * c - e) * scale;
            // fold in step t for the positions before it
            let cand_new = -q_out[t];
            let cand_old = rho - self.decay;
            let nr = cand_new.max(cand_old);
            let w_new = (cand_new - nr).exp();
            let w_old = (cand_old - nr).exp();
            c = s_hat[t] * w_new + c * w_old;
            e = s_hat[t] * wkv[t] * w_new + e * w_old;
            rho = nr;
        }
        (d_decay, d_bonus)
    }
}

struct Wkv {
    batch: usize,
    len: usize,
    dim: usize,
}

impl Wkv {
    fn channels<'a, T: Real>(
        &self,
        k: &'a [T],
        v: &'a [T],
        decay: &'a [T],
        bonus: &'a [T],
    ) -> impl Iterator<Item = (usize, Channel<'a, T>)> + 'a {
        let (l, dim) = (self.len, self.dim);
        (0..self.batch).flat_map(move |bi| {
            (0..dim).map(move |d| {
                (
                    d,
                    Channel {
                        k,
                        v,
                        base: bi * l * dim + d,
                        stride: dim,
                        len: l,
                        decay: softplus(decay[d]),
                        bonus: bonus[d],
                    },
                )
            })
        })
    }
}

impl<T: Real> Function<T> for Wkv {
    fn name(&self) -> &'static str {
        "wkv_scan"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Vec<T>>> {
        let (k, v, w_raw, u) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let mut dk = vec![T::zero(); k.numel()];
        let mut dv = vec![T::zero(); v.numel()];
        let mut dw = vec![T::zero(); self.dim];
        let mut du = vec![T::zero(); self.dim];
        for (d, ch) in self.channels(k.data(), v.data(), w_raw.data(), u.data()) {
            let (gw, gu) = ch.backward(grad.data(), &mut dk, &mut dv);
            dw[d] = dw[d] + gw * sigmoid(w_raw.data()[d]);
            du[d] = du[d] + gu;
        }
        if FLIP_WKV_BACKWARD_SIGN.with(|c| c.get()) {
            dk.iter_mut().for_each(|x| *x = -*x);
        }
        vec![Some(dk), Some(dv), Some(dw), Some(du)]
    }
}

/// Plain forward WKV on tensors, no tape.
pub fn wkv_forward<T: Real>(
    k: &Tensor<T>,
    v: &Tensor<T>,
    decay_raw: &Tensor<T>,
    bonus: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (batch, len, dim) = seq_dims(k.shape(), "wkv_scan")?;
    if v.shape() != k.shape() {
        return Err(Error::shape(
            "wkv_scan",
            format!("k {:?} vs v {:?}", k.shape(), v.shape()),
        ));
    }
    if decay_raw.shape() != [dim] || bonus.shape() != [dim] {
        return Err(Error::shape(
            "wkv_scan",
            format!("w {:?}, u {:?} for dim {dim}", decay_raw.shape(), bonus.shape()),
        ));
    }
    for t in [k, v, decay_raw, bonus] {
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "wkv_scan" });
        }
    }
    let op = Wkv { batch, len, dim };
    let mut out = vec![T::zero(); k.numel()];
    for (_, ch) in op.channels(k.data(), v.data(), decay_raw.data(), bonus.data()) {
        ch.forward(&mut out);
    }
    Tensor::new(k.shape(), out)
}

/// Differentiable WKV scan. `decay_raw` is passed through softplus.
pub fn wkv_scan<'t, T: Real>(
    k: Var<'t, T>,
    v: Var<'t, T>,
    decay_raw: Var<'t, T>,
    bonus: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let out = wkv_forward(&k.value(), &v.value(), &decay_raw.value(), &bonus.value())?;
    let (batch, len, dim) = seq_dims(out.shape(), "wkv_scan")?;
    k.tape()
        .apply(Box::new(Wkv { batch, len, dim }), &[k, v, decay_raw, bonus], out)
}

/// `(sigmoid(r) * wkv(k, v)) W_o` with token-shifted r/k/v projections.
pub fn time_mixing<'t, T: Real>(x: Var<'t, T>, p: &TimeMix<Var<'t, T>>) -> Result<Var<'t, T>> {
    let r = token_shift(x, p.mix_r.sigmoid()?)?.matmul(p.w_r)?;
    let k = token_shift(x, p.mix_k.sigmoid()?)?.matmul(p.w_k)?;
    let v = token_shift(x, p.mix_v.sigmoid()?)?.matmul(p.w_v)?;
    let wkv = wkv_scan(k, v, p.decay, p.bonus)?;
    r.sigmoid()?.mul(wkv)?.matmul(p.w_o)
}

/// `sigmoid(r) * (max(k, 0)^2 W_v)` with token-shifted r/k projections.
pub fn channel_mixing<'t, T: Real>(
    x: Var<'t, T>,
    p: &ChannelMix<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let r = token_shift(x, p.mix_r.sigmoid()?)?.matmul(p.w_r)?;
    let k = token_shift(x, p.mix_k.sigmoid()?)?.matmul(p.w_k)?;
    r.sigmoid()?.mul(k.relu_squared()?.matmul(p.w_v)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn token_shift_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 3, 2], |i| i as f64 + 1.0));
        let ones = tape.constant(Tensor::ones(&[2]));
        assert_eq!(*token_shift(x, ones).unwrap().value(), *x.value());

        let zeros = tape.constant(Tensor::zeros(&[2]));
        let shifted = token_shift(x, zeros).unwrap();
        assert_eq!(shifted.value().data(), &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);

        let x = tape.constant(t(&[1, 1, 1], &[2.0]));
        let half = tape.constant(t(&[1], &[0.5]));
        assert_eq!(token_shift(x, half).unwrap().value().data(), &[1.0]);
    }

    #[test]
    fn first_token_returns_its_value() {
        let k = t(&[1, 1, 3], &[5.0, -3.0, 0.2]);
        let v = t(&[1, 1, 3], &[0.7, -1.1, 4.0]);
        let w = t(&[3], &[0.1, -2.0, 3.0]);
        let u = t(&[3], &[9.0, -9.0, 0.0]);
        let out = wkv_forward(&k, &v, &w, &u).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn constant_values_are_preserved() {
        let k = Tensor::from_fn(&[2, 6, 2], |i| ((i * 7) % 5) as f64 - 2.0);
        let v = Tensor::full(&[2, 6, 2], 1.25);
        let w = t(&[2], &[0.3, -1.0]);
        let u = t(&[2], &[0.5, 1.0]);
        let out = wkv_forward(&k, &v, &w, &u).unwrap();
        for &y in out.data() {
            assert!((y - 1.25).abs() < 1e-14);
        }
    }

    #[test]
    fn huge_keys_do_not_overflow() {
        let k = Tensor::from_fn(&[1, 8, 1], |i| if i % 2 == 0 { 800.0 } else { -800.0 });
        let v = Tensor::from_fn(&[1, 8, 1], |i| i as f64);
        let out = wkv_forward(&k, &v, &t(&[1], &[0.0]), &t(&[1], &[0.0])).unwrap();
        assert!(out.is_finite());
    }

    #[test]
    fn rejects_non_finite() {
        let k = t(&[1, 1, 1], &[f64::NAN]);
        let v = t(&[1, 1, 1], &[0.0]);
        let w = t(&[1], &[0.0]);
        assert!(matches!(
            wkv_forward(&k, &v, &w, &w),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn zero_output_projection_zeroes_time_mixing() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let p = TimeMix::register(&mut store, "tm", 8, &mut rng);
        store.set(p.w_o, Tensor::zeros(&[8, 8])).unwrap();
        let tape = Tape::new();
        let b = store.bind(&tape);
        let x = tape.constant(init::randn(&mut rng, &[2, 6, 8]));
        let out = time_mixing(x, &p.bind(&b)).unwrap();
        assert_eq!(out.shape(), vec![2, 6, 8]);
        assert!(out.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mixing_zero_cases() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let p = ChannelMix::register(&mut store, "cm", 4, 8, &mut rng);
        let tape = Tape::new();
        let b = store.bind(&tape);
        let x = tape.constant(Tensor::zeros(&[1, 3, 4]));
        let out = channel_mixing(x, &p.bind(&b)).unwrap();
        assert!(out.value().data().iter().all(|&v| v == 0.0));

        store.set(p.w_k, Tensor::zeros(&[4, 8])).unwrap();
        let tape = Tape::new();
        let b = store.bind(&tape);
        let x = tape.constant(init::randn(&mut rng, &[1, 3, 4]));
        let out = channel_mixing(x, &p.bind(&b)).unwrap();
        assert!(out.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        let w = initial_decay(3, 8);
        assert!(softplus(w) > 0.0);
    }

    use rand::SeedableRng;
    use crate::gradcheck::{grad_check, weighted_sum};
    use proptest::prelude::*;

    /// Direct double sum over the history, no shifting.
    fn wkv_oracle(k: &[f64], v: &[f64], w_raw: &[f64], u: &[f64], l: usize, d: usize) -> Vec<f64> {
        let mut out = vec![0.0; l * d];
        for c in 0..d {
            let w = (1.0 + w_raw[c].exp()).ln();
            for t in 0..l {
                let bonus = (u[c] + k[t * d + c]).exp();
                let mut num = bonus * v[t * d + c];
                let mut den = bonus;
                for i in 0..t {
                    let e = (-((t - 1 - i) as f64) * w + k[i * d + c]).exp();
                    num += e * v[i * d + c];
                    den += e;
                }
                out[t * d + c] = num / den;
            }
        }
        out
    }

    fn random_case(seed: u64, l: usize, d: usize) -> [Tensor<f64>; 4] {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        [
            init::uniform(&mut rng, &[1, l, d], 3.0),
            init::uniform(&mut rng, &[1, l, d], 2.0),
            init::uniform(&mut rng, &[d], 2.0),
            init::uniform(&mut rng, &[d], 1.0),
        ]
    }

    #[test]
    fn scan_matches_double_sum() {
        for seed in 0..20 {
            let [k, v, w, u] = random_case(seed, 7, 3);
            let got = wkv_forward(&k, &v, &w, &u).unwrap();
            let want = wkv_oracle(k.data(), v.data(), w.data(), u.data(), 7, 3);
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() / b.abs().max(1e-300) < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn key_shift_cancels() {
        let [k, v, w, u] = random_case(3, 9, 4);
        let a = wkv_forward(&k, &v, &w, &u).unwrap();
        let b = wkv_forward(&k.map(|x| x + 37.5), &v, &w, &u).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn wkv_gradcheck() {
        for seed in 0..3 {
            let inputs = random_case(100 + seed, 6, 3);
            let rep = grad_check(
                |_, x| weighted_sum(wkv_scan(x[0], x[1], x[2], x[3])?, seed),
                &inputs,
                1e-6,
                1e-5,
            );
            assert!(rep.passed(), "{rep}");
        }
    }

    #[test]
    fn wkv_gradcheck_long_and_steep() {
        // strong keys and slow decay stress the shifted backward
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let inputs: [Tensor<f64>; 4] = [
            init::uniform(&mut rng, &[2, 16, 2], 12.0),
            init::uniform(&mut rng, &[2, 16, 2], 1.0),
            Tensor::from_f64(&[2], &[-4.0, 3.0]).unwrap(),
            Tensor::from_f64(&[2], &[2.0, -2.0]).unwrap(),
        ];
        let rep = grad_check(
            |_, x| weighted_sum(wkv_scan(x[0], x[1], x[2], x[3])?, 5),
            &inputs,
            1e-6,
            1e-5,
        );
        assert!(rep.passed(), "{rep}");
    }

    #[test]
    fn sign_flip_fault_is_detected() {
        let inputs = random_case(42, 5, 2);
        set_wkv_backward_sign_flip(true);
        let rep = grad_check(
            |_, x| weighted_sum(wkv_scan(x[0], x[1], x[2], x[3])?, 1),
            &inputs,
            1e-6,
            1e-5,
        );
        set_wkv_backward_sign_flip(false);
        assert!(!rep.passed());
    }

    fn all_params(store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
        store.iter().map(|(_, p)| p.value.clone()).collect()
    }

    #[test]
    fn time_mixing_gradcheck() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let p = TimeMix::register(&mut store, "tm", 4, &mut rng);
        // move the mixes off their symmetric start
        for id in [p.mix_r, p.mix_k, p.mix_v] {
            store.set(id, init::uniform(&mut rng, &[4], 1.0)).unwrap();
        }
        let mut inputs = vec![init::randn(&mut rng, &[2, 5, 4])];
        inputs.extend(all_params(&store));
        let rep = grad_check(
            |_, v| {
                let b = Binding::from_vars(v[1..].to_vec());
                weighted_sum(time_mixing(v[0], &p.bind(&b))?, 2)
            },
            &inputs,
            1e-6,
            1e-4,
        );
        assert!(rep.passed(), "{rep}");
    }

    #[test]
    fn channel_mixing_gradcheck() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let p = ChannelMix::register(&mut store, "cm", 4, 8, &mut rng);
        for id in [p.mix_r, p.mix_k] {
            store.set(id, init::uniform(&mut rng, &[4], 1.0)).unwrap();
        }
        let mut inputs = vec![init::randn(&mut rng, &[2, 5, 4])];
        inputs.extend(all_params(&store));
        let rep = grad_check(
            |_, v| {
                let b = Binding::from_vars(v[1..].to_vec());
                weighted_sum(channel_mixing(v[0], &p.bind(&b))?, 3)
            },
            &inputs,
            1e-6,
            1e-4,
        );
        assert!(rep.passed(), "{rep}");
    }

    #[test]
    fn channel_mixing_matches_loops() {
        let (l, d, f) = (3, 4, 8);
        let mut store = ParamStore::<f64>::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let p = ChannelMix::register(&mut store, "cm", d, f, &mut rng);
        store.set(p.mix_r, init::uniform(&mut rng, &[d], 1.0)).unwrap();
        store.set(p.mix_k, init::uniform(&mut rng, &[d], 1.0)).unwrap();
        let x = init::randn::<f64>(&mut rng, &[1, l, d]);
        let tape = Tape::new();
        let b = store.bind(&tape);
        let got = channel_mixing(tape.constant(x.clone()), &p.bind(&b)).unwrap().value();

        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let g = |id: ParamId| store.get(id).data().to_vec();
        let (wr, wk, wv, mr, mk) = (g(p.w_r), g(p.w_k), g(p.w_v), g(p.mix_r), g(p.mix_k));
        let xs = x.data();
        for t in 0..l {
            let prev = |c: usize| if t == 0 { 0.0 } else { xs[(t - 1) * d + c] };
            let xr: Vec<f64> = (0..d).map(|c| sig(mr[c]) * xs[t * d + c] + (1.0 - sig(mr[c])) * prev(c)).collect();
            let xk: Vec<f64> = (0..d).map(|c| sig(mk[c]) * xs[t * d + c] + (1.0 - sig(mk[c])) * prev(c)).collect();
            let kk: Vec<f64> = (0..f)
                .map(|j| (0..d).map(|c| xk[c] * wk[c * f + j]).sum::<f64>().max(0.0).powi(2))
                .collect();
            for o in 0..d {
                let r: f64 = (0..d).map(|c| xr[c] * wr[c * d + o]).sum();
                let vv: f64 = (0..f).map(|j| kk[j] * wv[j * d + o]).sum();
                let want = sig(r) * vv;
                assert!((got.data()[t * d + o] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn receptance_gate_shrinks() {
        // |sigmoid(r) * wkv| <= |wkv| elementwise, checked before W_o
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(14);
        let mut store = ParamStore::<f64>::new();
        let p = TimeMix::register(&mut store, "tm", 6, &mut rng);
        let tape = Tape::new();
        let b = store.bind(&tape);
        let pv = p.bind(&b);
        let x = tape.constant(init::randn(&mut rng, &[2, 5, 6]));
        let r = token_shift(x, pv.mix_r.sigmoid().unwrap()).unwrap().matmul(pv.w_r).unwrap();
        let k = token_shift(x, pv.mix_k.sigmoid().unwrap()).unwrap().matmul(pv.w_k).unwrap();
        let v = token_shift(x, pv.mix_v.sigmoid().unwrap()).unwrap().matmul(pv.w_v).unwrap();
        let wkv = wkv_scan(k, v, pv.decay, pv.bonus).unwrap();
        let gated = r.sigmoid().unwrap().mul(wkv).unwrap();
        for (g, w) in gated.value().data().iter().zip(wkv.value().data()) {
            assert!(g.abs() <= w.abs());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn convex_and_causal(seed in any::<u64>(), l in 1usize..16, d in 1usize..8, cut in 0usize..16) {
            let [k, v, w, u] = random_case(seed, l, d);
            let out = wkv_forward(&k, &v, &w, &u).unwrap();
            for c in 0..d {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for t in 0..l {
                    let vt = v.data()[t * d + c];
                    lo = lo.min(vt);
                    hi = hi.max(vt);
                    let y = out.data()[t * d + c];
                    prop_assert!(y >= lo - 1e-12 && y <= hi + 1e-12);
                }
            }
            let cut = cut % l;
            let mut k2 = k.clone();
            let mut v2 = v.clone();
            for i in (cut + 1) * d..l * d {
                k2.data_mut()[i] += 1.5;
                v2.data_mut()[i] -= 0.75;
            }
            let out2 = wkv_forward(&k2, &v2, &w, &u).unwrap();
            prop_assert_eq!(&out.data()[..(cut + 1) * d], &out2.data()[..(cut + 1) * d]);
        }
    }
}
