//! Spiking transformer block with a reconstruction token.

use rand::Rng;

use crate::error::{Error, Result};
use crate::init;
use crate::params::{Binding, ParamId, ParamStore};
use crate::real::{r, Real};
use crate::rwkv::{channel_mixing, time_mixing, ChannelMix, TimeMix};
use crate::spiking::{lif_step, LifConfig, LifState};
use crate::tensor::{Tensor, Var};

/// Scale of the uniform init for the reconstruction projections.
pub const RECON_INIT_SCALE: f64 = 1e-3;

/// Parameters of one block, generic over storage or bound handles.
#[derive(Clone, Copy, Debug)]
pub struct Block<H> {
    pub ln1_gamma: H,
    pub ln1_beta: H,
    pub ln2_gamma: H,
    pub ln2_beta: H,
    pub time_mix: TimeMix<H>,
    pub channel_mix: ChannelMix<H>,
    /// `[D, N]`
    pub recon_wd: H,
    /// `[N, D]`
    pub recon_wn: H,
}

pub type BlockParams = Block<ParamId>;

impl Block<ParamId> {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        ff_dim: usize,
        tokens: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let ln1_gamma = store.add(format!("{prefix}.ln1.gamma"), Tensor::ones(&[dim]));
        let ln1_beta = store.add(format!("{prefix}.ln1.beta"), Tensor::zeros(&[dim]));
        let ln2_gamma = store.add(format!("{prefix}.ln2.gamma"), Tensor::ones(&[dim]));
        let ln2_beta = store.add(format!("{prefix}.ln2.beta"), Tensor::zeros(&[dim]));
        let time_mix = TimeMix::register(store, &format!("{prefix}.time_mix"), dim, rng);
        let channel_mix =
            ChannelMix::register(store, &format!("{prefix}.channel_mix"), dim, ff_dim, rng);
        let recon_wd = store.add(
            format!("{prefix}.recon.w_d"),
            init::uniform(rng, &[dim, tokens], RECON_INIT_SCALE),
        );
        let recon_wn = store.add(
            format!("{prefix}.recon.w_n"),
            init::uniform(rng, &[tokens, dim], RECON_INIT_SCALE),
        );
        Self {
            ln1_gamma,
            ln1_beta,
            ln2_gamma,
            ln2_beta,
            time_mix,
            channel_mix,
            recon_wd,
            recon_wn,
        }
    }

    pub fn bind<'t, T: Real>(&self, b: &Binding<'t, T>) -> Block<Var<'t, T>> {
        Block {
            ln1_gamma: b[self.ln1_gamma],
            ln1_beta: b[self.ln1_beta],
            ln2_gamma: b[self.ln2_gamma],
            ln2_beta: b[self.ln2_beta],
            time_mix: self.time_mix.bind(b),
            channel_mix: self.channel_mix.bind(b),
            recon_wd: b[self.recon_wd],
            recon_wn: b[self.recon_wn],
        }
    }
}

/// Projects `[x; x_skip]` (feature axis) back to width D; identity without a skip.
pub fn skip_merge<'t, T: Real>(
    x: Var<'t, T>,
    x_skip: Option<Var<'t, T>>,
    w_skip: Option<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let Some(skip) = x_skip else {
        return Ok(x);
    };
    if skip.shape() != x.shape() {
        return Err(Error::shape(
            "skip_merge",
            format!("x {:?} vs x_skip {:?}", x.shape(), skip.shape()),
        ));
    }
    let w = w_skip.ok_or_else(|| Error::BadParam("skip connection without a projection".into()))?;
    let axis = x.shape().len() - 1;
    Var::concat(&[x, skip], axis)?.matmul(w)
}

/// Splits off the reconstruction token and folds it back into the patch
/// tokens as a multiplicative correction. With `enabled == false` only the
/// split happens.
pub fn reconstruction_apply<'t, T: Real>(
    x_ffn: Var<'t, T>,
    w_d: Var<'t, T>,
    w_n: Var<'t, T>,
    enabled: bool,
) -> Result<Var<'t, T>> {
    let shape = x_ffn.shape();
    let n = w_d.shape()[1];
    if shape.len() != 3 || shape[1] != 2 * n {
        return Err(Error::shape(
            "reconstruction_apply",
            format!("expected [B, {}, D], got {shape:?}", 2 * n),
        ));
    }
    let parts = x_ffn.split(1, &[n, n])?;
    let (y, z) = (parts[0], parts[1]);
    if !enabled {
        return Ok(y);
    }
    let z_n = z.matmul(w_d)?.transpose()?.matmul(w_n)?;
    y.add(z_n.mul(y)?)
}

/// Repeats a `[N, D]` token table over the batch.
pub fn tile_tokens<'t, T: Real>(z: Var<'t, T>, batch: usize) -> Result<Var<'t, T>> {
    let mut shape = vec![batch];
    shape.extend(z.shape());
    z.tape().constant(Tensor::zeros(&shape)).add(z)
}

/// One block for one spike step. `lif` holds the post-Time-Mixing and
/// post-Channel-Mixing neuron layers.
#[allow(clippy::too_many_arguments)]
pub fn block_forward<'t, T: Real>(
    x: Var<'t, T>,
    x_skip: Option<Var<'t, T>>,
    w_skip: Option<Var<'t, T>>,
    bp: &Block<Var<'t, T>>,
    z: Var<'t, T>,
    lif: &mut [LifState<'t, T>; 2],
    lif_cfg: &LifConfig,
    ln_eps: f64,
    recon_enabled: bool,
) -> Result<Var<'t, T>> {
    let eps: T = r(ln_eps);
    let x = skip_merge(x, x_skip, w_skip)?;
    let batch = x.shape()[0];
    let x_hat = Var::concat(&[x, tile_tokens(z, batch)?], 1)?;

    let tm = time_mixing(x_hat.layer_norm(bp.ln1_gamma, bp.ln1_beta, eps)?, &bp.time_mix)?;
    let x_attn = x_hat.add(lif_step(tm, &mut lif[0], lif_cfg)?)?;

    let cm = channel_mixing(x_attn.layer_norm(bp.ln2_gamma, bp.ln2_beta, eps)?, &bp.channel_mix)?;
    let x_ffn = x_attn.add(lif_step(cm, &mut lif[1], lif_cfg)?)?;

    reconstruction_apply(x_ffn, bp.recon_wd, bp.recon_wn, recon_enabled)
}
