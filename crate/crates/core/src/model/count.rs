//! Analytic parameter and multiply-accumulate tallies.
//!
//! MAC convention, for a single image:
//! - a product `[L, K] x [K, M]` costs `L * K * M`;
//! - a 3x3 convolution costs `H * W * C_out * C_in * 9`;
//! - the WKV scan costs 6 per token and channel (three products to emit an
//!   output and three to update the state);
//! - normalization, nonlinearities, spikes, biases, residual additions and
//!   elementwise gates are not counted.
//!
//! Patch and time embeddings run once. Blocks and the final layer run once per
//! spike step.

use super::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Counts {
    pub params: usize,
    /// Embedding MACs, paid once per forward pass.
    pub macs_embed: usize,
    /// Block and final-layer MACs for one spike step.
    pub macs_per_spike_step: usize,
    /// `macs_embed + spike_steps * macs_per_spike_step`
    pub macs_total: usize,
}

pub fn count_params_macs(cfg: &ModelConfig) -> Counts {
    let d = cfg.hidden_dim;
    let f = cfg.ff_dim();
    let n = cfg.num_patches();
    let pd = cfg.patch_dim();
    let c = cfg.channels;
    let hw = cfg.image_size * cfg.image_size;
    let blocks = cfg.num_blocks();
    let outs = cfg.num_output_blocks;
    let l = 2 * n;

    let embed_params = pd * d + d + n * d + 2 * (d * d + d);
    let block_params = 4 * d            // two layer norms
        + 4 * d * d + 5 * d             // time mixing
        + d * d + 2 * d * f + 2 * d     // channel mixing
        + 2 * d * n                     // reconstruction projections
        + n * d; // reconstruction token
    let skip_params = outs * 2 * d * d;
    let final_params = d * pd + pd + c * c * 9 + c;
    let params = embed_params + blocks * block_params + skip_params + final_params;

    let macs_embed = n * pd * d + 2 * d * d;
    let block_macs = 4 * l * d * d + 6 * l * d + l * d * d + 2 * l * d * f + 2 * n * n * d;
    let macs_per_spike_step = blocks * block_macs + outs * n * 2 * d * d + n * d * pd + hw * c * c * 9;
    Counts {
        params,
        macs_embed,
        macs_per_spike_step,
        macs_total: macs_embed + cfg.spike_steps * macs_per_spike_step,
    }
}
