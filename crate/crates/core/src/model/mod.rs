//! The spiking diffusion transformer.
//!
//! Image patches and the diffusion step are embedded once. The blocks and the
//! final layer then run for `spike_steps` steps with persistent neuron state,
//! and the per-step noise predictions are averaged.
//!
//! Block order is input, mid, output. Output block `j` receives the output of
//! input block `num_input_blocks - 1 - j` through a skip projection.

mod block;
mod config;
mod count;
pub mod embed;

pub use block::{
    block_forward, reconstruction_apply, skip_merge, tile_tokens, Block, BlockParams,
    RECON_INIT_SCALE,
};
pub use config::ModelConfig;
pub(crate) use config::{fmt_f64, parse};
pub use count::{count_params_macs, Counts};
pub use embed::{patch_embed, timestep_embed};

use rand::Rng;

use crate::error::{Error, Result};
use crate::init;
use crate::params::{Binding, ParamId, ParamStore};
use crate::real::Real;
use crate::spiking::LifState;
use crate::tensor::{Tape, Tensor, Var};

/// Parameter handles of the whole network; values live in `params`.
#[derive(Clone, Debug)]
pub struct SditModel<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub pos_embed: ParamId,
    /// `[w1, b1, w2, b2]`
    pub time_mlp: [ParamId; 4],
    pub blocks: Vec<BlockParams>,
    pub recon_tokens: Vec<ParamId>,
    pub skip_projs: Vec<ParamId>,
    pub final_w: ParamId,
    pub final_b: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
}

/// Neuron state of one forward pass: two layers per block.
#[derive(Debug)]
pub struct NetworkState<'t, T: Real> {
    pub blocks: Vec<[LifState<'t, T>; 2]>,
}

impl<'t, T: Real> NetworkState<'t, T> {
    pub fn new(num_blocks: usize) -> Self {
        Self {
            blocks: (0..num_blocks)
                .map(|_| [LifState::new(), LifState::new()])
                .collect(),
        }
    }

    pub fn is_fresh(&self) -> bool {
        self.blocks.iter().flatten().all(LifState::is_fresh)
    }

    pub fn reset(&mut self) {
        for s in self.blocks.iter_mut().flatten() {
            *s = LifState::new();
        }
    }
}

/// Instrumentation hooks for a forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardProbe<T: Real> {
    /// Adds the given offset to the skip copy of one input block's output;
    /// the main path is left untouched.
    pub perturb_skip: Option<(usize, T)>,
    /// Per spike step, the skip input seen by each output block.
    pub skips: Vec<Vec<Tensor<T>>>,
    /// Per spike step, the noise prediction before averaging.
    pub step_outputs: Vec<Tensor<T>>,
}

impl<T: Real> SditModel<T> {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let n = config.num_patches();
        let pd = config.patch_dim();
        let c = config.channels;
        let mut p = ParamStore::new();

        let patch_w = p.add("patch_embed.w", init::linear(rng, pd, d));
        let patch_b = p.add("patch_embed.b", Tensor::zeros(&[d]));
        let pos_embed = p.add("pos_embed", init::normal(rng, &[n, d], 0.02));
        let time_mlp = [
            p.add("time_embed.w1", init::linear(rng, d, d)),
            p.add("time_embed.b1", Tensor::zeros(&[d])),
            p.add("time_embed.w2", init::linear(rng, d, d)),
            p.add("time_embed.b2", Tensor::zeros(&[d])),
        ];

        let mut blocks = Vec::new();
        let mut recon_tokens = Vec::new();
        for i in 0..config.num_blocks() {
            let prefix = format!("blocks.{i}");
            blocks.push(Block::register(&mut p, &prefix, d, config.ff_dim(), n, rng));
            recon_tokens.push(p.add(format!("{prefix}.recon_token"), init::normal(rng, &[n, d], 0.02)));
        }
        let skip_projs = (0..config.num_output_blocks)
            .map(|j| p.add(format!("skip_proj.{j}"), init::linear(rng, 2 * d, d)))
            .collect();

        let final_w = p.add("final.w", init::linear(rng, d, pd));
        let final_b = p.add("final.b", Tensor::zeros(&[pd]));
        // Centered delta: the conv starts as the identity on each channel.
        let conv_w = p.add(
            "final.conv_w",
            Tensor::from_fn(&[c, c, 3, 3], |i| {
                let (o, rest) = (i / (c * 9), i % (c * 9));
                if rest / 9 == o && rest % 9 == 4 {
                    T::one()
                } else {
                    T::zero()
                }
            }),
        );
        let conv_b = p.add("final.conv_b", Tensor::zeros(&[c]));

        let mut model = Self {
            config,
            params: p,
            patch_w,
            patch_b,
            pos_embed,
            time_mlp,
            blocks,
            recon_tokens,
            skip_projs,
            final_w,
            final_b,
            conv_w,
            conv_b,
        };
        if !model.config.recon_module {
            model.disable_reconstruction()?;
        }
        Ok(model)
    }

    /// Zeroes and freezes every reconstruction projection.
    pub fn disable_reconstruction(&mut self) -> Result<()> {
        self.config.recon_module = false;
        for bp in self.blocks.clone() {
            for id in [bp.recon_wd, bp.recon_wn] {
                let shape = self.params.get(id).shape().to_vec();
                self.params.set(id, Tensor::zeros(&shape))?;
                self.params.freeze(id);
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    pub fn new_state<'t>(&self) -> NetworkState<'t, T> {
        NetworkState::new(self.blocks.len())
    }

    /// Predicted noise `[B, C, H, W]` for noisy images `x` at steps `t`.
    pub fn forward<'t>(
        &self,
        b: &Binding<'t, T>,
        x: Var<'t, T>,
        t: &[usize],
        state: &mut NetworkState<'t, T>,
    ) -> Result<Var<'t, T>> {
        self.forward_probed(b, x, t, state, None)
    }

    pub fn forward_probed<'t>(
        &self,
        b: &Binding<'t, T>,
        x: Var<'t, T>,
        t: &[usize],
        state: &mut NetworkState<'t, T>,
        mut probe: Option<&mut ForwardProbe<T>>,
    ) -> Result<Var<'t, T>> {
        let cfg = &self.config;
        let shape = x.shape();
        let want = [shape.first().copied().unwrap_or(0), cfg.channels, cfg.image_size, cfg.image_size];
        if shape != want {
            return Err(Error::shape("model_forward", format!("expected {want:?}, got {shape:?}")));
        }
        if t.len() != shape[0] {
            return Err(Error::shape(
                "model_forward",
                format!("{} timesteps for batch {}", t.len(), shape[0]),
            ));
        }
        if state.blocks.len() != self.blocks.len() || !state.is_fresh() {
            return Err(Error::StaleState);
        }

        let n = cfg.num_patches();
        let tokens = patch_embed(x, cfg.patch_size, b[self.patch_w], b[self.patch_b], b[self.pos_embed])?;
        let temb = timestep_embed(t, cfg.diffusion_steps, self.time_mlp.map(|id| b[id]))?;
        let h0 = tokens.add(embed::broadcast_tokens(temb, n)?)?;

        let blocks: Vec<_> = self.blocks.iter().map(|bp| bp.bind(b)).collect();
        let n_in = cfg.num_input_blocks;
        let n_mid = cfg.num_mid_blocks;
        let steps = cfg.spike_steps;
        let mut acc: Option<Var<'t, T>> = None;

        for _ in 0..steps {
            let mut h = h0;
            let mut skips = Vec::with_capacity(n_in);
            let mut seen = Vec::new();
            for (i, (bp, lif)) in blocks.iter().zip(state.blocks.iter_mut()).enumerate() {
                let z = b[self.recon_tokens[i]];
                let (x_skip, w_skip) = if i >= n_in + n_mid {
                    let j = i - n_in - n_mid;
                    let s: Var<'t, T> = skips.pop().expect("input and output block counts match");
                    if probe.is_some() {
                        seen.push((*s.value()).clone());
                    }
                    (Some(s), Some(b[self.skip_projs[j]]))
                } else {
                    (None, None)
                };
                h = block_forward(h, x_skip, w_skip, bp, z, lif, &cfg.lif, cfg.ln_eps, cfg.recon_module)?;
                if i < n_in {
                    let copy = match probe.as_deref() {
                        Some(ForwardProbe { perturb_skip: Some((k, delta)), .. }) if *k == i => {
                            h.offset(*delta)?
                        }
                        _ => h,
                    };
                    skips.push(copy);
                }
            }
            let out = self.final_layer(b, h)?;
            if let Some(p) = probe.as_deref_mut() {
                p.skips.push(seen);
                p.step_outputs.push((*out.value()).clone());
            }
            acc = Some(match acc {
                None => out,
                Some(a) => a.add(out)?,
            });
        }
        let sum = acc.expect("spike_steps >= 1");
        if steps == 1 {
            Ok(sum)
        } else {
            sum.scale(T::one() / T::from_usize(steps).expect("small integer"))
        }
    }

    fn final_layer<'t>(&self, b: &Binding<'t, T>, h: Var<'t, T>) -> Result<Var<'t, T>> {
        let cfg = &self.config;
        let patches = h.matmul(b[self.final_w])?.add(b[self.final_b])?;
        embed::unpatchify(patches, cfg.channels, cfg.patch_size)?.conv3x3(b[self.conv_w], b[self.conv_b])
    }

    /// Forward pass on a private tape with fresh neuron state.
    pub fn predict(&self, x: &Tensor<T>, t: &[usize]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let b = self.params.bind(&tape);
        let mut state = self.new_state();
        let xv = tape.constant(x.clone());
        let out = self.forward(&b, xv, t, &mut state)?;
        Ok((*out.value()).clone())
    }
}

/// Free-function form of [`SditModel::forward`].
pub fn model_forward<'t, T: Real>(
    model: &SditModel<T>,
    b: &Binding<'t, T>,
    x_t: Var<'t, T>,
    t: &[usize],
    state: &mut NetworkState<'t, T>,
) -> Result<Var<'t, T>> {
    model.forward(b, x_t, t, state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, weighted_sum};
    use crate::spiking::LifConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(steps: usize) -> ModelConfig {
        ModelConfig {
            image_size: 4,
            channels: 1,
            patch_size: 2,
            hidden_dim: 8,
            spike_steps: steps,
            ..ModelConfig::desk()
        }
    }

    fn model(cfg: ModelConfig, seed: u64) -> SditModel<f64> {
        SditModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn image(cfg: &ModelConfig, batch: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init::randn(&mut rng, &[batch, cfg.channels, cfg.image_size, cfg.image_size])
    }

    #[test]
    fn structure_invariants() {
        let m = model(ModelConfig::desk(), 0);
        assert_eq!(m.recon_tokens.len(), m.blocks.len());
        assert_eq!(m.skip_projs.len(), m.config.num_output_blocks);
        assert_eq!(m.params.get(m.pos_embed).shape(), &[16, 32]);
    }

    #[test]
    fn output_shape_and_determinism() {
        let cfg = ModelConfig::desk();
        let m = model(cfg.clone(), 1);
        let x = image(&cfg, 3, 2);
        let a = m.predict(&x, &[0, 10, 49]).unwrap();
        assert_eq!(a.shape(), x.shape());
        let b = m.predict(&x, &[0, 10, 49]).unwrap();
        assert_eq!(a, b);
        assert!(matches!(m.predict(&x, &[0, 10, 50]), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn stale_state_is_rejected() {
        let cfg = tiny(2);
        let m = model(cfg.clone(), 3);
        let tape = Tape::new();
        let b = m.params.bind(&tape);
        let x = tape.constant(image(&cfg, 1, 4));
        let mut state = m.new_state();
        m.forward(&b, x, &[1], &mut state).unwrap();
        assert!(matches!(m.forward(&b, x, &[1], &mut state), Err(Error::StaleState)));
        state.reset();
        assert!(m.forward(&b, x, &[1], &mut state).is_ok());
    }

    #[test]
    fn output_is_mean_of_steps() {
        let cfg = tiny(3);
        let m = model(cfg.clone(), 5);
        let tape = Tape::new();
        let b = m.params.bind(&tape);
        let x = tape.constant(image(&cfg, 2, 6));
        let mut probe = ForwardProbe::default();
        let out = m
            .forward_probed(&b, x, &[2, 3], &mut m.new_state(), Some(&mut probe))
            .unwrap()
            .value();
        assert_eq!(probe.step_outputs.len(), 3);
        let mean = Tensor::from_fn(out.shape(), |i| {
            probe.step_outputs.iter().map(|s| s.data()[i]).sum::<f64>() / 3.0
        });
        assert!(out.max_abs_diff(&mean) < 1e-14);
    }

    #[test]
    fn single_step_is_single_pass() {
        let cfg = tiny(1);
        let m = model(cfg.clone(), 7);
        let tape = Tape::new();
        let b = m.params.bind(&tape);
        let x = tape.constant(image(&cfg, 1, 8));
        let mut probe = ForwardProbe::default();
        let out = m
            .forward_probed(&b, x, &[0], &mut m.new_state(), Some(&mut probe))
            .unwrap()
            .value();
        assert_eq!(*out, probe.step_outputs[0]);
    }

    #[test]
    fn zeroed_wn_matches_ablation() {
        let cfg = ModelConfig::desk();
        let mut full = model(cfg.clone(), 9);
        for bp in full.blocks.clone() {
            full.params.set(bp.recon_wn, Tensor::zeros(&[16, 32])).unwrap();
        }
        let mut ablated = full.clone();
        ablated.disable_reconstruction().unwrap();
        let x = image(&cfg, 2, 10);
        let a = full.predict(&x, &[3, 40]).unwrap();
        let b = ablated.predict(&x, &[3, 40]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn skip_pairing() {
        let cfg = ModelConfig {
            num_input_blocks: 3,
            num_output_blocks: 3,
            ..tiny(2)
        };
        let m = model(cfg.clone(), 11);
        let x = image(&cfg, 1, 12);
        let run = |perturb| {
            let tape = Tape::new();
            let b = m.params.bind(&tape);
            let mut probe = ForwardProbe {
                perturb_skip: perturb,
                ..Default::default()
            };
            m.forward_probed(&b, tape.constant(x.clone()), &[5], &mut m.new_state(), Some(&mut probe))
                .unwrap();
            probe.skips
        };
        let base = run(None);
        for i in 0..3 {
            let marked = run(Some((i, 0.25)));
            for step in 0..cfg.spike_steps {
                for j in 0..3 {
                    let changed = base[step][j] != marked[step][j];
                    assert_eq!(changed, j == 2 - i, "input {i} output {j} step {step}");
                }
            }
        }
    }

    #[test]
    fn time_embedding_depends_on_step() {
        let m = model(ModelConfig::desk(), 13);
        let tape = Tape::new();
        let b = m.params.bind(&tape);
        let mlp = m.time_mlp.map(|id| b[id]);
        let e0 = timestep_embed(&[0], 50, mlp).unwrap().value();
        let e1 = timestep_embed(&[49], 50, mlp).unwrap().value();
        let again = timestep_embed(&[0], 50, mlp).unwrap().value();
        assert_eq!(e0, again);
        assert_eq!(e0.shape(), &[1, 32]);
        let norm = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm(&e0) - norm(&e1)).abs() > 1e-3);
    }

    #[test]
    fn model_gradcheck() {
        let mut cfg = tiny(2);
        cfg.lif = LifConfig::default().for_gradcheck();
        let mut m = model(cfg.clone(), 14);
        // make the reconstruction branch and final conv non-trivial
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for bp in m.blocks.clone() {
            for id in [bp.recon_wd, bp.recon_wn] {
                let shape = m.params.get(id).shape().to_vec();
                m.params.set(id, init::uniform(&mut rng, &shape, 0.3)).unwrap();
            }
        }
        m.params.set(m.conv_w, init::uniform(&mut rng, &[1, 1, 3, 3], 0.5)).unwrap();
        let x = image(&cfg, 1, 16);
        let mut inputs = vec![x];
        inputs.extend(m.params.iter().map(|(_, p)| p.value.clone()));
        let rep = grad_check(
            |_, v| {
                let b = Binding::from_vars(v[1..].to_vec());
                let out = m.forward(&b, v[0], &[7], &mut m.new_state())?;
                weighted_sum(out, 3)
            },
            &inputs,
            1e-6,
            1e-3,
        );
        assert!(rep.passed(), "{rep}");
    }
}
