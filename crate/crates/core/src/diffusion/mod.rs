//! Denoising diffusion around the spiking backbone: noise schedule, the
//! noise-prediction objective, AdamW training, and ancestral sampling.
//!
//! Training evaluates every batch item on its own tape and reduces the
//! per-item gradients in item order, so results do not depend on how many
//! worker threads are used.

mod optim;
mod schedule;

pub use optim::{AdamConfig, AdamW};
pub use schedule::{make_schedule, q_sample, NoiseSchedule, ScheduleKind};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init;
use crate::model::SditModel;
use crate::params::GradSet;
use crate::real::{r, Real};
use crate::tensor::{Tape, Tensor, Var};

/// `mean((pred - eps)^2)`
pub fn noise_mse<'t, T: Real>(pred: Var<'t, T>, eps: Var<'t, T>) -> Result<Var<'t, T>> {
    let d = pred.sub(eps)?;
    d.mul(d)?.mean()
}

/// Loss and parameter gradients for noisy inputs built from `x0`, `t` and
/// `eps`. The gradient is that of `loss * grad_scale`.
pub fn loss_with<T: Real>(
    model: &SditModel<T>,
    sched: &NoiseSchedule,
    x0: &Tensor<T>,
    t: &[usize],
    eps: &Tensor<T>,
    grad_scale: f64,
) -> Result<(f64, GradSet<T>)> {
    let batch = x0.shape().first().copied().unwrap_or(0);
    if t.len() != batch {
        return Err(Error::shape("loss_step", format!("{} timesteps for batch {batch}", t.len())));
    }
    let item = x0.numel() / batch.max(1);
    let mut noisy = Vec::with_capacity(x0.numel());
    for (b, &tb) in t.iter().enumerate() {
        let rows = b * item..(b + 1) * item;
        let x = Tensor::new(&[item], x0.data()[rows.clone()].to_vec())?;
        let e = Tensor::new(&[item], eps.data()[rows].to_vec())?;
        noisy.extend(sched.q_sample(&x, tb, &e)?.into_data());
    }
    let x_t = Tensor::new(x0.shape(), noisy)?;

    let tape = Tape::new();
    let binding = model.params.bind(&tape);
    let mut state = model.new_state();
    let pred = model.forward(&binding, tape.constant(x_t), t, &mut state)?;
    let loss = noise_mse(pred, tape.constant(eps.clone()))?;
    let value = loss.value().item().expect("scalar").to_f64_lossy();
    let scaled = if grad_scale == 1.0 { loss } else { loss.scale(r(grad_scale))? };
    let grads = tape.backward(scaled)?;
    Ok((value, binding.collect(&grads)))
}

/// One loss evaluation with `t` uniform per item and standard normal noise.
pub fn loss_step<T: Real>(
    model: &SditModel<T>,
    sched: &NoiseSchedule,
    x0: &Tensor<T>,
    rng: &mut impl Rng,
) -> Result<(f64, GradSet<T>)> {
    let batch = x0.shape().first().copied().unwrap_or(0);
    let t: Vec<usize> = (0..batch).map(|_| rng.random_range(0..sched.len())).collect();
    let eps = init::randn(rng, x0.shape());
    loss_with(model, sched, x0, &t, &eps, 1.0)
}

/// Row `i` of a `[M, ...]` tensor as a `[1, ...]` tensor.
pub fn take_row<T: Real>(x: &Tensor<T>, i: usize) -> Tensor<T> {
    let rows = x.shape()[0];
    let item = x.numel() / rows;
    let mut shape = x.shape().to_vec();
    shape[0] = 1;
    Tensor::new(&shape, x.data()[i * item..(i + 1) * item].to_vec()).expect("row shape")
}

/// Runs `f` on contiguous chunks of `items` across up to `jobs` threads and
/// returns the results in item order.
fn par_map<I: Sync, O: Send>(items: &[I], jobs: usize, f: impl Fn(&I) -> O + Sync) -> Vec<O> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Model, optimizer and randomness of a training run.
#[derive(Clone, Debug)]
pub struct Trainer<T: Real> {
    pub model: SditModel<T>,
    pub schedule: NoiseSchedule,
    pub opt: AdamW<T>,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub batch_size: usize,
    pub jobs: usize,
}

struct Item<T> {
    x0: Tensor<T>,
    t: usize,
    eps: Tensor<T>,
}

impl<T: Real> Trainer<T> {
    pub fn new(
        model: SditModel<T>,
        schedule: NoiseSchedule,
        adam: AdamConfig,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if schedule.len() != model.config.diffusion_steps {
            return Err(Error::Config(format!(
                "schedule has {} steps but the model embeds {}",
                schedule.len(),
                model.config.diffusion_steps
            )));
        }
        if batch_size == 0 {
            return Err(Error::BadParam("batch_size must be >= 1".into()));
        }
        let opt = AdamW::new(adam, &model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(Self {
            model,
            schedule,
            opt,
            rng,
            step: 0,
            batch_size,
            jobs: 1,
        })
    }

    /// One optimizer step on a minibatch drawn with replacement from
    /// `data` (`[M, C, H, W]`). Returns the minibatch loss.
    pub fn train_step(&mut self, data: &Tensor<T>) -> Result<f64> {
        let m = data.shape()[0];
        let cfg = &self.model.config;
        let want = [m, cfg.channels, cfg.image_size, cfg.image_size];
        if data.shape() != want {
            return Err(Error::shape("train_step", format!("data {:?}, model wants {want:?}", data.shape())));
        }
        let items: Vec<Item<T>> = (0..self.batch_size)
            .map(|_| {
                let i = self.rng.random_range(0..m);
                let t = self.rng.random_range(0..self.schedule.len());
                let eps = init::randn(&mut self.rng, &[1, want[1], want[2], want[3]]);
                Item {
                    x0: take_row(data, i),
                    t,
                    eps,
                }
            })
            .collect();

        let scale = 1.0 / self.batch_size as f64;
        let (model, sched) = (&self.model, &self.schedule);
        let results = par_map(&items, self.jobs, |it| {
            loss_with(model, sched, &it.x0, &[it.t], &it.eps, scale)
        });
        let mut loss = 0.0;
        let mut total: Option<GradSet<T>> = None;
        for res in results {
            let (l, g) = res?;
            loss += l;
            match &mut total {
                None => total = Some(g),
                Some(acc) => acc.add_assign(&g),
            }
        }
        self.model.params.zero_grads();
        self.model.params.accumulate(&total.expect("batch_size >= 1"));
        self.opt.step(&mut self.model.params)?;
        self.step += 1;
        Ok(loss * scale)
    }
}

/// Noise prediction for a batch, split row-wise across `jobs` threads.
/// Rows are independent, so the result does not depend on `jobs`.
pub fn predict_batch<T: Real>(
    model: &SditModel<T>,
    x: &Tensor<T>,
    t: usize,
    jobs: usize,
) -> Result<Tensor<T>> {
    let n = x.shape()[0];
    let rows: Vec<usize> = (0..n).collect();
    let jobs = jobs.clamp(1, n.max(1));
    let chunk = n.div_ceil(jobs);
    let chunks: Vec<&[usize]> = rows.chunks(chunk).collect();
    let parts = par_map(&chunks, jobs, |c| {
        let item = x.numel() / n;
        let mut shape = x.shape().to_vec();
        shape[0] = c.len();
        let lo = c[0] * item;
        let sub = Tensor::new(&shape, x.data()[lo..lo + c.len() * item].to_vec())?;
        model.predict(&sub, &vec![t; c.len()])
    });
    let mut data = Vec::with_capacity(x.numel());
    for p in parts {
        data.extend(p?.into_data());
    }
    Tensor::new(x.shape(), data)
}

/// Ancestral sampling from pure noise. With `stride = s` the chain visits
/// steps `T-1, T-1-s, ..., s-1` using the matching respaced betas; `s = 1`
/// is the full chain. Outputs are clamped to `[-1, 1]` at the end.
pub fn ddpm_sample<T: Real>(
    model: &SditModel<T>,
    sched: &NoiseSchedule,
    n: usize,
    rng: &mut impl Rng,
    stride: Option<usize>,
) -> Result<Tensor<T>> {
    ddpm_sample_jobs(model, sched, n, rng, stride, 1)
}

pub fn ddpm_sample_jobs<T: Real>(
    model: &SditModel<T>,
    sched: &NoiseSchedule,
    n: usize,
    rng: &mut impl Rng,
    stride: Option<usize>,
    jobs: usize,
) -> Result<Tensor<T>> {
    let steps = sched.len();
    if steps != model.config.diffusion_steps {
        return Err(Error::Config(format!(
            "schedule has {steps} steps but the model embeds {}",
            model.config.diffusion_steps
        )));
    }
    let s = stride.unwrap_or(1);
    if s == 0 || steps % s != 0 {
        return Err(Error::BadParam(format!("stride {s} must divide {steps} diffusion steps")));
    }
    if n == 0 {
        return Err(Error::BadParam("sample count must be >= 1".into()));
    }
    let cfg = &model.config;
    let shape = [n, cfg.channels, cfg.image_size, cfg.image_size];
    let mut x = init::randn::<T>(rng, &shape);
    let visit: Vec<usize> = (1..=steps / s).rev().map(|i| i * s - 1).collect();
    for (pos, &t) in visit.iter().enumerate() {
        let ab = sched.alpha_bars[t];
        let ab_prev = visit.get(pos + 1).map_or(1.0, |&p| sched.alpha_bars[p]);
        let alpha = ab / ab_prev;
        let beta = 1.0 - alpha;
        let eps = predict_batch(model, &x, t, jobs)?;
        let c1: T = r(1.0 / alpha.sqrt());
        let c2: T = r(beta / (1.0 - ab).sqrt());
        let last = pos + 1 == visit.len();
        let z = if last { None } else { Some(init::randn::<T>(rng, &shape)) };
        let sigma: T = r(beta.sqrt());
        let data = x
            .data()
            .iter()
            .zip(eps.data())
            .enumerate()
            .map(|(i, (&xv, &ev))| {
                let mean = c1 * (xv - c2 * ev);
                match &z {
                    Some(z) => mean + sigma * z.data()[i],
                    None => mean,
                }
            })
            .collect();
        x = Tensor::new(&shape, data)?;
        if !x.is_finite() {
            return Err(Error::NonFinite { op: "ddpm_sample" });
        }
    }
    Ok(x.map(|v| v.max(-T::one()).min(T::one())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 4,
            hidden_dim: 8,
            diffusion_steps: 10,
            ..ModelConfig::desk()
        }
    }

    fn model(seed: u64) -> SditModel<f64> {
        SditModel::new(tiny(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn mse_of_exact_prediction_is_zero() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let eps = tape.constant(init::randn(&mut rng, &[4, 1, 4, 4]));
        assert_eq!(noise_mse(eps, eps).unwrap().value().item(), Some(0.0));
    }

    #[test]
    fn mse_of_zero_prediction_is_unit() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps = tape.constant(init::randn(&mut rng, &[64, 1, 16, 16]));
        let zero = tape.constant(Tensor::zeros(&[64, 1, 16, 16]));
        let l = noise_mse(zero, eps).unwrap().value().item().unwrap();
        assert!((l - 1.0).abs() < 0.05, "{l}");
    }

    #[test]
    fn loss_is_finite_and_positive() {
        let m = model(2);
        let sched = NoiseSchedule::linear_for(10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = init::uniform(&mut rng, &[3, 1, 4, 4], 1.0);
        let (l, g) = loss_step(&m, &sched, &x0, &mut rng).unwrap();
        assert!(l.is_finite() && l > 0.0);
        assert_eq!(g.0.len(), m.params.len());
    }

    #[test]
    fn batch_gradient_is_mean_of_items() {
        let m = model(4);
        let sched = NoiseSchedule::linear_for(10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = init::uniform(&mut rng, &[2, 1, 4, 4], 1.0);
        let eps = init::randn(&mut rng, &[2, 1, 4, 4]);
        let (l, g) = loss_with(&m, &sched, &x0, &[1, 8], &eps, 1.0).unwrap();
        let (l0, mut g0) = loss_with(&m, &sched, &take_row(&x0, 0), &[1], &take_row(&eps, 0), 0.5).unwrap();
        let (l1, g1) = loss_with(&m, &sched, &take_row(&x0, 1), &[8], &take_row(&eps, 1), 0.5).unwrap();
        assert!((l - 0.5 * (l0 + l1)).abs() < 1e-12);
        g0.add_assign(&g1);
        for (a, b) in g.0.iter().zip(&g0.0) {
            if let (Some(a), Some(b)) = (a, b) {
                assert!(a.max_abs_diff(b) < 1e-10);
            }
        }
    }

    #[test]
    fn training_is_independent_of_jobs() {
        let sched = NoiseSchedule::linear_for(10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = init::uniform(&mut rng, &[5, 1, 4, 4], 1.0);
        let run = |jobs| {
            let mut tr = Trainer::new(model(7), sched.clone(), AdamConfig::default(), 4, 9).unwrap();
            tr.jobs = jobs;
            let losses: Vec<f64> = (0..3).map(|_| tr.train_step(&data).unwrap()).collect();
            (losses, tr.model.params.get(tr.model.patch_w).clone())
        };
        let (a, wa) = run(1);
        let (b, wb) = run(3);
        assert_eq!(a, b);
        assert_eq!(wa, wb);
    }

    #[test]
    fn sampler_contract() {
        let m = model(8);
        let sched = NoiseSchedule::linear_for(10).unwrap();
        let a = ddpm_sample(&m, &sched, 3, &mut ChaCha8Rng::seed_from_u64(1), None).unwrap();
        assert_eq!(a.shape(), &[3, 1, 4, 4]);
        assert!(a.data().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
        let b = ddpm_sample_jobs(&m, &sched, 3, &mut ChaCha8Rng::seed_from_u64(1), None, 2).unwrap();
        assert_eq!(a, b);
        let strided = ddpm_sample(&m, &sched, 2, &mut ChaCha8Rng::seed_from_u64(1), Some(5)).unwrap();
        assert_eq!(strided.shape(), &[2, 1, 4, 4]);
        assert!(ddpm_sample(&m, &sched, 2, &mut ChaCha8Rng::seed_from_u64(1), Some(3)).is_err());
    }

    #[test]
    fn single_step_chain() {
        let cfg = ModelConfig {
            diffusion_steps: 1,
            ..tiny()
        };
        let m = SditModel::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let sched = NoiseSchedule::linear_for(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = ddpm_sample(&m, &sched, 1, &mut rng, None).unwrap();

        // same noise, formula applied by hand
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x_t = init::randn::<f64>(&mut rng, &[1, 1, 4, 4]);
        let eps = m.predict(&x_t, &[0]).unwrap();
        let (a, b) = (sched.alphas[0], sched.betas[0]);
        let want = Tensor::from_fn(&[1, 1, 4, 4], |i| {
            ((x_t.data()[i] - b / (1.0 - sched.alpha_bars[0]).sqrt() * eps.data()[i]) / a.sqrt())
                .clamp(-1.0, 1.0)
        });
        assert!(x.max_abs_diff(&want) < 1e-12);
    }
}
