use crate::error::{Error, Result};
use crate::real::{r, Real};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// Noise levels of the forward process, kept at 64-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

/// Linear betas from `beta_start` to `beta_end` over `steps` steps.
pub fn make_schedule(
    kind: ScheduleKind,
    steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::BadRange("diffusion steps must be >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::BadRange(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect(),
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    /// Linear 1e-4 to 0.02 for 1000 steps; shorter chains scale both ends by
    /// `1000 / steps` so the final signal level stays near zero.
    pub fn linear_for(steps: usize) -> Result<Self> {
        let scale = 1000.0 / steps.max(1) as f64;
        let start = (1e-4 * scale).min(0.5);
        let end = (0.02 * scale).min(0.999).max(start);
        make_schedule(ScheduleKind::Linear, steps, start, end)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::OutOfRange {
                what: "timestep",
                value: t.to_string(),
                range: format!("[0, {})", self.len()),
            });
        }
        Ok(())
    }

    /// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`
    pub fn q_sample<T: Real>(&self, x0: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(t)?;
        if x0.shape() != eps.shape() {
            return Err(Error::shape(
                "q_sample",
                format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape()),
            ));
        }
        let ab = self.alpha_bars[t];
        let (a, b): (T, T) = (r(ab.sqrt()), r((1.0 - ab).sqrt()));
        let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + b * e).collect();
        Tensor::new(x0.shape(), data)
    }
}

/// Free-function form of [`NoiseSchedule::q_sample`].
pub fn q_sample<T: Real>(
    x0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    sched.q_sample(x0, t, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_step() {
        let s = make_schedule(ScheduleKind::Linear, 1, 0.3, 0.5).unwrap();
        assert_eq!(s.alpha_bars, vec![0.7]);
    }

    #[test]
    fn default_schedule() {
        let s = make_schedule(ScheduleKind::Linear, 1000, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(*s.alpha_bars.last().unwrap() < 0.01);
        assert_eq!(s.alpha_bars[0], s.alphas[0]);
        assert_eq!(NoiseSchedule::linear_for(1000).unwrap(), s);
    }

    #[test]
    fn constant_beta_closed_form() {
        let s = make_schedule(ScheduleKind::Linear, 20, 0.05, 0.05).unwrap();
        for (t, ab) in s.alpha_bars.iter().enumerate() {
            assert!((ab - 0.95f64.powi(t as i32 + 1)).abs() < 1e-14);
        }
    }

    #[test]
    fn short_chains_end_near_noise() {
        for steps in [1, 10, 50, 200] {
            let s = NoiseSchedule::linear_for(steps).unwrap();
            assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
            assert!(s.alpha_bars.iter().all(|&a| a > 0.0 && a < 1.0));
        }
        assert!(*NoiseSchedule::linear_for(50).unwrap().alpha_bars.last().unwrap() < 0.01);
    }

    #[test]
    fn bad_ranges() {
        assert!(make_schedule(ScheduleKind::Linear, 0, 0.1, 0.2).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 5, 0.0, 0.2).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 5, 0.3, 0.2).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 5, 0.3, 1.0).is_err());
    }

    #[test]
    fn q_sample_cases() {
        let s = NoiseSchedule::linear_for(50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = init::randn::<f64>(&mut rng, &[2, 1, 4, 4]);
        let eps = init::randn::<f64>(&mut rng, &[2, 1, 4, 4]);
        let zero = Tensor::zeros(&[2, 1, 4, 4]);
        let a = s.q_sample(&x0, 7, &zero).unwrap();
        let scaled = x0.map(|v| v * s.alpha_bars[7].sqrt());
        assert_eq!(a, scaled);
        let b = s.q_sample(&zero, 7, &eps).unwrap();
        assert_eq!(b, eps.map(|v| v * (1.0 - s.alpha_bars[7]).sqrt()));
        assert!(s.q_sample(&x0, 50, &eps).is_err());
    }
}
