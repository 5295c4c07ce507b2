// Trains the desk-sized model on 8x8 bars and reports how much the noise
// prediction loss fell. Pass a step count as the first argument.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdit::data::{gen_toy_dataset, ToyKind};
use sdit::diffusion::{AdamConfig, NoiseSchedule, Trainer};
use sdit::model::{ModelConfig, SditModel};
use sdit::Result;

/// Returns the per-step losses.
pub fn run_example(steps: usize) -> Result<Vec<f64>> {
    let seed = 7;
    let cfg = ModelConfig::desk();
    let data = gen_toy_dataset::<f32>(ToyKind::Bars, 256, cfg.image_size, cfg.channels, seed)?;
    let model = SditModel::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    let sched = NoiseSchedule::linear_for(cfg.diffusion_steps)?;
    let mut tr = Trainer::new(model, sched, AdamConfig::default(), 8, seed)?;
    let losses = (0..steps)
        .map(|_| tr.train_step(&data.images))
        .collect::<Result<Vec<f64>>>()?;
    let window = (steps / 10).max(1);
    for (i, c) in losses.chunks(window).enumerate() {
        println!("steps {:>4}..{:<4} mean loss {:.4}", i * window, i * window + c.len(), mean(c));
    }
    if steps >= 2 * window {
        let ratio = mean(&losses[steps - window..]) / mean(&losses[..window]);
        println!("last/first window ratio {ratio:.3}");
    }
    Ok(losses)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let steps = std::env::args().nth(1).map_or(Ok(500), |s| s.parse()).expect("step count");
    run_example(steps).map(|_| ())
}
