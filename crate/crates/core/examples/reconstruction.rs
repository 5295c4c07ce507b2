// Shows what the reconstruction branch contributes: a model with W_N set to
// zero predicts exactly what the ablated model predicts, while a nonzero W_N
// changes the output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdit::model::{ModelConfig, SditModel};
use sdit::{init, Result, Tensor};

fn build(cfg: &ModelConfig) -> Result<SditModel<f64>> {
    SditModel::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(5))
}

pub fn run_example() -> Result<(f64, f64)> {
    let cfg = ModelConfig::desk();
    let x = init::randn::<f64>(&mut ChaCha8Rng::seed_from_u64(6), &[2, 1, 8, 8]);
    let t = [3, 40];

    let mut active = build(&cfg)?;
    for b in active.blocks.clone() {
        let w = active.params.get(b.recon_wn).map(|v| v + 0.2);
        active.params.set(b.recon_wn, w)?;
    }
    let mut zeroed = build(&cfg)?;
    for b in zeroed.blocks.clone() {
        let shape = zeroed.params.get(b.recon_wn).shape().to_vec();
        zeroed.params.set(b.recon_wn, Tensor::zeros(&shape))?;
    }
    let mut ablated = build(&cfg)?;
    ablated.disable_reconstruction()?;

    let y_zero = zeroed.predict(&x, &t)?;
    let y_abl = ablated.predict(&x, &t)?;
    let y_act = active.predict(&x, &t)?;
    let same = y_zero.max_abs_diff(&y_abl);
    let moved = y_act.max_abs_diff(&y_abl);
    println!("W_N = 0 vs ablation: max abs diff {same:e}");
    println!("W_N + 0.2 vs ablation: max abs diff {moved:.4}");
    Ok((same, moved))
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example().map(|_| ())
}
