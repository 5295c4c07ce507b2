// Briefly trains a model, saves a checkpoint, reloads it and draws a grid of
// samples with the strided ancestral sampler. Files go to the directory given
// as the first argument, or a temporary one.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdit::data::{gen_toy_dataset, load_checkpoint, save_checkpoint, write_image_grid, Checkpoint, ToyKind};
use sdit::diffusion::{ddpm_sample, AdamConfig, NoiseSchedule, Trainer};
use sdit::model::{ModelConfig, SditModel};
use sdit::{Result, Tensor};

pub fn run_example(dir: &Path) -> Result<Tensor<f32>> {
    let cfg = ModelConfig::desk();
    let data = gen_toy_dataset::<f32>(ToyKind::Blobs, 64, cfg.image_size, cfg.channels, 1)?;
    let model = SditModel::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1))?;
    let sched = NoiseSchedule::linear_for(cfg.diffusion_steps)?;
    let mut tr = Trainer::new(model, sched.clone(), AdamConfig::default(), 4, 1)?;
    for _ in 0..20 {
        tr.train_step(&data.images)?;
    }
    let ckpt = dir.join("blobs.ckpt");
    save_checkpoint(&ckpt, &Checkpoint::from_trainer(&tr))?;

    let model = load_checkpoint::<f32>(&ckpt, Some(&cfg))?.to_model()?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let imgs = ddpm_sample(&model, &sched, 9, &mut rng, Some(5))?;
    let grid = dir.join("blobs.pgm");
    write_image_grid(&imgs, &grid, 3)?;
    let (lo, hi) = imgs.data().iter().fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
    println!("9 samples in [{lo:.3}, {hi:.3}] written to {}", grid.display());
    Ok(imgs)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let dir = std::env::args().nth(1).map_or_else(std::env::temp_dir, Into::into);
    std::fs::create_dir_all(&dir).map_err(|e| sdit::Error::io(&dir, e))?;
    run_example(&dir).map(|_| ())
}
