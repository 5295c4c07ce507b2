//! Command-line front end: `train`, `sample`, `verify`, `count`.
//!
//! Settings come from a preset, then an optional `key = value` file, then
//! `--set key=value` pairs and dedicated flags, later sources winning. The
//! effective settings are echoed in canonical form; feeding that echo back
//! through `--config` reproduces the run.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or configuration
//! error, 3 numeric failure at run time.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    gen_toy_dataset, load_checkpoint, load_idx, save_checkpoint, write_image_grid, write_tensor, Checkpoint,
    Dataset, ToyKind,
};
use crate::diffusion::{ddpm_sample_jobs, make_schedule, AdamConfig, NoiseSchedule, ScheduleKind, Trainer};
use crate::error::{Error, Result};
use crate::model::{count_params_macs, fmt_f64, parse, ModelConfig, SditModel};
use crate::real::Real;
use crate::verify::{run_checks, Group};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            _ => Err(Error::Config(format!("precision must be f32 or f64, got '{s}'"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        })
    }
}

/// Every setting of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub precision: Precision,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Linear schedule ends; `None` picks the defaults for the chain length.
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
    pub toy: Option<ToyKind>,
    pub toy_count: usize,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub log_every: usize,
    /// 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    pub sample_count: usize,
    pub sample_stride: usize,
    /// Worker threads; results do not depend on it.
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::with_model(ModelConfig::desk())
    }
}

const RUN_KEYS: &[&str] = &[
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "batch_size",
    "beta_end",
    "beta_start",
    "checkpoint_every",
    "idx_images",
    "idx_labels",
    "jobs",
    "log_every",
    "lr",
    "precision",
    "sample_count",
    "sample_stride",
    "seed",
    "steps",
    "toy",
    "toy_count",
    "weight_decay",
];

impl RunConfig {
    pub fn with_model(model: ModelConfig) -> Self {
        let adam = AdamConfig::default();
        Self {
            model,
            seed: 7,
            precision: Precision::F32,
            steps: 500,
            batch_size: 8,
            lr: adam.lr,
            weight_decay: adam.weight_decay,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            beta_start: None,
            beta_end: None,
            toy: None,
            toy_count: 256,
            idx_images: None,
            idx_labels: None,
            log_every: 1,
            checkpoint_every: 0,
            sample_count: 16,
            sample_stride: 1,
            jobs: 1,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let steps = self.model.diffusion_steps;
        match (self.beta_start, self.beta_end) {
            (None, None) => NoiseSchedule::linear_for(steps),
            (Some(a), Some(b)) => make_schedule(ScheduleKind::Linear, steps, a, b),
            _ => Err(Error::Config("set both beta_start and beta_end, or neither".into())),
        }
    }

    /// Fills in schedule defaults so the echo is self-contained.
    pub fn resolve(&mut self) -> Result<()> {
        let s = self.schedule()?;
        self.beta_start = Some(s.betas[0]);
        self.beta_end = Some(*s.betas.last().expect("at least one step"));
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let path = |v: &str| if v.is_empty() { None } else { Some(PathBuf::from(v)) };
        let opt_f64 = |v: &str| -> Result<Option<f64>> {
            if v.is_empty() || v == "auto" {
                Ok(None)
            } else {
                parse(key, v).map(Some)
            }
        };
        match key {
            "seed" => self.seed = parse(key, v)?,
            "precision" => self.precision = v.parse()?,
            "steps" => self.steps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "beta_start" => self.beta_start = opt_f64(v)?,
            "beta_end" => self.beta_end = opt_f64(v)?,
            "toy" => self.toy = if v == "none" || v.is_empty() { None } else { Some(v.parse()?) },
            "toy_count" => self.toy_count = parse(key, v)?,
            "idx_images" => self.idx_images = path(v),
            "idx_labels" => self.idx_labels = path(v),
            "log_every" => self.log_every = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "sample_count" => self.sample_count = parse(key, v)?,
            "sample_stride" => self.sample_stride = parse(key, v)?,
            "jobs" => self.jobs = parse(key, v)?,
            _ => {
                if !self.model.set_kv(key, v)? {
                    return Err(Error::Config(format!("unknown config key '{key}'")));
                }
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = self.model.to_kv();
        let opt = |x: Option<f64>| x.map_or("auto".to_string(), fmt_f64);
        let p = |x: &Option<PathBuf>| x.as_ref().map_or(String::new(), |p| p.display().to_string());
        let vals = [
            fmt_f64(self.adam_beta1),
            fmt_f64(self.adam_beta2),
            fmt_f64(self.adam_eps),
            self.batch_size.to_string(),
            opt(self.beta_end),
            opt(self.beta_start),
            self.checkpoint_every.to_string(),
            p(&self.idx_images),
            p(&self.idx_labels),
            self.jobs.to_string(),
            self.log_every.to_string(),
            fmt_f64(self.lr),
            self.precision.to_string(),
            self.sample_count.to_string(),
            self.sample_stride.to_string(),
            self.seed.to_string(),
            self.steps.to_string(),
            self.toy.map_or("none".to_string(), |t| t.to_string()),
            self.toy_count.to_string(),
            fmt_f64(self.weight_decay),
        ];
        for (k, v) in RUN_KEYS.iter().zip(vals) {
            m.insert(k.to_string(), v);
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.log_every == 0 {
            return bad("log_every must be >= 1");
        }
        if self.sample_stride == 0 || self.model.diffusion_steps % self.sample_stride != 0 {
            return bad("sample_stride must divide diffusion_steps");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.jobs == 0 {
            return bad("jobs must be >= 1");
        }
        self.schedule().map(|_| ())
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_kv() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{l}'", i + 1)))
        })
        .collect()
}

#[derive(Parser, Debug)]
#[command(name = "sdit", version, about = "Spiking diffusion transformer: train, sample, verify, count")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write loss.csv, checkpoints and samples.
    Train(TrainArgs),
    /// Draw images from a checkpoint.
    Sample(SampleArgs),
    /// Run the built-in correctness checks.
    Verify(VerifyArgs),
    /// Print parameter and MAC counts.
    Count(CountArgs),
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Starting point: desk, mnist or cifar.
    #[arg(long)]
    preset: Option<String>,
    /// File of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Built-in toy dataset: bars or blobs.
    #[arg(long)]
    toy: Option<String>,
    /// IDX image file (u8, 3 dimensions).
    #[arg(long)]
    idx_images: Option<PathBuf>,
    #[arg(long)]
    idx_labels: Option<PathBuf>,
    /// Image side in pixels.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    log_every: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Samples drawn after training (0 to skip).
    #[arg(long)]
    samples: Option<usize>,
    /// f32 or f64.
    #[arg(long)]
    precision: Option<String>,
    /// Train without the reconstruction branch.
    #[arg(long)]
    no_recon_module: bool,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Run directory.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Visit every s-th diffusion step.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Grid columns; defaults to a near-square layout.
    #[arg(long)]
    cols: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "samples")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Restrict to a group: ops, wkv, lif, recon, skip, schedule. Repeatable.
    #[arg(long)]
    only: Vec<String>,
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Args, Debug)]
struct CountArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Emit one CSV header and row.
    #[arg(long)]
    csv: bool,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let res = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Verify(a) => return cmd_verify(a),
        Command::Count(a) => cmd_count(a),
    };
    match res {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Exit code for an error that ends a command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } | Error::StaleState | Error::DisconnectedGraph | Error::NotScalar { .. } => {
            EXIT_NUMERIC
        }
        _ => EXIT_CONFIG,
    }
}

fn base_config(a: &ConfigArgs) -> Result<RunConfig> {
    let model = match &a.preset {
        Some(p) => ModelConfig::preset(p)?,
        None => ModelConfig::desk(),
    };
    let mut rc = RunConfig::with_model(model);
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (k, v) in parse_config_text(&text)? {
            rc.set(&k, &v)?;
        }
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        rc.set(k.trim(), v.trim())?;
    }
    Ok(rc)
}

fn train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut rc = base_config(&a.cfg)?;
    let mut set = |k: &str, v: Option<String>| v.map_or(Ok(()), |v| rc.set(k, &v));
    set("toy", a.toy.clone())?;
    set("idx_images", a.idx_images.as_ref().map(|p| p.display().to_string()))?;
    set("idx_labels", a.idx_labels.as_ref().map(|p| p.display().to_string()))?;
    set("image_size", a.size.map(|v| v.to_string()))?;
    set("steps", a.steps.map(|v| v.to_string()))?;
    set("batch_size", a.batch_size.map(|v| v.to_string()))?;
    set("lr", a.lr.map(|v| v.to_string()))?;
    set("seed", a.seed.map(|v| v.to_string()))?;
    set("jobs", a.jobs.map(|v| v.to_string()))?;
    set("log_every", a.log_every.map(|v| v.to_string()))?;
    set("checkpoint_every", a.checkpoint_every.map(|v| v.to_string()))?;
    set("sample_count", a.samples.map(|v| v.to_string()))?;
    set("precision", a.precision.clone())?;
    if a.no_recon_module {
        rc.model.recon_module = false;
    }
    rc.resolve()?;
    rc.validate()?;
    Ok(rc)
}

fn load_dataset<T: Real>(rc: &RunConfig) -> Result<Dataset<T>> {
    let cfg = &rc.model;
    let ds = match (&rc.toy, &rc.idx_images) {
        (Some(_), Some(_)) => return Err(Error::Config("pass either --toy or --idx-images, not both".into())),
        (None, None) => {
            return Err(Error::Config("no dataset: pass --toy <bars|blobs> or --idx-images <path>".into()))
        }
        (Some(kind), None) => gen_toy_dataset(*kind, rc.toy_count, cfg.image_size, cfg.channels, rc.seed)?,
        (None, Some(path)) => load_idx(path, rc.idx_labels.as_deref())?,
    };
    if ds.image_size() != cfg.image_size || ds.channels() != cfg.channels {
        return Err(Error::Config(format!(
            "dataset images are {}x{}x{}, model expects {}x{}x{}",
            ds.channels(),
            ds.image_size(),
            ds.image_size(),
            cfg.channels,
            cfg.image_size,
            cfg.image_size
        )));
    }
    Ok(ds)
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(p: &Path, contents: &str) -> Result<()> {
    std::fs::write(p, contents).map_err(|e| Error::io(p, e))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let rc = train_config(&a)?;
    print!("{rc}");
    match rc.precision {
        Precision::F32 => train_run::<f32>(&rc, &a.out, a.resume.as_deref()),
        Precision::F64 => train_run::<f64>(&rc, &a.out, a.resume.as_deref()),
    }
}

/// Trains according to `rc`, writing the run directory layout under `out`:
/// `config.txt`, `loss.csv`, `checkpoints/`, `samples/`.
pub fn train_run<T: Real>(rc: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<()> {
    let data = load_dataset::<T>(rc)?;
    let sched = rc.schedule()?;
    let mut tr = match resume {
        Some(p) => load_checkpoint::<T>(p, Some(&rc.model))?.to_trainer(sched, rc.adam(), rc.batch_size)?,
        None => {
            let model = SditModel::new(rc.model.clone(), &mut ChaCha8Rng::seed_from_u64(rc.seed))?;
            Trainer::new(model, sched, rc.adam(), rc.batch_size, rc.seed)?
        }
    };
    tr.jobs = rc.jobs;

    let ckpt_dir = out.join("checkpoints");
    let sample_dir = out.join("samples");
    create_dir(&ckpt_dir)?;
    create_dir(&sample_dir)?;
    write_file(&out.join("config.txt"), &rc.to_string())?;
    let csv_path = out.join("loss.csv");
    let csv = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut csv = BufWriter::new(csv);
    let io = |e| Error::io(&csv_path, e);
    writeln!(csv, "step,loss").map_err(io)?;

    let first = tr.step;
    let report_every = (rc.steps / 10).max(1);
    for _ in 0..rc.steps {
        let loss = match tr.train_step(&data.images) {
            Ok(l) => l,
            Err(e) => {
                eprintln!("step {}: {e}", tr.step + 1);
                return Err(e);
            }
        };
        let step = tr.step;
        if step % rc.log_every as u64 == 0 {
            writeln!(csv, "{step},{loss}").map_err(io)?;
        }
        if (step - first) % report_every as u64 == 0 {
            eprintln!("step {step:>6}  loss {loss:.5}");
        }
        if rc.checkpoint_every > 0 && step % rc.checkpoint_every as u64 == 0 {
            save_checkpoint(&ckpt_dir.join(format!("step_{step:06}.ckpt")), &Checkpoint::from_trainer(&tr))?;
        }
    }
    csv.flush().map_err(io)?;
    let final_path = ckpt_dir.join("final.ckpt");
    save_checkpoint(&final_path, &Checkpoint::from_trainer(&tr))?;
    eprintln!("wrote {}", final_path.display());

    if rc.sample_count > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(rc.seed);
        let imgs = ddpm_sample_jobs(&tr.model, &tr.schedule, rc.sample_count, &mut rng, Some(rc.sample_stride), rc.jobs)?;
        write_samples(&imgs, &sample_dir, "final", None)?;
    }
    Ok(())
}

fn write_samples<T: Real>(imgs: &crate::tensor::Tensor<T>, dir: &Path, stem: &str, cols: Option<usize>) -> Result<()> {
    let n = imgs.shape()[0];
    let cols = cols.unwrap_or_else(|| (n as f64).sqrt().ceil() as usize);
    let ext = if imgs.shape()[1] == 1 { "pgm" } else { "ppm" };
    let grid = dir.join(format!("{stem}.{ext}"));
    write_image_grid(imgs, &grid, cols)?;
    write_tensor(imgs, &dir.join(format!("{stem}.tensor")))?;
    eprintln!("wrote {}", grid.display());
    Ok(())
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    if a.n == 0 {
        return Err(Error::Config("--n must be >= 1".into()));
    }
    let bytes = std::fs::read(&a.ckpt).map_err(|e| Error::io(&a.ckpt, e))?;
    // dtype tag follows the magic and version
    match bytes.get(8) {
        Some(&tag) if tag == <f64 as Real>::DTYPE => sample_run::<f64>(&a, &bytes),
        _ => sample_run::<f32>(&a, &bytes),
    }
}

fn sample_run<T: Real>(a: &SampleArgs, bytes: &[u8]) -> Result<()> {
    let ck = Checkpoint::<T>::from_bytes(bytes, None)?;
    let model = ck.to_model()?;
    print!("{}", model.config);
    println!("n = {}\nseed = {}\nstride = {}", a.n, a.seed, a.stride);
    let sched = NoiseSchedule::linear_for(model.config.diffusion_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let imgs = ddpm_sample_jobs(&model, &sched, a.n, &mut rng, Some(a.stride), a.jobs)?;
    create_dir(&a.out)?;
    write_samples(&imgs, &a.out, "samples", a.cols)
}

fn cmd_verify(a: VerifyArgs) -> i32 {
    let only: Vec<Group> = match a.only.iter().map(|s| s.parse()).collect::<Result<_>>() {
        Ok(g) => g,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    match a.inject_fault.as_deref() {
        None => {}
        Some("wkv-backward-sign") => crate::rwkv::set_wkv_backward_sign_flip(true),
        Some(other) => {
            eprintln!("error: unknown fault '{other}'");
            return EXIT_CONFIG;
        }
    }
    let results = run_checks(&only);
    crate::rwkv::set_wkv_backward_sign_flip(false);
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {} failed", results.len(), failed);
    if failed == 0 {
        EXIT_OK
    } else {
        EXIT_VERIFY
    }
}

/// Reference figures for the MNIST-sized model, printed next to the tally.
pub const REFERENCE_PARAMS_M: f64 = 11.67;
pub const REFERENCE_MACS_G: f64 = 1.32;

fn cmd_count(a: CountArgs) -> Result<()> {
    let rc = base_config(&a.cfg)?;
    rc.model.validate()?;
    let c = count_params_macs(&rc.model);
    let t = rc.model.spike_steps;
    if a.csv {
        println!("params,macs_embed,macs_per_spike_step,spike_steps,macs_total");
        println!("{},{},{},{},{}", c.params, c.macs_embed, c.macs_per_spike_step, t, c.macs_total);
        return Ok(());
    }
    print!("{}", rc.model);
    println!("params               {:>14}  ({:.2} M)", c.params, c.params as f64 / 1e6);
    println!("MACs embeddings      {:>14}", c.macs_embed);
    println!("MACs per spike step  {:>14}", c.macs_per_spike_step);
    println!(
        "MACs total (T={t})     {:>14}  ({:.2} G)",
        c.macs_total,
        c.macs_total as f64 / 1e9
    );
    println!(
        "reference (28x28 model): {REFERENCE_PARAMS_M} M params, {REFERENCE_MACS_G} G MACs; counting conventions differ"
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut rc = RunConfig::default();
        rc.toy = Some(ToyKind::Blobs);
        rc.idx_labels = Some(PathBuf::from("x/y"));
        rc.resolve().unwrap();
        let mut back = RunConfig::default();
        for (k, v) in parse_config_text(&rc.to_string()).unwrap() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, rc);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut rc = RunConfig::default();
        assert!(matches!(rc.set("hiden_dim", "3"), Err(Error::Config(_))));
        assert!(parse_config_text("just words").is_err());
        assert_eq!(parse_config_text("# c\n\na = 1\n").unwrap(), vec![("a".into(), "1".into())]);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["sdit", "verify", "--only", "lif"]), EXIT_OK);
        assert_eq!(run(["sdit", "verify", "--only", "nope"]), EXIT_CONFIG);
        assert_eq!(run(["sdit", "train", "--steps", "1", "--out", "/nonexistent/never"]), EXIT_CONFIG);
        assert_eq!(run(["sdit", "bogus"]), EXIT_CONFIG);
        assert_eq!(run(["sdit", "count", "--set", "hidden_dim=0"]), EXIT_CONFIG);
        assert_eq!(run(["sdit", "count", "--preset", "mnist", "--csv"]), EXIT_OK);
    }
}
