use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::spiking::LifConfig;

/// Architecture of a spiking diffusion transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub num_input_blocks: usize,
    pub num_mid_blocks: usize,
    pub num_output_blocks: usize,
    /// Spiking time steps per forward pass.
    pub spike_steps: usize,
    /// Channel-Mixing width as a multiple of `hidden_dim`.
    pub ff_mult: usize,
    /// Number of diffusion steps the time embedding accepts.
    pub diffusion_steps: usize,
    /// When false the reconstruction branch is skipped and its weights are
    /// zeroed and frozen.
    pub recon_module: bool,
    pub ln_eps: f64,
    pub lif: LifConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 8x8 single-channel toy model that trains in minutes on a CPU.
    pub fn desk() -> Self {
        Self {
            image_size: 8,
            channels: 1,
            patch_size: 2,
            hidden_dim: 32,
            num_input_blocks: 1,
            num_mid_blocks: 1,
            num_output_blocks: 1,
            spike_steps: 2,
            ff_mult: 4,
            diffusion_steps: 50,
            recon_module: true,
            ln_eps: 1e-5,
            lif: LifConfig::default(),
        }
    }

    /// 28x28 grayscale, 2/1/2 blocks, hidden 384, 4 spike steps.
    pub fn mnist() -> Self {
        Self {
            image_size: 28,
            channels: 1,
            patch_size: 2,
            hidden_dim: 384,
            num_input_blocks: 2,
            num_mid_blocks: 1,
            num_output_blocks: 2,
            spike_steps: 4,
            diffusion_steps: 1000,
            ..Self::desk()
        }
    }

    /// 32x32 RGB, 4/1/4 blocks, hidden 512, 4 spike steps.
    pub fn cifar() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            hidden_dim: 512,
            num_input_blocks: 4,
            num_output_blocks: 4,
            ..Self::mnist()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "mnist" => Ok(Self::mnist()),
            "cifar" => Ok(Self::cifar()),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected desk, mnist, cifar)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadParam(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_output_blocks != self.num_input_blocks {
            return bad(format!(
                "num_output_blocks ({}) must equal num_input_blocks ({})",
                self.num_output_blocks, self.num_input_blocks
            ));
        }
        if self.spike_steps == 0 {
            return bad("spike_steps must be >= 1".into());
        }
        if self.hidden_dim == 0 || self.channels == 0 || self.ff_mult == 0 {
            return bad("hidden_dim, channels and ff_mult must be positive".into());
        }
        if self.diffusion_steps == 0 {
            return bad("diffusion_steps must be >= 1".into());
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive".into());
        }
        self.lif.validate()
    }

    /// Patch tokens per image.
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Values per flattened patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn ff_dim(&self) -> usize {
        self.hidden_dim * self.ff_mult
    }

    pub fn num_blocks(&self) -> usize {
        self.num_input_blocks + self.num_mid_blocks + self.num_output_blocks
    }

    /// Canonical key/value form, sorted by key.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("image_size", self.image_size.to_string());
        put("channels", self.channels.to_string());
        put("patch_size", self.patch_size.to_string());
        put("hidden_dim", self.hidden_dim.to_string());
        put("num_input_blocks", self.num_input_blocks.to_string());
        put("num_mid_blocks", self.num_mid_blocks.to_string());
        put("num_output_blocks", self.num_output_blocks.to_string());
        put("spike_steps", self.spike_steps.to_string());
        put("ff_mult", self.ff_mult.to_string());
        put("diffusion_steps", self.diffusion_steps.to_string());
        put("recon_module", self.recon_module.to_string());
        put("ln_eps", fmt_f64(self.ln_eps));
        put("lif_tau", fmt_f64(self.lif.tau));
        put("lif_v_threshold", fmt_f64(self.lif.v_threshold));
        put("lif_v_reset", fmt_f64(self.lif.v_reset));
        put("lif_surrogate_alpha", fmt_f64(self.lif.surrogate_alpha));
        m
    }

    /// Sets one field from its canonical key. Returns `Ok(false)` if the key
    /// is not a model key.
    pub fn set_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "image_size" => self.image_size = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "hidden_dim" => self.hidden_dim = parse(key, value)?,
            "num_input_blocks" => self.num_input_blocks = parse(key, value)?,
            "num_mid_blocks" => self.num_mid_blocks = parse(key, value)?,
            "num_output_blocks" => self.num_output_blocks = parse(key, value)?,
            "spike_steps" => self.spike_steps = parse(key, value)?,
            "ff_mult" => self.ff_mult = parse(key, value)?,
            "diffusion_steps" => self.diffusion_steps = parse(key, value)?,
            "recon_module" => self.recon_module = parse(key, value)?,
            "ln_eps" => self.ln_eps = parse(key, value)?,
            "lif_tau" => self.lif.tau = parse(key, value)?,
            "lif_v_threshold" => self.lif.v_threshold = parse(key, value)?,
            "lif_v_reset" => self.lif.v_reset = parse(key, value)?,
            "lif_surrogate_alpha" => self.lif.surrogate_alpha = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Inverse of [`ModelConfig::to_kv`]; unknown and missing keys are errors.
    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::desk();
        for (k, v) in map {
            if !cfg.set_kv(k, v)? {
                return Err(Error::Config(format!("unknown model key '{k}'")));
            }
        }
        let expected = cfg.to_kv();
        if let Some(missing) = expected.keys().find(|k| !map.contains_key(*k)) {
            return Err(Error::Config(format!("missing model key '{missing}'")));
        }
        Ok(cfg)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_kv() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// Shortest text that parses back to the same `f64`.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

pub(crate) fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["desk", "mnist", "cifar"] {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
        assert_eq!(ModelConfig::mnist().num_patches(), 196);
        assert_eq!(ModelConfig::cifar().num_patches(), 256);
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig::desk();
        c.patch_size = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.num_output_blocks = 2;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.spike_steps = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        let mut c = ModelConfig::cifar();
        c.ln_eps = 1.0e-6;
        c.recon_module = false;
        let back = ModelConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);

        let mut m = c.to_kv();
        m.insert("bogus".into(), "1".into());
        assert!(ModelConfig::from_kv(&m).is_err());
    }
}
