//! Run configuration and its flat `key = value` text format.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Dims, ForwardOptions, Mode};
use crate::synthworld::SamplingRanges;

/// Storage precision of parameter tensors in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StorageDtype {
    F64,
    F32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub codebook_size: usize,
    pub embed_dim: usize,
    pub fdt_dim: usize,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub weight_decay_general: f64,
    pub weight_decay_fdt: f64,
    pub tau_init: f64,
    pub tau_learnable: bool,
    pub scale: f64,
    pub normalize_grounding: bool,
    pub seed: u64,
    pub world_seed: u64,
    pub data_seed: u64,
    pub train_pairs: usize,
    pub eval_pairs: usize,
    pub probe_items: usize,
    pub k_true: usize,
    pub input_dim: usize,
    pub noise_sigma: f64,
    pub distractor_rate: f64,
    pub salience_jitter: f64,
    pub concepts_min: usize,
    pub concepts_max: usize,
    pub elements_min: usize,
    pub elements_max: usize,
    pub log_interval: usize,
    pub threads: usize,
    pub checkpoint_dtype: StorageDtype,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Sparsemax,
            codebook_size: 32,
            embed_dim: 16,
            fdt_dim: 16,
            lr_peak: 3e-3,
            warmup_steps: 100,
            total_steps: 2000,
            batch_size: 64,
            weight_decay_general: 0.01,
            weight_decay_fdt: 0.1,
            tau_init: 0.07,
            tau_learnable: true,
            scale: 1.0,
            normalize_grounding: true,
            seed: 0,
            world_seed: 0,
            data_seed: 0,
            train_pairs: 2000,
            eval_pairs: 256,
            probe_items: 500,
            k_true: 8,
            input_dim: 24,
            noise_sigma: 0.1,
            distractor_rate: 0.2,
            salience_jitter: 0.5,
            concepts_min: 2,
            concepts_max: 4,
            elements_min: 1,
            elements_max: 3,
            log_interval: 100,
            threads: 1,
            checkpoint_dtype: StorageDtype::F64,
        }
    }
}

fn parse_value<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

impl TrainConfig {
    /// Same configuration with every seed set from one value.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.world_seed = seed;
        self.data_seed = seed;
        self
    }

    pub fn dims(&self) -> Dims {
        Dims {
            input_dim: self.input_dim,
            embed_dim: self.embed_dim,
            hidden_dim: 2 * self.embed_dim,
            fdt_dim: self.fdt_dim,
            codebook_size: self.codebook_size,
        }
    }

    pub fn forward_options(&self) -> ForwardOptions<f64> {
        ForwardOptions {
            mode: self.mode,
            scale: self.scale,
            normalize: self.normalize_grounding,
            tau_learnable: self.tau_learnable,
        }
    }

    pub fn sampling(&self) -> SamplingRanges {
        SamplingRanges {
            concepts_per_pair: self.concepts_min..=self.concepts_max,
            elements_per_concept: self.elements_min..=self.elements_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.total_steps > 0 && (self.warmup_steps == 0 || self.warmup_steps >= self.total_steps) {
            return fail("need 0 < warmup_steps < total_steps");
        }
        if self.total_steps == 0 && self.warmup_steps != 0 {
            return fail("warmup_steps must be 0 when total_steps is 0");
        }
        if self.codebook_size < 2 {
            return fail("codebook_size must be at least 2");
        }
        if self.embed_dim == 0 || self.fdt_dim == 0 || self.input_dim == 0 {
            return fail("dimensions must be positive");
        }
        if self.batch_size == 0 || self.batch_size > self.train_pairs {
            return fail("need 0 < batch_size <= train_pairs");
        }
        if [self.lr_peak, self.scale, self.tau_init].iter().any(|v| v.is_nan() || *v <= 0.0) {
            return fail("lr_peak, scale and tau_init must be positive");
        }
        if self.weight_decay_general < 0.0 || self.weight_decay_fdt < 0.0 {
            return fail("weight decay must be non-negative");
        }
        if self.concepts_min == 0 || self.concepts_min > self.concepts_max {
            return fail("need 1 <= concepts_min <= concepts_max");
        }
        if self.elements_min == 0 || self.elements_min > self.elements_max {
            return fail("need 1 <= elements_min <= elements_max");
        }
        if self.log_interval == 0 || self.threads == 0 {
            return fail("log_interval and threads must be positive");
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Unset keys keep
    /// their defaults, unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mode" => self.mode = value.parse()?,
            "codebook_size" => self.codebook_size = parse_value(key, value)?,
            "embed_dim" => self.embed_dim = parse_value(key, value)?,
            "fdt_dim" => self.fdt_dim = parse_value(key, value)?,
            "lr_peak" => self.lr_peak = parse_value(key, value)?,
            "warmup_steps" => self.warmup_steps = parse_value(key, value)?,
            "total_steps" => self.total_steps = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "weight_decay_general" => self.weight_decay_general = parse_value(key, value)?,
            "weight_decay_fdt" => self.weight_decay_fdt = parse_value(key, value)?,
            "tau_init" => self.tau_init = parse_value(key, value)?,
            "tau_learnable" => self.tau_learnable = parse_bool(key, value)?,
            "scale" => self.scale = parse_value(key, value)?,
            "normalize_grounding" => self.normalize_grounding = parse_bool(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "world_seed" => self.world_seed = parse_value(key, value)?,
            "data_seed" => self.data_seed = parse_value(key, value)?,
            "train_pairs" => self.train_pairs = parse_value(key, value)?,
            "eval_pairs" => self.eval_pairs = parse_value(key, value)?,
            "probe_items" => self.probe_items = parse_value(key, value)?,
            "k_true" => self.k_true = parse_value(key, value)?,
            "input_dim" => self.input_dim = parse_value(key, value)?,
            "noise_sigma" => self.noise_sigma = parse_value(key, value)?,
            "distractor_rate" => self.distractor_rate = parse_value(key, value)?,
            "salience_jitter" => self.salience_jitter = parse_value(key, value)?,
            "concepts_min" => self.concepts_min = parse_value(key, value)?,
            "concepts_max" => self.concepts_max = parse_value(key, value)?,
            "elements_min" => self.elements_min = parse_value(key, value)?,
            "elements_max" => self.elements_max = parse_value(key, value)?,
            "log_interval" => self.log_interval = parse_value(key, value)?,
            "threads" => self.threads = parse_value(key, value)?,
            "checkpoint_dtype" => {
                self.checkpoint_dtype = match value {
                    "f64" => StorageDtype::F64,
                    "f32" => StorageDtype::F32,
                    _ => return Err(Error::Config(format!("invalid checkpoint_dtype `{value}`"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces the config exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("mode", self.mode.as_str().into());
        kv("codebook_size", self.codebook_size.to_string());
        kv("embed_dim", self.embed_dim.to_string());
        kv("fdt_dim", self.fdt_dim.to_string());
        kv("lr_peak", format!("{:?}", self.lr_peak));
        kv("warmup_steps", self.warmup_steps.to_string());
        kv("total_steps", self.total_steps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("weight_decay_general", format!("{:?}", self.weight_decay_general));
        kv("weight_decay_fdt", format!("{:?}", self.weight_decay_fdt));
        kv("tau_init", format!("{:?}", self.tau_init));
        kv("tau_learnable", self.tau_learnable.to_string());
        kv("scale", format!("{:?}", self.scale));
        kv("normalize_grounding", self.normalize_grounding.to_string());
        kv("seed", self.seed.to_string());
        kv("world_seed", self.world_seed.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("train_pairs", self.train_pairs.to_string());
        kv("eval_pairs", self.eval_pairs.to_string());
        kv("probe_items", self.probe_items.to_string());
        kv("k_true", self.k_true.to_string());
        kv("input_dim", self.input_dim.to_string());
        kv("noise_sigma", format!("{:?}", self.noise_sigma));
        kv("distractor_rate", format!("{:?}", self.distractor_rate));
        kv("salience_jitter", format!("{:?}", self.salience_jitter));
        kv("concepts_min", self.concepts_min.to_string());
        kv("concepts_max", self.concepts_max.to_string());
        kv("elements_min", self.elements_min.to_string());
        kv("elements_max", self.elements_max.to_string());
        kv("log_interval", self.log_interval.to_string());
        kv("threads", self.threads.to_string());
        kv(
            "checkpoint_dtype",
            match self.checkpoint_dtype {
                StorageDtype::F64 => "f64".into(),
                StorageDtype::F32 => "f32".into(),
            },
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default().with_seed(42);
        cfg.lr_peak = 0.1 + 0.2;
        cfg.mode = Mode::Clip;
        cfg.checkpoint_dtype = StorageDtype::F32;
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = TrainConfig::parse("lr_peek = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("lr_peek"));
    }

    #[test]
    fn comments_and_defaults() {
        let cfg = TrainConfig::parse("# desk run\nmode = softmax  # dense\n\ntotal_steps = 500\n").unwrap();
        assert_eq!(cfg.mode, Mode::Softmax);
        assert_eq!(cfg.total_steps, 500);
        assert_eq!(cfg.batch_size, 64);
    }

    #[test]
    fn warmup_must_precede_total() {
        assert!(TrainConfig::parse("warmup_steps = 2000\n").is_err());
        assert!(TrainConfig::parse("total_steps = 0\nwarmup_steps = 0\n").is_ok());
        assert!(TrainConfig::parse("mode = nonsense\n").is_err());
    }
}
