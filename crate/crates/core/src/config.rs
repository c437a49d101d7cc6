//! Line-based `key = value` run configuration with `#` comments. Every key
//! has a default, unknown keys are rejected, and the effective configuration
//! is echoed next to a run's outputs so results stay reproducible.

use crate::error::{PideError, Result};
use crate::hamiltonian::{HeadKind, NetworkConfig, NonlocalConfig};
use crate::nonlocal::BlockFamily;
use crate::trainer::{LrSchedule, RegularizerConfig, TrainConfig};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: String,
    pub data_dir: String,
    pub nonlocal: String,
    pub stages: usize,
    pub pool: usize,
    pub h: f64,
    pub lambda: f64,
    pub s: f64,
    pub n: u32,
    pub include_constant: bool,
    pub m: usize,
    pub channels: Vec<usize>,
    pub head: String,
    pub classes: usize,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub out: String,
    pub alpha1: f64,
    pub alpha2: f64,
    pub momentum: f64,
    pub flip: bool,
    pub lr_rescale: bool,
    pub noise: f64,
    pub train_count: usize,
    pub test_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: "synthetic".into(),
            data_dir: String::new(),
            nonlocal: "diffusion".into(),
            stages: 2,
            pool: 2,
            h: 0.05,
            lambda: 0.1,
            s: 0.5,
            n: 2,
            include_constant: true,
            m: 2,
            channels: vec![32, 64, 112],
            head: "classifier".into(),
            classes: 0,
            epochs: 10,
            batch: 100,
            seed: 0,
            out: "pidenet-out".into(),
            alpha1: 2e-4,
            alpha2: 1e-8,
            momentum: 0.9,
            flip: false,
            lr_rescale: true,
            noise: 0.25,
            train_count: 5000,
            test_count: 1000,
        }
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| PideError::Config(format!("{key}: expected integer, got '{v}'")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| PideError::Config(format!("{key}: expected number, got '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(PideError::Config(format!("{key}: expected boolean, got '{v}'"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "dataset" => {
                if !matches!(v, "synthetic" | "cifar10") {
                    return Err(PideError::Config(format!("dataset: unknown '{v}'")));
                }
                self.dataset = v.into();
            }
            "data_dir" => self.data_dir = v.into(),
            "nonlocal" => {
                if v != "none" && BlockFamily::parse(v).is_none() {
                    return Err(PideError::Config(format!(
                        "nonlocal: unknown '{v}' (none|diffusion|fraclap|invfraclap|log)"
                    )));
                }
                self.nonlocal = v.into();
            }
            "stages" => self.stages = parse_usize(key, v)?,
            "pool" => self.pool = parse_usize(key, v)?,
            "h" => self.h = parse_f64(key, v)?,
            "lambda" => self.lambda = parse_f64(key, v)?,
            "s" => self.s = parse_f64(key, v)?,
            "n" => self.n = parse_usize(key, v)? as u32,
            "include_constant" => self.include_constant = parse_bool(key, v)?,
            "m" => self.m = parse_usize(key, v)?,
            "channels" => {
                let parsed: Result<Vec<usize>> =
                    v.split(',').map(|p| parse_usize("channels", p.trim())).collect();
                self.channels = parsed?;
            }
            "head" => {
                if !matches!(v, "classifier" | "dense") {
                    return Err(PideError::Config(format!("head: unknown '{v}'")));
                }
                self.head = v.into();
            }
            "classes" => self.classes = parse_usize(key, v)?,
            "epochs" => self.epochs = parse_usize(key, v)?,
            "batch" => self.batch = parse_usize(key, v)?,
            "seed" => self.seed = parse_usize(key, v)? as u64,
            "out" => self.out = v.into(),
            "alpha1" => self.alpha1 = parse_f64(key, v)?,
            "alpha2" => self.alpha2 = parse_f64(key, v)?,
            "momentum" => self.momentum = parse_f64(key, v)?,
            "flip" => self.flip = parse_bool(key, v)?,
            "lr_rescale" => self.lr_rescale = parse_bool(key, v)?,
            "noise" => self.noise = parse_f64(key, v)?,
            "train_count" => self.train_count = parse_usize(key, v)?,
            "test_count" => self.test_count = parse_usize(key, v)?,
            _ => return Err(PideError::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(PideError::Config(format!("line {}: expected key = value", lineno + 1)));
            };
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let text = std::fs::read_to_string(path)?;
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Canonical echo of the effective configuration; parses back to self.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let channels = self
            .channels
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(s, "dataset = {}", self.dataset);
        let _ = writeln!(s, "data_dir = {}", self.data_dir);
        let _ = writeln!(s, "nonlocal = {}", self.nonlocal);
        let _ = writeln!(s, "stages = {}", self.stages);
        let _ = writeln!(s, "pool = {}", self.pool);
        let _ = writeln!(s, "h = {}", self.h);
        let _ = writeln!(s, "lambda = {}", self.lambda);
        let _ = writeln!(s, "s = {}", self.s);
        let _ = writeln!(s, "n = {}", self.n);
        let _ = writeln!(s, "include_constant = {}", self.include_constant);
        let _ = writeln!(s, "m = {}", self.m);
        let _ = writeln!(s, "channels = {}", channels);
        let _ = writeln!(s, "head = {}", self.head);
        let _ = writeln!(s, "classes = {}", self.classes);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "out = {}", self.out);
        let _ = writeln!(s, "alpha1 = {}", self.alpha1);
        let _ = writeln!(s, "alpha2 = {}", self.alpha2);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "flip = {}", self.flip);
        let _ = writeln!(s, "lr_rescale = {}", self.lr_rescale);
        let _ = writeln!(s, "noise = {}", self.noise);
        let _ = writeln!(s, "train_count = {}", self.train_count);
        let _ = writeln!(s, "test_count = {}", self.test_count);
        s
    }

    pub fn input_channels(&self) -> usize {
        match self.dataset.as_str() {
            "cifar10" => 3,
            _ => 1,
        }
    }

    pub fn effective_classes(&self) -> usize {
        if self.classes > 0 {
            return self.classes;
        }
        match (self.head.as_str(), self.dataset.as_str()) {
            ("dense", _) => 20,
            (_, "cifar10") => 10,
            _ => 2,
        }
    }

    pub fn input_hw(&self) -> (usize, usize) {
        (32, 32)
    }

    pub fn network_config(&self) -> Result<NetworkConfig> {
        let head = match self.head.as_str() {
            "dense" => HeadKind::Dense { classes: self.effective_classes() },
            _ => HeadKind::Classifier { classes: self.effective_classes() },
        };
        let units = self.channels.len();
        let nonlocal = if self.nonlocal == "none" {
            None
        } else {
            let family = BlockFamily::parse(&self.nonlocal)
                .ok_or_else(|| PideError::Config(format!("nonlocal: unknown '{}'", self.nonlocal)))?;
            let mut nl = NonlocalConfig::new(family);
            nl.stages = self.stages;
            nl.pools = vec![self.pool.max(1); units];
            nl.lambda = self.lambda;
            nl.s = self.s;
            nl.n = self.n;
            nl.include_constant = self.include_constant;
            Some(nl)
        };
        let cfg = NetworkConfig {
            units,
            blocks_per_unit: self.m,
            channels: self.channels.clone(),
            input_channels: self.input_channels(),
            input_hw: self.input_hw(),
            head,
            pool_between_units: self.head != "dense",
            step_size: self.h,
            nonlocal,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        let schedule = if self.lr_rescale {
            LrSchedule::rescaled(self.epochs)
        } else {
            LrSchedule::default()
        };
        TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            seed: self.seed,
            reg: RegularizerConfig { alpha1: self.alpha1, alpha2: self.alpha2, h: self.h },
            schedule,
            momentum: self.momentum,
            flip_augment: self.flip,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_echo_roundtrip() {
        let cfg = RunConfig::default();
        let echo = cfg.echo();
        let mut back = RunConfig::default();
        back.apply_text(&echo).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn comments_and_overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# a comment\n m = 4 # trailing\n\nnonlocal = fraclap\n").unwrap();
        assert_eq!(cfg.m, 4);
        assert_eq!(cfg.nonlocal, "fraclap");
    }

    #[test]
    fn unknown_keys_and_values_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_text("frobnicate = 7\n").is_err());
        assert!(cfg.apply_text("nonlocal = wavelet\n").is_err());
        assert!(cfg.apply_text("epochs = soon\n").is_err());
        assert!(cfg.apply_text("just a line\n").is_err());
    }

    #[test]
    fn network_config_derivation() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("channels = 8,12,16\nm = 2\nnonlocal = none\n").unwrap();
        let net = cfg.network_config().unwrap();
        assert_eq!(net.blocks_per_unit, 2);
        assert!(net.nonlocal.is_none());
        assert_eq!(net.head.classes(), 2);
        cfg.set("dataset", "cifar10").unwrap();
        assert_eq!(cfg.network_config().unwrap().head.classes(), 10);
        assert_eq!(cfg.network_config().unwrap().input_channels, 3);
        cfg.set("head", "dense").unwrap();
        assert_eq!(cfg.network_config().unwrap().head.classes(), 20);
    }
}
