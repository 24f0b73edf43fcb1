//! Typed run settings read from flat `key = value` text.
//!
//! Every key has a default; unknown keys are rejected. [`Settings::render`]
//! writes every effective value, and parsing that text back yields the same
//! settings, so a run directory's snapshot fully determines the run.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::config::parse_kv;
use crate::data::{sub_seed, BlobSpec};
use crate::error::{NdaError, Result};
use crate::ood::DEFAULT_ECE_BINS;
use crate::ssl::SslConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub seed: u64,
    /// fixed data seed; derived from `seed` when absent
    pub data_seed: Option<u64>,
    pub data_classes: usize,
    pub data_dim: usize,
    pub data_per_class: usize,
    pub data_spread: f64,
    pub data_sigma: f64,
    /// OOD centroid displacement in units of `data_sigma`
    pub ood_shift: f64,
    pub test_fraction: f64,
    pub hidden: Vec<usize>,
    pub latent: usize,
    pub ece_bins: usize,
    pub train: TrainConfig,
    pub ssl: SslConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            seed: 0,
            data_seed: None,
            data_classes: 4,
            data_dim: 8,
            data_per_class: 500,
            data_spread: 1.0,
            data_sigma: 1.0,
            ood_shift: 10.0,
            test_fraction: 0.2,
            hidden: vec![32],
            latent: 8,
            ece_bins: DEFAULT_ECE_BINS,
            train: TrainConfig::default(),
            ssl: SslConfig::default(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "data_seed",
    "data_classes",
    "data_dim",
    "data_per_class",
    "data_spread",
    "data_sigma",
    "ood_shift",
    "test_fraction",
    "validation_fraction",
    "hidden",
    "latent",
    "epochs",
    "batch_size",
    "learning_rate",
    "momentum",
    "lr_decay_every",
    "lr_decay_factor",
    "alpha",
    "beta",
    "gamma",
    "mean_variant",
    "siamese_variant",
    "margin",
    "pair_fraction",
    "mean_loss",
    "siamese",
    "alternate",
    "ece_bins",
    "labeled_fraction",
    "ensemble_size",
    "threshold",
    "phase1_epochs",
    "phase2_epochs",
    "noise_scale",
    "mask_fraction",
    "consistency_weight",
    "nda_phase2",
];

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| NdaError::Config(format!("invalid value {raw:?} for `{key}`")))
}

fn flag(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(NdaError::Config(format!(
            "invalid boolean {raw:?} for `{key}`"
        ))),
    }
}

impl Settings {
    pub fn parse(text: &str) -> Result<Settings> {
        let mut s = Settings::default();
        for (k, v) in parse_kv(text)? {
            s.set(&k, &v)?;
        }
        s.validate()?;
        Ok(s)
    }

    /// Assigns one key from its textual value.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let raw = raw.trim();
        let t = &mut self.train;
        let n = &mut t.nda;
        let ssl = &mut self.ssl;
        match key {
            "seed" => self.seed = value(key, raw)?,
            "data_seed" => {
                self.data_seed = if raw == "auto" {
                    None
                } else {
                    Some(value(key, raw)?)
                }
            }
            "data_classes" => self.data_classes = value(key, raw)?,
            "data_dim" => self.data_dim = value(key, raw)?,
            "data_per_class" => self.data_per_class = value(key, raw)?,
            "data_spread" => self.data_spread = value(key, raw)?,
            "data_sigma" => self.data_sigma = value(key, raw)?,
            "ood_shift" => self.ood_shift = value(key, raw)?,
            "test_fraction" => self.test_fraction = value(key, raw)?,
            "validation_fraction" => t.validation_fraction = value(key, raw)?,
            "hidden" => {
                self.hidden = if raw.is_empty() {
                    Vec::new()
                } else {
                    raw.split(',')
                        .map(|w| value(key, w.trim()))
                        .collect::<Result<_>>()?
                }
            }
            "latent" => self.latent = value(key, raw)?,
            "epochs" => t.epochs = value(key, raw)?,
            "batch_size" => t.batch_size = value(key, raw)?,
            "learning_rate" => t.learning_rate = value(key, raw)?,
            "momentum" => t.momentum = value(key, raw)?,
            "lr_decay_every" => t.lr_decay_every = value(key, raw)?,
            "lr_decay_factor" => t.lr_decay_factor = value(key, raw)?,
            "alpha" => n.alpha = value(key, raw)?,
            "beta" => n.beta = value(key, raw)?,
            "gamma" => n.gamma = value(key, raw)?,
            "mean_variant" => n.mean_variant = raw.parse()?,
            "siamese_variant" => n.siamese_variant = raw.parse()?,
            "margin" => n.margin = value(key, raw)?,
            "pair_fraction" => n.pair_fraction = value(key, raw)?,
            "mean_loss" => t.mean_loss = flag(key, raw)?,
            "siamese" => t.siamese = flag(key, raw)?,
            "alternate" => t.alternate = flag(key, raw)?,
            "ece_bins" => self.ece_bins = value(key, raw)?,
            "labeled_fraction" => ssl.labeled_fraction = value(key, raw)?,
            "ensemble_size" => ssl.ensemble_size = value(key, raw)?,
            "threshold" => ssl.threshold = value(key, raw)?,
            "phase1_epochs" => ssl.phase1_epochs = value(key, raw)?,
            "phase2_epochs" => ssl.phase2_epochs = value(key, raw)?,
            "noise_scale" => ssl.noise_scale = value(key, raw)?,
            "mask_fraction" => ssl.mask_fraction = value(key, raw)?,
            "consistency_weight" => ssl.consistency_weight = value(key, raw)?,
            "nda_phase2" => ssl.nda_phase2 = flag(key, raw)?,
            _ => return Err(NdaError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let n = &t.nda;
        let ssl = &self.ssl;
        Some(match key {
            "seed" => self.seed.to_string(),
            "data_seed" => self.data_seed.map_or("auto".to_string(), |s| s.to_string()),
            "data_classes" => self.data_classes.to_string(),
            "data_dim" => self.data_dim.to_string(),
            "data_per_class" => self.data_per_class.to_string(),
            "data_spread" => format!("{:?}", self.data_spread),
            "data_sigma" => format!("{:?}", self.data_sigma),
            "ood_shift" => format!("{:?}", self.ood_shift),
            "test_fraction" => format!("{:?}", self.test_fraction),
            "validation_fraction" => format!("{:?}", t.validation_fraction),
            "hidden" => self
                .hidden
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "latent" => self.latent.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "learning_rate" => format!("{:?}", t.learning_rate),
            "momentum" => format!("{:?}", t.momentum),
            "lr_decay_every" => t.lr_decay_every.to_string(),
            "lr_decay_factor" => format!("{:?}", t.lr_decay_factor),
            "alpha" => format!("{:?}", n.alpha),
            "beta" => format!("{:?}", n.beta),
            "gamma" => format!("{:?}", n.gamma),
            "mean_variant" => n.mean_variant.to_string(),
            "siamese_variant" => n.siamese_variant.to_string(),
            "margin" => format!("{:?}", n.margin),
            "pair_fraction" => format!("{:?}", n.pair_fraction),
            "mean_loss" => t.mean_loss.to_string(),
            "siamese" => t.siamese.to_string(),
            "alternate" => t.alternate.to_string(),
            "ece_bins" => self.ece_bins.to_string(),
            "labeled_fraction" => format!("{:?}", ssl.labeled_fraction),
            "ensemble_size" => ssl.ensemble_size.to_string(),
            "threshold" => format!("{:?}", ssl.threshold),
            "phase1_epochs" => ssl.phase1_epochs.to_string(),
            "phase2_epochs" => ssl.phase2_epochs.to_string(),
            "noise_scale" => format!("{:?}", ssl.noise_scale),
            "mask_fraction" => format!("{:?}", ssl.mask_fraction),
            "consistency_weight" => format!("{:?}", ssl.consistency_weight),
            "nda_phase2" => ssl.nda_phase2.to_string(),
            _ => return None,
        })
    }

    /// Every key with its effective value, in a fixed order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            writeln!(out, "{key} = {}", self.get(key).expect("listed key")).unwrap();
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.train.validation_fraction;
        if !(0.0..1.0).contains(&self.test_fraction) || self.test_fraction + v >= 1.0 {
            return Err(NdaError::Config(format!(
                "test_fraction {} plus validation_fraction {v} must stay below 1",
                self.test_fraction
            )));
        }
        if self.latent == 0 || self.hidden.contains(&0) {
            return Err(NdaError::Config("layer widths must be positive".into()));
        }
        if self.ece_bins == 0 {
            return Err(NdaError::Config("ece_bins must be at least 1".into()));
        }
        if !(self.ood_shift >= 0.0) {
            return Err(NdaError::Config("ood_shift must be >= 0".into()));
        }
        self.blob_spec()
            .validate()
            .map_err(|e| NdaError::Config(e.to_string()))?;
        self.train.validate()?;
        self.ssl_config().validate()
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed
            .unwrap_or_else(|| sub_seed(self.seed, "data"))
    }

    pub fn init_seed(&self) -> u64 {
        sub_seed(self.seed, "init")
    }

    pub fn blob_spec(&self) -> BlobSpec {
        BlobSpec {
            num_classes: self.data_classes,
            dim: self.data_dim,
            per_class: self.data_per_class,
            spread: self.data_spread,
            sigma: self.data_sigma,
            seed: self.data_seed(),
        }
    }

    pub fn split_fractions(&self) -> [f64; 3] {
        let v = self.train.validation_fraction;
        [1.0 - v - self.test_fraction, v, self.test_fraction]
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: sub_seed(self.seed, "train"),
            ..self.train.clone()
        }
    }

    pub fn ssl_config(&self) -> SslConfig {
        SslConfig {
            train: self.train_config(),
            hidden: self.hidden.clone(),
            latent: self.latent,
            ..self.ssl.clone()
        }
    }
}
