//! Flat `key = value` experiment configuration: parsing, defaults, and
//! cross-field validation.
//!
//! The format is one assignment per line; `#` starts a comment and blank
//! lines are ignored. Every key has a default, so an empty file is a valid
//! (toy-scale) experiment. Unknown or duplicate keys are rejected rather
//! than silently ignored.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{apportion, PartitionSpec};
use crate::error::{Error, Result};
use crate::federation::{Mode, PseudoPolicy};
use crate::models::lora::{LoraAdapter, TargetSelect};
use crate::models::train::OptimizerKind;
use crate::models::{SegNet, SegNetConfig};

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub pseudo_policy: PseudoPolicy,
    pub rounds: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Side length of the square synthetic images.
    pub image_size: usize,
    pub num_classes: usize,
    pub noise_sd: f64,
    pub public_count: usize,
    pub client_counts: Vec<usize>,
    pub noniid_skew: f64,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    pub teacher_base_channels: usize,
    pub teacher_depth: usize,
    /// One entry per client, aligned with `client_counts`.
    pub client_base_channels: Vec<usize>,
    pub client_depth: Vec<usize>,
    pub lora_rank: usize,
    pub lora_alpha: f32,
    pub lora_dropout: f32,
    pub optimizer: OptimizerKind,
    pub lr: f32,
    pub batch_size: usize,
    /// Weight of the soft-label KL term in heterogeneous aggregation.
    pub beta: f32,
    pub teacher_pretrain_epochs: usize,
    pub teacher_finetune_epochs: usize,
    pub global_epochs: usize,
    pub client_pretrain_epochs: usize,
    pub epochs_per_round: usize,
    pub rf_epochs: usize,
}

impl Default for ExperimentConfig {
    /// The toy scenario: four clients on 64×64 binary shapes.
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            mode: Mode::Homogeneous,
            pseudo_policy: PseudoPolicy::Agreement,
            rounds: 10,
            seed: 0,
            out_dir: PathBuf::from("out"),
            image_size: 64,
            num_classes: 2,
            noise_sd: 0.15,
            public_count: 20,
            client_counts: vec![10, 14, 24, 32],
            noniid_skew: 0.8,
            train_ratio: 0.8,
            val_ratio: 0.1,
            test_ratio: 0.1,
            teacher_base_channels: 16,
            teacher_depth: 1,
            client_base_channels: vec![6, 6, 6, 6],
            client_depth: vec![2, 2, 2, 2],
            lora_rank: 2,
            lora_alpha: 4.0,
            lora_dropout: 0.1,
            optimizer: OptimizerKind::AdamW,
            lr: 1e-3,
            batch_size: 4,
            beta: 0.5,
            teacher_pretrain_epochs: 24,
            teacher_finetune_epochs: 8,
            global_epochs: 12,
            client_pretrain_epochs: 8,
            epochs_per_round: 2,
            rf_epochs: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidConfig(format!("cannot read config {}: {e}", path.display()))
        })?;
        ExperimentConfig::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = BTreeSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected `key = value`", idx + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::InvalidConfig(format!("line {}: duplicate key `{key}`", idx + 1)));
            }
            cfg.apply(key, value)
                .map_err(|e| Error::InvalidConfig(format!("line {}: {e}", idx + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mode" => self.mode = Mode::parse(value)?,
            "pseudo_policy" => self.pseudo_policy = PseudoPolicy::parse(value)?,
            "rounds" => self.rounds = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "image_size" => self.image_size = num(key, value)?,
            "num_classes" => self.num_classes = num(key, value)?,
            "noise_sd" => self.noise_sd = num(key, value)?,
            "public_count" => self.public_count = num(key, value)?,
            "client_counts" => self.client_counts = list(key, value)?,
            "noniid_skew" => self.noniid_skew = num(key, value)?,
            "train_ratio" => self.train_ratio = num(key, value)?,
            "val_ratio" => self.val_ratio = num(key, value)?,
            "test_ratio" => self.test_ratio = num(key, value)?,
            "teacher_base_channels" => self.teacher_base_channels = num(key, value)?,
            "teacher_depth" => self.teacher_depth = num(key, value)?,
            "client_base_channels" => self.client_base_channels = list(key, value)?,
            "client_depth" => self.client_depth = list(key, value)?,
            "lora_rank" => self.lora_rank = num(key, value)?,
            "lora_alpha" => self.lora_alpha = num(key, value)?,
            "lora_dropout" => self.lora_dropout = num(key, value)?,
            "optimizer" => self.optimizer = OptimizerKind::parse(value)?,
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "teacher_pretrain_epochs" => self.teacher_pretrain_epochs = num(key, value)?,
            "teacher_finetune_epochs" => self.teacher_finetune_epochs = num(key, value)?,
            "global_epochs" => self.global_epochs = num(key, value)?,
            "client_pretrain_epochs" => self.client_pretrain_epochs = num(key, value)?,
            "epochs_per_round" => self.epochs_per_round = num(key, value)?,
            "rf_epochs" => self.rf_epochs = num(key, value)?,
            _ => return Err(Error::InvalidConfig(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn teacher_net(&self) -> SegNetConfig {
        SegNetConfig {
            base_channels: self.teacher_base_channels,
            depth: self.teacher_depth,
            num_classes: self.num_classes,
            input_size: (self.image_size, self.image_size),
        }
    }

    pub fn client_nets(&self) -> Vec<SegNetConfig> {
        self.client_base_channels
            .iter()
            .zip(&self.client_depth)
            .map(|(&base_channels, &depth)| SegNetConfig {
                base_channels,
                depth,
                num_classes: self.num_classes,
                input_size: (self.image_size, self.image_size),
            })
            .collect()
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            public_count: self.public_count,
            client_counts: self.client_counts.clone(),
            noniid_skew: self.noniid_skew,
            ratios: (self.train_ratio, self.val_ratio, self.test_ratio),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.partition_spec().validate()?;
        let n = self.client_counts.len();
        if self.client_base_channels.len() != n || self.client_depth.len() != n {
            return Err(Error::InvalidConfig(format!(
                "client_counts has {n} entries but client_base_channels has {} and client_depth has {}",
                self.client_base_channels.len(),
                self.client_depth.len()
            )));
        }
        let clients = self.client_nets();
        self.teacher_net().validate()?;
        for c in &clients {
            c.validate()?;
        }
        if self.mode == Mode::Homogeneous && clients.iter().any(|c| *c != clients[0]) {
            return Err(Error::InvalidConfig(
                "homogeneous mode requires identical client architectures".into(),
            ));
        }
        if self.image_size < 8 || self.image_size % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "image_size {} must be even and >= 8",
                self.image_size
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_sd) {
            return Err(Error::InvalidConfig(format!("noise_sd {} outside [0, 1]", self.noise_sd)));
        }
        for (i, &count) in self.client_counts.iter().enumerate() {
            let parts = apportion(count, &[self.train_ratio, self.val_ratio, self.test_ratio]);
            if parts[0] == 0 || parts[2] == 0 {
                return Err(Error::InvalidConfig(format!(
                    "client {} count {count} leaves an empty train or test split",
                    i + 1
                )));
            }
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::InvalidConfig(format!("lr {} must be finite and >= 0", self.lr)));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::InvalidConfig(format!("beta {} must be finite and >= 0", self.beta)));
        }
        if !self.lora_alpha.is_finite() || self.lora_alpha <= 0.0 {
            return Err(Error::InvalidConfig(format!("lora_alpha {} must be > 0", self.lora_alpha)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.epochs_per_round == 0 {
            return Err(Error::InvalidConfig("epochs_per_round must be >= 1".into()));
        }
        // Dry-run the adapter construction so rank/dropout problems surface
        // at config load instead of mid-initialization.
        let teacher = SegNet::new(self.teacher_net())?;
        let probe = teacher.init_params(0);
        LoraAdapter::new(&probe, &TargetSelect::Auto, self.lora_rank, self.lora_alpha, self.lora_dropout, 0)?;
        Ok(())
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::InvalidConfig(format!("key `{key}`: cannot parse `{value}`: {e}")))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value.split(',').map(|part| num(key, part.trim())).collect()
}
