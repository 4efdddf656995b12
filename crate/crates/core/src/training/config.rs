use crate::error::{MilError, Result};
use crate::model::{ModelConfig, DEFAULT_PSEUDO_COUNT};
use crate::rng::stable_hash;
use crate::sampling::SamplingPolicy;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub sampling: SamplingPolicy,
    pub c_bag: f64,
    pub c_inst: f64,
    /// Pseudo labels per side for the instance head.
    pub pseudo_count: usize,
    pub weight_decay: f64,
    /// Feature jitter on training visits; zero disables it.
    pub augment_sigma: f64,
    pub block_widths: Vec<usize>,
    pub attention_dim: usize,
    /// Freeze every encoder block of freshly built models.
    pub freeze_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = ModelConfig::new(1);
        TrainConfig {
            lr: 2e-4,
            max_epochs: 200,
            patience: 20,
            seed: 0,
            sampling: SamplingPolicy::Full,
            c_bag: 0.7,
            c_inst: 0.3,
            pseudo_count: DEFAULT_PSEUDO_COUNT,
            weight_decay: 1e-5,
            augment_sigma: 0.0,
            block_widths: arch.block_widths,
            attention_dim: arch.attention_dim,
            freeze_encoder: true,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`].
pub const CONFIG_KEYS: &[&str] = &[
    "lr",
    "max_epochs",
    "patience",
    "seed",
    "sampling",
    "c_bag",
    "c_inst",
    "pseudo_count",
    "weight_decay",
    "augment_sigma",
    "block_widths",
    "attention_dim",
    "freeze_encoder",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| MilError::InvalidConfig(format!("bad value {value:?} for {key}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(MilError::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if self.patience == 0 || self.max_epochs == 0 {
            return Err(MilError::InvalidConfig(
                "patience and max_epochs must be at least 1".into(),
            ));
        }
        if self.c_bag < 0.0 || self.c_inst < 0.0 || (self.c_bag + self.c_inst - 1.0).abs() > 1e-9 {
            return Err(MilError::InvalidConfig(format!(
                "c_bag + c_inst must equal 1, got {} + {}",
                self.c_bag, self.c_inst
            )));
        }
        if self.pseudo_count == 0 {
            return Err(MilError::InvalidConfig("pseudo_count must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.augment_sigma >= 0.0) {
            return Err(MilError::InvalidConfig(
                "weight_decay and augment_sigma must be non-negative".into(),
            ));
        }
        self.sampling.validate()
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            block_widths: self.block_widths.clone(),
            attention_dim: self.attention_dim,
            n_classes: 2,
        }
    }

    /// Stable hash of every field, stored in checkpoints.
    pub fn fingerprint(&self) -> u64 {
        stable_hash(
            &self
                .to_pairs()
                .iter()
                .map(|(k, v)| format!("{k}={v}\n"))
                .collect::<String>(),
        )
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lr" => self.lr = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "sampling" => self.sampling = value.trim().parse()?,
            "c_bag" => self.c_bag = parse(key, value)?,
            "c_inst" => self.c_inst = parse(key, value)?,
            "pseudo_count" => self.pseudo_count = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "augment_sigma" => self.augment_sigma = parse(key, value)?,
            "block_widths" => {
                self.block_widths = value.split(',').map(|w| parse(key, w)).collect::<Result<_>>()?;
            }
            "attention_dim" => self.attention_dim = parse(key, value)?,
            "freeze_encoder" => self.freeze_encoder = parse(key, value)?,
            _ => return Err(MilError::InvalidConfig(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every field as `(key, value)` text, in [`CONFIG_KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let widths = self
            .block_widths
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let values = [
            self.lr.to_string(),
            self.max_epochs.to_string(),
            self.patience.to_string(),
            self.seed.to_string(),
            self.sampling.to_string(),
            self.c_bag.to_string(),
            self.c_inst.to_string(),
            self.pseudo_count.to_string(),
            self.weight_decay.to_string(),
            self.augment_sigma.to_string(),
            widths,
            self.attention_dim.to_string(),
            self.freeze_encoder.to_string(),
        ];
        CONFIG_KEYS.iter().copied().zip(values).collect()
    }
}
