//! Training configuration and its `key = value` text form.
//!
//! ```text
//! # comments start with '#'
//! epochs = 20
//! optimizer = adam
//! learning_rate = 0.001
//! ```

use super::loss::LossKind;
use super::model::HeadMode;
use super::optim::OptimizerKind;
use super::TrainError;
use crate::checksum::crc64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerChoice {
    Sgd,
    Momentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassWeighting {
    None,
    /// Weight of class c is `n / (classes · n_c)`.
    InverseFrequency,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerChoice,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// `None` follows the head: categorical for softmax, per-class binary for sigmoid.
    pub loss: Option<LossKind>,
    pub head: HeadMode,
    pub deterministic: bool,
    /// Global L2-norm gradient clip.
    pub grad_clip: Option<f64>,
    pub class_weighting: ClassWeighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: OptimizerChoice::Adam,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            loss: None,
            head: HeadMode::Softmax,
            deterministic: true,
            grad_clip: None,
            class_weighting: ClassWeighting::None,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "learning_rate",
    "optimizer",
    "momentum",
    "beta1",
    "beta2",
    "epsilon",
    "seed",
    "loss",
    "head",
    "deterministic",
    "grad_clip",
    "class_weighting",
];

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V, TrainError> {
    value
        .parse()
        .map_err(|_| TrainError::InvalidConfig(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, TrainError> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(TrainError::InvalidConfig(format!("invalid value `{value}` for `{key}`"))),
    }
}

impl TrainConfig {
    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerChoice::Sgd => OptimizerKind::Sgd,
            OptimizerChoice::Momentum => OptimizerKind::Momentum { beta: self.momentum },
            OptimizerChoice::Adam => OptimizerKind::Adam {
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.epsilon,
            },
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss.unwrap_or_else(|| self.head.default_loss())
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, beta) in [("momentum", self.momentum), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return bad(format!("{name} must lie in [0, 1), got {beta}"));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" | "lr" => self.learning_rate = parse(key, value)?,
            "optimizer" => {
                self.optimizer = match value {
                    "sgd" => OptimizerChoice::Sgd,
                    "sgd-momentum" | "momentum" => OptimizerChoice::Momentum,
                    "adam" => OptimizerChoice::Adam,
                    _ => return Err(TrainError::InvalidConfig(format!("unknown optimizer `{value}`"))),
                }
            }
            "momentum" => self.momentum = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "epsilon" => self.epsilon = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "loss" => {
                self.loss = match value {
                    "auto" => None,
                    v => Some(v.parse().map_err(TrainError::InvalidConfig)?),
                }
            }
            "head" => self.head = value.parse().map_err(TrainError::InvalidConfig)?,
            "deterministic" => self.deterministic = parse_bool(key, value)?,
            "grad_clip" => {
                self.grad_clip = match value {
                    "none" | "off" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "class_weighting" => {
                self.class_weighting = match value {
                    "none" => ClassWeighting::None,
                    "inverse-frequency" => ClassWeighting::InverseFrequency,
                    _ => {
                        return Err(TrainError::InvalidConfig(format!(
                            "unknown class_weighting `{value}`"
                        )))
                    }
                }
            }
            _ => return Err(TrainError::InvalidConfig(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies every assignment in a config file body on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), TrainError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TrainError::InvalidConfig(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| match e {
                TrainError::InvalidConfig(msg) => {
                    TrainError::InvalidConfig(format!("line {}: {msg}", lineno + 1))
                }
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, TrainError> {
        let mut config = Self::default();
        config.apply_text(text)?;
        Ok(config)
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let optimizer = match self.optimizer {
            OptimizerChoice::Sgd => "sgd",
            OptimizerChoice::Momentum => "sgd-momentum",
            OptimizerChoice::Adam => "adam",
        };
        let loss = self.loss.map_or("auto".to_string(), |l| l.to_string());
        let clip = self.grad_clip.map_or("none".to_string(), |c| format!("{c:?}"));
        let weighting = match self.class_weighting {
            ClassWeighting::None => "none",
            ClassWeighting::InverseFrequency => "inverse-frequency",
        };
        format!(
            "epochs = {}\nbatch_size = {}\nlearning_rate = {:?}\noptimizer = {optimizer}\n\
             momentum = {:?}\nbeta1 = {:?}\nbeta2 = {:?}\nepsilon = {:?}\nseed = {}\n\
             loss = {loss}\nhead = {}\ndeterministic = {}\ngrad_clip = {clip}\n\
             class_weighting = {weighting}\n",
            self.epochs,
            self.batch_size,
            self.learning_rate,
            self.momentum,
            self.beta1,
            self.beta2,
            self.epsilon,
            self.seed,
            self.head,
            self.deterministic,
        )
    }

    pub fn hash(&self) -> u64 {
        crc64(self.to_text().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!(c.optimizer_kind(), OptimizerKind::adam());
        assert_eq!((c.epochs, c.batch_size, c.learning_rate), (20, 32, 1e-3));
        assert_eq!(c.loss_kind(), LossKind::CategoricalCrossEntropy);
        c.validate().unwrap();
    }

    #[test]
    fn parses_file_with_comments() {
        let text = "# training setup\nepochs = 3\n\n optimizer = sgd-momentum # heavy ball\nmomentum=0.5\nhead = sigmoid\n";
        let c = TrainConfig::from_text(text).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.optimizer_kind(), OptimizerKind::Momentum { beta: 0.5 });
        assert_eq!(c.loss_kind(), LossKind::BinaryCrossEntropy);
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut c = TrainConfig::default();
        c.set("learning_rate", "0.0003").unwrap();
        c.set("grad_clip", "5").unwrap();
        c.set("class_weighting", "inverse-frequency").unwrap();
        c.set("loss", "categorical-cross-entropy").unwrap();
        c.set("seed", "18446744073709551615").unwrap();
        let back = TrainConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        for key in CONFIG_KEYS {
            assert!(c.to_text().contains(&format!("{key} = ")), "{key}");
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TrainConfig::from_text("epochs 3").is_err());
        assert!(TrainConfig::from_text("nonsense = 1").is_err());
        assert!(TrainConfig::from_text("epochs = -1").is_err());
        let zero_lr = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(zero_lr.validate().is_err());
        let zero_batch = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(zero_batch.validate().is_err());
    }
}
