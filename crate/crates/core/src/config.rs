//! Flat TOML run configuration with `HYPERNAS_<KEY>` environment overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Stage;
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::intensive::DeriveConfig;
use crate::optim::{AdamConfig, SgdConfig};
use crate::search::SearchSchedule;
use crate::search_space::BackboneSpec;

pub const ENV_PREFIX: &str = "HYPERNAS_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,

    pub num_classes: usize,
    pub image_size: usize,
    pub in_channels: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub noise_std: f64,

    pub cells: usize,
    pub nodes: usize,
    pub channels: usize,
    pub stem_multiplier: usize,

    pub k: usize,
    pub backtrack: usize,
    pub derive_epochs: usize,
    pub t: usize,

    pub i_train: usize,
    pub i_cross_start: usize,
    pub i_cross_end: usize,
    pub i_total: usize,
    pub batch_size: usize,

    pub w_lr: f64,
    pub w_momentum: f64,
    pub w_weight_decay: f64,
    pub alpha_lr: f64,
    pub alpha_beta1: f64,
    pub alpha_beta2: f64,
    pub alpha_eps: f64,
    pub alpha_weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for RunConfig {
    /// The desk reference configuration.
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/desk"),
            num_classes: 4,
            image_size: 8,
            in_channels: 3,
            train_size: 128,
            val_size: 64,
            test_size: 64,
            noise_std: 2.0,
            cells: 4,
            nodes: 7,
            channels: 8,
            stem_multiplier: 3,
            k: 6,
            backtrack: 2,
            derive_epochs: 20,
            t: 2,
            i_train: 20,
            i_cross_start: 30,
            i_cross_end: 33,
            i_total: 40,
            batch_size: 32,
            w_lr: 0.025,
            w_momentum: 0.9,
            w_weight_decay: 3e-4,
            alpha_lr: 3e-4,
            alpha_beta1: 0.5,
            alpha_beta2: 0.999,
            alpha_eps: 1e-8,
            alpha_weight_decay: 1e-3,
            grad_clip: 5.0,
        }
    }
}

/// Keys that only affect stages after the one named; the hash of a stage
/// ignores them so later-stage edits can reuse earlier checkpoints.
const STAGE_KEYS: [(&str, Stage); 5] = [
    ("i_train", Stage::Train),
    ("i_cross_start", Stage::Search),
    ("i_cross_end", Stage::Search),
    ("i_total", Stage::Search),
    ("t", Stage::Discretize),
];

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// TOML without `out_dir`, for embedding in run artifacts that must not
    /// depend on where the run was written.
    pub fn to_portable_toml(&self) -> Result<String> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        table.remove("out_dir");
        toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Replaces every key `k` for which `lookup("HYPERNAS_" + K)` yields a
    /// value, parsed with the key's existing type.
    pub fn apply_overrides(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        let mut table = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        for (key, value) in table.iter_mut() {
            let var = format!("{ENV_PREFIX}{}", key.to_uppercase());
            let Some(raw) = lookup(&var) else { continue };
            let bad = |ty: &str| Error::Config(format!("{var}={raw:?} is not a valid {ty}"));
            *value = match value {
                toml::Value::Integer(_) => toml::Value::Integer(raw.trim().parse().map_err(|_| bad("integer"))?),
                toml::Value::Float(_) => toml::Value::Float(raw.trim().parse().map_err(|_| bad("number"))?),
                toml::Value::Boolean(_) => toml::Value::Boolean(raw.trim().parse().map_err(|_| bad("boolean"))?),
                _ => toml::Value::String(raw.clone()),
            };
        }
        *self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn apply_env(&mut self) -> Result<()> {
        self.apply_overrides(|k| std::env::var(k).ok())
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_classes", self.num_classes),
            ("image_size", self.image_size),
            ("in_channels", self.in_channels),
            ("train_size", self.train_size),
            ("val_size", self.val_size),
            ("test_size", self.test_size),
            ("cells", self.cells),
            ("channels", self.channels),
            ("stem_multiplier", self.stem_multiplier),
            ("k", self.k),
            ("t", self.t),
            ("derive_epochs", self.derive_epochs),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.k > 14 {
            return Err(Error::Config(format!("k = {} exceeds the 14 non-zero candidates of node 2", self.k)));
        }
        if self.t > self.k {
            return Err(Error::Config(format!("t = {} exceeds k = {}", self.t, self.k)));
        }
        if self.derive_epochs <= self.backtrack {
            return Err(Error::Config("derive_epochs must exceed backtrack".into()));
        }
        self.dataset().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.backbone().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.backbone()
            .check_input(&[1, self.in_channels, self.image_size, self.image_size])
            .map_err(|e| Error::Config(e.to_string()))?;
        self.schedule().validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn dataset(&self) -> DatasetSpec {
        DatasetSpec {
            num_classes: self.num_classes,
            channels: self.in_channels,
            image_size: self.image_size,
            train: self.train_size,
            val: self.val_size,
            test: self.test_size,
            noise_std: self.noise_std,
        }
    }

    pub fn backbone(&self) -> BackboneSpec {
        BackboneSpec {
            cells: self.cells,
            nodes: self.nodes,
            channels: self.channels,
            stem_multiplier: self.stem_multiplier,
            in_channels: self.in_channels,
            num_classes: self.num_classes,
        }
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig { momentum: self.w_momentum, weight_decay: self.w_weight_decay }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.alpha_beta1,
            beta2: self.alpha_beta2,
            eps: self.alpha_eps,
            weight_decay: self.alpha_weight_decay,
        }
    }

    pub fn derive(&self) -> DeriveConfig {
        DeriveConfig {
            epochs: self.derive_epochs,
            k: self.k,
            backtrack: self.backtrack,
            batch_size: self.batch_size,
            weight_lr: self.w_lr,
            sgd: self.sgd(),
            alpha_lr: self.alpha_lr,
            adam: self.adam(),
            grad_clip: self.grad_clip,
        }
    }

    pub fn schedule(&self) -> SearchSchedule {
        SearchSchedule {
            i_train: self.i_train,
            i_cross_start: self.i_cross_start,
            i_cross_end: self.i_cross_end,
            i_total: self.i_total,
            batch_size: self.batch_size,
            w_lr: self.w_lr,
            sgd: self.sgd(),
            alpha_lr: self.alpha_lr,
            adam: self.adam(),
            grad_clip: self.grad_clip,
        }
    }

    /// SHA-256 (first 16 hex digits) over every key that influences `stage`
    /// or an earlier one. `out_dir` never participates.
    pub fn stage_hash(&self, stage: Stage) -> Result<String> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        table.remove("out_dir");
        for (key, from) in STAGE_KEYS {
            if from > stage {
                table.remove(key);
            }
        }
        let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
        let digest = Sha256::digest(text.as_bytes());
        Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
    }
}
