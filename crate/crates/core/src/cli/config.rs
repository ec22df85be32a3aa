//! Run configuration: a plain `key = value` file, overridable by flags.
//!
//! ```text
//! # blobs, E-UNVP
//! mode = eunvp
//! alpha = 0.1
//! K = 2
//! dataset = blobs
//! ```
//!
//! Keys are case-sensitive; unknown keys are rejected. See [`RunConfig::set`]
//! for the full list.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{make_blob_domains_with, make_digit_domains, BlobLayout, BlobShift, Dataset};
use crate::error::{Error, Result};
use crate::generalizer::TrainConfig;

/// Where the source (and unseen) data come from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSpec {
    /// Generated 2-d blobs, see [`BlobSettings`].
    Blobs,
    /// 14×14 digits split from the corpus at [`DigitSettings::corpus`].
    Digits,
    /// A dataset container; the unseen set is read from `unseen_file` if set.
    File(PathBuf),
}

impl FromStr for DatasetSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(DatasetSpec::Blobs),
            "digits" => Ok(DatasetSpec::Digits),
            other => match other.strip_prefix("file:") {
                Some(p) if !p.is_empty() => Ok(DatasetSpec::File(PathBuf::from(p))),
                _ => Err(Error::Invalid(format!(
                    "unknown dataset '{other}' (blobs, digits, file:PATH)"
                ))),
            },
        }
    }
}

impl fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSpec::Blobs => f.write_str("blobs"),
            DatasetSpec::Digits => f.write_str("digits"),
            DatasetSpec::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSettings {
    pub classes: usize,
    pub n_per_class: usize,
    pub layout: BlobLayout,
    pub shift: BlobShift,
}

impl Default for BlobSettings {
    fn default() -> Self {
        BlobSettings {
            classes: 3,
            n_per_class: 100,
            layout: BlobLayout::default(),
            shift: BlobShift::rotate_scale(30.0, 1.3),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DigitSettings {
    pub corpus: PathBuf,
    pub subset: usize,
}

impl Default for DigitSettings {
    fn default() -> Self {
        DigitSettings {
            corpus: PathBuf::from("data/digits.bin"),
            subset: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    pub unseen_file: Option<PathBuf>,
    /// Seed for data generation and splitting; `train.seed` seeds the models.
    pub data_seed: u64,
    pub blobs: BlobSettings,
    pub digits: DigitSettings,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            dataset: DatasetSpec::Blobs,
            unseen_file: None,
            data_seed: 0,
            blobs: BlobSettings::default(),
            digits: DigitSettings::default(),
            out: PathBuf::from("runs/latest"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Invalid(format!("bad value '{value}' for {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl RunConfig {
    /// Applies one `key = value` setting.
    ///
    /// Keys: `mode`, `alpha`, `beta`, `K`, `ascent_steps`, `ascent_step_size`,
    /// `feature_reg_weight`, `flow_depth`, `flow_hidden`,
    /// `flow_residual_blocks`, `classifier_hidden` (comma list), `gamma`,
    /// `lambda`, `optimizer`, `lr`, `batch`, `epochs`, `pretrain_epochs`,
    /// `seed`, `data_seed`, `dataset`, `unseen_file`, `out`, `blob_classes`,
    /// `blob_n`, `blob_rotation`, `blob_scale`, `blob_translation_x`,
    /// `blob_translation_y`, `digits_corpus`, `digits_subset`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let g = &mut t.generalization;
        match key {
            "mode" => t.mode = value.parse()?,
            "alpha" => g.alpha = parse(key, value)?,
            "beta" => g.beta = parse(key, value)?,
            "K" => g.rounds = parse(key, value)?,
            "ascent_steps" => g.ascent_steps = parse(key, value)?,
            "ascent_step_size" => g.ascent_step_size = parse(key, value)?,
            "feature_reg_weight" => g.feature_reg_weight = parse(key, value)?,
            "flow_depth" => t.flow.depth = parse(key, value)?,
            "flow_hidden" => t.flow.hidden = parse(key, value)?,
            "flow_residual_blocks" => t.flow.residual_blocks = parse(key, value)?,
            "classifier_hidden" => t.classifier_hidden = parse_list(key, value)?,
            "gamma" => t.gamma = parse(key, value)?,
            "lambda" => t.lambda = parse(key, value)?,
            "optimizer" => t.optimizer = value.parse()?,
            "lr" => t.learning_rate = parse(key, value)?,
            "batch" => t.batch_size = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "pretrain_epochs" => t.pretrain_epochs = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "dataset" => self.dataset = value.parse()?,
            "unseen_file" => self.unseen_file = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "blob_classes" => self.blobs.classes = parse(key, value)?,
            "blob_n" => self.blobs.n_per_class = parse(key, value)?,
            "blob_rotation" => self.blobs.shift.rotation_deg = parse(key, value)?,
            "blob_scale" => self.blobs.shift.scale = parse(key, value)?,
            "blob_translation_x" => self.blobs.shift.translation[0] = parse(key, value)?,
            "blob_translation_y" => self.blobs.shift.translation[1] = parse(key, value)?,
            "digits_corpus" => self.digits.corpus = PathBuf::from(value),
            "digits_subset" => self.digits.subset = parse(key, value)?,
            other => return Err(Error::Invalid(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Applies every setting of a config file's text.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Invalid(format!("line {}: expected key = value", n + 1)));
            };
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Invalid(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let mut cfg = RunConfig::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.blobs.classes < 2 || self.blobs.n_per_class == 0 {
            return Err(Error::invalid("blobs need at least 2 classes and 1 sample per class"));
        }
        if self.digits.subset == 0 {
            return Err(Error::invalid("digits subset must be positive"));
        }
        Ok(())
    }

    /// Source and (if available) unseen domains.
    pub fn load_domains(&self) -> Result<(Dataset, Option<Dataset>)> {
        match &self.dataset {
            DatasetSpec::Blobs => {
                let b = &self.blobs;
                let (s, u) = make_blob_domains_with(&b.layout, b.classes, b.n_per_class, b.shift, self.data_seed)?;
                Ok((s, Some(u)))
            }
            DatasetSpec::Digits => {
                let (s, u) = make_digit_domains(&self.digits.corpus, self.digits.subset, self.data_seed)?;
                Ok((s, Some(u)))
            }
            DatasetSpec::File(p) => {
                let source = Dataset::load(p)?;
                let unseen = self.unseen_file.as_deref().map(Dataset::load).transpose()?;
                Ok((source, unseen))
            }
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
