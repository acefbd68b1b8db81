//! The run configuration: one strict TOML file per experiment.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bmd::{DEFAULT_THRESHOLD, REF_MEAN, REF_SD};
use crate::error::{Error, Result};
use crate::imaging::Canvas;
use crate::losses::LossWeights;
use crate::metrics::EvalConfig;
use crate::models::{DiscriminatorConfig, GeneratorConfig};
use crate::phantom::PhantomSpec;
use crate::train::{AugmentParams, BaselineConfig, LrPolicy, Stage, StageConfig, TrainSetup};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Required by `synth` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<PhantomSpec>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub stage1: StageOverrides,
    #[serde(default)]
    pub stage2: StageOverrides,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub discriminator: DiscriminatorConfig,
    #[serde(default)]
    pub bmd: BmdConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub paths: PathsConfig,
    #[serde(default)]
    pub seeds: Seeds,
    /// `false` behaves like `train --no-hl`.
    #[serde(default = "yes")]
    pub hierarchical: bool,
    #[serde(default)]
    pub baseline: BaselineConfig,
    /// Training pairs scored for the per-epoch validation PSNR.
    #[serde(default = "default_val_cases")]
    pub val_cases: usize,
}

fn yes() -> bool {
    true
}

fn default_val_cases() -> usize {
    4
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_cases: usize,
    pub split_fraction: f64,
    pub canvas: Canvas,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { n_cases: 120, split_fraction: 0.8, canvas: Canvas { width: 32, height: 64 } }
    }
}

/// Keys left out fall back to the stage defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_initial: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_policy: Option<LrPolicy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub augment: Option<AugmentParams>,
    /// Defaults to `seeds.train` (stage 1) or `seeds.train + 1` (stage 2).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rng_seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BmdConfig {
    pub threshold_t: f64,
    pub ref_mean: f64,
    pub ref_sd: f64,
}

impl Default for BmdConfig {
    fn default() -> Self {
        BmdConfig { threshold_t: DEFAULT_THRESHOLD, ref_mean: REF_MEAN, ref_sd: REF_SD }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub train: u64,
    /// Evaluation is deterministic; the seed is kept for completeness.
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { data: 7, train: 1, eval: 0 }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| describe_toml_error(text, &e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = &self.phantom {
            p.validate()?;
        }
        let d = &self.dataset;
        if d.n_cases < 2 || !(d.split_fraction > 0.0 && d.split_fraction < 1.0) {
            return Err(Error::Config(format!(
                "dataset: need n_cases ≥ 2 and split_fraction in (0, 1), got {} and {}",
                d.n_cases, d.split_fraction
            )));
        }
        if d.canvas.width == 0 || d.canvas.height == 0 {
            return Err(Error::Config("dataset.canvas must be non-empty".into()));
        }
        if !(self.bmd.ref_sd > 0.0) || !self.bmd.threshold_t.is_finite() {
            return Err(Error::Config("bmd: ref_sd must be > 0 and threshold_t finite".into()));
        }
        if self.val_cases == 0 {
            return Err(Error::Config("val_cases must be ≥ 1".into()));
        }
        for stage in [Stage::Stage1, Stage::Stage2] {
            self.stage(stage).validate()?;
        }
        Ok(())
    }

    /// Stage defaults with this file's overrides applied.
    pub fn stage(&self, stage: Stage) -> StageConfig {
        let (o, seed) = match stage {
            Stage::Stage1 => (&self.stage1, self.seeds.train),
            Stage::Stage2 => (&self.stage2, self.seeds.train.wrapping_add(1)),
        };
        let mut c = StageConfig::default_for(stage);
        c.rng_seed = seed;
        if let Some(v) = o.epochs {
            c.epochs = v;
        }
        if let Some(v) = o.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = o.lr_initial {
            c.lr_initial = v;
        }
        if let Some(v) = o.lr_policy {
            c.lr_policy = v;
        }
        if let Some(v) = o.weight_decay {
            c.weight_decay = v;
        }
        if let Some(v) = o.augment {
            c.augment = v;
        }
        if let Some(v) = o.rng_seed {
            c.rng_seed = v;
        }
        c
    }

    pub fn train_setup(&self, out_dir: Option<PathBuf>) -> TrainSetup {
        TrainSetup {
            generator: self.generator,
            discriminator: self.discriminator,
            loss: self.loss,
            val_cases: self.val_cases,
            config_hash: self.hash(),
            out_dir,
        }
    }

    /// SHA-256 of the canonical JSON form. Paths are excluded so that moving a
    /// run does not change its identity.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("paths");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

fn describe_toml_error(text: &str, err: &toml::de::Error) -> Error {
    let line = err.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
    let msg = err.message().trim().to_string();
    let mut out = match line {
        Some(l) => format!("line {l}: {msg}"),
        None => msg.clone(),
    };
    if let Some(hint) = suggestion(&msg) {
        out.push_str(&format!(" (did you mean `{hint}`?)"));
    }
    Error::Config(out)
}

/// Closest expected name for serde's "unknown field/variant `x`, expected ..."
/// messages.
fn suggestion(msg: &str) -> Option<String> {
    if !(msg.starts_with("unknown field") || msg.starts_with("unknown variant")) {
        return None;
    }
    let quoted: Vec<&str> = msg.split('`').skip(1).step_by(2).collect();
    let (bad, candidates) = quoted.split_first()?;
    candidates
        .iter()
        .map(|c| (strsim::normalized_levenshtein(bad, c), *c))
        .filter(|(score, _)| *score >= 0.5)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, c)| c.to_string())
}
