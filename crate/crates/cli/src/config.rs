use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use store_core::data::{DatasetSchema, SyntheticSpec};
use store_core::model::{ItemInput, StoreConfig};
use store_core::tokenizer::{OpmqConfig, RqConfig};

pub const SEED_ENV: &str = "STORE_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    /// Output of `gen-synthetic`; random validation split.
    #[default]
    Synthetic,
    /// Avazu-style click log; the last rows are held out.
    Avazu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Click-log CSV. Without it, the synthetic spec is generated in memory.
    pub path: Option<PathBuf>,
    pub format: DataFormat,
    /// Column roles for Avazu-style files; the standard Avazu layout when unset.
    pub schema: Option<DatasetSchema>,
    pub val_fraction: f64,
    pub skip_malformed: bool,
    /// Pretrained item embeddings CSV.
    pub embeddings: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            format: DataFormat::Synthetic,
            schema: None,
            val_fraction: 1.0 / 6.0,
            skip_malformed: false,
            embeddings: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    #[default]
    Opmq,
    Rq,
    RawId,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub kind: TokenizerKind,
    /// Trained OPMQ artifact.
    pub model: Option<PathBuf>,
    /// Precomputed semantic-ID table; takes precedence over `model`.
    pub sids: Option<PathBuf>,
    pub opmq: OpmqConfig,
    pub rq: RqConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub eval_batch: usize,
    pub max_steps: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            eval_batch: 4096,
            max_steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub seq_lens: Vec<usize>,
    pub block_size: usize,
    pub sparsity: f64,
    pub d_model: usize,
    pub n_heads: usize,
    /// Instances per timed call.
    pub batch: usize,
    /// Timed repetitions; the median is reported.
    pub reps: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            seq_lens: vec![64, 128, 256, 512],
            block_size: 32,
            sparsity: 0.5,
            d_model: 64,
            n_heads: 4,
            batch: 4,
            reps: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Epochs,
    KSid,
    Layers,
    Rho,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            param: SweepParam::Rho,
            values: vec![1.0, 0.5, 0.25],
        }
    }
}

/// Everything a run needs. Precedence, lowest first: built-in defaults,
/// the config file, `STORE_SEED`, command-line flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces the seed of every section.
    pub seed: Option<u64>,
    pub data: DataConfig,
    pub synthetic: SyntheticSpec,
    pub tokenizer: TokenizerSection,
    pub model: StoreConfig,
    pub train: TrainSection,
    pub bench: BenchSection,
    pub sweep: SweepSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Self::default(),
        };
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = Some(s.trim().parse().with_context(|| format!("{SEED_ENV}={s} is not an integer"))?);
        }
        Ok(cfg)
    }

    /// Pushes the shared seed into every section and aligns the tokenizer
    /// with the model.
    pub fn resolve(&mut self) {
        if let Some(s) = self.seed {
            self.synthetic.seed = s;
            self.tokenizer.opmq.seed = s;
            self.tokenizer.rq.seed = s;
            self.model.seed = s;
        }
        self.model.item_input = match self.tokenizer.kind {
            TokenizerKind::RawId => ItemInput::RawId,
            _ => ItemInput::Sid,
        };
        self.tokenizer.opmq.k = self.model.h;
        self.tokenizer.rq.k = self.model.h;
        self.tokenizer.opmq.v = self.model.v;
        self.tokenizer.rq.v = self.model.v;
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.tokenizer;
        if t.kind == TokenizerKind::RawId && (t.model.is_some() || t.sids.is_some()) {
            bail!("tokenizer kind raw_id cannot be combined with a tokenizer model or sid table path");
        }
        if t.kind == TokenizerKind::Rq && t.model.is_some() {
            bail!("tokenizer.model is an OPMQ artifact; use tokenizer.sids for a residual-quantizer table");
        }
        if !(self.data.val_fraction > 0.0 && self.data.val_fraction < 1.0) {
            bail!("data.val_fraction must be in (0, 1)");
        }
        for p in [&self.data.path, &self.data.embeddings, &t.model, &t.sids].into_iter().flatten() {
            if !p.exists() {
                bail!("missing input file {}", p.display());
            }
        }
        self.model.validate()?;
        self.synthetic.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Writes the resolved configuration next to a run's outputs.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join("resolved_config.toml"), self.to_toml()?)?;
        Ok(())
    }
}
