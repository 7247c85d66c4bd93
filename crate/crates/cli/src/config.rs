use std::path::{Path, PathBuf};

use airfuse_core::dataset::{DatasetConfig, EmbeddingProvider};
use airfuse_core::forecaster::{ModelConfig, Variant};
use airfuse_core::harness::Experiment;
use airfuse_core::objective::{LossConfig, LossMode};
use airfuse_core::trainer::TrainConfig;
use airfuse_core::{Error, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Sensor CSV. When absent the default synthetic household is simulated.
    pub data: Option<PathBuf>,
    /// Defaults to `<report_dir>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: None,
            checkpoint: None,
            report_dir: PathBuf::from("reports"),
        }
    }
}

/// Synthetic household used when no data file is configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub days: u32,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self { days: 1 }
    }
}

/// Everything a subcommand needs, read from one TOML file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds both the simulator and training. Overrides `train.seed`.
    pub seed: Option<u64>,
    pub paths: Paths,
    pub simulation: SimulationConfig,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

/// Command-line overrides. Anything given here wins over the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML run config; flags below override its values
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub report_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Days to simulate when no data file is given
    #[arg(long)]
    pub days: Option<u32>,
    #[arg(long)]
    pub lookback: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Hidden width h of the encoders and fusion
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Feedback rounds R
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub variant: Option<Variant>,
    /// mse_only, mse_nll_homo or mse_nll_hetero
    #[arg(long, value_parser = parse_loss_mode)]
    pub loss_mode: Option<LossMode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

fn parse_loss_mode(s: &str) -> std::result::Result<LossMode, String> {
    [LossMode::MseOnly, LossMode::MseNllHomo, LossMode::MseNllHetero]
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| format!("unknown loss mode `{s}`"))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().trim().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Reads the config file (if any), applies flag overrides and validates.
    pub fn resolve(o: &Overrides) -> Result<Self> {
        let mut c = match &o.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        c.apply(o);
        c.validate()?;
        Ok(c)
    }

    fn apply(&mut self, o: &Overrides) {
        fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
            if let Some(v) = src {
                *dst = v.clone();
            }
        }
        if o.data.is_some() {
            self.paths.data = o.data.clone();
        }
        if o.checkpoint.is_some() {
            self.paths.checkpoint = o.checkpoint.clone();
        }
        set(&mut self.paths.report_dir, &o.report_dir);
        if o.seed.is_some() {
            self.seed = o.seed;
        }
        set(&mut self.simulation.days, &o.days);
        set(&mut self.dataset.lookback, &o.lookback);
        set(&mut self.dataset.horizon, &o.horizon);
        set(&mut self.dataset.stride, &o.stride);
        if let Some(h) = o.hidden {
            self.model.hidden = h;
            self.model.gru_long = h;
            self.model.gru_short = h;
        }
        set(&mut self.model.rounds, &o.rounds);
        set(&mut self.model.variant, &o.variant);
        set(&mut self.loss.mode, &o.loss_mode);
        set(&mut self.train.epochs, &o.epochs);
        set(&mut self.train.warmup_epochs, &o.warmup_epochs);
        set(&mut self.train.batch_size, &o.batch_size);
        set(&mut self.train.learning_rate, &o.learning_rate);
        if let Some(s) = self.seed {
            self.train.seed = s;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.simulation.days == 0 {
            return Err(Error::Config("simulation.days must be >= 1".into()));
        }
        self.dataset.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.experiment(&self.provider()?).model.validate()
    }

    pub fn provider(&self) -> Result<EmbeddingProvider> {
        self.dataset.embedding.provider()
    }

    pub fn experiment(&self, provider: &EmbeddingProvider) -> Experiment {
        Experiment {
            dataset: self.dataset.clone(),
            model: self.model.clone(),
            loss: self.loss.clone(),
            train: self.train.clone(),
        }
        .resolved(provider)
    }

    pub fn simulation_seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.paths.report_dir.join("model.ckpt"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
