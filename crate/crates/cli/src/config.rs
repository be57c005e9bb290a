//! Layered settings: command-line flag, then config file, then default.
//!
//! The config file is TOML with the same (kebab-case) keys as the flags, in
//! one flat table. Each command reads only the keys it understands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use vsim::joint::{DaConfig, Modulation, SemanticContext};
use vsim::nnlda::NnldaHyperparams;
use vsim::pam::{PamHyperparams, PamTrainConfig};
use vsim::NeighborhoodConfig;

pub trait Layered {
    /// Fills every unset field of `self` from `lower`.
    fn over(self, lower: Self) -> Self;
}

macro_rules! layered {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl Layered for $ty {
            fn over(self, lower: Self) -> Self {
                Self { $($field: self.$field.or(lower.$field)),* }
            }
        }
    };
}
pub(crate) use layered;

/// Every key any command accepts, for typo warnings.
const KNOWN_KEYS: &[&str] = &[
    "seed", "workers", "num-super", "num-sub", "num-topics", "num-labels", "alpha0", "beta", "alpha", "psi", "iters",
    "alpha-update-start", "no-alpha-update", "vocab-size", "epsilon", "epsilon-space", "max-bag", "da-iters",
    "n-samples", "pam-infer-iters", "nnlda-infer-iters", "threshold", "modulation", "pool-weight", "context",
    "reinfer-visual", "early-stop", "train-docs", "test-docs", "doc-len-min", "doc-len-max", "bag-min", "bag-max",
    "truth-alpha0", "truth-concentration", "truth-phi", "truth-theta", "truth-gamma", "label-power", "feature-dim",
    "feature-noise", "top-n", "kl-floor", "samples", "burn-in", "tolerance", "bags-from-features", "instances", "da-tolerance",
];

/// Parsed config file, or an empty table.
pub fn read_config(path: Option<&Path>) -> Result<toml::Table> {
    let Some(path) = path else {
        return Ok(toml::Table::new());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    for key in table.keys() {
        if !KNOWN_KEYS.contains(&key.as_str()) {
            log::warn!("{}: unknown key `{key}` ignored", path.display());
        }
    }
    Ok(table)
}

/// The subset of `table` that `T` understands.
pub fn from_config<T: DeserializeOwned>(table: &toml::Table) -> Result<T> {
    Ok(toml::Value::Table(table.clone()).try_into()?)
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct CommonArgs {
    /// Root random seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it [default: all cores]
    #[arg(long)]
    pub workers: Option<usize>,
}
layered!(CommonArgs { seed, workers });

impl CommonArgs {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct ModelArgs {
    /// Supertopics S [default: 20]
    #[arg(long)]
    pub num_super: Option<usize>,
    /// Subtopics T [default: 50]
    #[arg(long)]
    pub num_sub: Option<usize>,
    /// Visual topics A [default: 50]
    #[arg(long)]
    pub num_topics: Option<usize>,
    /// Symmetric supertopic Dirichlet α0 [default: 1]
    #[arg(long)]
    pub alpha0: Option<f64>,
    /// Label Dirichlet β of the semantic model [default: 0.01]
    #[arg(long)]
    pub beta: Option<f64>,
    /// Topic Dirichlet α of the visual model [default: 0.1]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Label Dirichlet ψ of the visual model [default: 0.01]
    #[arg(long)]
    pub psi: Option<f64>,
    /// Gibbs sweeps for each model [default: 1000]
    #[arg(long)]
    pub iters: Option<usize>,
    /// Sweep at which αs re-estimation starts [default: 50]
    #[arg(long)]
    pub alpha_update_start: Option<usize>,
    /// Keep αs at its initial value
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub no_alpha_update: Option<bool>,
    /// Keep only the most frequent ground-truth labels [default: all]
    #[arg(long)]
    pub vocab_size: Option<usize>,
}
layered!(ModelArgs {
    num_super,
    num_sub,
    num_topics,
    alpha0,
    beta,
    alpha,
    psi,
    iters,
    alpha_update_start,
    no_alpha_update,
    vocab_size,
});

impl ModelArgs {
    pub fn pam_hyper(&self) -> PamHyperparams {
        let d = PamHyperparams::default();
        PamHyperparams::new(
            self.num_super.unwrap_or(d.num_super),
            self.num_sub.unwrap_or(d.num_sub),
            self.alpha0.unwrap_or(d.alpha0),
            self.beta.unwrap_or(d.beta),
        )
    }

    pub fn pam_train(&self) -> PamTrainConfig {
        let d = PamTrainConfig::default();
        PamTrainConfig {
            iters: self.iters.unwrap_or(d.iters),
            alpha_update_start: self.alpha_update_start.unwrap_or(d.alpha_update_start),
            update_alpha: !self.no_alpha_update.unwrap_or(false),
            moments: d.moments,
        }
    }

    pub fn nnlda_hyper(&self) -> NnldaHyperparams {
        let d = NnldaHyperparams::default();
        NnldaHyperparams::new(
            self.num_topics.unwrap_or(d.num_topics),
            self.alpha.unwrap_or(d.alpha),
            self.psi.unwrap_or(d.psi),
        )
    }

    pub fn iters(&self) -> usize {
        self.iters.unwrap_or(PamTrainConfig::default().iters)
    }
}

/// Bag construction for regions that carry features but no bag.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct NeighborhoodArgs {
    /// ε radius for every feature space [default: 1]
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// ε radius for one space, as `space=radius` (repeatable)
    #[arg(long, value_name = "SPACE=RADIUS")]
    pub epsilon_space: Option<Vec<String>>,
    /// Keep only the nearest neighbors per space [default: no cap]
    #[arg(long)]
    pub max_bag: Option<usize>,
}
layered!(NeighborhoodArgs {
    epsilon,
    epsilon_space,
    max_bag,
});

impl NeighborhoodArgs {
    pub fn is_empty(&self) -> bool {
        self.epsilon.is_none() && self.epsilon_space.is_none() && self.max_bag.is_none()
    }

    pub fn neighborhood(&self) -> Result<NeighborhoodConfig> {
        let mut cfg = NeighborhoodConfig::with_epsilon(self.epsilon.unwrap_or(1.0));
        cfg.epsilon = parse_space_radii(self.epsilon_space.as_deref().unwrap_or_default())?;
        cfg.max_bag = self.max_bag;
        Ok(cfg)
    }
}

fn parse_space_radii(entries: &[String]) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for e in entries {
        let Some((space, radius)) = e.split_once('=') else {
            bail!("--epsilon-space expects SPACE=RADIUS, got `{e}`");
        };
        let r: f64 = radius.parse().with_context(|| format!("radius in `{e}`"))?;
        out.insert(space.to_string(), r);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModulationArg {
    Augmented,
    Product,
    Replace,
    LogPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextArg {
    LeaveOneOut,
    OwnPath,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct DaArgs {
    /// Data-augmentation iterations; 0 reports visual-only posteriors [default: 6]
    #[arg(long)]
    pub da_iters: Option<usize>,
    /// Imputation replicates N^s per iteration [default: 500]
    #[arg(long)]
    pub n_samples: Option<usize>,
    /// Semantic inference sweeps per replicate [default: 100]
    #[arg(long)]
    pub pam_infer_iters: Option<usize>,
    /// Visual inference sweeps per region [default: 100]
    #[arg(long)]
    pub nnlda_infer_iters: Option<usize>,
    /// Posterior threshold for retained labels [default: 0.2]
    #[arg(long)]
    pub threshold: Option<f64>,
    /// How semantic context updates a posterior [default: augmented]
    #[arg(long, value_enum)]
    pub modulation: Option<ModulationArg>,
    /// Weight of the semantic term under log-pool [default: 0.5]
    #[arg(long)]
    pub pool_weight: Option<f64>,
    /// Subtopic distribution behind a region's semantic term [default: leave-one-out]
    #[arg(long, value_enum)]
    pub context: Option<ContextArg>,
    /// Re-run visual inference every iteration
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub reinfer_visual: Option<bool>,
    /// Stop once no posterior moves more than this in total variation
    #[arg(long)]
    pub early_stop: Option<f64>,
}
layered!(DaArgs {
    da_iters,
    n_samples,
    pam_infer_iters,
    nnlda_infer_iters,
    threshold,
    modulation,
    pool_weight,
    context,
    reinfer_visual,
    early_stop,
});

impl DaArgs {
    pub fn da_config(&self) -> DaConfig {
        let d = DaConfig::default();
        let modulation = match self.modulation {
            None | Some(ModulationArg::Augmented) => Modulation::Augmented,
            Some(ModulationArg::Product) => Modulation::Product,
            Some(ModulationArg::Replace) => Modulation::Replace,
            Some(ModulationArg::LogPool) => Modulation::LogPool {
                weight: self.pool_weight.unwrap_or(0.5),
            },
        };
        DaConfig {
            da_iters: self.da_iters.unwrap_or(d.da_iters),
            n_samples: self.n_samples.unwrap_or(d.n_samples),
            pam_infer_iters: self.pam_infer_iters.unwrap_or(d.pam_infer_iters),
            nnlda_infer_iters: self.nnlda_infer_iters.unwrap_or(d.nnlda_infer_iters),
            threshold: self.threshold.unwrap_or(d.threshold),
            modulation,
            context: match self.context {
                None | Some(ContextArg::LeaveOneOut) => SemanticContext::LeaveOneOut,
                Some(ContextArg::OwnPath) => SemanticContext::OwnPath,
            },
            early_stop: self.early_stop,
            reinfer_visual: self.reinfer_visual.unwrap_or(false),
            parallel_replicates: true,
        }
    }
}

/// `--out-dir`, created if missing.
pub fn out_dir(path: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(path.to_path_buf())
}
