//! Metrics, exact posteriors for small instances, and synthetic corpora.

pub mod metrics;
pub mod oracle;
pub mod synth;

pub use metrics::{
    ap_gain_report, average_precision, pr_curve, symmetric_kl, top_n_accuracy, ApGainReport, PrPoint, TopNAccuracy,
    DEFAULT_KL_FLOOR,
};
pub use oracle::{
    coupled_exact_posterior, nnlda_exact_posterior, pam_exact_posterior, CoupledExact, ExactPosterior, NnldaExact,
    PamExact,
};
pub use synth::{generate_synthetic, LatentTruth, SyntheticData, SyntheticSpec};
