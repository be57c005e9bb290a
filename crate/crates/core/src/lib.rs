//! Visual-semantic label context models.
//!
//! A three-level Pachinko allocation model ([`pam`]) captures which object
//! labels co-occur in a scene, a nearest-neighbor LDA ([`nnlda`]) links each
//! label to the labels of visually similar training regions, and the
//! data-augmentation loop in [`joint`] alternates between the two to produce
//! per-region label posteriors.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod joint;
pub mod math;
pub mod neighborhood;
pub mod nnlda;
pub mod pam;
pub mod rng;

pub use corpus::{
    build_vocabulary, load_corpus, Corpus, Diagnostic, FeatureSpace, ImageDoc, LabelVocabulary, LoadMode,
    LoadOptions, RegionRecord,
};
pub use error::{ErrorClass, Result, VsimError};
pub use joint::{run_da, DaConfig, DaState, LabelDecision, Modulation};
pub use neighborhood::{BagOfLabels, DistanceNorm, FeatureSpaceIndex, NeighborhoodConfig};
pub use nnlda::{NnldaHyperparams, NnldaModel, RegionTopicEstimate};
pub use pam::{PamHyperparams, PamModel, SemanticDocState};
