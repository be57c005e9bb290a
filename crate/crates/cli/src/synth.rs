use std::fs;
use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use serde::{Deserialize, Serialize};
use vsim::eval::synth::{draw_centroids, FeatureSynth, ModelShape, SizeRange, TruthPriors};
use vsim::eval::{generate_synthetic, SyntheticSpec};
use vsim::Corpus;

use crate::config::{from_config, layered, out_dir, read_config, CommonArgs, Layered};
use crate::manifest::Manifest;

/// Generate a labeled corpus pair from random true model parameters.
#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory for train.tsv, test.tsv, truth.jsonl, spec.json and the manifest
    #[arg(long)]
    pub out_dir: PathBuf,
    /// TOML file with defaults for any of the flags below
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub shape: SynthShapeArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct SynthShapeArgs {
    /// Training images [default: 200]
    #[arg(long)]
    pub train_docs: Option<usize>,
    /// Test images [default: 50]
    #[arg(long)]
    pub test_docs: Option<usize>,
    /// True supertopics [default: 20]
    #[arg(long)]
    pub num_super: Option<usize>,
    /// True subtopics [default: 50]
    #[arg(long)]
    pub num_sub: Option<usize>,
    /// True visual topics [default: 50]
    #[arg(long)]
    pub num_topics: Option<usize>,
    /// Label vocabulary size [default: 200]
    #[arg(long)]
    pub num_labels: Option<usize>,
    /// Shortest image, in regions [default: 5]
    #[arg(long)]
    pub doc_len_min: Option<usize>,
    /// Longest image, in regions [default: 9]
    #[arg(long)]
    pub doc_len_max: Option<usize>,
    /// Smallest bag [default: 3]
    #[arg(long)]
    pub bag_min: Option<usize>,
    /// Largest bag [default: 8]
    #[arg(long)]
    pub bag_max: Option<usize>,
    /// Dirichlet of the true supertopic proportions [default: 1]
    #[arg(long)]
    pub truth_alpha0: Option<f64>,
    /// Concentration of each true αs row [default: 5]
    #[arg(long)]
    pub truth_concentration: Option<f64>,
    /// Dirichlet the true subtopic label rows are drawn from [default: 0.05]
    #[arg(long)]
    pub truth_phi: Option<f64>,
    /// Dirichlet the true label topic rows are drawn from [default: 0.1]
    #[arg(long)]
    pub truth_theta: Option<f64>,
    /// Dirichlet the true topic label rows are drawn from [default: 0.05]
    #[arg(long)]
    pub truth_gamma: Option<f64>,
    /// Power-law exponent of label frequencies; 0 is balanced [default: 0]
    #[arg(long)]
    pub label_power: Option<f64>,
    /// Also emit feature vectors of this dimension [default: none]
    #[arg(long)]
    pub feature_dim: Option<usize>,
    /// Gaussian noise around the topic centroids [default: 0.5]
    #[arg(long)]
    pub feature_noise: Option<f64>,
    /// Leave bags out of both corpora so train and infer build them from features
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub bags_from_features: Option<bool>,
}

layered!(SynthShapeArgs {
    train_docs,
    test_docs,
    num_super,
    num_sub,
    num_topics,
    num_labels,
    doc_len_min,
    doc_len_max,
    bag_min,
    bag_max,
    truth_alpha0,
    truth_concentration,
    truth_phi,
    truth_theta,
    truth_gamma,
    label_power,
    feature_dim,
    feature_noise,
    bags_from_features,
});

/// Feature centroids are spread over `[0, 10]^dim`.
const CENTROID_SCALE: f64 = 10.0;
pub const FEATURE_SPACE: &str = "visual";

impl SynthShapeArgs {
    fn spec(&self, seed: u64) -> SyntheticSpec {
        let p = ModelShape::protocol();
        let shape = ModelShape {
            num_super: self.num_super.unwrap_or(p.num_super),
            num_sub: self.num_sub.unwrap_or(p.num_sub),
            num_topics: self.num_topics.unwrap_or(p.num_topics),
            num_labels: self.num_labels.unwrap_or(p.num_labels),
        };
        let d = TruthPriors::default();
        let priors = TruthPriors {
            alpha0: self.truth_alpha0.unwrap_or(d.alpha0),
            alpha_s_concentration: self.truth_concentration.unwrap_or(d.alpha_s_concentration),
            phi: self.truth_phi.unwrap_or(d.phi),
            theta: self.truth_theta.unwrap_or(d.theta),
            gamma: self.truth_gamma.unwrap_or(d.gamma),
            label_power: self.label_power.unwrap_or(d.label_power),
        };
        let mut spec = SyntheticSpec::random(
            shape,
            &priors,
            self.train_docs.unwrap_or(200),
            self.test_docs.unwrap_or(50),
            seed,
        );
        spec.doc_len = SizeRange::new(
            self.doc_len_min.unwrap_or(spec.doc_len.min),
            self.doc_len_max.unwrap_or(spec.doc_len.max),
        );
        spec.bag_size = SizeRange::new(
            self.bag_min.unwrap_or(spec.bag_size.min),
            self.bag_max.unwrap_or(spec.bag_size.max),
        );
        spec.features = self.feature_dim.map(|dim| FeatureSynth {
            space: FEATURE_SPACE.to_string(),
            dim,
            centroids: draw_centroids(shape.num_topics, dim, CENTROID_SCALE, seed),
            noise: self.feature_noise.unwrap_or(0.5),
        });
        spec
    }
}

fn strip_bags(corpus: &mut Corpus) {
    for r in corpus.docs.iter_mut().flat_map(|d| d.regions.iter_mut()) {
        r.bag = None;
    }
}

pub fn run(args: SynthArgs) -> Result<()> {
    let table = read_config(args.config.as_deref())?;
    let common = args.common.over(from_config(&table)?);
    let shape = args.shape.over(from_config(&table)?);
    let seed = common.seed();
    let dir = out_dir(&args.out_dir)?;

    let spec = shape.spec(seed);
    let mut data = generate_synthetic(&spec)?;
    if shape.bags_from_features.unwrap_or(false) {
        anyhow::ensure!(spec.features.is_some(), "--bags-from-features needs --feature-dim");
        strip_bags(&mut data.train);
        strip_bags(&mut data.test);
    }

    let outputs = [
        dir.join("train.tsv"),
        dir.join("test.tsv"),
        dir.join("truth.jsonl"),
        dir.join("spec.json"),
    ];
    data.train.save(&outputs[0])?;
    data.test.save(&outputs[1])?;
    fs::write(&outputs[2], data.truth_jsonl()?)?;
    fs::write(&outputs[3], serde_json::to_string(&spec)? + "\n")?;
    Manifest::new("synth", seed, &shape)?.write(&dir, &[], &outputs)?;
    log::info!(
        "{} training and {} test images written to {}",
        data.train.num_docs(),
        data.test.num_docs(),
        dir.display()
    );
    Ok(())
}
