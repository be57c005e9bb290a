use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde_json::json;
use vsim::corpus::{build_vocabulary, load_corpus, LoadMode};
use vsim::neighborhood::{build_all_indices, make_bags};
use vsim::nnlda::train_nnlda;
use vsim::pam::train_pam;
use vsim::rng::{substream, STREAM_NNLDA_TRAIN, STREAM_PAM_TRAIN};

use crate::config::{from_config, out_dir, read_config, CommonArgs, Layered, ModelArgs, NeighborhoodArgs};
use crate::manifest::Manifest;

pub const PAM_FILE: &str = "pam.json";
pub const NNLDA_FILE: &str = "nnlda.json";
/// Labeled training regions with features, used to build bags at inference.
pub const REFERENCE_FILE: &str = "reference.tsv";
pub const NEIGHBORHOOD_FILE: &str = "neighborhood.json";

/// Train the semantic and visual models on a labeled corpus.
#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training corpus; every region needs a gt_label
    #[arg(long)]
    pub train: PathBuf,
    /// Directory for the model files and manifest
    #[arg(long)]
    pub out_dir: PathBuf,
    /// TOML file with defaults for any of the flags below
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub neighborhood: NeighborhoodArgs,
}

pub fn run(args: TrainArgs) -> Result<()> {
    let table = read_config(args.config.as_deref())?;
    let common = args.common.over(from_config(&table)?);
    let model = args.model.over(from_config(&table)?);
    let nb = args.neighborhood.over(from_config::<NeighborhoodArgs>(&table)?).neighborhood()?;
    let seed = common.seed();
    let dir = out_dir(&args.out_dir)?;

    let mut corpus = load_corpus(&args.train, LoadMode::Training)?;
    if let Some(k) = model.vocab_size {
        let vocab = build_vocabulary(&corpus, k)?;
        corpus = corpus.restrict_to(&vocab);
        log::info!("vocabulary restricted to {} labels", vocab.len());
    }

    let mut train_nb = nb.clone();
    train_nb.exclude_self = true;
    let indices = build_all_indices(&corpus)?;
    let (bagged, diagnostics) = make_bags(&corpus, &indices, &train_nb)?;
    for d in &diagnostics {
        log::warn!("{d}");
    }

    let pam_hyper = model.pam_hyper();
    let pam_cfg = model.pam_train();
    let nn_hyper = model.nnlda_hyper();
    let iters = model.iters();
    log::info!(
        "training on {} images, {} regions, {} labels",
        bagged.num_docs(),
        bagged.num_regions(),
        bagged.vocab.len()
    );
    let (pam, nn) = rayon::join(
        || train_pam(&bagged, pam_hyper.clone(), &pam_cfg, &mut substream(seed, &[STREAM_PAM_TRAIN])),
        || train_nnlda(&bagged, nn_hyper, iters, &mut substream(seed, &[STREAM_NNLDA_TRAIN])),
    );
    let (mut pam, mut nn) = (pam.context("training the semantic model")?, nn.context("training the visual model")?);
    pam.seed = Some(seed);
    nn.seed = Some(seed);

    let mut outputs = vec![dir.join(PAM_FILE), dir.join(NNLDA_FILE), dir.join(NEIGHBORHOOD_FILE)];
    pam.save(&outputs[0])?;
    nn.save(&outputs[1])?;
    std::fs::write(&outputs[2], serde_json::to_string_pretty(&nb)? + "\n")?;
    if !indices.is_empty() {
        let reference = dir.join(REFERENCE_FILE);
        corpus.save(&reference)?;
        outputs.push(reference);
    }

    let config = json!({
        "pam": pam_hyper,
        "pam_train": pam_cfg,
        "nnlda": nn_hyper,
        "nnlda_iters": iters,
        "vocab_size": model.vocab_size,
        "neighborhood": nb,
    });
    Manifest::new("train", seed, config)?.write(&dir, &[args.train], &outputs)?;
    log::info!("models written to {}", dir.display());
    Ok(())
}
