use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use rayon::prelude::*;
use serde_json::json;
use vsim::corpus::{format_vector, load_corpus_with, LabelVocabulary, LoadMode, LoadOptions};
use vsim::joint::{run_da, DaOutcome};
use vsim::neighborhood::{build_all_indices, make_bags};
use vsim::rng::{substream, STREAM_IMAGE};
use vsim::{Corpus, NeighborhoodConfig, NnldaModel, PamModel, VsimError};

use crate::config::{from_config, out_dir, read_config, CommonArgs, DaArgs, Layered, NeighborhoodArgs};
use crate::manifest::Manifest;
use crate::train::{NEIGHBORHOOD_FILE, NNLDA_FILE, PAM_FILE, REFERENCE_FILE};

pub const DECISIONS_FILE: &str = "decisions.tsv";
pub const SCENES_FILE: &str = "scenes.tsv";

/// Infer per-region label posteriors and per-image scenes.
#[derive(Debug, Args)]
pub struct InferArgs {
    /// Directory written by `train`
    #[arg(long)]
    pub models: PathBuf,
    /// Corpus to label; regions need a bag or a feature vector
    #[arg(long)]
    pub corpus: PathBuf,
    /// Directory for decisions.tsv, scenes.tsv and the manifest
    #[arg(long)]
    pub out_dir: PathBuf,
    /// TOML file with defaults for any of the flags below
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub da: DaArgs,
    /// Overrides the bag settings saved with the models
    #[command(flatten)]
    pub neighborhood: NeighborhoodArgs,
}

/// Labels declared by `@label` lines, if the file has any.
fn declared_vocabulary(path: &Path) -> Result<Option<LabelVocabulary>> {
    let file = fs::File::open(path).map_err(VsimError::from)?;
    let mut names = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(VsimError::from)?;
        let Some(rest) = line.strip_prefix("@label\t") else { continue };
        if let Some(name) = rest.split('\t').find_map(|f| f.strip_prefix("name=")) {
            names.push(name.to_string());
        }
    }
    if names.is_empty() {
        return Ok(None);
    }
    Ok(Some(LabelVocabulary::new(names)?))
}

fn check_hash(expected: &LabelVocabulary, found: &LabelVocabulary) -> vsim::Result<()> {
    let (e, f) = (expected.content_hash(), found.content_hash());
    if e != f {
        return Err(VsimError::VocabularyMismatch { expected: e, found: f });
    }
    Ok(())
}

fn attach_bags(corpus: Corpus, models: &Path, nb: &NeighborhoodConfig) -> Result<Corpus> {
    if corpus.docs.iter().flat_map(|d| &d.regions).all(|r| r.bag.is_some()) {
        return Ok(corpus);
    }
    let reference_path = models.join(REFERENCE_FILE);
    let opts = LoadOptions::new(LoadMode::Training).with_vocab(corpus.vocab.clone());
    let reference = load_corpus_with(&reference_path, &opts)
        .with_context(|| format!("regions without bags need {}", reference_path.display()))?
        .corpus;
    let indices = build_all_indices(&reference)?;
    let (bagged, diagnostics) = make_bags(&corpus, &indices, nb)?;
    for d in &diagnostics {
        log::warn!("{d}");
    }
    Ok(bagged)
}

fn write_decisions(path: &Path, corpus: &Corpus, outcomes: &[DaOutcome]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let vocab = &corpus.vocab;
    writeln!(w, "# labels: {}", vocab.labels().join(","))?;
    writeln!(w, "image_id\tregion_id\tmap_label\tretained\tposterior")?;
    for (doc, outcome) in corpus.docs.iter().zip(outcomes) {
        for d in &outcome.decisions {
            let retained: Vec<&str> = d.retained_labels.iter().map(|&l| vocab.label(l)).collect();
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                doc.image_id,
                d.region_id,
                vocab.label(d.map_label),
                retained.join(","),
                format_vector(&d.posterior)
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_scenes(path: &Path, corpus: &Corpus, outcomes: &[DaOutcome]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "image_id\ttheta_s\tsubtopics")?;
    for (doc, outcome) in corpus.docs.iter().zip(outcomes) {
        let scene = outcome.state.scene().context("inference produced no scene")?;
        writeln!(
            w,
            "{}\t{}\t{}",
            doc.image_id,
            format_vector(&scene.theta_s),
            format_vector(&scene.subtopic_mixture())
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn run(args: InferArgs) -> Result<()> {
    let table = read_config(args.config.as_deref())?;
    let common = args.common.over(from_config(&table)?);
    let da = args.da.over(from_config(&table)?).da_config();
    da.validate()?;
    let nb_args = args.neighborhood.over(from_config(&table)?);
    let seed = common.seed();
    let dir = out_dir(&args.out_dir)?;

    let pam_path = args.models.join(PAM_FILE);
    let nn_path = args.models.join(NNLDA_FILE);
    let pam = PamModel::load(&pam_path).with_context(|| format!("loading {}", pam_path.display()))?;
    let nn = NnldaModel::load(&nn_path).with_context(|| format!("loading {}", nn_path.display()))?;
    check_hash(&pam.vocab, &nn.vocab).context("the two model files were trained on different vocabularies")?;
    if let Some(declared) = declared_vocabulary(&args.corpus)? {
        check_hash(&pam.vocab, &declared)
            .with_context(|| format!("{} declares a different label vocabulary", args.corpus.display()))?;
    }

    let nb = if nb_args.is_empty() && args.models.join(NEIGHBORHOOD_FILE).exists() {
        let text = fs::read_to_string(args.models.join(NEIGHBORHOOD_FILE))?;
        serde_json::from_str(&text).map_err(VsimError::from)?
    } else {
        nb_args.neighborhood()?
    };

    let opts = LoadOptions::new(LoadMode::Inference).with_vocab(pam.vocab.clone());
    let report = load_corpus_with(&args.corpus, &opts)?;
    for d in &report.diagnostics {
        log::warn!("{d}");
    }
    let corpus = attach_bags(report.corpus, &args.models, &nb)?;
    log::info!("inferring {} images, {} regions", corpus.num_docs(), corpus.num_regions());

    let outcomes: Vec<DaOutcome> = corpus
        .docs
        .par_iter()
        .enumerate()
        .map(|(i, doc)| {
            let mut rng = substream(seed, &[STREAM_IMAGE, i as u64]);
            run_da(doc, &pam, &nn, &da, &mut rng).with_context(|| format!("image {}", doc.image_id))
        })
        .collect::<Result<_>>()?;

    let decisions = dir.join(DECISIONS_FILE);
    let scenes = dir.join(SCENES_FILE);
    write_decisions(&decisions, &corpus, &outcomes)?;
    write_scenes(&scenes, &corpus, &outcomes)?;

    let config = json!({ "da": da, "neighborhood": nb });
    Manifest::new("infer", seed, config)?.write(&dir, &[pam_path, nn_path, args.corpus], &[decisions, scenes])?;
    log::info!("decisions written to {}", dir.display());
    Ok(())
}
