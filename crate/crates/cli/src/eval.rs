use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;
use vsim::corpus::{load_corpus_with, LabelVocabulary, LoadMode, LoadOptions};
use vsim::eval::metrics::{pr_curve, LabelApGain};
use vsim::eval::synth::read_truth;
use vsim::eval::{ap_gain_report, average_precision, symmetric_kl, top_n_accuracy, PrPoint, DEFAULT_KL_FLOOR};
use vsim::pam::infer_pam_doc;
use vsim::rng::{substream, STREAM_IMAGE};
use vsim::{Corpus, PamModel, VsimError};

use crate::config::{from_config, layered, out_dir, read_config, CommonArgs, Layered};
use crate::manifest::Manifest;

/// Score decisions and scenes against ground truth.
#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Corpus with gt_label on the regions to score
    #[arg(long)]
    pub corpus: PathBuf,
    /// decisions.tsv written by `infer`
    #[arg(long)]
    pub decisions: PathBuf,
    /// Second decisions.tsv to report per-label AP gain against (e.g. a --da-iters 0 run)
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// scenes.tsv written by `infer`; scored against one of the references below
    #[arg(long)]
    pub scenes: Option<PathBuf>,
    /// Reference scenes: the semantic model's scene for each image's ground-truth labels
    #[arg(long, group = "scene_reference")]
    pub models: Option<PathBuf>,
    /// Reference scenes: the generator's latent truth.jsonl (needs models indexed like the generator)
    #[arg(long, group = "scene_reference")]
    pub latent: Option<PathBuf>,
    /// Reference scenes: another scenes.tsv
    #[arg(long, group = "scene_reference")]
    pub reference_scenes: Option<PathBuf>,
    /// Directory for report.json, report.txt and the manifest [default: print only]
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// TOML file with defaults for any of the flags below
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub settings: EvalSettings,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct EvalSettings {
    /// Image-level top-n cutoffs (repeatable) [default: 1 5]
    #[arg(long)]
    pub top_n: Option<Vec<usize>>,
    /// Probability floor inside the scene divergence [default: 1e-10]
    #[arg(long)]
    pub kl_floor: Option<f64>,
    /// Semantic inference sweeps for --models reference scenes [default: 100]
    #[arg(long)]
    pub pam_infer_iters: Option<usize>,
}
layered!(EvalSettings {
    top_n,
    kl_floor,
    pam_infer_iters,
});

/// One row of decisions.tsv.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRow {
    pub image_id: String,
    pub region_id: String,
    pub map_label: usize,
    pub retained: Vec<usize>,
    pub posterior: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DecisionFile {
    pub vocab: LabelVocabulary,
    pub rows: Vec<DecisionRow>,
}

fn schema(line: usize, field: &str, message: impl Into<String>) -> VsimError {
    VsimError::Schema {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

fn parse_vector(line: usize, field: &str, text: &str) -> vsim::Result<Vec<f64>> {
    text.split(',')
        .map(|x| x.parse::<f64>().map_err(|e| schema(line, field, format!("{x:?}: {e}"))))
        .collect()
}

pub fn read_decisions(path: &Path) -> vsim::Result<DecisionFile> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let vocab = match lines.next() {
        Some((_, head)) if head.starts_with("# labels: ") => {
            LabelVocabulary::new(head["# labels: ".len()..].split(','))?
        }
        _ => return Err(schema(1, "labels", "expected a `# labels: ` header")),
    };
    let label = |line: usize, name: &str| vocab.index_of(name).ok_or_else(|| schema(line, "label", name));
    let mut rows = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.starts_with("image_id\t") || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(schema(n, "row", format!("expected 5 fields, found {}", f.len())));
        }
        let retained = if f[3].is_empty() {
            Vec::new()
        } else {
            f[3].split(',').map(|l| label(n, l)).collect::<vsim::Result<_>>()?
        };
        let posterior = parse_vector(n, "posterior", f[4])?;
        if posterior.len() != vocab.len() {
            return Err(VsimError::DimensionMismatch {
                expected: vocab.len(),
                actual: posterior.len(),
            });
        }
        rows.push(DecisionRow {
            image_id: f[0].to_string(),
            region_id: f[1].to_string(),
            map_label: label(n, f[2])?,
            retained,
            posterior,
        });
    }
    Ok(DecisionFile { vocab, rows })
}

/// `image_id -> subtopic mixture` from scenes.tsv.
pub fn read_scenes(path: &Path) -> vsim::Result<BTreeMap<String, Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with("image_id\t") || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(schema(i + 1, "row", format!("expected 3 fields, found {}", f.len())));
        }
        out.insert(f[0].to_string(), parse_vector(i + 1, "subtopics", f[2])?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct TopN {
    pub n: usize,
    pub accuracy: f64,
    pub images: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SceneScore {
    pub mean_symmetric_kl: f64,
    pub images: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ApGain {
    pub mean_gain: f64,
    pub positive: usize,
    pub per_label: Vec<LabelApGain>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub regions: usize,
    pub images: usize,
    /// Mean over labels with a relevant region of the AP of ranking all
    /// regions by that label's posterior.
    pub mean_ap: f64,
    pub labels_scored: usize,
    /// Share of regions whose MAP label is the ground truth.
    pub region_top1: f64,
    /// Labels ranked by their largest region posterior in the image.
    pub image_top_n: Vec<TopN>,
    pub retained_precision: f64,
    pub retained_recall: f64,
    pub pr_curve: Vec<PrPoint>,
    pub scene: Option<SceneScore>,
    pub ap_gain: Option<ApGain>,
}

/// Decision rows aligned with the ground-truth regions, in corpus order.
struct Aligned<'a> {
    rows: Vec<&'a DecisionRow>,
    truth: Vec<usize>,
    /// `(image_id, row indices)` in corpus order.
    images: Vec<(String, Vec<usize>)>,
}

fn align<'a>(decisions: &'a DecisionFile, corpus: &Corpus) -> vsim::Result<Aligned<'a>> {
    let by_key: HashMap<(&str, &str), &DecisionRow> = decisions
        .rows
        .iter()
        .map(|r| ((r.image_id.as_str(), r.region_id.as_str()), r))
        .collect();
    let mut out = Aligned {
        rows: Vec::new(),
        truth: Vec::new(),
        images: Vec::new(),
    };
    for doc in &corpus.docs {
        let mut idx = Vec::new();
        for region in &doc.regions {
            let Some(gt) = region.gt_label else { continue };
            let row = by_key
                .get(&(doc.image_id.as_str(), region.region_id.as_str()))
                .ok_or_else(|| {
                    VsimError::InvalidCorpus(format!("no decision for {}/{}", doc.image_id, region.region_id))
                })?;
            idx.push(out.rows.len());
            out.rows.push(row);
            out.truth.push(gt);
        }
        if !idx.is_empty() {
            out.images.push((doc.image_id.clone(), idx));
        }
    }
    if out.rows.is_empty() {
        return Err(VsimError::InvalidCorpus("no region with an in-vocabulary gt_label".into()));
    }
    Ok(out)
}

const PR_THRESHOLDS: usize = 20;

fn score<'a>(decisions: &'a DecisionFile, corpus: &Corpus, settings: &EvalSettings) -> Result<(Report, Aligned<'a>)> {
    let a = align(decisions, corpus)?;
    let num_labels = decisions.vocab.len();

    let mut ap_sum = 0.0;
    let mut labels_scored = 0;
    for l in 0..num_labels {
        let relevance: Vec<bool> = a.truth.iter().map(|&t| t == l).collect();
        if !relevance.contains(&true) {
            continue;
        }
        let scores: Vec<f64> = a.rows.iter().map(|r| r.posterior[l]).collect();
        ap_sum += average_precision(&scores, &relevance)?;
        labels_scored += 1;
    }

    let correct = a.rows.iter().zip(&a.truth).filter(|(r, &t)| r.map_label == t).count();
    let region_top1 = correct as f64 / a.rows.len() as f64;

    let mut ranked = Vec::new();
    let mut gt_sets = Vec::new();
    for (_, idx) in &a.images {
        let mut best = vec![0.0f64; num_labels];
        for &i in idx {
            for (b, &p) in best.iter_mut().zip(&a.rows[i].posterior) {
                *b = b.max(p);
            }
        }
        ranked.push(vsim::eval::metrics::rank_order(&best));
        gt_sets.push(idx.iter().map(|&i| a.truth[i]).collect::<BTreeSet<usize>>());
    }
    let image_top_n = settings
        .top_n
        .clone()
        .unwrap_or_else(|| vec![1, 5])
        .into_iter()
        .map(|n| {
            let acc = top_n_accuracy(&ranked, &gt_sets, n)?;
            Ok(TopN {
                n,
                accuracy: acc.normalized,
                images: acc.evaluated,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let retained: usize = a.rows.iter().map(|r| r.retained.len()).sum();
    let retained_hits = a.rows.iter().zip(&a.truth).filter(|(r, t)| r.retained.contains(t)).count();

    let mut flat_scores = Vec::with_capacity(a.rows.len() * num_labels);
    let mut flat_rel = Vec::with_capacity(a.rows.len() * num_labels);
    for (r, &t) in a.rows.iter().zip(&a.truth) {
        for (l, &p) in r.posterior.iter().enumerate() {
            flat_scores.push(p);
            flat_rel.push(l == t);
        }
    }
    let thresholds: Vec<f64> = (1..PR_THRESHOLDS).map(|k| k as f64 / PR_THRESHOLDS as f64).collect();

    let report = Report {
        regions: a.rows.len(),
        images: a.images.len(),
        mean_ap: ap_sum / labels_scored.max(1) as f64,
        labels_scored,
        region_top1,
        image_top_n,
        retained_precision: if retained == 0 { 0.0 } else { retained_hits as f64 / retained as f64 },
        retained_recall: retained_hits as f64 / a.rows.len() as f64,
        pr_curve: pr_curve(&flat_scores, &flat_rel, &thresholds)?,
        scene: None,
        ap_gain: None,
    };
    Ok((report, a))
}

fn reference_scenes(args: &EvalArgs, corpus: &Corpus, settings: &EvalSettings, seed: u64) -> Result<BTreeMap<String, Vec<f64>>> {
    if let Some(path) = &args.reference_scenes {
        return Ok(read_scenes(path)?);
    }
    if let Some(path) = &args.latent {
        let truth = read_truth(path).with_context(|| format!("reading latent truth {}", path.display()))?;
        return Ok(truth.iter().map(|t| (t.image_id.clone(), t.scene().subtopic_mixture())).collect());
    }
    if let Some(dir) = &args.models {
        let pam = PamModel::load(dir.join(crate::train::PAM_FILE))?;
        if pam.vocab.content_hash() != corpus.vocab.content_hash() {
            return Err(VsimError::VocabularyMismatch {
                expected: corpus.vocab.content_hash(),
                found: pam.vocab.content_hash(),
            }
            .into());
        }
        let iters = settings.pam_infer_iters.unwrap_or(100);
        return Ok(corpus
            .docs
            .iter()
            .enumerate()
            .map(|(i, doc)| {
                let mut rng = substream(seed, &[STREAM_IMAGE, i as u64]);
                let inf = infer_pam_doc(&doc.gt_labels(), &pam, iters, &mut rng);
                (doc.image_id.clone(), inf.state.subtopic_mixture())
            })
            .collect());
    }
    anyhow::bail!("--scenes needs one of --models, --latent or --reference-scenes")
}

fn scene_score(
    scenes: &BTreeMap<String, Vec<f64>>,
    reference: &BTreeMap<String, Vec<f64>>,
    images: &[(String, Vec<usize>)],
    floor: f64,
) -> Result<SceneScore> {
    let mut sum = 0.0;
    for (image, _) in images {
        let s = scenes
            .get(image)
            .ok_or_else(|| VsimError::InvalidCorpus(format!("no scene for image {image}")))?;
        let r = reference
            .get(image)
            .ok_or_else(|| VsimError::InvalidCorpus(format!("no reference scene for image {image}")))?;
        sum += symmetric_kl(s, r, floor)?;
    }
    Ok(SceneScore {
        mean_symmetric_kl: sum / images.len().max(1) as f64,
        images: images.len(),
    })
}

pub fn render(report: &Report) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "regions\t{}\nimages\t{}", report.regions, report.images);
    let _ = writeln!(out, "mean_ap\t{:.6}\t({} labels)", report.mean_ap, report.labels_scored);
    let _ = writeln!(out, "region_top1\t{:.6}", report.region_top1);
    for t in &report.image_top_n {
        let _ = writeln!(out, "image_top{}\t{:.6}", t.n, t.accuracy);
    }
    let _ = writeln!(out, "retained_precision\t{:.6}", report.retained_precision);
    let _ = writeln!(out, "retained_recall\t{:.6}", report.retained_recall);
    if let Some(s) = &report.scene {
        let _ = writeln!(out, "scene_kl\t{:.6}\t({} images)", s.mean_symmetric_kl, s.images);
    }
    if let Some(g) = &report.ap_gain {
        let _ = writeln!(out, "ap_gain\t{:+.6}\t({}/{} labels improved)", g.mean_gain, g.positive, g.per_label.len());
    }
    let _ = writeln!(out, "pr_curve\tthreshold\tprecision\trecall");
    for p in &report.pr_curve {
        let _ = writeln!(out, "\t{:.2}\t{:.6}\t{:.6}", p.threshold, p.precision, p.recall);
    }
    out
}

pub fn run(args: EvalArgs) -> Result<()> {
    let table = read_config(args.config.as_deref())?;
    let common = args.common.clone().over(from_config(&table)?);
    let settings = args.settings.clone().over(from_config(&table)?);
    let seed = common.seed();

    let decisions = read_decisions(&args.decisions).with_context(|| format!("reading {}", args.decisions.display()))?;
    let opts = LoadOptions::new(LoadMode::Inference).with_vocab(decisions.vocab.clone());
    let corpus = load_corpus_with(&args.corpus, &opts)?.corpus;
    let (mut report, aligned) = score(&decisions, &corpus, &settings)?;

    if let Some(path) = &args.scenes {
        let scenes = read_scenes(path)?;
        let reference = reference_scenes(&args, &corpus, &settings, seed)?;
        let floor = settings.kl_floor.unwrap_or(DEFAULT_KL_FLOOR);
        report.scene = Some(scene_score(&scenes, &reference, &aligned.images, floor)?);
    }

    if let Some(path) = &args.baseline {
        let base = read_decisions(path).with_context(|| format!("reading {}", path.display()))?;
        if base.vocab.content_hash() != decisions.vocab.content_hash() {
            return Err(VsimError::VocabularyMismatch {
                expected: decisions.vocab.content_hash(),
                found: base.vocab.content_hash(),
            }
            .into());
        }
        let base_aligned = align(&base, &corpus)?;
        let posteriors = |a: &Aligned| a.rows.iter().map(|r| r.posterior.clone()).collect::<Vec<_>>();
        let gain = ap_gain_report(
            &posteriors(&base_aligned),
            &posteriors(&aligned),
            &aligned.truth,
            decisions.vocab.labels(),
        )?;
        report.ap_gain = Some(ApGain {
            mean_gain: gain.mean_gain,
            positive: gain.positive,
            per_label: gain.per_label,
        });
    }

    let text = render(&report);
    print!("{text}");
    if let Some(dir) = &args.out_dir {
        let dir = out_dir(dir)?;
        let outputs = [dir.join("report.json"), dir.join("report.txt")];
        fs::write(&outputs[0], serde_json::to_string_pretty(&report)? + "\n")?;
        fs::write(&outputs[1], &text)?;
        let mut inputs = vec![args.corpus.clone(), args.decisions.clone()];
        inputs.extend(
            [&args.baseline, &args.scenes, &args.latent, &args.reference_scenes]
                .into_iter()
                .flatten()
                .cloned(),
        );
        let config = json!({ "settings": settings, "models": args.models });
        Manifest::new("eval", seed, config)?.write(&dir, &inputs, &outputs)?;
    }
    Ok(())
}
