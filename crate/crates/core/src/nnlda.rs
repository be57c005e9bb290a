//! Nearest-neighbor LDA: each semantic label `lz` is a "document" whose
//! tokens are the observed labels `lw` in the bags of its training regions.
//! `θ[l]` mixes visual topics per semantic label (visual polysemy) and
//! `γ[a]` mixes observed labels per visual topic (visual synonymy).

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, LabelVocabulary};
use crate::error::{Result, VsimError};
use crate::math;
use crate::neighborhood::BagOfLabels;
use crate::rng::{sample_categorical, sample_index};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NnldaHyperparams {
    pub num_topics: usize,
    pub alpha: f64,
    pub psi: f64,
}

impl NnldaHyperparams {
    pub fn new(num_topics: usize, alpha: f64, psi: f64) -> Self {
        Self { num_topics, alpha, psi }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_topics == 0 {
            return Err(VsimError::InvalidParameter("need at least one visual topic".into()));
        }
        for (name, v) in [("alpha", self.alpha), ("psi", self.psi)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(VsimError::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for NnldaHyperparams {
    /// 50 visual topics, `α = 0.1`, `ψ = 0.01`.
    fn default() -> Self {
        Self::new(50, 0.1, 0.01)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NnldaCounts {
    pub num_topics: usize,
    pub num_labels: usize,
    /// `L × A`
    pub n_lz_a: Vec<u32>,
    /// `A × L`
    pub n_a_lw: Vec<u32>,
    /// `L`; tokens per semantic label
    pub n_l: Vec<u32>,
    /// `A`; tokens per topic
    pub n_a: Vec<u32>,
    /// `(lz, lw)` token pairs.
    pub pairs: Vec<(usize, usize)>,
    /// Topic of each pair.
    pub assignments: Vec<u32>,
}

impl NnldaCounts {
    fn apply(&mut self, pair: usize, a: usize, add: bool) {
        let (lz, lw) = self.pairs[pair];
        let (na, nl) = (self.num_topics, self.num_labels);
        let cells = [
            lz * na + a,
            a * nl + lw,
        ];
        if add {
            self.n_lz_a[cells[0]] += 1;
            self.n_a_lw[cells[1]] += 1;
            self.n_l[lz] += 1;
            self.n_a[a] += 1;
        } else {
            self.n_lz_a[cells[0]] -= 1;
            self.n_a_lw[cells[1]] -= 1;
            self.n_l[lz] -= 1;
            self.n_a[a] -= 1;
        }
    }

    pub fn check_consistency(&self) -> std::result::Result<(), String> {
        let (na, nl) = (self.num_topics, self.num_labels);
        let mut n_lz_a = vec![0u32; nl * na];
        let mut n_a_lw = vec![0u32; na * nl];
        for (&(lz, lw), &a) in self.pairs.iter().zip(&self.assignments) {
            n_lz_a[lz * na + a as usize] += 1;
            n_a_lw[a as usize * nl + lw] += 1;
        }
        if n_lz_a != self.n_lz_a || n_a_lw != self.n_a_lw {
            return Err("topic tables disagree with assignments".into());
        }
        for l in 0..nl {
            let row: u32 = self.n_lz_a[l * na..(l + 1) * na].iter().sum();
            let tokens = self.pairs.iter().filter(|p| p.0 == l).count() as u32;
            if row != self.n_l[l] || row != tokens {
                return Err(format!("label {l}: row sum {row}, n_l {}, tokens {tokens}", self.n_l[l]));
            }
        }
        for a in 0..na {
            let row: u32 = self.n_a_lw[a * nl..(a + 1) * nl].iter().sum();
            if row != self.n_a[a] {
                return Err(format!("topic {a}: row sum {row}, n_a {}", self.n_a[a]));
            }
        }
        Ok(())
    }
}

/// Counts seen by one token's topic proposal, with that token removed.
#[derive(Debug, Clone, Copy)]
pub struct VisualView<'a> {
    /// Topic counts of the token's semantic label (or region), length `A`.
    pub doc_topics: &'a [u32],
    /// Topic counts of the token's observed label, `n_a_lw[·, lw]`, length `A`.
    pub word_in_topic: &'a [u32],
    /// Topic totals, length `A`.
    pub topic_totals: &'a [u32],
}

/// Unnormalized topic proposal for one `(lz, lw)` token; returns the total.
pub fn visual_weights(view: &VisualView<'_>, hyper: &NnldaHyperparams, num_labels: usize, out: &mut [f64]) -> f64 {
    let na = hyper.num_topics;
    let doc_len: u32 = view.doc_topics.iter().sum();
    let doc_denom = doc_len as f64 + na as f64 * hyper.alpha;
    let word_base = num_labels as f64 * hyper.psi;
    let mut total = 0.0;
    for a in 0..na {
        let w = (view.doc_topics[a] as f64 + hyper.alpha) / doc_denom
            * ((view.word_in_topic[a] as f64 + hyper.psi) / (view.topic_totals[a] as f64 + word_base));
        out[a] = w;
        total += w;
    }
    total
}

pub fn visual_proposal(view: &VisualView<'_>, hyper: &NnldaHyperparams, num_labels: usize) -> Vec<f64> {
    let mut out = vec![0.0; hyper.num_topics];
    let total = visual_weights(view, hyper, num_labels, &mut out);
    out.iter_mut().for_each(|w| *w /= total);
    out
}

#[derive(Debug, Clone, Default)]
pub struct VisualScratch {
    weights: Vec<f64>,
    word_col: Vec<u32>,
}

/// Resamples the topic of token pair `pair`.
pub fn gibbs_step_visual<R: Rng + ?Sized>(
    pair: usize,
    counts: &mut NnldaCounts,
    hyper: &NnldaHyperparams,
    scratch: &mut VisualScratch,
    rng: &mut R,
) -> usize {
    let (na, nl) = (counts.num_topics, counts.num_labels);
    let old = counts.assignments[pair] as usize;
    counts.apply(pair, old, false);
    let (lz, lw) = counts.pairs[pair];
    scratch.weights.resize(na, 0.0);
    scratch.word_col.clear();
    scratch.word_col.extend((0..na).map(|a| counts.n_a_lw[a * nl + lw]));
    let view = VisualView {
        doc_topics: &counts.n_lz_a[lz * na..(lz + 1) * na],
        word_in_topic: &scratch.word_col,
        topic_totals: &counts.n_a,
    };
    let total = visual_weights(&view, hyper, nl, &mut scratch.weights);
    let a = sample_index(&scratch.weights, total, rng);
    counts.apply(pair, a, true);
    counts.assignments[pair] = a as u32;
    a
}

/// Every `(gt_label, observed label)` token of a bagged training corpus.
pub fn training_pairs(corpus: &Corpus) -> Result<Vec<(usize, usize)>> {
    let mut pairs = Vec::new();
    for doc in &corpus.docs {
        for r in &doc.regions {
            let lz = r.gt_label.ok_or_else(|| VsimError::MissingGtLabel {
                image: doc.image_id.clone(),
                region: r.region_id.clone(),
            })?;
            let bag = r.bag.as_ref().filter(|b| !b.is_empty()).ok_or_else(|| VsimError::EmptyBag {
                context: Some(format!("{}/{}", doc.image_id, r.region_id)),
            })?;
            pairs.extend(bag.tokens().into_iter().map(|lw| (lz, lw)));
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone)]
pub struct NnldaTrainer {
    pub counts: NnldaCounts,
    pub hyper: NnldaHyperparams,
    scratch: VisualScratch,
}

impl NnldaTrainer {
    pub fn new<R: Rng + ?Sized>(
        pairs: Vec<(usize, usize)>,
        num_labels: usize,
        hyper: NnldaHyperparams,
        rng: &mut R,
    ) -> Result<Self> {
        hyper.validate()?;
        if pairs.is_empty() {
            return Err(VsimError::EmptyCorpus);
        }
        if let Some(p) = pairs.iter().find(|p| p.0 >= num_labels || p.1 >= num_labels) {
            return Err(VsimError::InvalidParameter(format!("pair {p:?} outside vocabulary of {num_labels}")));
        }
        let na = hyper.num_topics;
        let mut counts = NnldaCounts {
            num_topics: na,
            num_labels,
            n_lz_a: vec![0; num_labels * na],
            n_a_lw: vec![0; na * num_labels],
            n_l: vec![0; num_labels],
            n_a: vec![0; na],
            assignments: vec![0; pairs.len()],
            pairs,
        };
        for p in 0..counts.pairs.len() {
            let a = rng.random_range(0..na);
            counts.assignments[p] = a as u32;
            counts.apply(p, a, true);
        }
        Ok(Self {
            counts,
            hyper,
            scratch: VisualScratch::default(),
        })
    }

    pub fn step<R: Rng + ?Sized>(&mut self, pair: usize, rng: &mut R) -> usize {
        gibbs_step_visual(pair, &mut self.counts, &self.hyper, &mut self.scratch, rng)
    }

    pub fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for p in 0..self.counts.pairs.len() {
            self.step(p, rng);
        }
    }

    pub fn into_model(self, vocab: LabelVocabulary, seed: Option<u64>, iterations: usize) -> NnldaModel {
        NnldaModel::from_counts(self.hyper, self.counts.n_lz_a, self.counts.n_a_lw, vocab, seed, iterations)
    }
}

pub fn train_nnlda<R: Rng + ?Sized>(
    corpus: &Corpus,
    hyper: NnldaHyperparams,
    iters: usize,
    rng: &mut R,
) -> Result<NnldaModel> {
    let pairs = training_pairs(corpus)?;
    train_nnlda_pairs(pairs, corpus.vocab.clone(), hyper, iters, rng)
}

pub fn train_nnlda_pairs<R: Rng + ?Sized>(
    pairs: Vec<(usize, usize)>,
    vocab: LabelVocabulary,
    hyper: NnldaHyperparams,
    iters: usize,
    rng: &mut R,
) -> Result<NnldaModel> {
    let mut trainer = NnldaTrainer::new(pairs, vocab.len(), hyper, rng)?;
    for _ in 0..iters {
        trainer.sweep(rng);
    }
    Ok(trainer.into_model(vocab, None, iters))
}

/// A trained visual model with frozen corpus counts.
#[derive(Debug, Clone, PartialEq)]
pub struct NnldaModel {
    pub hyper: NnldaHyperparams,
    /// `L × A`
    pub n_lz_a: Vec<u32>,
    /// `A × L`
    pub n_a_lw: Vec<u32>,
    pub n_l: Vec<u32>,
    pub n_a: Vec<u32>,
    /// `L × A`, per semantic label.
    pub theta: Vec<f64>,
    /// `A × L`, per visual topic.
    pub gamma: Vec<f64>,
    pub vocab: LabelVocabulary,
    pub seed: Option<u64>,
    pub iterations: usize,
}

#[derive(Serialize, Deserialize)]
struct NnldaModelFile {
    format: String,
    hyper: NnldaHyperparams,
    vocabulary_hash: String,
    vocabulary: LabelVocabulary,
    seed: Option<u64>,
    iterations: usize,
    n_lz_a: Vec<Vec<u32>>,
    n_a_lw: Vec<Vec<u32>>,
    n_l: Vec<u32>,
    n_a: Vec<u32>,
}

const NNLDA_FORMAT: &str = "vsim-nnlda/1";

impl NnldaModel {
    pub fn from_counts(
        hyper: NnldaHyperparams,
        n_lz_a: Vec<u32>,
        n_a_lw: Vec<u32>,
        vocab: LabelVocabulary,
        seed: Option<u64>,
        iterations: usize,
    ) -> Self {
        let (na, nl) = (hyper.num_topics, vocab.len());
        let n_l: Vec<u32> = n_lz_a.chunks_exact(na).map(|r| r.iter().sum()).collect();
        let n_a: Vec<u32> = n_a_lw.chunks_exact(nl).map(|r| r.iter().sum()).collect();
        let mut theta = vec![0.0; nl * na];
        for l in 0..nl {
            let denom = n_l[l] as f64 + na as f64 * hyper.alpha;
            for a in 0..na {
                theta[l * na + a] = (n_lz_a[l * na + a] as f64 + hyper.alpha) / denom;
            }
        }
        let mut gamma = vec![0.0; na * nl];
        for a in 0..na {
            let denom = n_a[a] as f64 + nl as f64 * hyper.psi;
            for l in 0..nl {
                gamma[a * nl + l] = (n_a_lw[a * nl + l] as f64 + hyper.psi) / denom;
            }
        }
        Self {
            hyper,
            n_lz_a,
            n_a_lw,
            n_l,
            n_a,
            theta,
            gamma,
            vocab,
            seed,
            iterations,
        }
    }

    pub fn num_labels(&self) -> usize {
        self.vocab.len()
    }

    pub fn num_topics(&self) -> usize {
        self.hyper.num_topics
    }

    pub fn theta_row(&self, l: usize) -> &[f64] {
        let na = self.num_topics();
        &self.theta[l * na..(l + 1) * na]
    }

    pub fn gamma_row(&self, a: usize) -> &[f64] {
        let nl = self.num_labels();
        &self.gamma[a * nl..(a + 1) * nl]
    }

    /// Training-corpus label frequencies `n_l / Σ n_l`.
    pub fn label_prior(&self) -> Vec<f64> {
        let total: u32 = self.n_l.iter().sum();
        self.n_l.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let (na, nl) = (self.num_topics(), self.num_labels());
        let file = NnldaModelFile {
            format: NNLDA_FORMAT.into(),
            hyper: self.hyper,
            vocabulary_hash: self.vocab.content_hash(),
            vocabulary: self.vocab.clone(),
            seed: self.seed,
            iterations: self.iterations,
            n_lz_a: self.n_lz_a.chunks_exact(na).map(<[u32]>::to_vec).collect(),
            n_a_lw: self.n_a_lw.chunks_exact(nl).map(<[u32]>::to_vec).collect(),
            n_l: self.n_l.clone(),
            n_a: self.n_a.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: NnldaModelFile = serde_json::from_str(text)?;
        if file.format != NNLDA_FORMAT {
            return Err(VsimError::InvalidParameter(format!("unsupported model format {}", file.format)));
        }
        let found = file.vocabulary.content_hash();
        if found != file.vocabulary_hash {
            return Err(VsimError::VocabularyMismatch {
                expected: file.vocabulary_hash,
                found,
            });
        }
        file.hyper.validate()?;
        let (na, nl) = (file.hyper.num_topics, file.vocabulary.len());
        let shape_ok = file.n_lz_a.len() == nl
            && file.n_lz_a.iter().all(|r| r.len() == na)
            && file.n_a_lw.len() == na
            && file.n_a_lw.iter().all(|r| r.len() == nl);
        if !shape_ok {
            return Err(VsimError::InvalidParameter("count table shapes do not match L and A".into()));
        }
        let model = Self::from_counts(
            file.hyper,
            file.n_lz_a.concat(),
            file.n_a_lw.concat(),
            file.vocabulary,
            file.seed,
            file.iterations,
        );
        if model.n_l != file.n_l || model.n_a != file.n_a {
            return Err(VsimError::InvalidParameter("stored totals disagree with count tables".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Topic proportions `θ̃^r` of one region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionTopicEstimate {
    pub theta_r: Vec<f64>,
    /// Region topic counts averaged over the kept sweeps.
    pub counts: Vec<f64>,
}

impl RegionTopicEstimate {
    pub fn from_counts(counts: Vec<f64>, alpha: f64) -> Self {
        let total: f64 = counts.iter().sum();
        let denom = total + counts.len() as f64 * alpha;
        let theta_r = counts.iter().map(|c| (c + alpha) / denom).collect();
        Self { theta_r, counts }
    }
}

/// Gibbs chain over the topics of a new region's bag, with the corpus
/// counts frozen and the bag's own tokens tracked as transient counts.
#[derive(Debug, Clone)]
pub struct NnldaRegionChain<'m> {
    model: &'m NnldaModel,
    tokens: Vec<usize>,
    distinct: Vec<usize>,
    slot: Vec<usize>,
    region_topics: Vec<u32>,
    /// transient `A × distinct`
    extra_a_lw: Vec<u32>,
    extra_a: Vec<u32>,
    assignments: Vec<usize>,
    weights: Vec<f64>,
    word_col: Vec<u32>,
    totals: Vec<u32>,
}

impl<'m> NnldaRegionChain<'m> {
    pub fn new<R: Rng + ?Sized>(model: &'m NnldaModel, tokens: &[usize], rng: &mut R) -> Self {
        let na = model.num_topics();
        let mut distinct = Vec::new();
        let slot = tokens
            .iter()
            .map(|&l| match distinct.iter().position(|&x| x == l) {
                Some(k) => k,
                None => {
                    distinct.push(l);
                    distinct.len() - 1
                }
            })
            .collect();
        let mut chain = Self {
            model,
            tokens: tokens.to_vec(),
            extra_a_lw: vec![0; na * distinct.len()],
            distinct,
            slot,
            region_topics: vec![0; na],
            extra_a: vec![0; na],
            assignments: Vec::with_capacity(tokens.len()),
            weights: vec![0.0; na],
            word_col: vec![0; na],
            totals: vec![0; na],
        };
        for i in 0..tokens.len() {
            let a = rng.random_range(0..na);
            chain.apply(i, a, true);
            chain.assignments.push(a);
        }
        chain
    }

    fn apply(&mut self, i: usize, a: usize, add: bool) {
        let nd = self.distinct.len();
        let k = self.slot[i];
        let cells = [
            &mut self.region_topics[a],
            &mut self.extra_a_lw[a * nd + k],
            &mut self.extra_a[a],
        ];
        for c in cells {
            if add {
                *c += 1;
            } else {
                *c -= 1;
            }
        }
    }

    pub fn step<R: Rng + ?Sized>(&mut self, i: usize, rng: &mut R) {
        let model = self.model;
        let (na, nl) = (model.num_topics(), model.num_labels());
        let old = self.assignments[i];
        self.apply(i, old, false);
        let lw = self.tokens[i];
        let (k, nd) = (self.slot[i], self.distinct.len());
        for a in 0..na {
            self.word_col[a] = model.n_a_lw[a * nl + lw] + self.extra_a_lw[a * nd + k];
            self.totals[a] = model.n_a[a] + self.extra_a[a];
        }
        let view = VisualView {
            doc_topics: &self.region_topics,
            word_in_topic: &self.word_col,
            topic_totals: &self.totals,
        };
        let total = visual_weights(&view, &model.hyper, nl, &mut self.weights);
        let a = sample_index(&self.weights, total, rng);
        self.apply(i, a, true);
        self.assignments[i] = a;
    }

    pub fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for i in 0..self.tokens.len() {
            self.step(i, rng);
        }
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn run<R: Rng + ?Sized>(&mut self, iters: usize, rng: &mut R) -> RegionTopicEstimate {
        let na = self.model.num_topics();
        let mut acc = vec![0.0; na];
        let keep_from = iters / 2;
        let mut kept = 0usize;
        for sweep in 0..iters {
            self.sweep(rng);
            if sweep >= keep_from {
                kept += 1;
                for (x, &c) in acc.iter_mut().zip(&self.region_topics) {
                    *x += c as f64;
                }
            }
        }
        if kept == 0 {
            acc.iter_mut().zip(&self.region_topics).for_each(|(x, &c)| *x = c as f64);
            kept = 1;
        }
        acc.iter_mut().for_each(|x| *x /= kept as f64);
        RegionTopicEstimate::from_counts(acc, self.model.hyper.alpha)
    }
}

pub fn infer_region_topics<R: Rng + ?Sized>(
    bag: &BagOfLabels,
    model: &NnldaModel,
    iters: usize,
    rng: &mut R,
) -> Result<RegionTopicEstimate> {
    if bag.is_empty() {
        return Err(VsimError::EmptyBag { context: None });
    }
    if let Some((l, _)) = bag.iter().find(|&(l, _)| l >= model.num_labels()) {
        return Err(VsimError::InvalidParameter(format!("bag label {l} outside vocabulary")));
    }
    let mut chain = NnldaRegionChain::new(model, &bag.tokens(), rng);
    Ok(chain.run(iters, rng))
}

/// Unnormalized `score(l) = Σ_a θ[l,a] (n_l / n_a) θ̃^r[a]`, skipping topics
/// with `n_a = 0`.
pub fn label_scores(theta_r: &RegionTopicEstimate, model: &NnldaModel) -> Vec<f64> {
    let na = model.num_topics();
    (0..model.num_labels())
        .map(|l| {
            let theta = model.theta_row(l);
            (0..na)
                .filter(|&a| model.n_a[a] > 0)
                .map(|a| theta[a] * (model.n_l[l] as f64 / model.n_a[a] as f64) * theta_r.theta_r[a])
                .sum()
        })
        .collect()
}

/// Label likelihood of a region, normalized over the vocabulary. An
/// all-zero score vector becomes uniform.
pub fn label_likelihood(theta_r: &RegionTopicEstimate, model: &NnldaModel) -> Vec<f64> {
    let mut scores = label_scores(theta_r, model);
    let total = math::normalize(&mut scores);
    if !(total > 0.0 && total.is_finite()) {
        log::warn!("label likelihood has no mass; using the uniform distribution");
        return math::uniform(model.num_labels());
    }
    scores
}

/// Explicit generative parameters of the visual model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnldaGenerative {
    pub num_topics: usize,
    pub num_labels: usize,
    /// `L × A`
    pub theta: Vec<f64>,
    /// `A × L`
    pub gamma: Vec<f64>,
}

impl NnldaGenerative {
    pub fn from_model(model: &NnldaModel) -> Self {
        Self {
            num_topics: model.num_topics(),
            num_labels: model.num_labels(),
            theta: model.theta.clone(),
            gamma: model.gamma.clone(),
        }
    }

    pub fn theta_row(&self, l: usize) -> &[f64] {
        &self.theta[l * self.num_topics..(l + 1) * self.num_topics]
    }

    pub fn gamma_row(&self, a: usize) -> &[f64] {
        &self.gamma[a * self.num_labels..(a + 1) * self.num_labels]
    }

    /// `P(lw | lz) = Σ_a θ[lz,a] γ[a,lw]`.
    pub fn observed_marginal(&self, lz: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.num_labels];
        for (a, w) in self.theta_row(lz).iter().enumerate() {
            for (o, g) in out.iter_mut().zip(self.gamma_row(a)) {
                *o += w * g;
            }
        }
        out
    }

    /// Probability of a bag (as an ordered token sequence) given `lz`.
    pub fn bag_likelihood(&self, lz: usize, bag: &BagOfLabels) -> f64 {
        let marginal = self.observed_marginal(lz);
        bag.iter().map(|(l, c)| marginal[l].powi(c as i32)).product()
    }
}

/// A bag of `bag_size` observed labels for semantic label `lz`, with the
/// topic drawn for each token.
pub fn sample_generative_nnlda<R: Rng + ?Sized>(
    params: &NnldaGenerative,
    lz: usize,
    bag_size: usize,
    rng: &mut R,
) -> (BagOfLabels, Vec<usize>) {
    let mut bag = BagOfLabels::new();
    let mut topics = Vec::with_capacity(bag_size);
    for _ in 0..bag_size {
        let a = sample_categorical(params.theta_row(lz), rng);
        let lw = sample_categorical(params.gamma_row(a), rng);
        bag.add(lw, 1);
        topics.push(a);
    }
    (bag, topics)
}
