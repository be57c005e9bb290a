//! Three-level Pachinko allocation over semantic labels.
//!
//! Each image draws supertopic weights `θs ~ Dir(α0)` and, per supertopic,
//! subtopic weights `θt[s] ~ Dir(αs[s])`; each label token follows a path
//! `s ~ θs`, `t ~ θt[s]`, `l ~ φ[t]` with `φ[t] ~ Dir(β)`. Training is
//! collapsed Gibbs over the `(s, t)` path of every token, interleaved with
//! moment-matching updates of the asymmetric `αs` rows.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, LabelVocabulary};
use crate::error::{Result, VsimError};
use crate::rng::{sample_dirichlet, sample_index};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PamHyperparams {
    pub num_super: usize,
    pub num_sub: usize,
    pub alpha0: f64,
    /// `num_super × num_sub`, row-major.
    pub alpha_s: Vec<f64>,
    pub beta: f64,
}

impl PamHyperparams {
    /// `αs` starts uniform at `1/T` per entry.
    pub fn new(num_super: usize, num_sub: usize, alpha0: f64, beta: f64) -> Self {
        Self {
            num_super,
            num_sub,
            alpha0,
            alpha_s: vec![1.0 / num_sub.max(1) as f64; num_super * num_sub],
            beta,
        }
    }

    pub fn alpha_row(&self, s: usize) -> &[f64] {
        &self.alpha_s[s * self.num_sub..(s + 1) * self.num_sub]
    }

    pub fn alpha_row_sums(&self) -> Vec<f64> {
        (0..self.num_super)
            .map(|s| self.alpha_row(s).iter().sum())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(VsimError::InvalidParameter(m));
        if self.num_super == 0 || self.num_sub == 0 {
            return bad("supertopic and subtopic counts must be at least 1".into());
        }
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return bad(format!("alpha0 must be positive, got {}", self.alpha0));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if self.alpha_s.len() != self.num_super * self.num_sub {
            return bad(format!(
                "alpha_s has {} entries, expected {}",
                self.alpha_s.len(),
                self.num_super * self.num_sub
            ));
        }
        if self.alpha_s.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return bad("alpha_s entries must be finite and nonnegative".into());
        }
        if self.alpha_row_sums().iter().any(|&r| r <= 0.0) {
            return bad("every alpha_s row needs a positive sum".into());
        }
        Ok(())
    }
}

impl Default for PamHyperparams {
    /// 20 supertopics, 50 subtopics, `α0 = 1`, `β = 0.01`.
    fn default() -> Self {
        Self::new(20, 50, 1.0, 0.01)
    }
}

/// Guards for the moment-matching estimate of `αs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentMatchConfig {
    pub variance_floor: f64,
    /// Lower bound on `m(1-m)/v` so that its log-argument stays positive.
    pub ratio_floor: f64,
    pub max_concentration: f64,
    /// Remove multinomial sampling noise from the variance of count
    /// proportions before matching.
    pub count_noise_correction: bool,
}

impl Default for MomentMatchConfig {
    fn default() -> Self {
        Self {
            variance_floor: 1e-8,
            ratio_floor: 1.0 + 1e-6,
            max_concentration: 1e4,
            count_noise_correction: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PamTrainConfig {
    pub iters: usize,
    /// First sweep (0-based) after which `αs` is re-estimated every sweep.
    pub alpha_update_start: usize,
    pub update_alpha: bool,
    pub moments: MomentMatchConfig,
}

impl Default for PamTrainConfig {
    fn default() -> Self {
        Self {
            iters: 1000,
            alpha_update_start: 50,
            update_alpha: true,
            moments: MomentMatchConfig::default(),
        }
    }
}

/// Sufficient statistics of a PAM assignment state.
#[derive(Debug, Clone, PartialEq)]
pub struct PamCounts {
    pub num_super: usize,
    pub num_sub: usize,
    pub num_labels: usize,
    /// `I × S`
    pub n_ds: Vec<u32>,
    /// `I × S × T`
    pub n_dst: Vec<u32>,
    /// `T × L`
    pub n_tl: Vec<u32>,
    /// `T`; row sums of `n_tl`
    pub n_t: Vec<u32>,
    /// `(supertopic, subtopic)` per token, per document.
    pub assignments: Vec<Vec<(u32, u32)>>,
}

impl PamCounts {
    fn empty(num_docs: usize, s: usize, t: usize, l: usize) -> Self {
        Self {
            num_super: s,
            num_sub: t,
            num_labels: l,
            n_ds: vec![0; num_docs * s],
            n_dst: vec![0; num_docs * s * t],
            n_tl: vec![0; t * l],
            n_t: vec![0; t],
            assignments: vec![Vec::new(); num_docs],
        }
    }

    pub fn num_docs(&self) -> usize {
        self.assignments.len()
    }

    pub fn doc_super(&self, d: usize) -> &[u32] {
        &self.n_ds[d * self.num_super..(d + 1) * self.num_super]
    }

    pub fn doc_pairs(&self, d: usize) -> &[u32] {
        let w = self.num_super * self.num_sub;
        &self.n_dst[d * w..(d + 1) * w]
    }

    fn apply(&mut self, d: usize, label: usize, s: usize, t: usize, add: bool) {
        let (ns, nt) = (self.num_super, self.num_sub);
        let ds = d * ns + s;
        let dst = (d * ns + s) * nt + t;
        let tl = t * self.num_labels + label;
        if add {
            self.n_ds[ds] += 1;
            self.n_dst[dst] += 1;
            self.n_tl[tl] += 1;
            self.n_t[t] += 1;
        } else {
            self.n_ds[ds] -= 1;
            self.n_dst[dst] -= 1;
            self.n_tl[tl] -= 1;
            self.n_t[t] -= 1;
        }
    }

    /// Recomputes every table from `assignments` and compares.
    pub fn check_consistency(&self, tokens: &[Vec<usize>]) -> std::result::Result<(), String> {
        let mut fresh = PamCounts::empty(tokens.len(), self.num_super, self.num_sub, self.num_labels);
        for (d, doc) in tokens.iter().enumerate() {
            if doc.len() != self.assignments[d].len() {
                return Err(format!("doc {d}: {} tokens, {} assignments", doc.len(), self.assignments[d].len()));
            }
            for (&l, &(s, t)) in doc.iter().zip(&self.assignments[d]) {
                fresh.apply(d, l, s as usize, t as usize, true);
            }
            let sum_s: u32 = self.doc_super(d).iter().sum();
            let sum_st: u32 = self.doc_pairs(d).iter().sum();
            if sum_s as usize != doc.len() || sum_st as usize != doc.len() {
                return Err(format!("doc {d}: supertopic sum {sum_s}, pair sum {sum_st}, tokens {}", doc.len()));
            }
        }
        if fresh.n_ds != self.n_ds || fresh.n_dst != self.n_dst {
            return Err("document tables disagree with assignments".into());
        }
        if fresh.n_tl != self.n_tl || fresh.n_t != self.n_t {
            return Err("subtopic-label tables disagree with assignments".into());
        }
        Ok(())
    }
}

/// Count state seen by one token's proposal, with that token removed.
#[derive(Debug, Clone, Copy)]
pub struct SemanticView<'a> {
    /// `n_ds` for the document, length `S`.
    pub doc_super: &'a [u32],
    /// `n_dst` for the document, `S × T`.
    pub doc_pairs: &'a [u32],
    /// Subtopic counts of the token's label (`n_tl[·, l]`), length `T`.
    pub label_in_sub: &'a [u32],
    /// Subtopic totals (`Σ_l n_tl`), length `T`.
    pub sub_totals: &'a [u32],
}

/// Unnormalized proposal over the `S × T` paths of one token; returns the
/// total mass. `alpha_sums[s] = Σ_t αs[s,t]`.
pub fn semantic_weights(
    view: &SemanticView<'_>,
    hyper: &PamHyperparams,
    alpha_sums: &[f64],
    num_labels: usize,
    out: &mut [f64],
) -> f64 {
    let (ns, nt) = (hyper.num_super, hyper.num_sub);
    let doc_len: u32 = view.doc_super.iter().sum();
    let super_denom = doc_len as f64 + ns as f64 * hyper.alpha0;
    let label_denom_base = num_labels as f64 * hyper.beta;
    let mut total = 0.0;
    for s in 0..ns {
        let f_super = (view.doc_super[s] as f64 + hyper.alpha0) / super_denom;
        let sub_denom = view.doc_super[s] as f64 + alpha_sums[s];
        let row = &hyper.alpha_s[s * nt..(s + 1) * nt];
        for t in 0..nt {
            let f_sub = (view.doc_pairs[s * nt + t] as f64 + row[t]) / sub_denom;
            let f_label = (view.label_in_sub[t] as f64 + hyper.beta)
                / (view.sub_totals[t] as f64 + label_denom_base);
            let w = f_super * f_sub * f_label;
            out[s * nt + t] = w;
            total += w;
        }
    }
    total
}

/// Document-side factor of [`semantic_weights`]: the unnormalized prior
/// over the `S × T` path of one more token given the document tables.
pub fn path_prior_weights(
    doc_super: &[u32],
    doc_pairs: &[u32],
    hyper: &PamHyperparams,
    alpha_sums: &[f64],
    out: &mut [f64],
) -> f64 {
    let (ns, nt) = (hyper.num_super, hyper.num_sub);
    let doc_len: u32 = doc_super.iter().sum();
    let super_denom = doc_len as f64 + ns as f64 * hyper.alpha0;
    let mut total = 0.0;
    for s in 0..ns {
        let f_super = (doc_super[s] as f64 + hyper.alpha0) / super_denom;
        let sub_denom = doc_super[s] as f64 + alpha_sums[s];
        let row = &hyper.alpha_s[s * nt..(s + 1) * nt];
        for t in 0..nt {
            let w = f_super * (doc_pairs[s * nt + t] as f64 + row[t]) / sub_denom;
            out[s * nt + t] = w;
            total += w;
        }
    }
    total
}

/// Normalized `S × T` proposal.
pub fn semantic_proposal(view: &SemanticView<'_>, hyper: &PamHyperparams, num_labels: usize) -> Vec<f64> {
    let mut out = vec![0.0; hyper.num_super * hyper.num_sub];
    let total = semantic_weights(view, hyper, &hyper.alpha_row_sums(), num_labels, &mut out);
    out.iter_mut().for_each(|w| *w /= total);
    out
}

/// Scratch space for repeated proposals.
#[derive(Debug, Clone, Default)]
pub struct SemanticScratch {
    weights: Vec<f64>,
    label_col: Vec<u32>,
}

/// Resamples the path of token `i` in document `d`: removes it from the
/// counts, draws `(s, t)` from the collapsed conditional and adds it back.
#[allow(clippy::too_many_arguments)]
pub fn gibbs_step_semantic<R: Rng + ?Sized>(
    doc_tokens: &[usize],
    d: usize,
    i: usize,
    counts: &mut PamCounts,
    hyper: &PamHyperparams,
    alpha_sums: &[f64],
    scratch: &mut SemanticScratch,
    rng: &mut R,
) -> (usize, usize) {
    let (ns, nt, nl) = (counts.num_super, counts.num_sub, counts.num_labels);
    let label = doc_tokens[i];
    let (s0, t0) = counts.assignments[d][i];
    counts.apply(d, label, s0 as usize, t0 as usize, false);

    scratch.weights.resize(ns * nt, 0.0);
    scratch.label_col.clear();
    scratch
        .label_col
        .extend((0..nt).map(|t| counts.n_tl[t * nl + label]));
    let view = SemanticView {
        doc_super: counts.doc_super(d),
        doc_pairs: counts.doc_pairs(d),
        label_in_sub: &scratch.label_col,
        sub_totals: &counts.n_t,
    };
    let total = semantic_weights(&view, hyper, alpha_sums, nl, &mut scratch.weights);
    let k = sample_index(&scratch.weights, total, rng);
    let (s, t) = (k / nt, k % nt);
    counts.apply(d, label, s, t, true);
    counts.assignments[d][i] = (s as u32, t as u32);
    (s, t)
}

/// Estimated Dirichlet from sample proportions.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletMoments {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub concentration: f64,
}

impl DirichletMoments {
    pub fn alpha(&self) -> Vec<f64> {
        self.mean.iter().map(|m| m * self.concentration).collect()
    }
}

/// Moment-matching estimate of a Dirichlet from `rows` (each a proportion
/// vector of length `dim`, flattened). Needs at least two rows.
///
/// The mean is the row average; the concentration is the geometric mean of
/// `m(1-m)/v - 1` over the first `dim - 1` components, skipping components
/// whose mean is exactly 0 or 1. Variances are floored, the ratio is
/// floored, and the concentration is capped by `cfg`.
pub fn moment_match(rows: &[f64], dim: usize, cfg: &MomentMatchConfig) -> Option<DirichletMoments> {
    moment_match_counts(rows, dim, 0.0, cfg)
}

/// As [`moment_match`] for proportions `c / n` of count vectors, where
/// `inv_len` is the mean of `1/n` over rows. A Dirichlet-multinomial row
/// has `E[v] = m(1-m) (h + (1-h)/(A+1))` with `h = inv_len`, so the
/// per-component estimate of `A + 1` is `(1-h) / (v/(m(1-m)) - h)`. With
/// `inv_len = 0` this is the plain proportion estimate.
pub fn moment_match_counts(rows: &[f64], dim: usize, inv_len: f64, cfg: &MomentMatchConfig) -> Option<DirichletMoments> {
    if dim < 2 || rows.len() < 2 * dim {
        return None;
    }
    let n = rows.len() / dim;
    let mut mean = vec![0.0; dim];
    for row in rows.chunks_exact(dim) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut variance = vec![0.0; dim];
    for row in rows.chunks_exact(dim) {
        for ((v, m), x) in variance.iter_mut().zip(&mean).zip(row) {
            *v += (x - m) * (x - m);
        }
    }
    variance.iter_mut().for_each(|v| *v /= (n - 1) as f64);

    let mut log_sum = 0.0;
    let mut terms = 0usize;
    for t in 0..dim - 1 {
        let spread = mean[t] * (1.0 - mean[t]);
        if spread <= 0.0 || inv_len >= 1.0 {
            continue;
        }
        let scaled = variance[t].max(cfg.variance_floor) / spread;
        let excess = scaled - inv_len;
        let ratio = if excess > 0.0 {
            ((1.0 - inv_len) / excess).max(cfg.ratio_floor)
        } else {
            // no variance beyond sampling noise
            cfg.max_concentration + 1.0
        };
        log_sum += (ratio - 1.0).ln();
        terms += 1;
    }
    let concentration = if terms == 0 {
        cfg.max_concentration
    } else {
        (log_sum / terms as f64).exp().min(cfg.max_concentration)
    };
    Some(DirichletMoments {
        mean,
        variance,
        concentration,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaEstimate {
    pub alpha_s: Vec<f64>,
    /// Supertopics left at their previous row (fewer than two documents).
    pub unchanged_rows: Vec<usize>,
}

/// Re-estimates every `αs` row from the per-document subtopic proportions
/// `n_dst / n_ds`, using only documents where the supertopic occurs.
/// Documents holding a single token of the supertopic carry no dispersion
/// information; when every document is like that, the row is capped.
pub fn estimate_alpha_s(counts: &PamCounts, hyper: &PamHyperparams, cfg: &MomentMatchConfig) -> AlphaEstimate {
    let (ns, nt) = (counts.num_super, counts.num_sub);
    let mut alpha_s = hyper.alpha_s.clone();
    let mut unchanged_rows = Vec::new();
    let mut rows = Vec::new();
    for s in 0..ns {
        rows.clear();
        let mut inv_len = 0.0;
        for d in 0..counts.num_docs() {
            let total = counts.doc_super(d)[s];
            if total == 0 {
                continue;
            }
            let pairs = &counts.doc_pairs(d)[s * nt..(s + 1) * nt];
            rows.extend(pairs.iter().map(|&c| c as f64 / total as f64));
            inv_len += 1.0 / total as f64;
        }
        let docs = rows.len() / nt.max(1);
        let inv_len = if cfg.count_noise_correction && docs > 0 {
            inv_len / docs as f64
        } else {
            0.0
        };
        match moment_match_counts(&rows, nt, inv_len, cfg) {
            Some(m) => alpha_s[s * nt..(s + 1) * nt].copy_from_slice(&m.alpha()),
            None => unchanged_rows.push(s),
        }
    }
    AlphaEstimate {
        alpha_s,
        unchanged_rows,
    }
}

/// Smoothed label multinomials `φ[t,l] = (n_tl + β) / (n_t + Lβ)`.
pub fn smoothed_phi(n_tl: &[u32], n_t: &[u32], num_labels: usize, beta: f64) -> Vec<f64> {
    let mut phi = vec![0.0; n_tl.len()];
    for (t, &total) in n_t.iter().enumerate() {
        let denom = total as f64 + num_labels as f64 * beta;
        for l in 0..num_labels {
            phi[t * num_labels + l] = (n_tl[t * num_labels + l] as f64 + beta) / denom;
        }
    }
    phi
}

/// Collapsed Gibbs state over a training corpus.
#[derive(Debug, Clone)]
pub struct PamTrainer<'a> {
    tokens: &'a [Vec<usize>],
    pub counts: PamCounts,
    pub hyper: PamHyperparams,
    alpha_sums: Vec<f64>,
    scratch: SemanticScratch,
}

impl<'a> PamTrainer<'a> {
    /// Uniformly random initial paths.
    pub fn new<R: Rng + ?Sized>(
        tokens: &'a [Vec<usize>],
        num_labels: usize,
        hyper: PamHyperparams,
        rng: &mut R,
    ) -> Result<Self> {
        hyper.validate()?;
        if tokens.iter().all(|d| d.is_empty()) {
            return Err(VsimError::EmptyCorpus);
        }
        if let Some(&bad) = tokens.iter().flatten().find(|&&l| l >= num_labels) {
            return Err(VsimError::InvalidParameter(format!("label {bad} outside vocabulary of {num_labels}")));
        }
        let (ns, nt) = (hyper.num_super, hyper.num_sub);
        let mut counts = PamCounts::empty(tokens.len(), ns, nt, num_labels);
        for (d, doc) in tokens.iter().enumerate() {
            counts.assignments[d] = Vec::with_capacity(doc.len());
            for &l in doc {
                let s = rng.random_range(0..ns);
                let t = rng.random_range(0..nt);
                counts.apply(d, l, s, t, true);
                counts.assignments[d].push((s as u32, t as u32));
            }
        }
        let alpha_sums = hyper.alpha_row_sums();
        Ok(Self {
            tokens,
            counts,
            hyper,
            alpha_sums,
            scratch: SemanticScratch::default(),
        })
    }

    pub fn tokens(&self) -> &[Vec<usize>] {
        self.tokens
    }

    pub fn step<R: Rng + ?Sized>(&mut self, d: usize, i: usize, rng: &mut R) -> (usize, usize) {
        gibbs_step_semantic(
            &self.tokens[d],
            d,
            i,
            &mut self.counts,
            &self.hyper,
            &self.alpha_sums,
            &mut self.scratch,
            rng,
        )
    }

    pub fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for d in 0..self.tokens.len() {
            for i in 0..self.tokens[d].len() {
                self.step(d, i, rng);
            }
        }
    }

    pub fn update_alpha(&mut self, cfg: &MomentMatchConfig) -> AlphaEstimate {
        let est = estimate_alpha_s(&self.counts, &self.hyper, cfg);
        self.hyper.alpha_s.clone_from(&est.alpha_s);
        self.alpha_sums = self.hyper.alpha_row_sums();
        est
    }

    pub fn into_model(self, vocab: LabelVocabulary, seed: Option<u64>, iterations: usize) -> PamModel {
        PamModel::from_counts(self.hyper, self.counts.n_tl, vocab, seed, iterations)
    }
}

/// Runs `cfg.iters` sweeps over the ground-truth label tokens of `corpus`.
pub fn train_pam<R: Rng + ?Sized>(
    corpus: &Corpus,
    hyper: PamHyperparams,
    cfg: &PamTrainConfig,
    rng: &mut R,
) -> Result<PamModel> {
    let tokens = corpus.label_tokens();
    train_pam_tokens(&tokens, corpus.vocab.clone(), hyper, cfg, rng)
}

pub fn train_pam_tokens<R: Rng + ?Sized>(
    tokens: &[Vec<usize>],
    vocab: LabelVocabulary,
    hyper: PamHyperparams,
    cfg: &PamTrainConfig,
    rng: &mut R,
) -> Result<PamModel> {
    let mut trainer = PamTrainer::new(tokens, vocab.len(), hyper, rng)?;
    for sweep in 0..cfg.iters {
        trainer.sweep(rng);
        if cfg.update_alpha && sweep >= cfg.alpha_update_start {
            let est = trainer.update_alpha(&cfg.moments);
            if !est.unchanged_rows.is_empty() {
                log::debug!("sweep {sweep}: alpha_s rows {:?} kept (too few documents)", est.unchanged_rows);
            }
        }
    }
    Ok(trainer.into_model(vocab, None, cfg.iters))
}

/// A trained semantic model. Corpus counts are frozen; `phi` is derived.
#[derive(Debug, Clone, PartialEq)]
pub struct PamModel {
    pub hyper: PamHyperparams,
    /// `T × L` subtopic-label counts.
    pub n_tl: Vec<u32>,
    pub n_t: Vec<u32>,
    /// `T × L` label multinomials.
    pub phi: Vec<f64>,
    pub vocab: LabelVocabulary,
    pub seed: Option<u64>,
    pub iterations: usize,
}

#[derive(Serialize, Deserialize)]
struct PamModelFile {
    format: String,
    hyper: PamHyperparams,
    vocabulary_hash: String,
    vocabulary: LabelVocabulary,
    seed: Option<u64>,
    iterations: usize,
    n_tl: Vec<Vec<u32>>,
}

const PAM_FORMAT: &str = "vsim-pam/1";

impl PamModel {
    pub fn from_counts(
        hyper: PamHyperparams,
        n_tl: Vec<u32>,
        vocab: LabelVocabulary,
        seed: Option<u64>,
        iterations: usize,
    ) -> Self {
        let l = vocab.len();
        let n_t: Vec<u32> = n_tl.chunks_exact(l).map(|r| r.iter().sum()).collect();
        let phi = smoothed_phi(&n_tl, &n_t, l, hyper.beta);
        Self {
            hyper,
            n_tl,
            n_t,
            phi,
            vocab,
            seed,
            iterations,
        }
    }

    pub fn num_labels(&self) -> usize {
        self.vocab.len()
    }

    pub fn phi_row(&self, t: usize) -> &[f64] {
        let l = self.num_labels();
        &self.phi[t * l..(t + 1) * l]
    }

    pub fn to_json(&self) -> Result<String> {
        let l = self.num_labels();
        let file = PamModelFile {
            format: PAM_FORMAT.into(),
            hyper: self.hyper.clone(),
            vocabulary_hash: self.vocab.content_hash(),
            vocabulary: self.vocab.clone(),
            seed: self.seed,
            iterations: self.iterations,
            n_tl: self.n_tl.chunks_exact(l).map(<[u32]>::to_vec).collect(),
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: PamModelFile = serde_json::from_str(text)?;
        if file.format != PAM_FORMAT {
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
        let l = file.vocabulary.len();
        if file.n_tl.len() != file.hyper.num_sub || file.n_tl.iter().any(|r| r.len() != l) {
            return Err(VsimError::InvalidParameter("n_tl shape does not match T x L".into()));
        }
        Ok(Self::from_counts(
            file.hyper,
            file.n_tl.concat(),
            file.vocabulary,
            file.seed,
            file.iterations,
        ))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Per-image scene estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticDocState {
    pub theta_s: Vec<f64>,
    /// `S × T`, each row a multinomial.
    pub theta_t: Vec<f64>,
    pub num_sub: usize,
}

impl SemanticDocState {
    pub fn uniform(num_super: usize, num_sub: usize) -> Self {
        Self {
            theta_s: vec![1.0 / num_super as f64; num_super],
            theta_t: vec![1.0 / num_sub as f64; num_super * num_sub],
            num_sub,
        }
    }

    pub fn theta_t_row(&self, s: usize) -> &[f64] {
        &self.theta_t[s * self.num_sub..(s + 1) * self.num_sub]
    }

    /// Image-level subtopic multinomial `Σ_s θs[s] θt[s,·]`.
    pub fn subtopic_mixture(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.num_sub];
        for (s, ws) in self.theta_s.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.theta_t_row(s)) {
                *o += ws * w;
            }
        }
        out
    }
}

/// Gibbs chain over the paths of a new document's tokens. Corpus counts
/// stay frozen; the document's own tokens contribute transient counts.
#[derive(Debug, Clone)]
pub struct PamDocChain<'m> {
    model: &'m PamModel,
    tokens: Vec<usize>,
    // distinct labels of the document, and each token's slot among them
    distinct: Vec<usize>,
    slot: Vec<usize>,
    n_ds: Vec<u32>,
    n_dst: Vec<u32>,
    /// transient `T × distinct` label counts
    extra_tl: Vec<u32>,
    extra_t: Vec<u32>,
    assignments: Vec<(usize, usize)>,
    alpha_sums: Vec<f64>,
    weights: Vec<f64>,
    label_col: Vec<u32>,
    sub_totals: Vec<u32>,
}

impl<'m> PamDocChain<'m> {
    pub fn new<R: Rng + ?Sized>(model: &'m PamModel, tokens: &[usize], rng: &mut R) -> Self {
        let mut chain = Self {
            model,
            tokens: Vec::new(),
            distinct: Vec::new(),
            slot: Vec::new(),
            n_ds: Vec::new(),
            n_dst: Vec::new(),
            extra_tl: Vec::new(),
            extra_t: Vec::new(),
            assignments: Vec::new(),
            alpha_sums: model.hyper.alpha_row_sums(),
            weights: Vec::new(),
            label_col: Vec::new(),
            sub_totals: Vec::new(),
        };
        chain.reset(tokens, rng);
        chain
    }

    /// Restarts the chain on new tokens, reusing buffers.
    pub fn reset<R: Rng + ?Sized>(&mut self, tokens: &[usize], rng: &mut R) {
        let (ns, nt) = (self.model.hyper.num_super, self.model.hyper.num_sub);
        self.tokens.clear();
        self.tokens.extend_from_slice(tokens);
        self.distinct.clear();
        self.slot.clear();
        for &l in tokens {
            let k = match self.distinct.iter().position(|&x| x == l) {
                Some(k) => k,
                None => {
                    self.distinct.push(l);
                    self.distinct.len() - 1
                }
            };
            self.slot.push(k);
        }
        self.n_ds.clear();
        self.n_ds.resize(ns, 0);
        self.n_dst.clear();
        self.n_dst.resize(ns * nt, 0);
        self.extra_tl.clear();
        self.extra_tl.resize(nt * self.distinct.len(), 0);
        self.extra_t.clear();
        self.extra_t.resize(nt, 0);
        self.weights.resize(ns * nt, 0.0);
        self.label_col.resize(nt, 0);
        self.sub_totals.resize(nt, 0);
        self.assignments.clear();
        for i in 0..tokens.len() {
            let s = rng.random_range(0..ns);
            let t = rng.random_range(0..nt);
            self.apply(i, s, t, true);
            self.assignments.push((s, t));
        }
    }

    fn apply(&mut self, i: usize, s: usize, t: usize, add: bool) {
        let nt = self.model.hyper.num_sub;
        let k = self.slot[i];
        let nd = self.distinct.len();
        let cells = [
            &mut self.n_ds[s],
            &mut self.n_dst[s * nt + t],
            &mut self.extra_tl[t * nd + k],
            &mut self.extra_t[t],
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
        let (nt, nl) = (model.hyper.num_sub, model.num_labels());
        let (s0, t0) = self.assignments[i];
        self.apply(i, s0, t0, false);
        let label = self.tokens[i];
        let k = self.slot[i];
        let nd = self.distinct.len();
        for t in 0..nt {
            self.label_col[t] = model.n_tl[t * nl + label] + self.extra_tl[t * nd + k];
            self.sub_totals[t] = model.n_t[t] + self.extra_t[t];
        }
        let view = SemanticView {
            doc_super: &self.n_ds,
            doc_pairs: &self.n_dst,
            label_in_sub: &self.label_col,
            sub_totals: &self.sub_totals,
        };
        let total = semantic_weights(&view, &model.hyper, &self.alpha_sums, nl, &mut self.weights);
        let c = sample_index(&self.weights, total, rng);
        let (s, t) = (c / nt, c % nt);
        self.apply(i, s, t, true);
        self.assignments[i] = (s, t);
    }

    pub fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for i in 0..self.tokens.len() {
            self.step(i, rng);
        }
    }

    pub fn assignments(&self) -> &[(usize, usize)] {
        &self.assignments
    }

    pub fn doc_super(&self) -> &[u32] {
        &self.n_ds
    }

    pub fn doc_pairs(&self) -> &[u32] {
        &self.n_dst
    }

    /// Runs `iters` sweeps and returns the scene estimate from the document
    /// counts averaged over the last half of the sweeps.
    pub fn run<R: Rng + ?Sized>(&mut self, iters: usize, rng: &mut R) -> SemanticDocState {
        let hyper = &self.model.hyper;
        let (ns, nt) = (hyper.num_super, hyper.num_sub);
        if self.tokens.is_empty() {
            return SemanticDocState::uniform(ns, nt);
        }
        let mut acc_s = vec![0.0; ns];
        let mut acc_st = vec![0.0; ns * nt];
        let keep_from = iters / 2;
        let mut kept = 0usize;
        for sweep in 0..iters {
            self.sweep(rng);
            if sweep >= keep_from {
                kept += 1;
                for (a, &c) in acc_s.iter_mut().zip(&self.n_ds) {
                    *a += c as f64;
                }
                for (a, &c) in acc_st.iter_mut().zip(&self.n_dst) {
                    *a += c as f64;
                }
            }
        }
        if kept == 0 {
            acc_s.iter_mut().zip(&self.n_ds).for_each(|(a, &c)| *a = c as f64);
            acc_st.iter_mut().zip(&self.n_dst).for_each(|(a, &c)| *a = c as f64);
            kept = 1;
        }
        let scale = 1.0 / kept as f64;
        acc_s.iter_mut().for_each(|a| *a *= scale);
        acc_st.iter_mut().for_each(|a| *a *= scale);

        let n = self.tokens.len() as f64;
        let theta_s: Vec<f64> = acc_s
            .iter()
            .map(|&c| (c + hyper.alpha0) / (n + ns as f64 * hyper.alpha0))
            .collect();
        let mut theta_t = vec![0.0; ns * nt];
        for s in 0..ns {
            let row = hyper.alpha_row(s);
            let denom = acc_s[s] + self.alpha_sums[s];
            for t in 0..nt {
                theta_t[s * nt + t] = (acc_st[s * nt + t] + row[t]) / denom;
            }
        }
        SemanticDocState {
            theta_s,
            theta_t,
            num_sub: nt,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PamInference {
    pub state: SemanticDocState,
    /// Final `(supertopic, subtopic)` per token.
    pub assignments: Vec<(usize, usize)>,
}

/// Infers the scene of a new document with the corpus counts held fixed.
/// Empty input yields the uniform state.
pub fn infer_pam_doc<R: Rng + ?Sized>(tokens: &[usize], model: &PamModel, iters: usize, rng: &mut R) -> PamInference {
    if tokens.is_empty() {
        log::warn!("inference on an empty label list; returning the uniform scene");
    }
    let mut chain = PamDocChain::new(model, tokens, rng);
    let state = chain.run(iters, rng);
    PamInference {
        state,
        assignments: chain.assignments().to_vec(),
    }
}

/// Explicit generative parameters of the semantic model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PamGenerative {
    pub num_super: usize,
    pub num_sub: usize,
    pub num_labels: usize,
    pub alpha0: f64,
    pub alpha_s: Vec<f64>,
    /// `T × L`
    pub phi: Vec<f64>,
}

impl PamGenerative {
    pub fn from_model(model: &PamModel) -> Self {
        Self {
            num_super: model.hyper.num_super,
            num_sub: model.hyper.num_sub,
            num_labels: model.num_labels(),
            alpha0: model.hyper.alpha0,
            alpha_s: model.hyper.alpha_s.clone(),
            phi: model.phi.clone(),
        }
    }

    pub fn phi_row(&self, t: usize) -> &[f64] {
        &self.phi[t * self.num_labels..(t + 1) * self.num_labels]
    }

    pub fn draw_scene<R: Rng + ?Sized>(&self, rng: &mut R) -> SemanticDocState {
        let theta_s = sample_dirichlet(&vec![self.alpha0; self.num_super], rng);
        let mut theta_t = Vec::with_capacity(self.num_super * self.num_sub);
        for s in 0..self.num_super {
            theta_t.extend(sample_dirichlet(
                &self.alpha_s[s * self.num_sub..(s + 1) * self.num_sub],
                rng,
            ));
        }
        SemanticDocState {
            theta_s,
            theta_t,
            num_sub: self.num_sub,
        }
    }

    /// Label marginal `Σ_{s,t} θs[s] θt[s,t] φ[t,·]` under a fixed scene.
    pub fn label_marginal(&self, scene: &SemanticDocState) -> Vec<f64> {
        let mix = scene.subtopic_mixture();
        let mut out = vec![0.0; self.num_labels];
        for (t, w) in mix.iter().enumerate() {
            for (o, p) in out.iter_mut().zip(self.phi_row(t)) {
                *o += w * p;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSemanticDoc {
    pub labels: Vec<usize>,
    pub paths: Vec<(usize, usize)>,
    pub scene: SemanticDocState,
}

/// Tokens from a fixed scene.
pub fn sample_labels_from_scene<R: Rng + ?Sized>(
    params: &PamGenerative,
    scene: &SemanticDocState,
    doc_length: usize,
    rng: &mut R,
) -> GeneratedSemanticDoc {
    let mut labels = Vec::with_capacity(doc_length);
    let mut paths = Vec::with_capacity(doc_length);
    for _ in 0..doc_length {
        let s = crate::rng::sample_categorical(&scene.theta_s, rng);
        let t = crate::rng::sample_categorical(scene.theta_t_row(s), rng);
        let l = crate::rng::sample_categorical(params.phi_row(t), rng);
        labels.push(l);
        paths.push((s, t));
    }
    GeneratedSemanticDoc {
        labels,
        paths,
        scene: scene.clone(),
    }
}

/// Draws a scene, then `doc_length` labels with their latent paths.
pub fn sample_generative_pam<R: Rng + ?Sized>(
    params: &PamGenerative,
    doc_length: usize,
    rng: &mut R,
) -> GeneratedSemanticDoc {
    let scene = params.draw_scene(rng);
    sample_labels_from_scene(params, &scene, doc_length, rng)
}
