//! Data-augmentation inference over one image.
//!
//! Initialization runs visual inference on each region's bag. Each
//! iteration then (1) imputes latent scene paths by drawing a label per
//! region and running semantic inference with the corpus counts frozen,
//! `n_samples` times, and (2) updates each region's label posterior from
//! the label emissions `φ[zt]` of its imputed subtopics. By default a
//! region's own subtopic is integrated out given the other regions' paths,
//! so the update carries context rather than echoing the region's own draw.
//!
//! Randomness: `run_da` draws one base seed from the caller's generator and
//! derives a substream per `(phase, iteration, replicate-or-region)`, so the
//! replicate loop can run in parallel without changing results.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::ImageDoc;
use crate::error::{Result, VsimError};
use crate::math::{self, argmax, normalize, total_variation};
use crate::nnlda::{infer_region_topics, label_likelihood, NnldaModel, RegionTopicEstimate};
use crate::pam::{path_prior_weights, PamDocChain, PamModel, SemanticDocState};
use crate::rng::{sample_categorical, substream};

const PHASE_VISUAL: u64 = 11;
const PHASE_IMPUTE: u64 = 12;

/// How the semantic label distribution of a region is combined with its
/// current label distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Modulation {
    /// Average over replicates of the per-replicate conditional
    /// `∝ φ[zt_rep, l] · V(l) / prior(l)`, where `V` is the visual label
    /// likelihood and `prior` the visual model's training label frequency.
    /// Replicates keep their label vectors between iterations.
    #[default]
    Augmented,
    /// `∝ Q(l) · P(l)`, `Q` the replicate average of `φ[zt_rep, ·]`.
    Product,
    /// `Q` alone.
    Replace,
    /// `∝ Q(l)^w · P(l)^(1-w)`.
    LogPool { weight: f64 },
}

/// Which subtopic distribution a region's semantic label distribution
/// `Σ_t w(t) φ[t, ·]` averages over, per replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SemanticContext {
    /// The path prior of the region given the other regions' paths.
    #[default]
    LeaveOneOut,
    /// A point mass on the region's own imputed subtopic.
    OwnPath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaConfig {
    pub da_iters: usize,
    pub n_samples: usize,
    pub pam_infer_iters: usize,
    pub nnlda_infer_iters: usize,
    pub threshold: f64,
    pub modulation: Modulation,
    pub context: SemanticContext,
    /// Stop once the largest per-region total-variation change falls below
    /// this value.
    pub early_stop: Option<f64>,
    /// Re-run visual inference at the start of every iteration.
    pub reinfer_visual: bool,
    /// Run replicates on the rayon pool.
    pub parallel_replicates: bool,
}

impl Default for DaConfig {
    fn default() -> Self {
        Self {
            da_iters: 6,
            n_samples: 500,
            pam_infer_iters: 100,
            nnlda_infer_iters: 100,
            threshold: 0.2,
            modulation: Modulation::Augmented,
            context: SemanticContext::LeaveOneOut,
            early_stop: None,
            reinfer_visual: false,
            parallel_replicates: true,
        }
    }
}

impl DaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.pam_infer_iters == 0 || self.nnlda_infer_iters == 0 {
            return Err(VsimError::InvalidParameter(
                "sample and inference iteration counts must be at least 1".into(),
            ));
        }
        if let Modulation::LogPool { weight } = self.modulation {
            if !(0.0..=1.0).contains(&weight) {
                return Err(VsimError::InvalidParameter(format!("pooling weight {weight} outside [0, 1]")));
            }
        }
        if self.threshold.is_nan() {
            return Err(VsimError::InvalidParameter("threshold is NaN".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionState {
    pub region_id: String,
    /// Current `P(lz | lw)`.
    pub posterior: Vec<f64>,
    /// Normalized visual label likelihood from the region's bag.
    pub visual: Vec<f64>,
    pub topics: RegionTopicEstimate,
}

/// One imputation replicate: a label per region and its semantic path.
#[derive(Debug, Clone, PartialEq)]
pub struct Replicate {
    pub labels: Vec<usize>,
    pub paths: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Imputation {
    pub replicates: Vec<Replicate>,
    /// Scene estimate averaged over replicates.
    pub scene: SemanticDocState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaState {
    pub image_id: String,
    pub regions: Vec<RegionState>,
    /// Completed posterior updates.
    pub iteration: usize,
    /// Latest imputation; empty before the first one.
    pub replicates: Vec<Replicate>,
    /// `posterior_history[k][r]` is region `r`'s posterior after `k` updates.
    pub posterior_history: Vec<Vec<Vec<f64>>>,
    /// `scene_history[k]` is the scene imputed from the posteriors after `k`
    /// updates.
    pub scene_history: Vec<SemanticDocState>,
    base_seed: u64,
}

impl DaState {
    pub fn posteriors(&self) -> Vec<Vec<f64>> {
        self.regions.iter().map(|r| r.posterior.clone()).collect()
    }

    pub fn scene(&self) -> Option<&SemanticDocState> {
        self.scene_history.last()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelDecision {
    pub region_id: String,
    pub map_label: usize,
    /// Labels with posterior at or above the threshold, most probable first.
    pub retained_labels: Vec<usize>,
    pub posterior: Vec<f64>,
}

fn check_models(pam: &PamModel, nn: &NnldaModel) -> Result<()> {
    let (a, b) = (pam.vocab.content_hash(), nn.vocab.content_hash());
    if a != b {
        return Err(VsimError::VocabularyMismatch { expected: a, found: b });
    }
    Ok(())
}

fn visual_pass(
    image: &ImageDoc,
    nn: &NnldaModel,
    cfg: &DaConfig,
    base_seed: u64,
    round: u64,
) -> Result<Vec<(RegionTopicEstimate, Vec<f64>)>> {
    image
        .regions
        .iter()
        .enumerate()
        .map(|(r, region)| {
            let bag = region.bag.as_ref().ok_or_else(|| VsimError::EmptyBag {
                context: Some(format!("{}/{} has no bag", image.image_id, region.region_id)),
            })?;
            let mut rng = substream(base_seed, &[PHASE_VISUAL, round, r as u64]);
            let topics = infer_region_topics(bag, nn, cfg.nnlda_infer_iters, &mut rng)?;
            let visual = label_likelihood(&topics, nn);
            Ok((topics, visual))
        })
        .collect()
}

/// Iteration-0 state: each region's posterior is its visual label likelihood.
pub fn initialize_posteriors(image: &ImageDoc, nn: &NnldaModel, cfg: &DaConfig, base_seed: u64) -> Result<DaState> {
    cfg.validate()?;
    if image.regions.is_empty() {
        return Err(VsimError::InvalidCorpus(format!("image {} has no regions", image.image_id)));
    }
    let regions: Vec<RegionState> = visual_pass(image, nn, cfg, base_seed, 0)?
        .into_iter()
        .zip(&image.regions)
        .map(|((topics, visual), region)| RegionState {
            region_id: region.region_id.clone(),
            posterior: visual.clone(),
            visual,
            topics,
        })
        .collect();
    let posterior_history = vec![regions.iter().map(|r| r.posterior.clone()).collect()];
    Ok(DaState {
        image_id: image.image_id.clone(),
        regions,
        iteration: 0,
        replicates: Vec::new(),
        posterior_history,
        scene_history: Vec::new(),
        base_seed,
    })
}

/// `V(l) / prior(l)`; labels the visual model never saw get zero.
pub fn visual_evidence(visual: &[f64], prior: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = visual
        .iter()
        .zip(prior)
        .map(|(&v, &p)| if p > 0.0 { v / p } else { 0.0 })
        .collect();
    if normalize(&mut out) <= 0.0 {
        return math::uniform(visual.len());
    }
    out
}

/// Per-region conditional of `lz` given a semantic label distribution.
fn augmented_conditional(semantic: &[f64], evidence: &[f64], out: &mut [f64]) {
    for ((o, p), e) in out.iter_mut().zip(semantic).zip(evidence) {
        *o = p * e;
    }
    if normalize(out) <= 0.0 {
        out.copy_from_slice(semantic);
        normalize(out);
    }
}

/// Buffers for per-region context computations.
struct ContextScratch {
    alpha_sums: Vec<f64>,
    n_ds: Vec<u32>,
    n_dst: Vec<u32>,
    /// `S × T` path prior
    prior: Vec<f64>,
    /// subtopic weights, length `T`
    sub: Vec<f64>,
}

impl ContextScratch {
    fn new(pam: &PamModel) -> Self {
        let (ns, nt) = (pam.hyper.num_super, pam.hyper.num_sub);
        Self {
            alpha_sums: pam.hyper.alpha_row_sums(),
            n_ds: vec![0; ns],
            n_dst: vec![0; ns * nt],
            prior: vec![0.0; ns * nt],
            sub: vec![0.0; nt],
        }
    }

    /// Normalized path prior of region `skip` given every other path.
    fn leave_one_out(&mut self, pam: &PamModel, paths: &[(usize, usize)], skip: usize) {
        let nt = pam.hyper.num_sub;
        self.n_ds.fill(0);
        self.n_dst.fill(0);
        for (i, &(s, t)) in paths.iter().enumerate() {
            if i != skip {
                self.n_ds[s] += 1;
                self.n_dst[s * nt + t] += 1;
            }
        }
        let total = path_prior_weights(&self.n_ds, &self.n_dst, &pam.hyper, &self.alpha_sums, &mut self.prior);
        self.prior.iter_mut().for_each(|w| *w /= total);
    }

    /// Subtopic weights behind region `r`'s semantic label distribution.
    fn subtopic_weights(&mut self, pam: &PamModel, paths: &[(usize, usize)], r: usize, context: SemanticContext) {
        let nt = pam.hyper.num_sub;
        self.sub.fill(0.0);
        match context {
            SemanticContext::OwnPath => self.sub[paths[r].1] = 1.0,
            SemanticContext::LeaveOneOut => {
                self.leave_one_out(pam, paths, r);
                for (c, w) in self.prior.iter().enumerate() {
                    self.sub[c % nt] += w;
                }
            }
        }
    }

    /// `Σ_t w(t) φ[t, ·]` into `out`.
    fn semantic(&mut self, pam: &PamModel, paths: &[(usize, usize)], r: usize, context: SemanticContext, out: &mut [f64]) {
        self.subtopic_weights(pam, paths, r, context);
        out.fill(0.0);
        for (t, &w) in self.sub.iter().enumerate() {
            if w > 0.0 {
                out.iter_mut().zip(pam.phi_row(t)).for_each(|(o, p)| *o += w * p);
            }
        }
    }
}

/// `g[r][t] = Σ_l φ[t,l] E_r(l)`: how well subtopic `t` explains region `r`.
fn subtopic_fit(pam: &PamModel, evidence: &[Vec<f64>]) -> Vec<Vec<f64>> {
    evidence
        .iter()
        .map(|e| {
            (0..pam.hyper.num_sub)
                .map(|t| pam.phi_row(t).iter().zip(e).map(|(p, x)| p * x).sum())
                .collect()
        })
        .collect()
}

/// One Gibbs pass over a replicate's regions, drawing each region's path
/// and label jointly given the other regions' paths.
fn block_label_sweep<R: Rng + ?Sized>(
    pam: &PamModel,
    evidence: &[Vec<f64>],
    fit: &[Vec<f64>],
    paths: &mut [(usize, usize)],
    scratch: &mut ContextScratch,
    rng: &mut R,
) -> Vec<usize> {
    let nt = pam.hyper.num_sub;
    let mut cond = vec![0.0; pam.num_labels()];
    (0..paths.len())
        .map(|r| {
            scratch.leave_one_out(pam, paths, r);
            scratch.prior.iter_mut().enumerate().for_each(|(c, w)| *w *= fit[r][c % nt]);
            let c = sample_categorical(&scratch.prior, rng);
            let (s, t) = (c / nt, c % nt);
            paths[r] = (s, t);
            augmented_conditional(pam.phi_row(t), &evidence[r], &mut cond);
            sample_categorical(&cond, rng)
        })
        .collect()
}

/// Draws `n_samples` replicate label vectors and imputes their scene paths.
pub fn imputation_step(state: &DaState, pam: &PamModel, nn: &NnldaModel, cfg: &DaConfig) -> Imputation {
    let num_labels = pam.num_labels();
    let chained = cfg.modulation == Modulation::Augmented && !state.replicates.is_empty();
    let evidence: Vec<Vec<f64>> = if chained {
        let prior = nn.label_prior();
        state.regions.iter().map(|r| visual_evidence(&r.visual, &prior)).collect()
    } else {
        Vec::new()
    };
    let fit = if chained && cfg.context == SemanticContext::LeaveOneOut {
        subtopic_fit(pam, &evidence)
    } else {
        Vec::new()
    };
    let round = state.scene_history.len() as u64;

    let run = |rep: usize| -> (Replicate, SemanticDocState) {
        let mut rng = substream(state.base_seed, &[PHASE_IMPUTE, round, rep as u64]);
        let labels: Vec<usize> = if chained {
            let prev = &state.replicates[rep % state.replicates.len()];
            match cfg.context {
                SemanticContext::LeaveOneOut => {
                    let mut scratch = ContextScratch::new(pam);
                    let mut paths = prev.paths.clone();
                    block_label_sweep(pam, &evidence, &fit, &mut paths, &mut scratch, &mut rng)
                }
                SemanticContext::OwnPath => {
                    let mut cond = vec![0.0; num_labels];
                    prev.paths
                        .iter()
                        .zip(&evidence)
                        .map(|(&(_, t), e)| {
                            augmented_conditional(pam.phi_row(t), e, &mut cond);
                            sample_categorical(&cond, &mut rng)
                        })
                        .collect()
                }
            }
        } else {
            state
                .regions
                .iter()
                .map(|region| sample_categorical(&region.posterior, &mut rng))
                .collect()
        };
        let mut chain = PamDocChain::new(pam, &labels, &mut rng);
        let scene = chain.run(cfg.pam_infer_iters, &mut rng);
        let paths = chain.assignments().to_vec();
        (Replicate { labels, paths }, scene)
    };

    let results: Vec<(Replicate, SemanticDocState)> = if cfg.parallel_replicates {
        (0..cfg.n_samples).into_par_iter().map(run).collect()
    } else {
        (0..cfg.n_samples).map(run).collect()
    };

    let (ns, nt) = (pam.hyper.num_super, pam.hyper.num_sub);
    let mut theta_s = vec![0.0; ns];
    let mut theta_t = vec![0.0; ns * nt];
    let mut replicates = Vec::with_capacity(results.len());
    for (rep, scene) in results {
        theta_s.iter_mut().zip(&scene.theta_s).for_each(|(a, b)| *a += b);
        theta_t.iter_mut().zip(&scene.theta_t).for_each(|(a, b)| *a += b);
        replicates.push(rep);
    }
    let n = replicates.len() as f64;
    theta_s.iter_mut().for_each(|x| *x /= n);
    theta_t.iter_mut().for_each(|x| *x /= n);
    Imputation {
        replicates,
        scene: SemanticDocState {
            theta_s,
            theta_t,
            num_sub: nt,
        },
    }
}

/// Replicate average of region `region`'s semantic label distribution.
pub fn semantic_distribution(imputation: &Imputation, pam: &PamModel, region: usize, context: SemanticContext) -> Vec<f64> {
    let mut scratch = ContextScratch::new(pam);
    let mut q = vec![0.0; pam.num_labels()];
    let mut one = vec![0.0; pam.num_labels()];
    for rep in &imputation.replicates {
        scratch.semantic(pam, &rep.paths, region, context, &mut one);
        q.iter_mut().zip(&one).for_each(|(a, b)| *a += b);
    }
    let n = imputation.replicates.len() as f64;
    q.iter_mut().for_each(|x| *x /= n);
    q
}

/// Combines a semantic distribution `q` with the current posterior `p`.
/// Falls back to `q` if the combination has no mass.
pub fn modulate(q: &[f64], p: &[f64], modulation: Modulation) -> Vec<f64> {
    let mut out: Vec<f64> = match modulation {
        Modulation::Product | Modulation::Augmented => q.iter().zip(p).map(|(a, b)| a * b).collect(),
        Modulation::Replace => q.to_vec(),
        Modulation::LogPool { weight } => q
            .iter()
            .zip(p)
            .map(|(a, b)| a.powf(weight) * b.powf(1.0 - weight))
            .collect(),
    };
    let total = normalize(&mut out);
    if !(total > 0.0 && total.is_finite()) {
        log::warn!("modulated posterior has no mass; falling back to the semantic distribution");
        return math::normalized(q);
    }
    out
}

/// New posterior for every region from one imputation.
pub fn posterior_sampling_step(
    state: &DaState,
    imputation: &Imputation,
    pam: &PamModel,
    nn: &NnldaModel,
    cfg: &DaConfig,
) -> Vec<Vec<f64>> {
    let num_labels = pam.num_labels();
    match cfg.modulation {
        Modulation::Augmented => {
            let prior = nn.label_prior();
            let n = imputation.replicates.len() as f64;
            let mut scratch = ContextScratch::new(pam);
            state
                .regions
                .iter()
                .enumerate()
                .map(|(r, region)| {
                    let evidence = visual_evidence(&region.visual, &prior);
                    let mut acc = vec![0.0; num_labels];
                    let mut q = vec![0.0; num_labels];
                    let mut cond = vec![0.0; num_labels];
                    for rep in &imputation.replicates {
                        scratch.semantic(pam, &rep.paths, r, cfg.context, &mut q);
                        augmented_conditional(&q, &evidence, &mut cond);
                        acc.iter_mut().zip(&cond).for_each(|(a, c)| *a += c);
                    }
                    acc.iter_mut().for_each(|a| *a /= n);
                    normalize(&mut acc);
                    acc
                })
                .collect()
        }
        m => state
            .regions
            .iter()
            .enumerate()
            .map(|(r, region)| {
                modulate(&semantic_distribution(imputation, pam, r, cfg.context), &region.posterior, m)
            })
            .collect(),
    }
}

/// Retrieval decisions: every label with posterior ≥ `threshold`, plus
/// the MAP label.
pub fn threshold_labels(state: &DaState, threshold: f64) -> Vec<LabelDecision> {
    state
        .regions
        .iter()
        .map(|r| {
            let mut retained: Vec<usize> = (0..r.posterior.len())
                .filter(|&l| r.posterior[l] >= threshold)
                .collect();
            retained.sort_by(|&a, &b| r.posterior[b].total_cmp(&r.posterior[a]).then(a.cmp(&b)));
            LabelDecision {
                region_id: r.region_id.clone(),
                map_label: argmax(&r.posterior),
                retained_labels: retained,
                posterior: r.posterior.clone(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaOutcome {
    pub state: DaState,
    pub decisions: Vec<LabelDecision>,
}

/// Full inference for one image. With `da_iters = 0` the result holds the
/// visual-only posteriors.
pub fn run_da<R: Rng + ?Sized>(
    image: &ImageDoc,
    pam: &PamModel,
    nn: &NnldaModel,
    cfg: &DaConfig,
    rng: &mut R,
) -> Result<DaOutcome> {
    check_models(pam, nn)?;
    let base_seed: u64 = rng.random();
    let mut state = initialize_posteriors(image, nn, cfg, base_seed)?;
    for it in 0..cfg.da_iters {
        if cfg.reinfer_visual && it > 0 {
            let fresh = visual_pass(image, nn, cfg, base_seed, it as u64)?;
            for (region, (topics, visual)) in state.regions.iter_mut().zip(fresh) {
                region.topics = topics;
                region.visual = visual;
            }
        }
        let imputation = imputation_step(&state, pam, nn, cfg);
        let updated = posterior_sampling_step(&state, &imputation, pam, nn, cfg);
        let change = state
            .regions
            .iter()
            .zip(&updated)
            .map(|(r, u)| total_variation(&r.posterior, u))
            .fold(0.0, f64::max);
        for (region, post) in state.regions.iter_mut().zip(updated) {
            region.posterior = post;
        }
        state.scene_history.push(imputation.scene);
        state.replicates = imputation.replicates;
        state.iteration += 1;
        state.posterior_history.push(state.posteriors());
        if cfg.early_stop.is_some_and(|tol| change < tol) {
            log::debug!("{}: converged after {} iterations", image.image_id, state.iteration);
            break;
        }
    }
    // scene implied by the final posteriors
    let final_scene = imputation_step(&state, pam, nn, cfg);
    state.scene_history.push(final_scene.scene);
    let decisions = threshold_labels(&state, cfg.threshold);
    Ok(DaOutcome { state, decisions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LabelVocabulary, RegionRecord};
    use crate::neighborhood::BagOfLabels;
    use crate::pam::PamHyperparams;
    use crate::nnlda::NnldaHyperparams;
    use crate::rng::seeded;

    fn state_with(posteriors: Vec<Vec<f64>>) -> DaState {
        let regions = posteriors
            .into_iter()
            .enumerate()
            .map(|(i, p)| RegionState {
                region_id: format!("r{i}"),
                visual: p.clone(),
                posterior: p,
                topics: RegionTopicEstimate::from_counts(vec![1.0], 1.0),
            })
            .collect();
        DaState {
            image_id: "img".into(),
            regions,
            iteration: 0,
            replicates: vec![],
            posterior_history: vec![],
            scene_history: vec![],
            base_seed: 0,
        }
    }

    #[test]
    fn product_modulation_arithmetic() {
        let q = [0.8, 0.2];
        assert_eq!(modulate(&q, &[0.5, 0.5], Modulation::Product), vec![0.8, 0.2]);
        let out = modulate(&q, &[0.2, 0.8], Modulation::Product);
        assert!((out[0] - 0.5).abs() < 1e-15 && (out[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn uniform_semantic_distribution_is_identity() {
        let p = [0.1, 0.6, 0.3];
        let out = modulate(&[1.0 / 3.0; 3], &p, Modulation::Product);
        for (a, b) in out.iter().zip(p) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn delta_semantic_distribution_wins() {
        assert_eq!(modulate(&[0.0, 1.0, 0.0], &[0.3, 0.3, 0.4], Modulation::Product), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn disjoint_support_falls_back_to_semantic() {
        assert_eq!(modulate(&[1.0, 0.0], &[0.0, 1.0], Modulation::Product), vec![1.0, 0.0]);
    }

    #[test]
    fn threshold_zero_keeps_everything_and_high_threshold_only_map() {
        let state = state_with(vec![vec![0.2, 0.5, 0.3], vec![0.0, 1.0, 0.0]]);
        let d = threshold_labels(&state, 0.0);
        assert_eq!(d[0].retained_labels, vec![1, 2, 0]);
        assert_eq!(d[0].map_label, 1);
        let d = threshold_labels(&state, 1.0 + 1e-9);
        assert!(d[0].retained_labels.is_empty() && d[1].retained_labels.is_empty());
        assert_eq!(d[0].map_label, 1);
        let d = threshold_labels(&state, 1.0);
        assert_eq!(d[1].retained_labels, vec![1]);
    }

    fn tiny_models(labels: &[&str]) -> (PamModel, NnldaModel) {
        let vocab = LabelVocabulary::new(labels.iter().copied()).unwrap();
        let l = vocab.len();
        let pam = PamModel::from_counts(PamHyperparams::new(1, 1, 1.0, 0.1), vec![5; l], vocab.clone(), None, 0);
        let nn = NnldaModel::from_counts(NnldaHyperparams::new(1, 0.1, 0.1), vec![4; l], vec![4; l], vocab, None, 0);
        (pam, nn)
    }

    #[test]
    fn single_label_image_has_certain_posterior() {
        let (pam, nn) = tiny_models(&["only"]);
        let mut region = RegionRecord::new("r");
        region.bag = Some(BagOfLabels::from_labels([0]));
        let image = ImageDoc {
            image_id: "i".into(),
            regions: vec![region],
        };
        let cfg = DaConfig {
            n_samples: 3,
            pam_infer_iters: 2,
            nnlda_infer_iters: 2,
            ..Default::default()
        };
        let out = run_da(&image, &pam, &nn, &cfg, &mut seeded(1)).unwrap();
        assert_eq!(out.state.regions[0].posterior, vec![1.0]);
        assert_eq!(out.decisions[0].retained_labels, vec![0]);
    }

    #[test]
    fn single_replicate_sees_the_delta_label() {
        let (pam, nn) = tiny_models(&["a", "b", "c"]);
        let mut state = state_with(vec![vec![0.0, 0.0, 1.0]]);
        state.base_seed = 5;
        for modulation in [Modulation::Product, Modulation::Augmented] {
            let cfg = DaConfig {
                n_samples: 1,
                pam_infer_iters: 3,
                modulation,
                ..Default::default()
            };
            for _ in 0..5 {
                let imp = imputation_step(&state, &pam, &nn, &cfg);
                assert_eq!(imp.replicates.len(), 1);
                assert_eq!(imp.replicates[0].labels, vec![2]);
            }
        }
    }

    #[test]
    fn missing_bag_is_an_error() {
        let (pam, nn) = tiny_models(&["a", "b"]);
        let image = ImageDoc {
            image_id: "i".into(),
            regions: vec![RegionRecord::new("r")],
        };
        assert!(run_da(&image, &pam, &nn, &DaConfig::default(), &mut seeded(0)).is_err());
    }

    #[test]
    fn model_vocabularies_must_agree() {
        let (pam, _) = tiny_models(&["a", "b"]);
        let (_, nn) = tiny_models(&["a", "c"]);
        let mut region = RegionRecord::new("r");
        region.bag = Some(BagOfLabels::from_labels([0]));
        let image = ImageDoc {
            image_id: "i".into(),
            regions: vec![region],
        };
        assert!(matches!(
            run_da(&image, &pam, &nn, &DaConfig::default(), &mut seeded(0)),
            Err(VsimError::VocabularyMismatch { .. })
        ));
    }
}
