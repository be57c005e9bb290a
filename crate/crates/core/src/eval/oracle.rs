//! Exact posteriors of small instances by exhaustive enumeration of latent
//! assignments, with the multinomials integrated out in closed form.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VsimError};
use crate::math::ln_rising;
use crate::pam::{PamHyperparams, PamModel};

/// Largest enumeration space accepted.
pub const ENUMERATION_LIMIT: f64 = 1e7;

const CHUNK: usize = 1 << 15;

/// Posterior over assignment vectors of `positions` variables, each taking
/// `radix` values. Vector `(k_0, .., k_{n-1})` has index `Σ k_i · radix^(n-1-i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactPosterior {
    pub radix: usize,
    pub positions: usize,
    pub probs: Vec<f64>,
}

impl ExactPosterior {
    pub fn decode(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.positions];
        for slot in out.iter_mut().rev() {
            *slot = index % self.radix;
            index /= self.radix;
        }
        out
    }

    pub fn encode(&self, values: &[usize]) -> usize {
        values.iter().fold(0, |acc, &v| acc * self.radix + v)
    }

    /// Marginal distribution of position `i`.
    pub fn marginal(&self, i: usize) -> Vec<f64> {
        let stride = self.radix.pow((self.positions - 1 - i) as u32);
        let mut out = vec![0.0; self.radix];
        for (idx, p) in self.probs.iter().enumerate() {
            out[(idx / stride) % self.radix] += p;
        }
        out
    }
}

fn check_size(radix: usize, positions: usize) -> Result<usize> {
    let size = (radix as f64).powi(positions as i32);
    if size > ENUMERATION_LIMIT {
        return Err(VsimError::InstanceTooLarge {
            size,
            limit: ENUMERATION_LIMIT,
        });
    }
    Ok(radix.pow(positions as u32))
}

/// Normalizes log weights computed in parallel over fixed chunks. The
/// reduction runs sequentially so results do not depend on thread count.
fn enumerate<F>(radix: usize, positions: usize, log_weight: F) -> Result<ExactPosterior>
where
    F: Fn(&[usize]) -> f64 + Sync,
{
    let size = check_size(radix, positions)?;
    let chunks: Vec<Vec<f64>> = (0..size.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let start = c * CHUNK;
            let end = (start + CHUNK).min(size);
            let mut digits = vec![0usize; positions];
            (start..end)
                .map(|idx| {
                    let mut rest = idx;
                    for slot in digits.iter_mut().rev() {
                        *slot = rest % radix;
                        rest /= radix;
                    }
                    log_weight(&digits)
                })
                .collect()
        })
        .collect();
    let logs: Vec<f64> = chunks.into_iter().flatten().collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(VsimError::Numerical("every assignment has zero probability".into()));
    }
    let mut probs: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(ExactPosterior {
        radix,
        positions,
        probs,
    })
}

/// Collapsed semantic model for enumeration. `base_tl` holds label counts
/// that stay fixed (zero for a training corpus of one document, the trained
/// counts for inference).
#[derive(Debug, Clone)]
pub struct PamExact {
    pub hyper: PamHyperparams,
    pub num_labels: usize,
    pub base_tl: Vec<f64>,
}

impl PamExact {
    pub fn for_training(hyper: PamHyperparams, num_labels: usize) -> Self {
        let base_tl = vec![0.0; hyper.num_sub * num_labels];
        Self {
            hyper,
            num_labels,
            base_tl,
        }
    }

    pub fn for_inference(model: &PamModel) -> Self {
        Self {
            hyper: model.hyper.clone(),
            num_labels: model.num_labels(),
            base_tl: model.n_tl.iter().map(|&c| c as f64).collect(),
        }
    }

    /// Log joint of labels and paths, paths encoded as `s·T + t`.
    pub fn log_joint(&self, labels: &[usize], paths: &[usize]) -> f64 {
        let (ns, nt, nl) = (self.hyper.num_super, self.hyper.num_sub, self.num_labels);
        let mut n_s = vec![0u32; ns];
        let mut n_st = vec![0u32; ns * nt];
        let mut n_tl = vec![0u32; nt * nl];
        let mut n_t = vec![0u32; nt];
        for (&l, &c) in labels.iter().zip(paths) {
            let (s, t) = (c / nt, c % nt);
            n_s[s] += 1;
            n_st[c] += 1;
            n_tl[t * nl + l] += 1;
            n_t[t] += 1;
        }
        let h = &self.hyper;
        let mut lp = -ln_rising(ns as f64 * h.alpha0, labels.len() as u32);
        for s in 0..ns {
            lp += ln_rising(h.alpha0, n_s[s]);
            let row = h.alpha_row(s);
            lp -= ln_rising(row.iter().sum(), n_s[s]);
            for t in 0..nt {
                lp += ln_rising(row[t], n_st[s * nt + t]);
            }
        }
        for t in 0..nt {
            let mut base_t = 0.0;
            for l in 0..nl {
                let b = self.base_tl[t * nl + l];
                base_t += b;
                lp += ln_rising(h.beta + b, n_tl[t * nl + l]);
            }
            lp -= ln_rising(nl as f64 * h.beta + base_t, n_t[t]);
        }
        lp
    }
}

/// Exact posterior over the `(zs, zt)` paths of a labeled document.
pub fn pam_exact_posterior(labels: &[usize], model: &PamExact) -> Result<ExactPosterior> {
    if labels.is_empty() {
        return Err(VsimError::EmptyBag { context: Some("document".into()) });
    }
    let k = model.hyper.num_super * model.hyper.num_sub;
    enumerate(k, labels.len(), |paths| model.log_joint(labels, paths))
}

/// Collapsed visual model for enumeration. Tokens are `(group, lw)` pairs:
/// the group's topic counts share one Dirichlet (the semantic label during
/// training, the region during inference). `base_a_lw` holds fixed
/// topic-label counts.
#[derive(Debug, Clone)]
pub struct NnldaExact {
    pub num_topics: usize,
    pub num_labels: usize,
    pub alpha: f64,
    pub psi: f64,
    pub base_a_lw: Vec<f64>,
}

impl NnldaExact {
    pub fn log_joint(&self, pairs: &[(usize, usize)], topics: &[usize]) -> f64 {
        let (na, nl) = (self.num_topics, self.num_labels);
        let mut groups: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        groups.sort_unstable();
        groups.dedup();
        let mut n_ga = vec![0u32; groups.len() * na];
        let mut n_g = vec![0u32; groups.len()];
        let mut n_aw = vec![0u32; na * nl];
        let mut n_a = vec![0u32; na];
        for (&(g, w), &a) in pairs.iter().zip(topics) {
            let gi = groups.binary_search(&g).unwrap_or(0);
            n_ga[gi * na + a] += 1;
            n_g[gi] += 1;
            n_aw[a * nl + w] += 1;
            n_a[a] += 1;
        }
        let mut lp = 0.0;
        for gi in 0..groups.len() {
            lp -= ln_rising(na as f64 * self.alpha, n_g[gi]);
            for a in 0..na {
                lp += ln_rising(self.alpha, n_ga[gi * na + a]);
            }
        }
        for a in 0..na {
            let mut base_a = 0.0;
            for w in 0..nl {
                let b = self.base_a_lw[a * nl + w];
                base_a += b;
                lp += ln_rising(self.psi + b, n_aw[a * nl + w]);
            }
            lp -= ln_rising(nl as f64 * self.psi + base_a, n_a[a]);
        }
        lp
    }
}

/// Exact posterior over visual topic assignments of `(group, lw)` pairs.
pub fn nnlda_exact_posterior(pairs: &[(usize, usize)], model: &NnldaExact) -> Result<ExactPosterior> {
    if pairs.is_empty() {
        return Err(VsimError::EmptyBag { context: Some("pairs".into()) });
    }
    enumerate(model.num_topics, pairs.len(), |topics| model.log_joint(pairs, topics))
}

/// Semantic model with fixed label emissions `φ` for the coupled posterior.
#[derive(Debug, Clone)]
pub struct CoupledExact {
    pub hyper: PamHyperparams,
    pub num_labels: usize,
    /// `T × L`
    pub phi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledPosterior {
    /// Per region, states `l·S·T + s·T + t`.
    pub joint: ExactPosterior,
    /// `P(lz_r | all bags)` per region.
    pub labels: Vec<Vec<f64>>,
}

/// Exact label posterior of an image's regions. Each region's visual
/// evidence enters as a likelihood vector `evidence[r][l] ∝ P(bag_r | lz = l)`;
/// region labels are tied through shared scene proportions with the
/// document-level Dirichlets integrated out.
pub fn coupled_exact_posterior(model: &CoupledExact, evidence: &[Vec<f64>]) -> Result<CoupledPosterior> {
    let (ns, nt, nl) = (model.hyper.num_super, model.hyper.num_sub, model.num_labels);
    let k = ns * nt;
    if evidence.is_empty() {
        return Err(VsimError::InvalidCorpus("image has no regions".into()));
    }
    if let Some(bad) = evidence.iter().find(|e| e.len() != nl) {
        return Err(VsimError::DimensionMismatch {
            expected: nl,
            actual: bad.len(),
        });
    }
    let log_phi: Vec<f64> = model.phi.iter().map(|p| p.ln()).collect();
    let log_ev: Vec<Vec<f64>> = evidence.iter().map(|e| e.iter().map(|x| x.ln()).collect()).collect();
    let h = &model.hyper;
    let alpha_sums = h.alpha_row_sums();
    let regions = evidence.len();
    let joint = enumerate(nl * k, regions, |states| {
        let mut n_s = vec![0u32; ns];
        let mut n_st = vec![0u32; k];
        let mut lp = -ln_rising(ns as f64 * h.alpha0, regions as u32);
        for (r, &state) in states.iter().enumerate() {
            let (l, c) = (state / k, state % k);
            let (s, t) = (c / nt, c % nt);
            n_s[s] += 1;
            n_st[c] += 1;
            lp += log_phi[t * nl + l] + log_ev[r][l];
        }
        for s in 0..ns {
            lp += ln_rising(h.alpha0, n_s[s]) - ln_rising(alpha_sums[s], n_s[s]);
            for t in 0..nt {
                lp += ln_rising(h.alpha_s[s * nt + t], n_st[s * nt + t]);
            }
        }
        lp
    })?;
    let labels = (0..regions)
        .map(|r| {
            let m = joint.marginal(r);
            (0..nl).map(|l| m[l * k..(l + 1) * k].iter().sum()).collect()
        })
        .collect();
    Ok(CoupledPosterior { joint, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_path_gets_all_mass() {
        let exact = PamExact::for_training(PamHyperparams::new(1, 1, 1.0, 0.5), 3);
        let post = pam_exact_posterior(&[0, 2, 1], &exact).unwrap();
        assert_eq!(post.probs, vec![1.0]);
    }

    #[test]
    fn encode_decode_round_trip() {
        let post = ExactPosterior {
            radix: 4,
            positions: 3,
            probs: vec![0.0; 64],
        };
        for idx in 0..64 {
            assert_eq!(post.encode(&post.decode(idx)), idx);
        }
        assert_eq!(post.decode(6), vec![0, 1, 2]);
    }

    #[test]
    fn marginals_sum_to_one() {
        let exact = PamExact::for_training(PamHyperparams::new(2, 2, 0.7, 0.3), 4);
        let post = pam_exact_posterior(&[0, 3, 3], &exact).unwrap();
        assert!((post.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..3 {
            assert!((post.marginal(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn oversized_instances_are_rejected() {
        let exact = PamExact::for_training(PamHyperparams::new(10, 10, 1.0, 1.0), 2);
        assert!(matches!(
            pam_exact_posterior(&[0; 4], &exact),
            Err(VsimError::InstanceTooLarge { .. })
        ));
    }

    #[test]
    fn single_region_coupled_posterior_is_bayes_rule() {
        // one region: P(l) ∝ Σ_t E[θ_t] φ[t,l] · e[l]
        let hyper = PamHyperparams::new(1, 2, 1.0, 0.1);
        let phi = vec![0.7, 0.3, 0.2, 0.8];
        let model = CoupledExact {
            hyper,
            num_labels: 2,
            phi,
        };
        let post = coupled_exact_posterior(&model, &[vec![0.5, 0.25]]).unwrap();
        // uniform αs row → each subtopic has prior mass 1/2
        let raw = [0.5 * (0.7 + 0.2) * 0.5, 0.5 * (0.3 + 0.8) * 0.25];
        let z = raw[0] + raw[1];
        assert!((post.labels[0][0] - raw[0] / z).abs() < 1e-12);
    }

    #[test]
    fn nnlda_single_topic() {
        let exact = NnldaExact {
            num_topics: 1,
            num_labels: 2,
            alpha: 0.1,
            psi: 0.1,
            base_a_lw: vec![0.0; 2],
        };
        let post = nnlda_exact_posterior(&[(0, 1), (1, 0)], &exact).unwrap();
        assert_eq!(post.probs, vec![1.0]);
    }
}
