//! Synthetic corpora drawn from known semantic and visual models.
//!
//! Each image draws a scene and a label per region from the semantic
//! model, then a bag of observed labels per region from the visual model.
//! The latent-truth file holds one JSON object per image:
//!
//! ```text
//! {"split":"test","image_id":"test_0003","theta_s":[..],"theta_t":[..],
//!  "regions":[{"region_id":"r0","label":4,"path":[1,7],"visual_topics":[3,3,0]}]}
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, FeatureSpace, ImageDoc, LabelVocabulary, RegionRecord};
use crate::error::{Result, VsimError};
use crate::nnlda::{sample_generative_nnlda, NnldaGenerative};
use crate::pam::{sample_generative_pam, PamGenerative, SemanticDocState};
use crate::rng::{sample_dirichlet, substream, STREAM_SYNTH};

/// Inclusive integer range sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeRange {
    pub min: usize,
    pub max: usize,
}

impl SizeRange {
    pub fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(self.min..=self.max)
    }
}

/// Region features: each region picks a visual topic from its label's topic
/// proportions and its feature vector is that topic's centroid plus
/// isotropic Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSynth {
    pub space: String,
    pub dim: usize,
    /// `A × dim`
    pub centroids: Vec<f64>,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub train_docs: usize,
    pub test_docs: usize,
    pub doc_len: SizeRange,
    pub bag_size: SizeRange,
    pub pam: PamGenerative,
    pub nnlda: NnldaGenerative,
    pub features: Option<FeatureSynth>,
    pub seed: u64,
}

/// Dirichlet concentrations used to draw random true parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthPriors {
    pub alpha0: f64,
    /// Concentration of each row of `αs`; its base measure is drawn from a
    /// symmetric Dirichlet(1).
    pub alpha_s_concentration: f64,
    pub phi: f64,
    pub theta: f64,
    pub gamma: f64,
    /// Label `k` gets base weight `(k+1)^-label_power` in every `φ` row,
    /// giving power-law label frequencies. Zero means balanced.
    pub label_power: f64,
}

impl Default for TruthPriors {
    fn default() -> Self {
        Self {
            alpha0: 1.0,
            alpha_s_concentration: 5.0,
            phi: 0.05,
            theta: 0.1,
            gamma: 0.05,
            label_power: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub num_super: usize,
    pub num_sub: usize,
    pub num_topics: usize,
    pub num_labels: usize,
}

impl ModelShape {
    /// 20 supertopics, 50 subtopics, 50 visual topics, 200 labels.
    pub fn protocol() -> Self {
        Self {
            num_super: 20,
            num_sub: 50,
            num_topics: 50,
            num_labels: 200,
        }
    }
}

/// Random true parameters for `shape`.
pub fn draw_truth(shape: ModelShape, priors: &TruthPriors, seed: u64) -> (PamGenerative, NnldaGenerative) {
    let mut rng = substream(seed, &[STREAM_SYNTH, 0]);
    let ModelShape {
        num_super: ns,
        num_sub: nt,
        num_topics: na,
        num_labels: nl,
    } = shape;
    let mut alpha_s = Vec::with_capacity(ns * nt);
    for _ in 0..ns {
        let base = sample_dirichlet(&vec![1.0; nt], &mut rng);
        alpha_s.extend(base.iter().map(|b| (b * priors.alpha_s_concentration).max(1e-3)));
    }
    let mut label_base: Vec<f64> = (0..nl).map(|k| ((k + 1) as f64).powf(-priors.label_power)).collect();
    let total: f64 = label_base.iter().sum();
    label_base.iter_mut().for_each(|b| *b *= nl as f64 * priors.phi / total);
    let mut phi = Vec::with_capacity(nt * nl);
    for _ in 0..nt {
        phi.extend(sample_dirichlet(&label_base, &mut rng));
    }
    let mut theta = Vec::with_capacity(nl * na);
    for _ in 0..nl {
        theta.extend(sample_dirichlet(&vec![priors.theta; na], &mut rng));
    }
    let mut gamma = Vec::with_capacity(na * nl);
    for _ in 0..na {
        gamma.extend(sample_dirichlet(&vec![priors.gamma; nl], &mut rng));
    }
    (
        PamGenerative {
            num_super: ns,
            num_sub: nt,
            num_labels: nl,
            alpha0: priors.alpha0,
            alpha_s,
            phi,
        },
        NnldaGenerative {
            num_topics: na,
            num_labels: nl,
            theta,
            gamma,
        },
    )
}

/// Topic centroids drawn uniformly from `[0, scale]^dim`.
pub fn draw_centroids(num_topics: usize, dim: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = substream(seed, &[STREAM_SYNTH, 1]);
    (0..num_topics * dim).map(|_| rng.random::<f64>() * scale).collect()
}

impl SyntheticSpec {
    pub fn random(shape: ModelShape, priors: &TruthPriors, train_docs: usize, test_docs: usize, seed: u64) -> Self {
        let (pam, nnlda) = draw_truth(shape, priors, seed);
        Self {
            train_docs,
            test_docs,
            doc_len: SizeRange::new(5, 9),
            bag_size: SizeRange::new(3, 8),
            pam,
            nnlda,
            features: None,
            seed,
        }
    }

    pub fn num_labels(&self) -> usize {
        self.pam.num_labels
    }

    pub fn validate(&self) -> Result<()> {
        let (ns, nt, nl) = (self.pam.num_super, self.pam.num_sub, self.pam.num_labels);
        let na = self.nnlda.num_topics;
        let bad = |m: &str| Err(VsimError::InvalidParameter(m.into()));
        if ns == 0 || nt == 0 || nl == 0 || na == 0 {
            return bad("model dimensions must be positive");
        }
        if self.nnlda.num_labels != nl {
            return Err(VsimError::DimensionMismatch {
                expected: nl,
                actual: self.nnlda.num_labels,
            });
        }
        if self.pam.alpha_s.len() != ns * nt
            || self.pam.phi.len() != nt * nl
            || self.nnlda.theta.len() != nl * na
            || self.nnlda.gamma.len() != na * nl
        {
            return bad("parameter table has the wrong size");
        }
        if !(self.pam.alpha0 > 0.0) || self.pam.alpha_s.iter().any(|&a| !(a >= 0.0)) {
            return bad("Dirichlet parameters must be positive");
        }
        let rows_ok = |table: &[f64], width: usize| {
            table
                .chunks(width)
                .all(|r| r.iter().all(|&x| x >= 0.0) && (r.iter().sum::<f64>() - 1.0).abs() < 1e-9)
        };
        if !rows_ok(&self.pam.phi, nl) || !rows_ok(&self.nnlda.theta, na) || !rows_ok(&self.nnlda.gamma, nl) {
            return bad("multinomial rows must be nonnegative and sum to 1");
        }
        if self.doc_len.min == 0 || self.doc_len.min > self.doc_len.max {
            return bad("document length range must be nonempty and positive");
        }
        if self.bag_size.min == 0 || self.bag_size.min > self.bag_size.max {
            return bad("bag size range must be nonempty and positive");
        }
        if let Some(f) = &self.features {
            if f.dim == 0 || f.centroids.len() != na * f.dim || !(f.noise >= 0.0) {
                return bad("feature centroids must be A × dim with nonnegative noise");
            }
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> LabelVocabulary {
        let width = (self.num_labels().max(2) - 1).to_string().len();
        LabelVocabulary::new((0..self.num_labels()).map(|l| format!("l{l:0width$}")))
            .expect("generated label names are unique")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionTruth {
    pub region_id: String,
    pub label: usize,
    pub path: (usize, usize),
    pub visual_topics: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTruth {
    pub split: String,
    pub image_id: String,
    pub theta_s: Vec<f64>,
    pub theta_t: Vec<f64>,
    pub regions: Vec<RegionTruth>,
}

impl LatentTruth {
    pub fn scene(&self) -> SemanticDocState {
        SemanticDocState {
            theta_s: self.theta_s.clone(),
            num_sub: self.theta_t.len() / self.theta_s.len().max(1),
            theta_t: self.theta_t.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: Corpus,
    pub test: Corpus,
    /// Train images first, then test images, in corpus order.
    pub truth: Vec<LatentTruth>,
}

impl SyntheticData {
    pub fn truth_for(&self, split: &str) -> impl Iterator<Item = &LatentTruth> {
        let split = split.to_string();
        self.truth.iter().filter(move |t| t.split == split)
    }

    pub fn truth_jsonl(&self) -> Result<String> {
        write_truth(&self.truth)
    }
}

pub fn write_truth(truth: &[LatentTruth]) -> Result<String> {
    let mut out = String::new();
    for t in truth {
        out.push_str(&serde_json::to_string(t)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<Vec<LatentTruth>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| VsimError::Schema {
            line: i + 1,
            field: "truth".into(),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn generate_split<R: Rng + ?Sized>(
    spec: &SyntheticSpec,
    split: &str,
    count: usize,
    rng: &mut R,
    truth: &mut Vec<LatentTruth>,
) -> Vec<ImageDoc> {
    let width = count.max(2).saturating_sub(1).to_string().len().max(4);
    let noise = spec
        .features
        .as_ref()
        .map(|f| Normal::new(0.0, f.noise).expect("validated noise"));
    let mut docs = Vec::with_capacity(count);
    for d in 0..count {
        let image_id = format!("{split}_{d:0width$}");
        let len = spec.doc_len.sample(rng);
        let doc = sample_generative_pam(&spec.pam, len, rng);
        let mut regions = Vec::with_capacity(len);
        let mut region_truth = Vec::with_capacity(len);
        for (r, (&label, &path)) in doc.labels.iter().zip(&doc.paths).enumerate() {
            let region_id = format!("r{r}");
            let size = spec.bag_size.sample(rng);
            let (bag, topics) = sample_generative_nnlda(&spec.nnlda, label, size, rng);
            let mut record = RegionRecord::new(region_id.clone());
            record.gt_label = Some(label);
            record.bag = Some(bag);
            if let (Some(f), Some(noise)) = (&spec.features, &noise) {
                let a = crate::rng::sample_categorical(spec.nnlda.theta_row(label), rng);
                let centroid = &f.centroids[a * f.dim..(a + 1) * f.dim];
                let v = centroid.iter().map(|c| c + noise.sample(rng)).collect();
                record.features = BTreeMap::from([(f.space.clone(), v)]);
            }
            regions.push(record);
            region_truth.push(RegionTruth {
                region_id,
                label,
                path,
                visual_topics: topics,
            });
        }
        truth.push(LatentTruth {
            split: split.to_string(),
            image_id: image_id.clone(),
            theta_s: doc.scene.theta_s,
            theta_t: doc.scene.theta_t,
            regions: region_truth,
        });
        docs.push(ImageDoc { image_id, regions });
    }
    docs
}

/// Training and test corpora plus their latent truth. Equal specs give
/// identical output.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let vocab = spec.vocabulary();
    let spaces: Vec<FeatureSpace> = spec
        .features
        .iter()
        .map(|f| FeatureSpace {
            name: f.space.clone(),
            dim: f.dim,
        })
        .collect();
    let mut truth = Vec::with_capacity(spec.train_docs + spec.test_docs);
    let mut rng = substream(spec.seed, &[STREAM_SYNTH, 2]);
    let train_docs = generate_split(spec, "train", spec.train_docs, &mut rng, &mut truth);
    let test_docs = generate_split(spec, "test", spec.test_docs, &mut rng, &mut truth);
    let corpus = |docs| Corpus {
        docs,
        vocab: vocab.clone(),
        feature_spaces: spaces.clone(),
    };
    Ok(SyntheticData {
        train: corpus(train_docs),
        test: corpus(test_docs),
        truth,
    })
}
