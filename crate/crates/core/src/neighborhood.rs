//! Bag-of-labels construction: every region is described by the multiset of
//! ground-truth labels of the training regions that fall inside an
//! epsilon-ball around its feature vector, per feature space.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Diagnostic, LabelVocabulary};
use crate::error::{Result, VsimError};

/// A multiset of observed labels.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BagOfLabels {
    entries: BTreeMap<usize, u32>,
    source_spaces: BTreeSet<String>,
}

impl BagOfLabels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_labels<I: IntoIterator<Item = usize>>(labels: I) -> Self {
        let mut bag = Self::new();
        for l in labels {
            bag.add(l, 1);
        }
        bag
    }

    pub fn from_counts<I: IntoIterator<Item = (usize, u32)>>(counts: I) -> Self {
        let mut bag = Self::new();
        for (l, c) in counts {
            bag.add(l, c);
        }
        bag
    }

    pub fn add(&mut self, label: usize, count: u32) {
        if count > 0 {
            *self.entries.entry(label).or_default() += count;
        }
    }

    pub fn count(&self, label: usize) -> u32 {
        self.entries.get(&label).copied().unwrap_or(0)
    }

    /// Number of tokens, counting multiplicity.
    pub fn total(&self) -> u32 {
        self.entries.values().sum()
    }

    pub fn distinct(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(label, count)` in ascending label order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.entries.iter().map(|(&l, &c)| (l, c))
    }

    /// Expands to one token per unit of multiplicity, ascending labels.
    pub fn tokens(&self) -> Vec<usize> {
        self.iter()
            .flat_map(|(l, c)| std::iter::repeat_n(l, c as usize))
            .collect()
    }

    pub fn source_spaces(&self) -> &BTreeSet<String> {
        &self.source_spaces
    }

    pub fn with_source(mut self, space: impl Into<String>) -> Self {
        self.source_spaces.insert(space.into());
        self
    }

    /// Multiset union (counts add).
    pub fn merge(&mut self, other: &BagOfLabels) {
        for (l, c) in other.iter() {
            self.add(l, c);
        }
        self.source_spaces.extend(other.source_spaces.iter().cloned());
    }

    /// `true` if every label count here is at most its count in `other`.
    pub fn is_subset_of(&self, other: &BagOfLabels) -> bool {
        self.iter().all(|(l, c)| c <= other.count(l))
    }

    /// Most frequent label, lowest index on ties.
    pub fn majority_label(&self) -> Option<usize> {
        let mut best: Option<(usize, u32)> = None;
        for (l, c) in self.iter() {
            if best.is_none_or(|(_, bc)| c > bc) {
                best = Some((l, c));
            }
        }
        best.map(|b| b.0)
    }

    pub fn remap(&self, f: impl Fn(usize) -> Option<usize>) -> BagOfLabels {
        let mut out = BagOfLabels::new();
        for (l, c) in self.iter() {
            if let Some(m) = f(l) {
                out.add(m, c);
            }
        }
        out.source_spaces = self.source_spaces.clone();
        out
    }

    /// `label:count` entries separated by single spaces, ascending label index.
    pub fn to_text(&self, vocab: &LabelVocabulary) -> String {
        let parts: Vec<String> = self
            .iter()
            .map(|(l, c)| format!("{}:{c}", vocab.label(l)))
            .collect();
        parts.join(" ")
    }
}

/// Splits `sky:2 road` into `[("sky", 2), ("road", 1)]`. A trailing `:n` is
/// a count only when `n` parses as a positive integer.
pub fn parse_bag_entries(text: &str) -> std::result::Result<Vec<(&str, u32)>, String> {
    text.split_whitespace()
        .map(|tok| match tok.rsplit_once(':') {
            Some((label, n)) if !label.is_empty() && n.bytes().all(|b| b.is_ascii_digit()) && !n.is_empty() => {
                let count: u32 = n.parse().map_err(|e| format!("bad count in {tok:?}: {e}"))?;
                if count == 0 {
                    return Err(format!("zero count in {tok:?}"));
                }
                Ok((label, count))
            }
            _ => Ok((tok, 1)),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceNorm {
    #[default]
    Euclidean,
    Manhattan,
    /// `0.5 * Σ (a-b)² / (a+b)`, for histogram features.
    ChiSquared,
}

impl DistanceNorm {
    #[inline]
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            DistanceNorm::Euclidean => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
            DistanceNorm::Manhattan => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            DistanceNorm::ChiSquared => {
                0.5 * a
                    .iter()
                    .zip(b)
                    .filter(|(x, y)| *x + *y > 0.0)
                    .map(|(x, y)| (x - y) * (x - y) / (x + y))
                    .sum::<f64>()
            }
        }
    }

    fn is_metric(self) -> bool {
        !matches!(self, DistanceNorm::ChiSquared)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStrategy {
    #[default]
    Exhaustive,
    /// Prunes with the triangle inequality against a single pivot. Only
    /// used for metric norms; otherwise falls back to the exhaustive scan.
    PivotPruned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodConfig {
    /// Radius per feature space.
    pub epsilon: BTreeMap<String, f64>,
    /// Radius for spaces absent from `epsilon`.
    pub default_epsilon: f64,
    pub norm: DistanceNorm,
    /// Per-space norm overrides.
    #[serde(default)]
    pub norm_overrides: BTreeMap<String, DistanceNorm>,
    /// Keeps only the nearest `max_bag` neighbors per space (ties by index).
    pub max_bag: Option<usize>,
    /// Excludes a training region's own point from its bag.
    #[serde(default)]
    pub exclude_self: bool,
    #[serde(default)]
    pub strategy: SearchStrategy,
}

impl Default for NeighborhoodConfig {
    fn default() -> Self {
        Self {
            epsilon: BTreeMap::new(),
            default_epsilon: 1.0,
            norm: DistanceNorm::Euclidean,
            norm_overrides: BTreeMap::new(),
            max_bag: None,
            exclude_self: false,
            strategy: SearchStrategy::Exhaustive,
        }
    }
}

impl NeighborhoodConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self {
            default_epsilon: epsilon,
            ..Default::default()
        }
    }

    pub fn epsilon_for(&self, space: &str) -> f64 {
        self.epsilon.get(space).copied().unwrap_or(self.default_epsilon)
    }

    pub fn norm_for(&self, space: &str) -> DistanceNorm {
        self.norm_overrides.get(space).copied().unwrap_or(self.norm)
    }

    pub fn check(&self) -> Result<()> {
        let all = std::iter::once(self.default_epsilon).chain(self.epsilon.values().copied());
        for e in all {
            if e.is_nan() || e <= 0.0 {
                return Err(VsimError::InvalidParameter(format!(
                    "epsilon must be positive, got {e}"
                )));
            }
        }
        if self.max_bag == Some(0) {
            return Err(VsimError::InvalidParameter("max_bag must be positive".into()));
        }
        Ok(())
    }
}

/// Labeled training points of one feature space.
#[derive(Debug, Clone)]
pub struct FeatureSpaceIndex {
    space: String,
    dim: usize,
    points: Vec<f64>,
    labels: Vec<usize>,
    owners: Vec<(String, String)>,
    owner_lookup: HashMap<(String, String), usize>,
    pivot: Vec<f64>,
    // point ids sorted by distance to the pivot, and those distances
    pivot_order: Vec<usize>,
    pivot_dist: Vec<f64>,
    pivot_norm: DistanceNorm,
}

impl FeatureSpaceIndex {
    /// Builds from explicit points; `owners` name the `(image, region)` each
    /// point came from.
    pub fn from_points(
        space: impl Into<String>,
        dim: usize,
        points: Vec<Vec<f64>>,
        labels: Vec<usize>,
        owners: Vec<(String, String)>,
    ) -> Result<Self> {
        if points.len() != labels.len() || points.len() != owners.len() {
            return Err(VsimError::LengthMismatch {
                left: points.len(),
                right: labels.len(),
            });
        }
        let mut flat = Vec::with_capacity(points.len() * dim);
        for p in &points {
            if p.len() != dim {
                return Err(VsimError::DimensionMismatch {
                    expected: dim,
                    actual: p.len(),
                });
            }
            flat.extend_from_slice(p);
        }
        let owner_lookup = owners
            .iter()
            .enumerate()
            .map(|(i, o)| (o.clone(), i))
            .collect();
        let mut index = Self {
            space: space.into(),
            dim,
            points: flat,
            labels,
            owners,
            owner_lookup,
            pivot: vec![0.0; dim],
            pivot_order: Vec::new(),
            pivot_dist: Vec::new(),
            pivot_norm: DistanceNorm::Euclidean,
        };
        index.rebuild_pivot(DistanceNorm::Euclidean);
        Ok(index)
    }

    /// Recomputes the pivot table for `norm` (the centroid is the pivot).
    pub fn rebuild_pivot(&mut self, norm: DistanceNorm) {
        let n = self.len();
        let mut pivot = vec![0.0; self.dim];
        for i in 0..n {
            for (c, x) in pivot.iter_mut().zip(self.point(i)) {
                *c += x;
            }
        }
        if n > 0 {
            pivot.iter_mut().for_each(|c| *c /= n as f64);
        }
        let dist: Vec<f64> = (0..n).map(|i| norm.distance(&pivot, self.point(i))).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
        self.pivot_dist = order.iter().map(|&i| dist[i]).collect();
        self.pivot_order = order;
        self.pivot = pivot;
        self.pivot_norm = norm;
    }

    pub fn space(&self) -> &str {
        &self.space
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn owner(&self, i: usize) -> &(String, String) {
        &self.owners[i]
    }

    pub fn point_of(&self, image: &str, region: &str) -> Option<usize> {
        self.owner_lookup
            .get(&(image.to_owned(), region.to_owned()))
            .copied()
    }

    fn check_query(&self, query: &[f64]) -> Result<()> {
        if query.len() != self.dim {
            return Err(VsimError::DimensionMismatch {
                expected: self.dim,
                actual: query.len(),
            });
        }
        Ok(())
    }

    /// Points within `epsilon` of `query` as `(distance, point)`, sorted by
    /// distance then point id.
    pub fn within(
        &self,
        query: &[f64],
        epsilon: f64,
        norm: DistanceNorm,
        strategy: SearchStrategy,
        exclude: Option<usize>,
    ) -> Result<Vec<(f64, usize)>> {
        self.check_query(query)?;
        let mut hits = Vec::new();
        let mut consider = |i: usize| {
            if Some(i) == exclude {
                return;
            }
            let d = norm.distance(query, self.point(i));
            if d <= epsilon {
                hits.push((d, i));
            }
        };
        let pruned = strategy == SearchStrategy::PivotPruned
            && norm.is_metric()
            && norm == self.pivot_norm
            && epsilon.is_finite();
        if pruned {
            let dq = norm.distance(query, &self.pivot);
            // slack absorbs rounding in the triangle-inequality bound; the
            // exact test is still applied to every candidate
            let slack = 1e-9 * (1.0 + dq + epsilon);
            let lo = dq - epsilon - slack;
            let hi = dq + epsilon + slack;
            let start = self.pivot_dist.partition_point(|&d| d < lo);
            for k in start..self.pivot_dist.len() {
                if self.pivot_dist[k] > hi {
                    break;
                }
                consider(self.pivot_order[k]);
            }
        } else {
            (0..self.len()).for_each(&mut consider);
        }
        hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(hits)
    }

    /// Nearest point to `query` (lowest id on ties).
    pub fn nearest(
        &self,
        query: &[f64],
        norm: DistanceNorm,
        exclude: Option<usize>,
    ) -> Result<Option<(f64, usize)>> {
        self.check_query(query)?;
        let mut best: Option<(f64, usize)> = None;
        for i in 0..self.len() {
            if Some(i) == exclude {
                continue;
            }
            let d = norm.distance(query, self.point(i));
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        Ok(best)
    }
}

/// Indexes every training region that carries a vector in `space`.
pub fn build_index(corpus: &Corpus, space: &str) -> Result<FeatureSpaceIndex> {
    let declared = corpus
        .space(space)
        .filter(|_| !space.is_empty())
        .ok_or_else(|| VsimError::UnknownSpace(space.to_owned()))?;
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut owners = Vec::new();
    for doc in &corpus.docs {
        for r in &doc.regions {
            let Some(v) = r.features.get(space) else { continue };
            let label = r.gt_label.ok_or_else(|| VsimError::MissingGtLabel {
                image: doc.image_id.clone(),
                region: r.region_id.clone(),
            })?;
            points.push(v.clone());
            labels.push(label);
            owners.push((doc.image_id.clone(), r.region_id.clone()));
        }
    }
    FeatureSpaceIndex::from_points(space, declared.dim, points, labels, owners)
}

fn truncate(hits: &mut Vec<(f64, usize)>, cfg: &NeighborhoodConfig) {
    if let Some(cap) = cfg.max_bag {
        hits.truncate(cap);
    }
}

/// The multiset of training labels inside the epsilon-ball around `query`.
/// The query's own point (if it is a training point) is included.
pub fn epsilon_neighbors(
    index: &FeatureSpaceIndex,
    query: &[f64],
    cfg: &NeighborhoodConfig,
) -> Result<BagOfLabels> {
    epsilon_neighbors_excluding(index, query, cfg, None)
}

pub fn epsilon_neighbors_excluding(
    index: &FeatureSpaceIndex,
    query: &[f64],
    cfg: &NeighborhoodConfig,
    exclude: Option<usize>,
) -> Result<BagOfLabels> {
    let space = index.space();
    let mut hits = index.within(
        query,
        cfg.epsilon_for(space),
        cfg.norm_for(space),
        cfg.strategy,
        exclude,
    )?;
    truncate(&mut hits, cfg);
    Ok(BagOfLabels::from_labels(hits.iter().map(|&(_, i)| index.label(i))).with_source(space))
}

/// Attaches a bag to every region that does not already carry one.
///
/// Bags from several spaces are unioned. A region whose union is empty gets
/// the label of its nearest neighbor (distance relative to each space's
/// radius) and an [`Diagnostic::EmptyBagFallback`] entry.
pub fn make_bags(
    corpus: &Corpus,
    indices: &[FeatureSpaceIndex],
    cfg: &NeighborhoodConfig,
) -> Result<(Corpus, Vec<Diagnostic>)> {
    cfg.check()?;
    let per_doc: Vec<Result<(Vec<Option<BagOfLabels>>, Vec<Diagnostic>)>> = corpus
        .docs
        .par_iter()
        .map(|doc| {
            let mut bags = Vec::with_capacity(doc.regions.len());
            let mut diags = Vec::new();
            for r in &doc.regions {
                if let Some(b) = &r.bag {
                    bags.push(Some(b.clone()));
                    continue;
                }
                let mut bag = BagOfLabels::new();
                let mut nearest: Option<(f64, usize, usize)> = None;
                let mut any_space = false;
                for (k, index) in indices.iter().enumerate() {
                    let Some(v) = r.features.get(index.space()) else { continue };
                    any_space = true;
                    let exclude = if cfg.exclude_self {
                        index.point_of(&doc.image_id, &r.region_id)
                    } else {
                        None
                    };
                    bag.merge(&epsilon_neighbors_excluding(index, v, cfg, exclude)?);
                    let norm = cfg.norm_for(index.space());
                    if let Some((d, i)) = index.nearest(v, norm, exclude)? {
                        let rel = d / cfg.epsilon_for(index.space());
                        if nearest.is_none_or(|(bd, _, _)| rel < bd) {
                            nearest = Some((rel, k, i));
                        }
                    }
                }
                if !any_space {
                    diags.push(Diagnostic::MissingFeatures {
                        image: doc.image_id.clone(),
                        region: r.region_id.clone(),
                    });
                    bags.push(None);
                    continue;
                }
                if bag.is_empty() {
                    if let Some((_, k, i)) = nearest {
                        bag = BagOfLabels::from_labels([indices[k].label(i)])
                            .with_source(indices[k].space());
                        diags.push(Diagnostic::EmptyBagFallback {
                            image: doc.image_id.clone(),
                            region: r.region_id.clone(),
                        });
                    }
                }
                bags.push(Some(bag));
            }
            Ok((bags, diags))
        })
        .collect();

    let mut out = corpus.clone();
    let mut diagnostics = Vec::new();
    for (doc, result) in out.docs.iter_mut().zip(per_doc) {
        let (bags, diags) = result?;
        for (r, b) in doc.regions.iter_mut().zip(bags) {
            r.bag = b;
        }
        diagnostics.extend(diags);
    }
    Ok((out, diagnostics))
}

/// Indexes every declared feature space that has at least one point.
pub fn build_all_indices(corpus: &Corpus) -> Result<Vec<FeatureSpaceIndex>> {
    let mut out = Vec::new();
    for s in &corpus.feature_spaces {
        let index = build_index(corpus, &s.name)?;
        if !index.is_empty() {
            out.push(index);
        }
    }
    Ok(out)
}
