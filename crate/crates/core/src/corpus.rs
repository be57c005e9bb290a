//! Labeled image corpora: data model, the line-delimited record format, and
//! validation.
//!
//! # Record format
//!
//! UTF-8 text, one record per line, fields separated by TAB, each field
//! written `key=value`. Blank lines and lines starting with `#` are ignored.
//! Two directive lines may precede (or interleave with) the region records:
//!
//! ```text
//! @label	name=sky                      # declares a vocabulary entry, in index order
//! @space	name=texton	dim=100            # declares a feature space and its dimension
//! ```
//!
//! Region records use these field names:
//!
//! | field           | value                                                     |
//! |-----------------|-----------------------------------------------------------|
//! | `image_id`      | required; image identifier                                |
//! | `region_id`     | required; unique within its image                         |
//! | `feature_space` | tag of the feature vector carried on this line            |
//! | `feature`       | comma-separated reals; requires `feature_space`           |
//! | `bag`           | space-separated labels, each optionally `label:count`     |
//! | `gt_label`      | ground-truth label string                                 |
//!
//! A region may span several lines (one per feature space); lines sharing
//! `(image_id, region_id)` are merged. Labels must not contain whitespace.
//! Images and regions keep the order of their first appearance.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, VsimError};
use crate::neighborhood::{parse_bag_entries, BagOfLabels};

/// The shared pool of object labels. Indices are stable `0..len()`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelVocabulary {
    labels: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl LabelVocabulary {
    pub fn new<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(VsimError::InvalidParameter("vocabulary must not be empty".into()));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if l.is_empty() || l.chars().any(char::is_whitespace) {
                return Err(VsimError::InvalidParameter(format!(
                    "label {l:?} is empty or contains whitespace"
                )));
            }
            if index.insert(l.clone(), i).is_some() {
                return Err(VsimError::InvalidParameter(format!("duplicate label {l:?}")));
            }
        }
        Ok(Self { labels, index })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    /// SHA-256 over the labels in index order, newline-terminated.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for l in &self.labels {
            hasher.update(l.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }

    /// Vocabulary file: one label per line, index = line number.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for l in &self.labels {
            out.push_str(l);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::new(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    fn push(&mut self, label: &str) -> usize {
        let i = self.labels.len();
        self.labels.push(label.to_owned());
        self.index.insert(label.to_owned(), i);
        i
    }
}

impl TryFrom<Vec<String>> for LabelVocabulary {
    type Error = VsimError;

    fn try_from(labels: Vec<String>) -> Result<Self> {
        Self::new(labels)
    }
}

impl From<LabelVocabulary> for Vec<String> {
    fn from(v: LabelVocabulary) -> Self {
        v.labels
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpace {
    pub name: String,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegionRecord {
    pub region_id: String,
    /// Parallel feature vectors, keyed by feature-space tag.
    pub features: BTreeMap<String, Vec<f64>>,
    pub gt_label: Option<usize>,
    pub bag: Option<BagOfLabels>,
}

impl RegionRecord {
    pub fn new(region_id: impl Into<String>) -> Self {
        Self {
            region_id: region_id.into(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageDoc {
    pub image_id: String,
    pub regions: Vec<RegionRecord>,
}

impl ImageDoc {
    pub fn gt_labels(&self) -> Vec<usize> {
        self.regions.iter().filter_map(|r| r.gt_label).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub docs: Vec<ImageDoc>,
    pub vocab: LabelVocabulary,
    pub feature_spaces: Vec<FeatureSpace>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    Training,
    Inference,
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub mode: LoadMode,
    /// Frozen vocabulary; labels outside it are not added.
    pub vocab: Option<LabelVocabulary>,
}

impl LoadOptions {
    pub fn new(mode: LoadMode) -> Self {
        Self { mode, vocab: None }
    }

    pub fn with_vocab(mut self, vocab: LabelVocabulary) -> Self {
        self.vocab = Some(vocab);
        self
    }
}

/// Non-fatal findings about a corpus or a processing step.
#[derive(Debug, Clone, PartialEq)]
pub enum Diagnostic {
    DuplicateRegion { image: String, region: String },
    OutOfVocabulary { image: String, region: String, label: String },
    DimensionMismatch { image: String, region: String, space: String, expected: usize, actual: usize },
    UndeclaredSpace { image: String, region: String, space: String },
    EmptyDocument { image: String },
    DroppedLabel { line: usize, label: String },
    EmptyBagFallback { image: String, region: String },
    MissingFeatures { image: String, region: String },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::DuplicateRegion { image, region } => {
                write!(f, "{image}/{region}: duplicate region id")
            }
            Diagnostic::OutOfVocabulary { image, region, label } => {
                write!(f, "{image}/{region}: label {label} is outside the vocabulary")
            }
            Diagnostic::DimensionMismatch { image, region, space, expected, actual } => write!(
                f,
                "{image}/{region}: `{space}` vector has dimension {actual}, declared {expected}"
            ),
            Diagnostic::UndeclaredSpace { image, region, space } => {
                write!(f, "{image}/{region}: feature space `{space}` is not declared")
            }
            Diagnostic::EmptyDocument { image } => write!(f, "{image}: no regions"),
            Diagnostic::DroppedLabel { line, label } => {
                write!(f, "line {line}: dropped unknown label `{label}`")
            }
            Diagnostic::EmptyBagFallback { image, region } => {
                write!(f, "{image}/{region}: empty epsilon-ball, used nearest neighbor")
            }
            Diagnostic::MissingFeatures { image, region } => {
                write!(f, "{image}/{region}: no feature vector in any indexed space")
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadReport {
    pub corpus: Corpus,
    pub diagnostics: Vec<Diagnostic>,
}

impl Corpus {
    pub fn num_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn num_regions(&self) -> usize {
        self.docs.iter().map(|d| d.regions.len()).sum()
    }

    pub fn space(&self, name: &str) -> Option<&FeatureSpace> {
        self.feature_spaces.iter().find(|s| s.name == name)
    }

    /// Ground-truth label tokens per document.
    pub fn label_tokens(&self) -> Vec<Vec<usize>> {
        self.docs.iter().map(ImageDoc::gt_labels).collect()
    }

    /// Remaps the corpus onto `vocab`: regions whose ground truth falls
    /// outside it are removed, bag entries outside it are dropped, and
    /// documents left without regions are removed.
    pub fn restrict_to(&self, vocab: &LabelVocabulary) -> Corpus {
        let remap: Vec<Option<usize>> = self
            .vocab
            .labels()
            .iter()
            .map(|l| vocab.index_of(l))
            .collect();
        let docs = self
            .docs
            .iter()
            .filter_map(|doc| {
                let regions: Vec<RegionRecord> = doc
                    .regions
                    .iter()
                    .filter_map(|r| {
                        let gt_label = match r.gt_label {
                            Some(g) => Some(remap[g]?),
                            None => None,
                        };
                        let bag = r.bag.as_ref().map(|b| b.remap(|l| remap[l]));
                        Some(RegionRecord {
                            region_id: r.region_id.clone(),
                            features: r.features.clone(),
                            gt_label,
                            bag,
                        })
                    })
                    .collect();
                (!regions.is_empty()).then(|| ImageDoc {
                    image_id: doc.image_id.clone(),
                    regions,
                })
            })
            .collect();
        Corpus {
            docs,
            vocab: vocab.clone(),
            feature_spaces: self.feature_spaces.clone(),
        }
    }

    /// Structural checks; never fails and never mutates.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut report = Vec::new();
        let declared: HashMap<&str, usize> = self
            .feature_spaces
            .iter()
            .map(|s| (s.name.as_str(), s.dim))
            .collect();
        let l = self.vocab.len();
        for doc in &self.docs {
            if doc.regions.is_empty() {
                report.push(Diagnostic::EmptyDocument {
                    image: doc.image_id.clone(),
                });
            }
            let mut seen = HashSet::new();
            for r in &doc.regions {
                let at = |label: String| Diagnostic::OutOfVocabulary {
                    image: doc.image_id.clone(),
                    region: r.region_id.clone(),
                    label,
                };
                if !seen.insert(r.region_id.as_str()) {
                    report.push(Diagnostic::DuplicateRegion {
                        image: doc.image_id.clone(),
                        region: r.region_id.clone(),
                    });
                }
                if let Some(g) = r.gt_label {
                    if g >= l {
                        report.push(at(g.to_string()));
                    }
                }
                if let Some(bag) = &r.bag {
                    for (label, _) in bag.iter() {
                        if label >= l {
                            report.push(at(label.to_string()));
                        }
                    }
                }
                for (space, v) in &r.features {
                    match declared.get(space.as_str()) {
                        Some(&dim) if dim != v.len() => {
                            report.push(Diagnostic::DimensionMismatch {
                                image: doc.image_id.clone(),
                                region: r.region_id.clone(),
                                space: space.clone(),
                                expected: dim,
                                actual: v.len(),
                            })
                        }
                        Some(_) => {}
                        None => report.push(Diagnostic::UndeclaredSpace {
                            image: doc.image_id.clone(),
                            region: r.region_id.clone(),
                            space: space.clone(),
                        }),
                    }
                }
            }
        }
        report
    }

    /// Serializes to the record format; [`parse_corpus`] reproduces an equal
    /// corpus.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        for label in self.vocab.labels() {
            writeln!(w, "@label\tname={label}")?;
        }
        for space in &self.feature_spaces {
            writeln!(w, "@space\tname={}\tdim={}", space.name, space.dim)?;
        }
        for doc in &self.docs {
            for r in &doc.regions {
                let mut head = format!("image_id={}\tregion_id={}", doc.image_id, r.region_id);
                let mut features = r.features.iter();
                if let Some((space, v)) = features.next() {
                    head.push_str(&format!("\tfeature_space={space}\tfeature={}", format_vector(v)));
                }
                if let Some(bag) = &r.bag {
                    head.push_str(&format!("\tbag={}", bag.to_text(&self.vocab)));
                }
                if let Some(g) = r.gt_label {
                    head.push_str(&format!("\tgt_label={}", self.vocab.label(g)));
                }
                writeln!(w, "{head}")?;
                for (space, v) in features {
                    writeln!(
                        w,
                        "image_id={}\tregion_id={}\tfeature_space={space}\tfeature={}",
                        doc.image_id,
                        r.region_id,
                        format_vector(v)
                    )?;
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("corpus text is UTF-8")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = fs::File::create(path)?;
        let mut w = io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

pub fn format_vector(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    parts.join(",")
}

/// Loads and validates a corpus file, logging diagnostics.
pub fn load_corpus(path: impl AsRef<Path>, mode: LoadMode) -> Result<Corpus> {
    let report = load_corpus_with(path, &LoadOptions::new(mode))?;
    for d in &report.diagnostics {
        log::warn!("{d}");
    }
    Ok(report.corpus)
}

pub fn load_corpus_with(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<LoadReport> {
    let file = fs::File::open(path)?;
    parse_corpus(BufReader::new(file), opts)
}

pub fn parse_corpus_str(text: &str, opts: &LoadOptions) -> Result<LoadReport> {
    parse_corpus(text.as_bytes(), opts)
}

struct PendingRegion {
    record: RegionRecord,
    gt_line: usize,
}

pub fn parse_corpus<R: BufRead>(reader: R, opts: &LoadOptions) -> Result<LoadReport> {
    let frozen = opts.vocab.is_some();
    let mut vocab: Option<LabelVocabulary> = opts.vocab.clone();
    let mut spaces: Vec<FeatureSpace> = Vec::new();
    let mut diagnostics = Vec::new();

    let mut doc_order: Vec<String> = Vec::new();
    let mut doc_regions: HashMap<String, Vec<PendingRegion>> = HashMap::new();
    let mut region_slot: HashMap<(String, String), usize> = HashMap::new();

    let schema = |line: usize, field: &str, message: String| VsimError::Schema {
        line,
        field: field.to_owned(),
        message,
    };

    // Interns `label`, or returns None (frozen vocabulary, unknown label).
    let intern = |vocab: &mut Option<LabelVocabulary>, label: &str| -> Option<usize> {
        match vocab {
            Some(v) => match v.index_of(label) {
                Some(i) => Some(i),
                None if frozen => None,
                None => Some(v.push(label)),
            },
            None => {
                let v = LabelVocabulary::new([label]).ok()?;
                *vocab = Some(v);
                Some(0)
            }
        }
    };

    for (n, line) in reader.lines().enumerate() {
        let lineno = n + 1;
        let line = line?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut parts = trimmed.split('\t');
        let first = parts.next().unwrap_or_default();
        let (directive, field_iter): (Option<&str>, Box<dyn Iterator<Item = &str>>) =
            if let Some(d) = first.strip_prefix('@') {
                (Some(d), Box::new(parts))
            } else {
                (None, Box::new(std::iter::once(first).chain(parts)))
            };

        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        for f in field_iter {
            if f.is_empty() {
                continue;
            }
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| schema(lineno, f, "expected key=value".into()))?;
            if fields.insert(k, v).is_some() {
                return Err(schema(lineno, k, "field repeated".into()));
            }
        }

        match directive {
            Some("label") => {
                let name = *fields
                    .get("name")
                    .ok_or_else(|| schema(lineno, "name", "missing".into()))?;
                if !frozen {
                    if name.is_empty() || name.chars().any(char::is_whitespace) {
                        return Err(schema(lineno, "name", format!("invalid label {name:?}")));
                    }
                    if vocab.as_ref().and_then(|v| v.index_of(name)).is_some() {
                        return Err(schema(lineno, "name", format!("label {name} declared twice")));
                    }
                    intern(&mut vocab, name);
                }
                continue;
            }
            Some("space") => {
                let name = *fields
                    .get("name")
                    .ok_or_else(|| schema(lineno, "name", "missing".into()))?;
                let dim: usize = fields
                    .get("dim")
                    .ok_or_else(|| schema(lineno, "dim", "missing".into()))?
                    .parse()
                    .map_err(|e| schema(lineno, "dim", format!("{e}")))?;
                if dim == 0 {
                    return Err(schema(lineno, "dim", "dimension must be positive".into()));
                }
                match spaces.iter().find(|s| s.name == name) {
                    Some(s) if s.dim != dim => {
                        return Err(schema(lineno, "dim", format!("space {name} redeclared")))
                    }
                    Some(_) => {}
                    None => spaces.push(FeatureSpace {
                        name: name.to_owned(),
                        dim,
                    }),
                }
                continue;
            }
            Some(other) => {
                return Err(schema(lineno, other, "unknown directive".into()));
            }
            None => {}
        }

        for k in fields.keys() {
            if !matches!(
                *k,
                "image_id" | "region_id" | "feature_space" | "feature" | "bag" | "gt_label"
            ) {
                return Err(schema(lineno, k, "unknown field".into()));
            }
        }
        let image_id = *fields
            .get("image_id")
            .filter(|s| !s.is_empty())
            .ok_or_else(|| schema(lineno, "image_id", "missing".into()))?;
        let region_id = *fields
            .get("region_id")
            .filter(|s| !s.is_empty())
            .ok_or_else(|| schema(lineno, "region_id", "missing".into()))?;

        let key = (image_id.to_owned(), region_id.to_owned());
        let slot = match region_slot.get(&key) {
            Some(&s) => s,
            None => {
                let regions = doc_regions.entry(image_id.to_owned()).or_insert_with(|| {
                    doc_order.push(image_id.to_owned());
                    Vec::new()
                });
                regions.push(PendingRegion {
                    record: RegionRecord::new(region_id),
                    gt_line: 0,
                });
                let s = regions.len() - 1;
                region_slot.insert(key, s);
                s
            }
        };
        let pending = &mut doc_regions.get_mut(image_id).expect("inserted above")[slot];

        match (fields.get("feature_space"), fields.get("feature")) {
            (Some(space), Some(values)) => {
                let v: Vec<f64> = values
                    .split(',')
                    .map(|x| {
                        x.trim()
                            .parse::<f64>()
                            .ok()
                            .filter(|f| f.is_finite())
                            .ok_or_else(|| schema(lineno, "feature", format!("bad real {x:?}")))
                    })
                    .collect::<Result<_>>()?;
                match spaces.iter().find(|s| s.name == *space) {
                    Some(s) if s.dim != v.len() => {
                        return Err(schema(
                            lineno,
                            "feature",
                            format!("dimension {} does not match space {space} ({})", v.len(), s.dim),
                        ))
                    }
                    Some(_) => {}
                    None => spaces.push(FeatureSpace {
                        name: (*space).to_owned(),
                        dim: v.len(),
                    }),
                }
                if pending.record.features.insert((*space).to_owned(), v).is_some() {
                    return Err(schema(lineno, "feature", format!("second vector for space {space}")));
                }
            }
            (None, None) => {}
            (Some(_), None) => return Err(schema(lineno, "feature", "missing".into())),
            (None, Some(_)) => return Err(schema(lineno, "feature_space", "missing".into())),
        }

        if let Some(text) = fields.get("bag") {
            if pending.record.bag.is_some() {
                return Err(schema(lineno, "bag", "bag given twice for this region".into()));
            }
            let entries = parse_bag_entries(text).map_err(|m| schema(lineno, "bag", m))?;
            let mut bag = BagOfLabels::new();
            for (label, count) in entries {
                match intern(&mut vocab, label) {
                    Some(i) => bag.add(i, count),
                    None => diagnostics.push(Diagnostic::DroppedLabel {
                        line: lineno,
                        label: label.to_owned(),
                    }),
                }
            }
            pending.record.bag = Some(bag);
        }

        if let Some(label) = fields.get("gt_label") {
            if label.is_empty() {
                return Err(schema(lineno, "gt_label", "empty".into()));
            }
            let idx = match intern(&mut vocab, label) {
                Some(i) => Some(i),
                None if opts.mode == LoadMode::Training => {
                    return Err(schema(
                        lineno,
                        "gt_label",
                        format!("label {label} is not in the frozen vocabulary"),
                    ))
                }
                None => {
                    diagnostics.push(Diagnostic::DroppedLabel {
                        line: lineno,
                        label: (*label).to_owned(),
                    });
                    None
                }
            };
            if pending.gt_line != 0 {
                let prev = pending.record.gt_label;
                if prev != idx {
                    return Err(schema(lineno, "gt_label", "conflicting gt_label for region".into()));
                }
            }
            pending.gt_line = lineno;
            pending.record.gt_label = idx;
        }
    }

    let vocab = vocab.ok_or(VsimError::EmptyCorpus)?;
    let mut docs = Vec::with_capacity(doc_order.len());
    for image_id in doc_order {
        let regions: Vec<RegionRecord> = doc_regions
            .remove(&image_id)
            .unwrap_or_default()
            .into_iter()
            .map(|p| p.record)
            .collect();
        for r in &regions {
            if opts.mode == LoadMode::Training && r.gt_label.is_none() {
                return Err(VsimError::MissingGtLabel {
                    image: image_id.clone(),
                    region: r.region_id.clone(),
                });
            }
            if r.features.is_empty() && r.bag.is_none() && opts.mode == LoadMode::Inference {
                return Err(VsimError::MissingObservation {
                    image: image_id.clone(),
                    region: r.region_id.clone(),
                });
            }
        }
        docs.push(ImageDoc { image_id, regions });
    }
    if docs.is_empty() {
        return Err(VsimError::EmptyCorpus);
    }

    Ok(LoadReport {
        corpus: Corpus {
            docs,
            vocab,
            feature_spaces: spaces,
        },
        diagnostics,
    })
}

/// Top-`top_k` labels by ground-truth frequency, ties broken
/// lexicographically. Returns every distinct label when fewer exist.
pub fn build_vocabulary(corpus: &Corpus, top_k: usize) -> Result<LabelVocabulary> {
    if top_k == 0 {
        return Err(VsimError::InvalidParameter("top_k must be positive".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for doc in &corpus.docs {
        for g in doc.regions.iter().filter_map(|r| r.gt_label) {
            *counts.entry(corpus.vocab.label(g)).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(VsimError::EmptyCorpus);
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    LabelVocabulary::new(ranked.into_iter().take(top_k).map(|(l, _)| l))
}
