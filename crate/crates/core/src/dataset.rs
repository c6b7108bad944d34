//! DOTA-style annotation directories and multi-dataset merging.
//!
//! An annotation directory holds one `<image_id>.txt` per image, each line
//! `x1 y1 x2 y2 x3 y3 x4 y4 category difficulty`. The `imagesource:` and
//! `gsd:` header lines of the original DOTA release are skipped.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::CategorySet;
use crate::geometry::QuadBox;
use crate::metrics::Detection;

/// Patch size used when no per-image sizes are available.
pub const DEFAULT_IMAGE_SIZE: (f64, f64) = (1024.0, 1024.0);

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed annotation: {message}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("unknown categories:\n{}", .0.iter().map(|(p, l, c)| format!("  {}:{l}: {c:?}", p.display())).collect::<Vec<_>>().join("\n"))]
    UnknownCategory(Vec<(PathBuf, usize, String)>),
    #[error("no image size known for {0:?}")]
    MissingImageSize(String),
    #[error("invalid sidecar {path}: {message}")]
    Sidecar { path: PathBuf, message: String },
    #[error("corpus {0:?} is empty")]
    EmptyCorpus(String),
    #[error("duplicate image id {0:?} after merging")]
    DuplicateId(String),
    #[error("invalid merge: {0}")]
    InvalidMerge(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image_id: String,
    pub image_width: f64,
    pub image_height: f64,
    pub gts: Vec<Detection>,
    pub source_dataset: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub samples: Vec<Sample>,
    pub categories: CategorySet,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// All ground truths, image ids included.
    pub fn ground_truths(&self) -> Vec<Detection> {
        self.samples.iter().flat_map(|s| s.gts.iter().cloned()).collect()
    }
}

/// Where image dimensions come from; DOTA label files do not carry them.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageSizeSource {
    Fixed {
        width: f64,
        height: f64,
    },
    /// Per-image sizes, usually read from a JSON sidecar `{"id": [w, h]}`.
    PerImage(BTreeMap<String, (f64, f64)>),
}

impl Default for ImageSizeSource {
    fn default() -> Self {
        let (width, height) = DEFAULT_IMAGE_SIZE;
        Self::Fixed { width, height }
    }
}

impl ImageSizeSource {
    pub fn from_sidecar(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_owned(),
            source,
        })?;
        let map: BTreeMap<String, (f64, f64)> = serde_json::from_str(&text).map_err(|e| DatasetError::Sidecar {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        if let Some((id, _)) = map.iter().find(|(_, (w, h))| !(*w > 0.0 && *h > 0.0)) {
            return Err(DatasetError::Sidecar {
                path: path.to_owned(),
                message: format!("non-positive size for {id:?}"),
            });
        }
        Ok(Self::PerImage(map))
    }

    pub fn size_of(&self, image_id: &str) -> Result<(f64, f64), DatasetError> {
        match self {
            Self::Fixed { width, height } => Ok((*width, *height)),
            Self::PerImage(map) => map
                .get(image_id)
                .copied()
                .ok_or_else(|| DatasetError::MissingImageSize(image_id.to_string())),
        }
    }
}

enum LineError {
    Malformed(String),
    Unknown(String),
}

fn parse_line(line: &str, categories: &CategorySet) -> Result<(QuadBox, String, bool), LineError> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.len() < 9 {
        return Err(LineError::Malformed(format!(
            "expected 8 coordinates and a category, found {} fields",
            tokens.len()
        )));
    }
    let mut coords = [0f64; 8];
    for (slot, tok) in coords.iter_mut().zip(&tokens[..8]) {
        *slot = tok
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| LineError::Malformed(format!("{tok:?} is not a coordinate")))?;
    }
    let mut rest = &tokens[8..];
    let mut difficult = false;
    if rest.len() > 1 {
        match *rest.last().expect("len > 1") {
            "0" => rest = &rest[..rest.len() - 1],
            "1" => {
                difficult = true;
                rest = &rest[..rest.len() - 1];
            }
            _ => {}
        }
    }
    let raw = rest.join(" ");
    let category = categories
        .resolve(&raw)
        .ok_or(LineError::Unknown(raw.clone()))?
        .to_string();
    let quad = QuadBox::from_flat(coords).map_err(|e| LineError::Malformed(e.to_string()))?;
    Ok((quad, category, difficult))
}

/// Parses one annotation file's text.
pub fn parse_annotation_text(
    text: &str,
    path: &Path,
    image_id: &str,
    categories: &CategorySet,
) -> Result<Vec<Detection>, DatasetError> {
    let mut gts = Vec::new();
    let mut unknown = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("imagesource:") || line.starts_with("gsd:") {
            continue;
        }
        match parse_line(line, categories) {
            Ok((quad, category, difficult)) => {
                gts.push(Detection::new(image_id, category, quad).with_difficult(difficult));
            }
            Err(LineError::Unknown(name)) => unknown.push((path.to_owned(), idx + 1, name)),
            Err(LineError::Malformed(message)) => {
                return Err(DatasetError::MalformedLine {
                    path: path.to_owned(),
                    line: idx + 1,
                    message,
                })
            }
        }
    }
    if !unknown.is_empty() {
        return Err(DatasetError::UnknownCategory(unknown));
    }
    Ok(gts)
}

/// `*.txt` files of a directory, sorted by image id.
pub fn annotation_files(dir: &Path) -> Result<Vec<(String, PathBuf)>, DatasetError> {
    let io = |source| DatasetError::Io {
        path: dir.to_owned(),
        source,
    };
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "txt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                files.push((stem.to_string(), path.clone()));
            }
        }
    }
    files.sort();
    Ok(files)
}

/// Loads a DOTA-style annotation directory. The corpus is named after the
/// directory.
pub fn load_dota(dir: &Path, categories: &CategorySet, sizes: &ImageSizeSource) -> Result<Corpus, DatasetError> {
    let name = dir.file_name().and_then(|s| s.to_str()).unwrap_or("corpus").to_string();
    let files = annotation_files(dir)?;
    let loaded: Vec<Result<Sample, DatasetError>> = files
        .par_iter()
        .map(|(image_id, path)| {
            let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
                path: path.clone(),
                source,
            })?;
            let gts = parse_annotation_text(&text, path, image_id, categories)?;
            let (image_width, image_height) = sizes.size_of(image_id)?;
            Ok(Sample {
                image_id: image_id.clone(),
                image_width,
                image_height,
                gts,
                source_dataset: name.clone(),
            })
        })
        .collect();

    let mut samples = Vec::with_capacity(loaded.len());
    let mut unknown = Vec::new();
    for r in loaded {
        match r {
            Ok(s) => samples.push(s),
            Err(DatasetError::UnknownCategory(lines)) => unknown.extend(lines),
            Err(e) => return Err(e),
        }
    }
    if !unknown.is_empty() {
        return Err(DatasetError::UnknownCategory(unknown));
    }
    Ok(Corpus {
        name,
        samples,
        categories: categories.clone(),
    })
}

fn namespaced(corpus: &Corpus) -> impl Iterator<Item = Sample> + '_ {
    corpus.samples.iter().map(move |s| {
        let image_id = format!("{}/{}", corpus.name, s.image_id);
        Sample {
            image_id: image_id.clone(),
            gts: s
                .gts
                .iter()
                .cloned()
                .map(|mut g| {
                    g.image_id = image_id.clone();
                    g
                })
                .collect(),
            ..s.clone()
        }
    })
}

fn merged_header(corpora: &[Corpus]) -> Result<(String, CategorySet), DatasetError> {
    let first = corpora
        .first()
        .ok_or_else(|| DatasetError::InvalidMerge("no corpora given".into()))?;
    let categories = corpora[1..]
        .iter()
        .fold(first.categories.clone(), |acc, c| acc.union(&c.categories));
    let name = corpora.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join("+");
    Ok((name, categories))
}

fn repeat_merge(corpora: &[Corpus], factors: &[usize]) -> Result<Corpus, DatasetError> {
    if corpora.len() == 1 && factors[0] == 1 {
        return Ok(corpora[0].clone());
    }
    let (name, categories) = merged_header(corpora)?;
    let mut seen = HashSet::new();
    let mut samples = Vec::new();
    for (corpus, &factor) in corpora.iter().zip(factors) {
        let block: Vec<Sample> = namespaced(corpus).collect();
        for s in &block {
            if !seen.insert(s.image_id.clone()) {
                return Err(DatasetError::DuplicateId(s.image_id.clone()));
            }
        }
        for _ in 0..factor {
            samples.extend(block.iter().cloned());
        }
    }
    Ok(Corpus {
        name,
        samples,
        categories,
    })
}

/// Plain concatenation. Image ids become `<corpus>/<image_id>`; a single
/// corpus is returned unchanged.
pub fn merge_concat(corpora: &[Corpus]) -> Result<Corpus, DatasetError> {
    if corpora.is_empty() {
        return Err(DatasetError::InvalidMerge("no corpora given".into()));
    }
    repeat_merge(corpora, &vec![1; corpora.len()])
}

/// Whole-corpus repetition factors `max(1, round(max_size / size))`.
pub fn balanced_factors(sizes: &[usize]) -> Vec<usize> {
    let max = sizes.iter().copied().max().unwrap_or(0) as f64;
    sizes
        .iter()
        .map(|&s| {
            if s == 0 {
                1
            } else {
                ((max / s as f64).round() as usize).max(1)
            }
        })
        .collect()
}

/// Oversamples smaller corpora by repeating them whole, see [`balanced_factors`].
pub fn merge_balanced(corpora: &[Corpus]) -> Result<Corpus, DatasetError> {
    let factors = balanced_factors(&corpora.iter().map(Corpus::len).collect::<Vec<_>>());
    merge_balanced_with(corpora, &factors)
}

/// Balanced merge with explicit repetition factors.
pub fn merge_balanced_with(corpora: &[Corpus], factors: &[usize]) -> Result<Corpus, DatasetError> {
    if corpora.is_empty() {
        return Err(DatasetError::InvalidMerge("no corpora given".into()));
    }
    if let Some(c) = corpora.iter().find(|c| c.is_empty()) {
        return Err(DatasetError::EmptyCorpus(c.name.clone()));
    }
    if factors.len() != corpora.len() || factors.contains(&0) {
        return Err(DatasetError::InvalidMerge(format!(
            "need one positive factor per corpus, got {factors:?} for {} corpora",
            corpora.len()
        )));
    }
    repeat_merge(corpora, factors)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeStrategy {
    Concat,
    Balanced,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestSource {
    pub name: String,
    pub size: usize,
    pub repetition: usize,
}

/// JSON description of a merged corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub name: String,
    pub strategy: MergeStrategy,
    pub size: usize,
    pub categories: CategorySet,
    pub sources: Vec<ManifestSource>,
    /// Image ids in sampling order, repeats included.
    pub samples: Vec<String>,
}

/// Runs a merge and describes the result.
pub fn merge(
    corpora: &[Corpus],
    strategy: MergeStrategy,
    factors: Option<&[usize]>,
) -> Result<(Corpus, CorpusManifest), DatasetError> {
    let factors = match (strategy, factors) {
        (MergeStrategy::Concat, Some(_)) => {
            return Err(DatasetError::InvalidMerge(
                "repetition factors only apply to the balanced strategy".into(),
            ))
        }
        (MergeStrategy::Concat, None) => vec![1; corpora.len()],
        (MergeStrategy::Balanced, Some(f)) => f.to_vec(),
        (MergeStrategy::Balanced, None) => balanced_factors(&corpora.iter().map(Corpus::len).collect::<Vec<_>>()),
    };
    let merged = match strategy {
        MergeStrategy::Concat => merge_concat(corpora)?,
        MergeStrategy::Balanced => merge_balanced_with(corpora, &factors)?,
    };
    let manifest = CorpusManifest {
        name: merged.name.clone(),
        strategy,
        size: merged.len(),
        categories: merged.categories.clone(),
        sources: corpora
            .iter()
            .zip(&factors)
            .map(|(c, &r)| ManifestSource {
                name: c.name.clone(),
                size: c.len(),
                repetition: r,
            })
            .collect(),
        samples: merged.samples.iter().map(|s| s.image_id.clone()).collect(),
    };
    Ok((merged, manifest))
}
