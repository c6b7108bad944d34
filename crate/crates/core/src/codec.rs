//! Conversion between detections and the token text an MLM is trained to emit.
//!
//! One block per category, blocks in alphabetical order and separated by
//! `<sep>`; each block is the category name followed by eight `<loc_N>`
//! tokens per box, `N` being the coordinate quantized to `0..=1000` along its
//! image axis:
//!
//! ```text
//! plane<loc_10><loc_10><loc_20><loc_10><loc_20><loc_20><loc_10><loc_20><sep>ship<loc_...>...
//! ```
//!
//! An image without objects serializes to the empty string.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::ops::Range;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Point, QuadBox};
use crate::metrics::Detection;

/// Largest quantization bin; each axis is mapped onto `0..=MAX_BIN`.
pub const MAX_BIN: u16 = 1000;

pub const SEP_TOKEN: &str = "<sep>";

/// Confidence attached to every parsed detection.
pub const PARSED_CONFIDENCE: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("bin {0} out of range 0..=1000")]
    OutOfRange(i64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Lowercases, trims and collapses runs of whitespace.
pub fn normalize_name(name: &str) -> String {
    name.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// The closed vocabulary of category names for a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct CategorySet {
    names: Vec<String>,
    normalized: Vec<String>,
}

impl TryFrom<Vec<String>> for CategorySet {
    type Error = CodecError;

    fn try_from(names: Vec<String>) -> Result<Self, Self::Error> {
        CategorySet::new(names)
    }
}

impl From<CategorySet> for Vec<String> {
    fn from(c: CategorySet) -> Self {
        c.names
    }
}

impl CategorySet {
    pub fn new<I, S>(names: I) -> Result<Self, CodecError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut out = Self {
            names: Vec::new(),
            normalized: Vec::new(),
        };
        for name in names {
            let name: String = name.into();
            let name = name.trim().to_string();
            if name.is_empty() {
                return Err(CodecError::InvalidArgument("empty category name".into()));
            }
            if name.contains(['<', '>']) || name.chars().any(char::is_control) {
                return Err(CodecError::InvalidArgument(format!(
                    "category {name:?} contains a reserved character"
                )));
            }
            let norm = normalize_name(&name);
            if out.normalized.contains(&norm) {
                return Err(CodecError::InvalidArgument(format!("duplicate category {name:?}")));
            }
            out.names.push(name);
            out.normalized.push(norm);
        }
        Ok(out)
    }

    /// Reads one name per line, skipping blank lines and `#` comments.
    pub fn from_lines(text: &str) -> Result<Self, CodecError> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Canonical spelling of `name` if it matches a category after normalization.
    pub fn resolve(&self, name: &str) -> Option<&str> {
        let norm = normalize_name(name);
        self.normalized
            .iter()
            .position(|n| *n == norm)
            .map(|i| self.names[i].as_str())
    }

    /// Union preserving first-seen order; spellings from `self` win.
    pub fn union(&self, other: &CategorySet) -> CategorySet {
        let mut out = self.clone();
        for (name, norm) in other.names.iter().zip(&other.normalized) {
            if !out.normalized.contains(norm) {
                out.names.push(name.clone());
                out.normalized.push(norm.clone());
            }
        }
        out
    }
}

/// Maps a pixel coordinate onto `0..=1000`, rounding half away from zero and
/// clamping coordinates that fall outside the image.
pub fn quantize(value: f64, extent: f64) -> Result<u16, CodecError> {
    if !(extent > 0.0 && extent.is_finite()) {
        return Err(CodecError::InvalidArgument(format!(
            "extent must be positive, got {extent}"
        )));
    }
    if !value.is_finite() {
        return Err(CodecError::InvalidArgument(format!(
            "coordinate must be finite, got {value}"
        )));
    }
    let scaled = (value / extent * f64::from(MAX_BIN)).round();
    Ok(scaled.clamp(0.0, f64::from(MAX_BIN)) as u16)
}

pub fn dequantize(bin: i64, extent: f64) -> Result<f64, CodecError> {
    if !(extent > 0.0 && extent.is_finite()) {
        return Err(CodecError::InvalidArgument(format!(
            "extent must be positive, got {extent}"
        )));
    }
    if !(0..=i64::from(MAX_BIN)).contains(&bin) {
        return Err(CodecError::OutOfRange(bin));
    }
    Ok(bin as f64 / f64::from(MAX_BIN) * extent)
}

/// A box as eight bins `(x1, y1, …, x4, y4)` in canonical vertex order.
///
/// Canonical order is decided on the integer bins, so quantization can never
/// leave a box whose printed order disagrees with its own canonical form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QuantizedBox {
    bins: [u16; 8],
}

impl QuantizedBox {
    pub fn from_bins(bins: [u16; 8]) -> Result<Self, CodecError> {
        if let Some(&b) = bins.iter().find(|&&b| b > MAX_BIN) {
            return Err(CodecError::OutOfRange(i64::from(b)));
        }
        let pts = std::array::from_fn(|i| Point::new(f64::from(bins[2 * i]), f64::from(bins[2 * i + 1])));
        let canon = QuadBox::canonicalize(pts)?;
        Ok(Self {
            bins: canon.to_flat().map(|v| v as u16),
        })
    }

    pub fn from_box(quad: &QuadBox, width: f64, height: f64) -> Result<Self, CodecError> {
        let flat = quad.to_flat();
        let mut bins = [0u16; 8];
        for (i, v) in flat.iter().enumerate() {
            bins[i] = quantize(*v, if i % 2 == 0 { width } else { height })?;
        }
        Self::from_bins(bins)
    }

    pub fn bins(&self) -> &[u16; 8] {
        &self.bins
    }

    /// Raster order of the starting vertex (y1, then x1), then the rest.
    fn sort_key(&self) -> [u16; 8] {
        let b = self.bins;
        [b[1], b[0], b[2], b[3], b[4], b[5], b[6], b[7]]
    }

    pub fn to_box(&self, width: f64, height: f64) -> Result<QuadBox, CodecError> {
        let mut pts = [Point::new(0.0, 0.0); 4];
        for (i, p) in pts.iter_mut().enumerate() {
            *p = Point::new(
                dequantize(i64::from(self.bins[2 * i]), width)?,
                dequantize(i64::from(self.bins[2 * i + 1]), height)?,
            );
        }
        // dequantization is a positive per-axis scaling, which preserves the
        // canonical order established on the bins
        Ok(QuadBox::from_canonical(pts))
    }
}

/// Model text for one image together with the image size it refers to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseDoc {
    pub text: String,
    pub image_width: f64,
    pub image_height: f64,
}

impl ResponseDoc {
    pub fn new(text: impl Into<String>, image_width: f64, image_height: f64) -> Self {
        Self {
            text: text.into(),
            image_width,
            image_height,
        }
    }
}

fn check_extent(width: f64, height: f64) -> Result<(), CodecError> {
    if width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite() {
        Ok(())
    } else {
        Err(CodecError::InvalidArgument(format!(
            "image size must be positive, got {width}x{height}"
        )))
    }
}

/// Renders detections into the canonical response text. Input order does not
/// matter; confidences are ignored.
pub fn serialize(
    detections: &[Detection],
    categories: &CategorySet,
    image_width: f64,
    image_height: f64,
) -> Result<ResponseDoc, CodecError> {
    check_extent(image_width, image_height)?;
    let mut blocks: Vec<(&str, Vec<QuantizedBox>)> = Vec::new();
    for det in detections {
        let name = categories
            .resolve(&det.category)
            .ok_or_else(|| CodecError::InvalidArgument(format!("unknown category {:?}", det.category)))?;
        let qbox = QuantizedBox::from_box(&det.quad, image_width, image_height)?;
        match blocks.iter_mut().find(|(n, _)| *n == name) {
            Some((_, boxes)) => boxes.push(qbox),
            None => blocks.push((name, vec![qbox])),
        }
    }
    blocks.sort_by(|a, b| a.0.cmp(b.0));

    let mut text = String::new();
    for (i, (name, boxes)) in blocks.iter_mut().enumerate() {
        if i > 0 {
            text.push_str(SEP_TOKEN);
        }
        text.push_str(name);
        boxes.sort_by_key(QuantizedBox::sort_key);
        for qbox in boxes.iter() {
            for bin in qbox.bins {
                let _ = write!(text, "<loc_{bin}>");
            }
        }
    }
    Ok(ResponseDoc::new(text, image_width, image_height))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WarningKind {
    UnknownCategory,
    DanglingCoordinates,
    OutOfRangeBin,
    EmptyResponse,
}

impl WarningKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            WarningKind::UnknownCategory => "unknown-category",
            WarningKind::DanglingCoordinates => "dangling-coordinates",
            WarningKind::OutOfRangeBin => "out-of-range-bin",
            WarningKind::EmptyResponse => "empty-response",
        }
    }
}

/// A fragment of the response that did not become a detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseWarning {
    pub kind: WarningKind,
    /// Byte range in the response text.
    pub span: Range<usize>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParseReport {
    pub detections: Vec<Detection>,
    pub warnings: Vec<ParseWarning>,
}

static TOKEN_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"<loc_(\d+)>|<sep>|<[^<>]*>|[^<]+|<").expect("static regex"));

enum Token<'a> {
    Loc(Option<i64>),
    Sep,
    Text(&'a str),
}

struct Group<'a> {
    label: Option<(&'a str, Range<usize>)>,
    locs: Vec<(Option<i64>, Range<usize>)>,
}

/// Extracts detections from free-form model output.
///
/// Never fails: anything that cannot become a box is reported as a warning.
/// Category text is matched against `categories` with [`fuzzy_match`], falling
/// back to its trailing words when prose precedes the name; detections get `image_id` left empty and confidence `1.0`.
pub fn parse(doc: &ResponseDoc, categories: &CategorySet) -> ParseReport {
    let mut report = ParseReport::default();
    if doc.text.trim().is_empty() {
        report.warnings.push(ParseWarning {
            kind: WarningKind::EmptyResponse,
            span: 0..doc.text.len(),
            message: "response contains no objects".into(),
        });
        return report;
    }
    if check_extent(doc.image_width, doc.image_height).is_err() {
        report.warnings.push(ParseWarning {
            kind: WarningKind::DanglingCoordinates,
            span: 0..doc.text.len(),
            message: format!(
                "invalid image size {}x{}, coordinates cannot be placed",
                doc.image_width, doc.image_height
            ),
        });
        return report;
    }

    let mut group = Group {
        label: None,
        locs: Vec::new(),
    };
    for m in TOKEN_RE.captures_iter(&doc.text) {
        let whole = m.get(0).expect("match");
        let span = whole.range();
        let token = if let Some(v) = m.get(1) {
            Token::Loc(v.as_str().parse::<i64>().ok())
        } else if whole.as_str() == SEP_TOKEN {
            Token::Sep
        } else {
            Token::Text(whole.as_str())
        };
        match token {
            Token::Loc(v) => group.locs.push((v, span)),
            Token::Sep => flush(&mut group, doc, categories, &mut report),
            Token::Text(t) if t.trim().is_empty() => {}
            Token::Text(t) => {
                flush(&mut group, doc, categories, &mut report);
                let lead = t.len() - t.trim_start().len();
                let label = t.trim();
                group.label = Some((label, span.start + lead..span.start + lead + label.len()));
            }
        }
    }
    flush(&mut group, doc, categories, &mut report);
    report
}

fn flush(group: &mut Group<'_>, doc: &ResponseDoc, categories: &CategorySet, report: &mut ParseReport) {
    let label = group.label.take();
    let locs = std::mem::take(&mut group.locs);
    let Some((label, label_span)) = label else {
        if let (Some(first), Some(last)) = (locs.first(), locs.last()) {
            report.warnings.push(ParseWarning {
                kind: WarningKind::DanglingCoordinates,
                span: first.1.start..last.1.end,
                message: format!("{} location tokens without a category", locs.len()),
            });
        }
        return;
    };
    let block_end = locs.last().map_or(label_span.end, |l| l.1.end);
    if label.starts_with('<') {
        report.warnings.push(ParseWarning {
            kind: WarningKind::UnknownCategory,
            span: label_span.start..block_end,
            message: format!("unrecognized markup {label:?}"),
        });
        return;
    }
    if locs.is_empty() {
        report.warnings.push(ParseWarning {
            kind: WarningKind::DanglingCoordinates,
            span: label_span,
            message: format!("category {label:?} has no location tokens"),
        });
        return;
    }
    let Some(category) = match_label(label, categories) else {
        report.warnings.push(ParseWarning {
            kind: WarningKind::UnknownCategory,
            span: label_span.start..block_end,
            message: format!("{label:?} matches no known category"),
        });
        return;
    };

    let chunks = locs.chunks_exact(8);
    let rest = chunks.remainder();
    if let (Some(first), Some(last)) = (rest.first(), rest.last()) {
        report.warnings.push(ParseWarning {
            kind: WarningKind::DanglingCoordinates,
            span: first.1.start..last.1.end,
            message: format!(
                "{} trailing location tokens after {category:?} do not form a box",
                rest.len()
            ),
        });
    }
    for chunk in chunks {
        let span = chunk[0].1.start..chunk[7].1.end;
        let mut bins = [0u16; 8];
        let mut bad = None;
        for (slot, (v, s)) in bins.iter_mut().zip(chunk) {
            match v {
                Some(v) if (0..=i64::from(MAX_BIN)).contains(v) => *slot = *v as u16,
                _ => {
                    bad = Some(doc.text[s.clone()].to_string());
                    break;
                }
            }
        }
        if let Some(token) = bad {
            report.warnings.push(ParseWarning {
                kind: WarningKind::OutOfRangeBin,
                span,
                message: format!("{token} is outside 0..=1000"),
            });
            continue;
        }
        let quad = QuantizedBox::from_bins(bins)
            .and_then(|q| q.to_box(doc.image_width, doc.image_height))
            .expect("bins validated and extent checked");
        report.detections.push(Detection {
            image_id: String::new(),
            category: category.to_string(),
            quad,
            confidence: Some(PARSED_CONFIDENCE),
            difficult: false,
        });
    }
}

/// Edit distance with unit-cost insertions, deletions and substitutions,
/// counted over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Largest `distance / max(len)` accepted for near-miss spellings.
pub const MAX_TYPO_RATIO: f64 = 0.34;

fn is_word_substring(needle: &str, hay: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    hay.match_indices(needle).any(|(i, _)| {
        let before = hay[..i].chars().next_back();
        let after = hay[i + needle.len()..].chars().next();
        !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
    })
}

/// Resolves free-form category text to a known category.
///
/// An exact match after normalization wins. Otherwise a category is a
/// candidate when the text appears in it as a whole word (`"pool"` in
/// `"swimming pool"`), or when it is a near-miss spelling with
/// `distance / max(len) <= 0.34`. The candidate with the smallest distance
/// wins, ties going to the alphabetically first name.
pub fn fuzzy_match<'a>(name: &str, categories: &'a CategorySet) -> Option<&'a str> {
    if let Some(exact) = categories.resolve(name) {
        return Some(exact);
    }
    let query = normalize_name(name);
    if query.is_empty() {
        return None;
    }
    let qlen = query.chars().count();
    categories
        .names
        .iter()
        .zip(&categories.normalized)
        .filter_map(|(display, norm)| {
            let d = levenshtein(&query, norm);
            let longest = qlen.max(norm.chars().count());
            let accepted = is_word_substring(&query, norm) || d as f64 / longest as f64 <= MAX_TYPO_RATIO;
            accepted.then_some((d, display.as_str()))
        })
        .min_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(b.1)))
        .map(|(_, n)| n)
}

/// Resolves the text in front of a box. Free-form output often prefixes the
/// category with prose ("Sure, here they are: plane"), so when the whole
/// label does not match, its trailing word runs are tried, longest first.
fn match_label<'a>(label: &str, categories: &'a CategorySet) -> Option<&'a str> {
    if let Some(c) = fuzzy_match(label, categories) {
        return Some(c);
    }
    let starts: Vec<usize> = label
        .char_indices()
        .filter(|&(i, c)| !c.is_whitespace() && label[..i].ends_with(char::is_whitespace))
        .map(|(i, _)| i)
        .collect();
    starts.into_iter().find_map(|i| fuzzy_match(&label[i..], categories))
}

/// Canonical ordering used wherever detections need a confidence-independent
/// tie-break: category, image, then box raster order.
pub fn canonical_cmp(a: &Detection, b: &Detection) -> Ordering {
    a.category
        .cmp(&b.category)
        .then_with(|| a.image_id.cmp(&b.image_id))
        .then_with(|| a.quad.raster_cmp(&b.quad))
}
