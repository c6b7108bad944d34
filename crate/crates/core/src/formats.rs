//! Line-oriented exchange files.
//!
//! Detections: one object per line,
//! `image_id x1 y1 x2 y2 x3 y3 x4 y4 category [confidence]`. A line holding
//! only an image id records an image with no detections. Category names may
//! contain spaces; the confidence column is recognized by being numeric.
//!
//! Responses: `image_id<TAB>response`, one image per line.

use std::fmt::Write as _;

use thiserror::Error;

use crate::geometry::QuadBox;
use crate::metrics::Detection;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
}

fn malformed(line: usize, message: impl Into<String>) -> FormatError {
    FormatError::Malformed {
        line,
        message: message.into(),
    }
}

/// Parsed detections file. `images` lists every image id mentioned, in
/// first-seen order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionFile {
    pub images: Vec<String>,
    pub detections: Vec<Detection>,
}

impl DetectionFile {
    pub fn all_scored(&self) -> bool {
        self.detections.iter().all(|d| d.confidence.is_some())
    }

    pub fn for_image<'a>(&'a self, image_id: &'a str) -> impl Iterator<Item = &'a Detection> + 'a {
        self.detections.iter().filter(move |d| d.image_id == image_id)
    }
}

pub fn format_detection(d: &Detection) -> String {
    let mut line = d.image_id.clone();
    for v in d.quad.to_flat() {
        let _ = write!(line, " {v:?}");
    }
    let _ = write!(line, " {}", d.category);
    if let Some(c) = d.confidence {
        let _ = write!(line, " {c:?}");
    }
    line
}

/// Writes detections grouped under `images` (images without detections get a
/// bare id line). Detections of images not listed are appended at the end.
pub fn write_detections(images: &[String], detections: &[Detection]) -> String {
    let mut out = String::new();
    let mut written = vec![false; detections.len()];
    for image in images {
        let mut any = false;
        for (i, d) in detections.iter().enumerate() {
            if &d.image_id == image {
                out.push_str(&format_detection(d));
                out.push('\n');
                written[i] = true;
                any = true;
            }
        }
        if !any {
            out.push_str(image);
            out.push('\n');
        }
    }
    for (d, done) in detections.iter().zip(written) {
        if !done {
            out.push_str(&format_detection(d));
            out.push('\n');
        }
    }
    out
}

pub fn parse_detections(text: &str) -> Result<DetectionFile, FormatError> {
    let mut file = DetectionFile::default();
    let mut seen = std::collections::HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let n = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let image_id = tokens[0].to_string();
        if seen.insert(image_id.clone()) {
            file.images.push(image_id.clone());
        }
        if tokens.len() == 1 {
            continue;
        }
        if tokens.len() < 10 {
            return Err(malformed(
                n,
                format!(
                    "expected image id, 8 coordinates and a category, found {} fields",
                    tokens.len()
                ),
            ));
        }
        let mut coords = [0f64; 8];
        for (slot, tok) in coords.iter_mut().zip(&tokens[1..9]) {
            *slot = tok
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| malformed(n, format!("{tok:?} is not a coordinate")))?;
        }
        let mut rest = &tokens[9..];
        let mut confidence = None;
        if rest.len() > 1 {
            if let Ok(c) = rest[rest.len() - 1].parse::<f64>() {
                if !(0.0..=1.0).contains(&c) {
                    return Err(malformed(n, format!("confidence {c} outside [0, 1]")));
                }
                confidence = Some(c);
                rest = &rest[..rest.len() - 1];
            }
        }
        let quad = QuadBox::from_flat(coords).map_err(|e| malformed(n, e.to_string()))?;
        let mut det = Detection::new(image_id, rest.join(" "), quad);
        det.confidence = confidence;
        file.detections.push(det);
    }
    Ok(file)
}

pub fn format_response_line(image_id: &str, response: &str) -> String {
    format!("{image_id}\t{response}")
}

/// Parses `image_id<TAB>response` lines. Blank lines are skipped; a missing
/// tab means an empty response.
pub fn parse_responses(text: &str) -> Result<Vec<(String, String)>, FormatError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, response) = line.split_once('\t').unwrap_or((line, ""));
        let id = id.trim();
        if id.is_empty() || id.contains(char::is_whitespace) {
            return Err(malformed(idx + 1, format!("invalid image id {id:?}")));
        }
        out.push((id.to_string(), response.to_string()));
    }
    Ok(out)
}
