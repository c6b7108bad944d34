//! Detection metrics that do not depend on the detector's confidence scores.
//!
//! mAP normally rewards a detector for ranking its own outputs well. For
//! detectors that emit no scores (or whose scores should not count) the
//! confidences are replaced: once by a constant and `n_random_runs` times by
//! seeded uniform draws. The reported mAP_nc is the mean over all those runs
//! and the spread is reported alongside. F1 needs no ranking at all.
//!
//! For conventional detectors, [`sweep_thresholds`] drops low-confidence
//! outputs at each grid threshold before scoring, which is how their best
//! mAP_nc / mF1 is found.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::canonical_cmp;
use crate::geometry::{iou, QuadBox};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{0} predictions carry no confidence; threshold sweeps need scored detections")]
    MissingConfidence(usize),
}

/// One object, either predicted or ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub category: String,
    #[serde(rename = "box")]
    pub quad: QuadBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    /// Only meaningful on ground truth.
    #[serde(default)]
    pub difficult: bool,
}

impl Detection {
    pub fn new(image_id: impl Into<String>, category: impl Into<String>, quad: QuadBox) -> Self {
        Self {
            image_id: image_id.into(),
            category: category.into(),
            quad,
            confidence: None,
            difficult: false,
        }
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = Some(confidence);
        self
    }

    pub fn with_difficult(mut self, difficult: bool) -> Self {
        self.difficult = difficult;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    /// Mean of the interpolated precision at recall 0, 0.1, …, 1.0.
    #[default]
    Voc11,
    /// Area under the monotone precision envelope.
    AllPoints,
}

impl std::str::FromStr for Interpolation {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "voc11" => Ok(Self::Voc11),
            "allpoints" => Ok(Self::AllPoints),
            _ => Err(MetricsError::InvalidConfig(format!(
                "unknown interpolation {s:?} (expected voc11 or allpoints)"
            ))),
        }
    }
}

/// Default sweep grid: 0.05, 0.10, …, 0.95.
pub fn default_sweep_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub interpolation: Interpolation,
    pub n_random_runs: usize,
    pub base_seed: u64,
    pub constant_value: f64,
    pub sweep_grid: Vec<f64>,
    /// Evaluate classes and runs on the rayon pool. Results are identical
    /// either way.
    #[serde(skip)]
    pub parallel: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            interpolation: Interpolation::Voc11,
            n_random_runs: 10,
            base_seed: 0,
            constant_value: 1.0,
            sweep_grid: default_sweep_grid(),
            parallel: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let bad = |msg: String| Err(MetricsError::InvalidConfig(msg));
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return bad(format!("iou threshold {} not in (0, 1)", self.iou_threshold));
        }
        if self.n_random_runs < 1 {
            return bad("need at least one random run".into());
        }
        if !self.constant_value.is_finite() {
            return bad(format!("constant {} is not finite", self.constant_value));
        }
        if self.sweep_grid.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return bad("sweep thresholds must lie in (0, 1)".into());
        }
        if self.sweep_grid.windows(2).any(|w| w[0] >= w[1]) {
            return bad("sweep grid must be strictly increasing".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchLabel {
    Tp,
    Fp,
    /// Matched a difficult ground truth; counts neither way.
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMatch {
    pub labels: Vec<MatchLabel>,
    pub gt_matched: Vec<bool>,
}

/// Greedy one-to-one matching of one class in one image.
///
/// `preds` must already be in evaluation order. Each prediction takes the
/// best-overlapping ground truth among the still-unmatched ones (difficult
/// ground truths are never used up). Ties in IoU go to the lower index.
pub fn match_class(preds: &[Detection], gts: &[Detection], iou_threshold: f64) -> ClassMatch {
    let candidates: Vec<Vec<(usize, f64)>> = preds
        .iter()
        .map(|p| {
            gts.iter()
                .enumerate()
                .map(|(j, g)| (j, iou(&p.quad, &g.quad)))
                .filter(|(_, v)| *v > 0.0)
                .collect()
        })
        .collect();
    let difficult: Vec<bool> = gts.iter().map(|g| g.difficult).collect();
    let order: Vec<usize> = (0..preds.len()).collect();
    let candidates: Vec<&[(usize, f64)]> = candidates.iter().map(Vec::as_slice).collect();
    let mut gt_matched = vec![false; gts.len()];
    let labels = greedy_match(&order, &candidates, &difficult, &mut gt_matched, iou_threshold);
    ClassMatch { labels, gt_matched }
}

fn greedy_match(
    order: &[usize],
    candidates: &[&[(usize, f64)]],
    difficult: &[bool],
    matched: &mut [bool],
    iou_threshold: f64,
) -> Vec<MatchLabel> {
    order
        .iter()
        .map(|&i| {
            let mut best: Option<(usize, f64)> = None;
            for &(j, v) in candidates[i] {
                if matched[j] && !difficult[j] {
                    continue;
                }
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, v)) if v >= iou_threshold => {
                    if difficult[j] {
                        MatchLabel::Ignored
                    } else {
                        matched[j] = true;
                        MatchLabel::Tp
                    }
                }
                _ => MatchLabel::Fp,
            }
        })
        .collect()
}

/// AP of one class from labels in descending-score order.
///
/// Returns `None` when the class has neither positives nor counted
/// predictions, so it can be left out of the mean. Predictions without any
/// positives score 0.
pub fn average_precision(labels: &[MatchLabel], n_positives: usize, interpolation: Interpolation) -> Option<f64> {
    let counted: Vec<bool> = labels
        .iter()
        .filter(|l| **l != MatchLabel::Ignored)
        .map(|l| *l == MatchLabel::Tp)
        .collect();
    if n_positives == 0 {
        return (!counted.is_empty()).then_some(0.0);
    }
    let npos = n_positives as f64;
    let mut recall = Vec::with_capacity(counted.len());
    let mut precision = Vec::with_capacity(counted.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for is_tp in counted {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / npos);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    let ap = match interpolation {
        Interpolation::Voc11 => {
            (0..=10)
                .map(|k| {
                    let anchor = k as f64 / 10.0;
                    recall
                        .iter()
                        .zip(&precision)
                        .filter(|(r, _)| **r >= anchor)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
        Interpolation::AllPoints => {
            let mut mrec = Vec::with_capacity(recall.len() + 2);
            mrec.push(0.0);
            mrec.extend_from_slice(&recall);
            mrec.push(1.0);
            let mut mpre = Vec::with_capacity(precision.len() + 2);
            mpre.push(0.0);
            mpre.extend_from_slice(&precision);
            mpre.push(0.0);
            for i in (0..mpre.len() - 1).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            (1..mrec.len())
                .filter(|&i| mrec[i] != mrec[i - 1])
                .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
                .sum()
        }
    };
    Some(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Random,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub kind: RunKind,
    /// RNG seed of a random run.
    pub seed: Option<u64>,
    pub value: f64,
    pub per_class_ap: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapNcReport {
    /// Random runs first, constant run last.
    pub runs: Vec<RunResult>,
    pub mean: f64,
    /// Population standard deviation over all runs.
    pub std: f64,
    /// Per-class AP averaged over runs.
    pub per_class_ap: BTreeMap<String, f64>,
}

impl MapNcReport {
    /// Mean and population std of the random runs alone.
    pub fn random_stats(&self) -> (f64, f64) {
        let values: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.kind == RunKind::Random)
            .map(|r| r.value)
            .collect();
        mean_std(&values)
    }

    pub fn constant_value(&self) -> Option<f64> {
        self.runs.iter().find(|r| r.kind == RunKind::Constant).map(|r| r.value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub ignored: usize,
    /// Non-difficult ground truths.
    pub n_gt: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: ClassCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub per_class: BTreeMap<String, ClassF1>,
    pub mf1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_ap: BTreeMap<String, f64>,
    pub map_nc_mean: f64,
    pub map_nc_std: f64,
    pub map_nc_runs: Vec<RunResult>,
    pub per_class_f1: BTreeMap<String, f64>,
    pub mf1: f64,
    pub counts: BTreeMap<String, ClassCounts>,
}

impl MetricsReport {
    pub fn from_parts(map: MapNcReport, f1: F1Report) -> Self {
        Self {
            per_class_ap: map.per_class_ap,
            map_nc_mean: map.mean,
            map_nc_std: map.std,
            map_nc_runs: map.runs,
            per_class_f1: f1.per_class.iter().map(|(k, v)| (k.clone(), v.f1)).collect(),
            mf1: f1.mf1,
            counts: f1.per_class.into_iter().map(|(k, v)| (k, v.counts)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub map_nc_mean: f64,
    pub map_nc_std: f64,
    pub mf1: f64,
    /// Predictions surviving the threshold.
    pub n_predictions: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestPoint {
    pub threshold: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub best_map_nc: Option<BestPoint>,
    pub best_mf1: Option<BestPoint>,
}

pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn macro_mean<'a>(values: impl IntoIterator<Item = &'a f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().copied().collect();
    mean_std(&v).0
}

fn par_map<T: Sync, R: Send>(items: &[T], parallel: bool, f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    if parallel {
        items.par_iter().map(f).collect()
    } else {
        items.iter().map(f).collect()
    }
}

struct ClassData {
    name: String,
    n_pos: usize,
    difficult: Vec<bool>,
    /// Predictions in canonical order.
    preds: Vec<PredEntry>,
}

struct PredEntry {
    confidence: Option<f64>,
    /// Position in the global canonical order.
    ordinal: usize,
    /// Same-image ground truths with positive overlap.
    candidates: Vec<(usize, f64)>,
}

/// Predictions and ground truths grouped per class, with overlaps computed
/// once so that repeated runs and sweep thresholds only redo matching.
pub struct Evaluation {
    classes: Vec<ClassData>,
    n_preds: usize,
    iou_threshold: f64,
}

impl Evaluation {
    pub fn new(preds: &[Detection], gts: &[Detection], iou_threshold: f64, parallel: bool) -> Self {
        let mut sorted: Vec<&Detection> = preds.iter().collect();
        sorted.sort_by(|a, b| canonical_cmp(a, b));

        let mut names: Vec<&str> = gts.iter().chain(preds).map(|d| d.category.as_str()).collect();
        names.sort_unstable();
        names.dedup();

        let mut class_preds: BTreeMap<&str, Vec<(usize, &Detection)>> = BTreeMap::new();
        for (ordinal, d) in sorted.into_iter().enumerate() {
            class_preds.entry(&d.category).or_default().push((ordinal, d));
        }
        let mut class_gts: BTreeMap<&str, Vec<&Detection>> = BTreeMap::new();
        for g in gts {
            class_gts.entry(&g.category).or_default().push(g);
        }

        let classes = par_map(&names, parallel, |name| {
            let gts = class_gts.get(name).map(Vec::as_slice).unwrap_or(&[]);
            let mut by_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (j, g) in gts.iter().enumerate() {
                by_image.entry(&g.image_id).or_default().push(j);
            }
            let preds = class_preds
                .get(name)
                .map(|ps| {
                    ps.iter()
                        .map(|(ordinal, p)| PredEntry {
                            confidence: p.confidence,
                            ordinal: *ordinal,
                            candidates: by_image
                                .get(p.image_id.as_str())
                                .map(|idx| {
                                    idx.iter()
                                        .map(|&j| (j, iou(&p.quad, &gts[j].quad)))
                                        .filter(|(_, v)| *v > 0.0)
                                        .collect()
                                })
                                .unwrap_or_default(),
                        })
                        .collect()
                })
                .unwrap_or_default();
            ClassData {
                name: name.to_string(),
                n_pos: gts.iter().filter(|g| !g.difficult).count(),
                difficult: gts.iter().map(|g| g.difficult).collect(),
                preds,
            }
        });
        Self {
            classes,
            n_preds: preds.len(),
            iou_threshold,
        }
    }

    /// Predictions whose confidence is absent.
    pub fn unscored(&self) -> usize {
        self.classes
            .iter()
            .flat_map(|c| &c.preds)
            .filter(|p| p.confidence.is_none())
            .count()
    }

    fn keep_all(&self) -> Vec<bool> {
        vec![true; self.n_preds]
    }

    fn keep_above(&self, threshold: f64) -> Vec<bool> {
        let mut keep = vec![false; self.n_preds];
        for p in self.classes.iter().flat_map(|c| &c.preds) {
            keep[p.ordinal] = p.confidence.is_some_and(|c| c >= threshold);
        }
        keep
    }

    /// Labels of one class after ordering its kept predictions by descending
    /// score, ties by canonical order.
    fn class_labels(&self, class: &ClassData, keep: &[bool], score: impl Fn(&PredEntry) -> f64) -> Vec<MatchLabel> {
        let mut order: Vec<(usize, f64)> = class
            .preds
            .iter()
            .enumerate()
            .filter(|(_, p)| keep[p.ordinal])
            .map(|(i, p)| (i, score(p)))
            .collect();
        order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let order: Vec<usize> = order.into_iter().map(|(i, _)| i).collect();
        let candidates: Vec<&[(usize, f64)]> = class.preds.iter().map(|p| p.candidates.as_slice()).collect();
        let mut matched = vec![false; class.difficult.len()];
        greedy_match(&order, &candidates, &class.difficult, &mut matched, self.iou_threshold)
    }

    fn run(&self, keep: &[bool], scores: &[f64], config: &EvalConfig) -> BTreeMap<String, f64> {
        let aps = par_map(&self.classes, config.parallel, |class| {
            let labels = self.class_labels(class, keep, |p| scores[p.ordinal]);
            average_precision(&labels, class.n_pos, config.interpolation)
        });
        self.classes
            .iter()
            .zip(aps)
            .filter_map(|(c, ap)| ap.map(|v| (c.name.clone(), v)))
            .collect()
    }

    /// Random draws for the kept predictions, indexed by global ordinal.
    /// Draw `k` of a run goes to the `k`-th kept prediction in canonical order.
    fn random_scores(&self, keep: &[bool], seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        keep.iter()
            .map(|k| if *k { rng.random::<f64>() } else { 0.0 })
            .collect()
    }

    fn map_nc_masked(&self, keep: &[bool], config: &EvalConfig) -> MapNcReport {
        let mut plan: Vec<(RunKind, Option<u64>)> = (0..config.n_random_runs as u64)
            .map(|i| (RunKind::Random, Some(config.base_seed.wrapping_add(i))))
            .collect();
        plan.push((RunKind::Constant, None));

        let runs = par_map(&plan, config.parallel, |(kind, seed)| {
            let scores = match seed {
                Some(s) => self.random_scores(keep, *s),
                None => vec![config.constant_value; self.n_preds],
            };
            let per_class_ap = self.run(keep, &scores, config);
            RunResult {
                kind: *kind,
                seed: *seed,
                value: macro_mean(per_class_ap.values()),
                per_class_ap,
            }
        });
        let values: Vec<f64> = runs.iter().map(|r| r.value).collect();
        let (mean, std) = mean_std(&values);
        let mut per_class_ap = BTreeMap::new();
        for name in runs.iter().flat_map(|r| r.per_class_ap.keys()) {
            if per_class_ap.contains_key(name) {
                continue;
            }
            let v: Vec<f64> = runs.iter().filter_map(|r| r.per_class_ap.get(name).copied()).collect();
            per_class_ap.insert(name.clone(), mean_std(&v).0);
        }
        MapNcReport {
            runs,
            mean,
            std,
            per_class_ap,
        }
    }

    fn f1_masked(&self, keep: &[bool], parallel: bool) -> F1Report {
        let rows = par_map(&self.classes, parallel, |class| {
            let labels = self.class_labels(class, keep, |p| p.confidence.unwrap_or(1.0));
            let mut counts = ClassCounts {
                n_gt: class.n_pos,
                ..Default::default()
            };
            for l in labels {
                match l {
                    MatchLabel::Tp => counts.tp += 1,
                    MatchLabel::Fp => counts.fp += 1,
                    MatchLabel::Ignored => counts.ignored += 1,
                }
            }
            counts.fn_ = class.n_pos - counts.tp;
            if counts.n_gt == 0 && counts.tp + counts.fp == 0 {
                return None;
            }
            Some((class.name.clone(), class_f1(counts)))
        });
        let per_class: BTreeMap<String, ClassF1> = rows.into_iter().flatten().collect();
        let mf1 = macro_mean(per_class.values().map(|c| &c.f1));
        F1Report { per_class, mf1 }
    }

    pub fn map_nc(&self, config: &EvalConfig) -> MapNcReport {
        self.map_nc_masked(&self.keep_all(), config)
    }

    pub fn f1_scores(&self, parallel: bool) -> F1Report {
        self.f1_masked(&self.keep_all(), parallel)
    }

    pub fn sweep(&self, config: &EvalConfig) -> Result<SweepResult, MetricsError> {
        let missing = self.unscored();
        if missing > 0 {
            return Err(MetricsError::MissingConfidence(missing));
        }
        let points: Vec<SweepPoint> = config
            .sweep_grid
            .iter()
            .map(|&t| {
                let keep = self.keep_above(t);
                let map = self.map_nc_masked(&keep, config);
                let f1 = self.f1_masked(&keep, config.parallel);
                SweepPoint {
                    threshold: t,
                    map_nc_mean: map.mean,
                    map_nc_std: map.std,
                    mf1: f1.mf1,
                    n_predictions: keep.iter().filter(|k| **k).count(),
                }
            })
            .collect();
        let best = |f: fn(&SweepPoint) -> f64| {
            points.iter().fold(None, |acc: Option<BestPoint>, p| match acc {
                Some(b) if b.value >= f(p) => Some(b),
                _ => Some(BestPoint {
                    threshold: p.threshold,
                    value: f(p),
                }),
            })
        };
        Ok(SweepResult {
            best_map_nc: best(|p| p.map_nc_mean),
            best_mf1: best(|p| p.mf1),
            points,
        })
    }
}

fn class_f1(counts: ClassCounts) -> ClassF1 {
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(counts.tp, counts.tp + counts.fp);
    let recall = ratio(counts.tp, counts.n_gt);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    ClassF1 {
        precision,
        recall,
        f1,
        counts,
    }
}

/// mAP with substituted confidences; see the module docs.
pub fn map_nc(preds: &[Detection], gts: &[Detection], config: &EvalConfig) -> Result<MapNcReport, MetricsError> {
    config.validate()?;
    Ok(Evaluation::new(preds, gts, config.iou_threshold, config.parallel).map_nc(config))
}

pub fn f1_scores(preds: &[Detection], gts: &[Detection], iou_threshold: f64) -> F1Report {
    Evaluation::new(preds, gts, iou_threshold, true).f1_scores(true)
}

pub fn sweep_thresholds(
    preds: &[Detection],
    gts: &[Detection],
    config: &EvalConfig,
) -> Result<SweepResult, MetricsError> {
    config.validate()?;
    Evaluation::new(preds, gts, config.iou_threshold, config.parallel).sweep(config)
}

/// mAP_nc and F1 in one report.
pub fn evaluate(preds: &[Detection], gts: &[Detection], config: &EvalConfig) -> Result<MetricsReport, MetricsError> {
    config.validate()?;
    let eval = Evaluation::new(preds, gts, config.iou_threshold, config.parallel);
    Ok(MetricsReport::from_parts(
        eval.map_nc(config),
        eval.f1_scores(config.parallel),
    ))
}
