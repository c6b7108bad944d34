//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use obbtext_core::metrics::{Interpolation, MatchLabel};
use obbtext_core::{Detection, Point, QuadBox};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rotated_rect(cx: f64, cy: f64, w: f64, h: f64, angle: f64) -> QuadBox {
    let (s, c) = angle.sin_cos();
    let corners = [(-w, -h), (w, -h), (w, h), (-w, h)].map(|(dx, dy)| {
        let (dx, dy) = (dx / 2.0, dy / 2.0);
        Point::new(cx + dx * c - dy * s, cy + dx * s + dy * c)
    });
    QuadBox::canonicalize(corners).unwrap()
}

/// Random convex quadrilateral inside `[0, extent]²`: either a rotated
/// rectangle or the hull of four random points (retried until all four are
/// hull vertices).
pub fn random_convex_quad(rng: &mut ChaCha8Rng, center: (f64, f64), scale: f64) -> QuadBox {
    if rng.random_bool(0.5) {
        return rotated_rect(
            center.0,
            center.1,
            rng.random_range(0.2..1.0) * scale,
            rng.random_range(0.2..1.0) * scale,
            rng.random_range(0.0..std::f64::consts::PI),
        );
    }
    loop {
        let mut pts: Vec<(f64, f64, f64)> = (0..4)
            .map(|_| {
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                let r = rng.random_range(0.3..1.0) * scale / 2.0;
                (a, center.0 + r * a.cos(), center.1 + r * a.sin())
            })
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let v: [Point; 4] = std::array::from_fn(|i| Point::new(pts[i].1, pts[i].2));
        let q = QuadBox::canonicalize(v).unwrap();
        if q.is_convex() && q.area() > 1e-3 * scale * scale {
            return q;
        }
    }
}

fn contains(q: &QuadBox, x: f64, y: f64) -> bool {
    let v = q.vertices();
    let mut sign = 0.0f64;
    for i in 0..4 {
        let (a, b) = (v[i], v[(i + 1) % 4]);
        let cross = (b.x - a.x) * (y - a.y) - (b.y - a.y) * (x - a.x);
        if cross != 0.0 {
            if sign != 0.0 && cross.signum() != sign {
                return false;
            }
            sign = cross.signum();
        }
    }
    true
}

/// IoU estimated by uniform sampling over the joint bounding box.
pub fn monte_carlo_iou(a: &QuadBox, b: &QuadBox, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<Point> = a.vertices().iter().chain(b.vertices()).copied().collect();
    let x0 = all.iter().map(|p| p.x).fold(f64::MAX, f64::min);
    let x1 = all.iter().map(|p| p.x).fold(f64::MIN, f64::max);
    let y0 = all.iter().map(|p| p.y).fold(f64::MAX, f64::min);
    let y1 = all.iter().map(|p| p.y).fold(f64::MIN, f64::max);
    let (mut inter, mut union) = (0usize, 0usize);
    for _ in 0..samples {
        let x = rng.random_range(x0..x1);
        let y = rng.random_range(y0..y1);
        let (ia, ib) = (contains(a, x, y), contains(b, x, y));
        inter += usize::from(ia && ib);
        union += usize::from(ia || ib);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// AP by explicit enumeration of the precision/recall points, written
/// independently of the library routine.
pub fn brute_force_ap(labels: &[MatchLabel], n_pos: usize, interp: Interpolation) -> Option<f64> {
    let kept: Vec<bool> = labels
        .iter()
        .filter(|l| **l != MatchLabel::Ignored)
        .map(|l| *l == MatchLabel::Tp)
        .collect();
    if n_pos == 0 {
        return if kept.is_empty() { None } else { Some(0.0) };
    }
    // (recall, precision) after each prefix
    let points: Vec<(f64, f64)> = (1..=kept.len())
        .map(|k| {
            let tp = kept[..k].iter().filter(|t| **t).count() as f64;
            (tp / n_pos as f64, tp / k as f64)
        })
        .collect();
    let best_at = |r: f64| points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0f64, f64::max);
    Some(match interp {
        Interpolation::Voc11 => (0..=10).map(|k| best_at(k as f64 / 10.0)).sum::<f64>() / 11.0,
        Interpolation::AllPoints => {
            let mut recalls: Vec<f64> = points.iter().map(|p| p.0).collect();
            recalls.push(0.0);
            recalls.sort_by(f64::total_cmp);
            recalls.dedup();
            recalls.windows(2).map(|w| (w[1] - w[0]) * best_at(w[1])).sum()
        }
    })
}

pub struct Fixture {
    pub gts: Vec<Detection>,
    pub preds: Vec<Detection>,
}

pub struct DetectorModel {
    pub n_images: usize,
    pub n_classes: usize,
    pub objects_per_image: std::ops::Range<usize>,
    /// Probability that a ground truth is found at all.
    pub recall: f64,
    /// Background false positives per image.
    pub fps_per_image: usize,
    /// Fraction of background false positives with detector-like high scores.
    pub hard_fp_fraction: f64,
    /// Near-duplicate detections of found objects.
    pub duplicate_rate: f64,
    /// Probability that a found object is also reported, with a similar
    /// score, under a wrong class.
    pub confusion_rate: f64,
    /// True-positive scores are uniform on `[tp_floor, tp_knee)`, except a
    /// `tp_tail` fraction uniform on `[tp_knee, 1)`; all scaled by the class
    /// quality.
    pub tp_floor: f64,
    pub tp_knee: f64,
    pub tp_tail: f64,
    /// Upper score of ordinary background false positives.
    pub background_max: f64,
    /// Lower end of the uniform score range of hard false positives (the
    /// upper end is the class quality).
    pub hard_fp_min: f64,
    /// Zipf exponent of the class frequencies (0 = uniform).
    pub class_skew: f64,
    /// Confidence scale of the rarest class relative to the most frequent
    /// one; rarer classes are detected less confidently.
    pub rare_confidence: f64,
}

impl Default for DetectorModel {
    fn default() -> Self {
        Self {
            n_images: 60,
            n_classes: 6,
            objects_per_image: 10..30,
            recall: 0.85,
            fps_per_image: 6,
            hard_fp_fraction: 0.1,
            duplicate_rate: 0.0,
            confusion_rate: 0.0,
            tp_floor: 0.1,
            tp_knee: 0.5,
            tp_tail: 0.6,
            background_max: 0.3,
            hard_fp_min: 0.3,
            class_skew: 0.0,
            rare_confidence: 1.0,
        }
    }
}

pub fn class_name(i: usize) -> String {
    format!("class-{i:02}")
}

/// Synthetic ground truth plus a simulated conventional detector whose
/// true positives tend to score high and whose false positives mostly score
/// low, as after NMS.
pub fn detector_fixture(model: &DetectorModel, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (0..model.n_classes)
        .map(|c| 1.0 / ((c + 1) as f64).powf(model.class_skew))
        .collect();
    let total: f64 = weights.iter().sum();
    let pick_class = |rng: &mut ChaCha8Rng| {
        let mut u = rng.random::<f64>() * total;
        for (c, w) in weights.iter().enumerate() {
            if u < *w {
                return c;
            }
            u -= w;
        }
        model.n_classes - 1
    };
    let quality = |c: usize| {
        if model.n_classes == 1 {
            1.0
        } else {
            1.0 - (1.0 - model.rare_confidence) * c as f64 / (model.n_classes - 1) as f64
        }
    };
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    for img in 0..model.n_images {
        let image_id = format!("img{img:04}");
        let n = rng.random_range(model.objects_per_image.clone());
        for _ in 0..n {
            let c = pick_class(&mut rng);
            let cls = class_name(c);
            let (cx, cy) = (rng.random_range(50.0..974.0), rng.random_range(50.0..974.0));
            let (w, h) = (rng.random_range(15.0..60.0), rng.random_range(10.0..40.0));
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let gt = rotated_rect(cx, cy, w, h, angle);
            gts.push(Detection::new(image_id.clone(), cls.clone(), gt));
            if rng.random_bool(model.recall) {
                let copies = 1 + usize::from(rng.random_bool(model.duplicate_rate));
                for _ in 0..copies {
                    let jitter = rng.random_range(0.0..0.08);
                    let q = rotated_rect(
                        cx + jitter * w * rng.random_range(-1.0..1.0),
                        cy + jitter * h * rng.random_range(-1.0..1.0),
                        w * (1.0 + rng.random_range(-jitter..jitter)),
                        h * (1.0 + rng.random_range(-jitter..jitter)),
                        angle + rng.random_range(-0.05..0.05),
                    );
                    let conf: f64 = quality(c)
                        * if rng.random_bool(model.tp_tail) {
                            rng.random_range(model.tp_knee..1.0)
                        } else {
                            rng.random_range(model.tp_floor..model.tp_knee)
                        };
                    preds.push(Detection::new(image_id.clone(), cls.clone(), q).with_confidence(conf));
                    if model.n_classes > 1 && rng.random_bool(model.confusion_rate) {
                        let other = (c + rng.random_range(1..model.n_classes)) % model.n_classes;
                        let conf = conf * rng.random_range(0.8..1.0);
                        preds.push(Detection::new(image_id.clone(), class_name(other), q).with_confidence(conf));
                    }
                }
            }
        }
        for _ in 0..model.fps_per_image {
            let c = pick_class(&mut rng);
            let cls = class_name(c);
            let (cx, cy) = (rng.random_range(50.0..974.0), rng.random_range(50.0..974.0));
            let q = rotated_rect(
                cx,
                cy,
                rng.random_range(15.0..60.0),
                rng.random_range(10.0..40.0),
                rng.random_range(0.0..std::f64::consts::PI),
            );
            let conf: f64 = if rng.random_bool(model.hard_fp_fraction) {
                quality(c) * rng.random_range(model.hard_fp_min..1.0)
            } else {
                model.background_max * rng.random::<f64>().powi(2)
            };
            preds.push(Detection::new(image_id.clone(), cls, q).with_confidence(conf.max(1e-6)));
        }
    }
    Fixture { gts, preds }
}

/// DOTA v1.0 category names.
pub const DOTA_CATEGORIES: [&str; 15] = [
    "plane",
    "ship",
    "storage-tank",
    "baseball-diamond",
    "tennis-court",
    "basketball-court",
    "ground-track-field",
    "harbor",
    "bridge",
    "large-vehicle",
    "small-vehicle",
    "helicopter",
    "roundabout",
    "soccer-ball-field",
    "swimming-pool",
];

/// Writes one DOTA annotation file per image id into `dir`. Images listed
/// in `images` without ground truth get an empty file.
pub fn write_dota_dir(dir: &std::path::Path, images: &[String], gts: &[Detection]) {
    std::fs::create_dir_all(dir).unwrap();
    for image in images {
        let mut text = String::from("imagesource:synthetic\ngsd:null\n");
        for d in gts.iter().filter(|d| &d.image_id == image) {
            let coords: Vec<String> = d.quad.to_flat().iter().map(|v| format!("{v:?}")).collect();
            text.push_str(&format!(
                "{} {} {}\n",
                coords.join(" "),
                d.category,
                u8::from(d.difficult)
            ));
        }
        std::fs::write(dir.join(format!("{image}.txt")), text).unwrap();
    }
}

pub fn image_ids(dets: &[Detection]) -> Vec<String> {
    let mut ids: Vec<String> = dets.iter().map(|d| d.image_id.clone()).collect();
    ids.sort();
    ids.dedup();
    ids
}
