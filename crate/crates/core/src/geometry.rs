//! Oriented quadrilateral geometry in image coordinates (y grows downward).
//!
//! Boxes are stored in a canonical form: clockwise on screen, starting at the
//! vertex with the smallest `y` (ties broken by smallest `x`). Intersections are
//! computed exactly by clipping one convex polygon against the half-planes of
//! the other.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Vertices closer than this are merged in clipping output.
const DEDUP_EPS: f64 = 1e-9;

/// Relative tolerance under which a quad counts as zero-area.
const DEGENERATE_REL_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    fn sub(self, other: Point) -> Point {
        Point::new(self.x - other.x, self.y - other.y)
    }

    fn cross(self, other: Point) -> f64 {
        self.x * other.y - self.y * other.x
    }

    fn raster_cmp(&self, other: &Point) -> Ordering {
        self.y.total_cmp(&other.y).then_with(|| self.x.total_cmp(&other.x))
    }
}

/// Twice the signed shoelace area. Positive means clockwise on screen.
fn signed_area2(pts: &[Point]) -> f64 {
    let n = pts.len();
    (0..n).map(|i| pts[i].cross(pts[(i + 1) % n])).sum()
}

/// Unsigned polygon area (pixels²). Returns 0 for fewer than three vertices.
pub fn shoelace_area(pts: &[Point]) -> f64 {
    if pts.len() < 3 {
        return 0.0;
    }
    (signed_area2(pts) / 2.0).abs()
}

fn extent2(pts: &[Point]) -> f64 {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in pts {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let (w, h) = (x1 - x0, y1 - y0);
    w * w + h * h
}

fn is_degenerate(pts: &[Point]) -> bool {
    let a2 = signed_area2(pts).abs();
    a2 == 0.0 || a2 <= DEGENERATE_REL_EPS * extent2(pts)
}

/// Proper crossing of segments `p1p2` and `q1q2` (shared endpoints and
/// collinear touching do not count).
fn segments_cross(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = p2.sub(p1).cross(q1.sub(p1));
    let d2 = p2.sub(p1).cross(q2.sub(p1));
    let d3 = q2.sub(q1).cross(p1.sub(q1));
    let d4 = q2.sub(q1).cross(p2.sub(q1));
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

fn is_self_intersecting(v: &[Point; 4]) -> bool {
    segments_cross(v[0], v[1], v[2], v[3]) || segments_cross(v[1], v[2], v[3], v[0])
}

fn sort_by_angle(v: &mut [Point; 4]) {
    let cx = v.iter().map(|p| p.x).sum::<f64>() / 4.0;
    let cy = v.iter().map(|p| p.y).sum::<f64>() / 4.0;
    v.sort_by(|a, b| {
        let ta = (a.y - cy).atan2(a.x - cx);
        let tb = (b.y - cy).atan2(b.x - cx);
        ta.total_cmp(&tb).then_with(|| a.raster_cmp(b))
    });
}

fn rotate_to_start(v: &[Point; 4]) -> [Point; 4] {
    let start = (0..4)
        .min_by(|&i, &j| v[i].raster_cmp(&v[j]).then(i.cmp(&j)))
        .unwrap_or(0);
    std::array::from_fn(|k| v[(start + k) % 4])
}

fn lex_cmp(a: &[Point; 4], b: &[Point; 4]) -> Ordering {
    a.iter()
        .zip(b.iter())
        .map(|(p, q)| p.raster_cmp(q))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// A quadrilateral in canonical vertex order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[Point; 4]", into = "[Point; 4]")]
pub struct QuadBox {
    vertices: [Point; 4],
}

impl TryFrom<[Point; 4]> for QuadBox {
    type Error = GeometryError;

    fn try_from(v: [Point; 4]) -> Result<Self, Self::Error> {
        QuadBox::canonicalize(v)
    }
}

impl From<QuadBox> for [Point; 4] {
    fn from(q: QuadBox) -> Self {
        q.vertices
    }
}

impl QuadBox {
    /// Brings four vertices in any cyclic order or winding into canonical form.
    ///
    /// Self-intersecting ("bowtie") input is reordered by angle around the
    /// centroid first. Zero-area quads have no winding; among the two
    /// traversal directions the lexicographically smaller one is kept, so the
    /// result is still independent of input rotation and direction.
    pub fn canonicalize(vertices: [Point; 4]) -> Result<Self, GeometryError> {
        if let Some(p) = vertices.iter().find(|p| !p.is_finite()) {
            return Err(GeometryError::InvalidGeometry(format!(
                "non-finite vertex ({}, {})",
                p.x, p.y
            )));
        }
        let mut v = vertices;
        if is_self_intersecting(&v) {
            sort_by_angle(&mut v);
        }
        let reversed = [v[0], v[3], v[2], v[1]];
        let vertices = if is_degenerate(&v) {
            let fwd = rotate_to_start(&v);
            let rev = rotate_to_start(&reversed);
            if lex_cmp(&rev, &fwd).is_lt() {
                rev
            } else {
                fwd
            }
        } else if signed_area2(&v) < 0.0 {
            rotate_to_start(&reversed)
        } else {
            rotate_to_start(&v)
        };
        Ok(Self { vertices })
    }

    /// Builds a box from `[x1, y1, x2, y2, x3, y3, x4, y4]`.
    pub fn from_flat(coords: [f64; 8]) -> Result<Self, GeometryError> {
        Self::canonicalize(std::array::from_fn(|i| Point::new(coords[2 * i], coords[2 * i + 1])))
    }

    /// Wraps vertices that are already known to be canonical.
    pub(crate) fn from_canonical(vertices: [Point; 4]) -> Self {
        Self { vertices }
    }

    pub fn vertices(&self) -> &[Point; 4] {
        &self.vertices
    }

    pub fn to_flat(&self) -> [f64; 8] {
        std::array::from_fn(|i| {
            let p = self.vertices[i / 2];
            if i % 2 == 0 {
                p.x
            } else {
                p.y
            }
        })
    }

    pub fn area(&self) -> f64 {
        shoelace_area(&self.vertices)
    }

    pub fn is_degenerate(&self) -> bool {
        is_degenerate(&self.vertices)
    }

    /// True when every turn has the same orientation (collinear turns allowed).
    pub fn is_convex(&self) -> bool {
        is_convex_ring(&self.vertices)
    }

    /// Total order used for deterministic tie-breaking: starting vertex in
    /// raster order, then the remaining coordinates.
    pub fn raster_cmp(&self, other: &QuadBox) -> Ordering {
        lex_cmp(&self.vertices, &other.vertices)
    }
}

fn is_convex_ring(pts: &[Point]) -> bool {
    let n = pts.len();
    let mut sign = 0.0f64;
    for i in 0..n {
        let a = pts[i];
        let b = pts[(i + 1) % n];
        let c = pts[(i + 2) % n];
        let turn = b.sub(a).cross(c.sub(b));
        if turn != 0.0 {
            if sign != 0.0 && turn.signum() != sign {
                return false;
            }
            sign = turn.signum();
        }
    }
    true
}

/// Convex polygon with clockwise (screen) winding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexPolygon {
    vertices: Vec<Point>,
}

impl ConvexPolygon {
    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        shoelace_area(&self.vertices)
    }
}

impl From<QuadBox> for ConvexPolygon {
    fn from(q: QuadBox) -> Self {
        Self {
            vertices: q.vertices.to_vec(),
        }
    }
}

fn clip_half_plane(subject: &[Point], a: Point, b: Point) -> Vec<Point> {
    let edge = b.sub(a);
    let side = |p: Point| edge.cross(p.sub(a));
    let mut out = Vec::with_capacity(subject.len() + 1);
    for (i, &cur) in subject.iter().enumerate() {
        let prev = subject[(i + subject.len() - 1) % subject.len()];
        let (sc, sp) = (side(cur), side(prev));
        if sc >= 0.0 {
            if sp < 0.0 {
                out.push(intersect(prev, cur, sp, sc));
            }
            out.push(cur);
        } else if sp >= 0.0 {
            out.push(intersect(prev, cur, sp, sc));
        }
    }
    out
}

fn intersect(p: Point, q: Point, sp: f64, sq: f64) -> Point {
    let t = sp / (sp - sq);
    Point::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
}

fn dedup_ring(mut pts: Vec<Point>) -> Vec<Point> {
    let close = |a: &Point, b: &Point| (a.x - b.x).abs() <= DEDUP_EPS && (a.y - b.y).abs() <= DEDUP_EPS;
    pts.dedup_by(|b, a| close(a, b));
    while pts.len() > 1 && close(&pts[0], &pts[pts.len() - 1]) {
        pts.pop();
    }
    pts
}

fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut poly = subject.to_vec();
    for i in 0..clip.len() {
        if poly.is_empty() {
            break;
        }
        poly = clip_half_plane(&poly, clip[i], clip[(i + 1) % clip.len()]);
    }
    dedup_ring(poly)
}

/// Intersection of two convex boxes, `None` when they do not overlap in a
/// region of positive area.
pub fn convex_intersection(a: &QuadBox, b: &QuadBox) -> Result<Option<ConvexPolygon>, GeometryError> {
    for q in [a, b] {
        if !q.is_convex() {
            return Err(GeometryError::InvalidGeometry(format!(
                "non-convex quadrilateral {:?}",
                q.to_flat()
            )));
        }
    }
    if a.is_degenerate() || b.is_degenerate() {
        return Ok(None);
    }
    // Fixed operand order keeps the result symmetric in (a, b).
    let (s, c) = if a.raster_cmp(b).is_le() { (a, b) } else { (b, a) };
    let poly = clip_convex(&s.vertices, &c.vertices);
    if poly.len() < 3 || shoelace_area(&poly) == 0.0 {
        return Ok(None);
    }
    Ok(Some(ConvexPolygon { vertices: poly }))
}

fn convex_hull(pts: &[Point; 4]) -> Vec<Point> {
    let mut sorted = pts.to_vec();
    sorted.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    let mut hull: Vec<Point> = Vec::with_capacity(8);
    for pass in 0..2 {
        let start = hull.len();
        for &p in &sorted {
            while hull.len() >= start + 2 {
                let (o, a) = (hull[hull.len() - 2], hull[hull.len() - 1]);
                if a.sub(o).cross(p.sub(o)) <= 0.0 {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(p);
        }
        hull.pop();
        if pass == 0 {
            sorted.reverse();
        }
    }
    hull
}

fn convex_ring(q: &QuadBox) -> Vec<Point> {
    if q.is_convex() {
        q.vertices.to_vec()
    } else {
        convex_hull(&q.vertices)
    }
}

/// Intersection over union of two boxes, in `[0, 1]`.
///
/// Zero-area boxes score 0 against everything. Concave quads are replaced by
/// their convex hull so that evaluation stays total.
pub fn iou(a: &QuadBox, b: &QuadBox) -> f64 {
    if a.is_degenerate() || b.is_degenerate() {
        return 0.0;
    }
    let (s, c) = if a.raster_cmp(b).is_le() { (a, b) } else { (b, a) };
    let (ring_s, ring_c) = (convex_ring(s), convex_ring(c));
    let (area_s, area_c) = (shoelace_area(&ring_s), shoelace_area(&ring_c));
    let inter = shoelace_area(&clip_convex(&ring_s, &ring_c));
    let union = area_s + area_c - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}
