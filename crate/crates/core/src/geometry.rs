//! Rotated-box geometry.
//!
//! Three box representations are used throughout the detector:
//!
//! * [`Quad`]: four ordered vertices, the raw annotation shape.
//! * [`Hbb`]: axis-aligned `{xmin, ymin, xmax, ymax}`.
//! * [`Obb`]: `{cx, cy, w, h, theta}` with `theta` in degrees and
//!   `0 <= theta < 90`. Every rectangle has exactly one such representation.
//!
//! Orientation convention: the corners of an [`Obb`] are the corners of the
//! axis-aligned `w x h` rectangle rotated by the matrix
//! `[[cos t, -sin t], [sin t, cos t]]` about the center. "Counter-clockwise"
//! means a non-negative shoelace area with `x` right and `y` down, which is the
//! clockwise-on-screen order DOTA label files use.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Quads with area at or below this (px^2) are rejected as degenerate.
pub const AREA_EPSILON: f64 = 1e-6;

/// Angles this close to 90 degrees collapse onto 0 with `w`/`h` swapped.
const ANGLE_SNAP: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("invalid horizontal box: ({xmin}, {ymin}, {xmax}, {ymax})")]
    InvalidHbb { xmin: f64, ymin: f64, xmax: f64, ymax: f64 },
    #[error("invalid oriented box: w={w}, h={h}, theta={theta}")]
    InvalidObb { w: f64, h: f64, theta: f64 },
    #[error("degenerate polygon with area {area}")]
    DegenerateQuad { area: f64 },
    #[error("quadrilateral edges cross each other")]
    NonSimpleQuad,
    #[error("cannot compare a horizontal box with an oriented box")]
    MixedBoxKinds,
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }
}

/// Shoelace signed area; positive for the counter-clockwise order described
/// in the module docs.
pub fn signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        acc += p.x * q.y - q.x * p.y;
    }
    acc * 0.5
}

/// A simple quadrilateral stored in counter-clockwise order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quad {
    vertices: [Point; 4],
}

impl Quad {
    /// Validates the vertices and reverses them if they wind clockwise.
    pub fn new(vertices: [Point; 4]) -> Result<Self> {
        if vertices.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let [a, b, c, d] = vertices;
        if segments_cross(a, b, c, d) || segments_cross(b, c, d, a) {
            return Err(GeometryError::NonSimpleQuad);
        }
        let mut vertices = vertices;
        if signed_area(&vertices) < 0.0 {
            vertices.reverse();
        }
        Ok(Self { vertices })
    }

    pub fn from_coords(c: [f64; 8]) -> Result<Self> {
        Self::new([
            Point::new(c[0], c[1]),
            Point::new(c[2], c[3]),
            Point::new(c[4], c[5]),
            Point::new(c[6], c[7]),
        ])
    }

    pub fn vertices(&self) -> &[Point; 4] {
        &self.vertices
    }

    pub fn coords(&self) -> [f64; 8] {
        let v = &self.vertices;
        [v[0].x, v[0].y, v[1].x, v[1].y, v[2].x, v[2].y, v[3].x, v[3].y]
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    /// Vertex mean. Equals the rectangle center for quads built from an [`Obb`].
    pub fn center(&self) -> Point {
        let (sx, sy) = self
            .vertices
            .iter()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
        Point::new(sx / 4.0, sy / 4.0)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Quad {
        Quad {
            vertices: self.vertices.map(|p| Point::new(p.x + dx, p.y + dy)),
        }
    }

    /// Rotates every vertex by `degrees` about `origin`. Winding is preserved.
    pub fn rotate_about(&self, origin: Point, degrees: f64) -> Quad {
        let (s, c) = degrees.to_radians().sin_cos();
        Quad {
            vertices: self.vertices.map(|p| {
                let d = p.sub(origin);
                Point::new(origin.x + c * d.x - s * d.y, origin.y + s * d.x + c * d.y)
            }),
        }
    }

    pub fn to_hbb(&self) -> Hbb {
        bounding_hbb(&self.vertices)
    }
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    b.sub(a).cross(c.sub(a))
}

/// True when the open segments `ab` and `cd` cross at a single interior point.
fn segments_cross(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

fn bounding_hbb(points: &[Point]) -> Hbb {
    let mut hbb = Hbb {
        xmin: f64::INFINITY,
        ymin: f64::INFINITY,
        xmax: f64::NEG_INFINITY,
        ymax: f64::NEG_INFINITY,
    };
    for p in points {
        hbb.xmin = hbb.xmin.min(p.x);
        hbb.ymin = hbb.ymin.min(p.y);
        hbb.xmax = hbb.xmax.max(p.x);
        hbb.ymax = hbb.ymax.max(p.y);
    }
    hbb
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hbb {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl Hbb {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        if ![xmin, ymin, xmax, ymax].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if xmin > xmax || ymin > ymax {
            return Err(GeometryError::InvalidHbb { xmin, ymin, xmax, ymax });
        }
        Ok(Self { xmin, ymin, xmax, ymax })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            xmin: cx - w / 2.0,
            ymin: cy - h / 2.0,
            xmax: cx + w / 2.0,
            ymax: cy + h / 2.0,
        }
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> Point {
        Point::new((self.xmin + self.xmax) / 2.0, (self.ymin + self.ymax) / 2.0)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Hbb {
        Hbb {
            xmin: self.xmin + dx,
            ymin: self.ymin + dy,
            xmax: self.xmax + dx,
            ymax: self.ymax + dy,
        }
    }

    /// Clamps every coordinate into `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> Hbb {
        Hbb {
            xmin: self.xmin.clamp(0.0, width),
            ymin: self.ymin.clamp(0.0, height),
            xmax: self.xmax.clamp(0.0, width),
            ymax: self.ymax.clamp(0.0, height),
        }
    }

    pub fn to_quad(&self) -> Quad {
        Quad {
            vertices: [
                Point::new(self.xmin, self.ymin),
                Point::new(self.xmax, self.ymin),
                Point::new(self.xmax, self.ymax),
                Point::new(self.xmin, self.ymax),
            ],
        }
    }
}

/// Oriented box with `0 <= theta < 90` degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obb {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

impl Obb {
    /// Builds a box that must already satisfy the invariants.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        if ![cx, cy, w, h, theta].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if !(w > 0.0 && h > 0.0 && (0.0..90.0).contains(&theta)) {
            return Err(GeometryError::InvalidObb { w, h, theta });
        }
        Ok(Self { cx, cy, w, h, theta })
    }

    /// Builds a box from any angle, folding it into `[0, 90)` by swapping the
    /// sides once per quarter turn.
    pub fn canonical(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        if !theta.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        let turns = (theta / 90.0).floor();
        let mut t = theta - 90.0 * turns;
        let (mut w, mut h) = if (turns as i64).rem_euclid(2) == 1 {
            (h, w)
        } else {
            (w, h)
        };
        if t >= 90.0 - ANGLE_SNAP {
            t = 0.0;
            std::mem::swap(&mut w, &mut h);
        }
        if t < 0.0 {
            t = 0.0;
        }
        Self::new(cx, cy, w, h, t)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> Point {
        Point::new(self.cx, self.cy)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Obb {
        Obb {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }
}

/// Corners of the rotated rectangle, counter-clockwise, starting from the
/// corner that is top-left when `theta = 0`.
pub fn obb_to_quad(b: &Obb) -> Quad {
    let (s, c) = b.theta.to_radians().sin_cos();
    let (hw, hh) = (b.w / 2.0, b.h / 2.0);
    let corner = |dx: f64, dy: f64| Point::new(b.cx + c * dx - s * dy, b.cy + s * dx + c * dy);
    Quad {
        vertices: [
            corner(-hw, -hh),
            corner(hw, -hh),
            corner(hw, hh),
            corner(-hw, hh),
        ],
    }
}

/// Minimum-area enclosing rotated rectangle of a quadrilateral.
pub fn quad_to_obb(q: &Quad) -> Result<Obb> {
    min_area_rect(q.vertices())
}

/// Minimum-area enclosing rotated rectangle of an arbitrary point set, by
/// testing every convex-hull edge direction.
pub fn min_area_rect(points: &[Point]) -> Result<Obb> {
    if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let hull = convex_hull(points);
    let area = signed_area(&hull);
    if hull.len() < 3 || area <= AREA_EPSILON {
        return Err(GeometryError::DegenerateQuad { area: area.max(0.0) });
    }

    let mut best: Option<(f64, Point, Point, f64, f64, f64, f64)> = None;
    for i in 0..hull.len() {
        let e = hull[(i + 1) % hull.len()].sub(hull[i]);
        let len = e.dot(e).sqrt();
        if len == 0.0 {
            continue;
        }
        let u = Point::new(e.x / len, e.y / len);
        let v = Point::new(-u.y, u.x);
        let (mut smin, mut smax, mut tmin, mut tmax) =
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in &hull {
            let s = p.dot(u);
            let t = p.dot(v);
            smin = smin.min(s);
            smax = smax.max(s);
            tmin = tmin.min(t);
            tmax = tmax.max(t);
        }
        let rect_area = (smax - smin) * (tmax - tmin);
        if best.as_ref().is_none_or(|b| rect_area < b.0) {
            best = Some((rect_area, u, v, smin, smax, tmin, tmax));
        }
    }

    let (_, u, v, smin, smax, tmin, tmax) = best.ok_or(GeometryError::DegenerateQuad { area })?;
    let sc = (smin + smax) / 2.0;
    let tc = (tmin + tmax) / 2.0;
    let cx = u.x * sc + v.x * tc;
    let cy = u.y * sc + v.y * tc;
    let theta = u.y.atan2(u.x).to_degrees();
    Obb::canonical(cx, cy, smax - smin, tmax - tmin, theta)
}

/// Andrew's monotone chain; counter-clockwise, collinear points dropped.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<Point> = Vec::with_capacity(pts.len());
    for &p in &pts {
        while lower.len() >= 2 && orient(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point> = Vec::with_capacity(pts.len());
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && orient(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Tightest axis-aligned box around the rotated rectangle.
pub fn obb_to_hbb(b: &Obb) -> Hbb {
    obb_to_quad(b).to_hbb()
}

/// Clips the convex polygon `subject` against every edge of the convex,
/// counter-clockwise polygon `clip`.
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut out = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let edge = b.sub(a);
        let input = std::mem::take(&mut out);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let cur_side = edge.cross(cur.sub(a));
            let prev_side = edge.cross(prev.sub(a));
            if cur_side >= 0.0 {
                if prev_side < 0.0 {
                    out.push(intersect(prev, cur, prev_side, cur_side));
                }
                out.push(cur);
            } else if prev_side >= 0.0 {
                out.push(intersect(prev, cur, prev_side, cur_side));
            }
        }
    }
    out
}

fn intersect(p: Point, q: Point, sp: f64, sq: f64) -> Point {
    let t = sp / (sp - sq);
    Point::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
}

/// Overlap area of two convex polygons, both counter-clockwise.
pub fn convex_intersection_area(a: &[Point], b: &[Point]) -> f64 {
    let area_a = signed_area(a);
    let area_b = signed_area(b);
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let clipped = clip_convex(a, b);
    signed_area(&clipped).clamp(0.0, area_a.min(area_b))
}

pub fn polygon_intersection_area(a: &Quad, b: &Quad) -> f64 {
    convex_intersection_area(a.vertices(), b.vertices())
}

fn ratio(inter: f64, area_a: f64, area_b: f64) -> f64 {
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

fn cmp_coords(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Polygon IoU of two convex quads. Arguments are put in a fixed order first
/// so that `iou_quad(a, b) == iou_quad(b, a)` bit-for-bit.
pub fn iou_quad(a: &Quad, b: &Quad) -> f64 {
    let (a, b) = match cmp_coords(&a.coords(), &b.coords()) {
        Ordering::Equal => return if a.area() > 0.0 { 1.0 } else { 0.0 },
        Ordering::Less => (a, b),
        Ordering::Greater => (b, a),
    };
    ratio(polygon_intersection_area(a, b), a.area(), b.area())
}

pub fn iou_obb(a: &Obb, b: &Obb) -> f64 {
    let ka = [a.cx, a.cy, a.w, a.h, a.theta];
    let kb = [b.cx, b.cy, b.w, b.h, b.theta];
    let (a, b) = match cmp_coords(&ka, &kb) {
        Ordering::Equal => return 1.0,
        Ordering::Less => (a, b),
        Ordering::Greater => (b, a),
    };
    let inter = polygon_intersection_area(&obb_to_quad(a), &obb_to_quad(b));
    ratio(inter, a.area(), b.area())
}

pub fn iou_hbb(a: &Hbb, b: &Hbb) -> f64 {
    let iw = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let ih = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    ratio(iw * ih, a.area(), b.area())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoxKind {
    Horizontal,
    Oriented,
}

/// A box of either kind. Oriented detections read back from text files are
/// kept as quads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoxShape {
    Hbb(Hbb),
    Obb(Obb),
    Quad(Quad),
}

impl BoxShape {
    pub fn kind(&self) -> BoxKind {
        match self {
            BoxShape::Hbb(_) => BoxKind::Horizontal,
            BoxShape::Obb(_) | BoxShape::Quad(_) => BoxKind::Oriented,
        }
    }

    pub fn to_quad(&self) -> Quad {
        match self {
            BoxShape::Hbb(b) => b.to_quad(),
            BoxShape::Obb(b) => obb_to_quad(b),
            BoxShape::Quad(q) => *q,
        }
    }

    pub fn to_hbb(&self) -> Hbb {
        match self {
            BoxShape::Hbb(b) => *b,
            BoxShape::Obb(b) => obb_to_hbb(b),
            BoxShape::Quad(q) => q.to_hbb(),
        }
    }

    pub fn center(&self) -> Point {
        match self {
            BoxShape::Hbb(b) => b.center(),
            BoxShape::Obb(b) => b.center(),
            BoxShape::Quad(q) => q.center(),
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BoxShape {
        match self {
            BoxShape::Hbb(b) => BoxShape::Hbb(b.translate(dx, dy)),
            BoxShape::Obb(b) => BoxShape::Obb(b.translate(dx, dy)),
            BoxShape::Quad(q) => BoxShape::Quad(q.translate(dx, dy)),
        }
    }

    /// IoU between boxes of the same kind. Mixing kinds is an error.
    pub fn iou(&self, other: &BoxShape) -> Result<f64> {
        match (self, other) {
            (BoxShape::Hbb(a), BoxShape::Hbb(b)) => Ok(iou_hbb(a, b)),
            (BoxShape::Obb(a), BoxShape::Obb(b)) => Ok(iou_obb(a, b)),
            (a, b) if a.kind() == b.kind() => Ok(iou_quad(&a.to_quad(), &b.to_quad())),
            _ => Err(GeometryError::MixedBoxKinds),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredDetection {
    pub shape: BoxShape,
    pub class_id: usize,
    pub score: f64,
}

impl ScoredDetection {
    pub fn new(shape: BoxShape, class_id: usize, score: f64) -> Self {
        debug_assert!((0.0..=1.0).contains(&score), "score {score} outside [0, 1]");
        Self { shape, class_id, score }
    }
}

/// Indices sorted by descending score; equal scores keep input order.
pub fn score_order(scores: impl IntoIterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.into_iter().collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy class-wise NMS. Returns the kept indices in score-rank order.
///
/// A detection is dropped when its IoU with an already kept detection of the
/// same class is strictly greater than `iou_threshold`.
pub fn rotated_nms(dets: &[ScoredDetection], iou_threshold: f64) -> Result<Vec<usize>> {
    if let Some(first) = dets.first() {
        let kind = first.shape.kind();
        if dets.iter().any(|d| d.shape.kind() != kind) {
            return Err(GeometryError::MixedBoxKinds);
        }
    }
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(dets.iter().map(|d| d.score)) {
        let d = &dets[i];
        let mut suppressed = false;
        for &k in &kept {
            if dets[k].class_id == d.class_id && dets[k].shape.iou(&d.shape)? > iou_threshold {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept)
}
