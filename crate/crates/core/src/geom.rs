//! Oriented rectangles and polygons.
//!
//! A [`Segment`] is an oriented rectangle `(x, y, w, h, theta)` whose long side
//! `w` points along `theta`. Angles are undirected: they live in `[-pi/2, pi/2)`
//! and all comparisons are taken modulo `pi`.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance used by the clipping inside tests.
const CLIP_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    #[inline]
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    #[inline]
    pub fn dot(self, other: Point) -> f64 {
        self.x * other.x + self.y * other.y
    }

    #[inline]
    pub fn cross(self, other: Point) -> f64 {
        self.x * other.y - self.y * other.x
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    #[inline]
    pub fn scale(self, k: f64) -> Point {
        Point::new(self.x * k, self.y * k)
    }

    /// Left-hand normal (rotated +90 degrees).
    #[inline]
    pub fn perp(self) -> Point {
        Point::new(-self.y, self.x)
    }

    pub fn normalized(self) -> Option<Point> {
        let n = self.norm();
        (n > 0.0 && n.is_finite()).then(|| self.scale(1.0 / n))
    }

    /// Rotates about the origin by `angle` radians (counter-clockwise).
    pub fn rotate(self, angle: f64) -> Point {
        let (s, c) = angle.sin_cos();
        Point::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl std::ops::Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

/// Maps an undirected orientation into `[-pi/2, pi/2)`.
pub fn normalize_angle(theta: f64) -> Result<f64> {
    if !theta.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite angle {theta}")));
    }
    Ok(wrap_half_open(theta))
}

fn wrap_half_open(theta: f64) -> f64 {
    let mut r = (theta + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2;
    if r >= FRAC_PI_2 {
        r -= PI;
    }
    r
}

/// Signed orientation difference `a - b` wrapped into `(-pi/2, pi/2]`.
pub fn wrap_angle_delta(delta: f64) -> f64 {
    let r = wrap_half_open(delta);
    if r <= -FRAC_PI_2 {
        r + PI
    } else {
        r
    }
}

/// Unsigned orientation difference modulo `pi`, in `[0, pi/2]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle_delta(a - b).abs()
}

/// Oriented rectangle with `w >= h > 0` and `theta` in `[-pi/2, pi/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

impl Segment {
    /// Builds a canonical segment. When `w < h` the sides are swapped and the
    /// angle turned by a quarter so that `w` is always the long side.
    pub fn new(x: f64, y: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        if ![x, y, w, h, theta].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite segment component".into()));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "segment sides must be positive, got w={w} h={h}"
            )));
        }
        let (w, h, theta) = if w < h {
            (h, w, theta + FRAC_PI_2)
        } else {
            (w, h, theta)
        };
        Ok(Self {
            x,
            y,
            w,
            h,
            theta: wrap_half_open(theta),
        })
    }

    #[inline]
    pub fn center(&self) -> Point {
        Point::new(self.x, self.y)
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    #[inline]
    pub fn diagonal(&self) -> f64 {
        self.w.hypot(self.h)
    }

    #[inline]
    pub fn aspect(&self) -> f64 {
        self.w / self.h
    }

    /// Unit vector along the long side.
    pub fn long_axis(&self) -> Point {
        let (s, c) = self.theta.sin_cos();
        Point::new(c, s)
    }

    /// Unit vector along the short side.
    pub fn short_axis(&self) -> Point {
        self.long_axis().perp()
    }

    pub fn vertices(&self) -> [Point; 4] {
        segment_vertices(self)
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.x, self.y, self.w, self.h, self.theta]
    }

    /// Applies a rigid motion: rotation by `angle` about the origin, then a
    /// translation.
    pub fn transformed(&self, angle: f64, t: Point) -> Segment {
        let c = self.center().rotate(angle) + t;
        Segment {
            x: c.x,
            y: c.y,
            w: self.w,
            h: self.h,
            theta: wrap_half_open(self.theta + angle),
        }
    }

    /// Whether `p` lies inside the rectangle, up to a signed-distance tolerance.
    pub fn contains(&self, p: Point, tol: f64) -> bool {
        let d = p - self.center();
        d.dot(self.long_axis()).abs() <= self.w / 2.0 + tol
            && d.dot(self.short_axis()).abs() <= self.h / 2.0 + tol
    }
}

/// Rectangle corners in counter-clockwise order, starting at the
/// (-long, -short) corner.
pub fn segment_vertices(s: &Segment) -> [Point; 4] {
    let c = s.center();
    let u = s.long_axis().scale(s.w / 2.0);
    let v = s.short_axis().scale(s.h / 2.0);
    [c - u - v, c + u - v, c + u + v, c - u + v]
}

/// Shoelace signed area; positive for counter-clockwise rings.
pub fn signed_area(ring: &[Point]) -> f64 {
    let n = ring.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        acc += ring[i].cross(ring[(i + 1) % n]);
    }
    acc / 2.0
}

/// Clips a convex `subject` ring against a convex counter-clockwise `clip`
/// ring (Sutherland-Hodgman). Points on a clip edge count as inside.
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut output: Vec<Point> = subject.to_vec();
    let m = clip.len();
    for i in 0..m {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % m];
        let edge = b - a;
        let side = |p: Point| edge.cross(p - a);
        let input = std::mem::take(&mut output);
        let n = input.len();
        for j in 0..n {
            let cur = input[j];
            let prev = input[(j + n - 1) % n];
            let sc = side(cur);
            let sp = side(prev);
            let cur_in = sc >= -CLIP_EPS;
            let prev_in = sp >= -CLIP_EPS;
            if cur_in {
                if !prev_in {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if prev_in {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn intersect(p: Point, q: Point, sp: f64, sq: f64) -> Point {
    let t = sp / (sp - sq);
    p + (q - p).scale(t)
}

/// Exact intersection area of two oriented rectangles.
pub fn intersection_area(a: &Segment, b: &Segment) -> f64 {
    let ra = a.vertices();
    let rb = b.vertices();
    signed_area(&clip_convex(&ra, &rb)).max(0.0)
}

/// Intersection over union of two oriented rectangles.
pub fn skew_iou(a: &Segment, b: &Segment) -> Result<f64> {
    let (aa, ab) = (a.area(), b.area());
    if !(aa > 0.0 && ab > 0.0) {
        return Err(Error::InvalidInput("zero-area segment in skew_iou".into()));
    }
    // bounding circles cannot touch
    if a.center().dist(b.center()) > (a.diagonal() + b.diagonal()) / 2.0 {
        return Ok(0.0);
    }
    let inter = intersection_area(a, b);
    let union = aa + ab - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Greedy skew non-maximum suppression.
///
/// A candidate is dropped when some already kept segment overlaps it with
/// IoU above `iou_thresh` *and* differs in orientation by less than
/// `angle_thresh`. Returns kept indices in descending score order; equal
/// scores keep the lower index first.
pub fn skew_nms(
    segments: &[Segment],
    scores: &[f64],
    iou_thresh: f64,
    angle_thresh: f64,
) -> Result<Vec<usize>> {
    if segments.len() != scores.len() {
        return Err(Error::Shape(format!(
            "{} segments but {} scores",
            segments.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("non-finite score".into()));
    }
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));

    let mut kept: Vec<usize> = Vec::new();
    'candidates: for &i in &order {
        for &k in &kept {
            if angle_diff(segments[i].theta, segments[k].theta) < angle_thresh
                && skew_iou(&segments[i], &segments[k])? > iou_thresh
            {
                continue 'candidates;
            }
        }
        kept.push(i);
    }
    Ok(kept)
}

/// Convex hull (Andrew's monotone chain), counter-clockwise, no collinear
/// points.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let turn = |o: Point, a: Point, b: Point| (a - o).cross(b - o);
    let mut hull: Vec<Point> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && turn(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && turn(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Minimum-area oriented rectangle containing `points`, found by testing
/// every convex hull edge direction (rotating calipers).
pub fn min_enclosing_segment(points: &[Point]) -> Result<Segment> {
    if points.len() < 3 {
        return Err(Error::Degenerate(format!(
            "need at least 3 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|p| !p.is_finite()) {
        return Err(Error::InvalidInput("non-finite point".into()));
    }
    let hull = convex_hull(points);
    if hull.len() < 3 || signed_area(&hull) <= 0.0 {
        return Err(Error::Degenerate("points are collinear".into()));
    }

    let n = hull.len();
    let mut best: Option<(f64, Segment)> = None;
    for i in 0..n {
        let Some(u) = (hull[(i + 1) % n] - hull[i]).normalized() else {
            continue;
        };
        let v = u.perp();
        let (mut lo_u, mut hi_u, mut lo_v, mut hi_v) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in &hull {
            let a = p.dot(u);
            let b = p.dot(v);
            lo_u = lo_u.min(a);
            hi_u = hi_u.max(a);
            lo_v = lo_v.min(b);
            hi_v = hi_v.max(b);
        }
        let (len_u, len_v) = (hi_u - lo_u, hi_v - lo_v);
        let area = len_u * len_v;
        if best.as_ref().is_none_or(|(a, _)| area < *a) {
            let c = u.scale((lo_u + hi_u) / 2.0) + v.scale((lo_v + hi_v) / 2.0);
            let seg = Segment::new(c.x, c.y, len_u, len_v, u.y.atan2(u.x))?;
            best = Some((area, seg));
        }
    }
    best.map(|(_, s)| s)
        .ok_or_else(|| Error::Degenerate("no valid hull edge".into()))
}

/// A simple polygon stored counter-clockwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point>", into = "Vec<Point>")]
pub struct Polygon {
    vertices: Vec<Point>,
}

impl Polygon {
    /// Validates and canonicalizes a ring: drops repeated consecutive
    /// vertices, rejects self-intersections, and reverses clockwise input.
    pub fn new(vertices: Vec<Point>) -> Result<Self> {
        if vertices.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidInput("non-finite polygon vertex".into()));
        }
        let mut ring: Vec<Point> = Vec::with_capacity(vertices.len());
        for p in vertices {
            if ring.last() != Some(&p) {
                ring.push(p);
            }
        }
        while ring.len() > 1 && ring.first() == ring.last() {
            ring.pop();
        }
        if ring.len() < 3 {
            return Err(Error::Degenerate(format!(
                "polygon needs 3 distinct vertices, got {}",
                ring.len()
            )));
        }
        let area = signed_area(&ring);
        if area == 0.0 || !area.is_finite() {
            return Err(Error::Degenerate("polygon has zero area".into()));
        }
        if let Some((i, j)) = first_self_intersection(&ring) {
            return Err(Error::InvalidInput(format!(
                "polygon edges {i} and {j} intersect"
            )));
        }
        if area < 0.0 {
            ring.reverse();
        }
        Ok(Self { vertices: ring })
    }

    pub fn from_segment(s: &Segment) -> Self {
        Self {
            vertices: s.vertices().to_vec(),
        }
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    pub fn bbox(&self) -> BBox {
        BBox::of(&self.vertices)
    }

    /// Even-odd point containment.
    pub fn contains(&self, p: Point) -> bool {
        point_in_ring(&self.vertices, p)
    }

    /// Distance from `p` to the nearest boundary edge.
    pub fn boundary_distance(&self, p: Point) -> f64 {
        let n = self.vertices.len();
        (0..n)
            .map(|i| point_segment_distance(p, self.vertices[i], self.vertices[(i + 1) % n]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn transformed(&self, angle: f64, t: Point) -> Polygon {
        Polygon {
            vertices: self.vertices.iter().map(|p| p.rotate(angle) + t).collect(),
        }
    }
}

impl TryFrom<Vec<Point>> for Polygon {
    type Error = Error;
    fn try_from(v: Vec<Point>) -> Result<Self> {
        Polygon::new(v)
    }
}

impl From<Polygon> for Vec<Point> {
    fn from(p: Polygon) -> Self {
        p.vertices
    }
}

pub fn point_in_ring(ring: &[Point], p: Point) -> bool {
    let n = ring.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (ring[i], ring[j]);
        if (a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x {
            inside = !inside;
        }
        j = i;
    }
    inside
}

pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    p.dist(a + ab.scale(t))
}

fn segments_cross(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = (b - a).cross(c - a);
    let d2 = (b - a).cross(d - a);
    let d3 = (d - c).cross(a - c);
    let d4 = (d - c).cross(b - c);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let on = |p: Point, q: Point, r: Point, cr: f64| {
        cr == 0.0
            && r.x >= p.x.min(q.x)
            && r.x <= p.x.max(q.x)
            && r.y >= p.y.min(q.y)
            && r.y <= p.y.max(q.y)
    };
    on(a, b, c, d1) || on(a, b, d, d2) || on(c, d, a, d3) || on(c, d, b, d4)
}

fn first_self_intersection(ring: &[Point]) -> Option<(usize, usize)> {
    let n = ring.len();
    for i in 0..n {
        let (a, b) = (ring[i], ring[(i + 1) % n]);
        for j in (i + 1)..n {
            // adjacent edges share a vertex
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            if segments_cross(a, b, ring[j], ring[(j + 1) % n]) {
                return Some((i, j));
            }
        }
    }
    None
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl BBox {
    pub fn of(points: &[Point]) -> BBox {
        points.iter().fold(
            BBox {
                min_x: f64::INFINITY,
                min_y: f64::INFINITY,
                max_x: f64::NEG_INFINITY,
                max_y: f64::NEG_INFINITY,
            },
            |b, p| BBox {
                min_x: b.min_x.min(p.x),
                min_y: b.min_y.min(p.y),
                max_x: b.max_x.max(p.x),
                max_y: b.max_y.max(p.y),
            },
        )
    }

    pub fn union(&self, o: &BBox) -> BBox {
        BBox {
            min_x: self.min_x.min(o.min_x),
            min_y: self.min_y.min(o.min_y),
            max_x: self.max_x.max(o.max_x),
            max_y: self.max_y.max(o.max_y),
        }
    }

    pub fn intersects(&self, o: &BBox) -> bool {
        self.min_x <= o.max_x && o.min_x <= self.max_x && self.min_y <= o.max_y && o.min_y <= self.max_y
    }
}
