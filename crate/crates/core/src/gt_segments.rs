//! Ground-truth segment generation from text polygons.
//!
//! A ribbon-shaped polygon is turned into a chain of oriented segments in
//! three passes: square boxes laid along the center line, neighbouring
//! squares paired into rectangles, and rectangles of near-equal orientation
//! merged while their aspect ratio stays bounded.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{angle_diff, min_enclosing_segment, Point, Polygon, Segment};
use crate::raster::pixel_overlap;

/// Cross sections shorter than this are clamped before building squares.
pub const MIN_CROSS_LENGTH: f64 = 2.0;

/// Fraction of a segment's area that must fall inside a polygon for the
/// segment to belong to it.
pub const MEMBERSHIP_RATIO: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GtParams {
    /// Number of center-line sections.
    pub n: usize,
    /// Scale coefficient applied to the shortest cross section.
    pub sigma: f64,
    /// Rectangles closer than this in orientation may merge.
    pub angle_merge: f64,
    /// Merged rectangles must stay below this aspect ratio.
    pub max_aspect: f64,
}

impl Default for GtParams {
    fn default() -> Self {
        Self {
            n: 50,
            sigma: 0.5,
            angle_merge: PI / 36.0,
            max_aspect: 3.0,
        }
    }
}

/// Center line of a text ribbon sampled at `n + 1` evenly spaced points
/// (head, `n - 1` section points, tail) with the cross-section chord at each.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterLine {
    pub points: Vec<Point>,
    pub cross_lengths: Vec<f64>,
    pub cross_dirs: Vec<Point>,
}

impl CenterLine {
    pub fn sections(&self) -> usize {
        self.points.len() - 1
    }

    /// Interior points that split the line into `n` equal pieces.
    pub fn section_points(&self) -> &[Point] {
        &self.points[1..self.points.len() - 1]
    }

    pub fn section_cross_lengths(&self) -> &[f64] {
        &self.cross_lengths[1..self.cross_lengths.len() - 1]
    }

    pub fn length(&self) -> f64 {
        polyline_length(&self.points)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtDecomposition {
    pub segments: Vec<Segment>,
    pub source_polygon: Polygon,
    /// Spacing between consecutive square boxes along the center line.
    pub interval: f64,
}

/// Square-box spacing: `sigma` times the shortest cross section.
pub fn interval(cross_lengths: &[f64], sigma: f64) -> f64 {
    sigma
        * cross_lengths
            .iter()
            .map(|l| l.max(MIN_CROSS_LENGTH))
            .fold(f64::INFINITY, f64::min)
}

/// Cosine between the neighbours of an edge below which it may be a head
/// or tail edge.
const END_EDGE_COS: f64 = -0.5;

/// Splits a ribbon polygon into its two long sides, both running head to
/// tail. The head and tail are the pair of non-adjacent edges, preferring
/// edges where the boundary turns back, whose in-between chains stay
/// closest to each other.
pub fn ribbon_sides(poly: &Polygon) -> Result<(Vec<Point>, Vec<Point>)> {
    let v = poly.vertices();
    let n = v.len();
    if n < 4 {
        return Err(Error::Decomposition(format!(
            "a ribbon needs at least 4 vertices, got {n}"
        )));
    }
    const PROBES: usize = 33;
    // an end edge turns the boundary back: its two neighbours run roughly
    // opposite to each other
    let dir = |k: usize| (v[(k + 1) % n] - v[k]).normalized();
    let end_like: Vec<bool> = (0..n)
        .map(|i| match (dir((i + n - 1) % n), dir((i + 1) % n)) {
            (Some(a), Some(b)) => a.dot(b) < END_EDGE_COS,
            _ => false,
        })
        .collect();
    let admissible = |i: usize, j: usize| j >= i + 2 && !(i == 0 && j == n - 1);
    let restrict = (0..n).any(|i| (i + 2..n).any(|j| admissible(i, j) && end_like[i] && end_like[j]));
    let mut best: Option<(f64, usize, usize)> = None;
    for i in 0..n {
        for j in (i + 2)..n {
            if !admissible(i, j) || (restrict && !(end_like[i] && end_like[j])) {
                continue;
            }
            let (a, b) = chains(v, i, j);
            let (ca, cb) = (cumulative(&a), cumulative(&b));
            let mut acc = 0.0;
            for k in 0..PROBES {
                let f = k as f64 / (PROBES - 1) as f64;
                let pa = point_at(&a, &ca, f * ca[ca.len() - 1]);
                let pb = point_at(&b, &cb, f * cb[cb.len() - 1]);
                acc += pa.dist(pb);
            }
            let score = acc / PROBES as f64;
            if score.is_finite() && best.is_none_or(|(s, _, _)| score < s) {
                best = Some((score, i, j));
            }
        }
    }
    let (_, i, j) =
        best.ok_or_else(|| Error::Decomposition("no head/tail edge pair found".into()))?;
    Ok(chains(v, i, j))
}

fn chains(v: &[Point], i: usize, j: usize) -> (Vec<Point>, Vec<Point>) {
    let n = v.len();
    let a: Vec<Point> = (i + 1..=j).map(|k| v[k]).collect();
    let mut b: Vec<Point> = Vec::with_capacity(n - (j - i) + 1);
    let mut k = j + 1;
    loop {
        b.push(v[k % n]);
        if k % n == i {
            break;
        }
        k += 1;
    }
    b.reverse();
    (a, b)
}

pub(crate) fn polyline_length(p: &[Point]) -> f64 {
    p.windows(2).map(|w| w[0].dist(w[1])).sum()
}

pub(crate) fn cumulative(p: &[Point]) -> Vec<f64> {
    let mut c = Vec::with_capacity(p.len());
    let mut acc = 0.0;
    c.push(0.0);
    for w in p.windows(2) {
        acc += w[0].dist(w[1]);
        c.push(acc);
    }
    c
}

/// Point at arclength `s` along a polyline with cumulative lengths `cum`.
pub(crate) fn point_at(p: &[Point], cum: &[f64], s: f64) -> Point {
    let total = cum[cum.len() - 1];
    if p.len() == 1 || total <= 0.0 {
        return p[0];
    }
    let s = s.clamp(0.0, total);
    let k = match cum.binary_search_by(|c| c.total_cmp(&s)) {
        Ok(k) => k.min(p.len() - 2),
        Err(k) => k.saturating_sub(1).min(p.len() - 2),
    };
    let seg = cum[k + 1] - cum[k];
    if seg <= 0.0 {
        return p[k];
    }
    let t = (s - cum[k]) / seg;
    p[k] + (p[k + 1] - p[k]).scale(t)
}

pub(crate) fn resample(p: &[Point], count: usize) -> Vec<Point> {
    let cum = cumulative(p);
    let total = cum[cum.len() - 1];
    (0..count)
        .map(|k| point_at(p, &cum, total * k as f64 / (count - 1) as f64))
        .collect()
}

/// Distance along `dir` from `origin` to the first boundary crossing.
fn ray_hit(ring: &[Point], origin: Point, dir: Point) -> Option<f64> {
    let n = ring.len();
    let mut best: Option<f64> = None;
    for i in 0..n {
        let (a, b) = (ring[i], ring[(i + 1) % n]);
        let e = b - a;
        let denom = dir.cross(e);
        if denom.abs() < 1e-15 {
            continue;
        }
        let w = a - origin;
        let t = w.cross(e) / denom;
        let u = w.cross(dir) / denom;
        if t > 1e-9 && (-1e-12..=1.0 + 1e-12).contains(&u) && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    }
    best
}

/// Chord through `p` along `dir`, clipped to the polygon: (length, midpoint).
fn chord(poly: &Polygon, p: Point, dir: Point) -> Option<(f64, Point)> {
    let ring = poly.vertices();
    let fwd = ray_hit(ring, p, dir)?;
    let back = ray_hit(ring, p, dir.scale(-1.0))?;
    let mid = p + dir.scale((fwd - back) / 2.0);
    Some((fwd + back, mid))
}

fn tangent(points: &[Point], k: usize) -> Point {
    let lo = k.saturating_sub(1);
    let hi = (k + 1).min(points.len() - 1);
    (points[hi] - points[lo])
        .normalized()
        .unwrap_or(Point::new(1.0, 0.0))
}

/// Samples the ribbon's center line at `n + 1` evenly spaced points.
pub fn extract_center_line(poly: &Polygon, n: usize) -> Result<CenterLine> {
    if n < 2 {
        return Err(Error::InvalidInput(format!("need n >= 2 sections, got {n}")));
    }
    let (top, bottom) = ribbon_sides(poly)?;
    let (ct, cb) = (cumulative(&top), cumulative(&bottom));
    let (lt, lb) = (ct[ct.len() - 1], cb[cb.len() - 1]);
    let dense = (4 * n).max(64);
    let mid: Vec<Point> = (0..=dense)
        .map(|k| {
            let f = k as f64 / dense as f64;
            let a = point_at(&top, &ct, f * lt);
            let b = point_at(&bottom, &cb, f * lb);
            (a + b).scale(0.5)
        })
        .collect();
    if polyline_length(&mid) <= 0.0 {
        return Err(Error::Decomposition("center line has zero length".into()));
    }
    let points = resample(&mid, n + 1);

    let mut cross_lengths = Vec::with_capacity(n + 1);
    let mut cross_dirs = Vec::with_capacity(n + 1);
    for k in 0..=n {
        if k == 0 || k == n {
            let (a, b) = if k == 0 {
                (top[0], bottom[0])
            } else {
                (top[top.len() - 1], bottom[bottom.len() - 1])
            };
            cross_lengths.push(a.dist(b));
            cross_dirs.push((a - b).normalized().unwrap_or(tangent(&points, k).perp()));
            continue;
        }
        let dir = tangent(&points, k).perp();
        let (len, _) = chord(poly, points[k], dir).ok_or_else(|| {
            Error::Decomposition(format!("cross section {k} does not hit the boundary"))
        })?;
        cross_lengths.push(len);
        cross_dirs.push(dir);
    }
    if cross_lengths.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::Decomposition("zero-length cross section".into()));
    }
    Ok(CenterLine {
        points,
        cross_lengths,
        cross_dirs,
    })
}

/// Square boxes of side equal to the local cross section, spaced by the
/// interval along the center line.
fn square_boxes(poly: &Polygon, line: &CenterLine, tau: f64) -> Result<Vec<Segment>> {
    let pts = &line.points;
    let cum = cumulative(pts);
    let total = cum[cum.len() - 1];
    let sec = line.section_cross_lengths();
    let head = sec[0].max(MIN_CROSS_LENGTH);
    let tail = sec[sec.len() - 1].max(MIN_CROSS_LENGTH);
    let s_a = (head / 2.0).min(total / 2.0);
    let s_b = (total - tail / 2.0).max(s_a);
    let steps = if s_b - s_a <= 0.0 {
        0
    } else {
        ((s_b - s_a) / tau - 1e-9).ceil().max(1.0) as usize
    };
    let delta = total / line.sections() as f64;

    let mut out = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let s = if steps == 0 {
            (s_a + s_b) / 2.0
        } else {
            s_a + (s_b - s_a) * k as f64 / steps as f64
        };
        let p = point_at(pts, &cum, s);
        let t = (point_at(pts, &cum, s + delta) - point_at(pts, &cum, s - delta))
            .normalized()
            .unwrap_or(Point::new(1.0, 0.0));
        let (len, mid) = chord(poly, p, t.perp()).ok_or_else(|| {
            Error::Decomposition(format!("square {k} cross section misses the boundary"))
        })?;
        let side = len.max(MIN_CROSS_LENGTH);
        out.push(Segment::new(mid.x, mid.y, side, side, t.y.atan2(t.x))?);
    }
    Ok(out)
}

fn enclose(a: &Segment, b: &Segment) -> Result<Segment> {
    let mut corners = a.vertices().to_vec();
    corners.extend_from_slice(&b.vertices());
    min_enclosing_segment(&corners)
}

/// Decomposes a ribbon polygon into ordered ground-truth segments.
pub fn generate_gt_segments(poly: &Polygon, params: &GtParams) -> Result<GtDecomposition> {
    let line = extract_center_line(poly, params.n)?;
    let tau = interval(line.section_cross_lengths(), params.sigma);
    if !(tau > 0.0) {
        return Err(Error::InvalidInput(format!("interval must be positive, got {tau}")));
    }

    let squares = square_boxes(poly, &line, tau)?;

    // pair disjoint neighbours; an odd last square stays on its own
    let mut rects: Vec<Segment> = Vec::with_capacity(squares.len().div_ceil(2));
    for pair in squares.chunks(2) {
        match pair {
            [a, b] => rects.push(enclose(a, b)?),
            [a] => rects.push(*a),
            _ => unreachable!(),
        }
    }

    // head-to-tail greedy merge, rescanning after every accepted merge
    'scan: loop {
        for i in 0..rects.len().saturating_sub(1) {
            if angle_diff(rects[i].theta, rects[i + 1].theta) >= params.angle_merge {
                continue;
            }
            let merged = enclose(&rects[i], &rects[i + 1])?;
            if merged.aspect() < params.max_aspect {
                rects[i] = merged;
                rects.remove(i + 1);
                continue 'scan;
            }
        }
        break;
    }

    Ok(GtDecomposition {
        segments: rects,
        source_polygon: poly.clone(),
        interval: tau,
    })
}

/// Fraction of the segment's pixels that fall inside the polygon.
pub fn membership_ratio(s: &Segment, poly: &Polygon) -> Result<f64> {
    if !(s.area() > 0.0) {
        return Err(Error::InvalidInput("zero-area segment".into()));
    }
    let sv = s.vertices();
    let (inter, ns, _) = pixel_overlap(&sv, poly.vertices());
    if ns == 0 {
        // smaller than one pixel center: fall back to the center point
        return Ok(if poly.contains(s.center()) { 1.0 } else { 0.0 });
    }
    Ok(inter as f64 / ns as f64)
}

/// True iff more than 80% of the segment lies inside the polygon.
pub fn segment_in_polygon(s: &Segment, poly: &Polygon) -> Result<bool> {
    Ok(membership_ratio(s, poly)? > MEMBERSHIP_RATIO)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Polygon {
        Polygon::new(vec![
            Point::new(x0, y0),
            Point::new(x1, y0),
            Point::new(x1, y1),
            Point::new(x0, y1),
        ])
        .unwrap()
    }

    /// Quarter-circle ribbon around `c` between radii `r0` and `r1`.
    fn arc_ribbon(c: Point, r0: f64, r1: f64, k: usize) -> Polygon {
        let mut v = Vec::new();
        for i in 0..=k {
            let a = FRAC_PI_2 * i as f64 / k as f64;
            v.push(c + Point::new(a.cos(), a.sin()).scale(r1));
        }
        for i in (0..=k).rev() {
            let a = FRAC_PI_2 * i as f64 / k as f64;
            v.push(c + Point::new(a.cos(), a.sin()).scale(r0));
        }
        Polygon::new(v).unwrap()
    }

    #[test]
    fn straight_rectangle_center_line() {
        let line = extract_center_line(&rect(0.0, 0.0, 200.0, 40.0), 50).unwrap();
        assert_eq!(line.points.len(), 51);
        assert_eq!(line.section_points().len(), 49);
        for p in &line.points {
            assert!((p.y - 20.0).abs() < 1e-9);
        }
        let xs: Vec<f64> = line.points.iter().map(|p| p.x).collect();
        assert!(xs[0].min(xs[50]).abs() < 1e-9 && (xs[0].max(xs[50]) - 200.0).abs() < 1e-9);
        for l in &line.cross_lengths {
            assert!((l - 40.0).abs() < 1e-9, "{l}");
        }
    }

    #[test]
    fn arc_ribbon_has_constant_cross_sections() {
        let poly = arc_ribbon(Point::new(300.0, 300.0), 150.0, 180.0, 64);
        let line = extract_center_line(&poly, 50).unwrap();
        for l in line.section_cross_lengths() {
            assert!((l - 30.0).abs() < 1.0, "{l}");
        }
    }

    #[test]
    fn interval_uses_shortest_section() {
        assert_eq!(interval(&[20.0, 24.0, 30.0], 0.5), 10.0);
        assert_eq!(interval(&[0.5, 24.0], 0.5), 1.0);
    }

    #[test]
    fn straight_rectangle_segments() {
        let poly = rect(0.0, 0.0, 200.0, 40.0);
        let d = generate_gt_segments(&poly, &GtParams::default()).unwrap();
        assert_eq!(d.interval, 20.0);
        assert!(!d.segments.is_empty());
        for s in &d.segments {
            assert!(angle_diff(s.theta, 0.0) < PI / 36.0);
            assert!((s.h - 40.0).abs() < 1.0);
            assert!(s.aspect() < 3.05);
            assert!(segment_in_polygon(s, &poly).unwrap());
        }
        // ordered along the ribbon, in either direction
        let inc = d.segments.windows(2).all(|w| w[0].x < w[1].x);
        let dec = d.segments.windows(2).all(|w| w[0].x > w[1].x);
        assert!(inc || dec);
    }

    #[test]
    fn triangle_is_not_a_ribbon() {
        let tri = Polygon::new(vec![
            Point::new(0.0, 0.0),
            Point::new(10.0, 0.0),
            Point::new(5.0, 8.0),
        ])
        .unwrap();
        assert!(matches!(
            extract_center_line(&tri, 50),
            Err(Error::Decomposition(_))
        ));
        assert!(generate_gt_segments(&tri, &GtParams::default()).is_err());
    }

    #[test]
    fn membership_examples() {
        let poly = rect(100.0, 80.0, 300.0, 120.0);
        let inside = Segment::new(200.0, 100.0, 40.0, 20.0, 0.0).unwrap();
        let outside = Segment::new(20.0, 20.0, 40.0, 20.0, 0.0).unwrap();
        let half = Segment::new(100.0, 100.0, 40.0, 20.0, 0.0).unwrap();
        assert!(segment_in_polygon(&inside, &poly).unwrap());
        assert!(!segment_in_polygon(&outside, &poly).unwrap());
        assert!((membership_ratio(&half, &poly).unwrap() - 0.5).abs() < 1e-12);
        assert!(!segment_in_polygon(&half, &poly).unwrap());
    }
}
