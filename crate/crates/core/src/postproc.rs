//! Turning a combination score map into text polygons: candidate pairs by
//! k-nearest neighbours within a radius, grouping by best-scoring links,
//! merging each group along its bisection lines, and spline smoothing.

use log::warn;
use nalgebra::{DMatrix, DVector};
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::geometry_feature;
use crate::geom::{min_enclosing_segment, Point, Polygon, Segment};
use crate::gt_segments::{cumulative, point_at, ribbon_sides};
use crate::msgcn::{CombinationScoreMap, MsgcnModel};

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_ALPHA: f64 = 2.5;
pub const DEFAULT_TAU: f64 = 0.5;

/// The kNNR set of every segment, nearest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCandidates {
    lists: Vec<Vec<usize>>,
}

impl PairCandidates {
    pub fn from_lists(lists: Vec<Vec<usize>>) -> Self {
        Self { lists }
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn neighbors(&self, m: usize) -> &[usize] {
        &self.lists[m]
    }

    pub fn contains(&self, m: usize, n: usize) -> bool {
        self.lists[m].contains(&n)
    }

    /// Ordered `(m, n)` candidate positions.
    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.lists
            .iter()
            .enumerate()
            .flat_map(|(m, l)| l.iter().map(move |&n| (m, n)))
    }
}

/// `R = alpha * sqrt(w^2 + h^2)`.
pub fn knnr_radius(s: &Segment, alpha: f64) -> f64 {
    alpha * s.diagonal()
}

/// Up to `k` nearest segments by center distance, restricted to
/// `D < R_m`. Equal distances rank by index.
pub fn knnr_pairs(segments: &[Segment], k: usize, alpha: f64) -> PairCandidates {
    let centers: Vec<Point> = segments.iter().map(Segment::center).collect();
    let lists = segments
        .iter()
        .enumerate()
        .map(|(m, s)| {
            let r = knnr_radius(s, alpha);
            let mut near: Vec<(f64, usize)> = centers
                .iter()
                .enumerate()
                .filter(|&(n, _)| n != m)
                .map(|(n, c)| (centers[m].dist(*c), n))
                .filter(|&(d, _)| d < r)
                .collect();
            near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            near.truncate(k);
            near.into_iter().map(|(_, n)| n).collect()
        })
        .collect();
    PairCandidates { lists }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub a: usize,
    pub b: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    /// Ascending segment indices.
    pub members: Vec<usize>,
    /// Accepted undirected links with `a < b`, sorted.
    pub links: Vec<Link>,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Links every segment to its best-scoring candidate when that score
/// exceeds `tau`, then returns the connected components ordered by their
/// smallest member.
pub fn group_segments(
    segments: &[Segment],
    scores: &CombinationScoreMap,
    pairs: &PairCandidates,
    tau: f64,
) -> Result<Vec<Cluster>> {
    let n = segments.len();
    if scores.len() != n || pairs.len() != n {
        return Err(Error::Shape(format!(
            "{n} segments, score map over {}, {} candidate lists",
            scores.len(),
            pairs.len()
        )));
    }
    let mut links: Vec<Link> = Vec::new();
    for m in 0..n {
        let mut best: Option<(usize, f64)> = None;
        for &q in pairs.neighbors(m) {
            let s = scores.score(m, q);
            let better = match best {
                None => true,
                Some((bq, bs)) => s > bs || (s == bs && q < bq),
            };
            if better {
                best = Some((q, s));
            }
        }
        if let Some((q, s)) = best {
            if s > tau {
                let (a, b) = (m.min(q), m.max(q));
                match links.iter_mut().find(|l| l.a == a && l.b == b) {
                    Some(l) => l.score = l.score.max(s),
                    None => links.push(Link { a, b, score: s }),
                }
            }
        }
    }
    links.sort_by(|x, y| (x.a, x.b).cmp(&(y.a, y.b)));

    let mut parent: Vec<usize> = (0..n).collect();
    for l in &links {
        let (ra, rb) = (find(&mut parent, l.a), find(&mut parent, l.b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut clusters: Vec<Cluster> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if slot[r] == usize::MAX {
            slot[r] = clusters.len();
            clusters.push(Cluster {
                members: Vec::new(),
                links: Vec::new(),
            });
        }
        clusters[slot[r]].members.push(i);
    }
    for l in links {
        let r = find(&mut parent, l.a);
        clusters[slot[r]].links.push(l);
    }
    Ok(clusters)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub polygon: Polygon,
    /// Mean accepted-link probability; for a lone segment, one minus its
    /// best candidate score.
    pub score: f64,
    pub members: Vec<usize>,
}

/// Principal direction of a point set (unit), `(1, 0)` when degenerate.
fn principal_axis(points: &[Point]) -> Point {
    let n = points.len() as f64;
    let mean = points.iter().fold(Point::new(0.0, 0.0), |a, p| a + *p).scale(1.0 / n);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let d = *p - mean;
        sxx += d.x * d.x;
        sxy += d.x * d.y;
        syy += d.y * d.y;
    }
    let angle = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    Point::new(angle.cos(), angle.sin())
}

/// Member order for merging: a nearest-center walk from one end of the
/// cluster. The end is the member farthest from the extreme member along
/// the principal axis. Links are not used since tied scores can link
/// members out of order.
pub fn order_members(cluster: &Cluster, segments: &[Segment]) -> Vec<usize> {
    let members = &cluster.members;
    if members.len() <= 2 {
        return members.clone();
    }
    let centers: Vec<Point> = members.iter().map(|&m| segments[m].center()).collect();
    let axis = principal_axis(&centers);
    let n = members.len();
    let first = (0..n)
        .min_by(|&a, &b| centers[a].dot(axis).total_cmp(&centers[b].dot(axis)).then(a.cmp(&b)))
        .expect("non-empty");
    let far = |from: usize, cands: &mut dyn Iterator<Item = usize>, nearest: bool| {
        cands.min_by(|&a, &b| {
            let (da, db) = (centers[from].dist(centers[a]), centers[from].dist(centers[b]));
            let ord = if nearest { da.total_cmp(&db) } else { db.total_cmp(&da) };
            ord.then(a.cmp(&b))
        })
    };
    let mut cur = far(first, &mut (0..n), false).expect("non-empty");
    let mut order = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    loop {
        order.push(members[cur]);
        seen[cur] = true;
        match far(cur, &mut (0..n).filter(|&k| !seen[k]), true) {
            Some(nx) => cur = nx,
            None => break,
        }
    }
    order
}

/// A segment seen from a travel direction: `u` is whichever rectangle axis
/// lies closer to `travel`, oriented along it, with half extent `hu`; `v`
/// is the left normal of `u` with half extent `hv`. Near-square segments
/// have no reliable long axis, so the choice follows the travel instead.
#[derive(Debug, Clone, Copy)]
struct Frame {
    c: Point,
    u: Point,
    hu: f64,
    v: Point,
    hv: f64,
}

impl Frame {
    fn new(s: &Segment, travel: Point) -> Self {
        let (l, sh) = (s.long_axis(), s.short_axis());
        let travel = if travel.norm() > 0.0 { travel } else { l };
        let (u, hu, hv) = if l.dot(travel).abs() >= sh.dot(travel).abs() {
            (l, s.w / 2.0, s.h / 2.0)
        } else {
            (sh, s.h / 2.0, s.w / 2.0)
        };
        let u = if u.dot(travel) < 0.0 { u.scale(-1.0) } else { u };
        Self {
            c: s.center(),
            u,
            hu,
            v: Point::new(-u.y, u.x),
            hv,
        }
    }

    /// `(left, right)` vertices of the side at `sign` along `u`.
    fn side(&self, sign: f64) -> (Point, Point) {
        let m = self.c + self.u.scale(sign * self.hu);
        (m + self.v.scale(self.hv), m - self.v.scale(self.hv))
    }

    fn side_mid(&self, sign: f64) -> Point {
        self.c + self.u.scale(sign * self.hu)
    }
}

/// Contour points between consecutive segments `a -> b`: of the sides
/// facing each other, the vertices with the largest and smallest
/// projection on the bisector of the two bisection lines, as
/// `(left, right)` of the travel direction.
pub fn contour_points(a: &Segment, b: &Segment) -> (Point, Point) {
    let travel = b.center() - a.center();
    let (fa, fb) = (Frame::new(a, travel), Frame::new(b, travel));
    let dir = (fa.v + fb.v).normalized().unwrap_or(fa.v);
    let origin = (fa.side_mid(1.0) + fb.side_mid(-1.0)).scale(0.5);
    let (al, ar) = fa.side(1.0);
    let (bl, br) = fb.side(-1.0);
    let t = |p: &Point| (*p - origin).dot(dir);
    let mut hi = al;
    let mut lo = al;
    for p in [ar, bl, br] {
        if t(&p) > t(&hi) {
            hi = p;
        }
        if t(&p) < t(&lo) {
            lo = p;
        }
    }
    (hi, lo)
}

/// Left and right boundary chains of an ordered cluster, both running in
/// the travel direction.
pub fn boundary_chains(ordered: &[Segment]) -> (Vec<Point>, Vec<Point>) {
    let m = ordered.len();
    if m == 1 {
        let f = Frame::new(&ordered[0], ordered[0].long_axis());
        let (a, b) = f.side(-1.0);
        let (c, d) = f.side(1.0);
        return (vec![a, c], vec![b, d]);
    }
    let mut left = Vec::with_capacity(m + 1);
    let mut right = Vec::with_capacity(m + 1);
    let (l, r) = Frame::new(&ordered[0], ordered[1].center() - ordered[0].center()).side(-1.0);
    left.push(l);
    right.push(r);
    for w in ordered.windows(2) {
        let (l, r) = contour_points(&w[0], &w[1]);
        left.push(l);
        right.push(r);
    }
    let (l, r) = Frame::new(&ordered[m - 1], ordered[m - 1].center() - ordered[m - 2].center()).side(1.0);
    left.push(l);
    right.push(r);
    prune_reversals(&mut left);
    prune_reversals(&mut right);
    (left, right)
}

/// Drops interior chain points where the chain doubles back, which happens
/// on the inner side of tight bends where consecutive segments overlap.
fn prune_reversals(chain: &mut Vec<Point>) {
    let mut i = 1;
    while i + 1 < chain.len() {
        if (chain[i] - chain[i - 1]).dot(chain[i + 1] - chain[i]) < 0.0 {
            chain.remove(i);
            i = i.saturating_sub(1).max(1);
        } else {
            i += 1;
        }
    }
}

fn chains_polygon(left: &[Point], right: &[Point]) -> Result<Polygon> {
    let mut ring = left.to_vec();
    ring.extend(right.iter().rev());
    Polygon::new(ring)
}

fn fallback(members: &[Segment]) -> Result<Polygon> {
    let pts: Vec<Point> = members.iter().flat_map(|s| s.vertices()).collect();
    Ok(Polygon::from_segment(&min_enclosing_segment(&pts)?))
}

fn cluster_score(cluster: &Cluster, scores: Option<&CombinationScoreMap>, pairs: Option<&PairCandidates>) -> f64 {
    if !cluster.links.is_empty() {
        return cluster.links.iter().map(|l| l.score).sum::<f64>() / cluster.links.len() as f64;
    }
    match (scores, pairs) {
        (Some(c), Some(p)) => {
            let m = cluster.members[0];
            let best = p.neighbors(m).iter().map(|&q| c.score(m, q)).fold(0.0, f64::max);
            1.0 - best
        }
        _ => 1.0,
    }
}

fn merge_inner(cluster: &Cluster, segments: &[Segment]) -> Result<(Polygon, Option<(Vec<Point>, Vec<Point>)>)> {
    if cluster.members.is_empty() {
        return Err(Error::InvalidInput("empty cluster".into()));
    }
    if let Some(&bad) = cluster.members.iter().find(|&&m| m >= segments.len()) {
        return Err(Error::InvalidInput(format!("cluster member {bad} out of range")));
    }
    if cluster.members.len() == 1 {
        return Ok((Polygon::from_segment(&segments[cluster.members[0]]), None));
    }
    let ordered: Vec<Segment> = order_members(cluster, segments)
        .into_iter()
        .map(|m| segments[m])
        .collect();
    let (left, right) = boundary_chains(&ordered);
    match chains_polygon(&left, &right) {
        Ok(p) => Ok((p, Some((left, right)))),
        Err(e) => {
            warn!("cluster {:?} did not merge cleanly ({e}); using its enclosing rectangle", cluster.members);
            Ok((fallback(&ordered)?, None))
        }
    }
}

/// Merges a cluster into one polygon along the bisection lines of
/// consecutive members.
pub fn merge_cluster(cluster: &Cluster, segments: &[Segment]) -> Result<Detection> {
    let (polygon, _) = merge_inner(cluster, segments)?;
    Ok(Detection {
        polygon,
        score: cluster_score(cluster, None, None),
        members: cluster.members.clone(),
    })
}

/// `r^2 ln r`, zero at the origin.
fn tps_kernel(r: f64) -> f64 {
    if r <= 0.0 {
        0.0
    } else {
        r * r * r.ln()
    }
}

/// Regularized thin plate spline through a chain, parameterized by
/// arclength in pixels, resampled at `samples` evenly spaced parameters.
/// The knots are the chain vertices plus `samples` evenly spaced points on
/// the chain, so a sparse chain is not bowed outward between its vertices.
pub fn tps_fit_chain(chain: &[Point], reg_lambda: f64, samples: usize) -> Option<Vec<Point>> {
    if chain.len() < 2 || samples < 2 || !(reg_lambda >= 0.0) {
        return None;
    }
    let cum = cumulative(chain);
    let total = cum[cum.len() - 1];
    if !(total > 0.0) {
        return None;
    }
    let mut knots: Vec<(f64, Point)> = cum.iter().copied().zip(chain.iter().copied()).collect();
    for k in 1..samples - 1 {
        let s = total * k as f64 / (samples - 1) as f64;
        knots.push((s, point_at(chain, &cum, s)));
    }
    knots.sort_by(|a, b| a.0.total_cmp(&b.0));
    knots.dedup_by(|a, b| a.0 - b.0 < 1e-9 * total);
    let (t, pts): (Vec<f64>, Vec<Point>) = knots.into_iter().unzip();
    let n = t.len();
    let size = n + 2;
    let mut a = DMatrix::<f64>::zeros(size, size);
    let mut rhs = DMatrix::<f64>::zeros(size, 2);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = tps_kernel((t[i] - t[j]).abs());
        }
        a[(i, i)] += reg_lambda;
        a[(i, n)] = 1.0;
        a[(i, n + 1)] = t[i];
        a[(n, i)] = 1.0;
        a[(n + 1, i)] = t[i];
        rhs[(i, 0)] = pts[i].x;
        rhs[(i, 1)] = pts[i].y;
    }
    let sol = a.lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let eval = |s: f64| {
        let mut basis = DVector::<f64>::zeros(size);
        for i in 0..n {
            basis[i] = tps_kernel((s - t[i]).abs());
        }
        basis[n] = 1.0;
        basis[n + 1] = s;
        Point::new(basis.dot(&sol.column(0)), basis.dot(&sol.column(1)))
    };
    Some(
        (0..samples)
            .map(|k| eval(total * k as f64 / (samples - 1) as f64))
            .collect(),
    )
}

/// Smooths two boundary chains running in the same direction and closes
/// them into a polygon.
pub fn tps_smooth_chains(left: &[Point], right: &[Point], reg_lambda: f64, samples: usize) -> Option<Polygon> {
    let l = tps_fit_chain(left, reg_lambda, samples)?;
    let r = tps_fit_chain(right, reg_lambda, samples)?;
    chains_polygon(&l, &r).ok()
}

/// Splits the polygon into its two long boundary chains and smooths each.
/// Returns the input unchanged if the fit fails.
pub fn tps_smooth(polygon: &Polygon, reg_lambda: f64, samples: usize) -> Polygon {
    let smoothed = ribbon_sides(polygon)
        .ok()
        .and_then(|(top, bottom)| tps_smooth_chains(&top, &bottom, reg_lambda, samples));
    match smoothed {
        Some(p) => p,
        None => {
            warn!("thin plate spline fit failed; keeping the unsmoothed polygon");
            polygon.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectParams {
    pub k: usize,
    pub alpha: f64,
    pub tau: f64,
    pub smooth: bool,
    pub tps_lambda: f64,
    pub tps_samples: usize,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            alpha: DEFAULT_ALPHA,
            tau: DEFAULT_TAU,
            smooth: true,
            tps_lambda: 1.0,
            tps_samples: 32,
        }
    }
}

/// Grouping, merging and smoothing for a given score map.
pub fn detect_with_scores(
    segments: &[Segment],
    scores: &CombinationScoreMap,
    params: &DetectParams,
) -> Result<Vec<Detection>> {
    if segments.is_empty() {
        return Ok(Vec::new());
    }
    let pairs = knnr_pairs(segments, params.k, params.alpha);
    let clusters = group_segments(segments, scores, &pairs, params.tau)?;
    let mut out = Vec::with_capacity(clusters.len());
    for cluster in &clusters {
        let merged = merge_inner(cluster, segments);
        let (mut polygon, chains) = match merged {
            Ok(m) => m,
            Err(e) => {
                warn!("skipping cluster {:?}: {e}", cluster.members);
                continue;
            }
        };
        if params.smooth {
            if let Some((l, r)) = chains {
                match tps_smooth_chains(&l, &r, params.tps_lambda, params.tps_samples) {
                    Some(p) => polygon = p,
                    None => warn!("smoothing failed for cluster {:?}", cluster.members),
                }
            }
        }
        out.push(Detection {
            polygon,
            score: cluster_score(cluster, Some(scores), Some(&pairs)),
            members: cluster.members.clone(),
        });
    }
    Ok(out)
}

/// Full inference: score pairs with the model, then group and merge.
pub fn detect(
    segments: &[Segment],
    appearance: ArrayView2<f64>,
    canvas: (f64, f64),
    model: &MsgcnModel,
    params: &DetectParams,
) -> Result<(Vec<Detection>, CombinationScoreMap)> {
    let geom = geometry_matrix(segments, canvas)?;
    let (scores, _) = model.forward(appearance, geom.view())?;
    Ok((detect_with_scores(segments, &scores, params)?, scores))
}

/// `N x 5` matrix of normalized geometry tuples.
pub fn geometry_matrix(segments: &[Segment], canvas: (f64, f64)) -> Result<ndarray::Array2<f64>> {
    let mut g = ndarray::Array2::zeros((segments.len(), crate::features::GEOMETRY_DIM));
    for (i, s) in segments.iter().enumerate() {
        let f = geometry_feature(s, canvas.0, canvas.1)?;
        for (k, v) in f.iter().enumerate() {
            g[[i, k]] = *v;
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::pixel_overlap;

    fn seg(x: f64, y: f64, w: f64, h: f64, t: f64) -> Segment {
        Segment::new(x, y, w, h, t).unwrap()
    }

    fn iou(a: &Polygon, b: &Polygon) -> f64 {
        let (i, na, nb) = pixel_overlap(a.vertices(), b.vertices());
        i as f64 / (na + nb - i) as f64
    }

    #[test]
    fn radius_example() {
        let s = seg(0.0, 0.0, 8.0, 6.0, 0.0);
        assert!((knnr_radius(&s, 2.5) - 25.0).abs() < 1e-12);
    }

    #[test]
    fn isolated_segment_has_no_candidates() {
        let segs = [seg(0.0, 0.0, 8.0, 6.0, 0.0), seg(100.0, 0.0, 8.0, 6.0, 0.0)];
        let p = knnr_pairs(&segs, 5, 2.5);
        assert!(p.neighbors(0).is_empty() && p.neighbors(1).is_empty());
    }

    #[test]
    fn chain_groups_into_one_cluster() {
        let segs = [
            seg(0.0, 0.0, 20.0, 10.0, 0.0),
            seg(20.0, 0.0, 20.0, 10.0, 0.0),
            seg(40.0, 0.0, 20.0, 10.0, 0.0),
        ];
        let pairs = PairCandidates::from_lists(vec![vec![1], vec![0, 2], vec![1]]);
        let c = CombinationScoreMap::from_probabilities(3, |i, j| if i.abs_diff(j) == 1 { 0.9 } else { 0.1 });
        let clusters = group_segments(&segs, &c, &pairs, 0.5).unwrap();
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[0].members, vec![0, 1, 2]);
        let low = CombinationScoreMap::from_probabilities(3, |_, _| 0.5);
        assert_eq!(group_segments(&segs, &low, &pairs, 0.5).unwrap().len(), 3);
    }

    #[test]
    fn collinear_merge_is_the_enclosing_rectangle() {
        let segs = [seg(0.0, 0.0, 40.0, 20.0, 0.0), seg(40.0, 0.0, 40.0, 20.0, 0.0)];
        let cluster = Cluster {
            members: vec![0, 1],
            links: vec![Link { a: 0, b: 1, score: 0.9 }],
        };
        let d = merge_cluster(&cluster, &segs).unwrap();
        let want = Polygon::from_segment(&seg(20.0, 0.0, 80.0, 20.0, 0.0));
        assert!(iou(&d.polygon, &want) >= 0.99);
        assert!((d.score - 0.9).abs() < 1e-12);
    }

    #[test]
    fn singleton_polygon_is_the_segment() {
        let segs = [seg(5.0, 5.0, 30.0, 10.0, 0.4)];
        let cluster = Cluster {
            members: vec![0],
            links: vec![],
        };
        let d = merge_cluster(&cluster, &segs).unwrap();
        assert_eq!(d.polygon, Polygon::from_segment(&segs[0]));
    }

    #[test]
    fn straight_chain_survives_smoothing() {
        let top: Vec<Point> = (0..5).map(|k| Point::new(k as f64 * 20.0, 10.0)).collect();
        let fit = tps_fit_chain(&top, 1.0, 32).unwrap();
        for p in fit {
            assert!((p.y - 10.0).abs() < 0.5 && p.x > -0.5 && p.x < 80.5);
        }
    }

    #[test]
    fn zero_segments_detect_nothing() {
        let c = CombinationScoreMap::from_probabilities(0, |_, _| 0.0);
        assert!(detect_with_scores(&[], &c, &DetectParams::default()).unwrap().is_empty());
    }
}
