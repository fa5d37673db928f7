//! Independent reference implementations shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::f64::consts::PI;

use puzzleseg::geom::{Point, Segment};
use puzzleseg::msgcn::CombinationScoreMap;
use rand::{Rng, RngExt};

pub fn random_segment<R: Rng>(rng: &mut R, extent: f64) -> Segment {
    let w = rng.random_range(2.0..30.0);
    let h = rng.random_range(1.0..w);
    Segment::new(
        rng.random_range(0.0..extent),
        rng.random_range(0.0..extent),
        w,
        h,
        rng.random_range(-PI / 2.0..PI / 2.0),
    )
    .unwrap()
}

/// A segment near `a`, so that the pair usually overlaps.
pub fn nearby_segment<R: Rng>(rng: &mut R, a: &Segment) -> Segment {
    let w = a.w * rng.random_range(0.5..1.5);
    let h = (a.h * rng.random_range(0.5..1.5)).min(w);
    Segment::new(
        a.x + rng.random_range(-0.6..0.6) * a.w,
        a.y + rng.random_range(-0.6..0.6) * a.w,
        w,
        h,
        rng.random_range(-PI / 2.0..PI / 2.0),
    )
    .unwrap()
}

/// Point-in-rectangle by projection onto the rectangle's own axes.
fn inside(s: &Segment, p: Point) -> bool {
    let (c, sn) = (s.theta.cos(), s.theta.sin());
    let (dx, dy) = (p.x - s.x, p.y - s.y);
    let u = dx * c + dy * sn;
    let v = -dx * sn + dy * c;
    u.abs() <= s.w / 2.0 && v.abs() <= s.h / 2.0
}

/// IoU estimated from `samples` random points over the joint bounding box,
/// stratified as one jittered point per cell of a square grid.
pub fn monte_carlo_iou<R: Rng>(a: &Segment, b: &Segment, samples: usize, rng: &mut R) -> f64 {
    let pts: Vec<Point> = a.vertices().into_iter().chain(b.vertices()).collect();
    let (x0, x1) = pts.iter().fold((f64::MAX, f64::MIN), |m, p| (m.0.min(p.x), m.1.max(p.x)));
    let (y0, y1) = pts.iter().fold((f64::MAX, f64::MIN), |m, p| (m.0.min(p.y), m.1.max(p.y)));
    let side = (samples as f64).sqrt().ceil() as usize;
    let (cw, ch) = ((x1 - x0) / side as f64, (y1 - y0) / side as f64);
    let (mut both, mut either) = (0usize, 0usize);
    for i in 0..side {
        for j in 0..side {
            let p = Point::new(
                x0 + (i as f64 + rng.random_range(0.0..1.0)) * cw,
                y0 + (j as f64 + rng.random_range(0.0..1.0)) * ch,
            );
            let (ia, ib) = (inside(a, p), inside(b, p));
            if ia && ib {
                both += 1;
            }
            if ia || ib {
                either += 1;
            }
        }
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

/// Orientation difference modulo pi, in [0, pi/2].
pub fn orientation_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}

/// Greedy suppression written as "keep i unless a better kept j suppresses
/// it", scanning all pairs.
pub fn brute_nms(segs: &[Segment], scores: &[f64], iou: &dyn Fn(usize, usize) -> f64, iou_t: f64, angle_t: f64) -> Vec<usize> {
    let n = segs.len();
    let better = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let mut rank: Vec<usize> = (0..n).collect();
    rank.sort_by(|&i, &j| {
        if better(i, j) {
            std::cmp::Ordering::Less
        } else if better(j, i) {
            std::cmp::Ordering::Greater
        } else {
            std::cmp::Ordering::Equal
        }
    });
    let mut kept = vec![false; n];
    for &i in &rank {
        kept[i] = !(0..n).any(|j| {
            kept[j] && better(j, i) && orientation_gap(segs[i].theta, segs[j].theta) < angle_t && iou(i, j) > iou_t
        });
    }
    rank.into_iter().filter(|&i| kept[i]).collect()
}

pub fn brute_knnr(segs: &[Segment], k: usize, alpha: f64) -> Vec<Vec<usize>> {
    (0..segs.len())
        .map(|m| {
            let r = alpha * (segs[m].w * segs[m].w + segs[m].h * segs[m].h).sqrt();
            let mut all: Vec<(f64, usize)> = (0..segs.len())
                .filter(|&n| n != m)
                .map(|n| (((segs[m].x - segs[n].x).powi(2) + (segs[m].y - segs[n].y).powi(2)).sqrt(), n))
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            all.into_iter().take(k).filter(|&(d, _)| d < r).map(|(_, n)| n).collect()
        })
        .collect()
}

/// Connected components (by depth-first search) of the accepted
/// best-candidate edges, as sorted member sets.
pub fn grouping_oracle(n: usize, scores: &CombinationScoreMap, lists: &[Vec<usize>], tau: f64) -> BTreeSet<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for m in 0..n {
        let mut best: Option<usize> = None;
        for &q in &lists[m] {
            best = match best {
                Some(b) if scores.score(m, b) > scores.score(m, q) => Some(b),
                Some(b) if scores.score(m, b) == scores.score(m, q) && b < q => Some(b),
                _ => Some(q),
            };
        }
        if let Some(q) = best {
            if scores.score(m, q) > tau {
                adj[m].push(q);
                adj[q].push(m);
            }
        }
    }
    let mut seen = vec![false; n];
    let mut out = BTreeSet::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        let mut stack = vec![s];
        let mut comp = Vec::new();
        seen[s] = true;
        while let Some(x) = stack.pop() {
            comp.push(x);
            for &y in &adj[x] {
                if !seen[y] {
                    seen[y] = true;
                    stack.push(y);
                }
            }
        }
        comp.sort();
        out.insert(comp);
    }
    out
}
