//! Detection and pairing metrics.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Polygon;
use crate::msgcn::{CombinationLabelMap, CombinationScoreMap, PairLabel};
use crate::postproc::{Cluster, PairCandidates};
use crate::raster::pixel_overlap;

pub const IOU_THRESHOLD: f64 = 0.5;

/// Pixel-center rasterized IoU; 0 when either polygon covers no pixel.
pub fn polygon_iou(a: &Polygon, b: &Polygon) -> f64 {
    if !a.bbox().intersects(&b.bbox()) {
        return 0.0;
    }
    let (i, na, nb) = pixel_overlap(a.vertices(), b.vertices());
    if na == 0 || nb == 0 {
        return 0.0;
    }
    i as f64 / (na + nb - i) as f64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    pub fn prf(&self) -> Prf {
        Prf::from_counts(*self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    /// Set when there was nothing to detect and nothing detected; the
    /// scores are then reported as 1.
    pub vacuous: bool,
}

impl Prf {
    pub fn from_counts(c: Counts) -> Self {
        let dets = c.tp + c.fp;
        let gts = c.tp + c.fn_;
        if dets == 0 && gts == 0 {
            return Self {
                precision: 1.0,
                recall: 1.0,
                f_measure: 1.0,
                vacuous: true,
            };
        }
        let precision = if dets == 0 { 0.0 } else { c.tp as f64 / dets as f64 };
        let recall = if gts == 0 { 0.0 } else { c.tp as f64 / gts as f64 };
        let f_measure = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f_measure,
            vacuous: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    pub counts: Counts,
    pub prf: Prf,
    /// `(detection, gt, iou)` for every true positive.
    pub matches: Vec<(usize, usize, f64)>,
}

/// Greedy one-to-one matching by descending IoU; a pair counts when its
/// IoU reaches `iou_thresh`. Equal IoUs resolve by detection then gt index.
pub fn evaluate_prf(dets: &[Polygon], gts: &[Polygon], iou_thresh: f64) -> Matching {
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let iou = polygon_iou(d, g);
            if iou >= iou_thresh {
                cands.push((iou, i, j));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut det_used = vec![false; dets.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut matches = Vec::new();
    for (iou, i, j) in cands {
        if !det_used[i] && !gt_used[j] {
            det_used[i] = true;
            gt_used[j] = true;
            matches.push((i, j, iou));
        }
    }
    let tp = matches.len();
    let counts = Counts {
        tp,
        fp: dets.len() - tp,
        fn_: gts.len() - tp,
    };
    Matching {
        counts,
        prf: counts.prf(),
        matches,
    }
}

/// Pair classification counts over the kNNR candidate positions, predicting
/// "combined" when the score exceeds `tau`.
pub fn pair_counts(
    scores: &CombinationScoreMap,
    labels: &CombinationLabelMap,
    pairs: &PairCandidates,
    tau: f64,
) -> Result<Counts> {
    if scores.len() != labels.len() || pairs.len() != labels.len() {
        return Err(Error::Shape("score map, labels and candidates disagree in size".into()));
    }
    let mut c = Counts::default();
    for (m, n) in pairs.positions() {
        let truth = match labels.get(m, n) {
            PairLabel::Ignore => continue,
            PairLabel::Combined => true,
            PairLabel::Separate => false,
        };
        match (scores.score(m, n) > tau, truth) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

/// Instances whose segment set equals one predicted cluster exactly, and
/// the number of instances that own at least one segment.
pub fn cluster_matches(clusters: &[Cluster], owners: &[Option<usize>]) -> (usize, usize) {
    let n_inst = owners.iter().flatten().map(|k| k + 1).max().unwrap_or(0);
    let mut truth: Vec<Vec<usize>> = vec![Vec::new(); n_inst];
    for (i, o) in owners.iter().enumerate() {
        if let Some(k) = o {
            truth[*k].push(i);
        }
    }
    let present: Vec<&Vec<usize>> = truth.iter().filter(|t| !t.is_empty()).collect();
    let matched = present
        .iter()
        .filter(|t| clusters.iter().any(|c| &c.members == **t))
        .count();
    (matched, present.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneResult {
    pub scene_id: u64,
    pub counts: Counts,
}

/// `scene_id,tp,fp,fn,P,R,F` with six decimals, plus a final `total` row.
pub fn results_csv(rows: &[SceneResult]) -> String {
    let mut out = String::from("scene_id,tp,fp,fn,P,R,F\n");
    let mut total = Counts::default();
    let mut line = |id: &str, c: Counts| {
        let p = c.prf();
        let _ = writeln!(
            out,
            "{id},{},{},{},{:.6},{:.6},{:.6}",
            c.tp, c.fp, c.fn_, p.precision, p.recall, p.f_measure
        );
    };
    for r in rows {
        line(&r.scene_id.to_string(), r.counts);
        total.add(r.counts);
    }
    line("total", total);
    out
}

pub fn write_results_csv(path: &Path, rows: &[SceneResult]) -> Result<()> {
    std::fs::write(path, results_csv(rows)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Point;

    fn square(x: f64, y: f64, s: f64) -> Polygon {
        Polygon::new(vec![
            Point::new(x, y),
            Point::new(x + s, y),
            Point::new(x + s, y + s),
            Point::new(x, y + s),
        ])
        .unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = square(0.0, 0.0, 20.0);
        assert!((polygon_iou(&a, &a) - 1.0).abs() < 0.01);
        assert_eq!(polygon_iou(&a, &square(50.0, 0.0, 20.0)), 0.0);
        let half = Polygon::new(vec![
            Point::new(10.0, 0.0),
            Point::new(30.0, 0.0),
            Point::new(30.0, 20.0),
            Point::new(10.0, 20.0),
        ])
        .unwrap();
        assert!((polygon_iou(&a, &half) - 1.0 / 3.0).abs() < 0.01);
    }

    #[test]
    fn prf_examples() {
        let gts = vec![square(0.0, 0.0, 10.0), square(20.0, 0.0, 10.0), square(40.0, 0.0, 10.0)];
        let same = evaluate_prf(&gts, &gts, 0.5);
        assert_eq!((same.prf.precision, same.prf.recall, same.prf.f_measure), (1.0, 1.0, 1.0));
        let none = evaluate_prf(&[], &gts, 0.5);
        assert_eq!(none.prf.recall, 0.0);
        let empty = evaluate_prf(&[], &[], 0.5);
        assert!(empty.prf.vacuous && empty.prf.f_measure == 1.0);
    }

    #[test]
    fn csv_has_total_row() {
        let rows = [SceneResult {
            scene_id: 4,
            counts: Counts { tp: 1, fp: 1, fn_: 0 },
        }];
        let csv = results_csv(&rows);
        assert_eq!(
            csv,
            "scene_id,tp,fp,fn,P,R,F\n4,1,1,0,0.500000,1.000000,0.666667\ntotal,1,1,0,0.500000,1.000000,0.666667\n"
        );
    }

    #[test]
    fn cluster_match_needs_exact_sets() {
        let owners = [Some(0), Some(0), Some(1), None];
        let c = |m: Vec<usize>| Cluster { members: m, links: vec![] };
        assert_eq!(cluster_matches(&[c(vec![0, 1]), c(vec![2]), c(vec![3])], &owners), (2, 2));
        assert_eq!(cluster_matches(&[c(vec![0, 1, 2]), c(vec![3])], &owners), (0, 2));
    }
}
