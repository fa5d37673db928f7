//! Rotated anchor grids, target assignment, box regression and detection
//! losses for the segment proposal stage.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{angle_diff, normalize_angle, skew_iou, wrap_angle_delta, Segment};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorLevel {
    pub stride: u32,
    /// Anchor area in square pixels.
    pub area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub levels: Vec<AnchorLevel>,
    pub orientations: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            levels: [(4, 32.0), (8, 64.0), (16, 128.0), (32, 256.0)]
                .into_iter()
                .map(|(stride, side)| AnchorLevel {
                    stride,
                    area: side * side,
                })
                .collect(),
            orientations: vec![-PI / 6.0, 0.0, PI / 6.0, PI / 3.0, PI / 2.0, 2.0 * PI / 3.0],
            aspect_ratios: vec![1.5, 2.0, 2.5],
        }
    }
}

impl AnchorConfig {
    pub fn shapes_per_location(&self) -> usize {
        self.orientations.len() * self.aspect_ratios.len()
    }
}

/// Anchors for every pyramid level, laid out row-major over grid cells with
/// all shapes of one cell contiguous.
pub fn generate_anchors(cfg: &AnchorConfig, image_w: u32, image_h: u32) -> Result<Vec<Vec<Segment>>> {
    let mut out = Vec::with_capacity(cfg.levels.len());
    for level in &cfg.levels {
        if level.stride == 0 || !(level.area > 0.0) {
            return Err(Error::InvalidInput(format!("bad anchor level {level:?}")));
        }
        let cols = image_w.div_ceil(level.stride);
        let rows = image_h.div_ceil(level.stride);
        let mut shapes = Vec::with_capacity(cfg.shapes_per_location());
        for &theta in &cfg.orientations {
            let theta = normalize_angle(theta)?;
            for &ratio in &cfg.aspect_ratios {
                if !(ratio >= 1.0) {
                    return Err(Error::InvalidInput(format!("aspect ratio {ratio} < 1")));
                }
                shapes.push(((level.area * ratio).sqrt(), (level.area / ratio).sqrt(), theta));
            }
        }
        let s = level.stride as f64;
        let mut anchors = Vec::with_capacity((rows * cols) as usize * shapes.len());
        for r in 0..rows {
            for c in 0..cols {
                let (x, y) = ((c as f64 + 0.5) * s, (r as f64 + 0.5) * s);
                for &(w, h, theta) in &shapes {
                    anchors.push(Segment { x, y, w, h, theta });
                }
            }
        }
        out.push(anchors);
    }
    Ok(out)
}

/// Normalized offsets of a ground-truth segment relative to an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionTarget(pub [f64; 5]);

pub fn encode(gt: &Segment, anchor: &Segment) -> Result<RegressionTarget> {
    if !(gt.w > 0.0 && gt.h > 0.0 && anchor.w > 0.0 && anchor.h > 0.0) {
        return Err(Error::InvalidInput("non-positive segment side".into()));
    }
    Ok(RegressionTarget([
        (gt.x - anchor.x) / anchor.w,
        (gt.y - anchor.y) / anchor.h,
        (gt.w / anchor.w).ln(),
        (gt.h / anchor.h).ln(),
        wrap_angle_delta(gt.theta - anchor.theta),
    ]))
}

pub fn decode(t: &RegressionTarget, anchor: &Segment) -> Result<Segment> {
    if !(anchor.w > 0.0 && anchor.h > 0.0) {
        return Err(Error::InvalidInput("non-positive anchor side".into()));
    }
    let [vx, vy, vw, vh, vt] = t.0;
    Segment::new(
        anchor.x + vx * anchor.w,
        anchor.y + vy * anchor.h,
        anchor.w * vw.exp(),
        anchor.h * vh.exp(),
        anchor.theta + vt,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchParams {
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub angle_gate: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            pos_iou: 0.7,
            neg_iou: 0.3,
            angle_gate: PI / 12.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub labels: Vec<AnchorLabel>,
    /// Ground-truth index each anchor regresses to (positives only).
    pub matched: Vec<Option<usize>>,
}

/// Labels anchors against ground-truth segments. Ties in IoU resolve to the
/// lower ground-truth (or anchor) index.
pub fn assign_targets(anchors: &[Segment], gts: &[Segment], p: &MatchParams) -> Result<Assignment> {
    if anchors.is_empty() {
        return Err(Error::InvalidInput("no anchors".into()));
    }
    let mut labels = vec![AnchorLabel::Negative; anchors.len()];
    let mut matched = vec![None; anchors.len()];
    if gts.is_empty() {
        return Ok(Assignment { labels, matched });
    }

    let mut gt_best = vec![(f64::NEG_INFINITY, 0usize); gts.len()];
    for (a, anchor) in anchors.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (g, gt) in gts.iter().enumerate() {
            let iou = skew_iou(anchor, gt)?;
            if iou > best.0 {
                best = (iou, g);
            }
            if iou > gt_best[g].0 {
                gt_best[g] = (iou, a);
            }
        }
        let (iou, g) = best;
        labels[a] = if iou >= p.pos_iou && angle_diff(anchor.theta, gts[g].theta) < p.angle_gate {
            matched[a] = Some(g);
            AnchorLabel::Positive
        } else if iou < p.neg_iou {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        };
    }
    for (g, &(_, a)) in gt_best.iter().enumerate() {
        labels[a] = AnchorLabel::Positive;
        if matched[a].is_none() {
            matched[a] = Some(g);
        }
    }
    Ok(Assignment { labels, matched })
}

/// Quadratic below 1, linear above.
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * a * a
    } else {
        a - 0.5
    }
}

/// Two-class cross entropy of `logits` against the positive flag.
pub fn score_cross_entropy(logits: [f64; 2], positive: bool) -> f64 {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    lse - logits[usize::from(positive)]
}

/// `(L_reg, L_score)`: smoothed-L1 summed over the five offsets and averaged
/// over positives, and cross entropy averaged over positives and negatives.
pub fn detection_losses(
    pred_t: &[RegressionTarget],
    target_t: &[RegressionTarget],
    pred_scores: &[[f64; 2]],
    labels: &[AnchorLabel],
) -> Result<(f64, f64)> {
    let n = labels.len();
    if pred_t.len() != n || target_t.len() != n || pred_scores.len() != n {
        return Err(Error::Shape("detection loss inputs differ in length".into()));
    }
    let (mut reg, mut npos) = (0.0, 0usize);
    let (mut score, mut ncls) = (0.0, 0usize);
    for i in 0..n {
        match labels[i] {
            AnchorLabel::Positive => {
                reg += pred_t[i]
                    .0
                    .iter()
                    .zip(target_t[i].0)
                    .map(|(p, t)| smooth_l1(p - t))
                    .sum::<f64>();
                npos += 1;
                score += score_cross_entropy(pred_scores[i], true);
                ncls += 1;
            }
            AnchorLabel::Negative => {
                score += score_cross_entropy(pred_scores[i], false);
                ncls += 1;
            }
            AnchorLabel::Ignore => {}
        }
    }
    let l_reg = if npos > 0 { reg / npos as f64 } else { 0.0 };
    let l_score = if ncls > 0 { score / ncls as f64 } else { 0.0 };
    Ok((l_reg, l_score))
}

/// `L_reg + lambda1 * L_score + lambda2 * L_comb`.
pub fn multi_task_loss(l_reg: f64, l_score: f64, l_comb: f64, lambda1: f64, lambda2: f64) -> f64 {
    l_reg + lambda1 * l_score + lambda2 * l_comb
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OhemParams {
    /// Negatives kept per positive.
    pub neg_per_pos: usize,
    /// Negatives kept when a batch has no positives.
    pub empty_fallback: usize,
}

impl Default for OhemParams {
    fn default() -> Self {
        Self {
            neg_per_pos: 2,
            empty_fallback: 16,
        }
    }
}

/// Keeps every positive plus the hardest negatives. Returned indices are
/// ascending.
pub fn ohem_sample(per_anchor_loss: &[f64], labels: &[AnchorLabel], p: &OhemParams) -> Result<Vec<usize>> {
    if per_anchor_loss.len() != labels.len() {
        return Err(Error::Shape("loss and label lengths differ".into()));
    }
    if per_anchor_loss.iter().any(|l| !l.is_finite()) {
        return Err(Error::InvalidInput("non-finite anchor loss".into()));
    }
    let mut out: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == AnchorLabel::Positive)
        .collect();
    let mut negs: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == AnchorLabel::Negative)
        .collect();
    negs.sort_by(|&a, &b| per_anchor_loss[b].total_cmp(&per_anchor_loss[a]).then(a.cmp(&b)));
    let quota = if out.is_empty() {
        p.empty_fallback
    } else {
        p.neg_per_pos * out.len()
    };
    out.extend(negs.into_iter().take(quota));
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn seg(x: f64, y: f64, w: f64, h: f64, t: f64) -> Segment {
        Segment::new(x, y, w, h, t).unwrap()
    }

    #[test]
    fn anchor_counts_and_shapes() {
        let cfg = AnchorConfig::default();
        assert_eq!(cfg.shapes_per_location(), 18);
        let levels = generate_anchors(&cfg, 40, 40).unwrap();
        assert_eq!(levels[0].len(), 10 * 10 * 18);
        assert_eq!(levels[3].len(), 2 * 2 * 18);
        let a = levels[0].iter().find(|a| a.theta == 0.0 && (a.w / a.h - 2.0).abs() < 1e-9);
        let a = a.unwrap();
        assert!((a.w - 45.254_833_995_939_04).abs() < 1e-9);
        assert!((a.h - 22.627_416_997_969_52).abs() < 1e-9);
        for lvl in &levels {
            for a in lvl {
                assert!(a.theta >= -FRAC_PI_2 && a.theta < FRAC_PI_2);
                assert!(a.w >= a.h);
            }
        }
    }

    #[test]
    fn encode_examples() {
        let a = seg(0.0, 0.0, 40.0, 20.0, 0.0);
        assert_eq!(encode(&a, &a).unwrap().0, [0.0; 5]);
        let g = seg(4.0, 2.0, 40.0, 20.0, 0.0);
        let t = encode(&g, &a).unwrap().0;
        for (v, want) in t.iter().zip([0.1, 0.1, 0.0, 0.0, 0.0]) {
            assert!((v - want).abs() < 1e-15);
        }
        let bad = Segment { w: 0.0, ..a };
        assert!(encode(&g, &bad).is_err());
    }

    #[test]
    fn theta_offset_wraps_across_vertical() {
        let a = seg(0.0, 0.0, 40.0, 20.0, 1.5);
        let g = seg(0.0, 0.0, 40.0, 20.0, -1.5);
        let t = encode(&g, &a).unwrap();
        assert!((t.0[4] - (PI - 3.0)).abs() < 1e-12);
        let back = decode(&t, &a).unwrap();
        assert!(angle_diff(back.theta, g.theta) < 1e-12);
    }

    #[test]
    fn assignment_examples() {
        let gt = seg(50.0, 50.0, 40.0, 20.0, 0.3);
        let anchors = [gt, seg(300.0, 300.0, 40.0, 20.0, 0.0)];
        let asg = assign_targets(&anchors, &[gt], &MatchParams::default()).unwrap();
        assert_eq!(asg.labels, vec![AnchorLabel::Positive, AnchorLabel::Negative]);
        assert_eq!(asg.matched, vec![Some(0), None]);

        let none = assign_targets(&anchors, &[], &MatchParams::default()).unwrap();
        assert!(none.labels.iter().all(|l| *l == AnchorLabel::Negative));
        assert!(assign_targets(&[], &[gt], &MatchParams::default()).is_err());
    }

    #[test]
    fn weak_best_anchor_is_forced_positive() {
        let gt = seg(0.0, 0.0, 40.0, 20.0, 0.0);
        let anchors = [seg(30.0, 0.0, 40.0, 20.0, 0.0), seg(500.0, 0.0, 40.0, 20.0, 0.0)];
        let asg = assign_targets(&anchors, &[gt], &MatchParams::default()).unwrap();
        assert_eq!(asg.labels[0], AnchorLabel::Positive);
        assert_eq!(asg.matched[0], Some(0));
    }

    #[test]
    fn smooth_l1_pieces() {
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
        assert_eq!(smooth_l1(0.0), 0.0);
    }

    #[test]
    fn losses_vanish_on_perfect_predictions() {
        let t = RegressionTarget([0.1, -0.2, 0.3, 0.0, 0.05]);
        let labels = [AnchorLabel::Positive, AnchorLabel::Negative, AnchorLabel::Ignore];
        let scores = [[-40.0, 40.0], [40.0, -40.0], [0.0, 0.0]];
        let (reg, score) = detection_losses(&[t; 3], &[t; 3], &scores, &labels).unwrap();
        assert_eq!(reg, 0.0);
        assert!(score < 1e-30);
        let (reg, _) = detection_losses(&[t], &[t], &[[0.0, 0.0]], &[AnchorLabel::Negative]).unwrap();
        assert_eq!(reg, 0.0);
        assert_eq!(multi_task_loss(1.0, 2.0, 3.0, 1.0, 5.0), 18.0);
    }

    #[test]
    fn ohem_ratio_and_fallback() {
        let mut labels = vec![AnchorLabel::Positive; 10];
        labels.extend(vec![AnchorLabel::Negative; 100]);
        let losses: Vec<f64> = (0..110).map(|i| i as f64).collect();
        let sel = ohem_sample(&losses, &labels, &OhemParams::default()).unwrap();
        assert_eq!(sel.len(), 30);
        assert_eq!(&sel[10..], &(90..110).collect::<Vec<_>>()[..]);

        let labels = vec![AnchorLabel::Negative; 40];
        let losses = vec![1.0; 40];
        let sel = ohem_sample(&losses, &labels, &OhemParams::default()).unwrap();
        assert_eq!(sel, (0..16).collect::<Vec<_>>());
        let strict = OhemParams {
            empty_fallback: 0,
            ..OhemParams::default()
        };
        assert!(ohem_sample(&losses, &labels, &strict).unwrap().is_empty());
    }
}
