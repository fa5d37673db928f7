use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::CombinationScoreMap;
use crate::error::{Error, Result};
use crate::geom::{Polygon, Segment};
use crate::gt_segments::membership_ratio;
use crate::gt_segments::MEMBERSHIP_RATIO;
use crate::postproc::PairCandidates;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairLabel {
    Separate,
    Combined,
    Ignore,
}

/// Target for every ordered segment pair, indexed `p * N + q`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CombinationLabelMap {
    n: usize,
    labels: Vec<PairLabel>,
}

impl CombinationLabelMap {
    /// Label map from per-segment polygon owners: `U[p][q] = 1` iff `p` and
    /// `q` share an owner and `q` is a candidate of `p`.
    pub fn from_owners(owners: &[Option<usize>], pairs: &PairCandidates) -> Result<Self> {
        let n = owners.len();
        if pairs.len() != n {
            return Err(Error::Shape(format!(
                "{} candidate lists for {n} segments",
                pairs.len()
            )));
        }
        let mut labels = vec![PairLabel::Separate; n * n];
        for p in 0..n {
            labels[p * n + p] = PairLabel::Ignore;
            let Some(op) = owners[p] else { continue };
            for &q in pairs.neighbors(p) {
                if q != p && owners[q] == Some(op) {
                    labels[p * n + q] = PairLabel::Combined;
                }
            }
        }
        Ok(Self { n, labels })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, p: usize, q: usize) -> PairLabel {
        self.labels[p * self.n + q]
    }

    pub fn set(&mut self, p: usize, q: usize, label: PairLabel) {
        self.labels[p * self.n + q] = label;
    }

    pub fn as_slice(&self) -> &[PairLabel] {
        &self.labels
    }

    /// An all-separate map with an ignored diagonal.
    pub fn separate(n: usize) -> Self {
        let mut labels = vec![PairLabel::Separate; n * n];
        for p in 0..n {
            labels[p * n + p] = PairLabel::Ignore;
        }
        Self { n, labels }
    }
}

/// Index of the polygon a segment belongs to: the one with the highest
/// membership ratio, provided it passes the 0.8 rule.
pub fn segment_owner(s: &Segment, polygons: &[Polygon]) -> Result<Option<usize>> {
    let mut best: Option<(usize, f64)> = None;
    for (k, poly) in polygons.iter().enumerate() {
        let r = membership_ratio(s, poly)?;
        if r > MEMBERSHIP_RATIO && best.is_none_or(|(_, b)| r > b) {
            best = Some((k, r));
        }
    }
    Ok(best.map(|(k, _)| k))
}

pub fn make_label_map(
    segments: &[Segment],
    gt_polygons: &[Polygon],
    pairs: &PairCandidates,
) -> Result<CombinationLabelMap> {
    let owners = segments
        .iter()
        .map(|s| segment_owner(s, gt_polygons))
        .collect::<Result<Vec<_>>>()?;
    CombinationLabelMap::from_owners(&owners, pairs)
}

fn check(c: &CombinationScoreMap, u: &CombinationLabelMap) -> Result<()> {
    if c.len() != u.len() {
        return Err(Error::Shape(format!(
            "score map over {} nodes, labels over {}",
            c.len(),
            u.len()
        )));
    }
    Ok(())
}

/// Mean negative log-likelihood of the labelled class over non-ignored
/// positions; 0 when every position is ignored.
pub fn combination_loss(c: &CombinationScoreMap, u: &CombinationLabelMap) -> Result<f64> {
    Ok(combination_loss_grad(c, u)?.0)
}

/// Loss and its gradient w.r.t. the `N*N x 2` logits behind `c`.
pub fn combination_loss_grad(c: &CombinationScoreMap, u: &CombinationLabelMap) -> Result<(f64, Array2<f64>)> {
    check(c, u)?;
    let n = c.len();
    let mut grad = Array2::zeros((n * n, 2));
    let count = u.labels.iter().filter(|l| **l != PairLabel::Ignore).count();
    if count == 0 {
        return Ok((0.0, grad));
    }
    let logits = c.logits();
    let probs = c.probs();
    let mut total = 0.0;
    for (r, label) in u.labels.iter().enumerate() {
        let t = match label {
            PairLabel::Ignore => continue,
            PairLabel::Separate => 0,
            PairLabel::Combined => 1,
        };
        // log-softmax from logits keeps tiny probabilities finite
        let (a, b) = (logits[[r, 0]], logits[[r, 1]]);
        let m = a.max(b);
        let lse = m + ((a - m).exp() + (b - m).exp()).ln();
        total += lse - logits[[r, t]];
        grad[[r, 0]] = probs[[r, 0]];
        grad[[r, 1]] = probs[[r, 1]];
        grad[[r, t]] -= 1.0;
    }
    let inv = 1.0 / count as f64;
    grad *= inv;
    Ok((total * inv, grad))
}
