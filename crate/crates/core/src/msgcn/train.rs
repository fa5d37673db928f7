use log::{debug, info};
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{combination_loss, combination_loss_grad, CombinationLabelMap, MsgcnModel, PairLabel};
use crate::anchors::multi_task_loss;
use crate::error::{Error, Result};
use crate::features::GEOMETRY_DIM;

/// One training graph.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub appearance: Array2<f64>,
    pub geometry: Array2<f64>,
    pub labels: CombinationLabelMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epochs: usize,
    /// Scenes whose gradients are averaged per optimizer step.
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda1: 1.0,
            lambda2: 5.0,
            epochs: 10,
            batch: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.lambda2 >= 0.0
            && self.batch > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid training config {self:?}")))
        }
    }
}

/// Adam moments over the flattened parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut MsgcnModel, grads: &MsgcnModel, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        let gflat = grads.flat();
        let mut k = 0;
        for (_, p) in model.params_mut() {
            for x in p.iter_mut() {
                let g = gflat[k];
                self.m[k] = cfg.beta1 * self.m[k] + (1.0 - cfg.beta1) * g;
                self.v[k] = cfg.beta2 * self.v[k] + (1.0 - cfg.beta2) * g * g;
                let mh = self.m[k] / c1;
                let vh = self.v[k] / c2;
                *x -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
                k += 1;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    /// Mean combination loss of the scenes in this step.
    pub l_comb: f64,
}

/// Combination loss of one sample and the gradient of `scale * loss`.
pub fn sample_loss_grad(model: &MsgcnModel, sample: &TrainSample, scale: f64) -> Result<(f64, Option<MsgcnModel>)> {
    let (scores, cache) = model.forward(sample.appearance.view(), sample.geometry.view())?;
    let Some(cache) = cache else {
        return Ok((0.0, None));
    };
    let (loss, mut d_logits) = combination_loss_grad(&scores, &sample.labels)?;
    d_logits *= scale;
    Ok((loss, Some(model.backward(&cache, d_logits.view())?)))
}

/// Combination loss of one sample without gradients.
pub fn sample_loss(model: &MsgcnModel, sample: &TrainSample) -> Result<f64> {
    let (scores, _) = model.forward(sample.appearance.view(), sample.geometry.view())?;
    if scores.len() < 2 {
        return Ok(0.0);
    }
    combination_loss(&scores, &sample.labels)
}

fn accumulate(acc: &mut MsgcnModel, g: &MsgcnModel, w: f64) {
    let src = g.flat();
    let mut k = 0;
    for (_, p) in acc.params_mut() {
        for x in p.iter_mut() {
            *x += w * src[k];
            k += 1;
        }
    }
}

/// Minimizes `L_reg + lambda1 * L_score + lambda2 * L_comb`; without a
/// detection backbone the first two terms are zero. Scenes are shuffled
/// per epoch from `cfg.seed`, and each step averages gradients over
/// `cfg.batch` scenes in a fixed order.
pub fn train(model: &mut MsgcnModel, data: &[TrainSample], cfg: &TrainConfig) -> Result<Vec<LossPoint>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let mut adam = Adam::new(model.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for window in order.chunks(cfg.batch) {
            let results: Vec<Result<(f64, Option<MsgcnModel>)>> = window
                .par_iter()
                .map(|&i| sample_loss_grad(model, &data[i], 1.0))
                .collect();
            let mut grads = model.zeros_like();
            let mut loss_sum = 0.0;
            for r in results {
                let (loss, g) = r?;
                loss_sum += loss;
                if let Some(g) = g {
                    accumulate(&mut grads, &g, 1.0 / window.len() as f64);
                }
            }
            let l_comb = loss_sum / window.len() as f64;
            let total = multi_task_loss(0.0, 0.0, l_comb, cfg.lambda1, cfg.lambda2);
            if !total.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("loss {total} in epoch {epoch}"),
                });
            }
            // the gradient of lambda2 * L_comb
            let mut scaled = model.zeros_like();
            accumulate(&mut scaled, &grads, cfg.lambda2);
            if scaled.flat().iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    step,
                    detail: "non-finite gradient".into(),
                });
            }
            adam.step(model, &scaled, cfg);
            curve.push(LossPoint { step, l_comb });
            debug!("step {step}: L_comb {l_comb:.6}");
            step += 1;
        }
        if let Some(last) = curve.last() {
            info!("epoch {epoch}: last L_comb {:.6}", last.l_comb);
        }
    }
    Ok(curve)
}

/// Mean combination loss over a set of samples.
pub fn mean_loss(model: &MsgcnModel, data: &[TrainSample]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let losses = data
        .par_iter()
        .map(|s| sample_loss(model, s))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub count: usize,
    /// `|a - n| / max(|a|, |n|, 1e-6)` over the whole tensor (Euclidean norms).
    pub rel_err: f64,
    /// Worst single entry by [`relative_error`].
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

/// Below this gradient norm a tensor is compared absolutely; a bias behind
/// dead units has an exactly zero gradient and a roundoff-only difference.
const TENSOR_NORM_FLOOR: f64 = 1e-6;

/// Relative error with a floor on the denominator so that entries whose
/// true gradient is zero compare absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

/// Central finite differences of the combination loss against the
/// analytic gradient, for every scalar parameter.
pub fn gradient_check(model: &MsgcnModel, sample: &TrainSample, h: f64) -> Result<Vec<GradCheckEntry>> {
    let (_, grads) = sample_loss_grad(model, sample, 1.0)?;
    let grads = grads.ok_or_else(|| Error::InvalidInput("gradient check needs at least 2 segments".into()))?;
    let analytic = grads.params();
    let loss_at = |m: &MsgcnModel| sample_loss(m, sample);
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(analytic.len());
    for (t, (name, _, a)) in analytic.iter().enumerate() {
        let mut entry = GradCheckEntry {
            name: name.clone(),
            count: a.len(),
            rel_err: 0.0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for k in 0..a.len() {
            let orig = probe.params_mut()[t].1[k];
            probe.params_mut()[t].1[k] = orig + h;
            let up = loss_at(&probe)?;
            probe.params_mut()[t].1[k] = orig - h;
            let down = loss_at(&probe)?;
            probe.params_mut()[t].1[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            entry.max_rel_err = entry.max_rel_err.max(relative_error(a[k], numeric));
            entry.max_abs_err = entry.max_abs_err.max((a[k] - numeric).abs());
            diff2 += (a[k] - numeric).powi(2);
            a2 += a[k] * a[k];
            n2 += numeric * numeric;
        }
        entry.rel_err = diff2.sqrt() / a2.max(n2).sqrt().max(TENSOR_NORM_FLOOR);
        out.push(entry);
    }
    Ok(out)
}

/// A random graph for gradient checks: uniform features, normalized-range
/// geometry, and "combined" labels among nodes of equal index parity.
pub fn random_check_sample(n: usize, d: usize, seed: u64) -> TrainSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let appearance = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    let geometry = Array2::from_shape_fn((n, GEOMETRY_DIM), |(_, k)| {
        if k == 4 {
            rng.random_range(-1.5..1.5)
        } else {
            rng.random_range(0.0..1.0)
        }
    });
    let mut labels = CombinationLabelMap::separate(n);
    for p in 0..n {
        for q in 0..n {
            if p != q && p % 2 == q % 2 && rng.random_bool(0.7) {
                labels.set(p, q, PairLabel::Combined);
            }
        }
    }
    TrainSample {
        appearance,
        geometry,
        labels,
    }
}

/// Logit-gradient entry point for callers with their own loss.
pub fn backward_from(model: &MsgcnModel, app: ArrayView2<f64>, geom: ArrayView2<f64>, d_logits: ArrayView2<f64>) -> Result<MsgcnModel> {
    let (_, cache) = model.forward(app, geom)?;
    let cache = cache.ok_or_else(|| Error::InvalidInput("backward needs at least 2 segments".into()))?;
    model.backward(&cache, d_logits)
}
