//! Learned multiple-similarity kernel and the adjacency matrices it induces.
//!
//! `K(x1, x2) = b1 cos(y1, y2) + b2 exp(-|y1 - y2|^2 / 2s^2)
//!            + b3 exp(-JSD(softmax y1, softmax y2) / 2s^2)`
//! with `y1 = W1 x1`, `y2 = W2 x2` and `b = softmax(beta_logits)`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SIGMA: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelMode {
    /// Learned convex combination of cosine, Gaussian and Jensen-Shannon.
    Multi,
    /// Cosine similarity alone; the mixing weights are frozen.
    CosineOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityParams {
    pub beta_logits: Array1<f64>,
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
    pub sigma: f64,
    pub mode: KernelMode,
}

impl SimilarityParams {
    pub fn identity(d: usize) -> Self {
        Self {
            beta_logits: Array1::zeros(3),
            w1: Array2::eye(d),
            w2: Array2::eye(d),
            sigma: DEFAULT_SIGMA,
            mode: KernelMode::Multi,
        }
    }

    /// Transforms drawn from `U(-1/sqrt(d), 1/sqrt(d))`, equal mixing weights.
    pub fn random<R: Rng>(d: usize, mode: KernelMode, rng: &mut R) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut draw = || Array2::from_shape_fn((d, d), |_| rng.random_range(-bound..bound));
        let w1 = draw();
        let w2 = draw();
        Self {
            beta_logits: Array1::zeros(3),
            w1,
            w2,
            sigma: DEFAULT_SIGMA,
            mode,
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.ncols()
    }

    /// Mixing weights on the probability simplex.
    pub fn beta(&self) -> [f64; 3] {
        match self.mode {
            KernelMode::CosineOnly => [1.0, 0.0, 0.0],
            KernelMode::Multi => {
                let l = &self.beta_logits;
                let m = l.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                [e[0] / s, e[1] / s, e[2] / s]
            }
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            beta_logits: Array1::zeros(3),
            w1: Array2::zeros(self.w1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            sigma: self.sigma,
            mode: self.mode,
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        if self.w1.dim() != (d, d) || self.w2.dim() != (d, d) || self.beta_logits.len() != 3 {
            return Err(Error::Shape(format!(
                "similarity params are {:?}/{:?}, features have dim {d}",
                self.w1.dim(),
                self.w2.dim()
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidInput(format!("sigma must be > 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    v.iter_mut().for_each(|x| *x /= s);
}

fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// Jensen-Shannon divergence (natural log).
pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        acc += 0.5 * (xlogx(a) + xlogx(b)) - xlogx(0.5 * (a + b));
    }
    acc.max(0.0)
}

/// Scalar kernel between two feature vectors.
pub fn kernel_eval(x1: &[f64], x2: &[f64], p: &SimilarityParams) -> Result<f64> {
    let d = x1.len();
    if x2.len() != d {
        return Err(Error::Shape(format!("kernel inputs of dim {d} and {}", x2.len())));
    }
    p.validate(d)?;
    let apply = |w: &Array2<f64>, x: &[f64]| -> Vec<f64> {
        (0..d).map(|r| (0..d).map(|c| w[[r, c]] * x[c]).sum()).collect()
    };
    let y1 = apply(&p.w1, x1);
    let y2 = apply(&p.w2, x2);
    let n1 = y1.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n2 = y2.iter().map(|v| v * v).sum::<f64>().sqrt();
    let k1 = if n1 > 0.0 && n2 > 0.0 {
        y1.iter().zip(&y2).map(|(a, b)| a * b).sum::<f64>() / (n1 * n2)
    } else {
        0.0
    };
    let two_s2 = 2.0 * p.sigma * p.sigma;
    let k2 = (-y1.iter().zip(&y2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / two_s2).exp();
    let (mut p1, mut p2) = (y1.clone(), y2.clone());
    softmax_in_place(&mut p1);
    softmax_in_place(&mut p2);
    let k3 = (-jsd(&p1, &p2) / two_s2).exp();
    let b = p.beta();
    Ok(b[0] * k1 + b[1] * k2 + b[2] * k3)
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AdjacencyCache {
    x: Array2<f64>,
    y1: Array2<f64>,
    y2: Array2<f64>,
    n1: Array1<f64>,
    n2: Array1<f64>,
    p1: Array2<f64>,
    p2: Array2<f64>,
    k1: Array2<f64>,
    k2: Array2<f64>,
    k3: Array2<f64>,
    beta: [f64; 3],
}

/// `G[i][j] = K(x_i, x_j)` over all ordered pairs, diagonal included.
pub fn build_adjacency(x: ArrayView2<f64>, p: &SimilarityParams) -> Result<(Array2<f64>, AdjacencyCache)> {
    let (n, d) = x.dim();
    p.validate(d)?;
    let y1 = x.dot(&p.w1.t());
    let y2 = x.dot(&p.w2.t());
    let n1 = y1.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let n2 = y2.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let beta = p.beta();
    let multi = p.mode == KernelMode::Multi;

    let dots = y1.dot(&y2.t());
    let k1 = Array2::from_shape_fn((n, n), |(i, j)| {
        if n1[i] > 0.0 && n2[j] > 0.0 {
            dots[[i, j]] / (n1[i] * n2[j])
        } else {
            0.0
        }
    });

    let (mut p1, mut p2) = (y1.clone(), y2.clone());
    let mut k2 = Array2::zeros((n, n));
    let mut k3 = Array2::zeros((n, n));
    if multi {
        let two_s2 = 2.0 * p.sigma * p.sigma;
        for mut r in p1.rows_mut() {
            softmax_in_place(r.as_slice_mut().expect("standard layout"));
        }
        for mut r in p2.rows_mut() {
            softmax_in_place(r.as_slice_mut().expect("standard layout"));
        }
        let ent1: Vec<f64> = p1.rows().into_iter().map(|r| r.iter().map(|&v| xlogx(v)).sum()).collect();
        let ent2: Vec<f64> = p2.rows().into_iter().map(|r| r.iter().map(|&v| xlogx(v)).sum()).collect();
        for i in 0..n {
            let a = y1.row(i);
            let pa = p1.row(i);
            let (a, pa) = (a.as_slice().unwrap(), pa.as_slice().unwrap());
            for j in 0..n {
                let b = y2.row(j);
                let pb = p2.row(j);
                let (b, pb) = (b.as_slice().unwrap(), pb.as_slice().unwrap());
                let mut sq = 0.0;
                let mut mlogm = 0.0;
                for k in 0..d {
                    let diff = a[k] - b[k];
                    sq += diff * diff;
                    mlogm += xlogx(0.5 * (pa[k] + pb[k]));
                }
                let js = (0.5 * (ent1[i] + ent2[j]) - mlogm).max(0.0);
                k2[[i, j]] = (-sq / two_s2).exp();
                k3[[i, j]] = (-js / two_s2).exp();
            }
        }
    }

    let g = &k1 * beta[0] + &k2 * beta[1] + &k3 * beta[2];
    let cache = AdjacencyCache {
        x: x.to_owned(),
        y1,
        y2,
        n1,
        n2,
        p1,
        p2,
        k1,
        k2,
        k3,
        beta,
    };
    Ok((g, cache))
}

/// Backpropagates `d_g` (same shape as the adjacency) into the kernel
/// parameters and the node features. Returns `(param_grads, d_x)`.
pub fn adjacency_backward(
    cache: &AdjacencyCache,
    p: &SimilarityParams,
    d_g: ArrayView2<f64>,
) -> (SimilarityParams, Array2<f64>) {
    let (n, d) = cache.x.dim();
    let beta = cache.beta;
    let mut grads = p.zeros_like();

    if p.mode == KernelMode::Multi {
        let db = [
            (&d_g * &cache.k1).sum(),
            (&d_g * &cache.k2).sum(),
            (&d_g * &cache.k3).sum(),
        ];
        let dot: f64 = (0..3).map(|k| beta[k] * db[k]).sum();
        for k in 0..3 {
            grads.beta_logits[k] = beta[k] * (db[k] - dot);
        }
    }

    let mut dy1 = Array2::<f64>::zeros((n, d));
    let mut dy2 = Array2::<f64>::zeros((n, d));

    // cosine term
    let mut ccos = Array2::<f64>::zeros((n, n));
    let mut self1 = Array1::<f64>::zeros(n);
    let mut self2 = Array1::<f64>::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (cache.n1[i], cache.n2[j]);
            if a > 0.0 && b > 0.0 {
                let g = d_g[[i, j]] * beta[0];
                ccos[[i, j]] = g / (a * b);
                let gc = g * cache.k1[[i, j]];
                self1[i] += gc / (a * a);
                self2[j] += gc / (b * b);
            }
        }
    }
    dy1 += &ccos.dot(&cache.y2);
    dy2 += &ccos.t().dot(&cache.y1);
    dy1 -= &(&cache.y1 * &self1.view().insert_axis(Axis(1)));
    dy2 -= &(&cache.y2 * &self2.view().insert_axis(Axis(1)));

    if p.mode == KernelMode::Multi {
        let s2 = p.sigma * p.sigma;
        // Gaussian term
        let e = &d_g * &cache.k2 * (beta[1] / s2);
        let row = e.sum_axis(Axis(1));
        let col = e.sum_axis(Axis(0));
        dy1 += &e.dot(&cache.y2);
        dy1 -= &(&cache.y1 * &row.view().insert_axis(Axis(1)));
        dy2 += &e.t().dot(&cache.y1);
        dy2 -= &(&cache.y2 * &col.view().insert_axis(Axis(1)));

        // Jensen-Shannon term: dJ/dp = 0.5 ln(p/m), dJ/dq = 0.5 ln(q/m)
        let mut dp1 = Array2::<f64>::zeros((n, d));
        let mut dp2 = Array2::<f64>::zeros((n, d));
        for i in 0..n {
            for j in 0..n {
                let dj = -d_g[[i, j]] * beta[2] * cache.k3[[i, j]] / (2.0 * s2);
                if dj == 0.0 {
                    continue;
                }
                for k in 0..d {
                    let a = cache.p1[[i, k]];
                    let b = cache.p2[[j, k]];
                    let lm = (0.5 * (a + b)).ln();
                    if a > 0.0 {
                        dp1[[i, k]] += 0.5 * dj * (a.ln() - lm);
                    }
                    if b > 0.0 {
                        dp2[[j, k]] += 0.5 * dj * (b.ln() - lm);
                    }
                }
            }
        }
        dy1 += &softmax_backward(&cache.p1, &dp1);
        dy2 += &softmax_backward(&cache.p2, &dp2);
    }

    grads.w1 = dy1.t().dot(&cache.x);
    grads.w2 = dy2.t().dot(&cache.x);
    let dx = dy1.dot(&p.w1) + dy2.dot(&p.w2);
    (grads, dx)
}

/// Row-wise softmax Jacobian-vector product.
fn softmax_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let inner = (p * dp).sum_axis(Axis(1));
    p * &(dp - &inner.insert_axis(Axis(1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_inputs_hit_every_kernel_maximum() {
        let p = SimilarityParams::identity(4);
        let x = [0.3, -1.0, 2.0, 0.5];
        assert!((kernel_eval(&x, &x, &p).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_unit_vectors_closed_form() {
        let x1 = [1.0, 0.0, 0.0];
        let x2 = [0.0, 1.0, 0.0];
        let cos_only = SimilarityParams {
            beta_logits: Array1::from(vec![50.0, -50.0, -50.0]),
            ..SimilarityParams::identity(3)
        };
        assert!(kernel_eval(&x1, &x2, &cos_only).unwrap().abs() < 1e-12);
        let gauss = SimilarityParams {
            beta_logits: Array1::from(vec![-50.0, 50.0, -50.0]),
            ..SimilarityParams::identity(3)
        };
        let want = (-1.0f64 / 25.0).exp();
        assert!((kernel_eval(&x1, &x2, &gauss).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn jsd_of_identical_distributions_is_zero() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(jsd(&p, &p), 0.0);
        assert!((jsd(&[1.0, 0.0], &[0.0, 1.0]) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_projection_drops_cosine_term() {
        let p = SimilarityParams {
            beta_logits: Array1::from(vec![50.0, -50.0, -50.0]),
            ..SimilarityParams::identity(2)
        };
        // the other two kernels keep a weight of about e^-100
        assert!(kernel_eval(&[0.0, 0.0], &[1.0, 0.0], &p).unwrap().abs() < 1e-40);
    }

    #[test]
    fn adjacency_shapes_and_symmetry() {
        let x = Array2::from_shape_vec((1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let (g, _) = build_adjacency(x.view(), &SimilarityParams::identity(3)).unwrap();
        assert_eq!(g.dim(), (1, 1));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((6, 5), |_| rng.random_range(-1.0..1.0));
        let (g, _) = build_adjacency(x.view(), &SimilarityParams::identity(5)).unwrap();
        for i in 0..6 {
            assert!((g[[i, i]] - 1.0).abs() < 1e-12);
            for j in 0..6 {
                assert!((g[[i, j]] - g[[j, i]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cosine_only_freezes_mixing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = SimilarityParams::random(4, KernelMode::CosineOnly, &mut rng);
        assert_eq!(p.beta(), [1.0, 0.0, 0.0]);
        let x = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let (g, cache) = build_adjacency(x.view(), &p).unwrap();
        let (grads, _) = adjacency_backward(&cache, &p, g.view());
        assert!(grads.beta_logits.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let x = Array2::<f64>::zeros((2, 3));
        assert!(build_adjacency(x.view(), &SimilarityParams::identity(4)).is_err());
        assert!(kernel_eval(&[1.0], &[1.0, 2.0], &SimilarityParams::identity(1)).is_err());
    }
}
