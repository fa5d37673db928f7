//! Two-branch residual graph convolutional network that scores segment
//! pairs.
//!
//! Appearance features and (projected) geometry features each build their
//! own similarity graph and run three residual GCN layers over it. The two
//! outputs are concatenated per node and a pairwise MLP maps every ordered
//! node pair to two logits, normalized into the combination score map.
//! Gradients are computed by hand; [`train`] holds the optimizer.

mod labels;
pub mod train;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::GEOMETRY_DIM;
use crate::simgraph::{adjacency_backward, build_adjacency, AdjacencyCache, KernelMode, SimilarityParams};

pub use labels::{
    combination_loss, combination_loss_grad, make_label_map, segment_owner, CombinationLabelMap, PairLabel,
};

pub const GCN_DEPTH: usize = 3;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Both branches with the multiple-similarity kernel.
    Full,
    /// Appearance branch only.
    NoGeometry,
    /// Geometry branch only.
    NoAppearance,
    /// Both branches, cosine similarity only.
    SingleCosine,
}

impl Variant {
    fn kernel(self) -> KernelMode {
        match self {
            Variant::SingleCosine => KernelMode::CosineOnly,
            _ => KernelMode::Multi,
        }
    }

    pub fn has_appearance(self) -> bool {
        self != Variant::NoAppearance
    }

    pub fn has_geometry(self) -> bool {
        self != Variant::NoGeometry
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdjacencyScale {
    /// Use the kernel matrix as is.
    Raw,
    /// Divide by the node count.
    MeanByN,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Node feature width of every branch.
    pub d: usize,
    /// Width of the two hidden layers of the pair head.
    pub head_hidden: usize,
    pub variant: Variant,
    pub sigma: f64,
    pub adjacency: AdjacencyScale,
    /// Largest graph the model accepts.
    pub n_cap: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            head_hidden: 64,
            variant: Variant::Full,
            sigma: crate::simgraph::DEFAULT_SIGMA,
            adjacency: AdjacencyScale::Raw,
            n_cap: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnLayer {
    pub w: Array2<f64>,
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl GcnLayer {
    fn random<R: Rng>(d: usize, rng: &mut R) -> Self {
        Self {
            w: uniform((d, d), d, rng),
            gain: Array1::ones(d),
            bias: Array1::zeros(d),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.raw_dim()),
            gain: Array1::zeros(self.gain.len()),
            bias: Array1::zeros(self.bias.len()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    x: Array2<f64>,
    gx: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    pre: Array2<f64>,
}

/// `relu(layer_norm(G X W + X))`. Returns the output and the pre-norm sum.
pub fn gcn_layer_forward(
    g: ArrayView2<f64>,
    x: ArrayView2<f64>,
    layer: &GcnLayer,
) -> Result<(Array2<f64>, Array2<f64>, LayerCache)> {
    let (n, d) = x.dim();
    if g.dim() != (n, n) || layer.w.dim() != (d, d) || layer.gain.len() != d || layer.bias.len() != d {
        return Err(Error::Shape(format!(
            "gcn layer: G {:?}, X {:?}, W {:?}",
            g.dim(),
            x.dim(),
            layer.w.dim()
        )));
    }
    let gx = g.dot(&x);
    let z = gx.dot(&layer.w) + x;
    let mut xhat = z.clone();
    let mut inv_std = Array1::zeros(n);
    for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
        inv_std[i] = inv;
    }
    let pre = &xhat * &layer.gain + &layer.bias;
    let out = pre.mapv(|v| v.max(0.0));
    Ok((
        out,
        z,
        LayerCache {
            x: x.to_owned(),
            gx,
            xhat,
            inv_std,
            pre,
        },
    ))
}

/// Returns `(layer grads, dG, dX)`.
fn gcn_layer_backward(
    g: ArrayView2<f64>,
    layer: &GcnLayer,
    cache: &LayerCache,
    d_out: &Array2<f64>,
) -> (GcnLayer, Array2<f64>, Array2<f64>) {
    let d = layer.w.nrows();
    let d_pre = d_out * &cache.pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let d_gain = (&d_pre * &cache.xhat).sum_axis(Axis(0));
    let d_bias = d_pre.sum_axis(Axis(0));
    let d_xhat = &d_pre * &layer.gain;
    let mut d_z = d_xhat.clone();
    for (i, mut row) in d_z.rows_mut().into_iter().enumerate() {
        let xh = cache.xhat.row(i);
        let mean_d = row.sum() / d as f64;
        let mean_dx = row.dot(&xh) / d as f64;
        let inv = cache.inv_std[i];
        for (k, v) in row.iter_mut().enumerate() {
            *v = inv * (*v - mean_d - xh[k] * mean_dx);
        }
    }
    let d_w = cache.gx.t().dot(&d_z);
    let d_gx = d_z.dot(&layer.w.t());
    let d_g = d_gx.dot(&cache.x.t());
    let d_x = &d_z + &g.t().dot(&d_gx);
    (
        GcnLayer {
            w: d_w,
            gain: d_gain,
            bias: d_bias,
        },
        d_g,
        d_x,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub sim: SimilarityParams,
    pub layers: Vec<GcnLayer>,
}

impl Branch {
    fn random<R: Rng>(d: usize, cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut sim = SimilarityParams::random(d, cfg.variant.kernel(), rng);
        sim.sigma = cfg.sigma;
        let layers = (0..GCN_DEPTH).map(|_| GcnLayer::random(d, rng)).collect();
        Self { sim, layers }
    }

    fn zeros_like(&self) -> Self {
        Self {
            sim: self.sim.zeros_like(),
            layers: self.layers.iter().map(GcnLayer::zeros_like).collect(),
        }
    }
}

#[derive(Debug, Clone)]
struct BranchCache {
    adj: AdjacencyCache,
    g: Array2<f64>,
    layers: Vec<LayerCache>,
}

fn branch_forward(
    branch: &Branch,
    x: ArrayView2<f64>,
    scale: AdjacencyScale,
) -> Result<(Array2<f64>, BranchCache)> {
    let (mut g, adj) = build_adjacency(x, &branch.sim)?;
    if scale == AdjacencyScale::MeanByN {
        g /= x.nrows() as f64;
    }
    let mut h = x.to_owned();
    let mut layers = Vec::with_capacity(branch.layers.len());
    for layer in &branch.layers {
        let (out, _, cache) = gcn_layer_forward(g.view(), h.view(), layer)?;
        layers.push(cache);
        h = out;
    }
    Ok((h, BranchCache { adj, g, layers }))
}

/// Returns branch gradients and the gradient w.r.t. the branch input.
fn branch_backward(
    branch: &Branch,
    cache: &BranchCache,
    scale: AdjacencyScale,
    d_out: Array2<f64>,
) -> (Branch, Array2<f64>) {
    let n = cache.g.nrows();
    let mut grads = branch.zeros_like();
    let mut d_g = Array2::<f64>::zeros((n, n));
    let mut d_h = d_out;
    for (k, layer) in branch.layers.iter().enumerate().rev() {
        let (lg, dg, dx) = gcn_layer_backward(cache.g.view(), layer, &cache.layers[k], &d_h);
        grads.layers[k] = lg;
        d_g += &dg;
        d_h = dx;
    }
    if scale == AdjacencyScale::MeanByN {
        d_g /= n as f64;
    }
    let (sim, d_x_kernel) = adjacency_backward(&cache.adj, &branch.sim, d_g.view());
    grads.sim = sim;
    (grads, d_h + d_x_kernel)
}

/// Affine projection of the 5-d geometry tuple to `d` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryInput {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Pairwise MLP: `[h_i; h_j] -> hidden -> hidden -> 2` with ReLU, the first
/// layer split into left and right halves.
#[derive(Debug, Clone, PartialEq)]
pub struct PairHead {
    pub w_left: Array2<f64>,
    pub w_right: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

impl PairHead {
    fn zeros_like(&self) -> Self {
        Self {
            w_left: Array2::zeros(self.w_left.raw_dim()),
            w_right: Array2::zeros(self.w_right.raw_dim()),
            b1: Array1::zeros(self.b1.len()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.len()),
            w3: Array2::zeros(self.w3.raw_dim()),
            b3: Array1::zeros(self.b3.len()),
        }
    }
}

#[derive(Debug, Clone)]
struct HeadCache {
    fused: Array2<f64>,
    z1: Array2<f64>,
    a1: Array2<f64>,
    z2: Array2<f64>,
    a2: Array2<f64>,
}

fn uniform<R: Rng>(shape: (usize, usize), d: usize, rng: &mut R) -> Array2<f64> {
    let b = 1.0 / (d as f64).sqrt();
    Array2::from_shape_fn(shape, |_| rng.random_range(-b..b))
}

/// Position-wise softmaxed pair probabilities, stored as `N*N` rows of
/// `[p(separate), p(combined)]` indexed `i * N + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinationScoreMap {
    n: usize,
    logits: Array2<f64>,
    probs: Array2<f64>,
}

impl CombinationScoreMap {
    pub fn from_logits(n: usize, logits: Array2<f64>) -> Result<Self> {
        if logits.dim() != (n * n, 2) {
            return Err(Error::Shape(format!(
                "score map for {n} nodes needs {}x2 logits, got {:?}",
                n * n,
                logits.dim()
            )));
        }
        let mut probs = logits.clone();
        for mut r in probs.rows_mut() {
            let m = r[0].max(r[1]);
            let (e0, e1) = ((r[0] - m).exp(), (r[1] - m).exp());
            r[0] = e0 / (e0 + e1);
            r[1] = e1 / (e0 + e1);
        }
        Ok(Self { n, logits, probs })
    }

    /// Builds a map directly from combination probabilities.
    pub fn from_probabilities(n: usize, combined: impl Fn(usize, usize) -> f64) -> Self {
        let mut probs = Array2::zeros((n * n, 2));
        for i in 0..n {
            for j in 0..n {
                let p = combined(i, j).clamp(0.0, 1.0);
                probs[[i * n + j, 0]] = 1.0 - p;
                probs[[i * n + j, 1]] = p;
            }
        }
        let logits = probs.mapv(|p: f64| p.max(1e-300).ln());
        Self { n, logits, probs }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Probability that `i` and `j` belong to the same text instance.
    #[inline]
    pub fn score(&self, i: usize, j: usize) -> f64 {
        self.probs[[i * self.n + j, 1]]
    }

    pub fn pair(&self, i: usize, j: usize) -> [f64; 2] {
        let r = i * self.n + j;
        [self.probs[[r, 0]], self.probs[[r, 1]]]
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsgcnModel {
    pub config: ModelConfig,
    pub appearance: Option<Branch>,
    pub geometry_input: Option<GeometryInput>,
    pub geometry: Option<Branch>,
    pub head: PairHead,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    n: usize,
    app: Option<BranchCache>,
    geom_raw: Array2<f64>,
    geom: Option<BranchCache>,
    head: HeadCache,
    scores: CombinationScoreMap,
}

impl ForwardCache {
    pub fn scores(&self) -> &CombinationScoreMap {
        &self.scores
    }
}

impl MsgcnModel {
    /// Weights and projections `U(-1/sqrt(d), 1/sqrt(d))`, equal kernel
    /// mixing, unit layer-norm gain and zero biases.
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.d == 0 || config.head_hidden == 0 {
            return Err(Error::InvalidInput("d and head_hidden must be positive".into()));
        }
        if !(config.sigma > 0.0) {
            return Err(Error::InvalidInput("sigma must be positive".into()));
        }
        let d = config.d;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let appearance = config.variant.has_appearance().then(|| Branch::random(d, &config, &mut rng));
        let (geometry_input, geometry) = if config.variant.has_geometry() {
            let gi = GeometryInput {
                weight: uniform((d, GEOMETRY_DIM), d, &mut rng),
                bias: Array1::zeros(d),
            };
            (Some(gi), Some(Branch::random(d, &config, &mut rng)))
        } else {
            (None, None)
        };
        let fused = d * (usize::from(appearance.is_some()) + usize::from(geometry.is_some()));
        let h = config.head_hidden;
        // the right half starts as the negated left half, so the first
        // layer initially sees h_i - h_j
        let w_left = uniform((h, fused), d, &mut rng);
        let head = PairHead {
            w_right: -&w_left,
            w_left,
            b1: Array1::zeros(h),
            w2: uniform((h, h), d, &mut rng),
            b2: Array1::zeros(h),
            w3: uniform((2, h), d, &mut rng),
            b3: Array1::zeros(2),
        };
        Ok(Self {
            config,
            appearance,
            geometry_input,
            geometry,
            head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            appearance: self.appearance.as_ref().map(Branch::zeros_like),
            geometry_input: self.geometry_input.as_ref().map(|g| GeometryInput {
                weight: Array2::zeros(g.weight.raw_dim()),
                bias: Array1::zeros(g.bias.len()),
            }),
            geometry: self.geometry.as_ref().map(Branch::zeros_like),
            head: self.head.zeros_like(),
        }
    }

    fn fused_width(&self) -> usize {
        self.head.w_left.ncols()
    }

    /// Scores every ordered segment pair. Graphs with fewer than two nodes
    /// give a trivial map (nothing combines) and no cache.
    pub fn forward(
        &self,
        app: ArrayView2<f64>,
        geom: ArrayView2<f64>,
    ) -> Result<(CombinationScoreMap, Option<ForwardCache>)> {
        let n = geom.nrows();
        if geom.ncols() != GEOMETRY_DIM {
            return Err(Error::Shape(format!("geometry rows must have {GEOMETRY_DIM} values")));
        }
        if self.appearance.is_some() && app.dim() != (n, self.config.d) {
            return Err(Error::Shape(format!(
                "appearance features {:?}, expected ({n}, {})",
                app.dim(),
                self.config.d
            )));
        }
        if n > self.config.n_cap {
            return Err(Error::InvalidInput(format!(
                "{n} segments exceed the graph cap {}",
                self.config.n_cap
            )));
        }
        if n < 2 {
            return Ok((CombinationScoreMap::from_probabilities(n, |_, _| 0.0), None));
        }
        let scale = self.config.adjacency;

        let mut parts: Vec<Array2<f64>> = Vec::with_capacity(2);
        let app_cache = match &self.appearance {
            Some(b) => {
                let (h, c) = branch_forward(b, app, scale)?;
                parts.push(h);
                Some(c)
            }
            None => None,
        };
        let geom_cache = match (&self.geometry_input, &self.geometry) {
            (Some(gi), Some(b)) => {
                let proj = geom.dot(&gi.weight.t()) + &gi.bias;
                let (h, c) = branch_forward(b, proj.view(), scale)?;
                parts.push(h);
                Some(c)
            }
            _ => None,
        };
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let fused = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| Error::Shape(format!("fusing branches: {e}")))?;

        let (logits, head) = self.head_forward(fused)?;
        let scores = CombinationScoreMap::from_logits(n, logits)?;
        let cache = ForwardCache {
            n,
            app: app_cache,
            geom_raw: geom.to_owned(),
            geom: geom_cache,
            head,
            scores: scores.clone(),
        };
        Ok((scores, Some(cache)))
    }

    fn head_forward(&self, fused: Array2<f64>) -> Result<(Array2<f64>, HeadCache)> {
        let hd = &self.head;
        if fused.ncols() != self.fused_width() {
            return Err(Error::Shape("fused width does not match the head".into()));
        }
        let n = fused.nrows();
        let hidden = hd.b1.len();
        let left = fused.dot(&hd.w_left.t());
        let right = fused.dot(&hd.w_right.t()) + &hd.b1;
        let mut z1 = Array2::<f64>::zeros((n * n, hidden));
        for i in 0..n {
            let li = left.row(i);
            let mut block = z1.slice_mut(s![i * n..(i + 1) * n, ..]);
            block.assign(&right);
            block += &li;
        }
        let a1 = z1.mapv(|v| v.max(0.0));
        let z2 = a1.dot(&hd.w2.t()) + &hd.b2;
        let a2 = z2.mapv(|v| v.max(0.0));
        let logits = a2.dot(&hd.w3.t()) + &hd.b3;
        Ok((
            logits,
            HeadCache {
                fused,
                z1,
                a1,
                z2,
                a2,
            },
        ))
    }

    /// Gradients of a scalar loss given its gradient w.r.t. the `N*N x 2`
    /// logits.
    pub fn backward(&self, cache: &ForwardCache, d_logits: ArrayView2<f64>) -> Result<MsgcnModel> {
        let n = cache.n;
        if d_logits.dim() != (n * n, 2) {
            return Err(Error::Shape(format!(
                "logit gradient {:?}, expected ({}, 2)",
                d_logits.dim(),
                n * n
            )));
        }
        let mut grads = self.zeros_like();
        let hd = &self.head;
        let hc = &cache.head;

        grads.head.w3 = d_logits.t().dot(&hc.a2);
        grads.head.b3 = d_logits.sum_axis(Axis(0));
        let d_a2 = d_logits.dot(&hd.w3);
        let d_z2 = d_a2 * &hc.z2.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        grads.head.w2 = d_z2.t().dot(&hc.a1);
        grads.head.b2 = d_z2.sum_axis(Axis(0));
        let d_a1 = d_z2.dot(&hd.w2);
        let d_z1 = d_a1 * &hc.z1.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        grads.head.b1 = d_z1.sum_axis(Axis(0));
        let hidden = hd.b1.len();
        let mut d_left = Array2::<f64>::zeros((n, hidden));
        let mut d_right = Array2::<f64>::zeros((n, hidden));
        for i in 0..n {
            let block = d_z1.slice(s![i * n..(i + 1) * n, ..]);
            d_left.row_mut(i).assign(&block.sum_axis(Axis(0)));
            d_right += &block;
        }
        grads.head.w_left = d_left.t().dot(&hc.fused);
        grads.head.w_right = d_right.t().dot(&hc.fused);
        let d_fused = d_left.dot(&hd.w_left) + d_right.dot(&hd.w_right);

        let d = self.config.d;
        let mut offset = 0;
        if let (Some(b), Some(c)) = (&self.appearance, &cache.app) {
            let d_out = d_fused.slice(s![.., offset..offset + d]).to_owned();
            let (g, _) = branch_backward(b, c, self.config.adjacency, d_out);
            grads.appearance = Some(g);
            offset += d;
        }
        if let (Some(b), Some(c)) = (&self.geometry, &cache.geom) {
            let d_out = d_fused.slice(s![.., offset..offset + d]).to_owned();
            let (g, d_proj) = branch_backward(b, c, self.config.adjacency, d_out);
            grads.geometry = Some(g);
            grads.geometry_input = Some(GeometryInput {
                weight: d_proj.t().dot(&cache.geom_raw),
                bias: d_proj.sum_axis(Axis(0)),
            });
        }
        grads.standardize();
        Ok(grads)
    }

    /// Forces row-major storage so every tensor has a flat slice.
    fn standardize(&mut self) {
        fn fix(a: &mut Array2<f64>) {
            if !a.is_standard_layout() {
                *a = a.as_standard_layout().into_owned();
            }
        }
        fn fix_branch(b: &mut Branch) {
            fix(&mut b.sim.w1);
            fix(&mut b.sim.w2);
            for l in &mut b.layers {
                fix(&mut l.w);
            }
        }
        if let Some(b) = &mut self.appearance {
            fix_branch(b);
        }
        if let Some(b) = &mut self.geometry {
            fix_branch(b);
        }
        if let Some(g) = &mut self.geometry_input {
            fix(&mut g.weight);
        }
        let h = &mut self.head;
        for a in [&mut h.w_left, &mut h.w_right, &mut h.w2, &mut h.w3] {
            fix(a);
        }
    }

    /// Named parameter tensors in a fixed order: `(name, shape, values)`.
    pub fn params(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        self.for_each_tensor(&mut |name, shape, data| out.push((name.to_string(), shape, data)));
        out
    }

    fn for_each_tensor<'a>(&'a self, f: &mut dyn FnMut(&str, Vec<usize>, &'a [f64])) {
        fn t2<'a>(f: &mut dyn FnMut(&str, Vec<usize>, &'a [f64]), name: &str, a: &'a Array2<f64>) {
            f(name, a.shape().to_vec(), a.as_slice().expect("contiguous"));
        }
        fn t1<'a>(f: &mut dyn FnMut(&str, Vec<usize>, &'a [f64]), name: &str, a: &'a Array1<f64>) {
            f(name, vec![a.len()], a.as_slice().expect("contiguous"));
        }
        fn branch<'a>(f: &mut dyn FnMut(&str, Vec<usize>, &'a [f64]), prefix: &str, b: &'a Branch) {
            t1(f, &format!("{prefix}.sim.beta_logits"), &b.sim.beta_logits);
            t2(f, &format!("{prefix}.sim.w1"), &b.sim.w1);
            t2(f, &format!("{prefix}.sim.w2"), &b.sim.w2);
            for (k, l) in b.layers.iter().enumerate() {
                t2(f, &format!("{prefix}.gcn{k}.w"), &l.w);
                t1(f, &format!("{prefix}.gcn{k}.gain"), &l.gain);
                t1(f, &format!("{prefix}.gcn{k}.bias"), &l.bias);
            }
        }
        if let Some(b) = &self.appearance {
            branch(f, "appearance", b);
        }
        if let Some(g) = &self.geometry_input {
            t2(f, "geometry.fc.weight", &g.weight);
            t1(f, "geometry.fc.bias", &g.bias);
        }
        if let Some(b) = &self.geometry {
            branch(f, "geometry", b);
        }
        let h = &self.head;
        t2(f, "head.w_left", &h.w_left);
        t2(f, "head.w_right", &h.w_right);
        t1(f, "head.b1", &h.b1);
        t2(f, "head.w2", &h.w2);
        t1(f, "head.b2", &h.b2);
        t2(f, "head.w3", &h.w3);
        t1(f, "head.b3", &h.b3);
    }

    /// Mutable views of every parameter tensor, in the order of [`params`].
    ///
    /// [`params`]: MsgcnModel::params
    pub fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        fn m2(a: &mut Array2<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("contiguous")
        }
        fn m1(a: &mut Array1<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("contiguous")
        }
        fn branch<'a>(out: &mut Vec<(String, &'a mut [f64])>, prefix: &str, b: &'a mut Branch) {
            out.push((format!("{prefix}.sim.beta_logits"), m1(&mut b.sim.beta_logits)));
            out.push((format!("{prefix}.sim.w1"), m2(&mut b.sim.w1)));
            out.push((format!("{prefix}.sim.w2"), m2(&mut b.sim.w2)));
            for (k, l) in b.layers.iter_mut().enumerate() {
                out.push((format!("{prefix}.gcn{k}.w"), m2(&mut l.w)));
                out.push((format!("{prefix}.gcn{k}.gain"), m1(&mut l.gain)));
                out.push((format!("{prefix}.gcn{k}.bias"), m1(&mut l.bias)));
            }
        }
        if let Some(b) = &mut self.appearance {
            branch(&mut out, "appearance", b);
        }
        if let Some(g) = &mut self.geometry_input {
            out.push(("geometry.fc.weight".into(), m2(&mut g.weight)));
            out.push(("geometry.fc.bias".into(), m1(&mut g.bias)));
        }
        if let Some(b) = &mut self.geometry {
            branch(&mut out, "geometry", b);
        }
        let h = &mut self.head;
        out.push(("head.w_left".into(), m2(&mut h.w_left)));
        out.push(("head.w_right".into(), m2(&mut h.w_right)));
        out.push(("head.b1".into(), m1(&mut h.b1)));
        out.push(("head.w2".into(), m2(&mut h.w2)));
        out.push(("head.b2".into(), m1(&mut h.b2)));
        out.push(("head.w3".into(), m2(&mut h.w3)));
        out.push(("head.b3".into(), m1(&mut h.b3)));
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, _, v)| v.len()).sum()
    }

    /// All parameters concatenated in [`params`](MsgcnModel::params) order.
    pub fn flat(&self) -> Vec<f64> {
        self.params().into_iter().flat_map(|(_, _, v)| v.iter().copied()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::train::{train, TrainConfig, TrainSample};
    use super::*;
    use ndarray::array;

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    fn small(variant: Variant, seed: u64) -> MsgcnModel {
        MsgcnModel::new(ModelConfig {
            d: 8,
            head_hidden: 8,
            variant,
            seed,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn geometry(n: usize, seed: u64) -> Array2<f64> {
        rand_matrix(n, 5, seed).mapv(f64::abs)
    }

    #[test]
    fn zero_weight_layer_is_the_identity_before_norm() {
        let x = rand_matrix(4, 3, 1);
        let g = rand_matrix(4, 4, 2);
        let layer = GcnLayer {
            w: Array2::zeros((3, 3)),
            gain: Array1::ones(3),
            bias: Array1::zeros(3),
        };
        let (_, z, _) = gcn_layer_forward(g.view(), x.view(), &layer).unwrap();
        assert_eq!(z, x);
        let ident = GcnLayer {
            w: Array2::eye(3),
            ..layer
        };
        let (_, z, _) = gcn_layer_forward(Array2::eye(4).view(), x.view(), &ident).unwrap();
        assert_eq!(z, &x * 2.0);
    }

    #[test]
    fn layer_matches_triple_loop_product() {
        let (n, d) = (5, 8);
        let x = rand_matrix(n, d, 3);
        let g = rand_matrix(n, n, 4);
        let layer = GcnLayer {
            w: rand_matrix(d, d, 5),
            gain: Array1::ones(d),
            bias: Array1::zeros(d),
        };
        let (_, z, _) = gcn_layer_forward(g.view(), x.view(), &layer).unwrap();
        for i in 0..n {
            for c in 0..d {
                let mut acc = x[[i, c]];
                for j in 0..n {
                    for k in 0..d {
                        acc += g[[i, j]] * x[[j, k]] * layer.w[[k, c]];
                    }
                }
                assert!((z[[i, c]] - acc).abs() < 1e-10);
            }
        }
        assert!(gcn_layer_forward(g.view(), rand_matrix(4, d, 1).view(), &layer).is_err());
    }

    #[test]
    fn score_map_rows_are_distributions() {
        let m = small(Variant::Full, 7);
        let (c, _) = m.forward(rand_matrix(6, 8, 1).view(), geometry(6, 2).view()).unwrap();
        for r in c.probs().rows() {
            assert!((r[0] + r[1] - 1.0).abs() < 1e-9);
            assert!(r.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn permuting_segments_permutes_the_map() {
        let m = small(Variant::Full, 8);
        let (app, geom) = (rand_matrix(6, 8, 3), geometry(6, 4));
        let perm = [3, 0, 5, 1, 4, 2];
        let papp = Array2::from_shape_fn((6, 8), |(i, k)| app[[perm[i], k]]);
        let pgeom = Array2::from_shape_fn((6, 5), |(i, k)| geom[[perm[i], k]]);
        let (c, _) = m.forward(app.view(), geom.view()).unwrap();
        let (pc, _) = m.forward(papp.view(), pgeom.view()).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert!((pc.score(i, j) - c.score(perm[i], perm[j])).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn identical_segments_score_symmetrically() {
        let m = small(Variant::Full, 9);
        let mut app = rand_matrix(4, 8, 5);
        let mut geom = geometry(4, 6);
        let row = app.row(0).to_owned();
        app.row_mut(2).assign(&row);
        let row = geom.row(0).to_owned();
        geom.row_mut(2).assign(&row);
        let (c, _) = m.forward(app.view(), geom.view()).unwrap();
        assert!((c.score(0, 2) - c.score(2, 0)).abs() < 1e-9);
    }

    #[test]
    fn tiny_graphs_give_trivial_maps() {
        let m = small(Variant::Full, 1);
        let (c, cache) = m.forward(rand_matrix(1, 8, 1).view(), geometry(1, 1).view()).unwrap();
        assert!(cache.is_none());
        assert_eq!(c.len(), 1);
        assert!(m.forward(rand_matrix(3, 7, 1).view(), geometry(3, 1).view()).is_err());
    }

    #[test]
    fn loss_examples() {
        let mut u = CombinationLabelMap::separate(3);
        u.set(0, 1, PairLabel::Combined);
        u.set(1, 0, PairLabel::Combined);
        let uniform = CombinationScoreMap::from_probabilities(3, |_, _| 0.5);
        assert!((combination_loss(&uniform, &u).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let sure = CombinationScoreMap::from_logits(
            3,
            Array2::from_shape_fn((9, 2), |(r, k)| {
                let t = usize::from(u.as_slice()[r] == PairLabel::Combined);
                if k == t {
                    40.0
                } else {
                    -40.0
                }
            }),
        )
        .unwrap();
        assert!(combination_loss(&sure, &u).unwrap() < 1e-30);
        let all_ignored = {
            let mut m = CombinationLabelMap::separate(2);
            m.set(0, 1, PairLabel::Ignore);
            m.set(1, 0, PairLabel::Ignore);
            m
        };
        let c2 = CombinationScoreMap::from_probabilities(2, |_, _| 0.3);
        assert_eq!(combination_loss(&c2, &all_ignored).unwrap(), 0.0);
    }

    #[test]
    fn loss_matches_double_loop() {
        let n = 5;
        let logits = rand_matrix(n * n, 2, 11) * 3.0;
        let c = CombinationScoreMap::from_logits(n, logits).unwrap();
        let mut u = CombinationLabelMap::separate(n);
        for (p, q) in [(0, 1), (1, 0), (2, 4), (3, 2)] {
            u.set(p, q, PairLabel::Combined);
        }
        u.set(4, 0, PairLabel::Ignore);
        let (mut total, mut count) = (0.0, 0);
        for p in 0..n {
            for q in 0..n {
                let t = match u.get(p, q) {
                    PairLabel::Ignore => continue,
                    PairLabel::Separate => 0,
                    PairLabel::Combined => 1,
                };
                total -= c.pair(p, q)[t].ln();
                count += 1;
            }
        }
        assert!((combination_loss(&c, &u).unwrap() - total / count as f64).abs() < 1e-10);
    }

    #[test]
    fn diagonal_logits_do_not_affect_the_loss() {
        let n = 4;
        let logits = rand_matrix(n * n, 2, 12);
        let u = CombinationLabelMap::separate(n);
        let base = combination_loss(&CombinationScoreMap::from_logits(n, logits.clone()).unwrap(), &u).unwrap();
        let mut bumped = logits;
        for i in 0..n {
            bumped[[i * n + i, 1]] += 5.0;
        }
        let c = CombinationScoreMap::from_logits(n, bumped).unwrap();
        assert_eq!(combination_loss(&c, &u).unwrap(), base);
        let (_, g) = combination_loss_grad(&c, &u).unwrap();
        for i in 0..n {
            assert_eq!(g.row(i * n + i), array![0.0, 0.0]);
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss_gradient() {
        let m = small(Variant::Full, 13);
        let (app, geom) = (rand_matrix(5, 8, 1), geometry(5, 2));
        let (_, cache) = m.forward(app.view(), geom.view()).unwrap();
        let cache = cache.unwrap();
        let zero = m.backward(&cache, Array2::zeros((25, 2)).view()).unwrap();
        assert!(zero.flat().iter().all(|g| *g == 0.0));
        let d = rand_matrix(25, 2, 3);
        let g1 = m.backward(&cache, d.view()).unwrap().flat();
        let g2 = m.backward(&cache, (&d * 2.0).view()).unwrap().flat();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    fn toy_sample(seed: u64) -> TrainSample {
        let n = 6;
        let mut labels = CombinationLabelMap::separate(n);
        for p in 0..n {
            for q in 0..n {
                if p != q && p / 3 == q / 3 {
                    labels.set(p, q, PairLabel::Combined);
                }
            }
        }
        let group = rand_matrix(2, 8, seed);
        let noise = rand_matrix(n, 8, seed + 1) * 0.1;
        let appearance = Array2::from_shape_fn((n, 8), |(i, k)| group[[i / 3, k]] + noise[[i, k]]);
        TrainSample {
            appearance,
            geometry: geometry(n, seed + 2),
            labels,
        }
    }

    #[test]
    fn short_training_lowers_the_loss() {
        let mut m = small(Variant::Full, 21);
        let data = [toy_sample(30)];
        let cfg = TrainConfig {
            epochs: 50,
            ..TrainConfig::default()
        };
        let curve = train(&mut m, &data, &cfg).unwrap();
        assert_eq!(curve.len(), 50);
        let after = train::mean_loss(&m, &data).unwrap();
        assert!(after < curve[0].l_comb, "{after} vs {}", curve[0].l_comb);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut m = small(Variant::Full, 22);
        let before = m.clone();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 5,
            ..TrainConfig::default()
        };
        train(&mut m, &[toy_sample(31)], &cfg).unwrap();
        let bits = |m: &MsgcnModel| m.flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&m), bits(&before));
    }

    #[test]
    fn training_is_deterministic() {
        let data = [toy_sample(32), toy_sample(33), toy_sample(34)];
        let cfg = TrainConfig {
            epochs: 3,
            batch: 2,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = small(Variant::Full, 23);
            let curve = train(&mut m, &data, &cfg).unwrap();
            (m, curve)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn two_node_graph_fits_quickly() {
        let mut m = small(Variant::Full, 24);
        let mut labels = CombinationLabelMap::separate(2);
        labels.set(0, 1, PairLabel::Combined);
        labels.set(1, 0, PairLabel::Combined);
        let data = [TrainSample {
            appearance: rand_matrix(2, 8, 40),
            geometry: geometry(2, 41),
            labels,
        }];
        // the default 1e-4 step reaches about 0.1 in 500 steps
        let cfg = TrainConfig {
            epochs: 500,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        train(&mut m, &data, &cfg).unwrap();
        let loss = train::mean_loss(&m, &data).unwrap();
        assert!(loss < 0.01, "loss {loss}");
    }
}
