//! Synthetic scenes of non-overlapping text ribbons.

use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use log::warn;
use ndarray::Array2;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{mix_seed, FeatureProvider, SynthAppearance};
use crate::geom::{Point, Polygon, Segment};
use crate::gt_segments::{generate_gt_segments, GtParams};
use crate::msgcn::train::TrainSample;
use crate::msgcn::{segment_owner, CombinationLabelMap};
use crate::postproc::{geometry_matrix, knnr_pairs, PairCandidates};
use crate::raster::pixel_overlap;

pub const MAX_ATTEMPTS: usize = 1000;
pub const MAX_PAIR_IOU: f64 = 0.05;
/// Distinct appearance styles per scene; several instances share each.
pub const STYLE_POOL: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Straight,
    Arc,
    SCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub canvas_w: f64,
    pub canvas_h: f64,
    pub min_instances: usize,
    pub max_instances: usize,
    pub shapes: Vec<Shape>,
    pub min_width: f64,
    pub max_width: f64,
    pub min_length: f64,
    pub max_length: f64,
    /// Centerline samples per ribbon side.
    pub ribbon_points: usize,
    /// Clear margin kept around every ribbon, in px.
    pub min_gap: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            canvas_w: 800.0,
            canvas_h: 600.0,
            min_instances: 3,
            max_instances: 8,
            shapes: vec![Shape::Straight, Shape::Arc, Shape::SCurve],
            min_width: 15.0,
            max_width: 60.0,
            min_length: 80.0,
            max_length: 400.0,
            ribbon_points: 16,
            min_gap: 8.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.canvas_w > 0.0
            && self.canvas_h > 0.0
            && self.min_instances >= 1
            && self.min_instances <= self.max_instances
            && !self.shapes.is_empty()
            && self.min_width > 0.0
            && self.min_width <= self.max_width
            && self.min_length >= self.max_width
            && self.min_length <= self.max_length
            && self.ribbon_points >= 2
            && self.min_gap >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid synth config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub polygon: Polygon,
    pub instance_id: u64,
    pub style_seed: u64,
    /// Generator shape; absent for instances loaded from annotations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Shape>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub canvas_w: f64,
    pub canvas_h: f64,
    pub instances: Vec<Instance>,
}

/// Centerline of a ribbon in local coordinates, starting at the origin and
/// heading along +x.
fn centerline<R: Rng>(shape: Shape, length: f64, width: f64, count: usize, rng: &mut R) -> Vec<Point> {
    let ts = (0..count).map(|k| k as f64 / (count - 1) as f64);
    match shape {
        Shape::Straight => ts.map(|t| Point::new(t * length, 0.0)).collect(),
        Shape::Arc => {
            // radius keeps the inner edge clear and the sweep under half a turn
            let r_min = (1.5 * width).max(length / PI);
            let r = rng.random_range(r_min..=3.0 * r_min);
            let sweep = length / r;
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            ts.map(|t| {
                let a = t * sweep;
                Point::new(r * a.sin(), sign * r * (1.0 - a.cos()))
            })
            .collect()
        }
        Shape::SCurve => {
            // peak curvature A (2 pi / L)^2 stays below 1 / (1.5 width)
            let k = 2.0 * PI / length;
            let a_max = (1.0 / (1.5 * width * k * k)).min(length / 6.0);
            let a = rng.random_range(0.3 * a_max..=a_max);
            ts.map(|t| Point::new(t * length, a * (k * t * length).sin())).collect()
        }
    }
}

/// Offsets a centerline by half the width on both sides.
fn ribbon(center: &[Point], width: f64) -> Result<Polygon> {
    let n = center.len();
    let mut left = Vec::with_capacity(n);
    let mut right = Vec::with_capacity(n);
    for k in 0..n {
        let prev = center[k.saturating_sub(1)];
        let next = center[(k + 1).min(n - 1)];
        let normal = (next - prev)
            .normalized()
            .ok_or_else(|| Error::Degenerate("repeated centerline point".into()))?
            .perp()
            .scale(width / 2.0);
        left.push(center[k] + normal);
        right.push(center[k] - normal);
    }
    left.extend(right.into_iter().rev());
    Polygon::new(left)
}

fn pair_iou(a: &Polygon, b: &Polygon) -> f64 {
    if !a.bbox().intersects(&b.bbox()) {
        return 0.0;
    }
    let (i, na, nb) = pixel_overlap(a.vertices(), b.vertices());
    let union = na + nb - i;
    if union == 0 {
        0.0
    } else {
        i as f64 / union as f64
    }
}

/// Rejection-samples `n_instances` ribbons (drawn from the configured range)
/// that fit the canvas and stay `min_gap` apart, which keeps pairwise IoU
/// at zero and well under 0.05.
pub fn gen_scene(seed: u64, cfg: &SynthConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wanted = rng.random_range(cfg.min_instances..=cfg.max_instances);
    let styles: Vec<u64> = (0..STYLE_POOL).map(|k| mix_seed(&[seed, 0x7374, k])).collect();
    let mut instances: Vec<Instance> = Vec::with_capacity(wanted);
    let mut attempts = 0;
    while instances.len() < wanted && attempts < MAX_ATTEMPTS {
        attempts += 1;
        let shape = cfg.shapes[rng.random_range(0..cfg.shapes.len())];
        let width = rng.random_range(cfg.min_width..=cfg.max_width);
        let length = rng.random_range(cfg.min_length..=cfg.max_length);
        let local = centerline(shape, length, width, cfg.ribbon_points, &mut rng);
        let angle = rng.random_range(-PI..PI);
        let shift = Point::new(
            rng.random_range(0.0..cfg.canvas_w),
            rng.random_range(0.0..cfg.canvas_h),
        );
        let mid = local[local.len() / 2];
        let placed: Vec<Point> = local.iter().map(|p| (*p - mid).rotate(angle) + shift).collect();
        let Ok(polygon) = ribbon(&placed, width) else { continue };
        let b = polygon.bbox();
        if b.min_x < 0.0 || b.min_y < 0.0 || b.max_x > cfg.canvas_w || b.max_y > cfg.canvas_h {
            continue;
        }
        let Ok(halo) = ribbon(&placed, width + 2.0 * cfg.min_gap) else { continue };
        let crowded = instances.iter().any(|o| {
            o.polygon.bbox().intersects(&halo.bbox()) && pixel_overlap(o.polygon.vertices(), halo.vertices()).0 > 0
        });
        if crowded || instances.iter().any(|o| pair_iou(&o.polygon, &polygon) >= MAX_PAIR_IOU) {
            continue;
        }
        instances.push(Instance {
            polygon,
            instance_id: mix_seed(&[seed, 0x6964, instances.len() as u64]),
            style_seed: styles[rng.random_range(0..styles.len())],
            shape: Some(shape),
        });
    }
    if instances.len() < wanted {
        warn!(
            "scene {seed}: placed {} of {wanted} instances in {MAX_ATTEMPTS} attempts",
            instances.len()
        );
    }
    Ok(Scene {
        id: seed,
        canvas_w: cfg.canvas_w,
        canvas_h: cfg.canvas_h,
        instances,
    })
}

/// GT segments of every instance, flattened in instance order, with the
/// polygon each one belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSegments {
    pub segments: Vec<Segment>,
    /// Polygon index by the membership rule.
    pub owners: Vec<Option<usize>>,
    /// Instance the segment was generated from.
    pub source: Vec<usize>,
}

impl Scene {
    pub fn polygons(&self) -> Vec<Polygon> {
        self.instances.iter().map(|i| i.polygon.clone()).collect()
    }

    pub fn segments(&self, gt: &GtParams) -> Result<SceneSegments> {
        let mut segments = Vec::new();
        let mut source = Vec::new();
        for (k, inst) in self.instances.iter().enumerate() {
            let dec = generate_gt_segments(&inst.polygon, gt)?;
            source.extend(std::iter::repeat_n(k, dec.segments.len()));
            segments.extend(dec.segments);
        }
        let polygons = self.polygons();
        let owners = segments
            .iter()
            .map(|s| segment_owner(s, &polygons))
            .collect::<Result<Vec<_>>>()?;
        Ok(SceneSegments {
            segments,
            owners,
            source,
        })
    }

    /// `N x dim` appearance features of the segments, keyed by the instance
    /// each was generated from.
    pub fn appearance(&self, segs: &SceneSegments, provider: &dyn FeatureProvider) -> Result<Array2<f64>> {
        let d = provider.dim();
        let mut out = Array2::zeros((segs.segments.len(), d));
        for (i, (s, &k)) in segs.segments.iter().zip(&segs.source).enumerate() {
            let inst = &self.instances[k];
            let v = provider.appearance(s, inst.instance_id, inst.style_seed, i)?;
            if v.len() != d {
                return Err(Error::Shape(format!("feature of length {} for dim {d}", v.len())));
            }
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&v));
        }
        Ok(out)
    }
}

/// Everything the graph model consumes for one scene.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub scene: Scene,
    pub segs: SceneSegments,
    pub pairs: PairCandidates,
    pub sample: TrainSample,
}

pub fn prepare_scene(
    scene: &Scene,
    gt: &GtParams,
    appearance: &SynthAppearance,
    k: usize,
    alpha: f64,
) -> Result<PreparedScene> {
    let segs = scene.segments(gt)?;
    let pairs = knnr_pairs(&segs.segments, k, alpha);
    let labels = CombinationLabelMap::from_owners(&segs.owners, &pairs)?;
    let sample = TrainSample {
        appearance: scene.appearance(&segs, appearance)?,
        geometry: geometry_matrix(&segs.segments, (scene.canvas_w, scene.canvas_h))?,
        labels,
    };
    Ok(PreparedScene {
        scene: scene.clone(),
        segs,
        pairs,
        sample,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
}

impl Dataset {
    pub const FILES: [&'static str; 3] = ["train.jsonl", "val.jsonl", "test.jsonl"];

    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::new();
        for (name, scenes) in Self::FILES.iter().zip([&self.train, &self.val, &self.test]) {
            let path = dir.join(name);
            save_scenes(&path, scenes)?;
            paths.push(path);
        }
        Ok(paths)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut parts = Self::FILES.iter().map(|n| load_scenes(&dir.join(n)));
        Ok(Self {
            train: parts.next().expect("three files")?,
            val: parts.next().expect("three files")?,
            test: parts.next().expect("three files")?,
        })
    }
}

/// Scene seeds derived from the dataset seed, split 80/10/10 by index.
pub fn gen_dataset(seed: u64, n_scenes: usize, cfg: &SynthConfig) -> Result<Dataset> {
    if n_scenes == 0 {
        return Err(Error::InvalidInput("n_scenes must be at least 1".into()));
    }
    let scenes = (0..n_scenes as u64)
        .into_par_iter()
        .map(|i| gen_scene(mix_seed(&[seed, 0x7363, i]), cfg))
        .collect::<Result<Vec<_>>>()?;
    let n_train = n_scenes * 8 / 10;
    let n_val = n_scenes / 10;
    let mut it = scenes.into_iter();
    let train = it.by_ref().take(n_train).collect();
    let val = it.by_ref().take(n_val).collect();
    let test = it.collect();
    Ok(Dataset { train, val, test })
}

pub fn save_scenes(path: &Path, scenes: &[Scene]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for s in scenes {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_scenes(path: &Path) -> Result<Vec<Scene>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (k, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let scene = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: k + 1,
            msg: e.to_string(),
        })?;
        out.push(scene);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::angle_diff;

    #[test]
    fn scenes_are_reproducible_and_separated() {
        let cfg = SynthConfig::default();
        let a = gen_scene(7, &cfg).unwrap();
        assert_eq!(a, gen_scene(7, &cfg).unwrap());
        assert!(a.instances.len() >= 3);
        for (i, x) in a.instances.iter().enumerate() {
            let b = x.polygon.bbox();
            assert!(b.min_x >= 0.0 && b.min_y >= 0.0 && b.max_x <= 800.0 && b.max_y <= 600.0);
            for y in &a.instances[i + 1..] {
                assert!(pair_iou(&x.polygon, &y.polygon) < MAX_PAIR_IOU);
            }
        }
    }

    #[test]
    fn straight_ribbons_give_aligned_segments() {
        let cfg = SynthConfig {
            shapes: vec![Shape::Straight],
            ..SynthConfig::default()
        };
        let scene = gen_scene(3, &cfg).unwrap();
        for inst in &scene.instances {
            let v = inst.polygon.vertices();
            let dir = v[1] - v[0];
            let angle = dir.y.atan2(dir.x);
            let dec = generate_gt_segments(&inst.polygon, &GtParams::default()).unwrap();
            for s in dec.segments {
                assert!(angle_diff(s.theta, angle) < PI / 36.0);
            }
        }
    }

    #[test]
    fn ten_scenes_split_eight_one_one() {
        let d = gen_dataset(1, 10, &SynthConfig::default()).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (8, 1, 1));
        let mut ids: Vec<u64> = d.train.iter().chain(&d.val).chain(&d.test).map(|s| s.id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 10);
    }
}
