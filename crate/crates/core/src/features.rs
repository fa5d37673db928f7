//! Per-segment node features.
//!
//! Geometry features are the normalized segment tuple. Appearance features
//! come from a [`FeatureProvider`]; the synthetic provider stands in for a
//! convolutional backbone, and [`ExternalFeatures`] reads vectors computed
//! elsewhere.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Segment;

pub const GEOMETRY_DIM: usize = 5;

/// `(x/W, y/H, w/W, h/H, theta)`.
pub fn geometry_feature(s: &Segment, canvas_w: f64, canvas_h: f64) -> Result<[f64; GEOMETRY_DIM]> {
    if !(canvas_w > 0.0 && canvas_h > 0.0) {
        return Err(Error::InvalidInput(format!(
            "canvas must be positive, got {canvas_w}x{canvas_h}"
        )));
    }
    Ok([
        s.x / canvas_w,
        s.y / canvas_h,
        s.w / canvas_w,
        s.h / canvas_h,
        s.theta,
    ])
}

/// SplitMix64 finalizer folded over a sequence of words.
pub(crate) fn mix_seed(words: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &w in words {
        h ^= w;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

fn gaussian(seed: u64, d: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub trait FeatureProvider {
    fn dim(&self) -> usize;

    /// Appearance vector for the `index`-th segment of a scene.
    fn appearance(&self, s: &Segment, instance_id: u64, style_seed: u64, index: usize) -> Result<Vec<f64>>;
}

const STYLE_TAG: u64 = 0x5354_594c;
const INSTANCE_TAG: u64 = 0x494e_5354;
const NOISE_TAG: u64 = 0x4e4f_4953;

/// Deterministic appearance features: a style direction shared by every
/// instance with the same style seed, an instance-specific offset, and a
/// per-segment Gaussian perturbation, L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthAppearance {
    pub dim: usize,
    pub noise_sigma: f64,
    /// Weight of the instance offset relative to the style direction.
    pub instance_mix: f64,
    pub seed: u64,
}

impl Default for SynthAppearance {
    fn default() -> Self {
        Self {
            dim: 64,
            noise_sigma: 0.1,
            instance_mix: 0.6,
            seed: 0,
        }
    }
}

impl SynthAppearance {
    pub fn base(&self, instance_id: u64, style_seed: u64) -> Vec<f64> {
        let style = gaussian(mix_seed(&[self.seed, STYLE_TAG, style_seed]), self.dim);
        let inst = gaussian(
            mix_seed(&[self.seed, INSTANCE_TAG, instance_id, style_seed]),
            self.dim,
        );
        let mut v: Vec<f64> = style
            .iter()
            .zip(&inst)
            .map(|(s, i)| s + self.instance_mix * i)
            .collect();
        l2_normalize(&mut v);
        v
    }

    pub fn feature(&self, s: &Segment, instance_id: u64, style_seed: u64) -> Vec<f64> {
        let mut v = self.base(instance_id, style_seed);
        if self.noise_sigma > 0.0 {
            let mut key = vec![self.seed, NOISE_TAG, instance_id, style_seed];
            key.extend(s.as_array().iter().map(|c| c.to_bits()));
            let noise = gaussian(mix_seed(&key), self.dim);
            for (x, e) in v.iter_mut().zip(noise) {
                *x += self.noise_sigma * e;
            }
        }
        l2_normalize(&mut v);
        v
    }
}

impl FeatureProvider for SynthAppearance {
    fn dim(&self) -> usize {
        self.dim
    }

    fn appearance(&self, s: &Segment, instance_id: u64, style_seed: u64, _index: usize) -> Result<Vec<f64>> {
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(self.feature(s, instance_id, style_seed))
    }
}

/// Synthetic appearance with the default dimension and seed.
pub fn synth_appearance(s: &Segment, instance_id: u64, style_seed: u64, noise_sigma: f64) -> Result<Vec<f64>> {
    let p = SynthAppearance {
        noise_sigma,
        ..SynthAppearance::default()
    };
    p.appearance(s, instance_id, style_seed, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureHeader {
    pub d: usize,
    pub count: usize,
    pub seed: u64,
}

/// Externally computed features: one record per segment holding the segment
/// tuple and `d` values.
///
/// On disk: a little-endian `u32` header length, the JSON header, then
/// `count` records of `5 + d` little-endian `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalFeatures {
    pub header: FeatureHeader,
    pub segments: Vec<Segment>,
    pub values: Vec<Vec<f64>>,
}

impl ExternalFeatures {
    pub fn new(seed: u64, segments: Vec<Segment>, values: Vec<Vec<f64>>) -> Result<Self> {
        if segments.len() != values.len() {
            return Err(Error::Shape("segment and feature counts differ".into()));
        }
        let d = values.first().map_or(0, Vec::len);
        if values.iter().any(|v| v.len() != d) {
            return Err(Error::Shape("ragged feature rows".into()));
        }
        Ok(Self {
            header: FeatureHeader {
                d,
                count: segments.len(),
                seed,
            },
            segments,
            values,
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let header = serde_json::to_vec(&self.header).map_err(std::io::Error::other)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for (s, v) in self.segments.iter().zip(&self.values) {
            for x in s.as_array().iter().chain(v) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |m: &str| Error::InvalidInput(format!("feature file: {m}"));
        let mut len = [0u8; 4];
        r.read_exact(&mut len).map_err(|_| bad("missing header length"))?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
        let header: FeatureHeader = serde_json::from_slice(&header)?;
        let mut buf = [0u8; 8];
        let mut next = |r: &mut dyn Read| -> Result<f64> {
            r.read_exact(&mut buf).map_err(|_| bad("truncated record"))?;
            Ok(f64::from_le_bytes(buf))
        };
        let mut segments = Vec::with_capacity(header.count);
        let mut values = Vec::with_capacity(header.count);
        for _ in 0..header.count {
            let mut t = [0.0; 5];
            for x in &mut t {
                *x = next(&mut r)?;
            }
            segments.push(Segment::new(t[0], t[1], t[2], t[3], t[4])?);
            values.push((0..header.d).map(|_| next(&mut r)).collect::<Result<Vec<_>>>()?);
        }
        Ok(Self {
            header,
            segments,
            values,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

impl FeatureProvider for ExternalFeatures {
    fn dim(&self) -> usize {
        self.header.d
    }

    fn appearance(&self, _s: &Segment, _instance_id: u64, _style_seed: u64, index: usize) -> Result<Vec<f64>> {
        self.values
            .get(index)
            .cloned()
            .ok_or_else(|| Error::InvalidInput(format!("no external feature for segment {index}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(x: f64, y: f64) -> Segment {
        Segment::new(x, y, 40.0, 20.0, 0.1).unwrap()
    }

    #[test]
    fn geometry_feature_examples() {
        let s = Segment::new(100.0, 50.0, 40.0, 20.0, 0.3).unwrap();
        let g = geometry_feature(&s, 200.0, 100.0).unwrap();
        for (a, b) in g.iter().zip([0.5, 0.5, 0.2, 0.2, 0.3]) {
            assert!((a - b).abs() < 1e-12);
        }
        let corner = Segment::new(0.0, 0.0, 4.0, 2.0, 0.0).unwrap();
        let g = geometry_feature(&corner, 10.0, 10.0).unwrap();
        assert_eq!((g[0], g[1]), (0.0, 0.0));
        let big = Segment::new(200.0, 100.0, 80.0, 40.0, 0.3).unwrap();
        assert_eq!(
            geometry_feature(&big, 400.0, 200.0).unwrap(),
            geometry_feature(&s, 200.0, 100.0).unwrap()
        );
        assert!(geometry_feature(&s, 0.0, 100.0).is_err());
    }

    #[test]
    fn noiseless_features_are_shared_within_an_instance() {
        let a = synth_appearance(&seg(10.0, 10.0), 3, 7, 0.0).unwrap();
        let b = synth_appearance(&seg(90.0, 40.0), 3, 7, 0.0).unwrap();
        assert_eq!(a, b);
        let c = synth_appearance(&seg(10.0, 10.0), 4, 7, 0.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn features_are_unit_norm_and_reproducible() {
        let a = synth_appearance(&seg(10.0, 10.0), 3, 7, 0.1).unwrap();
        let n: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
        assert_eq!(a, synth_appearance(&seg(10.0, 10.0), 3, 7, 0.1).unwrap());
        assert!(synth_appearance(&seg(1.0, 1.0), 1, 1, -0.1).is_err());
    }

    #[test]
    fn external_feature_file_round_trips() {
        let segs = vec![seg(1.0, 2.0), seg(3.0, 4.0)];
        let vals = vec![vec![0.5, -1.0, 2.0], vec![0.0, 1e-300, -7.25]];
        let ext = ExternalFeatures::new(9, segs, vals).unwrap();
        let mut bytes = Vec::new();
        ext.write_to(&mut bytes).unwrap();
        let back = ExternalFeatures::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, ext);
        assert_eq!(back.appearance(&seg(0.0, 0.0), 0, 0, 1).unwrap(), ext.values[1]);
        assert!(back.appearance(&seg(0.0, 0.0), 0, 0, 2).is_err());
        assert!(ExternalFeatures::read_from(&bytes[..bytes.len() - 3]).is_err());
    }
}
