//! Every tunable of the pipeline in one JSON document.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::IOU_THRESHOLD;
use crate::features::{mix_seed, SynthAppearance};
use crate::gt_segments::GtParams;
use crate::msgcn::train::TrainConfig;
use crate::msgcn::ModelConfig;
use crate::postproc::DetectParams;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NmsParams {
    pub iou: f64,
    pub angle: f64,
}

impl Default for NmsParams {
    fn default() -> Self {
        Self {
            iou: 0.7,
            angle: PI / 36.0,
        }
    }
}

/// Missing fields take their defaults; unknown fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub n_scenes: usize,
    pub synth: SynthConfig,
    pub gt: GtParams,
    pub appearance: SynthAppearance,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub detect: DetectParams,
    pub nms: NmsParams,
    pub eval_iou: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            n_scenes: 1000,
            synth: SynthConfig::default(),
            gt: GtParams::default(),
            appearance: SynthAppearance::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            detect: DetectParams::default(),
            nms: NmsParams::default(),
            eval_iou: IOU_THRESHOLD,
        }
    }
}

fn check(ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("config: {what}")))
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        check(self.n_scenes >= 1, "n_scenes must be at least 1")?;
        self.synth.validate()?;
        let g = &self.gt;
        check(g.n >= 2, "gt.n must be at least 2")?;
        check(g.sigma > 0.0 && g.sigma <= 1.0, "gt.sigma must lie in (0, 1]")?;
        check(g.angle_merge >= 0.0 && g.angle_merge < PI / 2.0, "gt.angle_merge must lie in [0, pi/2)")?;
        check(g.max_aspect >= 1.0, "gt.max_aspect must be at least 1")?;
        let a = &self.appearance;
        check(a.dim >= 1 && a.noise_sigma >= 0.0 && a.instance_mix >= 0.0, "appearance ranges")?;
        check(a.dim == self.model.d, "appearance.dim must equal model.d")?;
        let m = &self.model;
        check(m.d >= 1 && m.head_hidden >= 1, "model.d and model.head_hidden must be positive")?;
        check(m.sigma > 0.0, "model.sigma must be positive")?;
        check(m.n_cap >= 2, "model.n_cap must be at least 2")?;
        self.train.validate()?;
        let d = &self.detect;
        check(d.k >= 1, "detect.k must be at least 1")?;
        check(d.alpha > 0.0, "detect.alpha must be positive")?;
        check((0.0..1.0).contains(&d.tau), "detect.tau must lie in [0, 1)")?;
        check(d.tps_lambda >= 0.0 && d.tps_samples >= 2, "detect.tps ranges")?;
        check(self.nms.iou > 0.0 && self.nms.iou <= 1.0 && self.nms.angle >= 0.0, "nms ranges")?;
        check(self.eval_iou > 0.0 && self.eval_iou <= 1.0, "eval_iou must lie in (0, 1]")
    }

    /// Derives every seed of the pipeline from one value.
    pub fn reseed(&mut self, seed: u64) {
        self.appearance.seed = mix_seed(&[seed, 1]);
        self.model.seed = mix_seed(&[seed, 2]);
        self.train.seed = mix_seed(&[seed, 3]);
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Config = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
