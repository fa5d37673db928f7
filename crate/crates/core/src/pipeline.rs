//! Scene preparation, training and evaluation glued together.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::{cluster_matches, evaluate_prf, pair_counts, Counts, SceneResult, IOU_THRESHOLD};
use crate::features::SynthAppearance;
use crate::gt_segments::GtParams;
use crate::msgcn::train::{train, LossPoint, TrainConfig, TrainSample};
use crate::msgcn::{CombinationScoreMap, ModelConfig, MsgcnModel, PairLabel};
use crate::postproc::{detect_with_scores, group_segments, DetectParams, Detection};
use crate::synth::{prepare_scene, PreparedScene, Scene};

pub fn prepare_all(
    scenes: &[Scene],
    gt: &GtParams,
    appearance: &SynthAppearance,
    detect: &DetectParams,
) -> Result<Vec<PreparedScene>> {
    scenes
        .par_iter()
        .map(|s| prepare_scene(s, gt, appearance, detect.k, detect.alpha))
        .collect()
}

pub fn samples(prepared: &[PreparedScene]) -> Vec<TrainSample> {
    prepared.iter().map(|p| p.sample.clone()).collect()
}

/// Trains a freshly initialized model on the prepared scenes.
pub fn fit(model: &ModelConfig, cfg: &TrainConfig, prepared: &[PreparedScene]) -> Result<(MsgcnModel, Vec<LossPoint>)> {
    let mut m = MsgcnModel::new(*model)?;
    let curve = train(&mut m, &samples(prepared), cfg)?;
    Ok((m, curve))
}

/// A score map that is 1 exactly where the label map says "combined".
pub fn oracle_scores(p: &PreparedScene) -> CombinationScoreMap {
    let labels = &p.sample.labels;
    CombinationScoreMap::from_probabilities(labels.len(), |i, j| {
        if labels.get(i, j) == PairLabel::Combined {
            1.0
        } else {
            0.0
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Over kNNR candidate positions.
    pub pairs: Counts,
    pub clusters_matched: usize,
    pub instances: usize,
    pub detection: Counts,
    pub per_scene: Vec<SceneResult>,
}

impl EvalReport {
    pub fn pair_f1(&self) -> f64 {
        self.pairs.prf().f_measure
    }

    pub fn cluster_rate(&self) -> f64 {
        if self.instances == 0 {
            1.0
        } else {
            self.clusters_matched as f64 / self.instances as f64
        }
    }

    pub fn detection_f(&self) -> f64 {
        self.detection.prf().f_measure
    }
}

struct SceneEval {
    pairs: Counts,
    matched: usize,
    instances: usize,
    result: SceneResult,
    detections: Vec<Detection>,
}

fn eval_scene(p: &PreparedScene, scores: &CombinationScoreMap, params: &DetectParams) -> Result<SceneEval> {
    let segs = &p.segs.segments;
    let pairs = pair_counts(scores, &p.sample.labels, &p.pairs, params.tau)?;
    let clusters = group_segments(segs, scores, &p.pairs, params.tau)?;
    let (matched, instances) = cluster_matches(&clusters, &p.segs.owners);
    let detections = detect_with_scores(segs, scores, params)?;
    let polys: Vec<_> = detections.iter().map(|d| d.polygon.clone()).collect();
    let m = evaluate_prf(&polys, &p.scene.polygons(), IOU_THRESHOLD);
    Ok(SceneEval {
        pairs,
        matched,
        instances,
        result: SceneResult {
            scene_id: p.scene.id,
            counts: m.counts,
        },
        detections,
    })
}

fn collect(evals: Vec<SceneEval>) -> (EvalReport, Vec<Vec<Detection>>) {
    let mut report = EvalReport {
        pairs: Counts::default(),
        clusters_matched: 0,
        instances: 0,
        detection: Counts::default(),
        per_scene: Vec::with_capacity(evals.len()),
    };
    let mut dets = Vec::with_capacity(evals.len());
    for e in evals {
        report.pairs.add(e.pairs);
        report.clusters_matched += e.matched;
        report.instances += e.instances;
        report.detection.add(e.result.counts);
        report.per_scene.push(e.result);
        dets.push(e.detections);
    }
    (report, dets)
}

/// Scores every scene with the model and evaluates pairing, grouping and
/// detection. Also returns the detections per scene.
pub fn evaluate_model(
    model: &MsgcnModel,
    prepared: &[PreparedScene],
    params: &DetectParams,
) -> Result<(EvalReport, Vec<Vec<Detection>>)> {
    let evals = prepared
        .par_iter()
        .map(|p| {
            let (scores, _) = model.forward(p.sample.appearance.view(), p.sample.geometry.view())?;
            eval_scene(p, &scores, params)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(collect(evals))
}

/// Evaluation with label-derived scores, isolating grouping and merging.
pub fn evaluate_oracle(prepared: &[PreparedScene], params: &DetectParams) -> Result<(EvalReport, Vec<Vec<Detection>>)> {
    let evals = prepared
        .par_iter()
        .map(|p| eval_scene(p, &oracle_scores(p), params))
        .collect::<Result<Vec<_>>>()?;
    Ok(collect(evals))
}
