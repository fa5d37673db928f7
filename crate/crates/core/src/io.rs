//! Annotation files, model checkpoints and loss curves.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Point, Polygon};
use crate::msgcn::train::LossPoint;
use crate::msgcn::{AdjacencyScale, ModelConfig, MsgcnModel, Variant};
use crate::synth::{load_scenes, Instance, Scene};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnnotationFormat {
    /// `x1,y1,...,x4,y4,transcript` per line.
    IcdarQuad,
    /// 28 integers per line: a 14-point polygon.
    Ctw14pt,
    /// One serialized scene per line.
    Jsonl,
}

impl FromStr for AnnotationFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "icdar-quad" => Ok(Self::IcdarQuad),
            "ctw-14pt" => Ok(Self::Ctw14pt),
            "jsonl" => Ok(Self::Jsonl),
            _ => Err(Error::InvalidInput(format!(
                "unknown annotation format {s:?} (expected icdar-quad, ctw-14pt or jsonl)"
            ))),
        }
    }
}

fn polygon_from_coords(coords: &[f64]) -> std::result::Result<Polygon, String> {
    let pts = coords.chunks(2).map(|c| Point::new(c[0], c[1])).collect();
    Polygon::new(pts).map_err(|e| e.to_string())
}

fn parse_numbers(fields: &[&str]) -> std::result::Result<Vec<f64>, String> {
    fields
        .iter()
        .map(|f| {
            let f = f.trim();
            f.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("bad coordinate {f:?}"))
        })
        .collect()
}

/// One ICDAR line. The transcript is everything after the eighth comma and
/// may itself contain commas.
pub fn parse_icdar_line(line: &str) -> std::result::Result<Polygon, String> {
    let fields: Vec<&str> = line.splitn(9, ',').collect();
    if fields.len() < 8 {
        return Err(format!("expected 8 coordinates, found {}", fields.len()));
    }
    polygon_from_coords(&parse_numbers(&fields[..8])?)
}

/// One CTW line of 28 integers.
pub fn parse_ctw_line(line: &str) -> std::result::Result<Polygon, String> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 28 {
        return Err(format!("expected 28 integers, found {}", fields.len()));
    }
    for f in &fields {
        if f.trim().parse::<i64>().is_err() {
            return Err(format!("bad integer {:?}", f.trim()));
        }
    }
    polygon_from_coords(&parse_numbers(&fields)?)
}

/// Trailing digits of the file stem (`gt_img_12.txt` is scene 12), else
/// `fallback`.
fn scene_id(path: &Path, fallback: u64) -> u64 {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    let digits: String = stem
        .chars()
        .rev()
        .take_while(char::is_ascii_digit)
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().unwrap_or(fallback)
}

fn load_polygon_file(path: &Path, format: AnnotationFormat, fallback_id: u64) -> Result<Scene> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(&text);
    let mut instances = Vec::new();
    let (mut w, mut h) = (1.0_f64, 1.0_f64);
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed = match format {
            AnnotationFormat::IcdarQuad => parse_icdar_line(line),
            _ => parse_ctw_line(line),
        };
        let polygon = parsed.map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            line: k + 1,
            msg,
        })?;
        let b = polygon.bbox();
        w = w.max(b.max_x.ceil());
        h = h.max(b.max_y.ceil());
        instances.push(Instance {
            polygon,
            instance_id: instances.len() as u64,
            style_seed: 0,
            shape: None,
        });
    }
    Ok(Scene {
        id: scene_id(path, fallback_id),
        canvas_w: w,
        canvas_h: h,
        instances,
    })
}

fn files_in(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        let p = entry.map_err(|e| Error::io(path, e))?.path();
        if p.is_file() {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads scenes from a file or from every file of a directory (in name
/// order). A polygon-per-line file is one scene whose canvas is the extent
/// of its polygons.
pub fn load_annotations(path: &Path, format: AnnotationFormat) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for (k, file) in files_in(path)?.iter().enumerate() {
        match format {
            AnnotationFormat::Jsonl => scenes.extend(load_scenes(file)?),
            _ => scenes.push(load_polygon_file(file, format, k as u64)?),
        }
    }
    Ok(scenes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub d: usize,
    pub n_cap: usize,
    pub seed: u64,
    pub head_hidden: usize,
    pub variant: Variant,
    pub sigma: f64,
    pub adjacency: AdjacencyScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Row-major.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn from_model(model: &MsgcnModel) -> Self {
        let c = &model.config;
        Self {
            header: CheckpointHeader {
                version: CHECKPOINT_VERSION,
                d: c.d,
                n_cap: c.n_cap,
                seed: c.seed,
                head_hidden: c.head_hidden,
                variant: c.variant,
                sigma: c.sigma,
                adjacency: c.adjacency,
            },
            tensors: model
                .params()
                .into_iter()
                .map(|(name, shape, values)| Tensor {
                    name,
                    shape,
                    values: values.to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model; every tensor must be present with its exact
    /// shape.
    pub fn into_model(self) -> Result<MsgcnModel> {
        let h = &self.header;
        if h.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidInput(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                h.version
            )));
        }
        let mut model = MsgcnModel::new(ModelConfig {
            d: h.d,
            head_hidden: h.head_hidden,
            variant: h.variant,
            sigma: h.sigma,
            adjacency: h.adjacency,
            n_cap: h.n_cap,
            seed: h.seed,
        })?;
        let expected: Vec<(String, Vec<usize>)> = model.params().into_iter().map(|(n, s, _)| (n, s)).collect();
        let found: Vec<(String, Vec<usize>)> = self.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
        if expected != found {
            return Err(Error::Shape(format!(
                "checkpoint tensors {found:?} do not match the model layout {expected:?}"
            )));
        }
        for ((name, dst), t) in model.params_mut().into_iter().zip(&self.tensors) {
            if dst.len() != t.values.len() || t.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("tensor {name} has bad values")));
            }
            dst.copy_from_slice(&t.values);
        }
        Ok(model)
    }
}

pub fn save_checkpoint(path: &Path, model: &MsgcnModel) -> Result<()> {
    let mut text = serde_json::to_string(&Checkpoint::from_model(model))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<MsgcnModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text)?;
    ck.into_model()
}

/// `step,L_comb`.
pub fn loss_csv(curve: &[LossPoint]) -> String {
    let mut out = String::from("step,L_comb\n");
    for p in curve {
        let _ = writeln!(out, "{},{}", p.step, p.l_comb);
    }
    out
}

pub fn write_loss_csv(path: &Path, curve: &[LossPoint]) -> Result<()> {
    std::fs::write(path, loss_csv(curve)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icdar_quad_line() {
        let p = parse_icdar_line("0,0,10,0,10,5,0,5,abc").unwrap();
        assert_eq!(p.len(), 4);
        assert!((p.area() - 50.0).abs() < 1e-9);
    }

    #[test]
    fn icdar_transcript_keeps_commas() {
        assert!(parse_icdar_line("0,0,10,0,10,5,0,5,a,b,c").is_ok());
        assert!(parse_icdar_line("0,0,10,0,10,5,0,5,###").is_ok());
    }

    #[test]
    fn truncated_lines_fail() {
        assert!(parse_icdar_line("0,0,10,0,10,5").is_err());
        assert!(parse_ctw_line(&vec!["1"; 27].join(",")).is_err());
    }

    #[test]
    fn ctw_line_gives_fourteen_points() {
        let mut coords = Vec::new();
        for k in 0..7 {
            coords.push(format!("{},0", k * 10));
        }
        for k in (0..7).rev() {
            coords.push(format!("{},20", k * 10));
        }
        let p = parse_ctw_line(&coords.join(",")).unwrap();
        assert_eq!(p.len(), 14);
    }

    #[test]
    fn format_names() {
        assert_eq!("ctw-14pt".parse::<AnnotationFormat>().unwrap(), AnnotationFormat::Ctw14pt);
        assert!("quad".parse::<AnnotationFormat>().is_err());
    }

    #[test]
    fn loss_csv_layout() {
        let c = [LossPoint { step: 0, l_comb: 0.5 }, LossPoint { step: 1, l_comb: 0.25 }];
        assert_eq!(loss_csv(&c), "step,L_comb\n0,0.5\n1,0.25\n");
    }
}
