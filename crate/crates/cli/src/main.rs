use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use puzzleseg::config::Config;
use puzzleseg::eval::write_results_csv;
use puzzleseg::io::{load_annotations, load_checkpoint, save_checkpoint, write_loss_csv, AnnotationFormat};
use puzzleseg::msgcn::train::{gradient_check, random_check_sample, GradCheckEntry};
use puzzleseg::msgcn::{ModelConfig, MsgcnModel};
use puzzleseg::pipeline::{evaluate_model, evaluate_oracle, fit, oracle_scores, prepare_all, EvalReport};
use puzzleseg::postproc::{detect_with_scores, group_segments, Detection};
use puzzleseg::render::{write_svg, Layers, Overlay};
use puzzleseg::synth::{gen_dataset, load_scenes, Dataset, PreparedScene, Scene};
use puzzleseg::{Error, Result};
use serde::Serialize;

const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "puzzleseg", version, about = "Segment graph text detection on synthetic and annotated scenes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON file with hyperparameters; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Source of every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for scene-parallel stages (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Input {
    /// Annotation file or directory.
    #[arg(long)]
    data: PathBuf,
    /// icdar-quad, ctw-14pt or jsonl.
    #[arg(long, default_value = "jsonl")]
    format: String,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train/val/test JSONL) into --out.
    SynthGen {
        /// Number of scenes; defaults to the config value.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Decompose annotated polygons into ground-truth segments (JSONL).
    GtSegments {
        #[command(flatten)]
        input: Input,
    },
    /// Train the graph model on the train split of a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Detect text polygons in annotated scenes with a trained model.
    Infer {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score detections against the annotations; writes the results CSV.
    Eval {
        #[command(flatten)]
        input: Input,
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Use label-derived scores instead of a model.
        #[arg(long)]
        oracle: bool,
    },
    /// Draw one scene with its segments, links, clusters and detections.
    Render {
        #[command(flatten)]
        input: Input,
        /// Index of the scene in the input.
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated subset of gt,segments,links,clusters,detections.
        #[arg(long, default_value = "gt,segments,links,clusters,detections")]
        layers: String,
    },
    /// Compare analytic and finite-difference gradients on a random graph.
    GradCheck {
        #[arg(long, default_value_t = 6)]
        nodes: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.reseed(common.seed);
    Ok(cfg)
}

fn require_out(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Error::InvalidInput("--out is required for this command".into()))
}

fn load_input(input: &Input) -> Result<Vec<Scene>> {
    let format: AnnotationFormat = input.format.parse()?;
    load_annotations(&input.data, format)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

fn prepare(cfg: &Config, scenes: &[Scene]) -> Result<Vec<PreparedScene>> {
    prepare_all(scenes, &cfg.gt, &cfg.appearance, &cfg.detect)
}

fn checked_model(path: &Path, cfg: &Config) -> Result<MsgcnModel> {
    let model = load_checkpoint(path)?;
    if model.config.d != cfg.appearance.dim {
        return Err(Error::Shape(format!(
            "checkpoint width {} but appearance features have {}",
            model.config.d, cfg.appearance.dim
        )));
    }
    Ok(model)
}

fn print_report(r: &EvalReport) {
    let p = r.detection.prf();
    println!("pair_f1 {:.6}", r.pair_f1());
    println!("cluster_match {:.6}", r.cluster_rate());
    println!("precision {:.6}", p.precision);
    println!("recall {:.6}", p.recall);
    println!("f_measure {:.6}", p.f_measure);
}

#[derive(Serialize)]
struct SceneSegmentsRow<'a> {
    scene_id: u64,
    segments: Vec<[f64; 5]>,
    owners: &'a [Option<usize>],
}

#[derive(Serialize)]
struct SceneDetections<'a> {
    scene_id: u64,
    detections: &'a [Detection],
}

#[derive(Serialize)]
struct GradReport<'a> {
    nodes: usize,
    dim: usize,
    step: f64,
    rel_err: f64,
    passed: bool,
    parameters: &'a [GradCheckEntry],
}

fn parse_layers(spec: &str) -> Result<Layers> {
    let mut l = Layers {
        gt: false,
        segments: false,
        links: false,
        clusters: false,
        detections: false,
    };
    for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match name {
            "gt" => l.gt = true,
            "segments" => l.segments = true,
            "links" => l.links = true,
            "clusters" => l.clusters = true,
            "detections" => l.detections = true,
            _ => return Err(Error::InvalidInput(format!("unknown layer {name:?}"))),
        }
    }
    Ok(l)
}

/// Returns whether the command's own check passed.
fn run(cli: &Cli) -> Result<bool> {
    let cfg = load_config(&cli.common)?;
    match &cli.command {
        Command::SynthGen { n } => {
            let out = require_out(&cli.common)?;
            let ds = gen_dataset(cli.common.seed, n.unwrap_or(cfg.n_scenes), &cfg.synth)?;
            ds.save(out)?;
            write_text(&out.join("config.json"), &cfg.to_json())?;
            info!(
                "wrote {} train, {} val, {} test scenes to {}",
                ds.train.len(),
                ds.val.len(),
                ds.test.len(),
                out.display()
            );
        }
        Command::GtSegments { input } => {
            let out = require_out(&cli.common)?;
            let scenes = load_input(input)?;
            let segs = scenes.iter().map(|s| s.segments(&cfg.gt)).collect::<Result<Vec<_>>>()?;
            let rows: Vec<SceneSegmentsRow> = scenes
                .iter()
                .zip(&segs)
                .map(|(s, g)| SceneSegmentsRow {
                    scene_id: s.id,
                    segments: g.segments.iter().map(|x| x.as_array()).collect(),
                    owners: &g.owners,
                })
                .collect();
            write_text(out, &jsonl(&rows)?)?;
        }
        Command::Train { data } => {
            let out = require_out(&cli.common)?;
            let train = load_scenes(&data.join(Dataset::FILES[0]))?;
            let prepared = prepare(&cfg, &train)?;
            let model_cfg = ModelConfig {
                d: cfg.appearance.dim,
                ..cfg.model
            };
            let (model, curve) = fit(&model_cfg, &cfg.train, &prepared)?;
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            save_checkpoint(&out.join("checkpoint.json"), &model)?;
            write_loss_csv(&out.join("loss.csv"), &curve)?;
            write_text(&out.join("config.json"), &cfg.to_json())?;
            if let Some(last) = curve.last() {
                info!("trained {} steps, final L_comb {:.6}", curve.len(), last.l_comb);
            }
        }
        Command::Infer { input, checkpoint } => {
            let out = require_out(&cli.common)?;
            let model = checked_model(checkpoint, &cfg)?;
            let prepared = prepare(&cfg, &load_input(input)?)?;
            let (_, dets) = evaluate_model(&model, &prepared, &cfg.detect)?;
            let rows: Vec<SceneDetections> = prepared
                .iter()
                .zip(&dets)
                .map(|(p, d)| SceneDetections {
                    scene_id: p.scene.id,
                    detections: d,
                })
                .collect();
            write_text(out, &jsonl(&rows)?)?;
        }
        Command::Eval {
            input,
            checkpoint,
            oracle,
        } => {
            let out = require_out(&cli.common)?;
            let prepared = prepare(&cfg, &load_input(input)?)?;
            let (report, _) = if *oracle {
                evaluate_oracle(&prepared, &cfg.detect)?
            } else {
                let path = checkpoint.as_deref().expect("clap requires a checkpoint");
                evaluate_model(&checked_model(path, &cfg)?, &prepared, &cfg.detect)?
            };
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            write_results_csv(out, &report.per_scene)?;
            print_report(&report);
        }
        Command::Render {
            input,
            scene,
            checkpoint,
            layers,
        } => {
            let out = require_out(&cli.common)?;
            let layers = parse_layers(layers)?;
            let scenes = load_input(input)?;
            let s = scenes.get(*scene).ok_or_else(|| {
                Error::InvalidInput(format!("scene index {scene} out of range ({} scenes)", scenes.len()))
            })?;
            let p = prepare(&cfg, std::slice::from_ref(s))?.remove(0);
            let scores = match checkpoint {
                Some(path) => {
                    let model = checked_model(path, &cfg)?;
                    model.forward(p.sample.appearance.view(), p.sample.geometry.view())?.0
                }
                None => oracle_scores(&p),
            };
            let segments = &p.segs.segments;
            let clusters = group_segments(segments, &scores, &p.pairs, cfg.detect.tau)?;
            let detections = detect_with_scores(segments, &scores, &cfg.detect)?;
            let overlay = Overlay {
                segments,
                clusters: &clusters,
                detections: &detections,
            };
            write_svg(out, &p.scene, &overlay, layers)?;
        }
        Command::GradCheck { nodes, dim, step } => {
            let model = MsgcnModel::new(ModelConfig {
                d: *dim,
                head_hidden: *dim,
                ..cfg.model
            })?;
            let sample = random_check_sample(*nodes, *dim, cfg.model.seed ^ 0x5eed);
            let entries = gradient_check(&model, &sample, *step)?;
            let worst = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
            let passed = worst < GRAD_TOLERANCE;
            for e in &entries {
                println!(
                    "{:<28} {:>6} rel {:.3e} worst entry {:.3e} (abs {:.1e})",
                    e.name, e.count, e.rel_err, e.max_rel_err, e.max_abs_err
                );
            }
            println!("rel_err {worst:.3e} {}", if passed { "PASS" } else { "FAIL" });
            if let Some(out) = &cli.common.out {
                let report = GradReport {
                    nodes: *nodes,
                    dim: *dim,
                    step: *step,
                    rel_err: worst,
                    passed,
                    parameters: &entries,
                };
                write_text(out, &(serde_json::to_string_pretty(&report)? + "\n"))?;
            }
            return Ok(passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PUZZLESEG_LOG", "info")).init();
    if let Some(jobs) = cli.common.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
