//! SVG drawings of scenes, segments, links, clusters and detections.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Point, Segment};
use crate::postproc::{Cluster, Detection};
use crate::synth::Scene;

/// Cluster and detection colors, cycled by index.
pub const PALETTE: [&str; 10] = [
    "#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4", "#f032e6", "#9a6324", "#800000", "#469990",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Layers {
    pub gt: bool,
    pub segments: bool,
    pub links: bool,
    pub clusters: bool,
    pub detections: bool,
}

impl Default for Layers {
    fn default() -> Self {
        Self {
            gt: true,
            segments: true,
            links: true,
            clusters: true,
            detections: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Overlay<'a> {
    pub segments: &'a [Segment],
    pub clusters: &'a [Cluster],
    pub detections: &'a [Detection],
}

impl Overlay<'_> {
    pub const EMPTY: Overlay<'static> = Overlay {
        segments: &[],
        clusters: &[],
        detections: &[],
    };
}

fn points_attr(points: &[Point]) -> String {
    let mut s = String::new();
    for (k, p) in points.iter().enumerate() {
        if k > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{:.2},{:.2}", p.x, p.y);
    }
    s
}

fn color(k: usize) -> &'static str {
    PALETTE[k % PALETTE.len()]
}

/// Layers are drawn in a fixed order (gt, segments, clusters, links,
/// detections), each as one `<g>` with an `id`.
pub fn render_svg(scene: &Scene, overlay: &Overlay, layers: Layers) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = scene.canvas_w,
        h = scene.canvas_h
    );
    let _ = writeln!(out, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    if layers.gt {
        out.push_str("<g id=\"gt\" fill=\"#dddddd\" stroke=\"#777777\" stroke-width=\"1\">\n");
        for inst in &scene.instances {
            let _ = writeln!(out, r#"<polygon points="{}"/>"#, points_attr(inst.polygon.vertices()));
        }
        out.push_str("</g>\n");
    }
    if layers.segments {
        out.push_str("<g id=\"segments\" fill=\"none\" stroke=\"#333333\" stroke-width=\"0.8\">\n");
        for s in overlay.segments {
            let _ = writeln!(out, r#"<polygon points="{}"/>"#, points_attr(&s.vertices()));
        }
        out.push_str("</g>\n");
    }
    if layers.clusters {
        out.push_str("<g id=\"clusters\" fill-opacity=\"0.35\" stroke=\"none\">\n");
        for (k, c) in overlay.clusters.iter().enumerate() {
            for &m in &c.members {
                if let Some(s) = overlay.segments.get(m) {
                    let _ = writeln!(
                        out,
                        r#"<polygon fill="{}" points="{}"/>"#,
                        color(k),
                        points_attr(&s.vertices())
                    );
                }
            }
        }
        out.push_str("</g>\n");
    }
    if layers.links {
        out.push_str("<g id=\"links\" stroke-width=\"1.5\">\n");
        for (k, c) in overlay.clusters.iter().enumerate() {
            for l in &c.links {
                if let (Some(a), Some(b)) = (overlay.segments.get(l.a), overlay.segments.get(l.b)) {
                    let (p, q) = (a.center(), b.center());
                    let _ = writeln!(
                        out,
                        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{}"/>"#,
                        p.x,
                        p.y,
                        q.x,
                        q.y,
                        color(k)
                    );
                }
            }
        }
        out.push_str("</g>\n");
    }
    if layers.detections {
        out.push_str("<g id=\"detections\" fill=\"none\" stroke-width=\"2\">\n");
        for (k, d) in overlay.detections.iter().enumerate() {
            let _ = writeln!(
                out,
                r#"<polygon stroke="{}" points="{}"/>"#,
                color(k),
                points_attr(d.polygon.vertices())
            );
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}

pub fn write_svg(path: &Path, scene: &Scene, overlay: &Overlay, layers: Layers) -> Result<()> {
    std::fs::write(path, render_svg(scene, overlay, layers)).map_err(|e| Error::io(path, e))
}
