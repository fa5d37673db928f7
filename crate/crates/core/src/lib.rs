//! Scene text detection by segment context graph learning.
//!
//! Text regions are decomposed into oriented segments, the segments are
//! connected into appearance and geometry similarity graphs, a two-branch
//! residual graph network scores which segment pairs belong together, and the
//! accepted pairs are grouped and merged back into text polygons.

pub mod anchors;
pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod geom;
pub mod gt_segments;
pub mod io;
pub mod msgcn;
pub mod pipeline;
pub mod postproc;
pub mod raster;
pub mod render;
pub mod simgraph;
pub mod synth;

pub use error::{Error, Result};
pub use geom::{Point, Polygon, Segment};
