//! Zero-shot 3D visual grounding from posed RGB-D scans.
//!
//! The pipeline ingests a posed RGB-D scene, pre-selects views with a 2D
//! open-vocabulary detector, stitches them into multi-image grids, asks a
//! vision-language model to pick the target view and object with feedback
//! retries, then lifts the chosen 2D mask to a 3D axis-aligned box by
//! unprojecting masks from several views and fusing them with a Chamfer
//! consistency gate and statistical outlier removal.

pub mod agent;
pub mod bench;
pub mod cli;
pub mod config;
pub mod eval;
pub mod perception;
pub mod pipeline;
pub mod projection;
pub mod scene;
pub mod stitch;
#[cfg(test)]
pub(crate) mod testutil;
pub mod text;
