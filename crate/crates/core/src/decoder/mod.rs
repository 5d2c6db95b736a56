//! Graph-based decoding of prediction maps into reading-order lines.
//!
//! Decoding runs in four steps: [`extract_nodes`] turns confident grids into
//! character nodes, [`follow`] walks the reading-order map from every node to
//! find its successor, [`resolve_edges`] enforces at most one edge in and one
//! edge out per node, and [`assemble`] cuts the resulting chains into lines
//! between start-of-line and end-of-line nodes.

mod graph;
mod lm;
mod result;

pub use graph::{assemble, edge_angle, extract_nodes, follow, fused_score, resolve_edges, EdgeSet};
pub use lm::{
    best_path_frames, line_frames, prefix_beam_search, rescore_with_lm, BeamConfig, Frame, LanguageModel, NGramLm,
    UniformLm,
};
pub use result::{read_results, write_results, CharInstance, Line, PageRecord, PageResult, SearchTrace, TraceOutcome};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::predictions::PredictionMaps;
use crate::Scalar;

/// Decoding thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    /// Minimum presence confidence for a grid to become a candidate node.
    pub dis_threshold: f64,
    /// IoU above which NMS suppresses the lower-scored box.
    pub nms_iou: f64,
    /// Start/end-of-line confidences must exceed this value.
    pub sol_eol_threshold: f64,
    /// Weight of the presence confidence in the fused node score; the
    /// maximum class probability gets the remainder.
    pub dis_weight: f64,
    /// Search step cap; `None` means `w_g + h_g`.
    pub max_steps: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            dis_threshold: 0.5,
            nms_iou: 0.3,
            sol_eol_threshold: 0.9,
            dis_weight: 0.8,
            max_steps: None,
        }
    }
}

impl DecodeConfig {
    pub fn max_steps_for(&self, w_g: usize, h_g: usize) -> usize {
        self.max_steps.unwrap_or(w_g + h_g).max(1)
    }
}

/// Decodes one page: nodes, searches, edge resolution, line assembly.
///
/// The output passes [`PageResult::check_structure`]; a violation is reported
/// as [`crate::Error::Invariant`].
pub fn decode<T: Scalar>(maps: &PredictionMaps<T>, config: &DecodeConfig) -> Result<PageResult<T>> {
    let nodes = extract_nodes(maps, config)?;
    let node_scores: BTreeMap<_, _> = nodes.iter().map(|n| (n.grid, n.score)).collect();
    let max_steps = config.max_steps_for(maps.shape.w_g, maps.shape.h_g);
    let traces: Vec<SearchTrace> = nodes
        .iter()
        .map(|n| follow(maps, n.grid, &node_scores, max_steps))
        .collect();
    let edges = resolve_edges(&nodes, &traces);
    let result = assemble(&nodes, &edges, &traces, maps, T::lit(config.sol_eol_threshold));
    result.check_structure()?;
    Ok(result)
}
