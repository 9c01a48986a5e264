//! End-to-end grounding of one query: agent loop, anchor segmentation,
//! cross-view matching, and multi-view box estimation.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::backend::VlmBackend;
use crate::agent::{run_grounding_loop, AgentError, AgentTranscript, GroundingOutcome};
use crate::config::PipelineConfig;
use crate::perception::{
    detect_candidates, match_anchor, segment, Detection2D, Detector, Mask2D, MatchPairs, Matcher,
    PerceptionError, Segmenter,
};
use crate::projection::{ensemble_project, ProjectionError, ViewInput, ViewRole};
use crate::scene::{Frame, Query, Scene};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error("frame {frame_id} is not part of the sampled scene")]
    MissingFrame { frame_id: String },
}

/// Everything a pipeline run needs from perception, behind one object.
/// The explicit accessors keep the trait object usable as each base trait.
pub trait PerceptionSuite: Detector + Segmenter + Matcher {
    fn as_detector(&self) -> &dyn Detector;
    fn as_segmenter(&self) -> &dyn Segmenter;
    fn as_matcher(&self) -> &dyn Matcher;
}

impl<T: Detector + Segmenter + Matcher> PerceptionSuite for T {
    fn as_detector(&self) -> &dyn Detector {
        self
    }
    fn as_segmenter(&self) -> &dyn Segmenter {
        self
    }
    fn as_matcher(&self) -> &dyn Matcher {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultStatus {
    Success,
    Failure,
}

/// A view that was considered but did not contribute to the final box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedView {
    pub frame_id: String,
    /// Chamfer distance to the anchor cloud, when the view got that far.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chamfer: Option<f64>,
    pub reason: String,
}

/// Point-cloud sizes behind the final box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCounts {
    /// Fused cloud before outlier removal.
    pub union: usize,
    /// Fused cloud after outlier removal.
    pub kept: usize,
    /// Points each contributing view brought, keyed by frame ID.
    pub per_view: BTreeMap<String, usize>,
}

/// The per-query record written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingResult {
    pub query_id: String,
    pub scene_id: String,
    pub status: ResultStatus,
    /// Axis-aligned box as `[min_x, min_y, min_z, max_x, max_y, max_z]`.
    #[serde(rename = "box", skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 6]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_frame_id: Option<String>,
    /// Display ID the model answered with.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_image_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub object_id: Option<usize>,
    pub views_used: Vec<String>,
    pub views_rejected: Vec<RejectedView>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub point_counts: Option<PointCounts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure_reason: Option<String>,
}

/// Wall-clock seconds per stage (`agent_s`, `segment_s`, `match_s`,
/// `project_s`, `total_s`).
pub type StageTimings = BTreeMap<String, f64>;

/// Bundle returned for one query: the disk record plus the full transcript,
/// stage timings, and the cleaned anchor mask when grounding succeeded.
#[derive(Debug)]
pub struct GroundedQuery {
    pub result: GroundingResult,
    pub transcript: AgentTranscript,
    pub timings: StageTimings,
    pub anchor_mask: Option<Mask2D>,
}

/// Picks the detection whose box contains the most matched target pixels;
/// ties keep the earliest detection, zero hits drop the view.
fn link_detection<'d>(
    matches: &MatchPairs,
    detections: &'d [Detection2D],
) -> Option<&'d Detection2D> {
    let mut best: Option<(&Detection2D, usize)> = None;
    for det in detections {
        let count = matches
            .pairs
            .iter()
            .filter(|p| det.bbox.contains_pixel(p.target.0, p.target.1))
            .count();
        if count > 0 && best.map_or(true, |(_, c)| count > c) {
            best = Some((det, count));
        }
    }
    best.map(|(det, _)| det)
}

/// Runs the whole pipeline for one query against an already-sampled scene.
///
/// A grounding failure (the agent gave up) is a *successful* run with a
/// failure-status result; `Err` means the pipeline itself broke.
pub fn ground_query(
    scene: &Scene,
    query: &Query,
    cfg: &PipelineConfig,
    backend: &dyn VlmBackend,
    perception: &dyn PerceptionSuite,
) -> Result<GroundedQuery, PipelineError> {
    let total_start = Instant::now();
    let mut timings = StageTimings::new();

    let agent_start = Instant::now();
    let transcript = run_grounding_loop(
        scene,
        &query.text,
        &cfg.agent_config(),
        backend,
        perception.as_detector(),
    )?;
    timings.insert("agent_s".into(), agent_start.elapsed().as_secs_f64());

    let (target_frame_id, target_image_id, object_id, detection) = match &transcript.outcome {
        GroundingOutcome::Failure { reason } => {
            timings.insert("total_s".into(), total_start.elapsed().as_secs_f64());
            let result = GroundingResult {
                query_id: query.query_id.clone(),
                scene_id: scene.scene_id.clone(),
                status: ResultStatus::Failure,
                bbox: None,
                target_frame_id: None,
                target_image_id: None,
                object_id: None,
                views_used: Vec::new(),
                views_rejected: Vec::new(),
                point_counts: None,
                failure_reason: Some(reason.clone()),
            };
            return Ok(GroundedQuery {
                result,
                transcript,
                timings,
                anchor_mask: None,
            });
        }
        GroundingOutcome::Success {
            target_frame_id,
            target_image_id,
            object_id,
            detection,
        } => (
            target_frame_id.clone(),
            target_image_id.clone(),
            *object_id,
            detection.clone(),
        ),
    };

    let anchor_frame =
        scene
            .frame(&target_frame_id)
            .ok_or_else(|| PipelineError::MissingFrame {
                frame_id: target_frame_id.clone(),
            })?;
    let anchor_index = scene
        .frame_index(&target_frame_id)
        .expect("frame lookup succeeded above");

    let segment_start = Instant::now();
    let anchor_mask = segment(anchor_frame, &detection.bbox, perception.as_segmenter())?;
    timings.insert("segment_s".into(), segment_start.elapsed().as_secs_f64());

    // Candidate pool: the other preselected views, capped to the N-1 nearest
    // in capture order (ties favor the earlier frame), then restored to
    // capture order for processing.
    let mut pool: Vec<usize> = transcript
        .preselected_image_ids
        .iter()
        .filter_map(|display| transcript.id_map.get(display))
        .filter(|frame_id| frame_id.as_str() != target_frame_id)
        .filter_map(|frame_id| scene.frame_index(frame_id))
        .collect();
    pool.sort_unstable_by_key(|&i| (i.abs_diff(anchor_index), i));
    pool.truncate(cfg.projection.ensemble_n.saturating_sub(1));
    pool.sort_unstable();
    let candidate_frames: Vec<&Frame> = pool.iter().map(|&i| &scene.frames[i]).collect();

    let mut rejected: Vec<RejectedView> = Vec::new();

    let match_start = Instant::now();
    let matched = match_anchor(
        anchor_frame,
        &anchor_mask,
        &candidate_frames,
        perception.as_matcher(),
    );
    timings.insert("match_s".into(), match_start.elapsed().as_secs_f64());

    let matched_ids: BTreeSet<&str> = matched.iter().map(|m| m.target_frame_id.as_str()).collect();
    for frame in &candidate_frames {
        if !matched_ids.contains(frame.frame_id.as_str()) {
            rejected.push(RejectedView {
                frame_id: frame.frame_id.clone(),
                chamfer: None,
                reason: "no pixel correspondences from the anchor view".into(),
            });
        }
    }

    // Link each matched view to a detection, then segment that detection.
    let mut views: Vec<ViewInput> = Vec::new();
    for m in &matched {
        let frame = scene
            .frame(&m.target_frame_id)
            .ok_or_else(|| PipelineError::MissingFrame {
                frame_id: m.target_frame_id.clone(),
            })?;
        let detections = match detect_candidates(
            frame,
            &transcript.analyzed.target_class,
            perception.as_detector(),
            cfg.detection_threshold,
        ) {
            Ok(d) => d,
            Err(e) => {
                warn!("dropping view {}: detector failed: {e}", frame.frame_id);
                rejected.push(RejectedView {
                    frame_id: frame.frame_id.clone(),
                    chamfer: None,
                    reason: format!("detector failed: {e}"),
                });
                continue;
            }
        };
        let Some(det) = link_detection(m, &detections) else {
            rejected.push(RejectedView {
                frame_id: frame.frame_id.clone(),
                chamfer: None,
                reason: "no detection contains the matched pixels".into(),
            });
            continue;
        };
        match segment(frame, &det.bbox, perception.as_segmenter()) {
            Ok(mask) => views.push(ViewInput { frame, mask }),
            Err(e) => {
                warn!("dropping view {}: segmentation failed: {e}", frame.frame_id);
                rejected.push(RejectedView {
                    frame_id: frame.frame_id.clone(),
                    chamfer: None,
                    reason: format!("segmentation failed: {e}"),
                });
            }
        }
    }

    let project_start = Instant::now();
    let projection = ensemble_project(
        &ViewInput {
            frame: anchor_frame,
            mask: anchor_mask,
        },
        &views,
        &cfg.projection,
    )?;
    timings.insert("project_s".into(), project_start.elapsed().as_secs_f64());

    let mut views_used = Vec::new();
    let mut per_view = BTreeMap::new();
    for v in &projection.views {
        per_view.insert(v.frame_id.clone(), v.points);
        match v.role {
            ViewRole::Anchor | ViewRole::Accepted => views_used.push(v.frame_id.clone()),
            ViewRole::RejectedChamfer => rejected.push(RejectedView {
                frame_id: v.frame_id.clone(),
                chamfer: v.chamfer,
                reason: "chamfer distance above threshold".into(),
            }),
            ViewRole::RejectedEmpty => rejected.push(RejectedView {
                frame_id: v.frame_id.clone(),
                chamfer: None,
                reason: "no 3d points after mask cleaning".into(),
            }),
        }
    }

    let b = &projection.bbox;
    let result = GroundingResult {
        query_id: query.query_id.clone(),
        scene_id: scene.scene_id.clone(),
        status: ResultStatus::Success,
        bbox: Some([b.min[0], b.min[1], b.min[2], b.max[0], b.max[1], b.max[2]]),
        target_frame_id: Some(target_frame_id),
        target_image_id: Some(target_image_id),
        object_id: Some(object_id),
        views_used,
        views_rejected: rejected,
        point_counts: Some(PointCounts {
            union: projection.union_points,
            kept: projection.kept_points,
            per_view,
        }),
        failure_reason: None,
    };
    timings.insert("total_s".into(), total_start.elapsed().as_secs_f64());
    Ok(GroundedQuery {
        result,
        transcript,
        timings,
        anchor_mask: Some(projection.anchor_mask),
    })
}
