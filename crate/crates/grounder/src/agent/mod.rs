//! The grounding-and-feedback agent: query analysis, target-image selection
//! over stitched composites, visual-prompted object-ID selection, and the
//! retry loop that turns invalid VLM answers into corrective feedback.
//!
//! One grounding run holds two conversations: a single-turn query analysis,
//! and the main grounding thread (system prompt, composite images, and any
//! feedback turns). Invalid answers — an unknown image ID, an image without
//! the target class, an out-of-range object ID — consume one shared retry
//! budget; structural problems (unparseable JSON) get one re-ask each that
//! does not touch the budget, and transport failures get one silent retry.

pub mod backend;
pub mod jsonx;
pub mod prompts;

use std::collections::BTreeMap;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perception::{self, Detection2D, Detector, PerceptionError};
use crate::scene::{display_frame_id, Scene};
use crate::stitch::{
    plan_layouts, render_plan, resize_for_vlm, CellSize, StitchError, StitchedImage,
};
use backend::{AttachedImage, BackendError, ChatMessage, VlmBackend};

#[derive(Debug, Error)]
pub enum AgentError {
    /// Query analysis could not produce a usable structure.
    #[error("query analysis failed: {detail}")]
    Analysis { detail: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
    /// The model's reply stayed unparseable even after a structural re-ask.
    #[error("malformed response during {stage}: {detail}")]
    MalformedResponse { stage: &'static str, detail: String },
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Stitch(#[from] StitchError),
    #[error("scene has no frames")]
    EmptyScene,
}

/// Structured reading of the user query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyzedQuery {
    /// Object category to ground; "unknown" is a legal answer.
    pub target_class: String,
    #[serde(default)]
    pub attributes: Vec<String>,
    #[serde(default)]
    pub conditions: Vec<String>,
}

/// The model's answer to the target-image question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ImageSelection {
    pub reasoning: String,
    /// Normalized to five digits when numeric.
    pub target_image_id: String,
    /// Collected for the transcript; not used downstream.
    pub reference_image_ids: Vec<String>,
}

/// The model's answer to the object-ID question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ObjectSelection {
    pub reasoning: String,
    pub object_id: i64,
}

/// Knobs for one grounding run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    /// Shared retry budget M across all feedback kinds.
    pub retry_limit: u32,
    /// Soft limit L on composite images per request.
    pub soft_limit: usize,
    /// Grid cell size for composites.
    pub cell: CellSize,
    /// Minimum detection score for view preselection and candidates.
    pub detection_threshold: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            retry_limit: 3,
            soft_limit: 6,
            cell: CellSize::default(),
            detection_threshold: 0.30,
        }
    }
}

/// Final verdict of a grounding run. `Failure` means the retry budget ran
/// out — infrastructure problems surface as errors instead.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum GroundingOutcome {
    Success {
        /// Original frame ID of the chosen view.
        target_frame_id: String,
        /// Display ID the model answered with.
        target_image_id: String,
        /// Index among the frame's candidate detections.
        object_id: usize,
        detection: Detection2D,
    },
    Failure {
        reason: String,
    },
}

/// Complete record of one grounding run.
#[derive(Debug, Clone, Serialize)]
pub struct AgentTranscript {
    /// The stand-alone query-analysis exchange.
    pub analysis_messages: Vec<ChatMessage>,
    /// The grounding conversation: system prompt, composites, feedback.
    pub messages: Vec<ChatMessage>,
    pub analyzed: AnalyzedQuery,
    /// Semantic retries consumed (never exceeds the configured limit).
    pub retries_used: u32,
    /// Structural re-asks across both conversations.
    pub structural_reasks: u32,
    /// Display image ID → original frame ID for every sampled view.
    pub id_map: BTreeMap<String, String>,
    /// Display IDs of the views that passed detector preselection (every
    /// view, when the preselection fallback kicked in).
    pub preselected_image_ids: Vec<String>,
    pub outcome: GroundingOutcome,
}

/// Result of a stand-alone (single conversation) operation.
#[derive(Debug, Clone)]
pub struct OneShot<T> {
    pub value: T,
    pub messages: Vec<ChatMessage>,
    pub structural_reasks: u32,
}

/// Zero-pads purely numeric IDs to five digits; anything else is returned
/// unchanged and will fail the validity check downstream.
pub(crate) fn normalize_id(raw: &str) -> String {
    let t = raw.trim();
    if !t.is_empty() && t.bytes().all(|b| b.is_ascii_digit()) {
        if let Ok(n) = t.parse::<u64>() {
            return format!("{n:05}");
        }
    }
    t.to_string()
}

/// Wire-side ID that may arrive as a JSON number or string.
#[derive(Deserialize)]
#[serde(untagged)]
enum IdLike {
    Int(u64),
    Str(String),
}

impl IdLike {
    fn normalize(self) -> String {
        match self {
            IdLike::Int(n) => format!("{n:05}"),
            IdLike::Str(s) => normalize_id(&s),
        }
    }
}

/// Wire-side integer that may arrive as a JSON number or numeric string.
#[derive(Deserialize)]
#[serde(untagged)]
enum IntLike {
    Int(i64),
    Str(String),
}

impl IntLike {
    fn value(self) -> Option<i64> {
        match self {
            IntLike::Int(n) => Some(n),
            IntLike::Str(s) => s.trim().parse().ok(),
        }
    }
}

#[derive(Deserialize)]
struct ImageSelectionWire {
    #[serde(default)]
    reasoning: String,
    target_image_id: IdLike,
    #[serde(default)]
    reference_image_ids: Vec<IdLike>,
}

#[derive(Deserialize)]
struct ObjectSelectionWire {
    #[serde(default)]
    reasoning: String,
    object_id: IntLike,
}

/// One conversation thread against a backend, with the shared plumbing:
/// a single silent retry on transport failure, and one structural re-ask
/// per question when the reply fails to parse.
struct Conversation<'a> {
    backend: &'a dyn VlmBackend,
    messages: Vec<ChatMessage>,
    structural_reasks: u32,
}

impl<'a> Conversation<'a> {
    fn new(backend: &'a dyn VlmBackend) -> Conversation<'a> {
        Conversation {
            backend,
            messages: Vec::new(),
            structural_reasks: 0,
        }
    }

    fn push(&mut self, msg: ChatMessage) {
        self.messages.push(msg);
    }

    /// One backend call; transient failures are retried once without
    /// touching the transcript.
    fn call(&self) -> Result<String, AgentError> {
        match self.backend.chat(&self.messages) {
            Ok(text) => Ok(text),
            Err(e) if e.is_transient() => {
                log::warn!("transient backend failure, retrying once: {e}");
                Ok(self.backend.chat(&self.messages)?)
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Asks for the next assistant turn and parses it with `parse`. A reply
    /// that fails to parse triggers exactly one structural re-ask; a second
    /// failure is a `MalformedResponse` error.
    fn ask_with<T>(
        &mut self,
        stage: &'static str,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<T, AgentError> {
        let reply = self.call()?;
        self.push(ChatMessage::assistant(reply.clone()));
        match parse(&reply) {
            Ok(value) => Ok(value),
            Err(first) => {
                self.push(ChatMessage::user(prompts::structural_reask()));
                self.structural_reasks += 1;
                let retry = self.call()?;
                self.push(ChatMessage::assistant(retry.clone()));
                parse(&retry).map_err(|second| AgentError::MalformedResponse {
                    stage,
                    detail: format!("first reply: {first}; after re-ask: {second}"),
                })
            }
        }
    }
}

fn parse_analysis(text: &str) -> Result<AnalyzedQuery, String> {
    let analyzed: AnalyzedQuery = jsonx::parse_object(text)?;
    if analyzed.target_class.trim().is_empty() {
        return Err("target_class is empty".into());
    }
    Ok(analyzed)
}

fn parse_image_selection(text: &str) -> Result<ImageSelection, String> {
    let wire: ImageSelectionWire = jsonx::parse_object(text)?;
    Ok(ImageSelection {
        reasoning: wire.reasoning,
        target_image_id: wire.target_image_id.normalize(),
        reference_image_ids: wire
            .reference_image_ids
            .into_iter()
            .map(IdLike::normalize)
            .collect(),
    })
}

fn parse_object_selection(text: &str) -> Result<ObjectSelection, String> {
    let wire: ObjectSelectionWire = jsonx::parse_object(text)?;
    let object_id = wire
        .object_id
        .value()
        .ok_or("object_id is not an integer")?;
    Ok(ObjectSelection {
        reasoning: wire.reasoning,
        object_id,
    })
}

/// Resized composites in attachment order, labeled `composite-NN`.
fn attach_composites(stitched: &[StitchedImage]) -> Vec<AttachedImage> {
    stitched
        .iter()
        .enumerate()
        .map(|(i, s)| AttachedImage {
            label: format!("composite-{i:02}"),
            image: resize_for_vlm(&s.raster),
        })
        .collect()
}

/// Extracts the target class, attributes, and conditions from a query in a
/// dedicated single-turn conversation.
pub fn analyze_query(
    query: &str,
    backend: &dyn VlmBackend,
) -> Result<OneShot<AnalyzedQuery>, AgentError> {
    if query.trim().is_empty() {
        return Err(AgentError::Analysis {
            detail: "empty query".into(),
        });
    }
    let mut convo = Conversation::new(backend);
    convo.push(ChatMessage::user(prompts::render_query_analysis(query)));
    let analyzed = convo
        .ask_with("query analysis", parse_analysis)
        .map_err(|e| match e {
            AgentError::MalformedResponse { detail, .. } => AgentError::Analysis { detail },
            other => other,
        })?;
    Ok(OneShot {
        value: analyzed,
        messages: convo.messages,
        structural_reasks: convo.structural_reasks,
    })
}

/// Single-shot target-image selection over pre-stitched composites. The
/// number of views announced to the model is the number of filled cells, not
/// the number of composites.
pub fn select_target_image(
    analyzed: &AnalyzedQuery,
    query: &str,
    stitched: &[StitchedImage],
    backend: &dyn VlmBackend,
) -> Result<OneShot<ImageSelection>, AgentError> {
    assert!(!stitched.is_empty(), "need at least one composite");
    let num_views: usize = stitched.iter().map(|s| s.cell_map.len()).sum();
    let mut convo = Conversation::new(backend);
    convo.push(ChatMessage::system(prompts::grounding_system_prompt()));
    convo.push(ChatMessage::user_with_images(
        prompts::render_input(
            query,
            &analyzed.target_class,
            &analyzed.conditions,
            num_views,
        ),
        attach_composites(stitched),
    ));
    let selection = convo.ask_with("target image selection", parse_image_selection)?;
    Ok(OneShot {
        value: selection,
        messages: convo.messages,
        structural_reasks: convo.structural_reasks,
    })
}

/// Single-shot object-ID selection on an annotated frame. Callers skip this
/// entirely when only one candidate exists (the ID is 0 by construction),
/// and validate the returned ID against the candidate range themselves.
pub fn select_object_id(
    annotated: &RgbImage,
    num_candidates: usize,
    backend: &dyn VlmBackend,
) -> Result<OneShot<ObjectSelection>, AgentError> {
    assert!(
        num_candidates >= 2,
        "single-candidate frames skip VLM selection"
    );
    let mut convo = Conversation::new(backend);
    convo.push(ChatMessage::user_with_images(
        prompts::render_bbox_select(num_candidates),
        vec![AttachedImage {
            label: "annotated-target".into(),
            image: resize_for_vlm(annotated),
        }],
    ));
    let selection = convo.ask_with("object ID selection", parse_object_selection)?;
    Ok(OneShot {
        value: selection,
        messages: convo.messages,
        structural_reasks: convo.structural_reasks,
    })
}

/// Runs the full grounding loop over a pre-sampled scene.
///
/// Views get display IDs `00001..` in scene order; only views where the
/// detector finds the target class are stitched (all views, if it finds
/// none), but any sampled view is a valid answer. Feedback appends exactly
/// one user message per semantic failure until the retry budget is spent.
pub fn run_grounding_loop(
    scene: &Scene,
    query: &str,
    cfg: &AgentConfig,
    backend: &dyn VlmBackend,
    detector: &dyn Detector,
) -> Result<AgentTranscript, AgentError> {
    if scene.frames.is_empty() {
        return Err(AgentError::EmptyScene);
    }

    let analysis = analyze_query(query, backend)?;
    let analyzed = analysis.value;

    // Display IDs cover every sampled view, stitched or not.
    let display_ids: Vec<String> = (0..scene.frames.len()).map(display_frame_id).collect();
    let id_map: BTreeMap<String, String> = display_ids
        .iter()
        .cloned()
        .zip(scene.frames.iter().map(|f| f.frame_id.clone()))
        .collect();
    let index_of: BTreeMap<&str, usize> = display_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();

    // Preselect views that show the target class; an empty preselection
    // falls back to every view so the model always has something to pick.
    let hits = perception::preselect_views(
        scene,
        &analyzed.target_class,
        detector,
        cfg.detection_threshold,
    );
    let mut selected: Vec<usize> = hits
        .iter()
        .filter_map(|fid| scene.frame_index(fid))
        .collect();
    if selected.is_empty() {
        log::warn!(
            "no views preselected for class {:?}; stitching all {} views",
            analyzed.target_class,
            scene.frames.len()
        );
        selected = (0..scene.frames.len()).collect();
    }

    let preselected_image_ids: Vec<String> =
        selected.iter().map(|&i| display_ids[i].clone()).collect();
    let frames_for_stitch: Vec<(&str, &RgbImage)> = selected
        .iter()
        .map(|&i| (display_ids[i].as_str(), &scene.frames[i].color))
        .collect();
    let plan = plan_layouts(frames_for_stitch.len(), cfg.soft_limit);
    let stitched = render_plan(&plan, &frames_for_stitch, cfg.cell, true)?;

    let mut convo = Conversation::new(backend);
    convo.push(ChatMessage::system(prompts::grounding_system_prompt()));
    convo.push(ChatMessage::user_with_images(
        prompts::render_input(
            query,
            &analyzed.target_class,
            &analyzed.conditions,
            frames_for_stitch.len(),
        ),
        attach_composites(&stitched),
    ));

    let budget = cfg.retry_limit;
    let mut retries_used: u32 = 0;
    let outcome = 'grounding: loop {
        let selection = convo.ask_with("target image selection", parse_image_selection)?;
        let display_id = selection.target_image_id.clone();

        let Some(&frame_index) = index_of.get(display_id.as_str()) else {
            if retries_used == budget {
                break GroundingOutcome::Failure {
                    reason: format!(
                        "retry limit {budget} exhausted; last answer was unknown image ID {display_id:?}"
                    ),
                };
            }
            convo.push(ChatMessage::user(prompts::render_image_id_invalid(
                &display_id,
            )));
            retries_used += 1;
            continue;
        };

        let frame = &scene.frames[frame_index];
        let candidates = perception::detect_candidates(
            frame,
            &analyzed.target_class,
            detector,
            cfg.detection_threshold,
        )?;
        if candidates.is_empty() {
            if retries_used == budget {
                break GroundingOutcome::Failure {
                    reason: format!(
                        "retry limit {budget} exhausted; image {display_id} has no {:?} detections",
                        analyzed.target_class
                    ),
                };
            }
            convo.push(ChatMessage::user(prompts::render_detection_not_exist(
                &display_id,
                &analyzed.target_class,
            )));
            retries_used += 1;
            continue;
        }

        if candidates.len() == 1 {
            break GroundingOutcome::Success {
                target_frame_id: frame.frame_id.clone(),
                target_image_id: display_id,
                object_id: 0,
                detection: candidates[0].clone(),
            };
        }

        let (annotated, candidate_map) = perception::annotate_candidates(&frame.color, &candidates);
        convo.push(ChatMessage::user_with_images(
            prompts::render_bbox_select(candidates.len()),
            vec![AttachedImage {
                label: format!("annotated-{display_id}"),
                image: resize_for_vlm(&annotated),
            }],
        ));
        loop {
            let object = convo.ask_with("object ID selection", parse_object_selection)?;
            if object.object_id >= 0 && (object.object_id as usize) < candidates.len() {
                let object_id = object.object_id as usize;
                break 'grounding GroundingOutcome::Success {
                    target_frame_id: frame.frame_id.clone(),
                    target_image_id: display_id,
                    object_id,
                    detection: candidate_map[&object_id].clone(),
                };
            }
            if retries_used == budget {
                break 'grounding GroundingOutcome::Failure {
                    reason: format!(
                        "retry limit {budget} exhausted; object ID {} is outside 0..{}",
                        object.object_id,
                        candidates.len()
                    ),
                };
            }
            // The feedback restates the selection instructions, so it is
            // itself the next question; no extra prompt is pushed.
            convo.push(ChatMessage::user(prompts::render_object_id_invalid(
                object.object_id,
                candidates.len(),
            )));
            retries_used += 1;
        }
    };

    Ok(AgentTranscript {
        analysis_messages: analysis.messages,
        messages: convo.messages,
        analyzed,
        retries_used,
        structural_reasks: analysis.structural_reasks + convo.structural_reasks,
        id_map,
        preselected_image_ids,
        outcome,
    })
}
