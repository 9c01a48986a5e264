//! Prompt templates and their render functions. Templates are embedded at
//! compile time; placeholders use `{name}` and are substituted verbatim —
//! everything else in the template is preserved byte for byte.

const QUERY_ANALYSIS: &str = include_str!("templates/query_analysis.txt");
const GROUNDING_SYSTEM: &str = include_str!("templates/grounding_system.txt");
const INPUT: &str = include_str!("templates/input.txt");
const BBOX_SELECT: &str = include_str!("templates/bbox_select.txt");
const IMAGE_ID_INVALID: &str = include_str!("templates/image_id_invalid.txt");
const DETECTION_NOT_EXIST: &str = include_str!("templates/detection_not_exist.txt");
const OBJECT_ID_INVALID: &str = include_str!("templates/object_id_invalid.txt");
const STRUCTURAL_REASK: &str = include_str!("templates/structural_reask.txt");
const RETRIEVAL: &str = include_str!("templates/retrieval.txt");

/// Templates are stored without trailing newlines, but editors and tooling
/// sometimes add one; rendering tolerates a single trailing `\n`.
fn body(template: &str) -> &str {
    template.strip_suffix('\n').unwrap_or(template)
}

pub fn grounding_system_prompt() -> String {
    body(GROUNDING_SYSTEM).to_string()
}

pub fn render_query_analysis(query: &str) -> String {
    body(QUERY_ANALYSIS).replace("{query}", query)
}

/// The main grounding request. `conditions` is rendered as a compact JSON
/// array of strings so the model sees the same structure it produced during
/// query analysis.
pub fn render_input(
    query: &str,
    pred_target_class: &str,
    conditions: &[String],
    num_view_selections: usize,
) -> String {
    let conditions_json =
        serde_json::to_string(conditions).expect("string array always serializes");
    body(INPUT)
        .replace("{num_view_selections}", &num_view_selections.to_string())
        .replace("{query}", query)
        .replace("{pred_target_class}", pred_target_class)
        .replace("{conditions}", &conditions_json)
}

pub fn render_bbox_select(num_candidate_bboxes: usize) -> String {
    body(BBOX_SELECT).replace("{num_candidate_bboxes}", &num_candidate_bboxes.to_string())
}

pub fn render_image_id_invalid(image_id: &str) -> String {
    body(IMAGE_ID_INVALID).replace("{image_id}", image_id)
}

pub fn render_detection_not_exist(image_id: &str, pred_target_class: &str) -> String {
    body(DETECTION_NOT_EXIST)
        .replace("{image_id}", image_id)
        .replace("{pred_target_class}", pred_target_class)
}

/// Invalid object ID feedback re-states the selection instructions, so the
/// model keeps the full answer format in its most recent context.
pub fn render_object_id_invalid(object_id: i64, num_candidate_bboxes: usize) -> String {
    let sentence = body(OBJECT_ID_INVALID).replace("{object_id}", &object_id.to_string());
    format!("{sentence}\n{}", render_bbox_select(num_candidate_bboxes))
}

pub fn structural_reask() -> String {
    body(STRUCTURAL_REASK).to_string()
}

pub fn render_retrieval(num_items: usize) -> String {
    body(RETRIEVAL).replace("{num_items}", &num_items.to_string())
}
