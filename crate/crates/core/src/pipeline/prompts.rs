//! Prompt templates for the real-client adapters, stored as text assets and
//! filled by simple `{placeholder}` substitution.

use crate::pipeline::clients::{GroundRequest, RationaleRequest, SelectRequest};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptRole {
    Select,
    Rationale,
    Localize,
    Ground,
}

pub fn prompt_template(role: PromptRole) -> &'static str {
    match role {
        PromptRole::Select => include_str!("../../assets/prompts/select.txt"),
        PromptRole::Rationale => include_str!("../../assets/prompts/rationale.txt"),
        PromptRole::Localize => include_str!("../../assets/prompts/localize.txt"),
        PromptRole::Ground => include_str!("../../assets/prompts/ground.txt"),
    }
}

pub fn render(template: &str, fields: &[(&str, String)]) -> String {
    let mut out = template.to_string();
    for (key, value) in fields {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}

fn candidates_json(boxes: &[crate::boxes::BoxPx]) -> String {
    serde_json::to_string(boxes).expect("boxes serialize")
}

pub fn render_select(req: &SelectRequest) -> String {
    render(
        prompt_template(PromptRole::Select),
        &[
            ("question", req.question.clone()),
            ("answer", req.answer.clone()),
            ("ocr_text", req.ocr_text.clone()),
            ("candidates", candidates_json(&req.candidates)),
        ],
    )
}

pub fn render_rationale(req: &RationaleRequest) -> String {
    render(
        prompt_template(PromptRole::Rationale),
        &[
            ("question", req.question.clone()),
            ("answer", req.answer.clone()),
            ("ocr_text", req.ocr_text.clone()),
        ],
    )
}

pub fn render_ground(req: &GroundRequest) -> String {
    render(
        prompt_template(PromptRole::Ground),
        &[
            ("image_id", req.image_id.clone()),
            ("question", req.question.clone()),
            ("answer", req.answer.clone()),
        ],
    )
}
