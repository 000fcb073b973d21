//! OCR documents and answer-text matching.
//!
//! Matching is case-insensitive and whitespace-normalized, with surrounding
//! punctuation stripped from each token. Multi-word answers match only runs
//! of consecutive words within one OCR line, so spurious cross-column unions
//! cannot form in document layouts. Line membership comes from an explicit
//! per-word `line` field when present, otherwise from vertical box overlap.

use serde::{Deserialize, Serialize};

use crate::boxes::{union_box, BoxPx};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcrWord {
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: BoxPx,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcrDocument {
    pub image_id: String,
    pub width: f64,
    pub height: f64,
    pub words: Vec<OcrWord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub question_id: String,
    pub image_id: String,
    pub question: String,
    pub answers: Vec<String>,
}

/// Lowercase and strip surrounding (not interior) punctuation.
pub fn normalize_token(token: &str) -> String {
    token
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

/// Whitespace-split and normalize; empty tokens drop out.
pub fn normalize_text(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(normalize_token)
        .filter(|t| !t.is_empty())
        .collect()
}

/// Group consecutive words into lines. An explicit `line` value wins;
/// otherwise a new line starts when vertical overlap with the previous word
/// falls below half the smaller box height.
fn line_runs(doc: &OcrDocument) -> Vec<Vec<usize>> {
    let mut runs: Vec<Vec<usize>> = Vec::new();
    for (i, word) in doc.words.iter().enumerate() {
        let same_line = match (runs.last(), word.line) {
            (None, _) => false,
            (Some(run), Some(line)) => doc.words[run[0]].line == Some(line),
            (Some(run), None) => {
                let prev = &doc.words[*run.last().expect("runs are nonempty")].bbox;
                let cur = &word.bbox;
                let overlap = (prev.y1.min(cur.y1) - prev.y0.max(cur.y0)).max(0.0);
                let min_h = (prev.y1 - prev.y0).min(cur.y1 - cur.y0);
                overlap >= 0.5 * min_h
            }
        };
        if same_line {
            runs.last_mut().expect("checked nonempty").push(i);
        } else {
            runs.push(vec![i]);
        }
    }
    runs
}

/// Boxes of every consecutive word run whose normalized text equals the
/// normalized answer. Zero matches means OCR cannot localize the answer.
pub fn match_answer(doc: &OcrDocument, answer: &str) -> Vec<BoxPx> {
    let target = normalize_text(answer);
    if target.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::new();
    for run in line_runs(doc) {
        let tokens: Vec<String> = run
            .iter()
            .map(|&i| normalize_token(&doc.words[i].text))
            .collect();
        if run.len() < target.len() {
            continue;
        }
        for start in 0..=run.len() - target.len() {
            if tokens[start..start + target.len()] == target[..] {
                let boxes: Vec<BoxPx> = run[start..start + target.len()]
                    .iter()
                    .map(|&i| doc.words[i].bbox)
                    .collect();
                out.push(union_box(&boxes).expect("nonempty run"));
            }
        }
    }
    out
}

pub fn parse_ocr_jsonl(text: &str) -> Result<Vec<OcrDocument>, String> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line).map_err(|e| format!("line {}: {e}", lineno + 1))?,
        );
    }
    Ok(out)
}

pub fn parse_qa_jsonl(text: &str) -> Result<Vec<QaRecord>, String> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line).map_err(|e| format!("line {}: {e}", lineno + 1))?,
        );
    }
    Ok(out)
}
