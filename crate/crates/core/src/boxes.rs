//! Pixel-space bounding boxes and per-question ground-truth annotations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BoxError {
    #[error("degenerate box: ({x0}, {y0}, {x1}, {y1}) must satisfy x0 < x1 and y0 < y1")]
    Degenerate { x0: f64, y0: f64, x1: f64, y1: f64 },
    #[error("union_box of an empty list")]
    EmptyUnion,
    #[error("annotation {question_id}: encompass box does not contain {kind} box {index}")]
    EncompassViolation {
        question_id: String,
        kind: &'static str,
        index: usize,
    },
}

/// Axis-aligned pixel box. Serialized as `[x0, y0, x1, y1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoxPx {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<[f64; 4]> for BoxPx {
    fn from(v: [f64; 4]) -> Self {
        BoxPx {
            x0: v[0],
            y0: v[1],
            x1: v[2],
            y1: v[3],
        }
    }
}

impl From<BoxPx> for [f64; 4] {
    fn from(b: BoxPx) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BoxPx {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, BoxError> {
        if !(x0 < x1 && y0 < y1) {
            return Err(BoxError::Degenerate { x0, y0, x1, y1 });
        }
        Ok(BoxPx { x0, y0, x1, y1 })
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        self.x0 <= x && x <= self.x1 && self.y0 <= y && y <= self.y1
    }

    pub fn contains_box(&self, other: &BoxPx) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    /// Overlap area; 0 for disjoint or edge-touching boxes.
    pub fn intersection_area(&self, other: &BoxPx) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BoxPx) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Clip to `[0, width] × [0, height]`; `None` when nothing positive remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BoxPx> {
        let x0 = self.x0.max(0.0);
        let y0 = self.y0.max(0.0);
        let x1 = self.x1.min(width);
        let y1 = self.y1.min(height);
        BoxPx::new(x0, y0, x1, y1).ok()
    }
}

/// Component-wise min/max hull of a nonempty list of boxes.
pub fn union_box(boxes: &[BoxPx]) -> Result<BoxPx, BoxError> {
    let first = boxes.first().ok_or(BoxError::EmptyUnion)?;
    let mut out = *first;
    for b in &boxes[1..] {
        out.x0 = out.x0.min(b.x0);
        out.y0 = out.y0.min(b.y0);
        out.x1 = out.x1.max(b.x1);
        out.y1 = out.y1.max(b.y1);
    }
    Ok(out)
}

/// Ground truth for one QA pair: the answer box(es), any supporting evidence
/// boxes, and the single encompass box containing all of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtAnnotation {
    pub question_id: String,
    #[serde(default)]
    pub image_id: String,
    pub answer_boxes: Vec<BoxPx>,
    #[serde(default)]
    pub evidence_boxes: Vec<BoxPx>,
    pub encompass: BoxPx,
}

impl GtAnnotation {
    /// Build with the encompass derived as the union of answer + evidence.
    pub fn from_boxes(
        question_id: impl Into<String>,
        image_id: impl Into<String>,
        answer_boxes: Vec<BoxPx>,
        evidence_boxes: Vec<BoxPx>,
    ) -> Result<Self, BoxError> {
        let all: Vec<BoxPx> = answer_boxes
            .iter()
            .chain(evidence_boxes.iter())
            .copied()
            .collect();
        Ok(GtAnnotation {
            question_id: question_id.into(),
            image_id: image_id.into(),
            answer_boxes,
            evidence_boxes,
            encompass: union_box(&all)?,
        })
    }

    pub fn validate(&self) -> Result<(), BoxError> {
        for (i, b) in self.answer_boxes.iter().enumerate() {
            if !self.encompass.contains_box(b) {
                return Err(BoxError::EncompassViolation {
                    question_id: self.question_id.clone(),
                    kind: "answer",
                    index: i,
                });
            }
        }
        for (i, b) in self.evidence_boxes.iter().enumerate() {
            if !self.encompass.contains_box(b) {
                return Err(BoxError::EncompassViolation {
                    question_id: self.question_id.clone(),
                    kind: "evidence",
                    index: i,
                });
            }
        }
        Ok(())
    }
}

/// Parse one GT annotation per JSONL line, validating encompass containment.
pub fn parse_annotations_jsonl(text: &str) -> Result<Vec<GtAnnotation>, String> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ann: GtAnnotation = serde_json::from_str(line)
            .map_err(|e| format!("line {}: {e}", lineno + 1))?;
        ann.validate().map_err(|e| format!("line {}: {e}", lineno + 1))?;
        out.push(ann);
    }
    Ok(out)
}

pub fn annotations_to_jsonl(anns: &[GtAnnotation]) -> String {
    let mut s = String::new();
    for a in anns {
        s.push_str(&serde_json::to_string(a).expect("annotation serializes"));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoxPx {
        BoxPx::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn union_of_single_box_is_itself() {
        let b = bx(1.0, 2.0, 3.0, 4.0);
        assert_eq!(union_box(&[b]).unwrap(), b);
    }

    #[test]
    fn union_takes_min_max_per_coordinate() {
        let u = union_box(&[bx(10.0, 10.0, 20.0, 20.0), bx(30.0, 5.0, 40.0, 15.0)]).unwrap();
        assert_eq!(u, bx(10.0, 5.0, 40.0, 20.0));
    }

    #[test]
    fn union_of_empty_list_errors() {
        assert!(matches!(union_box(&[]), Err(BoxError::EmptyUnion)));
    }

    #[test]
    fn edge_touching_boxes_have_zero_intersection() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let b = bx(10.0, 0.0, 20.0, 10.0);
        assert_eq!(a.intersection_area(&b), 0.0);
    }

    #[test]
    fn clip_to_bounds() {
        let b = bx(-5.0, 2.0, 15.0, 12.0);
        assert_eq!(b.clip(10.0, 10.0).unwrap(), bx(0.0, 2.0, 10.0, 10.0));
        assert!(bx(20.0, 20.0, 30.0, 30.0).clip(10.0, 10.0).is_none());
    }

    #[test]
    fn annotation_jsonl_round_trip() {
        let ann = GtAnnotation::from_boxes(
            "q1",
            "img1",
            vec![bx(1.0, 1.0, 2.0, 2.0)],
            vec![bx(0.5, 0.5, 1.5, 1.5)],
        )
        .unwrap();
        assert_eq!(ann.encompass, bx(0.5, 0.5, 2.0, 2.0));
        let text = annotations_to_jsonl(&[ann.clone()]);
        let back = parse_annotations_jsonl(&text).unwrap();
        assert_eq!(back, vec![ann]);
    }

    #[test]
    fn validation_rejects_leaky_encompass() {
        let ann = GtAnnotation {
            question_id: "q".into(),
            image_id: "i".into(),
            answer_boxes: vec![bx(0.0, 0.0, 5.0, 5.0)],
            evidence_boxes: vec![],
            encompass: bx(1.0, 1.0, 5.0, 5.0),
        };
        assert!(ann.validate().is_err());
    }
}
