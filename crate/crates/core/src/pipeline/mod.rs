//! The annotation pipeline: each QA record routes through OCR matching into
//! one of three automated cases — unique match, multiple matches resolved by
//! an LLM, or no match grounded by a VLM — with manual as the fallback for
//! any client failure or invalid response. A rationale variant additionally
//! localizes LLM-generated reasoning sentences into evidence boxes. The
//! encompass box of every completed annotation is the union of its answer
//! and evidence boxes.

pub mod clients;
pub mod ocr;
pub mod prompts;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::{union_box, BoxPx, GtAnnotation};
use clients::{GroundRequest, RationaleRequest, SelectRequest, ServiceClients};
use ocr::{match_answer, OcrDocument, QaRecord};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("record {index} ({question_id}): {message}")]
    Record {
        index: usize,
        question_id: String,
        message: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingCase {
    Unique,
    Multiple,
    Grounded,
    Manual,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Plain,
    /// Additionally generate rationale sentences and localize each into an
    /// evidence box.
    Rationale,
}

/// One routed record: a completed annotation, or a pending-manual marker
/// with the reason routing gave up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingOutcome {
    pub question_id: String,
    pub image_id: String,
    pub case: RoutingCase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<GtAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manual_reason: Option<String>,
}

impl RoutingOutcome {
    fn manual(record: &QaRecord, reason: String) -> Self {
        RoutingOutcome {
            question_id: record.question_id.clone(),
            image_id: record.image_id.clone(),
            case: RoutingCase::Manual,
            annotation: None,
            manual_reason: Some(reason),
        }
    }
}

fn dedup_boxes(mut boxes: Vec<BoxPx>) -> Vec<BoxPx> {
    let mut out: Vec<BoxPx> = Vec::with_capacity(boxes.len());
    for b in boxes.drain(..) {
        if !out.contains(&b) {
            out.push(b);
        }
    }
    out
}

fn ocr_text(doc: &OcrDocument) -> String {
    doc.words
        .iter()
        .map(|w| w.text.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Route one record against its OCR document.
pub fn route(
    record: &QaRecord,
    doc: &OcrDocument,
    clients: &ServiceClients,
    variant: Variant,
) -> RoutingOutcome {
    let text = ocr_text(doc);
    let primary_answer = record.answers.first().cloned().unwrap_or_default();

    // Candidates from any gold answer variant, identical boxes collapsed.
    let matches = dedup_boxes(
        record
            .answers
            .iter()
            .flat_map(|answer| match_answer(doc, answer))
            .collect(),
    );

    let (case, answer_box) = match matches.len() {
        1 => (RoutingCase::Unique, matches[0]),
        0 => {
            let req = GroundRequest {
                question_id: record.question_id.clone(),
                image_id: record.image_id.clone(),
                question: record.question.clone(),
                answer: primary_answer.clone(),
            };
            match clients.vlm.ground(&req) {
                Ok(raw) => match raw.clip(doc.width, doc.height) {
                    Some(clipped) => (RoutingCase::Grounded, clipped),
                    None => {
                        return RoutingOutcome::manual(
                            record,
                            format!("grounded box {raw:?} has no area inside the image"),
                        )
                    }
                },
                Err(e) => return RoutingOutcome::manual(record, e.to_string()),
            }
        }
        _ => {
            let req = SelectRequest {
                question_id: record.question_id.clone(),
                question: record.question.clone(),
                answer: primary_answer.clone(),
                ocr_text: text.clone(),
                candidates: matches.clone(),
            };
            match clients.llm.select_box(&req) {
                Ok(idx) if idx < matches.len() => (RoutingCase::Multiple, matches[idx]),
                Ok(idx) => {
                    return RoutingOutcome::manual(
                        record,
                        format!("selected index {idx} out of {} candidates", matches.len()),
                    )
                }
                Err(e) => return RoutingOutcome::manual(record, e.to_string()),
            }
        }
    };

    let mut evidence = Vec::new();
    if variant == Variant::Rationale {
        let req = RationaleRequest {
            question_id: record.question_id.clone(),
            question: record.question.clone(),
            answer: primary_answer,
            ocr_text: text.clone(),
        };
        let sentences = match clients.llm.rationale(&req) {
            Ok(s) => s,
            Err(e) => return RoutingOutcome::manual(record, e.to_string()),
        };
        for sentence in &sentences {
            let located = match_answer(doc, sentence);
            match located.len() {
                0 => continue, // rationale text not on the page; no evidence box
                1 => evidence.push(located[0]),
                _ => {
                    let req = SelectRequest {
                        question_id: record.question_id.clone(),
                        question: record.question.clone(),
                        answer: sentence.clone(),
                        ocr_text: text.clone(),
                        candidates: located.clone(),
                    };
                    match clients.llm.select_box(&req) {
                        Ok(idx) if idx < located.len() => evidence.push(located[idx]),
                        Ok(idx) => {
                            return RoutingOutcome::manual(
                                record,
                                format!(
                                    "evidence index {idx} out of {} candidates",
                                    located.len()
                                ),
                            )
                        }
                        Err(e) => return RoutingOutcome::manual(record, e.to_string()),
                    }
                }
            }
        }
        evidence = dedup_boxes(evidence);
    }

    let all: Vec<BoxPx> = std::iter::once(answer_box).chain(evidence.clone()).collect();
    let annotation = GtAnnotation {
        question_id: record.question_id.clone(),
        image_id: record.image_id.clone(),
        answer_boxes: vec![answer_box],
        evidence_boxes: evidence,
        encompass: union_box(&all).expect("nonempty box list"),
    };
    RoutingOutcome {
        question_id: record.question_id.clone(),
        image_id: record.image_id.clone(),
        case,
        annotation: Some(annotation),
        manual_reason: None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordError {
    pub index: usize,
    pub question_id: String,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct PipelineOutput {
    /// Routed outcomes in input order (records whose OCR failed are absent).
    pub outcomes: Vec<RoutingOutcome>,
    /// Per-record failures, sorted by record index.
    pub errors: Vec<RecordError>,
}

impl PipelineOutput {
    pub fn outcomes_jsonl(&self) -> String {
        let mut out = String::new();
        for o in &self.outcomes {
            out.push_str(&serde_json::to_string(o).expect("outcome serializes"));
            out.push('\n');
        }
        out
    }
}

pub fn outcomes_from_jsonl(text: &str) -> Result<Vec<RoutingOutcome>, String> {
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

/// Route every record with a bounded worker pool. Results are assembled in
/// input order and the error log is merged by record index, so output is
/// independent of scheduling.
pub fn run_pipeline(
    records: &[QaRecord],
    clients: &ServiceClients,
    variant: Variant,
    parallelism: usize,
) -> PipelineOutput {
    let n = records.len();
    let workers = parallelism.max(1).min(n.max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RoutingOutcome, RecordError>>>> =
        Mutex::new(vec![None; n]);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let record = &records[i];
                let result = match clients.ocr.recognize(&record.image_id) {
                    Ok(doc) => Ok(route(record, &doc, clients, variant)),
                    Err(e) => Err(RecordError {
                        index: i,
                        question_id: record.question_id.clone(),
                        message: e.to_string(),
                    }),
                };
                slots.lock().expect("no poisoned workers")[i] = Some(result);
            });
        }
    });

    let mut output = PipelineOutput::default();
    for slot in slots.into_inner().expect("workers joined") {
        match slot.expect("every index processed") {
            Ok(outcome) => output.outcomes.push(outcome),
            Err(err) => output.errors.push(err),
        }
    }
    output.errors.sort_by_key(|e| e.index);
    output
}

/// Per-split aggregate mirroring the annotation-count and
/// processing-type-distribution tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub split: String,
    pub n_outcomes: usize,
    pub n_completed: usize,
    pub mean_answer_boxes: f64,
    pub mean_evidence_boxes: f64,
    pub mean_encompass: f64,
    pub pct_unique: f64,
    pub pct_multiple: f64,
    pub pct_grounded: f64,
    pub pct_manual: f64,
}

pub fn pipeline_stats(split: &str, outcomes: &[RoutingOutcome]) -> PipelineStats {
    let n = outcomes.len();
    let completed: Vec<&GtAnnotation> =
        outcomes.iter().filter_map(|o| o.annotation.as_ref()).collect();
    let nc = completed.len();
    let mean = |f: &dyn Fn(&GtAnnotation) -> f64| -> f64 {
        if nc == 0 {
            0.0
        } else {
            completed.iter().map(|a| f(a)).sum::<f64>() / nc as f64
        }
    };
    let pct = |case: RoutingCase| -> f64 {
        if n == 0 {
            0.0
        } else {
            100.0 * outcomes.iter().filter(|o| o.case == case).count() as f64 / n as f64
        }
    };
    PipelineStats {
        split: split.to_string(),
        n_outcomes: n,
        n_completed: nc,
        mean_answer_boxes: mean(&|a| a.answer_boxes.len() as f64),
        mean_evidence_boxes: mean(&|a| a.evidence_boxes.len() as f64),
        mean_encompass: if nc == 0 { 0.0 } else { 1.0 },
        pct_unique: pct(RoutingCase::Unique),
        pct_multiple: pct(RoutingCase::Multiple),
        pct_grounded: pct(RoutingCase::Grounded),
        pct_manual: pct(RoutingCase::Manual),
    }
}

pub fn stats_to_csv(stats: &[PipelineStats]) -> String {
    let mut out = String::from(
        "split,n_outcomes,n_completed,mean_answer_boxes,mean_evidence_boxes,mean_encompass,\
         pct_unique,pct_multiple,pct_grounded,pct_manual\n",
    );
    for s in stats {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            s.split,
            s.n_outcomes,
            s.n_completed,
            s.mean_answer_boxes,
            s.mean_evidence_boxes,
            s.mean_encompass,
            s.pct_unique,
            s.pct_multiple,
            s.pct_grounded,
            s.pct_manual
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use clients::{mock_clients, MockScript};
    use ocr::OcrWord;

    fn word(text: &str, x0: f64, y0: f64) -> OcrWord {
        OcrWord {
            text: text.to_string(),
            bbox: BoxPx::new(x0, y0, x0 + 30.0, y0 + 10.0).unwrap(),
            line: None,
        }
    }

    fn fixture_docs() -> Vec<OcrDocument> {
        vec![
            // img-u: the answer "alpha" appears once.
            OcrDocument {
                image_id: "img-u".into(),
                width: 400.0,
                height: 300.0,
                words: vec![word("alpha", 10.0, 10.0), word("beta", 50.0, 10.0)],
            },
            // img-m: "beta" appears twice, on different lines.
            OcrDocument {
                image_id: "img-m".into(),
                width: 400.0,
                height: 300.0,
                words: vec![
                    word("beta", 10.0, 10.0),
                    word("count", 50.0, 10.0),
                    word("beta", 10.0, 100.0),
                ],
            },
            // img-g: answer not present anywhere.
            OcrDocument {
                image_id: "img-g".into(),
                width: 400.0,
                height: 300.0,
                words: vec![word("unrelated", 10.0, 10.0)],
            },
        ]
    }

    fn rec(qid: &str, img: &str, answer: &str) -> QaRecord {
        QaRecord {
            question_id: qid.into(),
            image_id: img.into(),
            question: format!("where is {answer}"),
            answers: vec![answer.to_string()],
        }
    }

    fn fixture_records() -> Vec<QaRecord> {
        vec![
            rec("q-unique", "img-u", "alpha"),
            rec("q-multi", "img-m", "beta"),
            rec("q-ground", "img-g", "gamma"),
            rec("q-manual", "img-g", "delta"),
        ]
    }

    fn fixture_script() -> MockScript {
        let mut script = MockScript::default();
        script.select.insert("q-multi".into(), Some(1));
        script
            .ground
            .insert("q-ground".into(), Some(BoxPx::new(50.0, 50.0, 90.0, 80.0).unwrap()));
        // q-manual: VLM scripted to fail.
        script.ground.insert("q-manual".into(), None);
        script
    }

    #[test]
    fn unique_match_routes_directly() {
        let clients = mock_clients(fixture_script(), fixture_docs());
        let doc = fixture_docs().remove(0);
        let outcome = route(&rec("q-unique", "img-u", "alpha"), &doc, &clients, Variant::Plain);
        assert_eq!(outcome.case, RoutingCase::Unique);
        let ann = outcome.annotation.unwrap();
        assert_eq!(ann.answer_boxes.len(), 1);
        assert_eq!(ann.encompass, ann.answer_boxes[0]);
    }

    #[test]
    fn multiple_matches_use_scripted_choice_and_reject_bad_index() {
        let clients = mock_clients(fixture_script(), fixture_docs());
        let doc = fixture_docs().remove(1);
        let outcome = route(&rec("q-multi", "img-m", "beta"), &doc, &clients, Variant::Plain);
        assert_eq!(outcome.case, RoutingCase::Multiple);
        let ann = outcome.annotation.unwrap();
        // Scripted choice 1 → the second occurrence at y=100.
        assert_eq!(ann.answer_boxes[0].y0, 100.0);

        let mut bad = MockScript::default();
        bad.select.insert("q-multi".into(), Some(99));
        let clients = mock_clients(bad, fixture_docs());
        let outcome = route(&rec("q-multi", "img-m", "beta"), &doc, &clients, Variant::Plain);
        assert_eq!(outcome.case, RoutingCase::Manual);
        assert!(outcome.manual_reason.unwrap().contains("99"));
    }

    #[test]
    fn no_match_grounds_through_the_vlm() {
        let clients = mock_clients(fixture_script(), fixture_docs());
        let doc = fixture_docs().remove(2);
        let outcome = route(&rec("q-ground", "img-g", "gamma"), &doc, &clients, Variant::Plain);
        assert_eq!(outcome.case, RoutingCase::Grounded);
        assert_eq!(
            outcome.annotation.unwrap().answer_boxes[0],
            BoxPx::new(50.0, 50.0, 90.0, 80.0).unwrap()
        );
    }

    #[test]
    fn grounded_boxes_are_clipped_and_zero_area_goes_manual() {
        let mut script = MockScript::default();
        script
            .ground
            .insert("q-ground".into(), Some(BoxPx::new(350.0, 250.0, 900.0, 900.0).unwrap()));
        let clients = mock_clients(script, fixture_docs());
        let doc = fixture_docs().remove(2);
        let outcome = route(&rec("q-ground", "img-g", "gamma"), &doc, &clients, Variant::Plain);
        let ann = outcome.annotation.unwrap();
        assert_eq!(ann.answer_boxes[0], BoxPx::new(350.0, 250.0, 400.0, 300.0).unwrap());

        let mut script = MockScript::default();
        script
            .ground
            .insert("q-ground".into(), Some(BoxPx::new(500.0, 500.0, 900.0, 900.0).unwrap()));
        let clients = mock_clients(script, fixture_docs());
        let outcome = route(&rec("q-ground", "img-g", "gamma"), &doc, &clients, Variant::Plain);
        assert_eq!(outcome.case, RoutingCase::Manual);
    }

    #[test]
    fn rationale_variant_attaches_localized_evidence() {
        let mut script = fixture_script();
        script
            .rationale
            .insert("q-unique".into(), Some(vec!["beta".into(), "not on page".into()]));
        let clients = mock_clients(script, fixture_docs());
        let doc = fixture_docs().remove(0);
        let outcome = route(
            &rec("q-unique", "img-u", "alpha"),
            &doc,
            &clients,
            Variant::Rationale,
        );
        let ann = outcome.annotation.unwrap();
        assert_eq!(ann.evidence_boxes.len(), 1);
        // Encompass covers answer and evidence.
        ann.validate().unwrap();
        assert!(ann.encompass.contains_box(&ann.evidence_boxes[0]));
        assert!(ann.encompass.contains_box(&ann.answer_boxes[0]));
    }

    #[test]
    fn pipeline_covers_all_four_cases_in_order() {
        let clients = mock_clients(fixture_script(), fixture_docs());
        let records = fixture_records();
        let output = run_pipeline(&records, &clients, Variant::Plain, 4);
        assert!(output.errors.is_empty());
        let cases: Vec<RoutingCase> = output.outcomes.iter().map(|o| o.case).collect();
        assert_eq!(
            cases,
            vec![
                RoutingCase::Unique,
                RoutingCase::Multiple,
                RoutingCase::Grounded,
                RoutingCase::Manual
            ]
        );
        for o in &output.outcomes {
            if let Some(ann) = &o.annotation {
                ann.validate().unwrap();
            }
        }
    }

    #[test]
    fn reruns_are_byte_identical_across_parallelism() {
        let clients = mock_clients(fixture_script(), fixture_docs());
        let records = fixture_records();
        let a = run_pipeline(&records, &clients, Variant::Plain, 1).outcomes_jsonl();
        let b = run_pipeline(&records, &clients, Variant::Plain, 4).outcomes_jsonl();
        let c = run_pipeline(&records, &clients, Variant::Plain, 4).outcomes_jsonl();
        assert_eq!(a, b);
        assert_eq!(b, c);
        let parsed = outcomes_from_jsonl(&a).unwrap();
        assert_eq!(parsed.len(), 4);
    }

    #[test]
    fn missing_document_is_an_error_entry_not_a_failure() {
        let clients = mock_clients(fixture_script(), fixture_docs());
        let mut records = fixture_records();
        records.insert(1, rec("q-lost", "img-does-not-exist", "x"));
        let output = run_pipeline(&records, &clients, Variant::Plain, 2);
        assert_eq!(output.outcomes.len(), 4);
        assert_eq!(output.errors.len(), 1);
        assert_eq!(output.errors[0].index, 1);
        assert_eq!(output.errors[0].question_id, "q-lost");
    }

    #[test]
    fn empty_input_gives_empty_output() {
        let clients = mock_clients(MockScript::default(), vec![]);
        let output = run_pipeline(&[], &clients, Variant::Plain, 4);
        assert!(output.outcomes.is_empty());
        assert!(output.errors.is_empty());
    }

    #[test]
    fn stats_all_unique() {
        let clients = mock_clients(fixture_script(), fixture_docs());
        let doc = fixture_docs().remove(0);
        let outcomes: Vec<RoutingOutcome> = (0..3)
            .map(|i| {
                route(
                    &rec(&format!("q{i}"), "img-u", "alpha"),
                    &doc,
                    &clients,
                    Variant::Plain,
                )
            })
            .collect();
        let stats = pipeline_stats("train", &outcomes);
        assert_eq!(stats.pct_unique, 100.0);
        assert_eq!(stats.pct_manual, 0.0);
        assert_eq!(stats.mean_encompass, 1.0);
    }

    #[test]
    fn stats_partition_four_cases_evenly() {
        let clients = mock_clients(fixture_script(), fixture_docs());
        let output = run_pipeline(&fixture_records(), &clients, Variant::Plain, 2);
        let stats = pipeline_stats("validation", &output.outcomes);
        for pct in [
            stats.pct_unique,
            stats.pct_multiple,
            stats.pct_grounded,
            stats.pct_manual,
        ] {
            assert_eq!(pct, 25.0);
        }
        let total = stats.pct_unique + stats.pct_multiple + stats.pct_grounded + stats.pct_manual;
        assert!((total - 100.0).abs() < 0.01);
    }

    #[test]
    fn stats_mean_answer_boxes_on_constructed_annotations() {
        let b = BoxPx::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let outcome = |qid: &str, n_answers: usize| RoutingOutcome {
            question_id: qid.into(),
            image_id: "i".into(),
            case: RoutingCase::Unique,
            annotation: Some(GtAnnotation {
                question_id: qid.into(),
                image_id: "i".into(),
                answer_boxes: vec![b; n_answers],
                evidence_boxes: vec![],
                encompass: b,
            }),
            manual_reason: None,
        };
        let stats = pipeline_stats("s", &[outcome("a", 2), outcome("b", 1)]);
        assert_eq!(stats.mean_answer_boxes, 1.5);
    }
}
