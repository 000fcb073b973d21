//! End-to-end evaluation over synthetic samples: selection quality (top-1
//! and region accuracy), coverage, and answer quality (ANLS over readout
//! predictions on refined crop tokens).

use thiserror::Error;

use crate::align::AlignmentModel;
use crate::grid::{slide_windows, GridError};
use crate::metrics::{
    anls_dataset, region_accuracy, EvalReport, MetricsError, RegionAccuracyMode, ANLS_THRESHOLD,
};
use crate::refine::{refine_budget, ToyEncoder};
use crate::select::{adaptive_select, crop_grid, rank_regions, SelectError, SelectionResult};
use crate::synth::{readout_answer, SyntheticSample};
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Readout decision threshold on the mean cosine between crop tokens and the
/// planted pattern. Sits between the typical alignment of isolated
/// re-encoded crops and that of full-image encodings restricted to the same
/// crop (see `calibrate_readout_threshold`).
pub const READOUT_COS_THRESHOLD: f64 = 0.35;

/// Fraction of held-out samples whose top-ranked window is the positive
/// (ground-truth-closest) window. Strict: a neighbouring window covering
/// almost as much of the planted box counts as a miss.
pub fn top1_accuracy(
    model: &AlignmentModel,
    samples: &[SyntheticSample],
    cfg: &TrainConfig,
) -> Result<f64, EvalError> {
    let mut hits = 0usize;
    for s in samples {
        let windows = slide_windows(&s.grid, cfg.window_w, cfg.window_h, cfg.stride)?;
        let (pos, _) = crate::grid::assign_pos_neg(&windows, s.gt(), s.grid.px_per_token())?;
        let ranked = rank_regions(model, &s.grid, &windows, &s.embedding)?;
        if ranked[0].0 == pos {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len().max(1) as f64)
}

/// Fraction of held-out samples whose top-ranked window contains the center
/// of the planted box — region accuracy's center-containment rule applied to
/// the top-1 window. This is the headline selection metric: when a box
/// straddles window boundaries, any best-covering window counts.
pub fn top1_center_accuracy(
    model: &AlignmentModel,
    samples: &[SyntheticSample],
    cfg: &TrainConfig,
) -> Result<f64, EvalError> {
    let mut hits = 0usize;
    for s in samples {
        let windows = slide_windows(&s.grid, cfg.window_w, cfg.window_h, cfg.stride)?;
        let ranked = rank_regions(model, &s.grid, &windows, &s.embedding)?;
        let top = crate::grid::window_to_px(&windows[ranked[0].0], s.grid.px_per_token());
        let (cx, cy) = s.gt().encompass.center();
        if top.contains_point(cx, cy) {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len().max(1) as f64)
}

pub struct EvalOutcome {
    pub report: EvalReport,
    pub selections: Vec<SelectionResult>,
    pub predictions: Vec<String>,
}

/// Full pipeline per sample: rank regions, select adaptively, crop, refine
/// in isolation under the token budget, read the answer out of the refined
/// tokens, and aggregate ANLS / region accuracy / coverage.
pub fn evaluate(
    model: &AlignmentModel,
    encoder: &ToyEncoder,
    samples: &[SyntheticSample],
    cfg: &TrainConfig,
    region_mode: RegionAccuracyMode,
) -> Result<EvalOutcome, EvalError> {
    let mut selections = Vec::with_capacity(samples.len());
    let mut predictions = Vec::with_capacity(samples.len());
    let mut anls_pairs = Vec::with_capacity(samples.len());
    let mut coverage_sum = 0.0;
    for s in samples {
        let windows = slide_windows(&s.grid, cfg.window_w, cfg.window_h, cfg.stride)?;
        let ranked = rank_regions(model, &s.grid, &windows, &s.embedding)?;
        let sel = adaptive_select(
            &ranked,
            &windows,
            s.grid.px_per_token(),
            s.grid.image_area_px(),
            cfg.ratio,
            cfg.coverage_mode,
        )?;
        let (crop, rect) = crop_grid(&s.grid, &sel.hull)?;
        let budget = refine_budget(s.grid.token_count(), cfg.refine_budget_fraction);
        let refined = encoder.refine(&crop, budget);
        let pred = readout_answer(s, &rect, &refined, READOUT_COS_THRESHOLD);
        coverage_sum += sel.coverage;
        anls_pairs.push((pred.clone(), vec![s.rec.answer.clone()]));
        predictions.push(pred);
        selections.push(sel);
    }
    let gts: Vec<_> = samples.iter().map(|s| s.gt().clone()).collect();
    let report = EvalReport {
        anls: anls_dataset(&anls_pairs, ANLS_THRESHOLD)?,
        region_accuracy: region_accuracy(&selections, &gts, region_mode)?,
        mean_coverage: coverage_sum / samples.len().max(1) as f64,
        n_samples: samples.len(),
    };
    Ok(EvalOutcome {
        report,
        selections,
        predictions,
    })
}

pub struct RefinementAblation {
    pub refined_accuracy: f64,
    pub contaminated_accuracy: f64,
    pub mean_refined_cosine: f64,
    pub mean_contaminated_cosine: f64,
}

/// Re-encode the ground-truth crop in isolation versus restricting the
/// full-image encoding to the same crop, and read the answer out of each.
/// The crop geometry is identical in both arms; only token values differ.
pub fn refinement_ablation(
    encoder: &ToyEncoder,
    samples: &[SyntheticSample],
    threshold: f64,
) -> Result<RefinementAblation, EvalError> {
    let mut refined_hits = 0usize;
    let mut contaminated_hits = 0usize;
    let mut refined_cos = 0.0;
    let mut contaminated_cos = 0.0;
    for s in samples {
        let (raw_crop, rect) = crop_grid(&s.grid, &s.gt().encompass)?;
        let refined = encoder.refine(&raw_crop, raw_crop.token_count());
        let full = encoder.encode(&s.grid);
        let (contaminated, _) = crop_grid(&full, &s.gt().encompass)?;

        if readout_answer(s, &rect, &refined, threshold) == s.rec.answer {
            refined_hits += 1;
        }
        if readout_answer(s, &rect, &contaminated, threshold) == s.rec.answer {
            contaminated_hits += 1;
        }
        refined_cos += mean_pattern_cosine(s, &refined);
        contaminated_cos += mean_pattern_cosine(s, &contaminated);
    }
    let n = samples.len().max(1) as f64;
    Ok(RefinementAblation {
        refined_accuracy: refined_hits as f64 / n,
        contaminated_accuracy: contaminated_hits as f64 / n,
        mean_refined_cosine: refined_cos / n,
        mean_contaminated_cosine: contaminated_cos / n,
    })
}

fn mean_pattern_cosine(sample: &SyntheticSample, tokens: &crate::grid::TokenGrid) -> f64 {
    let mut total = 0.0;
    let mut count = 0.0f64;
    for r in 0..tokens.height() {
        for c in 0..tokens.width() {
            total += tokenlens_autograd::kernels::cosine(tokens.cell(r, c), &sample.pattern);
            count += 1.0;
        }
    }
    total / count.max(1.0)
}
