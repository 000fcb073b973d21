//! Synthetic grounding task: each sample is a token grid with one planted
//! region whose content is derived from the instruction's hash, plus
//! distractor regions planted from unrelated instructions and Gaussian
//! background cells. An oracle answerer and a value-based readout provide
//! ground truth for selection and refinement experiments.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::boxes::{BoxPx, GtAnnotation};
use crate::grid::TokenGrid;
use crate::select::CellRect;
use crate::text::{embed_text, text_hash64, token_embedding, InstructionEmbedding};
use tokenlens_autograd::kernels;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("n must be at least 1")]
    EmptyDataset,
    #[error("box sides {min}..={max} do not fit a {gh}×{gw} grid")]
    BoxTooLarge {
        min: usize,
        max: usize,
        gh: usize,
        gw: usize,
    },
    #[error("dataset parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

const ADJECTIVES: [&str; 10] = [
    "amber", "cobalt", "crimson", "ivory", "jade", "onyx", "sable", "teal", "umber", "violet",
];
const NOUNS: [&str; 10] = [
    "marker", "panel", "badge", "label", "gauge", "token", "emblem", "stripe", "figure", "symbol",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub embed_dim: usize,
    pub px_per_token: f64,
    /// Planted box side range, in tokens.
    pub box_min: usize,
    pub box_max: usize,
    pub n_distractors: usize,
    /// Strength of the instruction-derived pattern in planted cells.
    pub signal_alpha: f64,
    /// Per-component noise inside planted cells.
    pub noise_sigma: f64,
    /// Weight of the answer-token embedding inside the planted pattern; the
    /// rest comes from a stream keyed by the descriptor's hash. Kept small
    /// so an untrained model cannot score regions through the shared linear
    /// structure alone.
    pub embed_mix: f64,
    /// Anonymous coherent texture patches scattered over the background so
    /// planted regions are not the only structured content; keeps untrained
    /// ranking near chance everywhere on the grid.
    pub n_texture_patches: usize,
    /// How many adjectives/nouns of the word lists to draw from (≤ 10 each);
    /// smaller vocabularies give the alignment more examples per pattern.
    pub vocab: usize,
    pub text_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            grid_h: 24,
            grid_w: 24,
            embed_dim: 32,
            px_per_token: 14.0,
            box_min: 4,
            box_max: 10,
            n_distractors: 2,
            signal_alpha: 1.0,
            noise_sigma: 0.5,
            embed_mix: 0.0,
            n_texture_patches: 10,
            vocab: 10,
            text_seed: 0,
        }
    }
}

/// Everything needed to rebuild one sample deterministically; this is the
/// JSONL row of a generated dataset. Grid content is recomputed from the
/// seeds, never stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub question_id: String,
    pub sample_seed: u64,
    pub instruction: String,
    pub answer: String,
    pub distractors: Vec<String>,
    pub gt: GtAnnotation,
    pub distractor_boxes: Vec<BoxPx>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub embed_dim: usize,
    pub px_per_token: f64,
    #[serde(default)]
    pub texture_boxes: Vec<BoxPx>,
    pub signal_alpha: f64,
    pub noise_sigma: f64,
    #[serde(default)]
    pub embed_mix: f64,
    pub text_seed: u64,
}

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub rec: SampleRecord,
    pub grid: TokenGrid,
    pub embedding: InstructionEmbedding,
    /// Unit-norm pattern planted in the ground-truth cells.
    pub pattern: Vec<f64>,
}

impl SyntheticSample {
    pub fn question_id(&self) -> &str {
        &self.rec.question_id
    }

    pub fn answer(&self) -> &str {
        &self.rec.answer
    }

    pub fn gt(&self) -> &GtAnnotation {
        &self.rec.gt
    }

    /// Token rectangle of the planted (encompass) box.
    pub fn gt_cells(&self) -> CellRect {
        box_cells(&self.rec.gt.encompass, self.rec.px_per_token)
    }

    /// Flat grid indices of the planted box.
    pub fn gt_token_indices(&self) -> BTreeSet<usize> {
        self.gt_cells()
            .flat_indices(self.rec.grid_w)
            .into_iter()
            .collect()
    }
}

/// Cells covered by a token-aligned pixel box.
fn box_cells(b: &BoxPx, px_per_token: f64) -> CellRect {
    CellRect {
        r0: (b.y0 / px_per_token).floor() as usize,
        c0: (b.x0 / px_per_token).floor() as usize,
        r1: (b.y1 / px_per_token).ceil() as usize,
        c1: (b.x1 / px_per_token).ceil() as usize,
    }
}

/// Independent stream seed for (master, index) pairs.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"))
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = kernels::norm(&v).max(1e-12);
    for x in &mut v {
        *x /= n;
    }
    v
}

/// Unit pattern for a descriptor: a hash-keyed Gaussian direction blended
/// with a small component of the descriptor's token embeddings.
fn pattern_for(adj: &str, noun: &str, d: usize, text_seed: u64, embed_mix: f64) -> Vec<f64> {
    let a = token_embedding(adj, d, text_seed);
    let b = token_embedding(noun, d, text_seed);
    let embed = normalize(a.iter().zip(&b).map(|(x, y)| x + y).collect());
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(
        text_hash64(&format!("{adj} {noun}")),
        0x9A77E54,
    ));
    let hashed = normalize((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect());
    normalize(
        embed
            .iter()
            .zip(&hashed)
            .map(|(e, h)| embed_mix * e + (1.0 - embed_mix) * h)
            .collect(),
    )
}

fn plant(
    grid: &mut TokenGrid,
    rect: &CellRect,
    pattern: &[f64],
    alpha: f64,
    sigma: f64,
    rng: &mut ChaCha20Rng,
) {
    for r in rect.r0..rect.r1 {
        for c in rect.c0..rect.c1 {
            for (cell, &p) in grid.cell_mut(r, c).iter_mut().zip(pattern) {
                let eps: f64 = rng.sample(StandardNormal);
                *cell = alpha * p + sigma * eps;
            }
        }
    }
}

/// Rebuild the token grid for a record. Background and distractor noise come
/// from streams derived from the sample seed; the planted cells come from a
/// stream keyed by the instruction's hash.
pub fn build_grid(rec: &SampleRecord) -> TokenGrid {
    let d = rec.embed_dim;
    let mut grid = TokenGrid::zeros(rec.grid_h, rec.grid_w, d, rec.px_per_token);

    // Background: match the marginal scale of planted cells so magnitude
    // alone does not reveal the plant.
    let sigma_bg =
        (rec.signal_alpha * rec.signal_alpha / d as f64 + rec.noise_sigma * rec.noise_sigma)
            .sqrt();
    let mut bg_rng = ChaCha20Rng::seed_from_u64(derive_seed(rec.sample_seed, 0xB6));
    for r in 0..rec.grid_h {
        for c in 0..rec.grid_w {
            for v in grid.cell_mut(r, c).iter_mut() {
                let eps: f64 = bg_rng.sample(StandardNormal);
                *v = sigma_bg * eps;
            }
        }
    }

    for (j, bx) in rec.texture_boxes.iter().enumerate() {
        let mut dir_rng = ChaCha20Rng::seed_from_u64(derive_seed(rec.sample_seed, 0x7E00 + j as u64));
        let u = normalize(
            (0..d)
                .map(|_| dir_rng.sample::<f64, _>(StandardNormal))
                .collect(),
        );
        let rect = box_cells(bx, rec.px_per_token);
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(rec.sample_seed, 0x7F00 + j as u64));
        plant(
            &mut grid,
            &rect,
            &u,
            rec.signal_alpha,
            rec.noise_sigma,
            &mut rng,
        );
    }

    for (j, (descr, bx)) in rec
        .distractors
        .iter()
        .zip(&rec.distractor_boxes)
        .enumerate()
    {
        let mut words = descr.split_whitespace();
        let adj = words.next().unwrap_or("");
        let noun = words.next().unwrap_or("");
        let u = pattern_for(adj, noun, d, rec.text_seed, rec.embed_mix);
        let rect = box_cells(bx, rec.px_per_token);
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(rec.sample_seed, 0xD0 + j as u64));
        plant(
            &mut grid,
            &rect,
            &u,
            rec.signal_alpha,
            rec.noise_sigma,
            &mut rng,
        );
    }

    let mut words = rec.answer.split_whitespace();
    let adj = words.next().unwrap_or("");
    let noun = words.next().unwrap_or("");
    let u = pattern_for(adj, noun, d, rec.text_seed, rec.embed_mix);
    let rect = box_cells(&rec.gt.encompass, rec.px_per_token);
    let mut plant_rng = ChaCha20Rng::seed_from_u64(text_hash64(&rec.instruction));
    plant(
        &mut grid,
        &rect,
        &u,
        rec.signal_alpha,
        rec.noise_sigma,
        &mut plant_rng,
    );
    grid
}

pub fn sample_from_record(rec: SampleRecord) -> SyntheticSample {
    let grid = build_grid(&rec);
    let embedding = embed_text(&rec.instruction, rec.embed_dim, rec.text_seed)
        .expect("instructions are nonempty");
    let mut words = rec.answer.split_whitespace();
    let adj = words.next().unwrap_or("");
    let noun = words.next().unwrap_or("");
    let pattern = pattern_for(adj, noun, rec.embed_dim, rec.text_seed, rec.embed_mix);
    SyntheticSample {
        rec,
        grid,
        embedding,
        pattern,
    }
}

fn token_box(
    rng: &mut ChaCha20Rng,
    cfg: &SynthConfig,
) -> (CellRect, BoxPx) {
    let h = rng.random_range(cfg.box_min..=cfg.box_max.min(cfg.grid_h));
    let w = rng.random_range(cfg.box_min..=cfg.box_max.min(cfg.grid_w));
    let top = rng.random_range(0..=cfg.grid_h - h);
    let left = rng.random_range(0..=cfg.grid_w - w);
    let rect = CellRect {
        r0: top,
        c0: left,
        r1: top + h,
        c1: left + w,
    };
    let p = cfg.px_per_token;
    let bx = BoxPx {
        x0: left as f64 * p,
        y0: top as f64 * p,
        x1: (left + w) as f64 * p,
        y1: (top + h) as f64 * p,
    };
    (rect, bx)
}

fn rects_overlap(a: &CellRect, b: &CellRect) -> bool {
    a.r0 < b.r1 && b.r0 < a.r1 && a.c0 < b.c1 && b.c0 < a.c1
}

/// Generate `n` reproducible samples. Per-sample streams are derived from
/// (master seed, index), so any subset regenerates identically.
pub fn gen_synthetic(
    n: usize,
    cfg: &SynthConfig,
    master_seed: u64,
) -> Result<Vec<SyntheticSample>, SynthError> {
    if n == 0 {
        return Err(SynthError::EmptyDataset);
    }
    if cfg.box_min == 0 || cfg.box_min > cfg.box_max || cfg.box_max > cfg.grid_h.min(cfg.grid_w) {
        return Err(SynthError::BoxTooLarge {
            min: cfg.box_min,
            max: cfg.box_max,
            gh: cfg.grid_h,
            gw: cfg.grid_w,
        });
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let sample_seed = derive_seed(master_seed, i as u64);
        let mut rng = ChaCha20Rng::seed_from_u64(sample_seed);
        let vocab = cfg.vocab.clamp(2, ADJECTIVES.len());
        let adj = ADJECTIVES[rng.random_range(0..vocab)];
        let noun = NOUNS[rng.random_range(0..vocab)];
        let instruction = format!("find the {adj} {noun}");
        let answer = format!("{adj} {noun}");

        let (gt_rect, gt_box) = token_box(&mut rng, cfg);
        let gt = GtAnnotation {
            question_id: format!("synth-{i:05}"),
            image_id: format!("img-{i:05}"),
            answer_boxes: vec![gt_box],
            evidence_boxes: vec![],
            encompass: gt_box,
        };

        let mut texture_boxes = Vec::new();
        for _ in 0..cfg.n_texture_patches {
            let (_, bx) = token_box(&mut rng, cfg);
            texture_boxes.push(bx);
        }

        let mut distractors = Vec::new();
        let mut distractor_boxes = Vec::new();
        for _ in 0..cfg.n_distractors {
            // Both words must differ from the answer's: a shared word would
            // correlate the distractor pattern with the instruction.
            let (d_adj, d_noun) = loop {
                let a = ADJECTIVES[rng.random_range(0..vocab)];
                let o = NOUNS[rng.random_range(0..vocab)];
                if a != adj && o != noun {
                    break (a, o);
                }
            };
            // Distractors must not touch the planted box; give up after a
            // bounded number of placement attempts on crowded grids.
            let mut placed = None;
            for _ in 0..50 {
                let (rect, bx) = token_box(&mut rng, cfg);
                if !rects_overlap(&rect, &gt_rect) {
                    placed = Some(bx);
                    break;
                }
            }
            if let Some(bx) = placed {
                distractors.push(format!("{d_adj} {d_noun}"));
                distractor_boxes.push(bx);
            }
        }

        let rec = SampleRecord {
            question_id: format!("synth-{i:05}"),
            sample_seed,
            instruction,
            answer,
            distractors,
            gt,
            distractor_boxes,
            texture_boxes,
            grid_h: cfg.grid_h,
            grid_w: cfg.grid_w,
            embed_dim: cfg.embed_dim,
            px_per_token: cfg.px_per_token,
            signal_alpha: cfg.signal_alpha,
            noise_sigma: cfg.noise_sigma,
            embed_mix: cfg.embed_mix,
            text_seed: cfg.text_seed,
        };
        samples.push(sample_from_record(rec));
    }
    Ok(samples)
}

pub fn dataset_to_jsonl(samples: &[SyntheticSample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(&s.rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn dataset_from_jsonl(text: &str) -> Result<Vec<SyntheticSample>, SynthError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(line).map_err(|e| SynthError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(sample_from_record(rec));
    }
    if out.is_empty() {
        return Err(SynthError::EmptyDataset);
    }
    Ok(out)
}

// ── oracle answering ────────────────────────────────────────────────────

/// Minimum fraction of planted tokens that must be provided.
pub const ORACLE_COVERAGE_THRESHOLD: f64 = 0.8;
/// Maximum fraction of provided tokens that may be irrelevant.
pub const ORACLE_CONFUSION_THRESHOLD: f64 = 0.5;

/// Index-based oracle: answers correctly iff at least 80% of the planted
/// region's tokens are provided and fewer than half of the provided tokens
/// are irrelevant. Wrong answers are deterministic: empty on missing
/// evidence, the first distractor descriptor when drowned in irrelevant
/// tokens.
pub fn oracle_answer(sample: &SyntheticSample, provided: &BTreeSet<usize>) -> String {
    let gt = sample.gt_token_indices();
    let covered = gt.intersection(provided).count() as f64 / gt.len() as f64;
    if covered < ORACLE_COVERAGE_THRESHOLD {
        return String::new();
    }
    let irrelevant = provided.difference(&gt).count() as f64;
    let frac = irrelevant / provided.len() as f64;
    if frac < ORACLE_CONFUSION_THRESHOLD {
        sample.rec.answer.clone()
    } else {
        sample
            .rec
            .distractors
            .first()
            .cloned()
            .unwrap_or_else(|| "unknown".to_string())
    }
}

/// Value-based readout over a (possibly re-encoded or pooled) sub-grid whose
/// top-left cell corresponds to `rect` in the sample's original geometry.
/// Correct iff the planted box is sufficiently covered by the rect and the
/// mean cosine between the covering tokens and the planted pattern clears
/// `cos_threshold`.
pub fn readout_answer(
    sample: &SyntheticSample,
    rect: &CellRect,
    tokens: &TokenGrid,
    cos_threshold: f64,
) -> String {
    let gt_rect = sample.gt_cells();
    let p_orig = sample.rec.px_per_token;
    let p_tok = tokens.px_per_token();
    let (ox, oy) = rect.origin_px(p_orig);

    let mut total = 0usize;
    let mut inside = Vec::new();
    for r in gt_rect.r0..gt_rect.r1 {
        for c in gt_rect.c0..gt_rect.c1 {
            total += 1;
            if r < rect.r0 || r >= rect.r1 || c < rect.c0 || c >= rect.c1 {
                continue;
            }
            // Original-cell center in the token grid's frame.
            let cx = (c as f64 + 0.5) * p_orig - ox;
            let cy = (r as f64 + 0.5) * p_orig - oy;
            let tc = ((cx / p_tok).floor() as usize).min(tokens.width() - 1);
            let tr = ((cy / p_tok).floor() as usize).min(tokens.height() - 1);
            inside.push((tr, tc));
        }
    }
    let covered = inside.len() as f64 / total as f64;
    if covered < ORACLE_COVERAGE_THRESHOLD {
        return String::new();
    }
    inside.sort_unstable();
    inside.dedup();
    let mean_cos: f64 = inside
        .iter()
        .map(|&(r, c)| kernels::cosine(tokens.cell(r, c), &sample.pattern))
        .sum::<f64>()
        / inside.len() as f64;
    if mean_cos >= cos_threshold {
        sample.rec.answer.clone()
    } else {
        sample
            .rec
            .distractors
            .first()
            .cloned()
            .unwrap_or_else(|| "unknown".to_string())
    }
}

// ── relevance-condition experiment ──────────────────────────────────────

pub const RELEVANCE_CONDITIONS: [(&str, f64); 4] = [
    ("gt_only", 0.0),
    ("gt_plus_one_third", 1.0 / 3.0),
    ("gt_plus_two_thirds", 2.0 / 3.0),
    ("all_tokens", 1.0),
];

/// Token set for one relevance condition: all planted tokens plus a
/// deterministic sample of `fraction` of the irrelevant tokens.
pub fn condition_tokens(sample: &SyntheticSample, fraction: f64) -> BTreeSet<usize> {
    let gt = sample.gt_token_indices();
    let mut pool: Vec<usize> = (0..sample.grid.token_count())
        .filter(|i| !gt.contains(i))
        .collect();
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(sample.rec.sample_seed, 0xF16));
    use rand::seq::SliceRandom;
    pool.shuffle(&mut rng);
    let take = (fraction * pool.len() as f64).floor() as usize;
    let mut provided = gt;
    provided.extend(pool.into_iter().take(take));
    provided
}

/// Oracle accuracy per relevance condition, from planted-only to the full
/// token set.
pub fn relevance_curve(samples: &[SyntheticSample]) -> Vec<(String, f64)> {
    RELEVANCE_CONDITIONS
        .iter()
        .map(|(label, fraction)| {
            let correct = samples
                .iter()
                .filter(|s| {
                    let provided = condition_tokens(s, *fraction);
                    oracle_answer(s, &provided) == s.rec.answer
                })
                .count();
            (label.to_string(), correct as f64 / samples.len() as f64)
        })
        .collect()
}
