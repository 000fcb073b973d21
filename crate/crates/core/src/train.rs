//! Contrastive training of the alignment model. Only the guidance queries
//! and the two projection MLPs receive gradient updates; grids and
//! instruction embeddings pass through untouched. Runs are bitwise
//! deterministic for a fixed seed: sample order, batching, and gradient
//! accumulation are all fixed.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{AlignError, AlignmentConfig, AlignmentModel, SimilarityMode};
use crate::boxes::GtAnnotation;
use crate::grid::{assign_pos_neg, extract_region, slide_windows, GridError, RegionWindow, TokenGrid};
use crate::losses::{total_loss, BatchEncodings, LossError};
use crate::select::CoverageMode;
use crate::synth::SyntheticSample;
use crate::text::InstructionEmbedding;
use tokenlens_autograd::nn::seeded_rng;
use tokenlens_autograd::optim::{AdamConfig, OptimError, OptimState};
use tokenlens_autograd::{Tape, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Tensor(#[from] tokenlens_autograd::TensorError),
    #[error("non-finite loss at step {step} (epoch {epoch}, batch {batch}, first question {question_id})")]
    NonFiniteLoss {
        step: usize,
        epoch: usize,
        batch: usize,
        question_id: String,
    },
    #[error("empty dataset")]
    EmptyDataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub window_w: usize,
    pub window_h: usize,
    pub stride: usize,
    pub ratio: f64,
    pub num_queries: usize,
    pub embed_dim: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub tau: f64,
    pub seed: u64,
    pub include_positive_in_denominator: bool,
    pub similarity: SimilarityMode,
    pub coverage_mode: CoverageMode,
    pub refine_budget_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            window_w: 10,
            window_h: 10,
            stride: 7,
            ratio: 0.6,
            num_queries: 100,
            embed_dim: 32,
            lr: 2e-5,
            epochs: 5,
            batch_size: 32,
            lambda: 0.5,
            tau: 0.07,
            seed: 0,
            include_positive_in_denominator: true,
            similarity: SimilarityMode::MeanRowCosine,
            coverage_mode: CoverageMode::Hull,
            refine_budget_fraction: 0.6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.tau <= 0.0 {
            return Err(TrainError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.lambda < 0.0 {
            return Err(TrainError::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(TrainError::Config(format!(
                "ratio must be in (0, 1], got {}",
                self.ratio
            )));
        }
        if self.window_w == 0 || self.window_h == 0 || self.stride == 0 {
            return Err(TrainError::Config("window and stride must be >= 1".into()));
        }
        if self.num_queries == 0 || self.embed_dim == 0 {
            return Err(TrainError::Config("num_queries and embed_dim must be >= 1".into()));
        }
        if !(self.refine_budget_fraction > 0.0 && self.refine_budget_fraction <= 1.0) {
            return Err(TrainError::Config(format!(
                "refine_budget_fraction must be in (0, 1], got {}",
                self.refine_budget_fraction
            )));
        }
        Ok(())
    }

    pub fn alignment_config(&self) -> AlignmentConfig {
        AlignmentConfig {
            embed_dim: self.embed_dim,
            num_queries: self.num_queries,
            d_k: self.embed_dim as f64,
            similarity: self.similarity,
        }
    }

    /// Flat `key = value` document with exactly this struct's fields.
    pub fn to_kv_string(&self) -> String {
        let sim = match self.similarity {
            SimilarityMode::MeanRowCosine => "mean_row_cosine",
            SimilarityMode::FlattenedCosine => "flattened_cosine",
        };
        let cov = match self.coverage_mode {
            CoverageMode::Hull => "hull",
            CoverageMode::UnionArea => "union_area",
        };
        format!(
            "window_w = {}\nwindow_h = {}\nstride = {}\nratio = {}\nnum_queries = {}\n\
             embed_dim = {}\nlr = {}\nepochs = {}\nbatch_size = {}\nlambda = {}\ntau = {}\n\
             seed = {}\ninclude_positive_in_denominator = {}\nsimilarity = {}\n\
             coverage_mode = {}\nrefine_budget_fraction = {}\n",
            self.window_w,
            self.window_h,
            self.stride,
            self.ratio,
            self.num_queries,
            self.embed_dim,
            self.lr,
            self.epochs,
            self.batch_size,
            self.lambda,
            self.tau,
            self.seed,
            self.include_positive_in_denominator,
            sim,
            cov,
            self.refine_budget_fraction,
        )
    }

    /// Parse a flat key-value document ('#' comments allowed). Unknown keys
    /// are rejected; missing keys keep their defaults.
    pub fn from_kv_string(text: &str) -> Result<Self, TrainError> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TrainError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| TrainError::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse::<T>()
                .map_err(|e| format!("bad value {value:?} for {key}: {e}"))
        }
        match key {
            "window_w" => self.window_w = parse(key, value)?,
            "window_h" => self.window_h = parse(key, value)?,
            "stride" => self.stride = parse(key, value)?,
            "ratio" => self.ratio = parse(key, value)?,
            "num_queries" => self.num_queries = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "include_positive_in_denominator" => {
                self.include_positive_in_denominator = parse(key, value)?
            }
            "similarity" => {
                self.similarity = match value {
                    "mean_row_cosine" => SimilarityMode::MeanRowCosine,
                    "flattened_cosine" => SimilarityMode::FlattenedCosine,
                    other => return Err(format!("unknown similarity mode {other:?}")),
                }
            }
            "coverage_mode" => {
                self.coverage_mode = match value {
                    "hull" => CoverageMode::Hull,
                    "union_area" => CoverageMode::UnionArea,
                    other => return Err(format!("unknown coverage mode {other:?}")),
                }
            }
            "refine_budget_fraction" => self.refine_budget_fraction = parse(key, value)?,
            other => return Err(format!("unknown config key {other:?}")),
        }
        Ok(())
    }
}

/// One training sample with regions pre-extracted (the grid is frozen, so
/// extraction happens once).
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub question_id: String,
    pub instr_tokens: Tensor,
    pub pos_region: Tensor,
    pub neg_regions: Vec<Tensor>,
    pub pos_index: usize,
    pub neg_indices: Vec<usize>,
}

pub fn prepare_sample(
    grid: &TokenGrid,
    instr: &InstructionEmbedding,
    gt: &GtAnnotation,
    cfg: &TrainConfig,
) -> Result<(TrainSample, Vec<RegionWindow>), TrainError> {
    let windows = slide_windows(grid, cfg.window_w, cfg.window_h, cfg.stride)?;
    let (pos_index, neg_indices) = assign_pos_neg(&windows, gt, grid.px_per_token())?;
    let pos_region = extract_region(grid, &windows[pos_index])?;
    let neg_regions = neg_indices
        .iter()
        .map(|&i| extract_region(grid, &windows[i]))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((
        TrainSample {
            question_id: gt.question_id.clone(),
            instr_tokens: instr.tokens.clone(),
            pos_region,
            neg_regions,
            pos_index,
            neg_indices,
        },
        windows,
    ))
}

pub fn prepare_synthetic(
    samples: &[SyntheticSample],
    cfg: &TrainConfig,
) -> Result<Vec<TrainSample>, TrainError> {
    samples
        .iter()
        .map(|s| Ok(prepare_sample(&s.grid, &s.embedding, s.gt(), cfg)?.0))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_inter: f64,
    pub l_intra: f64,
    pub l_total: f64,
}

/// Run `epochs` of shuffled mini-batch Adam on the model's parameters,
/// stopping early after `max_steps` optimizer steps if given. Returns the
/// per-step loss history.
pub fn train(
    model: &mut AlignmentModel,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    max_steps: Option<usize>,
) -> Result<Vec<StepRecord>, TrainError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut optim = OptimState::new(
        AdamConfig::with_lr(cfg.lr),
        &model.param_sizes(),
    );
    let mut rng = seeded_rng(cfg.seed);
    let mut history = Vec::new();
    let mut step = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let mut enc = BatchEncodings {
                ev_pos: Vec::with_capacity(batch.len()),
                et: Vec::with_capacity(batch.len()),
                ev_negs: Vec::with_capacity(batch.len()),
            };
            for &i in batch {
                let s = &samples[i];
                let pos = tape.leaf(s.pos_region.clone());
                let text = tape.leaf(s.instr_tokens.clone());
                enc.ev_pos.push(bound.encode_region(&mut tape, pos)?);
                enc.et.push(bound.encode_text(&mut tape, text)?);
                let mut negs = Vec::with_capacity(s.neg_regions.len());
                for region in &s.neg_regions {
                    let leaf = tape.leaf(region.clone());
                    negs.push(bound.encode_region(&mut tape, leaf)?);
                }
                enc.ev_negs.push(negs);
            }
            let losses = total_loss(
                &mut tape,
                &enc,
                cfg.tau,
                cfg.lambda,
                cfg.include_positive_in_denominator,
                cfg.similarity,
            )?;
            let total = tape.value(losses.total).item();
            if !total.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step,
                    epoch,
                    batch: batch_idx,
                    question_id: samples[batch[0]].question_id.clone(),
                });
            }
            let record = StepRecord {
                step,
                epoch,
                l_inter: tape.value(losses.inter).item(),
                l_intra: tape.value(losses.intra_mean).item(),
                l_total: total,
            };
            tape.backward(losses.total)?;
            let grads: Vec<Option<Tensor>> = [
                bound.queries,
                bound.mlp_v.w1,
                bound.mlp_v.b1,
                bound.mlp_v.w2,
                bound.mlp_v.b2,
                bound.mlp_t.w1,
                bound.mlp_t.b1,
                bound.mlp_t.w2,
                bound.mlp_t.b2,
            ]
            .iter()
            .map(|&v| tape.grad(v))
            .collect();
            drop(tape);
            let mut params = model.params_mut();
            optim.step(&mut params, &grads)?;
            history.push(record);
            step += 1;
            if max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
        }
    }
    Ok(history)
}

/// Build a fresh model from the config and train it.
pub fn train_new(
    samples: &[TrainSample],
    cfg: &TrainConfig,
    max_steps: Option<usize>,
) -> Result<(AlignmentModel, Vec<StepRecord>), TrainError> {
    let mut model = AlignmentModel::new(cfg.alignment_config(), cfg.seed);
    let history = train(&mut model, samples, cfg, max_steps)?;
    Ok((model, history))
}

/// Loss history CSV with optional '#' header comments.
pub fn history_to_csv(records: &[StepRecord], header: &[String]) -> String {
    let mut out = String::new();
    for line in header {
        out.push_str(&format!("# {line}\n"));
    }
    out.push_str("step,epoch,l_inter,l_intra,l_total\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.epoch, r.l_inter, r.l_intra, r.l_total
        ));
    }
    out
}

pub fn history_from_csv(text: &str) -> Result<Vec<StepRecord>, TrainError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("step,") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(TrainError::Config(format!(
                "history line {}: expected 5 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let parse_f = |s: &str| -> Result<f64, TrainError> {
            s.parse()
                .map_err(|e| TrainError::Config(format!("history line {}: {e}", lineno + 1)))
        };
        out.push(StepRecord {
            step: fields[0]
                .parse()
                .map_err(|e| TrainError::Config(format!("history line {}: {e}", lineno + 1)))?,
            epoch: fields[1]
                .parse()
                .map_err(|e| TrainError::Config(format!("history line {}: {e}", lineno + 1)))?,
            l_inter: parse_f(fields[2])?,
            l_intra: parse_f(fields[3])?,
            l_total: parse_f(fields[4])?,
        });
    }
    Ok(out)
}
