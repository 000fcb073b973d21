//! Parametric FLOPs accounting for comparing token budgets. This is a cost
//! model over token counts, not a hardware measurement: prefill costs
//! 2·P_llm per token, each encoder pass 2·P_vit per processed token, and the
//! alignment module is charged for its counted matmuls over all regions.

use serde::{Deserialize, Serialize};

/// Model-size constants. Defaults: a 7e9-parameter language model, a
/// 3e8-parameter vision encoder, 2 FLOPs per parameter per token.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub p_llm: f64,
    pub p_vit: f64,
    pub flops_per_param_token: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            p_llm: 7e9,
            p_vit: 3e8,
            flops_per_param_token: 2.0,
        }
    }
}

/// Shapes of the region-instruction alignment pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentDims {
    pub num_regions: usize,
    pub region_tokens: usize,
    pub text_tokens: usize,
    pub num_queries: usize,
    pub embed_dim: usize,
}

/// Counted matmuls of the alignment pass: per region, two d×d MLP layers on
/// n tokens (4·n·d²) plus attention (2·K·n·d twice) plus the per-row cosine
/// (≈6·K·d); the text branch is charged once.
pub fn alignment_flops(dims: &AlignmentDims) -> f64 {
    let n = dims.region_tokens as f64;
    let m = dims.text_tokens as f64;
    let k = dims.num_queries as f64;
    let d = dims.embed_dim as f64;
    let per_region = 4.0 * n * d * d + 4.0 * k * n * d + 6.0 * k * d;
    let text = 4.0 * m * d * d + 4.0 * k * m * d;
    dims.num_regions as f64 * per_region + text
}

/// Token counts of one end-to-end run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioCounts {
    /// Visual tokens fed to the language model at prefill.
    pub prefill_visual_tokens: usize,
    pub text_tokens: usize,
    /// Tokens processed by the base encoding pass(es).
    pub base_encoder_tokens: Vec<usize>,
    /// Tokens processed by refinement re-encoding pass(es); charged to the
    /// selection-and-refinement module.
    pub refine_encoder_tokens: Vec<usize>,
    pub alignment: Option<AlignmentDims>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub cost_model: CostModel,
    pub prefill_flops: f64,
    pub encoder_flops: f64,
    pub alignment_flops: f64,
    /// Alignment plus refinement re-encoding.
    pub module_flops: f64,
    pub total_flops: f64,
    pub total_tflops: f64,
    /// module_flops / total_flops.
    pub module_share: f64,
    /// This run's total over the vanilla run's total, when compared.
    pub ratio_vs_vanilla: Option<f64>,
}

impl FlopsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "# cost model: p_llm={:.3e} p_vit={:.3e} flops_per_param_token={}\n",
            self.cost_model.p_llm, self.cost_model.p_vit, self.cost_model.flops_per_param_token
        ));
        s.push_str("prefill_flops,encoder_flops,alignment_flops,module_flops,total_flops,total_tflops,module_share,ratio_vs_vanilla\n");
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            self.prefill_flops,
            self.encoder_flops,
            self.alignment_flops,
            self.module_flops,
            self.total_flops,
            self.total_tflops,
            self.module_share,
            self.ratio_vs_vanilla.map_or(String::new(), |r| r.to_string()),
        ));
        s
    }
}

pub fn flops_estimate(counts: &ScenarioCounts, cost: &CostModel) -> FlopsReport {
    let f = cost.flops_per_param_token;
    let prefill =
        f * cost.p_llm * (counts.prefill_visual_tokens + counts.text_tokens) as f64;
    let base_encoder: f64 = counts
        .base_encoder_tokens
        .iter()
        .map(|&n| f * cost.p_vit * n as f64)
        .sum();
    let refine_encoder: f64 = counts
        .refine_encoder_tokens
        .iter()
        .map(|&n| f * cost.p_vit * n as f64)
        .sum();
    let align = counts.alignment.as_ref().map_or(0.0, alignment_flops);
    let total = prefill + base_encoder + refine_encoder + align;
    FlopsReport {
        cost_model: *cost,
        prefill_flops: prefill,
        encoder_flops: base_encoder + refine_encoder,
        alignment_flops: align,
        module_flops: align + refine_encoder,
        total_flops: total,
        total_tflops: total / 1e12,
        module_share: if total > 0.0 {
            (align + refine_encoder) / total
        } else {
            0.0
        },
        ratio_vs_vanilla: None,
    }
}

/// Full-image baseline: one encoding pass, every visual token prefilled.
pub fn vanilla_scenario(visual_tokens: usize, text_tokens: usize) -> ScenarioCounts {
    ScenarioCounts {
        prefill_visual_tokens: visual_tokens,
        text_tokens,
        base_encoder_tokens: vec![visual_tokens],
        refine_encoder_tokens: vec![],
        alignment: None,
    }
}

/// Select-and-refine run: base pass on the full image, alignment over all
/// regions, a refinement pass on the cropped budget, and prefill on the
/// refined tokens only.
pub fn selection_scenario(
    full_visual_tokens: usize,
    refined_tokens: usize,
    text_tokens: usize,
    alignment: AlignmentDims,
) -> ScenarioCounts {
    ScenarioCounts {
        prefill_visual_tokens: refined_tokens,
        text_tokens,
        base_encoder_tokens: vec![full_visual_tokens],
        refine_encoder_tokens: vec![refined_tokens],
        alignment: Some(alignment),
    }
}

/// Attach the ratio against a vanilla report.
pub fn compare(mut ours: FlopsReport, vanilla: &FlopsReport) -> FlopsReport {
    ours.ratio_vs_vanilla = Some(ours.total_flops / vanilla.total_flops);
    ours
}
