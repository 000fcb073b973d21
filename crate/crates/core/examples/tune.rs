// Scratch harness for calibrating training hyperparameters and the readout
// threshold on the synthetic task. Not part of the deliverable surface.

use std::time::Instant;
use tokenlens_core::eval::{top1_accuracy, top1_center_accuracy};
use tokenlens_core::synth::{gen_synthetic, SynthConfig};
use tokenlens_core::train::{prepare_synthetic, train_new, TrainConfig};

fn main() {
    for seed in 0u64..8 {
        let synth_cfg = SynthConfig {
            signal_alpha: 2.0,
            noise_sigma: 0.4,
            embed_mix: 0.0,
            n_distractors: 3,
            n_texture_patches: 12,
            box_min: 5,
            box_max: 10,
            vocab: 6,
            ..SynthConfig::default()
        };
        let train_set = gen_synthetic(500, &synth_cfg, 1000 + seed).unwrap();
        let held_out = gen_synthetic(200, &synth_cfg, 2000 + seed).unwrap();
        let cfg = TrainConfig {
            num_queries: 8,
            embed_dim: 32,
            epochs: 1000,
            lr: 3e-3,
            tau: 0.5,
            lambda: 1.0,
            seed,
            ..TrainConfig::default()
        };
        let samples = prepare_synthetic(&train_set, &cfg).unwrap();
        let t = Instant::now();
        let (model, _) = train_new(&samples, &cfg, Some(400)).unwrap();
        let init_model = tokenlens_core::align::AlignmentModel::new(cfg.alignment_config(), cfg.seed);
        let center = top1_center_accuracy(&model, &held_out, &cfg).unwrap();
        let strict = top1_accuracy(&model, &held_out, &cfg).unwrap();
        let init_center = top1_center_accuracy(&init_model, &held_out, &cfg).unwrap();
        println!(
            "seed={seed}: init={init_center:.3} center={center:.3} strict={strict:.3} ({:?})",
            t.elapsed()
        );
    }
}
