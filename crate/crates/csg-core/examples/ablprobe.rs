// scratch: ablation ordering probe
use csg_core::fusion::FusionMode;
use csg_core::model::ModelConfig;
use csg_core::train::{run_ablation, summarize, SynthSpec, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(800);
    let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let noise: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.33);
    let segmin: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(15);
    let segmax: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(30);

    let dim: usize = std::env::var("ABL_DIM").ok().and_then(|v| v.parse().ok()).unwrap_or(64);
    let batch: usize = std::env::var("ABL_BATCH").ok().and_then(|v| v.parse().ok()).unwrap_or(16);
    let model_cfg = ModelConfig {
        dim,
        heads: 4,
        max_frames: 160,
        ..ModelConfig::default()
    };
    let hn: f64 = std::env::var("ABL_HN").ok().and_then(|v| v.parse().ok()).unwrap_or(0.4);
    let synth = SynthSpec {
        n_train: 256,
        n_eval: 16,
        frames_per_example: 128,
        segment_min: segmin,
        segment_max: segmax,
        noise_rate: noise,
        history_noise_rate: hn,
        ..SynthSpec::default()
    };
    let train_cfg = TrainConfig {
        steps,
        batch_size: batch,
        lr_target: 2e-3,
        warmup_steps: 200,
        eval_every: 0,
        eval_examples: 16,
        ..TrainConfig::default()
    };
    let modes = [
        FusionMode::Dws,
        FusionMode::Concat,
        FusionMode::Xattn,
        FusionMode::None,
    ];
    let seed_list: Vec<u64> = (0..seeds).collect();
    let t0 = Instant::now();
    let outcome =
        run_ablation::<f32>(&model_cfg, &train_cfg, &synth, &modes, &seed_list, 2).unwrap();
    println!("total {:.1} min", t0.elapsed().as_secs_f64() / 60.0);
    for row in &outcome.rows {
        println!("{} seed {}: sim {:.4} loss {:.4}", row.mode, row.seed, row.sim, row.final_loss);
    }
    for s in summarize(&outcome.rows) {
        println!("{}: mean {:.4} +/- {:.4}", s.mode, s.mean_sim, s.std_sim);
    }
}
