//! The multi-run evaluation protocol: re-split and retrain per run, then
//! report mean and sample standard deviation of test accuracy for every
//! modality configuration, plus the last run's confusion matrix.
//!
//! Takes a few seconds unoptimized; add `--release` to make it quick.
//!
//! Run with: `cargo run --example evaluation_protocol`

use protoclip::data::{synth_generate, SynthConfig, SynthModality};
use protoclip::encoder::EncoderConfig;
use protoclip::infer::{evaluate, EvalConfig};
use protoclip::train::TrainConfig;

fn main() -> protoclip::Result<()> {
    let seed = 5u64;
    let synth = SynthConfig {
        n: 210,
        d_image: 12,
        sigma: 0.1,
        balanced: true,
        modalities: vec![SynthModality::new("biomarkers", 8, 3)],
        seed,
    };
    // No split here: the protocol draws a fresh split per run from its own
    // seed sequence, so the variance it reports includes split noise.
    let (table, _mask) = synth_generate(&synth)?;

    let summary = evaluate(
        &table,
        &EncoderConfig::image_mlp(12, vec![32], seed ^ 11),
        &EncoderConfig::label_mlp(vec![32], seed ^ 22),
        // 8 numeric columns + a 3-token band column one-hot = width 11.
        &[("biomarkers".to_string(), EncoderConfig::tabular_mlp(11, vec![32], seed ^ 33))],
        &TrainConfig { epochs: 24, batch_size: 16, lr: 1e-3, ..TrainConfig::with_seed(seed ^ 44) },
        &EvalConfig { runs: 3, ..EvalConfig::default() },
    )?;

    println!("{} runs, split seeds {:?}\n", summary.runs, summary.seeds);
    println!("configuration     all-labels          AD-vs-CN");
    for row in &summary.configurations {
        println!(
            "{:<16}  {:.4} +- {:.4}    {:.4} +- {:.4}",
            row.name,
            row.all_labels.mean,
            row.all_labels.std,
            row.ad_vs_cn.mean,
            row.ad_vs_cn.std
        );
    }

    println!("\nlast run's multimodal confusion matrix (rows = actual):");
    print!("{}", summary.confusion_last_run.to_csv());
    Ok(())
}
