//! End-to-end walkthrough: synthesize a dataset, train the two-phase
//! contrastive model, compare test accuracy across modality subsets, and
//! round-trip the checkpoint.
//!
//! Takes roughly twenty seconds unoptimized; add `--release` to make it quick.
//!
//! Run with: `cargo run --example train_and_predict`

use protoclip::checkpoint::Checkpoint;
use protoclip::data::{
    make_splits, snap_to_class, synth_generate, Split, SplitFractions, SynthConfig, SynthModality,
};
use protoclip::encoder::EncoderConfig;
use protoclip::infer::{
    label_grid, predict, predictions_to_csv, LabelTable, SearchStrategy, IMAGE_MODALITY,
};
use protoclip::train::{train_full, TrainConfig};

fn main() -> protoclip::Result<()> {
    let seed = 1u64;
    let synth = SynthConfig {
        n: 441,
        d_image: 16,
        sigma: 0.1,
        balanced: true,
        modalities: vec![
            SynthModality::new("biomarkers", 12, 3),
            SynthModality::new("cognitive", 12, 3),
        ],
        seed,
    };
    let (mut table, _mask) = synth_generate(&synth)?;
    make_splits(&mut table, seed ^ 0xA5, SplitFractions::default(), true)?;

    // Every seed derives from one master seed, so the run is reproducible.
    let image_cfg = EncoderConfig::image_mlp(16, vec![64], seed ^ 11);
    let label_cfg = EncoderConfig::label_mlp(vec![64], seed ^ 22);
    let tab_cfgs = vec![
        // 12 numeric columns + a 3-token band column one-hot = width 15.
        ("biomarkers".to_string(), EncoderConfig::tabular_mlp(15, vec![64], seed ^ 33)),
        ("cognitive".to_string(), EncoderConfig::tabular_mlp(15, vec![64], seed ^ 34)),
    ];
    let train_cfg = TrainConfig {
        epochs: 64,
        batch_size: 32,
        lr: 1e-4,
        ..TrainConfig::with_seed(seed ^ 44)
    };

    println!("training (phase 1: image <-> label; phase 2: tabular -> frozen image)...");
    let model = train_full(&table, &image_cfg, &label_cfg, &tab_cfgs, &train_cfg)?;
    println!("phase-1 best validation loss {:.6} at epoch {}", model.best_val, model.best_epoch);
    for (name, val) in &model.modality_val {
        println!("phase-2 {name:<12} best validation loss {val:.6}");
    }

    let ckpt = Checkpoint::from_model(&model);
    let labels = LabelTable::new(&ckpt.label, label_grid(101))?;
    let test = table.split_indices(Split::Test);

    // Accuracy from any subset of modalities: predictions maximize the
    // fused cosine similarity over the label grid.
    let mut configs: Vec<(&str, Vec<String>)> =
        vec![("image only", vec![IMAGE_MODALITY.to_string()])];
    configs.push(("biomarkers only", vec!["biomarkers".to_string()]));
    configs.push(("cognitive only", vec!["cognitive".to_string()]));
    configs.push((
        "multimodal",
        vec![IMAGE_MODALITY.to_string(), "biomarkers".to_string(), "cognitive".to_string()],
    ));
    for (name, parts) in &configs {
        let mut hits = 0usize;
        for &i in &test {
            let p = predict(&ckpt, &table.samples[i], parts, SearchStrategy::Exhaustive, &labels)?;
            if p.class_hat == snap_to_class(table.samples[i].label) {
                hits += 1;
            }
        }
        println!("{name:<16} test accuracy {:.4}", hits as f64 / test.len() as f64);
    }

    // A few individual predictions in the CSV export format.
    let rows: Vec<_> = test
        .iter()
        .take(3)
        .map(|&i| {
            predict(
                &ckpt,
                &table.samples[i],
                &configs.last().unwrap().1,
                SearchStrategy::Exhaustive,
                &labels,
            )
        })
        .collect::<protoclip::Result<_>>()?;
    print!("\n{}", predictions_to_csv(&rows));

    // Checkpoints round-trip byte-identically.
    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("model.pclp");
    ckpt.save(&path)?;
    let loaded = Checkpoint::load(&path)?;
    println!(
        "\ncheckpoint: {} bytes on disk, round trip byte-identical: {}",
        std::fs::metadata(&path).expect("metadata").len(),
        loaded.to_bytes()? == ckpt.to_bytes()?
    );
    Ok(())
}
