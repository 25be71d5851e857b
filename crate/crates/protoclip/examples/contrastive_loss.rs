//! The symmetric contrastive loss on hand-checkable batches: the single-pair
//! case, an orthonormal batch with a closed-form value, the effect of the
//! temperature, and the gap between aligned and shuffled batches.
//!
//! Run with: `cargo run --example contrastive_loss`

use protoclip::contrastive::{clip_loss_value, LossConfig, LossDirection};
use protoclip::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
        .l2_normalize_rows()
        .expect("unit rows")
}

fn main() -> protoclip::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    // One pair has no negatives to push against: the loss is exactly zero.
    let q = unit_rows(&mut rng, 1, 8);
    let k = unit_rows(&mut rng, 1, 8);
    println!("single pair: {}", clip_loss_value(&q, &k, &LossConfig::default())?);

    // Orthonormal 2x2 at temperature 1: each row's similarity vector is a
    // one-hot, so the loss is ln(1 + e^-1) per direction.
    let eye = Matrix::from_fn(2, 2, |i, j| if i == j { 1.0 } else { 0.0 });
    let cfg = LossConfig { temperature: 1.0, direction: LossDirection::Symmetric };
    println!(
        "orthonormal 2x2 at t=1: {:.16} (closed form {:.16})",
        clip_loss_value(&eye, &eye, &cfg)?,
        (1.0 + (-1.0f64).exp()).ln()
    );

    // Sharper temperatures reward the diagonal more on an aligned batch.
    let aligned = unit_rows(&mut rng, 16, 32);
    println!("\naligned batch of 16, loss by temperature:");
    for temperature in [1.0, 0.5, 0.1, 0.05] {
        let cfg = LossConfig { temperature, direction: LossDirection::Symmetric };
        println!("  t = {temperature:<5} loss = {:.6}", clip_loss_value(&aligned, &aligned, &cfg)?);
    }

    // A matched batch scores far below a mismatched (rotated) one.
    let k = unit_rows(&mut rng, 16, 32);
    let rotated = {
        let mut data = Vec::new();
        for i in 0..16 {
            data.extend_from_slice(k.row((i + 1) % 16));
        }
        Matrix::new(16, 32, data)
    };
    let cfg = LossConfig::default();
    println!(
        "\nmatched keys   {:.6}\nrotated keys   {:.6}\nrandom queries {:.6} (~ln 16 = {:.6})",
        clip_loss_value(&k, &k, &cfg)?,
        clip_loss_value(&k, &rotated, &cfg)?,
        clip_loss_value(&unit_rows(&mut rng, 16, 32), &k, &cfg)?,
        (16.0f64).ln()
    );
    Ok(())
}
