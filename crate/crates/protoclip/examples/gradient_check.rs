//! Verify tape gradients against central finite differences: a few single
//! operations, then the full contrastive loss differentiated through an
//! encoder pair.
//!
//! Run with: `cargo run --example gradient_check`

use protoclip::contrastive::{clip_loss_on_tape, LossConfig};
use protoclip::encoder::{init_params, EncoderConfig};
use protoclip::tensor::{grad_check, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> protoclip::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut rand_mat = |rows: usize, cols: usize| {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    };

    // Single operations: the checker perturbs every parameter entry twice
    // and compares the quotient against the tape's reverse pass.
    let a = rand_mat(3, 4);
    let b = rand_mat(4, 2);
    let err = grad_check(
        |tape, ids| {
            let y = tape.matmul(ids[0], ids[1])?;
            tape.mean_all(y)
        },
        &[a, b],
        1e-5,
    )?;
    println!("matmul + mean_all   max rel err {err:.3e}");

    let x = rand_mat(4, 6);
    let err = grad_check(
        |tape, ids| {
            let s = tape.sigmoid(ids[0])?;
            let l = tape.logsumexp_rows(s)?;
            tape.mean_all(l)
        },
        &[x],
        1e-5,
    )?;
    println!("sigmoid + logsumexp max rel err {err:.3e}");

    // The full phase-1 objective: image and label encoders feeding the
    // symmetric contrastive loss, differentiated through every weight,
    // bias, and the loss itself in one reverse pass.
    let image_cfg = EncoderConfig::image_mlp(6, vec![16], 41).with_projection_dim(8);
    let label_cfg = EncoderConfig::label_mlp(vec![16], 42).with_projection_dim(8);
    let image = init_params(&image_cfg)?;
    let label = init_params(&label_cfg)?;
    let n_image = image.params().len();
    let mut params: Vec<Matrix> = image.params().into_iter().cloned().collect();
    params.extend(label.params().into_iter().cloned());
    println!(
        "encoder pair: {} parameter matrices, {} scalars",
        params.len(),
        params.iter().map(Matrix::len).sum::<usize>()
    );

    let x_img = rand_mat(5, 6);
    let y_lab = Matrix::from_fn(5, 1, |i, _| i as f64 / 4.0);
    let loss_cfg = LossConfig::default();
    let err = grad_check(
        |tape, ids| {
            let xi = tape.input(x_img.clone())?;
            let q = image.forward(tape, &ids[..n_image], xi)?;
            let yi = tape.input(y_lab.clone())?;
            let k = label.forward(tape, &ids[n_image..], yi)?;
            clip_loss_on_tape(tape, q, k, &loss_cfg)
        },
        &params,
        1e-6,
    )?;
    println!("full contrastive objective max rel err {err:.3e}");
    Ok(())
}
