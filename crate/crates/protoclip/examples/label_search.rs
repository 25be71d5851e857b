//! Compare the logarithmic ternary label search against the exhaustive scan
//! on unimodal similarity profiles: identical answers at a fraction of the
//! similarity evaluations.
//!
//! Run with: `cargo run --example label_search`

use protoclip::infer::{brute_force_label, label_grid, ternary_search_label};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> protoclip::Result<()> {
    let grid = label_grid(101);

    // A quadratic with its peak at y = 0.62: strictly unimodal on the grid.
    let quadratic = |y: f64| Ok(1.0 - (y - 0.62) * (y - 0.62));
    let brute = brute_force_label(quadratic, &grid)?;
    let ternary = ternary_search_label(quadratic, &grid)?;
    println!(
        "quadratic peak:  exhaustive y={:.2} in {:>3} evals; ternary y={:.2} in {:>2} evals",
        brute.y, brute.evals, ternary.y, ternary.evals
    );

    // Random strictly unimodal profiles: agreement is exact, and the eval
    // count stays within the 2*ceil(log_1.5 101) + 2 = 26 budget.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let trials = 10_000;
    let mut max_evals = 0usize;
    let mut total_evals = 0usize;
    for _ in 0..trials {
        let peak = rng.gen_range(0..grid.len());
        let mut profile = vec![0.0f64; grid.len()];
        for i in (0..peak).rev() {
            profile[i] = profile[i + 1] - rng.gen_range(1e-6..1.0);
        }
        for i in peak + 1..grid.len() {
            profile[i] = profile[i - 1] - rng.gen_range(1e-6..1.0);
        }
        let sim = |y: f64| Ok(profile[(y * 100.0).round() as usize]);
        let brute = brute_force_label(sim, &grid)?;
        let ternary = ternary_search_label(sim, &grid)?;
        assert_eq!(brute.y.to_bits(), ternary.y.to_bits(), "searches disagreed");
        max_evals = max_evals.max(ternary.evals);
        total_evals += ternary.evals;
    }
    println!(
        "{trials} random unimodal profiles: exact agreement, ternary evals mean {:.1} / max {} (vs 101 exhaustive)",
        total_evals as f64 / trials as f64,
        max_evals
    );

    // On a multimodal profile the ternary search may land on a side peak;
    // that is the price of the logarithmic budget, and why the engine's
    // default prediction path is the exhaustive scan.
    let bumpy = |y: f64| Ok((9.0 * y).sin() + 0.4 * (23.0 * y).cos());
    let brute = brute_force_label(bumpy, &grid)?;
    let ternary = ternary_search_label(bumpy, &grid)?;
    println!(
        "bumpy profile:   exhaustive y={:.2} (sim {:.4}); ternary y={:.2} (sim {:.4})",
        brute.y, brute.similarity, ternary.y, ternary.similarity
    );
    Ok(())
}
