//! Streams frozen (cluster, label) assignments through the d-value and
//! r-value updates with a decaying step size and compares the slots with the
//! empirical counting targets.
//!
//! cargo run --release --example value_slot_convergence -- [samples]

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use somnet::eval::count_targets;
use somnet::memory::{MemoryConfig, MemoryState};

fn main() -> somnet::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let (classes, slots) = (3, 4);
    // joint probability of (label, cluster), row-major by label
    let joint = [
        0.20, 0.05, 0.05, 0.00, //
        0.02, 0.25, 0.03, 0.05, //
        0.05, 0.00, 0.10, 0.20,
    ];
    let dist = WeightedIndex::new(joint).expect("valid weights");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let draws: Vec<(usize, usize)> = (0..n)
        .map(|_| {
            let i = dist.sample(&mut rng);
            (i % slots, i / slots)
        })
        .collect();

    let cfg = MemoryConfig { grid_w: 2, radius: 0, ..Default::default() };
    let mut m = MemoryState::new(2, classes, cfg, 0)?;
    let mut col_hits = vec![0usize; slots];
    let mut row_hits = vec![0usize; classes];
    for &(z, y) in &draws {
        col_hits[z] += 1;
        row_hits[y] += 1;
        m.config.lr_value = value_lr(col_hits[z], l2(&m.d_column(z)));
        m.d_value_step(y, z)?;
        m.config.lr_value = value_lr(row_hits[y], l2(m.r_row(y)));
        m.r_value_step(z, y)?;
    }

    let (assign, labels): (Vec<usize>, Vec<usize>) = draws.iter().copied().unzip();
    let (d_target, r_target) = count_targets(&assign, &labels, classes, slots);
    let d_err = m.d_values.iter().zip(&d_target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let r_err = m.r_values.iter().zip(&r_target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("samples {n}");
    for y in 0..classes {
        let learned: Vec<String> = (0..slots).map(|l| format!("{:.3}", m.d(y, l))).collect();
        let target: Vec<String> = (0..slots).map(|l| format!("{:.3}", d_target[y * slots + l])).collect();
        println!("D row {y}: learned [{}] target [{}]", learned.join(" "), target.join(" "));
    }
    for y in 0..classes {
        let learned: Vec<String> = m.r_row(y).iter().map(|v| format!("{v:.3}")).collect();
        let target: Vec<String> = r_target[y * slots..(y + 1) * slots].iter().map(|v| format!("{v:.3}")).collect();
        println!("R row {y}: learned [{}] target [{}]", learned.join(" "), target.join(" "));
    }
    println!("max |D - D~| = {d_err:.4}, max |R - R~| = {r_err:.4}");
    Ok(())
}

/// Step size for the `hits`-th update of a slot vector with L2 norm `norm`.
/// The cosine step contracts at rate `lr / norm`, so this makes each update
/// a running mean of the one-hot targets to first order.
fn value_lr(hits: usize, norm: f64) -> f64 {
    norm / (1.0 + hits as f64)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
