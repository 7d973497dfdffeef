//! Trains on the standard synthetic benchmark and prints the curriculum
//! trace with per-stage test accuracy and noise AUC.
//!
//! cargo run --release --example train_synthetic -- [seed]

use somnet::data::{synth_generate, SynthConfig};
use somnet::trainer::{train, TrainConfig};

fn main() -> somnet::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let data = synth_generate(&SynthConfig { seed, ..Default::default() })?;
    println!(
        "{} classes, {} bags of {} ROIs, {} test images",
        data.num_classes,
        data.bags.len(),
        data.bags[0].n_b(),
        data.test_images.len()
    );
    let (_, report) = train(&data, &TrainConfig { seed, ..Default::default() })?;

    let fmt = |x: Option<f64>| x.map_or("-".into(), |v| format!("{v:.3}"));
    for (i, m) in report.history.warmup_cls.iter().enumerate() {
        println!("warm-up cls {i}: loss {}", fmt(m.cls_loss));
    }
    for (i, m) in report.history.warmup_mem.iter().enumerate() {
        println!("warm-up mem {i}: loss {}", fmt(m.memory_loss.map(|l| l.total())));
    }
    println!("{:>5} {:>8} {:>8} {:>8} {:>8}", "p", "loss", "top1", "auc", "clean");
    for s in &report.history.stages {
        let loss = s.epochs.last().and_then(|e| e.cls_loss);
        println!(
            "{:>5.2} {:>8} {:>8} {:>8} {:>8}",
            s.p,
            fmt(loss),
            fmt(s.test_top1),
            fmt(s.noise_auc),
            fmt(s.clean_weight_mass)
        );
    }
    println!(
        "run {}: top1 {}, noise AUC {}, dead keys {}",
        report.run_id,
        fmt(report.test_top1),
        fmt(report.noise_auc),
        fmt(report.dead_key_fraction)
    );
    Ok(())
}
