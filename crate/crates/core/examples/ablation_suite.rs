//! Runs every ablation variant on the standard synthetic benchmark over
//! several seeds and prints per-variant means.
//!
//! cargo run --release --example ablation_suite -- [seeds]

use std::time::Instant;

use somnet::data::{synth_generate, SynthConfig};
use somnet::eval::{run_suite, SuiteTable, Variant, KMEANS_PROTOCOL};
use somnet::trainer::TrainConfig;

fn main() -> somnet::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let start = Instant::now();
    let mut rows = Vec::new();
    for seed in 0..seeds {
        let data = synth_generate(&SynthConfig { seed, ..Default::default() })?;
        let table = run_suite(&data, &TrainConfig { seed, ..Default::default() })?;
        rows.extend(table.rows);
    }
    let table = SuiteTable { rows, kmeans_protocol: KMEANS_PROTOCOL.into() };
    print!("{}", table.to_csv());
    println!();
    println!("{:<12} {:>8} {:>8} {:>10}", "variant", "top1", "auc", "dead_keys");
    let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
    for v in Variant::ALL {
        println!(
            "{:<12} {:>8} {:>8} {:>10}",
            v.name(),
            fmt(table.mean_top1(v)),
            fmt(table.mean_auc(v)),
            fmt(table.mean_dead_keys(v)),
        );
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
