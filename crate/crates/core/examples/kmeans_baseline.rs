//! Compares the learned memory with the k-means replacement: spherical
//! k-means on bag features with counting targets for D and R.
//!
//! cargo run --release --example kmeans_baseline -- [seed]

use somnet::data::{synth_generate, SynthConfig};
use somnet::eval::{count_targets, run_variants, spherical_kmeans, Variant};
use somnet::trainer::TrainConfig;

fn main() -> somnet::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let data = synth_generate(&SynthConfig { seed, ..Default::default() })?;

    // one k-means fit on image-averaged bag features
    let features: Vec<Vec<f64>> = data
        .bags
        .iter()
        .map(|b| {
            let mut x = vec![0.0; data.feature_dim];
            for (inst, w) in b.instances.iter().zip(&b.weights) {
                for (xi, fi) in x.iter_mut().zip(&inst.feature) {
                    *xi += w * fi;
                }
            }
            x
        })
        .collect();
    let labels: Vec<usize> = data.bags.iter().map(|b| b.label).collect();
    let (_, assign) = spherical_kmeans(&features, 100, 20, seed)?;
    let (d, _) = count_targets(&assign, &labels, data.num_classes, 100);
    let used = (0..100).filter(|l| assign.contains(l)).count();
    let purity: f64 = (0..100)
        .filter(|l| assign.contains(l))
        .map(|l| (0..data.num_classes).map(|y| d[y * 100 + l]).fold(0.0, f64::max))
        .sum::<f64>()
        / used as f64;
    println!("k-means: {used} non-empty clusters, mean max d-value {purity:.3}");

    let table = run_variants(&data, &TrainConfig { seed, ..Default::default() }, &[Variant::Full, Variant::Kmeans])?;
    for row in &table.rows {
        println!(
            "{:<8} top1 {:.3} noise AUC {:.3}",
            row.variant.name(),
            row.report.top1,
            row.report.noise_auc.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
