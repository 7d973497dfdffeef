//! Trains on a synthetic dataset, then lists the most prototypical key slots
//! of one category with their category distributions and nearest ROIs.
//!
//! cargo run --release --example memory_inspect -- [category] [k]

use somnet::cli::inspect_memory;
use somnet::data::{synth_generate, SynthConfig};
use somnet::trainer::{train, TrainConfig};

fn main() -> somnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let category: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let k: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let data = synth_generate(&SynthConfig::default())?;
    let (state, _) = train(&data, &TrainConfig::default())?;
    let memory = state.memory.expect("memory weighting keeps a memory");

    let rois: Vec<(String, Vec<f64>)> = data
        .groups
        .iter()
        .flat_map(|g| g.instances())
        .map(|i| (i.id.clone(), i.feature.clone()))
        .collect();
    for slot in inspect_memory(&memory, category, k, &rois)? {
        let dist: Vec<String> = slot.distribution.iter().map(|v| format!("{v:.2}")).collect();
        println!(
            "slot {:>3} at ({}, {}): d {:.3} r {:.3} s {:.3}",
            slot.slot, slot.row, slot.col, slot.d, slot.r, slot.s
        );
        println!("  categories [{}]", dist.join(" "));
        println!("  nearest {}", slot.nearest.join(", "));
    }
    Ok(())
}
