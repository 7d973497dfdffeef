//! Trains through the command layer on a JSONL dataset with boxes, exports
//! the ROI-weight heat map of one image and prints it as shaded text.
//!
//! cargo run --release --example heatmap_export -- [dir]
//!
//! Expects `train.jsonl` and `test.jsonl` from the `jsonl_ingest` example in
//! the same directory.

use std::path::PathBuf;

use somnet::cli::{cmd_export_heatmap, cmd_train, RunConfig};

fn main() -> somnet::Result<()> {
    let dir: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("somnet-jsonl"));
    let run = dir.join("run");
    let config = serde_json::json!({
        "train_data": dir.join("train.jsonl"),
        "test_data": dir.join("test.jsonl"),
        "encoder": "off",
        "raster": 24,
        "run_dir": run,
    });
    let rc = RunConfig::from_json_str(&config.to_string())?;
    let report = cmd_train(&rc, &run, None)?;
    println!("trained run {} (top1 {:.3})", report.run_id, report.test_top1.unwrap_or(f64::NAN));

    let out = dir.join("heatmap");
    let summary = cmd_export_heatmap(&rc, &out)?;
    println!("image {} at p = {}", summary["image_id"], summary["p"]);

    let csv = std::fs::read_to_string(out.join("heatmap.csv")).map_err(|e| somnet::Error::Config(e.to_string()))?;
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .map(|l| l.split(',').filter_map(|v| v.parse().ok()).collect())
        .collect();
    let max = rows.iter().flatten().copied().fold(0.0, f64::max).max(1e-12);
    let shades = [' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
    for row in &rows {
        let line: String = row
            .iter()
            .map(|v| shades[((v / max) * (shades.len() - 1) as f64).round() as usize])
            .collect();
        println!("|{line}|");
    }
    println!("weight histogram (all training ROIs):");
    for bin in summary["histogram"].as_array().into_iter().flatten() {
        println!("  [{:.1}, {:.1}) {}", bin["lo"], bin["hi"], bin["count"]);
    }
    Ok(())
}
