//! Writes a synthetic dataset as JSONL with proposal boxes, ingests it back
//! and trains on the ingested copy.
//!
//! cargo run --release --example jsonl_ingest -- [dir]

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use somnet::data::{ingest_jsonl, ingest_test_jsonl, synth_generate, write_jsonl, IngestOptions, Record, RoiKind, SynthConfig};
use somnet::trainer::{train, EncoderMode, TrainConfig};

/// Places every ROI on a 100 x 100 canvas: images cover it, proposals get a
/// square box of their area at a random position.
fn with_boxes(records: impl Iterator<Item = Record>, seed: u64) -> Vec<Record> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records
        .map(|mut r| {
            r.bbox = Some(match (r.kind, r.area) {
                (RoiKind::Proposal, Some(a)) => {
                    let side = a.sqrt().min(100.0);
                    let x = rng.random_range(0.0..=100.0 - side);
                    let y = rng.random_range(0.0..=100.0 - side);
                    [x, y, side, side]
                }
                _ => [0.0, 0.0, 100.0, 100.0],
            });
            r
        })
        .collect()
}

fn main() -> somnet::Result<()> {
    let dir: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("somnet-jsonl"));
    std::fs::create_dir_all(&dir).map_err(|e| somnet::Error::Config(e.to_string()))?;

    let synth = SynthConfig { num_classes: 5, images_per_class: 60, test_images_per_class: 40, ..Default::default() };
    let data = synth_generate(&synth)?;
    let train_path = dir.join("train.jsonl");
    let test_path = dir.join("test.jsonl");
    let n = write_jsonl(&train_path, with_boxes(data.train_records(), 1))?;
    write_jsonl(&test_path, data.test_records())?;
    println!("wrote {n} training records to {}", train_path.display());

    let mut ingested = ingest_jsonl(&train_path, &IngestOptions::default())?;
    ingested.test_images = ingest_test_jsonl(&test_path)?;
    println!(
        "ingested {} images, {} classes, n_p = {}, {} bags, sha256 {}",
        ingested.groups.len(),
        ingested.num_classes,
        ingested.n_p,
        ingested.bags.len(),
        ingested.metadata["sha256"].as_str().unwrap_or("?")
    );

    for encoder in [EncoderMode::Off, EncoderMode::Auto] {
        let cfg = TrainConfig { encoder, ..Default::default() };
        let (_, report) = train(&ingested, &cfg)?;
        println!(
            "encoder {encoder:?}: top1 {:.3}, run {}",
            report.test_top1.unwrap_or(f64::NAN),
            report.run_id
        );
    }
    Ok(())
}
