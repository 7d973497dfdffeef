//! Commands behind the `somnet` binary.
//!
//! Every command reads one flat JSON config. Its keys are the union of the
//! synthetic generator keys ([`SynthConfig`]), the training keys
//! ([`TrainConfig`]) and the file/inspection keys of [`IoConfig`]; a key
//! shared by two sections (`n_g`, `seed`) feeds both. Unknown keys are errors.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::data::{
    ingest_jsonl, ingest_test_jsonl, synth_generate, write_jsonl, Dataset, IngestOptions, NoiseFlag, RoiKind,
    SynthConfig, TestImage,
};
use crate::error::{Error, Result};
use crate::eval::{self, run_suite, Variant};
use crate::heatmap::{self, BBox};
use crate::memory::{cosine, MemorySnapshot, MemoryState};
use crate::model::{ClassifierState, ModelCheckpoint};
use crate::trainer::{self, compute_roi_weights, RunReport, TrainConfig};

pub const MODEL_FILE: &str = "model.json";
pub const MEMORY_FILE: &str = "memory.json";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CommandKind {
    Gen,
    Train,
    Eval,
    Suite,
    Inspect,
    ExportHeatmap,
}

#[derive(Debug, Parser)]
#[command(name = "somnet", version, about = "Memory-weighted multi-instance training on noisy ROI bags")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (train/test JSONL and noise flags).
    Gen(Args),
    /// Train and write model, memory and report files.
    Train(Args),
    /// Predict the test split from a saved model; the memory is not read.
    Eval(Args),
    /// Run every ablation variant and write a comparison table.
    Suite(Args),
    /// Show the most prototypical key slots of one category.
    Inspect(Args),
    /// Rasterize ROI weights over proposal boxes.
    ExportHeatmap(Args),
}

impl Command {
    pub fn kind(&self) -> CommandKind {
        match self {
            Command::Gen(_) => CommandKind::Gen,
            Command::Train(_) => CommandKind::Train,
            Command::Eval(_) => CommandKind::Eval,
            Command::Suite(_) => CommandKind::Suite,
            Command::Inspect(_) => CommandKind::Inspect,
            Command::ExportHeatmap(_) => CommandKind::ExportHeatmap,
        }
    }

    pub fn args(&self) -> &Args {
        match self {
            Command::Gen(a)
            | Command::Train(a)
            | Command::Eval(a)
            | Command::Suite(a)
            | Command::Inspect(a)
            | Command::ExportHeatmap(a) => a,
        }
    }
}

#[derive(Clone, Debug, clap::Args)]
pub struct Args {
    /// Flat JSON config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ablation variant applied on top of the config.
    #[arg(long)]
    pub ablation: Option<String>,
}

/// File and inspection keys of the flat config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    /// Training JSONL; absent means the synthetic generator.
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    /// Ground-truth flag JSONL (`{"id", "flag"}` rows) for ingested data.
    pub flags: Option<PathBuf>,
    /// Directory holding model/memory/report files; defaults to `--out`.
    pub run_dir: Option<PathBuf>,
    pub category: Option<usize>,
    pub k: usize,
    pub image_id: Option<String>,
    pub raster: usize,
    pub histogram_bins: usize,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig {
            train_data: None,
            test_data: None,
            flags: None,
            run_dir: None,
            category: None,
            k: 5,
            image_id: None,
            raster: 32,
            histogram_bins: 10,
        }
    }
}

/// A parsed flat config.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub io: IoConfig,
    /// Keys present in the file.
    pub explicit: BTreeSet<String>,
}

fn keys_of<T: Serialize + Default>() -> BTreeSet<String> {
    match serde_json::to_value(T::default()) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => BTreeSet::new(),
    }
}

fn section<T: DeserializeOwned>(map: &Map<String, Value>, keys: &BTreeSet<String>, name: &str) -> Result<T> {
    let sub: Map<String, Value> = map
        .iter()
        .filter(|(k, _)| keys.contains(*k))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    serde_json::from_value(Value::Object(sub)).map_err(|e| Error::Config(format!("{name}: {e}")))
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let Value::Object(map) = value else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let synth_keys = keys_of::<SynthConfig>();
        let train_keys = keys_of::<TrainConfig>();
        let io_keys = keys_of::<IoConfig>();
        let unknown: Vec<&String> = map
            .keys()
            .filter(|k| !synth_keys.contains(*k) && !train_keys.contains(*k) && !io_keys.contains(*k))
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {unknown:?}")));
        }
        let synth: SynthConfig = section(&map, &synth_keys, "generator")?;
        let train: TrainConfig = section(&map, &train_keys, "training")?;
        let io: IoConfig = section(&map, &io_keys, "io")?;
        let rc = RunConfig {
            synth,
            train,
            io,
            explicit: map.keys().cloned().collect(),
        };
        rc.validate()?;
        Ok(rc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        if self.io.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.io.raster == 0 {
            return Err(Error::Config("raster must be at least 1".into()));
        }
        Ok(())
    }

    /// Applies `--seed` to every section.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.train.seed = seed;
        self.explicit.insert("seed".into());
        self
    }

    /// The resolved flat config, written next to every run's outputs.
    pub fn to_flat_json(&self) -> Value {
        let mut out = Map::new();
        for v in [
            serde_json::to_value(&self.synth),
            serde_json::to_value(&self.train),
            serde_json::to_value(&self.io),
        ]
        .into_iter()
        .flatten()
        {
            if let Value::Object(m) = v {
                out.extend(m);
            }
        }
        Value::Object(out)
    }

    fn run_dir<'a>(&'a self, out: &'a Path) -> &'a Path {
        self.io.run_dir.as_deref().unwrap_or(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlagRow {
    pub id: String,
    pub flag: NoiseFlag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub label: usize,
    pub pred: usize,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

fn read_flags(path: &Path) -> Result<HashMap<String, NoiseFlag>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<FlagRow>(l)
                .map(|r| (r.id, r.flag))
                .map_err(|e| Error::Record {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: e.to_string(),
                })
        })
        .collect()
}

/// The training dataset named by the config: an ingested JSONL file, or the
/// synthetic generator.
pub fn load_dataset(rc: &RunConfig) -> Result<Dataset> {
    let Some(path) = &rc.io.train_data else {
        return synth_generate(&rc.synth);
    };
    let opts = IngestOptions {
        n_g: rc.train.n_g,
        n_p: rc.explicit.contains("n_p").then_some(rc.synth.n_p),
        seed: rc.train.seed,
    };
    let mut ds = ingest_jsonl(path, &opts)?;
    if let Some(flags) = &rc.io.flags {
        ds.attach_flags(&read_flags(flags)?);
    }
    if let Some(test) = &rc.io.test_data {
        ds.test_images = ingest_test_jsonl(test)?;
    }
    Ok(ds)
}

fn test_images(rc: &RunConfig) -> Result<Vec<TestImage>> {
    match (&rc.io.test_data, &rc.io.train_data) {
        (Some(path), _) => ingest_test_jsonl(path),
        (None, None) => Ok(synth_generate(&rc.synth)?.test_images),
        (None, Some(_)) => Err(Error::Config("eval of an ingested dataset needs test_data".into())),
    }
}

fn train_config(rc: &RunConfig, ablation: Option<&str>) -> Result<TrainConfig> {
    let cfg = match ablation {
        Some(name) => Variant::from_name(name)?.apply(&rc.train),
        None => rc.train.clone(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Writes train/test JSONL, flags and a manifest; returns the summary.
pub fn cmd_gen(rc: &RunConfig, out: &Path) -> Result<Value> {
    if rc.io.train_data.is_some() {
        return Err(Error::Config("gen uses the synthetic generator; remove train_data".into()));
    }
    ensure_dir(out)?;
    let ds = synth_generate(&rc.synth)?;
    let train_lines = write_jsonl(out.join("train.jsonl"), ds.train_records())?;
    let test_lines = write_jsonl(out.join("test.jsonl"), ds.test_records())?;
    let flags: Vec<FlagRow> = ds
        .noise_flags()
        .into_iter()
        .map(|(id, flag)| FlagRow { id, flag })
        .collect();
    write_jsonl(out.join("flags.jsonl"), &flags)?;

    let images: Vec<_> = ds.groups.iter().map(|g| &g.image).collect();
    let proposals: Vec<_> = ds.groups.iter().flat_map(|g| &g.proposals).collect();
    let frac = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let noisy_images = images
        .iter()
        .filter(|i| i.noise == Some(NoiseFlag::LabelNoise))
        .count();
    let bg = proposals
        .iter()
        .filter(|i| i.noise == Some(NoiseFlag::BackgroundNoise))
        .count();
    let summary = json!({
        "seed": rc.synth.seed,
        "train_records": train_lines,
        "test_records": test_lines,
        "images": images.len(),
        "proposals": proposals.len(),
        "label_noise_images": noisy_images,
        "label_noise_image_fraction": frac(noisy_images, images.len()),
        "background_proposals": bg,
        "background_proposal_fraction": frac(bg, proposals.len()),
        "generator": rc.synth,
    });
    write_json(&out.join("manifest.json"), &summary)?;
    Ok(summary)
}

fn write_predictions(path: &Path, images: &[TestImage], preds: &[usize]) -> Result<()> {
    let rows = images.iter().zip(preds).map(|(t, &pred)| PredictionRow {
        id: t.id.clone(),
        label: t.label,
        pred,
    });
    write_jsonl(path, rows).map(|_| ())
}

/// Trains and writes model, memory (when used), report, predictions and
/// the resolved config (with `run_dir` pointing at `out`).
pub fn cmd_train(rc: &RunConfig, out: &Path, ablation: Option<&str>) -> Result<RunReport> {
    let cfg = train_config(rc, ablation)?;
    let ds = load_dataset(rc)?;
    ensure_dir(out)?;
    let (state, report) = trainer::train(&ds, &cfg)?;
    let checkpoint = ModelCheckpoint {
        model: state.classifier.clone(),
        config: serde_json::to_value(&cfg).map_err(|e| Error::json("config", e))?,
    };
    write_json(&out.join(MODEL_FILE), &checkpoint)?;
    if let Some(m) = &state.memory {
        write_json(&out.join(MEMORY_FILE), &m.snapshot())?;
    }
    write_json(&out.join(REPORT_FILE), &report)?;
    let mut resolved = rc.clone();
    resolved.io.run_dir.get_or_insert_with(|| out.to_path_buf());
    write_json(&out.join(CONFIG_FILE), &resolved.to_flat_json())?;
    if !ds.test_images.is_empty() {
        let preds = trainer::predict(&state.classifier, &ds.test_images)?;
        write_predictions(&out.join(PREDICTIONS_FILE), &ds.test_images, &preds)?;
    }
    Ok(report)
}

/// Predicts the test split from the saved model alone.
pub fn cmd_eval(rc: &RunConfig, out: &Path) -> Result<Value> {
    let run_dir = rc.run_dir(out).to_path_buf();
    let checkpoint: ModelCheckpoint = read_json(&run_dir.join(MODEL_FILE))?;
    let images = test_images(rc)?;
    if images.is_empty() {
        return Err(Error::Empty("test images"));
    }
    let preds = trainer::predict(&checkpoint.model, &images)?;
    let labels: Vec<usize> = images.iter().map(|t| t.label).collect();
    let top1 = eval::accuracy(&preds, &labels)?;
    let per_class = eval::per_class_accuracy(&preds, &labels, checkpoint.model.num_classes())?;
    ensure_dir(out)?;
    write_predictions(&out.join(PREDICTIONS_FILE), &images, &preds)?;
    let report_path = run_dir.join(REPORT_FILE);
    let train_report: Option<RunReport> = if report_path.exists() {
        Some(read_json(&report_path)?)
    } else {
        None
    };
    let summary = json!({
        "seed": rc.train.seed,
        "test_images": images.len(),
        "top1": top1,
        "per_class_accuracy": per_class,
        "run_id": train_report.as_ref().map(|r| r.run_id.clone()),
        "noise_auc": train_report.as_ref().and_then(|r| r.noise_auc),
        "clean_weight_mass": train_report.as_ref().and_then(|r| r.clean_weight_mass),
        "dead_key_fraction": train_report.as_ref().and_then(|r| r.dead_key_fraction),
    });
    write_json(&out.join("eval.json"), &summary)?;
    Ok(summary)
}

/// Runs all nine variants; writes `suite.csv` and `suite.json`.
pub fn cmd_suite(rc: &RunConfig, out: &Path, ablation: Option<&str>) -> Result<eval::SuiteTable> {
    if ablation.is_some() {
        return Err(Error::Config("suite runs every ablation; drop --ablation".into()));
    }
    let ds = load_dataset(rc)?;
    let table = run_suite(&ds, &rc.train)?;
    ensure_dir(out)?;
    fs::write(out.join("suite.csv"), table.to_csv()).map_err(|e| Error::io("suite.csv", e))?;
    write_json(&out.join("suite.json"), &table)?;
    Ok(table)
}

fn load_classifier(run_dir: &Path) -> Result<Option<ClassifierState>> {
    let path = run_dir.join(MODEL_FILE);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(read_json::<ModelCheckpoint>(&path)?.model))
}

fn load_memory(run_dir: &Path) -> Result<MemoryState> {
    let snap: MemorySnapshot = read_json(&run_dir.join(MEMORY_FILE))?;
    MemoryState::from_snapshot(&snap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotView {
    pub slot: usize,
    pub row: usize,
    pub col: usize,
    pub d: f64,
    pub r: f64,
    pub s: f64,
    /// Category distribution of the slot (its D column).
    pub distribution: Vec<f64>,
    /// Training ROIs closest to the key by cosine.
    pub nearest: Vec<String>,
}

/// Top-`k` slots of a category by prototypical score.
pub fn inspect_memory(
    memory: &MemoryState,
    category: usize,
    k: usize,
    rois: &[(String, Vec<f64>)],
) -> Result<Vec<SlotView>> {
    if category >= memory.num_classes {
        return Err(Error::Config(format!(
            "unknown category {category}; memory has {} categories",
            memory.num_classes
        )));
    }
    let mut slots: Vec<usize> = (0..memory.slots()).collect();
    slots.sort_by(|&a, &b| {
        memory
            .prototypical_score(category, b)
            .total_cmp(&memory.prototypical_score(category, a))
            .then(a.cmp(&b))
    });
    slots.truncate(k.min(memory.slots()));
    let w = memory.grid_w();
    slots
        .into_iter()
        .map(|l| {
            let mut near: Vec<(f64, &str)> = rois
                .iter()
                .filter_map(|(id, f)| cosine(f, &memory.keys[l]).ok().map(|c| (c, id.as_str())))
                .collect();
            near.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
            let d = memory.d(category, l);
            let r = memory.r(category, l);
            Ok(SlotView {
                slot: l,
                row: l / w,
                col: l % w,
                d,
                r,
                s: d * r,
                distribution: memory.d_column(l),
                nearest: near.into_iter().take(5).map(|(_, id)| id.to_string()).collect(),
            })
        })
        .collect()
}

/// Memory slots of one category; writes `inspect.json`.
pub fn cmd_inspect(rc: &RunConfig, out: &Path) -> Result<Value> {
    let run_dir = rc.run_dir(out).to_path_buf();
    let memory = load_memory(&run_dir)?;
    let category = rc
        .io
        .category
        .ok_or_else(|| Error::Config("inspect needs a category".into()))?;
    let mut k = rc.io.k;
    if k > memory.slots() {
        eprintln!("warning: k = {k} exceeds {} slots; clamped", memory.slots());
        k = memory.slots();
    }
    let classifier = load_classifier(&run_dir)?;
    let ds = load_dataset(rc)?;
    let rois = ds
        .groups
        .iter()
        .flat_map(|g| g.instances())
        .map(|i| {
            let f = match &classifier {
                Some(c) => c.encode(&i.feature)?,
                None => i.feature.clone(),
            };
            Ok((i.id.clone(), f))
        })
        .collect::<Result<Vec<_>>>()?;
    let slots = inspect_memory(&memory, category, k, &rois)?;
    let result = json!({ "seed": rc.train.seed, "category": category, "k": k, "slots": slots });
    ensure_dir(out)?;
    write_json(&out.join("inspect.json"), &result)?;
    Ok(result)
}

/// Heat map of one image's ROI weights plus a histogram of all ROI weights;
/// writes `heatmap.csv`, `histogram.csv` and `heatmap.json`.
pub fn cmd_export_heatmap(rc: &RunConfig, out: &Path) -> Result<Value> {
    let ds = load_dataset(rc)?;
    let has_boxes = ds
        .groups
        .iter()
        .flat_map(|g| g.instances())
        .any(|i| i.bbox.is_some());
    if !has_boxes {
        return Err(Error::Unsupported("synthetic data has no geometry (no bbox fields)".into()));
    }
    let run_dir = rc.run_dir(out).to_path_buf();
    let report: RunReport = read_json(&run_dir.join(REPORT_FILE))?;
    let cfg = report.config.clone();
    let memory = load_memory(&run_dir)?;
    let classifier =
        load_classifier(&run_dir)?.ok_or_else(|| Error::Config(format!("{} missing", MODEL_FILE)))?;
    let p = report.p_trace.last().copied().unwrap_or(cfg.p_end);
    let bags = trainer::bags_for_run(&ds, &cfg)?;

    let mut all_weights = Vec::new();
    let mut target = None;
    for bag in &bags {
        let w = compute_roi_weights(bag, &memory, &classifier, p, cfg.toggles())?;
        let wanted = match &rc.io.image_id {
            Some(id) => bag.instances.iter().any(|i| &i.id == id),
            None => target.is_none(),
        };
        if wanted && target.is_none() {
            target = Some((bag.clone(), w.weights.clone()));
        }
        all_weights.extend(w.weights);
    }
    let (bag, weights) = target.ok_or_else(|| {
        Error::Config(format!(
            "image {:?} is not in any training bag",
            rc.io.image_id.as_deref().unwrap_or("")
        ))
    })?;
    let image_id = match &rc.io.image_id {
        Some(id) => id.clone(),
        None => bag.instances[0].id.clone(),
    };
    let mut boxes: Vec<BBox> = Vec::new();
    let mut box_weights = Vec::new();
    let mut image_box = None;
    for (inst, &w) in bag.instances.iter().zip(&weights) {
        let own = inst.id == image_id || inst.parent.as_deref() == Some(image_id.as_str());
        if !own {
            continue;
        }
        let Some(b) = inst.bbox else { continue };
        if inst.kind == RoiKind::Image {
            image_box = Some(b);
        }
        boxes.push(b);
        box_weights.push(w);
    }
    let extent = image_box
        .or_else(|| heatmap::union_extent(&boxes))
        .ok_or_else(|| Error::Unsupported(format!("image {image_id} has no boxes")))?;
    let raster = heatmap::rasterize(&boxes, &box_weights, extent, rc.io.raster, rc.io.raster)?;
    let hist = heatmap::weight_histogram(&all_weights, rc.io.histogram_bins);

    ensure_dir(out)?;
    let csv: String = raster
        .iter()
        .map(|row| row.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(",") + "\n")
        .collect();
    fs::write(out.join("heatmap.csv"), csv).map_err(|e| Error::io("heatmap.csv", e))?;
    let hcsv: String = std::iter::once("lo,hi,count\n".to_string())
        .chain(hist.iter().map(|b| format!("{},{},{}\n", b.lo, b.hi, b.count)))
        .collect();
    fs::write(out.join("histogram.csv"), hcsv).map_err(|e| Error::io("histogram.csv", e))?;
    let result = json!({
        "seed": cfg.seed,
        "image_id": image_id,
        "p": p,
        "extent": extent,
        "raster": rc.io.raster,
        "rois": boxes.len(),
        "histogram": hist,
    });
    write_json(&out.join("heatmap.json"), &result)?;
    Ok(result)
}

/// Runs one parsed command; returns text for stdout.
pub fn run(cli: &Cli) -> Result<String> {
    let args = cli.command.args();
    let mut rc = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        rc = rc.with_seed(seed);
    }
    let ablation = args.ablation.as_deref();
    let kind = cli.command.kind();
    if ablation.is_some() && !matches!(kind, CommandKind::Train | CommandKind::Suite) {
        return Err(Error::Config("--ablation applies to train".into()));
    }
    let pretty = |v: &Value| serde_json::to_string_pretty(v).unwrap_or_default();
    match kind {
        CommandKind::Gen => cmd_gen(&rc, &args.out).map(|v| pretty(&v)),
        CommandKind::Train => {
            let r = cmd_train(&rc, &args.out, ablation)?;
            Ok(pretty(&json!({
                "run_id": r.run_id,
                "seed": r.seed,
                "p_trace": r.p_trace,
                "test_top1": r.test_top1,
                "noise_auc": r.noise_auc,
                "dead_key_fraction": r.dead_key_fraction,
                "fallback_bags": r.anomalies.fallback_bags,
            })))
        }
        CommandKind::Eval => cmd_eval(&rc, &args.out).map(|v| pretty(&v)),
        CommandKind::Suite => cmd_suite(&rc, &args.out, ablation).map(|t| t.to_csv()),
        CommandKind::Inspect => cmd_inspect(&rc, &args.out).map(|v| pretty(&v)),
        CommandKind::ExportHeatmap => cmd_export_heatmap(&rc, &args.out).map(|v| pretty(&v)),
    }
}

/// Parses `argv`, runs, prints, and returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(text) => {
            use std::io::Write;
            // A closed pipe (e.g. `| head`) is not an error for the command.
            let _ = writeln!(std::io::stdout().lock(), "{}", text.trim_end());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
