//! Warm-up, memory-driven ROI weighting and curriculum training.
//!
//! The classifier is trained on weighted bag features with instance weights
//! held constant; the memory is updated with the same bag features held
//! constant. Weights are refreshed from the memory at the start of every
//! epoch of every curriculum stage.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{area_scores, init_weights, Bag, Dataset, TestImage};
use crate::error::{Error, Result};
use crate::eval;
use crate::kmeans::kmeans_memory;
use crate::memory::{KeyIndex, MemoryConfig, MemoryLoss, MemoryState};
use crate::model::{BagInput, ClassifierState};

/// How ROI weights are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Self-organizing memory trained jointly with the classifier.
    Memory,
    /// Spherical k-means refit on bag features once per curriculum stage.
    Kmeans,
    /// Initial weights throughout (images only, uniform).
    Uniform,
}

/// Encoder setting: `"auto"`, `"off"` or an output width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderMode {
    /// Off for synthetic data, 64 wide for ingested features.
    Auto,
    Off,
    Dim(usize),
}

impl Serialize for EncoderMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            EncoderMode::Auto => s.serialize_str("auto"),
            EncoderMode::Off => s.serialize_str("off"),
            EncoderMode::Dim(d) => s.serialize_u64(*d as u64),
        }
    }
}

impl<'de> Deserialize<'de> for EncoderMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Dim(usize),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Dim(0) => Ok(EncoderMode::Off),
            Raw::Dim(n) => Ok(EncoderMode::Dim(n)),
            Raw::Name(s) if s == "auto" => Ok(EncoderMode::Auto),
            Raw::Name(s) if s == "off" => Ok(EncoderMode::Off),
            Raw::Name(s) => Err(serde::de::Error::custom(format!(
                "encoder must be \"auto\", \"off\" or a width, got {s:?}"
            ))),
        }
    }
}

/// Default encoder width for ingested real features.
pub const AUTO_ENCODER_DIM: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreToggles {
    pub use_d_score: bool,
    pub use_r_score: bool,
    pub use_a_score: bool,
}

impl Default for ScoreToggles {
    fn default() -> Self {
        ScoreToggles {
            use_d_score: true,
            use_r_score: true,
            use_a_score: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n_g: usize,
    /// Side of the key grid; `None` picks the smallest square with at least
    /// ten slots per class.
    pub grid_w: Option<usize>,
    pub radius: usize,
    pub p_start: f64,
    pub p_step: f64,
    pub p_end: f64,
    /// Hold `p` at this value for every stage of the schedule.
    pub fixed_p: Option<f64>,
    pub warmup_epochs_cls: usize,
    pub warmup_epochs_mem: usize,
    pub epochs_per_stage: usize,
    pub batch_size: usize,
    pub lr_cls: f64,
    pub momentum: f64,
    pub lr_key: f64,
    pub lr_value: f64,
    /// Memory learning rates are multiplied by this at every stage boundary.
    pub memory_lr_decay: f64,
    pub encoder: EncoderMode,
    pub use_d_score: bool,
    pub use_r_score: bool,
    pub use_a_score: bool,
    pub use_som: bool,
    pub use_proposals: bool,
    pub weighting: Weighting,
    pub kmeans_iters: usize,
    /// Re-partition images into bags at every epoch instead of once per run.
    pub repartition_bags: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_g: 2,
            grid_w: None,
            radius: 1,
            p_start: 0.10,
            p_step: 0.05,
            p_end: 0.40,
            fixed_p: None,
            warmup_epochs_cls: 5,
            warmup_epochs_mem: 5,
            epochs_per_stage: 5,
            batch_size: 32,
            lr_cls: 0.01,
            momentum: 0.9,
            lr_key: 0.05,
            lr_value: 0.05,
            memory_lr_decay: 0.5,
            encoder: EncoderMode::Auto,
            use_d_score: true,
            use_r_score: true,
            use_a_score: true,
            use_som: true,
            use_proposals: true,
            weighting: Weighting::Memory,
            kmeans_iters: 20,
            repartition_bags: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_g == 0 {
            return bad("n_g must be at least 1".into());
        }
        if !(self.p_start > 0.0 && self.p_start <= self.p_end && self.p_end <= 1.0) {
            return bad(format!(
                "need 0 < p_start <= p_end <= 1, got {} and {}",
                self.p_start, self.p_end
            ));
        }
        if !(self.p_step > 0.0) {
            return bad("p_step must be positive".into());
        }
        if let Some(p) = self.fixed_p {
            if !(p > 0.0 && p <= 1.0) {
                return bad(format!("fixed_p must lie in (0, 1], got {p}"));
            }
        }
        for (name, v) in [
            ("warmup_epochs_cls", self.warmup_epochs_cls),
            ("warmup_epochs_mem", self.warmup_epochs_mem),
            ("epochs_per_stage", self.epochs_per_stage),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        for (name, v) in [
            ("lr_cls", self.lr_cls),
            ("lr_key", self.lr_key),
            ("lr_value", self.lr_value),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)".into());
        }
        if !(self.memory_lr_decay > 0.0 && self.memory_lr_decay <= 1.0) {
            return bad("memory_lr_decay must lie in (0, 1]".into());
        }
        if self.grid_w == Some(0) {
            return bad("grid_w must be positive".into());
        }
        Ok(())
    }

    /// Parses a flat JSON config; unknown keys are rejected.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn toggles(&self) -> ScoreToggles {
        ScoreToggles {
            use_d_score: self.use_d_score,
            use_r_score: self.use_r_score,
            use_a_score: self.use_a_score,
        }
    }

    pub fn effective_radius(&self) -> usize {
        if self.use_som {
            self.radius
        } else {
            0
        }
    }

    pub fn grid_width(&self, num_classes: usize) -> usize {
        self.grid_w.unwrap_or_else(|| default_grid_width(num_classes))
    }

    pub fn memory_config(&self, num_classes: usize) -> MemoryConfig {
        MemoryConfig {
            grid_w: self.grid_width(num_classes),
            radius: self.effective_radius(),
            lr_key: self.lr_key,
            lr_value: self.lr_value,
        }
    }

    /// The curriculum: `p_start, p_start + p_step, ...` up to `p_end`, or
    /// `fixed_p` repeated for as many stages.
    pub fn curriculum(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for k in 0.. {
            let p = round_p(self.p_start + k as f64 * self.p_step);
            if p > self.p_end + 1e-9 {
                break;
            }
            out.push(self.fixed_p.map_or(p, round_p));
        }
        out
    }

    fn encoder_dim(&self, dataset: &Dataset) -> Option<usize> {
        match self.encoder {
            EncoderMode::Off => None,
            EncoderMode::Dim(d) => Some(d),
            EncoderMode::Auto => {
                let synthetic = dataset.metadata.get("generator").is_some();
                (!synthetic).then_some(AUTO_ENCODER_DIM)
            }
        }
    }
}

fn round_p(p: f64) -> f64 {
    (p * 1e9).round() / 1e9
}

/// Smallest `w` with `w * w >= 10 * num_classes`.
pub fn default_grid_width(num_classes: usize) -> usize {
    let target = 10 * num_classes.max(1);
    let mut w = 1;
    while w * w < target {
        w += 1;
    }
    w
}

/// Number of ROIs kept per bag: `ceil(p * n_b)`, at least one.
pub fn kept_count(p: f64, n_b: usize) -> usize {
    ((p * n_b as f64 - 1e-9).ceil() as usize).clamp(1, n_b.max(1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiWeights {
    pub weights: Vec<f64>,
    /// Winner slot of every instance.
    pub winners: Vec<usize>,
    /// Raw scores before top-p filtering.
    pub raw: Vec<f64>,
    /// All raw scores were zero and the initial weights were used.
    pub fallback: bool,
}

/// Memory-derived ROI weights for one bag: raw score `s[y, z] * sigma`
/// (disabled factors replaced by one), top `ceil(p * n_b)` kept, then
/// L1-normalized.
pub fn compute_roi_weights(
    bag: &Bag,
    memory: &MemoryState,
    classifier: &ClassifierState,
    p: f64,
    toggles: ScoreToggles,
) -> Result<RoiWeights> {
    roi_weights_indexed(bag, memory, &memory.key_index(), classifier, p, toggles)
}

fn roi_weights_indexed(
    bag: &Bag,
    memory: &MemoryState,
    index: &KeyIndex,
    classifier: &ClassifierState,
    p: f64,
    toggles: ScoreToggles,
) -> Result<RoiWeights> {
    let y = bag.label;
    let sigma = if toggles.use_a_score {
        area_scores(bag)?
    } else {
        vec![1.0; bag.n_b()]
    };
    let mut winners = Vec::with_capacity(bag.n_b());
    let mut raw = Vec::with_capacity(bag.n_b());
    for (inst, a) in bag.instances.iter().zip(&sigma) {
        let z = index.winner(&classifier.encode(&inst.feature)?)?.index;
        let d = if toggles.use_d_score { memory.d(y, z) } else { 1.0 };
        let r = if toggles.use_r_score { memory.r(y, z) } else { 1.0 };
        winners.push(z);
        raw.push(d * r * a);
    }
    let weights = top_p_normalize(&raw, p);
    match weights {
        Some(weights) => Ok(RoiWeights { weights, winners, raw, fallback: false }),
        None => Ok(RoiWeights {
            weights: init_weights(bag),
            winners,
            raw,
            fallback: true,
        }),
    }
}

/// Keeps the `ceil(p * n)` largest entries (earlier index wins ties), zeroes
/// the rest and normalizes. `None` if the kept entries sum to zero.
pub fn top_p_normalize(raw: &[f64], p: f64) -> Option<Vec<f64>> {
    let m = kept_count(p, raw.len());
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| raw[b].total_cmp(&raw[a]).then(a.cmp(&b)));
    let mut out = vec![0.0; raw.len()];
    let mut total = 0.0;
    for &i in &order[..m] {
        out[i] = raw[i];
        total += raw[i];
    }
    if !(total > 0.0 && total.is_finite()) {
        return None;
    }
    out.iter_mut().for_each(|w| *w /= total);
    Some(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub cls_loss: Option<f64>,
    pub memory_loss: Option<MemoryLoss>,
    pub train_bag_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub p: f64,
    pub lr_key: f64,
    pub lr_value: f64,
    pub epochs: Vec<EpochMetrics>,
    pub fallback_bags: usize,
    /// Test accuracy at the end of the stage, when test images exist.
    pub test_top1: Option<f64>,
    /// Noise AUC of the stage's last refreshed weights, when flags exist.
    pub noise_auc: Option<f64>,
    pub clean_weight_mass: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub warmup_cls: Vec<EpochMetrics>,
    pub warmup_mem: Vec<EpochMetrics>,
    pub stages: Vec<StageReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub classifier: ClassifierState,
    pub memory: Option<MemoryState>,
    pub p: f64,
    pub bags: Vec<Bag>,
    pub epoch: usize,
    pub history: History,
    /// Winner counts over the most recent joint-training epoch.
    pub last_epoch_wins: Vec<usize>,
    /// Unfiltered `s * sigma` scores from the latest weight refresh.
    pub raw_scores: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anomalies {
    /// Bag refreshes that fell back to the initial weights.
    pub fallback_bags: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub dataset: serde_json::Value,
    pub p_trace: Vec<f64>,
    pub history: History,
    pub test_top1: Option<f64>,
    pub per_class_accuracy: Option<Vec<f64>>,
    pub noise_auc: Option<f64>,
    pub clean_weight_mass: Option<f64>,
    pub dead_key_fraction: Option<f64>,
    pub anomalies: Anomalies,
}

impl RunReport {
    /// The metric values compared across repeated runs.
    pub fn metrics(&self) -> serde_json::Value {
        serde_json::json!({
            "p_trace": self.p_trace,
            "history": self.history,
            "test_top1": self.test_top1,
            "per_class_accuracy": self.per_class_accuracy,
            "noise_auc": self.noise_auc,
            "clean_weight_mass": self.clean_weight_mass,
            "dead_key_fraction": self.dead_key_fraction,
            "anomalies": self.anomalies,
        })
    }
}

/// Bags for a run: the dataset's groups re-partitioned with the run seed.
pub fn run_bags(dataset: &Dataset, config: &TrainConfig, seed: u64) -> Result<Vec<Bag>> {
    let n_p = if config.use_proposals { dataset.n_p } else { 0 };
    let mut bags = dataset.rebag(config.n_g, n_p, seed)?;
    if config.weighting == Weighting::Uniform {
        for bag in &mut bags {
            bag.weights = vec![1.0 / bag.n_b() as f64; bag.n_b()];
        }
    }
    Ok(bags)
}

struct Run<'a> {
    config: &'a TrainConfig,
    features: Vec<Vec<Vec<f64>>>,
    rng: ChaCha8Rng,
    dataset: &'a Dataset,
}

impl<'a> Run<'a> {
    fn new(dataset: &'a Dataset, config: &'a TrainConfig, state: &TrainState, rng: ChaCha8Rng) -> Self {
        Run {
            config,
            features: feature_table(&state.bags),
            rng,
            dataset,
        }
    }

    fn maybe_repartition(&mut self, state: &mut TrainState) -> Result<()> {
        if self.config.repartition_bags {
            let seed = rand::Rng::random::<u64>(&mut self.rng);
            state.bags = run_bags(self.dataset, self.config, seed)?;
            self.features = feature_table(&state.bags);
        }
        Ok(())
    }

    fn bag_features(&self, state: &TrainState, order: &[usize]) -> Result<Vec<Vec<f64>>> {
        order
            .par_iter()
            .map(|&b| state.classifier.bag_feature(&self.features[b], &state.bags[b].weights))
            .collect()
    }

    /// One pass over shuffled mini-batches.
    fn epoch(&mut self, state: &mut TrainState, update_cls: bool, update_mem: bool) -> Result<EpochMetrics> {
        let mut order: Vec<usize> = (0..state.bags.len()).collect();
        order.shuffle(&mut self.rng);
        let slots = state.memory.as_ref().map_or(0, MemoryState::slots);
        let mut wins = vec![0usize; slots];
        let mut cls_loss = 0.0;
        let mut mem_loss = MemoryLoss::default();
        let mut correct = 0usize;

        for chunk in order.chunks(self.config.batch_size) {
            let xbars = self.bag_features(state, chunk)?;
            for (xbar, &b) in xbars.iter().zip(chunk) {
                if state.classifier.classify(xbar).map(|p| crate::linalg::argmax(&p))? == state.bags[b].label {
                    correct += 1;
                }
            }
            if update_cls {
                let batch: Vec<BagInput> = chunk
                    .iter()
                    .map(|&b| BagInput {
                        features: &self.features[b],
                        weights: &state.bags[b].weights,
                        label: state.bags[b].label,
                    })
                    .collect();
                let (loss, grads) = state.classifier.loss_and_grads(&batch)?;
                if !loss.is_finite() {
                    return Err(diverged(state, loss));
                }
                cls_loss += loss * chunk.len() as f64;
                state.classifier.sgd_step(&grads)?;
            }
            if let Some(memory) = state.memory.as_mut() {
                for (xbar, &b) in xbars.iter().zip(chunk) {
                    let y = state.bags[b].label;
                    if update_mem {
                        let l = memory.memory_loss([(xbar.as_slice(), y)])?;
                        mem_loss.key += l.key;
                        mem_loss.d_value += l.d_value;
                        mem_loss.r_value += l.r_value;
                        wins[memory.update(xbar, y)?.index] += 1;
                    } else {
                        wins[memory.winner(xbar)?.index] += 1;
                    }
                }
            }
        }
        let n = state.bags.len() as f64;
        state.last_epoch_wins = wins;
        state.epoch += 1;
        Ok(EpochMetrics {
            cls_loss: update_cls.then_some(cls_loss / n),
            memory_loss: update_mem.then_some(MemoryLoss {
                key: mem_loss.key / n,
                d_value: mem_loss.d_value / n,
                r_value: mem_loss.r_value / n,
            }),
            train_bag_accuracy: Some(correct as f64 / n),
        })
    }

    /// Recomputes every bag's weights from the memory; returns the number of
    /// bags that fell back to initial weights.
    fn refresh_weights(&self, state: &mut TrainState, p: f64) -> Result<usize> {
        let Some(memory) = state.memory.as_ref() else {
            return Ok(0);
        };
        let index = memory.key_index();
        let toggles = self.config.toggles();
        let refreshed: Vec<RoiWeights> = state
            .bags
            .par_iter()
            .map(|bag| roi_weights_indexed(bag, memory, &index, &state.classifier, p, toggles))
            .collect::<Result<_>>()?;
        let mut fallbacks = 0;
        state.raw_scores.clear();
        for (bag, w) in state.bags.iter_mut().zip(refreshed) {
            fallbacks += usize::from(w.fallback);
            bag.weights = w.weights;
            state.raw_scores.push(w.raw);
        }
        Ok(fallbacks)
    }

    fn refit_kmeans(&self, state: &mut TrainState, seed: u64) -> Result<()> {
        let order: Vec<usize> = (0..state.bags.len()).collect();
        let xbars = self.bag_features(state, &order)?;
        let labels: Vec<usize> = state.bags.iter().map(|b| b.label).collect();
        let cfg = self.config.memory_config(self.dataset.num_classes);
        state.memory = Some(kmeans_memory(
            &xbars,
            &labels,
            self.dataset.num_classes,
            cfg,
            self.config.kmeans_iters,
            seed,
        )?);
        Ok(())
    }
}

fn feature_table(bags: &[Bag]) -> Vec<Vec<Vec<f64>>> {
    bags.iter()
        .map(|b| b.instances.iter().map(|i| i.feature.clone()).collect())
        .collect()
}

fn diverged(state: &TrainState, loss: f64) -> Error {
    let snapshot = serde_json::json!({
        "p": state.p,
        "epoch": state.epoch,
        "loss": loss.to_string(),
        "classifier_param_max_abs": state.classifier.params.iter().fold(0.0_f64, |m, v| m.max(v.abs())),
    });
    Error::NonFinite(format!("classification loss diverged: {snapshot}"))
}

/// The bags a run with this config starts from.
pub fn bags_for_run(dataset: &Dataset, config: &TrainConfig) -> Result<Vec<Bag>> {
    run_bags(dataset, config, seeds(config)[0])
}

fn seeds(config: &TrainConfig) -> [u64; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    std::array::from_fn(|_| rand::Rng::random(&mut rng))
}

/// Trains the classifier on initial weights, then the memory on the
/// resulting bag features with the classifier frozen.
pub fn warmup(dataset: &Dataset, config: &TrainConfig) -> Result<TrainState> {
    config.validate()?;
    let [bag_seed, model_seed, mem_seed, loop_seed] = seeds(config);
    let bags = run_bags(dataset, config, bag_seed)?;
    let enc = config.encoder_dim(dataset);
    let classifier = ClassifierState::new(
        dataset.feature_dim,
        enc,
        dataset.num_classes,
        config.lr_cls,
        config.momentum,
        model_seed,
    );
    let memory = match config.weighting {
        Weighting::Memory => Some(MemoryState::new(
            enc.unwrap_or(dataset.feature_dim),
            dataset.num_classes,
            config.memory_config(dataset.num_classes),
            mem_seed,
        )?),
        Weighting::Kmeans | Weighting::Uniform => None,
    };
    let mut state = TrainState {
        classifier,
        memory,
        p: config.p_start,
        bags,
        epoch: 0,
        history: History::default(),
        last_epoch_wins: Vec::new(),
        raw_scores: Vec::new(),
    };
    let mut run = Run::new(dataset, config, &state, ChaCha8Rng::seed_from_u64(loop_seed));
    for _ in 0..config.warmup_epochs_cls {
        run.maybe_repartition(&mut state)?;
        let m = run.epoch(&mut state, true, false)?;
        state.history.warmup_cls.push(m);
    }
    match config.weighting {
        Weighting::Memory => {
            for _ in 0..config.warmup_epochs_mem {
                run.maybe_repartition(&mut state)?;
                let m = run.epoch(&mut state, false, true)?;
                state.history.warmup_mem.push(m);
            }
        }
        Weighting::Kmeans => run.refit_kmeans(&mut state, mem_seed)?,
        Weighting::Uniform => {}
    }
    state.epoch = 0;
    Ok(state)
}

/// Runs the curriculum stages on a warmed-up state.
pub fn train_from(mut state: TrainState, dataset: &Dataset, config: &TrainConfig) -> Result<(TrainState, RunReport)> {
    config.validate()?;
    let [_, _, mem_seed, loop_seed] = seeds(config);
    let mut run = Run::new(
        dataset,
        config,
        &state,
        ChaCha8Rng::seed_from_u64(loop_seed ^ 0x9e37_79b9_7f4a_7c15),
    );
    let mut p_trace = Vec::new();
    for (stage, p) in config.curriculum().into_iter().enumerate() {
        state.p = p;
        p_trace.push(p);
        if stage > 0 {
            if let Some(m) = state.memory.as_mut() {
                m.config.lr_key *= config.memory_lr_decay;
                m.config.lr_value *= config.memory_lr_decay;
            }
            if config.weighting == Weighting::Kmeans {
                run.refit_kmeans(&mut state, mem_seed.wrapping_add(stage as u64))?;
            }
        }
        let mut report = StageReport {
            p,
            lr_key: state.memory.as_ref().map_or(0.0, |m| m.config.lr_key),
            lr_value: state.memory.as_ref().map_or(0.0, |m| m.config.lr_value),
            ..Default::default()
        };
        for _ in 0..config.epochs_per_stage {
            run.maybe_repartition(&mut state)?;
            if config.weighting != Weighting::Uniform {
                report.fallback_bags += run.refresh_weights(&mut state, p)?;
            }
            let update_mem = config.weighting == Weighting::Memory;
            report.epochs.push(run.epoch(&mut state, true, update_mem)?);
        }
        report.noise_auc = roi_noise_auc(&state);
        report.clean_weight_mass = eval::clean_weight_mass(&state.bags);
        report.test_top1 = test_accuracy(&state.classifier, dataset)?;
        state.history.stages.push(report);
    }
    let report = build_report(&state, dataset, config, p_trace)?;
    Ok((state, report))
}

/// Warm-up followed by the full curriculum.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(TrainState, RunReport)> {
    let state = warmup(dataset, config)?;
    train_from(state, dataset, config)
}

/// Test-time prediction from image-level features; the memory is not used.
pub fn predict(classifier: &ClassifierState, images: &[TestImage]) -> Result<Vec<usize>> {
    images.par_iter().map(|t| classifier.predict(&t.feature)).collect()
}

/// Noise AUC of the unfiltered ROI scores, or of the bag weights when no
/// memory produced scores.
fn roi_noise_auc(state: &TrainState) -> Option<f64> {
    if state.raw_scores.len() == state.bags.len() {
        eval::scored_noise_auc(&state.bags, &state.raw_scores).ok()
    } else {
        eval::bag_noise_auc(&state.bags).ok()
    }
}

fn test_accuracy(classifier: &ClassifierState, dataset: &Dataset) -> Result<Option<f64>> {
    if dataset.test_images.is_empty() {
        return Ok(None);
    }
    let preds = predict(classifier, &dataset.test_images)?;
    let labels: Vec<usize> = dataset.test_images.iter().map(|t| t.label).collect();
    eval::accuracy(&preds, &labels).map(Some)
}

fn build_report(state: &TrainState, dataset: &Dataset, config: &TrainConfig, p_trace: Vec<f64>) -> Result<RunReport> {
    let (test_top1, per_class_accuracy) = if dataset.test_images.is_empty() {
        (None, None)
    } else {
        let preds = predict(&state.classifier, &dataset.test_images)?;
        let labels: Vec<usize> = dataset.test_images.iter().map(|t| t.label).collect();
        (
            Some(eval::accuracy(&preds, &labels)?),
            Some(eval::per_class_accuracy(&preds, &labels, dataset.num_classes)?),
        )
    };
    let noise_auc = roi_noise_auc(state);
    let clean_weight_mass = eval::clean_weight_mass(&state.bags);
    let dead_key_fraction = state.memory.as_ref().map(|_| eval::dead_key_fraction(&state.last_epoch_wins));
    let fallback_bags = state.history.stages.iter().map(|s| s.fallback_bags).sum();
    let dataset_meta = dataset.metadata.clone();
    let run_id = run_id(config, &dataset_meta);
    Ok(RunReport {
        run_id,
        seed: config.seed,
        config: config.clone(),
        dataset: dataset_meta,
        p_trace,
        history: state.history.clone(),
        test_top1,
        per_class_accuracy,
        noise_auc,
        clean_weight_mass,
        dead_key_fraction,
        anomalies: Anomalies { fallback_bags },
    })
}

/// Short content hash of the configuration and dataset identity.
pub fn run_id(config: &TrainConfig, dataset_meta: &serde_json::Value) -> String {
    use sha2::{Digest, Sha256};
    let text = serde_json::json!({ "config": config, "dataset": dataset_meta }).to_string();
    let hex = format!("{:x}", Sha256::digest(text.as_bytes()));
    hex[..12].to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, Instance, RoiKind, SynthConfig};

    #[test]
    fn curriculum_trace() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.curriculum(), vec![0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40]);
        let fixed = TrainConfig { p_start: 0.4, ..Default::default() };
        assert_eq!(fixed.curriculum(), vec![0.4]);
        let odd = TrainConfig { p_start: 0.1, p_step: 0.2, p_end: 0.6, ..Default::default() };
        assert_eq!(odd.curriculum(), vec![0.1, 0.3, 0.5]);
    }

    #[test]
    fn kept_counts() {
        assert_eq!(kept_count(0.10, 42), 5);
        assert_eq!(kept_count(0.15, 20), 3);
        assert_eq!(kept_count(0.40, 42), 17);
        assert_eq!(kept_count(0.01, 2), 1);
        assert_eq!(kept_count(1.0, 42), 42);
    }

    #[test]
    fn grid_heuristic() {
        assert_eq!(default_grid_width(10), 10);
        assert_eq!(default_grid_width(14), 12);
        assert_eq!(default_grid_width(3), 6);
    }

    #[test]
    fn config_parsing() {
        assert!(TrainConfig::from_json_str(r#"{"p_strat": 0.1}"#).is_err());
        let c = TrainConfig::from_json_str(r#"{"p_start": 0.4, "encoder": "off", "weighting": "kmeans"}"#).unwrap();
        assert_eq!(c.p_start, 0.4);
        assert_eq!(c.encoder, EncoderMode::Off);
        assert_eq!(c.weighting, Weighting::Kmeans);
        let c = TrainConfig::from_json_str(r#"{"encoder": 16}"#).unwrap();
        assert_eq!(c.encoder, EncoderMode::Dim(16));
        assert!(TrainConfig::from_json_str(r#"{"p_start": 0.5, "p_end": 0.4}"#).is_err());
        assert!(TrainConfig::from_json_str(r#"{"epochs_per_stage": 0}"#).is_err());
        let echoed = serde_json::to_string(&TrainConfig::default()).unwrap();
        assert_eq!(TrainConfig::from_json_str(&echoed).unwrap(), TrainConfig::default());
    }

    #[test]
    fn top_p_examples() {
        let raw: Vec<f64> = (0..42).map(|i| (i % 7) as f64).collect();
        let w = top_p_normalize(&raw, 0.1).unwrap();
        assert_eq!(w.iter().filter(|&&v| v > 0.0).count(), 5);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // ties at 6 broken by index: 6, 13, 20, 27, 34 survive
        let kept: Vec<usize> = (0..42).filter(|&i| w[i] > 0.0).collect();
        assert_eq!(kept, vec![6, 13, 20, 27, 34]);

        let ones = vec![1.0; 42];
        let w = top_p_normalize(&ones, 0.1).unwrap();
        assert_eq!(&w[..5], &[0.2; 5]);
        assert!(w[5..].iter().all(|&v| v == 0.0));

        assert!(top_p_normalize(&[0.0; 10], 0.5).is_none());
    }

    fn toy_bag() -> Bag {
        // two images, each with two proposals; features on 3 axes
        let mk = |id: &str, kind, parent: Option<&str>, area, f: [f64; 2]| Instance {
            id: id.into(),
            feature: f.to_vec(),
            kind,
            area,
            parent: parent.map(Into::into),
            noise: None,
            bbox: None,
        };
        let instances = vec![
            mk("a", RoiKind::Image, None, None, [1.0, 0.0]),
            mk("a0", RoiKind::Proposal, Some("a"), Some(100.0), [0.0, 1.0]),
            mk("a1", RoiKind::Proposal, Some("a"), Some(50.0), [1.0, 0.1]),
            mk("b", RoiKind::Image, None, None, [-1.0, 0.0]),
            mk("b0", RoiKind::Proposal, Some("b"), Some(10.0), [0.9, 0.0]),
            mk("b1", RoiKind::Proposal, Some("b"), Some(40.0), [0.0, -1.0]),
        ];
        let mut bag = Bag { label: 1, instances, weights: Vec::new(), n_g: 2 };
        bag.weights = init_weights(&bag);
        bag
    }

    fn four_slot_memory() -> MemoryState {
        // slots: +x, +y, -x, -y; only slot 0 is prototypical for class 1
        let keys = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]];
        let d = vec![0.1, 0.5, 0.5, 0.5, 0.9, 0.5, 0.5, 0.5];
        let r = vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        MemoryState::from_parts(MemoryConfig { grid_w: 2, radius: 0, lr_key: 0.1, lr_value: 0.1 }, keys, d, r, 2).unwrap()
    }

    #[test]
    fn only_prototypical_cluster_survives() {
        let bag = toy_bag();
        let mem = four_slot_memory();
        let cls = ClassifierState::new(2, None, 2, 0.01, 0.9, 0);
        let w = compute_roi_weights(&bag, &mem, &cls, 0.5, ScoreToggles::default()).unwrap();
        assert_eq!(w.winners, vec![0, 1, 0, 2, 0, 3]);
        // s = 0.9 for slot 0, area scores 1, 0.5, 0.25
        let expected_raw = [0.9, 0.0, 0.45, 0.0, 0.225, 0.0];
        for (a, b) in w.raw.iter().zip(expected_raw) {
            assert!((a - b).abs() < 1e-12);
        }
        let total = 0.9 + 0.45 + 0.225;
        let expected = [0.9 / total, 0.0, 0.45 / total, 0.0, 0.225 / total, 0.0];
        for (a, b) in w.weights.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(!w.fallback);

        let off = ScoreToggles { use_d_score: false, use_r_score: false, use_a_score: false };
        let w = compute_roi_weights(&bag, &mem, &cls, 0.5, off).unwrap();
        assert_eq!(w.weights, vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_scores_fall_back_to_initial_weights() {
        let bag = toy_bag();
        let mut mem = four_slot_memory();
        mem.r_values = vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let cls = ClassifierState::new(2, None, 2, 0.01, 0.9, 0);
        // class 1 r-row only on slot 1 (the +y proposal a0 wins it) -> not all zero
        let w = compute_roi_weights(&bag, &mem, &cls, 0.2, ScoreToggles::default()).unwrap();
        assert!(!w.fallback);
        mem.r_values = vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        mem.d_values = vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let w = compute_roi_weights(&bag, &mem, &cls, 0.2, ScoreToggles::default()).unwrap();
        // slot 3 (-y) is b1 with r=1, d=1 -> survives alone
        assert_eq!(w.weights, vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        mem.d_values[7] = 0.0;
        mem.d_values[3] = 1.0;
        let w = compute_roi_weights(&bag, &mem, &cls, 0.2, ScoreToggles::default()).unwrap();
        assert!(w.fallback);
        assert_eq!(w.weights, init_weights(&bag));
    }

    fn toy_dataset(seed: u64) -> Dataset {
        synth_generate(&SynthConfig {
            num_classes: 3,
            feature_dim: 8,
            images_per_class: 30,
            test_images_per_class: 20,
            n_g: 2,
            n_p: 4,
            label_noise_rate: 0.0,
            background_proposal_rate: 0.0,
            class_separation: 10.0,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            grid_w: Some(3),
            warmup_epochs_cls: 5,
            warmup_epochs_mem: 2,
            epochs_per_stage: 1,
            batch_size: 8,
            ..Default::default()
        }
    }

    #[test]
    fn warmup_is_accurate_valid_and_reproducible() {
        let ds = toy_dataset(1);
        let cfg = quick_config();
        let a = warmup(&ds, &cfg).unwrap();
        let acc = a.history.warmup_cls.last().unwrap().train_bag_accuracy.unwrap();
        // accuracy is measured before each step; re-measure after warm-up
        let correct = a
            .bags
            .iter()
            .filter(|b| {
                let f: Vec<Vec<f64>> = b.instances.iter().map(|i| i.feature.clone()).collect();
                let x = a.classifier.bag_feature(&f, &b.weights).unwrap();
                crate::linalg::argmax(&a.classifier.classify(&x).unwrap()) == b.label
            })
            .count();
        assert!(correct as f64 / a.bags.len() as f64 > 0.9, "{acc} {correct}");
        a.memory.as_ref().unwrap().check_invariants(1e-6).unwrap();
        let b = warmup(&ds, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_reaches_full_accuracy_on_separable_data() {
        let ds = toy_dataset(2);
        let (state, report) = train(&ds, &quick_config()).unwrap();
        assert_eq!(report.p_trace, vec![0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40]);
        assert_eq!(report.test_top1, Some(1.0));
        for bag in &state.bags {
            let nz = bag.weights.iter().filter(|&&w| w > 0.0).count();
            assert!(nz <= kept_count(0.4, bag.n_b()));
            assert!((bag.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        state.memory.unwrap().check_invariants(1e-6).unwrap();
    }

    #[test]
    fn prediction_ignores_memory() {
        let ds = toy_dataset(3);
        let (mut state, _) = train(&ds, &quick_config()).unwrap();
        let a = predict(&state.classifier, &ds.test_images).unwrap();
        state.memory = None;
        let b = predict(&state.classifier, &ds.test_images).unwrap();
        assert_eq!(a, b);
        let fresh = ClassifierState::new(8, None, 3, 0.01, 0.9, 0);
        assert!(predict(&fresh, &ds.test_images).unwrap().iter().all(|&p| p == 0));
        let bad = vec![TestImage { id: "x".into(), feature: vec![1.0; 7], label: 0 }];
        assert!(predict(&state.classifier, &bad).is_err());
    }

    #[test]
    fn image_only_and_encoder_runs() {
        let ds = toy_dataset(4);
        let cfg = TrainConfig { use_proposals: false, ..quick_config() };
        let (state, report) = train(&ds, &cfg).unwrap();
        assert!(state.bags.iter().all(|b| b.n_b() == 2));
        assert!(report.test_top1.is_some());

        let cfg = TrainConfig { encoder: EncoderMode::Dim(6), ..quick_config() };
        let (state, _) = train(&ds, &cfg).unwrap();
        assert_eq!(state.memory.unwrap().feature_dim, 6);

        let cfg = TrainConfig { repartition_bags: true, weighting: Weighting::Kmeans, ..quick_config() };
        assert!(train(&ds, &cfg).is_ok());
    }

    proptest::proptest! {
        #[test]
        fn top_p_keeps_ceil_p_n_positive_entries(
            raw in proptest::collection::vec(1e-6f64..1.0, 1..80),
            p in 0.01f64..=1.0,
        ) {
            let w = top_p_normalize(&raw, p).unwrap();
            let m = kept_count(p, raw.len());
            proptest::prop_assert_eq!(w.iter().filter(|v| **v > 0.0).count(), m);
            proptest::prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            // every kept entry is at least as large as every dropped one
            let kept_min = raw.iter().zip(&w).filter(|(_, w)| **w > 0.0).map(|(r, _)| *r).fold(f64::INFINITY, f64::min);
            let dropped_max = raw.iter().zip(&w).filter(|(_, w)| **w == 0.0).map(|(r, _)| *r).fold(0.0, f64::max);
            proptest::prop_assert!(kept_min >= dropped_max);
        }
    }
}
