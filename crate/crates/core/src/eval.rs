//! Metrics, noise diagnostics, baselines and the ablation suite.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Bag, Dataset, NoiseFlag};
use crate::error::{Error, Result};
use crate::trainer::{self, RunReport, TrainConfig, Weighting};

pub use crate::kmeans::{count_targets, kmeans_memory, spherical_kmeans};

/// Fraction of equal entries.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch { expected: labels.len(), got: preds.len() });
    }
    if preds.is_empty() {
        return Err(Error::Empty("accuracy"));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Accuracy per true class; classes without samples report 0.
pub fn per_class_accuracy(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    accuracy(preds, labels)?;
    let mut hit = vec![0usize; num_classes];
    let mut tot = vec![0usize; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if l >= num_classes {
            return Err(Error::OutOfRange { index: l, len: num_classes });
        }
        tot[l] += 1;
        hit[l] += usize::from(p == l);
    }
    Ok(hit
        .iter()
        .zip(&tot)
        .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
        .collect())
}

/// ROC-AUC of `scores` for separating clean instances from noisy ones,
/// via the Mann-Whitney statistic with average ranks for ties.
pub fn noise_auc(scores: &[f64], flags: &[NoiseFlag]) -> Result<f64> {
    if scores.len() != flags.len() {
        return Err(Error::LengthMismatch { expected: flags.len(), got: scores.len() });
    }
    let n_pos = flags.iter().filter(|f| f.is_clean()).count();
    let n_neg = flags.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Empty("noise AUC needs both clean and noisy instances"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied block shares the mean rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if flags[k].is_clean() {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Noise AUC of the current ROI weights over all flagged training instances.
pub fn bag_noise_auc(bags: &[Bag]) -> Result<f64> {
    let weights: Vec<&[f64]> = bags.iter().map(|b| b.weights.as_slice()).collect();
    scored_noise_auc(bags, &weights)
}

/// Noise AUC of per-instance scores laid out like the bags' instances.
pub fn scored_noise_auc<S: AsRef<[f64]>>(bags: &[Bag], scores_per_bag: &[S]) -> Result<f64> {
    if scores_per_bag.len() != bags.len() {
        return Err(Error::LengthMismatch {
            expected: bags.len(),
            got: scores_per_bag.len(),
        });
    }
    let mut scores = Vec::new();
    let mut flags = Vec::new();
    for (bag, s) in bags.iter().zip(scores_per_bag) {
        for (inst, &w) in bag.instances.iter().zip(s.as_ref()) {
            if let Some(f) = inst.noise {
                scores.push(w);
                flags.push(f);
            }
        }
    }
    noise_auc(&scores, &flags)
}

/// Average over bags of the weight mass placed on clean instances.
pub fn clean_weight_mass(bags: &[Bag]) -> Option<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for bag in bags {
        if bag.instances.iter().any(|i| i.noise.is_none()) {
            return None;
        }
        total += bag
            .instances
            .iter()
            .zip(&bag.weights)
            .filter(|(i, _)| i.noise == Some(NoiseFlag::Clean))
            .map(|(_, w)| w)
            .sum::<f64>();
        n += 1;
    }
    (n > 0).then(|| total / n as f64)
}

/// Fraction of key slots that never won.
pub fn dead_key_fraction(wins: &[usize]) -> f64 {
    if wins.is_empty() {
        return 0.0;
    }
    wins.iter().filter(|&&w| w == 0).count() as f64 / wins.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub per_class_accuracy: Vec<f64>,
    pub noise_auc: Option<f64>,
    pub dead_key_fraction: Option<f64>,
    pub clean_weight_mass: Option<f64>,
    /// `top1` minus the uniform-weight baseline, when one was run.
    pub baseline_delta: Option<f64>,
}

impl EvalReport {
    pub fn from_run(report: &RunReport) -> Result<Self> {
        Ok(EvalReport {
            top1: report.test_top1.ok_or(Error::Empty("run has no test images"))?,
            per_class_accuracy: report.per_class_accuracy.clone().unwrap_or_default(),
            noise_auc: report.noise_auc,
            dead_key_fraction: report.dead_key_fraction,
            clean_weight_mass: report.clean_weight_mass,
            baseline_delta: None,
        })
    }
}

/// Variants of the ablation suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoDScore,
    NoRScore,
    NoAScore,
    NoSom,
    NoRoi,
    FixedP40,
    Uniform,
    Kmeans,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Full,
        Variant::NoDScore,
        Variant::NoRScore,
        Variant::NoAScore,
        Variant::NoSom,
        Variant::NoRoi,
        Variant::FixedP40,
        Variant::Uniform,
        Variant::Kmeans,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDScore => "no_d_score",
            Variant::NoRScore => "no_r_score",
            Variant::NoAScore => "no_a_score",
            Variant::NoSom => "no_som",
            Variant::NoRoi => "no_roi",
            Variant::FixedP40 => "fixed_p40",
            Variant::Uniform => "uniform",
            Variant::Kmeans => "kmeans",
        }
    }

    pub fn from_name(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown ablation {s:?}; expected one of {}", names.join(", ")))
            })
    }

    /// The training config for this variant; only config fields change.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoDScore => c.use_d_score = false,
            Variant::NoRScore => c.use_r_score = false,
            Variant::NoAScore => c.use_a_score = false,
            Variant::NoSom => c.use_som = false,
            Variant::NoRoi => c.use_proposals = false,
            Variant::FixedP40 => c.fixed_p = Some(0.40),
            Variant::Uniform => c.weighting = Weighting::Uniform,
            Variant::Kmeans => c.weighting = Weighting::Kmeans,
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub variant: Variant,
    pub seed: u64,
    pub run_id: String,
    pub report: EvalReport,
    /// Number of curriculum stages actually run.
    pub stages: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteTable {
    pub rows: Vec<SuiteRow>,
    /// Note on how the k-means variant was trained.
    pub kmeans_protocol: String,
}

pub const KMEANS_PROTOCOL: &str = "spherical k-means refit on bag features after warm-up and at every curriculum stage boundary";

impl SuiteTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,seed,top1,auc,dead_key_frac\n");
        for row in &self.rows {
            let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
            out.push_str(&format!(
                "{},{},{:.6},{},{}\n",
                row.variant,
                row.seed,
                row.report.top1,
                opt(row.report.noise_auc),
                opt(row.report.dead_key_fraction),
            ));
        }
        out
    }

    pub fn rows_for(&self, v: Variant) -> impl Iterator<Item = &SuiteRow> {
        self.rows.iter().filter(move |r| r.variant == v)
    }

    /// Mean test accuracy of a variant over all seeds in the table.
    pub fn mean_top1(&self, v: Variant) -> Option<f64> {
        mean(self.rows_for(v).map(|r| r.report.top1))
    }

    pub fn mean_auc(&self, v: Variant) -> Option<f64> {
        mean(self.rows_for(v).filter_map(|r| r.report.noise_auc))
    }

    pub fn mean_dead_keys(&self, v: Variant) -> Option<f64> {
        mean(self.rows_for(v).filter_map(|r| r.report.dead_key_fraction))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Runs the given variants with a shared seed; rows follow `variants` order.
pub fn run_variants(dataset: &Dataset, base: &TrainConfig, variants: &[Variant]) -> Result<SuiteTable> {
    let runs: Vec<(Variant, RunReport)> = variants
        .par_iter()
        .map(|&v| trainer::train(dataset, &v.apply(base)).map(|(_, r)| (v, r)))
        .collect::<Result<_>>()?;
    let baseline = runs
        .iter()
        .find(|(v, _)| *v == Variant::Uniform)
        .and_then(|(_, r)| r.test_top1);
    let rows = runs
        .into_iter()
        .map(|(variant, r)| {
            let mut report = EvalReport::from_run(&r)?;
            report.baseline_delta = baseline.map(|b| report.top1 - b);
            Ok(SuiteRow {
                variant,
                seed: base.seed,
                run_id: r.run_id.clone(),
                report,
                stages: r.p_trace.len(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(SuiteTable { rows, kmeans_protocol: KMEANS_PROTOCOL.into() })
}

/// All nine variants with the base config's seed.
pub fn run_suite(dataset: &Dataset, base: &TrainConfig) -> Result<SuiteTable> {
    run_variants(dataset, base, &Variant::ALL)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 0], &[1, 2, 3, 3]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 2]).is_err());
        assert_eq!(per_class_accuracy(&[0, 1, 1, 1], &[0, 0, 1, 1], 3).unwrap(), vec![0.5, 1.0, 0.0]);
    }

    fn flags(n: usize, rng: &mut ChaCha8Rng) -> Vec<NoiseFlag> {
        (0..n)
            .map(|_| match rng.random_range(0..3) {
                0 => NoiseFlag::Clean,
                1 => NoiseFlag::LabelNoise,
                _ => NoiseFlag::BackgroundNoise,
            })
            .collect()
    }

    /// Pairwise definition: P(clean > noisy) + P(tie) / 2.
    fn auc_oracle(scores: &[f64], flags: &[NoiseFlag]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, fi) in flags.iter().enumerate() {
            for (j, fj) in flags.iter().enumerate() {
                if fi.is_clean() && !fj.is_clean() {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = flags(300, &mut rng);
        assert_eq!(noise_auc(&vec![0.3; 300], &f).unwrap(), 0.5);
        let ind: Vec<f64> = f.iter().map(|x| if x.is_clean() { 1.0 } else { 0.0 }).collect();
        assert_eq!(noise_auc(&ind, &f).unwrap(), 1.0);
        assert!(noise_auc(&[1.0, 2.0], &[NoiseFlag::Clean, NoiseFlag::Clean]).is_err());

        let f = flags(2000, &mut rng);
        let s: Vec<f64> = (0..2000).map(|_| rng.random()).collect();
        let auc = noise_auc(&s, &f).unwrap();
        assert!((auc - 0.5).abs() < 0.05, "{auc}");
    }

    #[test]
    fn auc_matches_pairwise_oracle_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let f = flags(80, &mut rng);
            if f.iter().all(|x| x.is_clean()) || !f.iter().any(|x| x.is_clean()) {
                continue;
            }
            let s: Vec<f64> = (0..80).map(|_| rng.random_range(0..6) as f64).collect();
            assert!((noise_auc(&s, &f).unwrap() - auc_oracle(&s, &f)).abs() < 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn auc_invariant_under_monotone_maps(
            scores in proptest::collection::vec(0.0f64..10.0, 20),
            bits in proptest::collection::vec(proptest::bool::ANY, 20),
        ) {
            let f: Vec<NoiseFlag> = bits.iter().map(|&b| if b { NoiseFlag::Clean } else { NoiseFlag::BackgroundNoise }).collect();
            proptest::prop_assume!(bits.iter().any(|&b| b) && bits.iter().any(|&b| !b));
            let mapped: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() + 3.0).collect();
            let a = noise_auc(&scores, &f).unwrap();
            let b = noise_auc(&mapped, &f).unwrap();
            proptest::prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dead_keys() {
        assert_eq!(dead_key_fraction(&[0, 3, 0, 1]), 0.5);
        assert_eq!(dead_key_fraction(&[]), 0.0);
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(Variant::from_name(v.name()).unwrap(), v);
        }
        assert!(Variant::from_name("nope").is_err());
        let base = TrainConfig::default();
        assert_eq!(Variant::FixedP40.apply(&base).curriculum(), vec![0.4; 7]);
        assert_eq!(Variant::NoSom.apply(&base).effective_radius(), 0);
    }
}
