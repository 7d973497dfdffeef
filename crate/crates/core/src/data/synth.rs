//! Synthetic webly-noisy datasets with ground-truth noise flags.
//!
//! Each class `c` gets a random unit direction `mu_c`; a clean feature is
//! `class_separation * mu_c + N(0, I)`. A label-noise image is drawn from the
//! distribution of its class's confuser `(c + 1) mod C` and all of its
//! proposals are jittered copies of it. A clean image's proposals are either
//! background draws (`background_separation * mu_bg + N(0, I)`) or jittered
//! copies whose offset has norm about `0.3 * class_separation`.
//!
//! Proposal areas lie in `[1000, 10000]`. Object proposals are uniform there;
//! background areas are `1000 + 9000 * u^k` with `k = background_area_power`,
//! so `k = 1` makes every area uniform.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{build_bags, Dataset, ImageGroup, Instance, NoiseFlag, RoiKind, TestImage};
use crate::error::{Error, Result};

pub const PROPOSAL_JITTER: f64 = 0.3;
pub const AREA_RANGE: (f64, f64) = (1000.0, 10000.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub images_per_class: usize,
    pub test_images_per_class: usize,
    pub n_g: usize,
    pub n_p: usize,
    pub label_noise_rate: f64,
    pub background_proposal_rate: f64,
    pub class_separation: f64,
    /// Norm of the shared background center.
    pub background_separation: f64,
    pub background_area_power: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 10,
            feature_dim: 32,
            images_per_class: 100,
            test_images_per_class: 100,
            n_g: 2,
            n_p: 20,
            label_noise_rate: 0.25,
            background_proposal_rate: 0.5,
            class_separation: 4.0,
            background_separation: 2.0,
            background_area_power: 4.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.n_g < 1 {
            return bad("n_g must be at least 1");
        }
        if self.feature_dim < 1 {
            return bad("feature_dim must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.label_noise_rate) {
            return bad("label_noise_rate must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.background_proposal_rate) {
            return bad("background_proposal_rate must lie in [0, 1]");
        }
        if !(self.class_separation.is_finite() && self.class_separation >= 0.0) {
            return bad("class_separation must be finite and nonnegative");
        }
        if !(self.background_separation.is_finite() && self.background_separation >= 0.0) {
            return bad("background_separation must be finite and nonnegative");
        }
        if !(self.background_area_power.is_finite() && self.background_area_power > 0.0) {
            return bad("background_area_power must be finite and positive");
        }
        if self.images_per_class < self.n_g {
            return bad("images_per_class must be at least n_g");
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: SynthConfig =
            serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_direction(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, d);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn sample_around(rng: &mut ChaCha8Rng, center: &[f64], std: f64) -> Vec<f64> {
    center
        .iter()
        .map(|c| c + std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

pub fn confuser(class: usize, num_classes: usize) -> usize {
    (class + 1) % num_classes
}

/// Generates a train/test dataset. Deterministic in `cfg.seed`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let d = cfg.feature_dim;
    let c_n = cfg.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let centers: Vec<Vec<f64>> = (0..c_n)
        .map(|_| {
            unit_direction(&mut rng, d)
                .into_iter()
                .map(|x| x * cfg.class_separation)
                .collect()
        })
        .collect();
    let background: Vec<f64> = unit_direction(&mut rng, d)
        .into_iter()
        .map(|x| x * cfg.background_separation)
        .collect();
    let jitter = PROPOSAL_JITTER * cfg.class_separation / (d as f64).sqrt();

    let mut groups = Vec::with_capacity(c_n * cfg.images_per_class);
    for label in 0..c_n {
        for i in 0..cfg.images_per_class {
            let noisy = rng.random::<f64>() < cfg.label_noise_rate;
            let source = if noisy { confuser(label, c_n) } else { label };
            let image_flag = if noisy {
                NoiseFlag::LabelNoise
            } else {
                NoiseFlag::Clean
            };
            let id = format!("c{label}-i{i}");
            let feature = sample_around(&mut rng, &centers[source], 1.0);
            let proposals = (0..cfg.n_p)
                .map(|k| {
                    let bg = rng.random::<f64>() < cfg.background_proposal_rate;
                    let background_draw = bg && !noisy;
                    let (feat, flag) = if background_draw {
                        (
                            sample_around(&mut rng, &background, 1.0),
                            NoiseFlag::BackgroundNoise,
                        )
                    } else {
                        (sample_around(&mut rng, &feature, jitter), image_flag)
                    };
                    let u: f64 = rng.random();
                    let u = if background_draw { u.powf(cfg.background_area_power) } else { u };
                    let area = AREA_RANGE.0 + (AREA_RANGE.1 - AREA_RANGE.0) * u;
                    Instance {
                        id: format!("{id}-p{k}"),
                        feature: feat,
                        kind: RoiKind::Proposal,
                        area: Some(area),
                        parent: Some(id.clone()),
                        noise: Some(flag),
                        bbox: None,
                    }
                })
                .collect();
            groups.push(ImageGroup {
                label,
                image: Instance {
                    id,
                    feature,
                    kind: RoiKind::Image,
                    area: None,
                    parent: None,
                    noise: Some(image_flag),
                    bbox: None,
                },
                proposals,
            });
        }
    }

    let test_images = (0..c_n)
        .flat_map(|label| (0..cfg.test_images_per_class).map(move |i| (label, i)))
        .map(|(label, i)| TestImage {
            id: format!("test-c{label}-i{i}"),
            feature: sample_around(&mut rng, &centers[label], 1.0),
            label,
        })
        .collect();

    let bag_seed = rng.random::<u64>();
    let bags = build_bags(&groups, c_n, cfg.n_g, cfg.n_p, bag_seed)?;
    Ok(Dataset {
        groups,
        bags,
        test_images,
        num_classes: c_n,
        feature_dim: d,
        n_g: cfg.n_g,
        n_p: cfg.n_p,
        metadata: serde_json::json!({ "generator": cfg, "bag_seed": bag_seed }),
    })
}
