//! Instances, bags and datasets.
//!
//! An image and its region proposals form an [`ImageGroup`]. Groups of the
//! same class are partitioned into fixed-size [`Bag`]s of `n_g` images, so
//! every bag holds `n_b = n_g * (n_p + 1)` instances.

mod jsonl;
mod synth;

pub use jsonl::{ingest_jsonl, ingest_test_jsonl, write_jsonl, IngestOptions, Record};
pub use synth::{synth_generate, SynthConfig};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoiKind {
    Image,
    Proposal,
}

/// Ground-truth provenance of an instance. Only synthetic data carries it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NoiseFlag {
    Clean,
    LabelNoise,
    BackgroundNoise,
}

impl NoiseFlag {
    pub fn is_clean(self) -> bool {
        self == NoiseFlag::Clean
    }
}

/// One region of interest: a whole image or one of its proposals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub feature: Vec<f64>,
    pub kind: RoiKind,
    pub area: Option<f64>,
    pub parent: Option<String>,
    pub noise: Option<NoiseFlag>,
    /// `[x, y, w, h]`, only present for ingested real data.
    pub bbox: Option<[f64; 4]>,
}

impl Instance {
    pub fn is_image(&self) -> bool {
        self.kind == RoiKind::Image
    }
}

/// An image together with its region proposals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageGroup {
    pub label: usize,
    pub image: Instance,
    pub proposals: Vec<Instance>,
}

impl ImageGroup {
    /// Forces exactly `n_p` proposals: pads by repeating the largest-area
    /// proposal, truncates by dropping the smallest-area ones. Relative order
    /// of the kept proposals is preserved.
    pub fn with_proposal_count(&self, n_p: usize) -> Result<ImageGroup> {
        let mut out = self.clone();
        if n_p == 0 {
            out.proposals.clear();
            return Ok(out);
        }
        if self.proposals.is_empty() {
            return Err(Error::Config(format!(
                "image {} has no proposals but n_p = {n_p}",
                self.image.id
            )));
        }
        let area = |p: &Instance| p.area.unwrap_or(0.0);
        if out.proposals.len() > n_p {
            // stable: among equal areas the later one is dropped first
            let mut order: Vec<usize> = (0..out.proposals.len()).collect();
            order.sort_by(|&a, &b| {
                area(&out.proposals[b])
                    .total_cmp(&area(&out.proposals[a]))
                    .then(a.cmp(&b))
            });
            let mut keep = order[..n_p].to_vec();
            keep.sort_unstable();
            out.proposals = keep.into_iter().map(|i| self.proposals[i].clone()).collect();
        } else if out.proposals.len() < n_p {
            let largest = out
                .proposals
                .iter()
                .enumerate()
                .max_by(|(i, a), (j, b)| area(a).total_cmp(&area(b)).then(j.cmp(i)))
                .map(|(_, p)| p.clone())
                .expect("nonempty");
            while out.proposals.len() < n_p {
                out.proposals.push(largest.clone());
            }
        }
        Ok(out)
    }

    /// Image first, then proposals in stored order.
    pub fn instances(&self) -> impl Iterator<Item = &Instance> {
        std::iter::once(&self.image).chain(self.proposals.iter())
    }
}

/// A labelled group of `n_g` images and all of their proposals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bag {
    pub label: usize,
    pub instances: Vec<Instance>,
    pub weights: Vec<f64>,
    pub n_g: usize,
}

impl Bag {
    pub fn n_b(&self) -> usize {
        self.instances.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.instances.first().map_or(0, |i| i.feature.len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestImage {
    pub id: String,
    pub feature: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub groups: Vec<ImageGroup>,
    pub bags: Vec<Bag>,
    pub test_images: Vec<TestImage>,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub n_g: usize,
    pub n_p: usize,
    /// Generator config echo or source digest.
    pub metadata: serde_json::Value,
}

impl Dataset {
    /// Rebuilds the bag partition (e.g. with a new seed, or with `n_p = 0`
    /// for image-only bags).
    pub fn rebag(&self, n_g: usize, n_p: usize, seed: u64) -> Result<Vec<Bag>> {
        build_bags(&self.groups, self.num_classes, n_g, n_p, seed)
    }

    pub fn num_instances(&self) -> usize {
        self.bags.iter().map(Bag::n_b).sum()
    }

    pub fn check(&self) -> Result<()> {
        let mut per_class = vec![0usize; self.num_classes];
        for bag in &self.bags {
            if bag.label >= self.num_classes {
                return Err(Error::Config(format!(
                    "bag label {} outside [0, {})",
                    bag.label, self.num_classes
                )));
            }
            if bag.n_b() != bag.n_g * (self.n_p + 1) && bag.n_g == self.n_g {
                return Err(Error::Config(format!(
                    "bag of {} instances, expected {}",
                    bag.n_b(),
                    bag.n_g * (self.n_p + 1)
                )));
            }
            per_class[bag.label] += 1;
        }
        if let Some(c) = per_class.iter().position(|&n| n == 0) {
            return Err(Error::Config(format!("class {c} has no bags")));
        }
        Ok(())
    }
}

/// Partitions each class's images into bags of `n_g` images with exactly
/// `n_p` proposals each. Leftover images (count mod `n_g`) are dropped.
pub fn build_bags(
    groups: &[ImageGroup],
    num_classes: usize,
    n_g: usize,
    n_p: usize,
    seed: u64,
) -> Result<Vec<Bag>> {
    if n_g == 0 {
        return Err(Error::Config("n_g must be at least 1".into()));
    }
    let mut by_class: Vec<Vec<&ImageGroup>> = vec![Vec::new(); num_classes];
    for g in groups {
        if g.label >= num_classes {
            return Err(Error::Config(format!(
                "label {} outside [0, {num_classes})",
                g.label
            )));
        }
        by_class[g.label].push(g);
    }
    let short: Vec<usize> = by_class
        .iter()
        .enumerate()
        .filter(|(_, imgs)| imgs.len() < n_g)
        .map(|(c, _)| c)
        .collect();
    if !short.is_empty() {
        return Err(Error::ClassTooSmall {
            classes: short,
            need: n_g,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bags = Vec::new();
    for (label, imgs) in by_class.iter().enumerate() {
        let mut order: Vec<usize> = (0..imgs.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks_exact(n_g) {
            let mut instances = Vec::with_capacity(n_g * (n_p + 1));
            for &i in chunk {
                let g = imgs[i].with_proposal_count(n_p)?;
                instances.extend(g.instances().cloned());
            }
            let mut bag = Bag {
                label,
                instances,
                weights: Vec::new(),
                n_g,
            };
            bag.weights = init_weights(&bag);
            bags.push(bag);
        }
    }
    Ok(bags)
}

/// Initial ROI weights: uniform over images, zero on proposals.
pub fn init_weights(bag: &Bag) -> Vec<f64> {
    let n_img = bag.instances.iter().filter(|i| i.is_image()).count();
    let w = if n_img == 0 { 0.0 } else { 1.0 / n_img as f64 };
    bag.instances
        .iter()
        .map(|i| if i.is_image() { w } else { 0.0 })
        .collect()
}

/// Area score of instance `index` within `bag`: 1 for images, otherwise the
/// proposal's area over the largest sibling proposal area.
pub fn area_score(bag: &Bag, index: usize) -> Result<f64> {
    let inst = bag.instances.get(index).ok_or(Error::OutOfRange {
        index,
        len: bag.n_b(),
    })?;
    if inst.is_image() {
        return Ok(1.0);
    }
    let max = bag
        .instances
        .iter()
        .filter(|s| !s.is_image() && s.parent == inst.parent)
        .filter_map(|s| s.area)
        .fold(0.0_f64, f64::max);
    if max <= 0.0 {
        return Err(Error::DegenerateArea { id: inst.id.clone() });
    }
    Ok(inst.area.unwrap_or(0.0) / max)
}

/// Area scores for every instance of a bag, in instance order.
pub fn area_scores(bag: &Bag) -> Result<Vec<f64>> {
    let mut max_by_parent: std::collections::HashMap<Option<&str>, f64> =
        std::collections::HashMap::new();
    for s in bag.instances.iter().filter(|s| !s.is_image()) {
        let e = max_by_parent.entry(s.parent.as_deref()).or_insert(0.0);
        *e = e.max(s.area.unwrap_or(0.0));
    }
    bag.instances
        .iter()
        .map(|inst| {
            if inst.is_image() {
                return Ok(1.0);
            }
            let max = max_by_parent[&inst.parent.as_deref()];
            if max <= 0.0 {
                return Err(Error::DegenerateArea { id: inst.id.clone() });
            }
            Ok(inst.area.unwrap_or(0.0) / max)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(id: &str) -> Instance {
        Instance {
            id: id.into(),
            feature: vec![1.0, 0.0],
            kind: RoiKind::Image,
            area: None,
            parent: None,
            noise: None,
            bbox: None,
        }
    }

    fn proposal(id: &str, parent: &str, area: f64) -> Instance {
        Instance {
            id: id.into(),
            feature: vec![0.0, 1.0],
            kind: RoiKind::Proposal,
            area: Some(area),
            parent: Some(parent.into()),
            noise: None,
            bbox: None,
        }
    }

    fn group(label: usize, id: &str, areas: &[f64]) -> ImageGroup {
        ImageGroup {
            label,
            image: image(id),
            proposals: areas
                .iter()
                .enumerate()
                .map(|(k, &a)| proposal(&format!("{id}-p{k}"), id, a))
                .collect(),
        }
    }

    fn groups(classes: usize, per_class: usize, n_p: usize) -> Vec<ImageGroup> {
        let areas: Vec<f64> = (1..=n_p).map(|a| a as f64 * 100.0).collect();
        (0..classes)
            .flat_map(|c| (0..per_class).map(move |i| (c, i)))
            .map(|(c, i)| group(c, &format!("c{c}i{i}"), &areas))
            .collect()
    }

    #[test]
    fn bag_sizes() {
        let g = groups(2, 4, 20);
        let bags = build_bags(&g, 2, 2, 20, 0).unwrap();
        assert!(bags.iter().all(|b| b.n_b() == 42));

        let g = groups(2, 3, 2);
        let bags = build_bags(&g, 2, 3, 2, 0).unwrap();
        assert!(bags.iter().all(|b| b.n_b() == 9));

        let g = groups(2, 3, 0);
        let bags = build_bags(&g, 2, 1, 0, 0).unwrap();
        assert_eq!(bags.len(), 6);
        assert!(bags.iter().all(|b| b.n_b() == 1 && b.instances[0].is_image()));
    }

    #[test]
    fn leftovers_dropped_and_labels_homogeneous() {
        let g = groups(3, 5, 2);
        let bags = build_bags(&g, 3, 2, 2, 7).unwrap();
        assert_eq!(bags.len(), 6);
        for bag in &bags {
            let prefix = format!("c{}", bag.label);
            assert!(bag.instances.iter().all(|i| i.id.starts_with(&prefix)));
        }
    }

    #[test]
    fn small_class_is_an_error() {
        let mut g = groups(2, 4, 1);
        g.retain(|x| !(x.label == 1 && x.image.id != "c1i0"));
        match build_bags(&g, 2, 2, 1, 0) {
            Err(Error::ClassTooSmall { classes, need }) => {
                assert_eq!((classes, need), (vec![1], 2))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn partition_is_seeded() {
        let g = groups(2, 10, 1);
        let a = build_bags(&g, 2, 2, 1, 3).unwrap();
        let b = build_bags(&g, 2, 2, 1, 3).unwrap();
        let c = build_bags(&g, 2, 2, 1, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn pad_and_truncate_proposals() {
        let g = group(0, "a", &[300.0, 100.0, 500.0, 200.0]);
        let t = g.with_proposal_count(2).unwrap();
        let areas: Vec<f64> = t.proposals.iter().map(|p| p.area.unwrap()).collect();
        assert_eq!(areas, vec![300.0, 500.0]);

        let p = g.with_proposal_count(6).unwrap();
        let areas: Vec<f64> = p.proposals.iter().map(|p| p.area.unwrap()).collect();
        assert_eq!(areas, vec![300.0, 100.0, 500.0, 200.0, 500.0, 500.0]);
    }

    #[test]
    fn initial_weights() {
        let g = groups(1, 2, 20);
        let bags = build_bags(&g, 1, 2, 20, 0).unwrap();
        let w = init_weights(&bags[0]);
        for (inst, w) in bags[0].instances.iter().zip(&w) {
            assert_eq!(*w, if inst.is_image() { 0.5 } else { 0.0 });
        }
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let g = groups(1, 1, 3);
        let bags = build_bags(&g, 1, 1, 3, 0).unwrap();
        assert_eq!(init_weights(&bags[0])[0], 1.0);
    }

    #[test]
    fn area_scores_match_definition() {
        let g = group(0, "a", &[2500.0, 5000.0, 1000.0]);
        let bag = build_bags(&[g], 1, 1, 3, 0).unwrap().remove(0);
        let s = area_scores(&bag).unwrap();
        assert_eq!(s, vec![1.0, 0.5, 1.0, 0.2]);
        for i in 0..bag.n_b() {
            assert_eq!(area_score(&bag, i).unwrap(), s[i]);
        }
    }

    #[test]
    fn zero_area_is_degenerate() {
        let g = group(0, "a", &[0.0, 0.0]);
        let bag = build_bags(&[g], 1, 1, 2, 0).unwrap().remove(0);
        assert!(matches!(area_score(&bag, 1), Err(Error::DegenerateArea { .. })));
        assert!(area_scores(&bag).is_err());
        assert_eq!(area_score(&bag, 0).unwrap(), 1.0);
    }

    proptest::proptest! {
        #[test]
        fn area_score_scale_invariant(
            areas in proptest::collection::vec(1.0f64..1e4, 1..8),
            k in 0.01f64..100.0,
        ) {
            let a = build_bags(&[group(0, "a", &areas)], 1, 1, areas.len(), 0).unwrap();
            let scaled: Vec<f64> = areas.iter().map(|x| x * k).collect();
            let b = build_bags(&[group(0, "a", &scaled)], 1, 1, areas.len(), 0).unwrap();
            let sa = area_scores(&a[0]).unwrap();
            let sb = area_scores(&b[0]).unwrap();
            for (x, y) in sa.iter().zip(&sb) {
                proptest::prop_assert!((x - y).abs() < 1e-12);
                proptest::prop_assert!(*x > 0.0 && *x <= 1.0);
            }
        }
    }
}
