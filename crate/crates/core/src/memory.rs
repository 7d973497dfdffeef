//! Self-organizing key/value memory.
//!
//! Keys are cluster centres laid out on a `grid_w x grid_w` grid. Each key
//! slot `l` carries a discriminative column `D[:, l]` (category distribution
//! inside the cluster) and each category `y` a representative row `R[y, :]`
//! (cluster distribution of the category). All three are trained by
//! gradient ascent on cosine similarities; `D` columns and `R` rows are
//! projected back onto the probability simplex after every step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

/// Norms below this are treated as degenerate.
pub const NORM_EPS: f64 = 1e-12;

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    for n in [na, nb] {
        if !(n > NORM_EPS) {
            return Err(Error::DegenerateNorm { norm: n, eps: NORM_EPS });
        }
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Gradient of `cos(x, k)` with respect to `k`.
pub fn cosine_grad(x: &[f64], k: &[f64]) -> Result<Vec<f64>> {
    let c = cosine(x, k)?;
    let (nx, nk) = (norm(x), norm(k));
    Ok(x.iter()
        .zip(k)
        .map(|(xi, ki)| xi / (nx * nk) - c * ki / (nk * nk))
        .collect())
}

/// Manhattan distance between two slots on a square grid.
pub fn grid_geo(i: usize, j: usize, grid_w: usize) -> Result<usize> {
    let len = grid_w * grid_w;
    for idx in [i, j] {
        if idx >= len {
            return Err(Error::OutOfRange { index: idx, len });
        }
    }
    let (ri, ci) = (i / grid_w, i % grid_w);
    let (rj, cj) = (j / grid_w, j % grid_w);
    Ok(ri.abs_diff(rj) + ci.abs_diff(cj))
}

/// Slots within grid distance `radius` of `z`, ascending. Always contains `z`.
pub fn neighborhood(z: usize, radius: usize, grid_w: usize) -> Vec<usize> {
    let (rz, cz) = ((z / grid_w) as isize, (z % grid_w) as isize);
    let r = radius as isize;
    let w = grid_w as isize;
    let mut out = Vec::new();
    for row in (rz - r).max(0)..=(rz + r).min(w - 1) {
        let rem = r - (row - rz).abs();
        for col in (cz - rem).max(0)..=(cz + rem).min(w - 1) {
            out.push((row * w + col) as usize);
        }
    }
    out
}

/// Neighbourhood weight `1 / (1 + geo)`.
pub fn eta(geo: usize) -> f64 {
    1.0 / (1.0 + geo as f64)
}

/// Clamps negatives to zero and rescales to unit L1 norm.
pub(crate) fn project_simplex(v: &mut [f64]) -> Result<()> {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    let s: f64 = v.iter().sum();
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::NonFinite(format!("simplex projection of sum {s}")));
    }
    v.iter_mut().for_each(|x| *x /= s);
    Ok(())
}

/// One gradient-ascent step of `cos(e_target, v)` followed by projection.
fn simplex_cosine_step(v: &mut [f64], target: usize, lr: f64) -> Result<()> {
    let nv = norm(v);
    if !(nv > NORM_EPS) {
        return Err(Error::DegenerateNorm { norm: nv, eps: NORM_EPS });
    }
    let c = v[target] / nv;
    for (i, vi) in v.iter_mut().enumerate() {
        let e = if i == target { 1.0 } else { 0.0 };
        *vi += lr * (e / nv - c * *vi / (nv * nv));
    }
    project_simplex(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WinnerResult {
    pub index: usize,
    pub similarity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub grid_w: usize,
    pub radius: usize,
    pub lr_key: f64,
    pub lr_value: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            grid_w: 10,
            radius: 1,
            lr_key: 0.05,
            lr_value: 0.05,
        }
    }
}

/// Per-term value of the memory objective, summed over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryLoss {
    pub key: f64,
    pub d_value: f64,
    pub r_value: f64,
}

impl MemoryLoss {
    pub fn total(&self) -> f64 {
        self.key + self.d_value + self.r_value
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryState {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub config: MemoryConfig,
    /// `L` key columns of length `feature_dim`.
    pub keys: Vec<Vec<f64>>,
    /// `C x L`, row-major.
    pub d_values: Vec<f64>,
    /// `C x L`, row-major.
    pub r_values: Vec<f64>,
}

impl MemoryState {
    /// Random unit keys, uniform value slots.
    pub fn new(feature_dim: usize, num_classes: usize, config: MemoryConfig, seed: u64) -> Result<Self> {
        if config.grid_w == 0 || feature_dim == 0 || num_classes == 0 {
            return Err(Error::Config("memory dimensions must be positive".into()));
        }
        let slots = config.grid_w * config.grid_w;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keys = (0..slots)
            .map(|_| loop {
                let v: Vec<f64> = (0..feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = norm(&v);
                if n > 1e-6 {
                    break v.into_iter().map(|x| x / n).collect();
                }
            })
            .collect();
        Ok(MemoryState {
            feature_dim,
            num_classes,
            config,
            keys,
            d_values: vec![1.0 / num_classes as f64; num_classes * slots],
            r_values: vec![1.0 / slots as f64; num_classes * slots],
        })
    }

    pub fn from_parts(
        config: MemoryConfig,
        keys: Vec<Vec<f64>>,
        d_values: Vec<f64>,
        r_values: Vec<f64>,
        num_classes: usize,
    ) -> Result<Self> {
        let slots = config.grid_w * config.grid_w;
        if keys.len() != slots {
            return Err(Error::LengthMismatch { expected: slots, got: keys.len() });
        }
        let feature_dim = keys.first().map_or(0, Vec::len);
        if let Some(k) = keys.iter().find(|k| k.len() != feature_dim) {
            return Err(Error::LengthMismatch { expected: feature_dim, got: k.len() });
        }
        for m in [&d_values, &r_values] {
            if m.len() != num_classes * slots {
                return Err(Error::LengthMismatch { expected: num_classes * slots, got: m.len() });
            }
        }
        Ok(MemoryState { feature_dim, num_classes, config, keys, d_values, r_values })
    }

    pub fn slots(&self) -> usize {
        self.keys.len()
    }

    pub fn grid_w(&self) -> usize {
        self.config.grid_w
    }

    pub fn d(&self, y: usize, l: usize) -> f64 {
        self.d_values[y * self.slots() + l]
    }

    pub fn r(&self, y: usize, l: usize) -> f64 {
        self.r_values[y * self.slots() + l]
    }

    pub fn d_column(&self, l: usize) -> Vec<f64> {
        (0..self.num_classes).map(|y| self.d(y, l)).collect()
    }

    pub fn r_row(&self, y: usize) -> &[f64] {
        let l = self.slots();
        &self.r_values[y * l..(y + 1) * l]
    }

    /// `s[y, z] = d[y, z] * r[y, z]`.
    pub fn prototypical_score(&self, y: usize, z: usize) -> f64 {
        self.d(y, z) * self.r(y, z)
    }

    /// Key with the largest cosine to `x`; ties go to the smallest index.
    pub fn winner(&self, x: &[f64]) -> Result<WinnerResult> {
        let mut best = WinnerResult { index: 0, similarity: f64::NEG_INFINITY };
        for (l, k) in self.keys.iter().enumerate() {
            let c = cosine(x, k)?;
            if c > best.similarity {
                best = WinnerResult { index: l, similarity: c };
            }
        }
        Ok(best)
    }

    /// Normalized copy of the keys for repeated read-only winner searches.
    pub fn key_index(&self) -> KeyIndex {
        KeyIndex {
            unit: self
                .keys
                .iter()
                .map(|k| {
                    let n = norm(k);
                    k.iter().map(|x| x / n).collect()
                })
                .collect(),
        }
    }

    /// Moves every key in the winner's neighbourhood towards `x` along the
    /// cosine gradient, scaled by `lr_key * eta`.
    pub fn som_key_step(&mut self, x: &[f64], z: usize) -> Result<()> {
        let gw = self.grid_w();
        let lr = self.config.lr_key;
        for i in neighborhood(z, self.config.radius, gw) {
            let w = eta(grid_geo(z, i, gw)?);
            let g = cosine_grad(x, &self.keys[i])?;
            crate::linalg::axpy(lr * w, &g, &mut self.keys[i]);
        }
        Ok(())
    }

    /// Pushes column `D[:, z]` towards the one-hot label `y`.
    pub fn d_value_step(&mut self, y: usize, z: usize) -> Result<()> {
        self.check_indices(y, z)?;
        let mut col = self.d_column(z);
        simplex_cosine_step(&mut col, y, self.config.lr_value)?;
        let l = self.slots();
        for (c, v) in col.into_iter().enumerate() {
            self.d_values[c * l + z] = v;
        }
        Ok(())
    }

    /// Pushes row `R[y, :]` towards the one-hot cluster indicator `z`.
    pub fn r_value_step(&mut self, z: usize, y: usize) -> Result<()> {
        self.check_indices(y, z)?;
        let l = self.slots();
        let lr = self.config.lr_value;
        simplex_cosine_step(&mut self.r_values[y * l..(y + 1) * l], z, lr)
    }

    /// Winner search followed by the key, d-value and r-value steps.
    pub fn update(&mut self, x: &[f64], y: usize) -> Result<WinnerResult> {
        let w = self.winner(x)?;
        self.som_key_step(x, w.index)?;
        self.d_value_step(y, w.index)?;
        self.r_value_step(w.index, y)?;
        Ok(w)
    }

    /// Memory objective over `(feature, label)` pairs (monitoring only).
    pub fn memory_loss<'a>(&self, batch: impl IntoIterator<Item = (&'a [f64], usize)>) -> Result<MemoryLoss> {
        let gw = self.grid_w();
        let mut loss = MemoryLoss::default();
        for (x, y) in batch {
            let z = self.winner(x)?.index;
            for i in neighborhood(z, self.config.radius, gw) {
                loss.key -= eta(grid_geo(z, i, gw)?) * cosine(x, &self.keys[i])?;
            }
            let col = self.d_column(z);
            loss.d_value -= col[y] / norm(&col);
            let row = self.r_row(y);
            loss.r_value -= row[z] / norm(row);
        }
        Ok(loss)
    }

    /// Checks the simplex constraints and key non-degeneracy.
    pub fn check_invariants(&self, tol: f64) -> Result<()> {
        let l = self.slots();
        for z in 0..l {
            let col = self.d_column(z);
            check_distribution(&col, tol).map_err(|m| Error::NonFinite(format!("D column {z}: {m}")))?;
        }
        for y in 0..self.num_classes {
            check_distribution(self.r_row(y), tol).map_err(|m| Error::NonFinite(format!("R row {y}: {m}")))?;
        }
        if let Some(i) = self.keys.iter().position(|k| !(norm(k) > NORM_EPS)) {
            return Err(Error::NonFinite(format!("key {i} is degenerate")));
        }
        Ok(())
    }

    fn check_indices(&self, y: usize, z: usize) -> Result<()> {
        if y >= self.num_classes {
            return Err(Error::OutOfRange { index: y, len: self.num_classes });
        }
        if z >= self.slots() {
            return Err(Error::OutOfRange { index: z, len: self.slots() });
        }
        Ok(())
    }

    pub fn snapshot(&self) -> MemorySnapshot {
        MemorySnapshot {
            grid_w: self.grid_w(),
            radius: self.config.radius,
            lr_key: self.config.lr_key,
            lr_value: self.config.lr_value,
            feature_dim: self.feature_dim,
            num_classes: self.num_classes,
            keys: self.keys.iter().flatten().copied().collect(),
            d_values: self.d_values.clone(),
            r_values: self.r_values.clone(),
        }
    }

    pub fn from_snapshot(s: &MemorySnapshot) -> Result<Self> {
        if s.feature_dim == 0 || s.keys.len() != s.feature_dim * s.grid_w * s.grid_w {
            return Err(Error::LengthMismatch {
                expected: s.feature_dim * s.grid_w * s.grid_w,
                got: s.keys.len(),
            });
        }
        let config = MemoryConfig {
            grid_w: s.grid_w,
            radius: s.radius,
            lr_key: s.lr_key,
            lr_value: s.lr_value,
        };
        let keys = s.keys.chunks(s.feature_dim).map(<[f64]>::to_vec).collect();
        Self::from_parts(config, keys, s.d_values.clone(), s.r_values.clone(), s.num_classes)
    }
}

fn check_distribution(v: &[f64], tol: f64) -> std::result::Result<(), String> {
    if let Some(x) = v.iter().find(|x| !(**x >= 0.0)) {
        return Err(format!("entry {x} is negative or NaN"));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > tol {
        return Err(format!("sums to {s}"));
    }
    Ok(())
}

/// Memory snapshot file: `K` column-major (`feature_dim` entries per slot),
/// `D` and `R` row-major `C x L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorySnapshot {
    pub grid_w: usize,
    pub radius: usize,
    pub lr_key: f64,
    pub lr_value: f64,
    pub feature_dim: usize,
    pub num_classes: usize,
    #[serde(rename = "K")]
    pub keys: Vec<f64>,
    #[serde(rename = "D")]
    pub d_values: Vec<f64>,
    #[serde(rename = "R")]
    pub r_values: Vec<f64>,
}

/// Unit-normalized keys for read-only winner searches.
#[derive(Clone, Debug)]
pub struct KeyIndex {
    unit: Vec<Vec<f64>>,
}

impl KeyIndex {
    pub fn winner(&self, x: &[f64]) -> Result<WinnerResult> {
        let nx = norm(x);
        if !(nx > NORM_EPS) {
            return Err(Error::DegenerateNorm { norm: nx, eps: NORM_EPS });
        }
        let mut best = WinnerResult { index: 0, similarity: f64::NEG_INFINITY };
        for (l, k) in self.unit.iter().enumerate() {
            let c = dot(x, k);
            if c > best.similarity {
                best = WinnerResult { index: l, similarity: c };
            }
        }
        best.similarity = (best.similarity / nx).clamp(-1.0, 1.0);
        Ok(best)
    }

    pub fn winners(&self, xs: &[Vec<f64>]) -> Result<Vec<WinnerResult>> {
        xs.par_iter().map(|x| self.winner(x)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg(grid_w: usize, radius: usize) -> MemoryConfig {
        MemoryConfig { grid_w, radius, lr_key: 0.05, lr_value: 0.05 }
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3, -2.0, 5.0];
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::DegenerateNorm { .. })));
    }

    #[test]
    fn winner_examples() {
        let mut m = MemoryState::new(2, 2, cfg(1, 0), 0).unwrap();
        m.keys = vec![vec![1.0, 0.0]];
        let w = m.winner(&[0.0, 1.0]).unwrap();
        assert_eq!(w.index, 0);

        let mut m = MemoryState::new(2, 2, cfg(2, 0), 0).unwrap();
        m.keys = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]];
        let w = m.winner(&[0.0, 1.0]).unwrap();
        assert_eq!(w.index, 1);
        assert!((w.similarity - 1.0).abs() < 1e-12);

        m.keys = vec![vec![1.0, 1.0]; 4];
        assert_eq!(m.winner(&[3.0, -1.0]).unwrap().index, 0);
        assert_eq!(m.key_index().winner(&[3.0, -1.0]).unwrap().index, 0);
    }

    #[test]
    fn winner_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = MemoryState::new(6, 3, cfg(5, 1), 9).unwrap();
        let idx = m.key_index();
        for _ in 0..200 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            // brute force with independently computed cosines
            let sims: Vec<f64> = m
                .keys
                .iter()
                .map(|k| {
                    let d: f64 = x.iter().zip(k).map(|(a, b)| a * b).sum();
                    d / (x.iter().map(|a| a * a).sum::<f64>().sqrt() * k.iter().map(|a| a * a).sum::<f64>().sqrt())
                })
                .collect();
            let mut best = 0;
            for l in 1..sims.len() {
                if sims[l] > sims[best] {
                    best = l;
                }
            }
            assert_eq!(m.winner(&x).unwrap().index, best);
            assert_eq!(idx.winner(&x).unwrap().index, best);
            assert!((m.winner(&x).unwrap().similarity - sims[best]).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_geometry() {
        assert_eq!(grid_geo(5, 5, 4).unwrap(), 0);
        // (0,0) and (1,2)
        assert_eq!(grid_geo(0, 6, 4).unwrap(), 3);
        for i in 0..16 {
            for j in 0..16 {
                assert_eq!(grid_geo(i, j, 4).unwrap(), grid_geo(j, i, 4).unwrap());
            }
        }
        assert!(grid_geo(16, 0, 4).is_err());

        assert_eq!(neighborhood(5, 0, 4), vec![5]);
        assert_eq!(neighborhood(5, 1, 4), vec![1, 4, 5, 6, 9]);
        assert_eq!(neighborhood(0, 1, 4), vec![0, 1, 4]);
        assert_eq!(neighborhood(15, 1, 4).len(), 3);
        for z in 0..16 {
            for r in 0..4 {
                let n = neighborhood(z, r, 4);
                let brute: Vec<usize> = (0..16).filter(|&i| grid_geo(z, i, 4).unwrap() <= r).collect();
                assert_eq!(n, brute);
            }
        }
    }

    #[test]
    fn key_step_increases_cosine_and_respects_neighbourhood() {
        let mut m = MemoryState::new(4, 2, cfg(3, 0), 1).unwrap();
        let x = [1.0, 2.0, -0.5, 0.3];
        let z = m.winner(&x).unwrap().index;
        let before = m.keys.clone();
        let c0 = cosine(&x, &m.keys[z]).unwrap();
        m.som_key_step(&x, z).unwrap();
        assert!(cosine(&x, &m.keys[z]).unwrap() > c0);
        for l in 0..9 {
            assert_eq!(m.keys[l] == before[l], l != z);
        }

        let mut m = MemoryState::new(4, 2, cfg(3, 1), 1).unwrap();
        let before = m.keys.clone();
        m.som_key_step(&x, 4).unwrap();
        let changed: Vec<usize> = (0..9).filter(|&l| m.keys[l] != before[l]).collect();
        assert_eq!(changed, vec![1, 3, 4, 5, 7]);
    }

    #[test]
    fn cosine_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = cosine_grad(&x, &k).unwrap();
            let h = 1e-6;
            for i in 0..5 {
                let mut kp = k.clone();
                kp[i] += h;
                let mut km = k.clone();
                km[i] -= h;
                let fd = (cosine(&x, &kp).unwrap() - cosine(&x, &km).unwrap()) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-5 * fd.abs().max(1e-3), "{fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn d_value_fixed_point_and_frequency() {
        let mut m = MemoryState::new(2, 2, cfg(1, 0), 0).unwrap();
        m.d_values = vec![1.0, 0.0];
        m.d_value_step(0, 0).unwrap();
        assert!((m.d(0, 0) - 1.0).abs() < 1e-9 && m.d(1, 0).abs() < 1e-9);

        // stream A, A, B with decaying step sizes
        let mut m = MemoryState::new(2, 2, cfg(1, 0), 0).unwrap();
        let labels = [0usize, 0, 1];
        let mut t = 0usize;
        for _ in 0..3000 {
            for &y in &labels {
                m.config.lr_value = 0.5 / (1.0 + t as f64 / 30.0);
                m.d_value_step(y, 0).unwrap();
                t += 1;
            }
        }
        assert!((m.d(0, 0) - 2.0 / 3.0).abs() < 0.05, "{}", m.d(0, 0));
        assert!((m.d(1, 0) - 1.0 / 3.0).abs() < 0.05);
    }

    #[test]
    fn r_value_fixed_point_and_frequency() {
        let mut m = MemoryState::new(2, 2, cfg(3, 0), 0).unwrap();
        let mut row = vec![0.0; 9];
        row[4] = 1.0;
        m.r_values[..9].copy_from_slice(&row);
        m.r_value_step(4, 0).unwrap();
        for (a, b) in m.r_row(0).iter().zip(&row) {
            assert!((a - b).abs() < 1e-9);
        }

        let mut m = MemoryState::new(2, 2, cfg(3, 0), 0).unwrap();
        let clusters = [0usize, 0, 0, 5];
        let mut t = 0usize;
        for _ in 0..2000 {
            for &z in &clusters {
                m.config.lr_value = 0.5 / (1.0 + t as f64 / 30.0);
                m.r_value_step(z, 1).unwrap();
                t += 1;
            }
        }
        let r = m.r_row(1);
        assert!((r[0] - 0.75).abs() < 0.05 && (r[5] - 0.25).abs() < 0.05, "{r:?}");
        // other row untouched
        assert!(m.r_row(0).iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-12));
    }

    #[test]
    fn only_target_slice_changes() {
        let mut m = MemoryState::new(3, 3, cfg(2, 1), 0).unwrap();
        let d0 = m.d_values.clone();
        m.d_value_step(2, 1).unwrap();
        for y in 0..3 {
            for l in 0..4 {
                if l != 1 {
                    assert_eq!(m.d(y, l), d0[y * 4 + l]);
                }
            }
        }
    }

    #[test]
    fn prototypical_score_is_elementwise_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = MemoryState::new(3, 4, cfg(3, 1), 0).unwrap();
        for _ in 0..200 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            m.update(&x, rng.random_range(0..4)).unwrap();
        }
        let s: Vec<f64> = m.d_values.iter().zip(&m.r_values).map(|(d, r)| d * r).collect();
        for y in 0..4 {
            for z in 0..9 {
                assert_eq!(m.prototypical_score(y, z), s[y * 9 + z]);
                assert!((0.0..=1.0).contains(&s[y * 9 + z]));
            }
        }
        m.d_values = vec![0.0; 36];
        m.d_values[0] = 1.0;
        m.r_values[0] = 0.25;
        assert_eq!(m.prototypical_score(0, 0), 0.25);
        assert_eq!(m.prototypical_score(1, 0), 0.0);
    }

    #[test]
    fn memory_loss_terms() {
        // converged toy state: 2 classes, keys on the class axes
        let keys = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![-1.0, 1.0]];
        let d = vec![1.0, 0.0, 0.5, 0.5, 0.0, 1.0, 0.5, 0.5];
        let r = vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let m = MemoryState::from_parts(cfg(2, 0), keys.clone(), d.clone(), r.clone(), 2).unwrap();
        let a = [2.0, 0.0];
        let b = [0.0, 3.0];
        let loss = m.memory_loss([(&a[..], 0), (&b[..], 1)]).unwrap();
        assert!((loss.total() + 6.0).abs() < 1e-9);

        // radius 1: slot 0 neighbours are 1 and 2 at distance 1
        let m = MemoryState::from_parts(cfg(2, 1), keys, d, r, 2).unwrap();
        let loss = m.memory_loss([(&a[..], 0)]).unwrap();
        let expected_key = -(1.0 + 0.5 * 0.0 + 0.5 * std::f64::consts::FRAC_1_SQRT_2);
        assert!((loss.key - expected_key).abs() < 1e-12);
        assert!((loss.d_value + 1.0).abs() < 1e-12);
        assert!((loss.r_value + 1.0).abs() < 1e-12);

        // off-target single item: each term against its own oracle
        let x = [1.0, 0.2];
        let z = m.winner(&x).unwrap().index;
        let loss = m.memory_loss([(&x[..], 1)]).unwrap();
        let dz = m.d_column(z);
        let dz_norm = (dz[0] * dz[0] + dz[1] * dz[1]).sqrt();
        assert!((loss.d_value + dz[1] / dz_norm).abs() < 1e-12);
        let ry = m.r_row(1);
        assert!((loss.r_value + ry[z] / norm(ry)).abs() < 1e-12);
    }

    #[test]
    fn memory_loss_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = MemoryState::new(4, 2, cfg(3, 1), 4).unwrap();
        let batch: Vec<(Vec<f64>, usize)> = (0..10)
            .map(|i| {
                let y = i % 2;
                let mut x: Vec<f64> = (0..4).map(|_| rng.random_range(-0.3..0.3)).collect();
                x[y] += 2.0;
                (x, y)
            })
            .collect();
        fn view(b: &[(Vec<f64>, usize)]) -> Vec<(&[f64], usize)> {
            b.iter().map(|(x, y)| (x.as_slice(), *y)).collect()
        }
        let start = m.memory_loss(view(&batch)).unwrap().total();
        for _ in 0..100 {
            for (x, y) in &batch {
                m.update(x, *y).unwrap();
            }
        }
        let end = m.memory_loss(view(&batch)).unwrap().total();
        assert!(end < start, "{end} !< {start}");
    }

    #[test]
    fn snapshot_roundtrip() {
        let m = MemoryState::new(3, 2, cfg(2, 1), 8).unwrap();
        let s = serde_json::to_string(&m.snapshot()).unwrap();
        let back = MemoryState::from_snapshot(&serde_json::from_str(&s).unwrap()).unwrap();
        assert_eq!(m, back);
    }

    proptest::proptest! {
        #[test]
        fn simplex_holds_after_any_step(
            seed in 0u64..1000,
            steps in proptest::collection::vec((0usize..3, 0usize..9, 0.001f64..2.0), 1..60),
        ) {
            let mut m = MemoryState::new(2, 3, cfg(3, 1), seed).unwrap();
            for (y, z, lr) in steps {
                m.config.lr_value = lr;
                m.d_value_step(y, z).unwrap();
                m.r_value_step(z, y).unwrap();
                proptest::prop_assert!(m.check_invariants(1e-9).is_ok());
            }
        }

        #[test]
        fn winner_scale_invariant(
            x in proptest::collection::vec(-5.0f64..5.0, 4),
            alpha in 1e-3f64..1e3,
        ) {
            proptest::prop_assume!(norm(&x) > 1e-3);
            let m = MemoryState::new(4, 2, cfg(4, 1), 1).unwrap();
            let scaled: Vec<f64> = x.iter().map(|v| v * alpha).collect();
            proptest::prop_assert_eq!(m.winner(&x).unwrap().index, m.winner(&scaled).unwrap().index);
        }
    }
}
