//! Optional tanh feature encoder followed by a softmax classification layer.
//!
//! Gradients are derived by hand; instance weights are constants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{argmax, dot};

/// Dense affine map `rows x cols`, weights row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Affine {
            rows,
            cols,
            weight: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    /// Gaussian init with std `1 / sqrt(cols)`, zero bias.
    pub fn random(rows: usize, cols: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (cols.max(1) as f64).sqrt()).expect("valid std");
        Affine {
            rows,
            cols,
            weight: (0..rows * cols).map(|_| normal.sample(&mut rng)).collect(),
            bias: vec![0.0; rows],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::LengthMismatch {
                expected: self.cols,
                got: x.len(),
            });
        }
        Ok(self
            .weight
            .chunks_exact(self.cols)
            .zip(&self.bias)
            .map(|(row, b)| dot(row, x) + b)
            .collect())
    }

    /// `W^T g`
    fn apply_transpose(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (row, gi) in self.weight.chunks_exact(self.cols).zip(g) {
            crate::linalg::axpy(*gi, row, &mut out);
        }
        out
    }

    fn accumulate_outer(&mut self, g: &[f64], x: &[f64]) {
        for (row, gi) in self.weight.chunks_exact_mut(self.cols).zip(g) {
            crate::linalg::axpy(*gi, x, row);
        }
        for (b, gi) in self.bias.iter_mut().zip(g) {
            *b += gi;
        }
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(self.bias.iter())
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }
}

/// Parameter-shaped container used for gradients and momentum buffers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub encoder: Option<Affine>,
    pub classifier: Affine,
}

impl Params {
    pub fn zeros_like(other: &Params) -> Params {
        Params {
            encoder: other.encoder.as_ref().map(|e| Affine::zeros(e.rows, e.cols)),
            classifier: Affine::zeros(other.classifier.rows, other.classifier.cols),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.encoder
            .iter()
            .flat_map(Affine::params)
            .chain(self.classifier.params())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.encoder
            .iter_mut()
            .flat_map(Affine::params_mut)
            .chain(self.classifier.params_mut())
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_shape(&self, other: &Params) -> bool {
        let shape = |a: &Affine| (a.rows, a.cols);
        self.encoder.as_ref().map(shape) == other.encoder.as_ref().map(shape)
            && shape(&self.classifier) == shape(&other.classifier)
    }
}

/// One bag as seen by the classifier: raw instance features and weights.
#[derive(Clone, Copy, Debug)]
pub struct BagInput<'a> {
    pub features: &'a [Vec<f64>],
    pub weights: &'a [f64],
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierState {
    pub params: Params,
    pub velocity: Params,
    pub lr: f64,
    pub momentum: f64,
}

impl ClassifierState {
    /// `encoder_dim = Some(d)` enables a `d_in -> d` tanh encoder.
    pub fn new(
        d_in: usize,
        encoder_dim: Option<usize>,
        num_classes: usize,
        lr: f64,
        momentum: f64,
        seed: u64,
    ) -> Self {
        let encoder = encoder_dim.map(|d| Affine::random(d, d_in, seed));
        let feat = encoder_dim.unwrap_or(d_in);
        let params = Params {
            encoder,
            classifier: Affine::zeros(num_classes, feat),
        };
        ClassifierState {
            velocity: Params::zeros_like(&params),
            params,
            lr,
            momentum,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.params.classifier.rows
    }

    pub fn input_dim(&self) -> usize {
        match &self.params.encoder {
            Some(e) => e.cols,
            None => self.params.classifier.cols,
        }
    }

    /// Identity without an encoder, otherwise `tanh(W_e x + b_e)`.
    pub fn encode(&self, raw: &[f64]) -> Result<Vec<f64>> {
        match &self.params.encoder {
            None => {
                if raw.len() != self.params.classifier.cols {
                    return Err(Error::LengthMismatch {
                        expected: self.params.classifier.cols,
                        got: raw.len(),
                    });
                }
                Ok(raw.to_vec())
            }
            Some(e) => Ok(e.apply(raw)?.into_iter().map(f64::tanh).collect()),
        }
    }

    pub fn logits(&self, feature: &[f64]) -> Result<Vec<f64>> {
        let z = self.params.classifier.apply(feature)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(z)
    }

    /// Softmax probabilities for an encoded (bag- or image-level) feature.
    pub fn classify(&self, feature: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(feature)?))
    }

    /// Class of an unencoded image feature, lowest index on ties.
    pub fn predict(&self, raw: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(&self.encode(raw)?)?))
    }

    /// Weighted sum of encoded instance features.
    pub fn bag_feature(&self, features: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
        if features.len() != weights.len() {
            return Err(Error::LengthMismatch {
                expected: features.len(),
                got: weights.len(),
            });
        }
        if !weights.iter().any(|&w| w != 0.0) {
            return Err(Error::ZeroWeights);
        }
        let dim = self.params.classifier.cols;
        let mut out = vec![0.0; dim];
        for (x, &w) in features.iter().zip(weights) {
            if w != 0.0 {
                crate::linalg::axpy(w, &self.encode(x)?, &mut out);
            }
        }
        Ok(out)
    }

    /// Mean cross-entropy over the batch and its exact gradient.
    pub fn loss_and_grads(&self, batch: &[BagInput<'_>]) -> Result<(f64, Params)> {
        if batch.is_empty() {
            return Err(Error::Empty("classifier batch"));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut grads = Params::zeros_like(&self.params);
        let mut loss = 0.0;
        for bag in batch {
            if bag.label >= self.num_classes() {
                return Err(Error::OutOfRange {
                    index: bag.label,
                    len: self.num_classes(),
                });
            }
            let xbar = self.bag_feature(bag.features, bag.weights)?;
            let logits = self.logits(&xbar)?;
            let lse = log_sum_exp(&logits);
            loss += lse - logits[bag.label];
            let mut g: Vec<f64> = logits.iter().map(|z| (z - lse).exp() * scale).collect();
            g[bag.label] -= scale;
            grads.classifier.accumulate_outer(&g, &xbar);

            if let (Some(enc), Some(genc)) = (&self.params.encoder, grads.encoder.as_mut()) {
                let gx = self.params.classifier.apply_transpose(&g);
                for (x, &w) in bag.features.iter().zip(bag.weights) {
                    if w == 0.0 {
                        continue;
                    }
                    let h: Vec<f64> = enc.apply(x)?.into_iter().map(f64::tanh).collect();
                    let gpre: Vec<f64> = gx
                        .iter()
                        .zip(&h)
                        .map(|(gi, hi)| w * gi * (1.0 - hi * hi))
                        .collect();
                    genc.accumulate_outer(&gpre, x);
                }
            }
        }
        Ok((loss * scale, grads))
    }

    /// Momentum SGD: `v = momentum * v + g; theta -= lr * v`.
    pub fn sgd_step(&mut self, grads: &Params) -> Result<()> {
        if !self.params.same_shape(grads) {
            return Err(Error::LengthMismatch {
                expected: self.params.len(),
                got: grads.len(),
            });
        }
        let (lr, mu) = (self.lr, self.momentum);
        for ((p, v), g) in self
            .params
            .iter_mut()
            .zip(self.velocity.iter_mut())
            .zip(grads.iter())
        {
            *v = mu * *v + g;
            *p -= lr * *v;
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("classifier parameters".into()));
        }
        Ok(())
    }
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|v| (v - lse).exp()).collect()
}

/// Serialized classifier with the run configuration echoed alongside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub model: ClassifierState,
    pub config: serde_json::Value,
}
