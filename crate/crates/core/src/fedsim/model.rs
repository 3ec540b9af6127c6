//! Small classifiers with hand-written gradients.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datagen::ClientDataset;
use crate::error::{Error, Result};
use crate::rng::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    /// Multinomial logistic regression.
    #[default]
    Logistic,
    /// One hidden ReLU layer.
    Mlp { hidden: usize },
}

/// Flat parameter vector with its layout.
///
/// Logistic layout: `W (Y×d)` row-major then `b (Y)`.
/// MLP layout: `W1 (h×d)`, `b1 (h)`, `W2 (Y×h)`, `b2 (Y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub kind: ModelKind,
    pub dim: usize,
    pub num_classes: usize,
    pub weights: Vec<f64>,
    /// Coefficient of `(l2/2)·‖w‖²` added to the loss.
    pub l2: f64,
}

pub fn num_params(kind: ModelKind, dim: usize, num_classes: usize) -> usize {
    match kind {
        ModelKind::Logistic => num_classes * dim + num_classes,
        ModelKind::Mlp { hidden } => hidden * dim + hidden + num_classes * hidden + num_classes,
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

impl Model {
    /// Zero-initialized logistic regression.
    pub fn logistic(dim: usize, num_classes: usize, l2: f64) -> Self {
        Self {
            kind: ModelKind::Logistic,
            dim,
            num_classes,
            weights: vec![0.0; num_params(ModelKind::Logistic, dim, num_classes)],
            l2,
        }
    }

    /// Logistic regression starts at zero; the MLP gets a seeded He-style
    /// initialization since zero weights never break symmetry.
    pub fn init(kind: ModelKind, dim: usize, num_classes: usize, l2: f64, seed: u64) -> Self {
        let mut m = Self {
            kind,
            dim,
            num_classes,
            weights: vec![0.0; num_params(kind, dim, num_classes)],
            l2,
        };
        if let ModelKind::Mlp { hidden } = kind {
            let mut rng = rng_for(seed, &[0x1A17]);
            let n1 = Normal::new(0.0, (2.0 / dim as f64).sqrt()).unwrap();
            let n2 = Normal::new(0.0, (2.0 / hidden as f64).sqrt()).unwrap();
            let (w1, rest) = m.weights.split_at_mut(hidden * dim);
            for w in w1 {
                *w = n1.sample(&mut rng);
            }
            let w2 = &mut rest[hidden..hidden + num_classes * hidden];
            for w in w2 {
                *w = n2.sample(&mut rng);
            }
        }
        m
    }

    pub fn num_params(&self) -> usize {
        self.weights.len()
    }

    /// Size of the model upload/broadcast with 32-bit parameters.
    pub fn size_bits(&self) -> f64 {
        32.0 * self.num_params() as f64
    }

    pub fn is_convex(&self) -> bool {
        matches!(self.kind, ModelKind::Logistic)
    }

    /// Class probabilities for one sample. `hidden` is scratch for the MLP.
    fn forward(&self, x: &[f64], probs: &mut [f64], hidden: &mut Vec<f64>) {
        let (d, y) = (self.dim, self.num_classes);
        match self.kind {
            ModelKind::Logistic => {
                let (w, b) = self.weights.split_at(y * d);
                for c in 0..y {
                    let row = &w[c * d..(c + 1) * d];
                    probs[c] = b[c] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            ModelKind::Mlp { hidden: h } => {
                let (w1, rest) = self.weights.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(y * h);
                hidden.clear();
                for j in 0..h {
                    let row = &w1[j * d..(j + 1) * d];
                    let a = b1[j] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                    hidden.push(a.max(0.0));
                }
                for c in 0..y {
                    let row = &w2[c * h..(c + 1) * h];
                    probs[c] = b2[c] + row.iter().zip(hidden.iter()).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        softmax_in_place(probs);
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut probs = vec![0.0; self.num_classes];
        let mut hidden = Vec::new();
        self.forward(x, &mut probs, &mut hidden);
        probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (c, &p)| if p > best.1 { (c, p) } else { best })
            .0
    }

    fn regularizer(&self) -> f64 {
        0.5 * self.l2 * self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    /// Mean cross-entropy over `indices` plus the L2 term. Writes the
    /// gradient into `grad` when given.
    pub fn loss_and_grad(
        &self,
        data: &ClientDataset,
        indices: &[usize],
        mut grad: Option<&mut [f64]>,
    ) -> f64 {
        let (d, y) = (self.dim, self.num_classes);
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut probs = vec![0.0; y];
        let mut hidden = Vec::new();
        let mut loss = 0.0;
        let scale = 1.0 / indices.len().max(1) as f64;
        for &i in indices {
            let x = data.feature(i);
            let label = data.labels[i];
            self.forward(x, &mut probs, &mut hidden);
            loss -= probs[label].max(1e-300).ln();
            let Some(g) = grad.as_deref_mut() else { continue };
            probs[label] -= 1.0;
            match self.kind {
                ModelKind::Logistic => {
                    let (gw, gb) = g.split_at_mut(y * d);
                    for c in 0..y {
                        let delta = probs[c] * scale;
                        gb[c] += delta;
                        for (gv, xv) in gw[c * d..(c + 1) * d].iter_mut().zip(x) {
                            *gv += delta * xv;
                        }
                    }
                }
                ModelKind::Mlp { hidden: h } => {
                    let w2 = &self.weights[h * d + h..h * d + h + y * h];
                    let (gw1, rest) = g.split_at_mut(h * d);
                    let (gb1, rest) = rest.split_at_mut(h);
                    let (gw2, gb2) = rest.split_at_mut(y * h);
                    let mut back = vec![0.0; h];
                    for c in 0..y {
                        let delta = probs[c] * scale;
                        gb2[c] += delta;
                        for j in 0..h {
                            gw2[c * h + j] += delta * hidden[j];
                            back[j] += delta * w2[c * h + j];
                        }
                    }
                    for j in 0..h {
                        if hidden[j] <= 0.0 {
                            continue;
                        }
                        gb1[j] += back[j];
                        for (gv, xv) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                            *gv += back[j] * xv;
                        }
                    }
                }
            }
        }
        if let Some(g) = grad {
            for (gv, w) in g.iter_mut().zip(&self.weights) {
                *gv += self.l2 * w;
            }
        }
        loss * scale + self.regularizer()
    }

    pub fn mean_loss(&self, data: &ClientDataset) -> f64 {
        let idx: Vec<usize> = (0..data.len()).collect();
        self.loss_and_grad(data, &idx, None)
    }

    pub fn full_gradient(&self, data: &ClientDataset) -> (f64, Vec<f64>) {
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut g = vec![0.0; self.num_params()];
        let loss = self.loss_and_grad(data, &idx, Some(&mut g));
        (loss, g)
    }

    pub fn accuracy(&self, data: &ClientDataset) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let mut probs = vec![0.0; self.num_classes];
        let mut hidden = Vec::new();
        let mut correct = 0usize;
        for i in 0..data.len() {
            self.forward(data.feature(i), &mut probs, &mut hidden);
            let best = probs
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (c, &p)| if p > b.1 { (c, p) } else { b })
                .0;
            correct += usize::from(best == data.labels[i]);
        }
        correct as f64 / data.len() as f64
    }

    /// `w ← w − η·g`, failing on non-finite results.
    pub fn step(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        for (w, g) in self.weights.iter_mut().zip(grad) {
            *w -= lr * g;
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite weights after a step with learning rate {lr}"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ClientDataset {
        ClientDataset::new(2, 3, vec![1.0, 2.0, -1.0, 0.5, 0.0, -2.0], vec![0, 2, 1]).unwrap()
    }

    #[test]
    fn single_sample_gradient_is_closed_form() {
        let data = ClientDataset::new(2, 3, vec![1.0, -2.0], vec![1]).unwrap();
        let mut m = Model::logistic(2, 3, 0.0);
        m.weights = vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.01, 0.02, 0.03];
        let x = [1.0, -2.0];
        let mut z: Vec<f64> = (0..3)
            .map(|c| m.weights[6 + c] + m.weights[2 * c] * x[0] + m.weights[2 * c + 1] * x[1])
            .collect();
        softmax_in_place(&mut z);
        let lr = 0.1;
        let (_, g) = m.full_gradient(&data);
        let mut next = m.clone();
        next.step(&g, lr).unwrap();
        for c in 0..3 {
            let e = f64::from(c == 1) - z[c];
            for j in 0..2 {
                let expect = m.weights[2 * c + j] + lr * e * x[j];
                assert!((next.weights[2 * c + j] - expect).abs() < 1e-14);
            }
            assert!((next.weights[6 + c] - (m.weights[6 + c] + lr * e)).abs() < 1e-14);
        }
    }

    fn numeric_grad_check(m: &Model) {
        let data = tiny();
        let (_, g) = m.full_gradient(&data);
        let h = 1e-6;
        for i in 0..m.num_params() {
            let mut p = m.clone();
            p.weights[i] += h;
            let mut q = m.clone();
            q.weights[i] -= h;
            let num = (p.mean_loss(&data) - q.mean_loss(&data)) / (2.0 * h);
            assert!((num - g[i]).abs() < 1e-6, "param {i}: {num} vs {}", g[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = Model::logistic(2, 3, 0.05);
        m.weights.iter_mut().enumerate().for_each(|(i, w)| *w = 0.1 * i as f64 - 0.3);
        numeric_grad_check(&m);
        let mlp = Model::init(ModelKind::Mlp { hidden: 4 }, 2, 3, 0.01, 3);
        numeric_grad_check(&mlp);
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = Model::logistic(2, 3, 0.0);
        assert!((m.mean_loss(&tiny()) - 3f64.ln()).abs() < 1e-12);
        assert_eq!(m.size_bits(), 32.0 * 9.0);
    }

    #[test]
    fn divergence_is_reported() {
        let mut m = Model::logistic(2, 3, 0.0);
        assert!(matches!(m.step(&[f64::INFINITY; 9], 1.0), Err(Error::Divergence(_))));
    }
}
