//! Multinomial logistic regression trained by plain per-sample SGD.

use serde::{Deserialize, Serialize};

use crate::embedding::dot;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSoftmax {
    input_dim: usize,
    /// One weight row per class; the bias lives in the caller's feature vector.
    rows: Vec<Vec<f64>>,
}

impl LinearSoftmax {
    pub fn new(input_dim: usize, classes: usize) -> Self {
        LinearSoftmax {
            input_dim,
            rows: vec![vec![0.0; input_dim]; classes],
        }
    }

    /// Rebuilds a model from stored rows; every row must have `input_dim` entries.
    pub fn from_rows(input_dim: usize, rows: Vec<Vec<f64>>) -> Option<Self> {
        rows.iter()
            .all(|r| r.len() == input_dim)
            .then_some(LinearSoftmax { input_dim, rows })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn classes(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Appends a zero-initialized class row.
    pub fn push_class(&mut self) {
        self.rows.push(vec![0.0; self.input_dim]);
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|w| dot(w, x)).collect()
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    /// Highest-scoring class, ties resolved toward the lowest index.
    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    /// One cross-entropy gradient step; returns the loss before the update.
    pub fn sgd_step(&mut self, x: &[f64], target: usize, step_size: f64) -> f64 {
        let p = self.probabilities(x);
        for (c, (row, pc)) in self.rows.iter_mut().zip(&p).enumerate() {
            let g = pc - if c == target { 1.0 } else { 0.0 };
            if g == 0.0 {
                continue;
            }
            let scale = step_size * g;
            for (w, xi) in row.iter_mut().zip(x) {
                *w -= scale * xi;
            }
        }
        -p[target].max(f64::MIN_POSITIVE).ln()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
