//! Linear SVM trained by stochastic subgradient descent on the
//! L2-regularized hinge loss (step 1/(lambda*t), Pegasos-style).

use crate::error::{Error, Result};
use crate::ops::Mat;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const LAMBDA: f64 = 1e-4;
pub const EPOCHS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearSvm {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearSvm {
    /// `y` entries must be +1 (malware) or -1 (benign).
    pub fn train(x: &Mat<f64>, y: &[f64], seed: u64) -> Result<LinearSvm> {
        Self::train_with_trace(x, y, seed).map(|(svm, _)| svm)
    }

    /// Like [`train`](Self::train), but also returns the objective value of
    /// the kept model at every epoch boundary.
    ///
    /// Stochastic iterates oscillate under the 1/(lambda*t) schedule, so the
    /// epoch-boundary iterate with the lowest full-set objective is kept
    /// (the same best-checkpoint rule the CNN training loop uses); the
    /// returned trace is therefore non-increasing.
    pub fn train_with_trace(x: &Mat<f64>, y: &[f64], seed: u64) -> Result<(LinearSvm, Vec<f64>)> {
        if !(y.contains(&1.0) && y.contains(&-1.0)) {
            return Err(Error::Data("SVM needs both classes".into()));
        }
        let (n, d) = (x.rows, x.cols);
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        let mut t = 0usize;
        let mut trace = Vec::with_capacity(EPOCHS);
        let mut best: Option<(LinearSvm, f64)> = None;
        for _epoch in 0..EPOCHS {
            order.shuffle(&mut rng);
            for &i in &order {
                t += 1;
                let eta = 1.0 / (LAMBDA * t as f64);
                let row = x.row(i);
                let margin = y[i] * (dot(&w, row) + b);
                // w <- (1 - eta*lambda) w [+ eta*y*x on a hinge violation]
                let shrink = 1.0 - eta * LAMBDA;
                w.iter_mut().for_each(|v| *v *= shrink);
                if margin < 1.0 {
                    let step = eta * y[i];
                    for (wj, xj) in w.iter_mut().zip(row) {
                        *wj += step * xj;
                    }
                    b += step;
                }
            }
            let snapshot = LinearSvm { weights: w.clone(), bias: b };
            let obj = snapshot.objective(x, y);
            if best.as_ref().map_or(true, |(_, prev)| obj < *prev) {
                best = Some((snapshot, obj));
            }
            trace.push(best.as_ref().unwrap().1);
        }
        let (svm, _) = best.unwrap();
        Ok((svm, trace))
    }

    pub fn margin(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.bias
    }

    pub fn predict_pm1(&self, x: &[f64]) -> f64 {
        if self.margin(x) >= 0.0 {
            1.0
        } else {
            -1.0
        }
    }

    /// lambda/2 ||w||^2 + mean hinge, the training objective.
    pub fn objective(&self, x: &Mat<f64>, y: &[f64]) -> f64 {
        let reg = 0.5 * LAMBDA * dot(&self.weights, &self.weights);
        let mut hinge = 0.0;
        for i in 0..x.rows {
            hinge += (1.0 - y[i] * self.margin(x.row(i))).max(0.0);
        }
        reg + hinge / x.rows as f64
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
