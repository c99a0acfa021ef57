//! AdaBoostM1 over axis-aligned decision stumps. Stump thresholds are the
//! midpoints between adjacent sorted unique values of each feature.

use crate::error::{Error, Result};
use crate::ops::Mat;

/// Cap on a round's vote weight; reached when a stump is perfect.
pub const ALPHA_CAP: f64 = 23.025850929940457; // ln(1e10)

#[derive(Clone, Debug, PartialEq)]
pub struct Stump {
    pub feature: usize,
    pub threshold: f64,
    /// +1: predict malware above the threshold; -1: below
    pub polarity: i8,
}

impl Stump {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let side = if x[self.feature] > self.threshold { 1.0 } else { -1.0 };
        side * self.polarity as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaBoost {
    /// `(stump, alpha)` per boosting round
    pub stumps: Vec<(Stump, f64)>,
}

impl AdaBoost {
    /// `y` entries must be +1 or -1. Runs at most `rounds` rounds; stops
    /// early on a perfect stump or when no stump beats chance.
    pub fn train(x: &Mat<f64>, y: &[f64], rounds: usize) -> Result<AdaBoost> {
        Self::train_impl(x, y, rounds).map(|(model, _)| model)
    }

    fn train_impl(x: &Mat<f64>, y: &[f64], rounds: usize) -> Result<(AdaBoost, Vec<f64>)> {
        if !(y.contains(&1.0) && y.contains(&-1.0)) {
            return Err(Error::Data("AdaBoost needs both classes".into()));
        }
        let (n, d) = (x.rows, x.cols);
        let mut thresholds: Vec<Vec<f64>> = Vec::with_capacity(d);
        for j in 0..d {
            let mut vals: Vec<f64> = (0..n).map(|r| x.row(r)[j]).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            vals.dedup();
            thresholds.push(vals.windows(2).map(|p| (p[0] + p[1]) / 2.0).collect());
        }
        if thresholds.iter().all(|t| t.is_empty()) {
            return Err(Error::Data("all features are constant".into()));
        }

        let mut weights = vec![1.0 / n as f64; n];
        let mut stumps = Vec::new();
        for _round in 0..rounds {
            let mut best: Option<(Stump, f64)> = None;
            for (j, cands) in thresholds.iter().enumerate() {
                for &thr in cands {
                    for polarity in [1i8, -1] {
                        let stump = Stump { feature: j, threshold: thr, polarity };
                        let eps: f64 = (0..n)
                            .filter(|&i| stump.predict(x.row(i)) != y[i])
                            .map(|i| weights[i])
                            .sum();
                        if best.as_ref().map_or(true, |(_, e)| eps < *e) {
                            best = Some((stump, eps));
                        }
                    }
                }
            }
            let (stump, eps) = best.unwrap();
            if eps >= 0.5 {
                break;
            }
            let alpha = if eps <= 0.0 {
                ALPHA_CAP
            } else {
                (0.5 * ((1.0 - eps) / eps).ln()).min(ALPHA_CAP)
            };
            let perfect = eps <= 0.0;
            for i in 0..n {
                weights[i] *= (-alpha * y[i] * stump.predict(x.row(i))).exp();
            }
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            stumps.push((stump, alpha));
            if perfect {
                break;
            }
        }
        if stumps.is_empty() {
            return Err(Error::Data("no stump beats chance on this data".into()));
        }
        Ok((AdaBoost { stumps }, weights))
    }

    /// Weighted vote scaled into [-1, 1]; >= 0 means malware.
    pub fn normalized_margin(&self, x: &[f64]) -> f64 {
        let total: f64 = self.stumps.iter().map(|(_, a)| a).sum();
        let vote: f64 = self.stumps.iter().map(|(s, a)| a * s.predict(x)).sum();
        vote / total
    }

    pub fn predict_pm1(&self, x: &[f64]) -> f64 {
        if self.normalized_margin(x) >= 0.0 {
            1.0
        } else {
            -1.0
        }
    }
}
