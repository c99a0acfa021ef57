//! Deep-feature classifiers: linear SVM, one-hidden-layer MLP and
//! AdaBoostM1 over decision stumps, combined by majority vote.

mod adaboost;
mod mlp;
mod svm;

pub use adaboost::{AdaBoost, Stump};
pub use mlp::MlpClassifier;
pub use svm::LinearSvm;

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::ops::Mat;

/// Per-feature mean/stdev scaling fit on training features.
/// Constant columns map to 0 (stdev floor 1e-8).
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Mat<f64>) -> Standardizer {
        let (n, d) = (x.rows, x.cols);
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for j in 0..d {
                let dlt = x.row(r)[j] - mean[j];
                var[j] += dlt * dlt;
            }
        }
        let std = var
            .iter()
            .map(|v| (v / n as f64).sqrt().max(1e-8))
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, x: &Mat<f64>) -> Mat<f64> {
        let mut out = x.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            for j in 0..row.len() {
                row[j] = (row[j] - self.mean[j]) / self.std[j];
            }
        }
        out
    }
}

pub fn to_f64(x: &Mat<f32>) -> Mat<f64> {
    x.cast()
}

fn labels_pm1(labels: &[Label]) -> Vec<f64> {
    labels
        .iter()
        .map(|l| if *l == Label::Malware { 1.0 } else { -1.0 })
        .collect()
}

fn check_two_classes(labels: &[Label]) -> Result<()> {
    let malware = labels.iter().filter(|l| **l == Label::Malware).count();
    if malware == 0 || malware == labels.len() {
        return Err(Error::Data("training labels contain a single class".into()));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ClassifierEnsemble {
    pub standardizer: Standardizer,
    pub svm: LinearSvm,
    pub mlp: MlpClassifier,
    pub adaboost: AdaBoost,
}

/// Per-item output of the full ensemble.
#[derive(Clone, Debug)]
pub struct EnsemblePrediction {
    pub label: Label,
    /// mean of the three calibrated malware scores, used for ROC/PR
    pub score: f64,
    pub votes: [Label; 3],
    pub scores: [f64; 3],
}

pub fn train_ensemble(fm: &FeatureMatrix, seed: u64) -> Result<ClassifierEnsemble> {
    check_two_classes(&fm.labels)?;
    let raw = to_f64(&fm.features);
    let standardizer = Standardizer::fit(&raw);
    let x = standardizer.apply(&raw);
    let y = labels_pm1(&fm.labels);
    let svm = LinearSvm::train(&x, &y, seed)?;
    let mlp = MlpClassifier::train(&x, &fm.labels, seed)?;
    let adaboost = AdaBoost::train(&x, &y, 100)?;
    Ok(ClassifierEnsemble {
        standardizer,
        svm,
        mlp,
        adaboost,
    })
}

/// Majority over an odd number of binary voters.
pub fn majority_vote(votes: &[Label]) -> Label {
    let malware = votes.iter().filter(|l| **l == Label::Malware).count();
    if 2 * malware > votes.len() {
        Label::Malware
    } else {
        Label::Benign
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl ClassifierEnsemble {
    pub fn predict(&self, features: &Mat<f32>) -> Result<Vec<EnsemblePrediction>> {
        if features.cols != self.standardizer.mean.len() {
            return Err(Error::Shape(format!(
                "ensemble expects {} features, got {}",
                self.standardizer.mean.len(),
                features.cols
            )));
        }
        let x = self.standardizer.apply(&to_f64(features));
        let mut out = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let svm_margin = self.svm.margin(row);
            let mlp_prob = self.mlp.malware_prob(row);
            let ada_margin = self.adaboost.normalized_margin(row);
            let votes = [
                pm1_label(svm_margin),
                if mlp_prob >= 0.5 { Label::Malware } else { Label::Benign },
                pm1_label(ada_margin),
            ];
            let scores = [sigmoid(svm_margin), mlp_prob, (ada_margin + 1.0) / 2.0];
            out.push(EnsemblePrediction {
                label: majority_vote(&votes),
                score: scores.iter().sum::<f64>() / 3.0,
                votes,
                scores,
            });
        }
        Ok(out)
    }
}

fn pm1_label(margin: f64) -> Label {
    if margin >= 0.0 {
        Label::Malware
    } else {
        Label::Benign
    }
}

// ---------------------------------------------------------------------------
// binary serialization for the checkpoint container
// ---------------------------------------------------------------------------

fn push_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u32(&mut self) -> Result<u32> {
        let v = self
            .buf
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| Error::Format("truncated ensemble section".into()))?;
        self.pos += 4;
        Ok(u32::from_le_bytes(v.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        let v = self
            .buf
            .get(self.pos..self.pos + 8)
            .ok_or_else(|| Error::Format("truncated ensemble section".into()))?;
        self.pos += 8;
        Ok(f64::from_le_bytes(v.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

impl ClassifierEnsemble {
    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.standardizer.mean.len();
        let h = self.mlp.hidden_dim();
        let mut out = Vec::new();
        out.extend_from_slice(&(d as u32).to_le_bytes());
        push_f64s(&mut out, &self.standardizer.mean);
        push_f64s(&mut out, &self.standardizer.std);
        push_f64s(&mut out, &self.svm.weights);
        push_f64s(&mut out, &[self.svm.bias]);
        out.extend_from_slice(&(h as u32).to_le_bytes());
        push_f64s(&mut out, &self.mlp.hidden.weight);
        push_f64s(&mut out, &self.mlp.hidden.bias);
        push_f64s(&mut out, &self.mlp.output.weight);
        push_f64s(&mut out, &self.mlp.output.bias);
        out.extend_from_slice(&(self.adaboost.stumps.len() as u32).to_le_bytes());
        for (stump, alpha) in &self.adaboost.stumps {
            out.extend_from_slice(&(stump.feature as u32).to_le_bytes());
            push_f64s(&mut out, &[stump.threshold]);
            out.extend_from_slice(&(stump.polarity as i32).to_le_bytes());
            push_f64s(&mut out, &[*alpha]);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let d = r.u32()? as usize;
        let standardizer = Standardizer {
            mean: r.f64s(d)?,
            std: r.f64s(d)?,
        };
        let svm = LinearSvm {
            weights: r.f64s(d)?,
            bias: r.f64()?,
        };
        let h = r.u32()? as usize;
        let mut hidden = crate::ops::Dense::zeros(d, h);
        hidden.weight = r.f64s(d * h)?;
        hidden.bias = r.f64s(h)?;
        let mut output = crate::ops::Dense::zeros(h, 2);
        output.weight = r.f64s(h * 2)?;
        output.bias = r.f64s(2)?;
        let mlp = MlpClassifier { hidden, output };
        let n_stumps = r.u32()? as usize;
        let mut stumps = Vec::with_capacity(n_stumps);
        for _ in 0..n_stumps {
            let feature = r.u32()? as usize;
            let threshold = r.f64()?;
            let polarity = r.u32()? as i32 as i8;
            let alpha = r.f64()?;
            stumps.push((
                Stump {
                    feature,
                    threshold,
                    polarity,
                },
                alpha,
            ));
        }
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes in ensemble section".into()));
        }
        Ok(ClassifierEnsemble {
            standardizer,
            svm,
            mlp,
            adaboost: AdaBoost { stumps },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_features() -> FeatureMatrix {
        // two well-separated blobs in 3-D
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..12 {
            let off = i as f32 * 0.01;
            data.extend_from_slice(&[1.0 + off, 2.0 - off, 0.5]);
            labels.push(Label::Benign);
        }
        for i in 0..12 {
            let off = i as f32 * 0.01;
            data.extend_from_slice(&[-1.0 - off, -2.0 + off, 1.5]);
            labels.push(Label::Malware);
        }
        FeatureMatrix {
            features: Mat::from_vec(24, 3, data),
            labels,
        }
    }

    #[test]
    fn vote_patterns_exhaustive() {
        use Label::*;
        for a in [Benign, Malware] {
            for b in [Benign, Malware] {
                for c in [Benign, Malware] {
                    let votes = [a, b, c];
                    let malware = votes.iter().filter(|l| **l == Malware).count();
                    let expected = if malware >= 2 { Malware } else { Benign };
                    assert_eq!(majority_vote(&votes), expected);
                }
            }
        }
    }

    #[test]
    fn standardized_columns_are_zero_mean_unit_std() {
        let fm = toy_features();
        let raw = to_f64(&fm.features);
        let st = Standardizer::fit(&raw);
        let x = st.apply(&raw);
        for j in 0..x.cols {
            let col: Vec<f64> = (0..x.rows).map(|r| x.row(r)[j]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let x = Mat::from_vec(3, 1, vec![5.0f64, 5.0, 5.0]);
        let st = Standardizer::fit(&x);
        let z = st.apply(&x);
        assert!(z.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ensemble_trains_and_round_trips() {
        let fm = toy_features();
        let ens = train_ensemble(&fm, 5).unwrap();
        let preds = ens.predict(&fm.features).unwrap();
        let acc = preds
            .iter()
            .zip(&fm.labels)
            .filter(|(p, l)| p.label == **l)
            .count() as f64
            / preds.len() as f64;
        assert_eq!(acc, 1.0);

        let back = ClassifierEnsemble::from_bytes(&ens.to_bytes()).unwrap();
        let preds2 = back.predict(&fm.features).unwrap();
        for (a, b) in preds.iter().zip(&preds2) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.score, b.score);
        }
    }

    #[test]
    fn single_class_rejected() {
        let mut fm = toy_features();
        fm.labels.iter_mut().for_each(|l| *l = Label::Benign);
        assert!(train_ensemble(&fm, 0).is_err());
    }

    #[test]
    fn feature_scaling_absorbed_by_standardization() {
        let fm = toy_features();
        let ens_a = train_ensemble(&fm, 9).unwrap();
        let mut scaled = fm.clone();
        scaled.features.data.iter_mut().for_each(|v| *v *= 2.0);
        let ens_b = train_ensemble(&scaled, 9).unwrap();
        let pa = ens_a.predict(&fm.features).unwrap();
        let pb = ens_b.predict(&scaled.features).unwrap();
        for (a, b) in pa.iter().zip(&pb) {
            assert_eq!(a.label, b.label);
        }
    }
}
