//! Deep-feature matrices extracted at the model's penultimate stage, plus
//! their CSV interchange format (`label,f0,...,f{D-1}`).

use crate::dataset::{Label, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::ops::Mat;
use crate::train::images_to_tensor;

#[derive(Clone, Debug)]
pub struct FeatureMatrix {
    pub features: Mat<f32>,
    pub labels: Vec<Label>,
}

impl FeatureMatrix {
    pub fn dim(&self) -> usize {
        self.features.cols
    }

    pub fn len(&self) -> usize {
        self.features.rows
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows == 0
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("label");
        for j in 0..self.features.cols {
            s.push_str(&format!(",f{j}"));
        }
        s.push('\n');
        for r in 0..self.features.rows {
            s.push_str(&format!("{}", self.labels[r].index()));
            for v in self.features.row(r) {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Data("empty CSV".into()))?;
        let cols = header.split(',').count();
        if cols < 2 || !header.starts_with("label,f0") {
            return Err(Error::Data("bad feature CSV header".into()));
        }
        let dim = cols - 1;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let lab = parts
                .next()
                .and_then(|v| v.parse::<u8>().ok())
                .ok_or_else(|| Error::Data(format!("bad label on line {}", ln + 2)))?;
            labels.push(if lab == 0 { Label::Benign } else { Label::Malware });
            let mut n = 0;
            for p in parts {
                let v: f32 = p
                    .parse()
                    .map_err(|_| Error::Data(format!("bad value on line {}", ln + 2)))?;
                if !v.is_finite() {
                    return Err(Error::Data(format!("non-finite feature on line {}", ln + 2)));
                }
                data.push(v);
                n += 1;
            }
            if n != dim {
                return Err(Error::Data(format!("line {} has {} values, expected {dim}", ln + 2, n)));
            }
        }
        Ok(FeatureMatrix {
            features: Mat::from_vec(labels.len(), dim, data),
            labels,
        })
    }
}

/// Runs the model over `indices` and collects the deep features.
pub fn extract_feature_matrix(
    model: &Model<f32>,
    ds: &LabeledDataset,
    indices: &[usize],
) -> Result<FeatureMatrix> {
    let dim = model.config.feature_dim();
    let mut data = Vec::with_capacity(indices.len() * dim);
    let mut labels = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(32) {
        let (batch, _) = images_to_tensor(ds, chunk, model.config.side, None)?;
        let feats = model.extract_features(&batch)?;
        data.extend_from_slice(&feats.data);
        for &i in chunk {
            labels.push(ds.items[i].label);
        }
    }
    Ok(FeatureMatrix {
        features: Mat::from_vec(indices.len(), dim, data),
        labels,
    })
}
