//! One-hidden-layer MLP head over standardized deep features:
//! D -> 64 (ReLU) -> 2 (softmax), trained full-batch with SGD + momentum.

use crate::dataset::Label;
use crate::error::Result;
use crate::ops::{relu, relu_backward, softmax_xent_backward, softmax_xent_batch, Dense, Mat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const HIDDEN_DIM: usize = 64;
pub const EPOCHS: usize = 200;
pub const LEARNING_RATE: f64 = 1e-2;
pub const MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug)]
pub struct MlpClassifier {
    pub hidden: Dense<f64>,
    pub output: Dense<f64>,
}

impl MlpClassifier {
    pub fn hidden_dim(&self) -> usize {
        self.hidden.out_dim
    }

    pub fn train(x: &Mat<f64>, labels: &[Label], seed: u64) -> Result<MlpClassifier> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hidden = Dense::<f64>::init(x.cols, HIDDEN_DIM, &mut rng);
        let mut output = Dense::<f64>::init(HIDDEN_DIM, 2, &mut rng);
        let targets: Vec<usize> = labels.iter().map(|l| l.index()).collect();
        let mut vel_hidden = hidden.grads_zero();
        let mut vel_output = output.grads_zero();
        for _epoch in 0..EPOCHS {
            let pre = hidden.forward(x)?;
            let act = Mat::from_vec(pre.rows, pre.cols, relu(&pre.data));
            let logits = output.forward(&act)?;
            let (probs, _) = softmax_xent_batch(&logits, &targets)?;
            let dlogits = softmax_xent_backward(&probs, &targets);

            let mut g_output = output.grads_zero();
            let mut g_hidden = hidden.grads_zero();
            let dact = output.backward(&act, &dlogits, &mut g_output);
            let dpre = Mat::from_vec(pre.rows, pre.cols, relu_backward(&pre.data, &dact.data));
            hidden.backward(x, &dpre, &mut g_hidden);

            step(&mut hidden.weight, &g_hidden.dweight, &mut vel_hidden.dweight);
            step(&mut hidden.bias, &g_hidden.dbias, &mut vel_hidden.dbias);
            step(&mut output.weight, &g_output.dweight, &mut vel_output.dweight);
            step(&mut output.bias, &g_output.dbias, &mut vel_output.dbias);
        }
        Ok(MlpClassifier { hidden, output })
    }

    /// Softmax probabilities `[benign, malware]` for one feature row.
    pub fn probabilities(&self, x: &[f64]) -> [f64; 2] {
        let input = Mat::from_vec(1, x.len(), x.to_vec());
        let pre = self.hidden.forward(&input).expect("dimension checked by caller");
        let act = Mat::from_vec(1, pre.cols, relu(&pre.data));
        let logits = self.output.forward(&act).expect("dimension checked by caller");
        let z = logits.data[0].max(logits.data[1]);
        let e0 = (logits.data[0] - z).exp();
        let e1 = (logits.data[1] - z).exp();
        [e0 / (e0 + e1), e1 / (e0 + e1)]
    }

    pub fn malware_prob(&self, x: &[f64]) -> f64 {
        self.probabilities(x)[1]
    }
}

fn step(w: &mut [f64], g: &[f64], v: &mut [f64]) {
    for ((wi, gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *vi = MOMENTUM * *vi - LEARNING_RATE * gi;
        *wi += *vi;
    }
}
