//! Mini-batch SGD-with-momentum training, auxiliary-stem surrogate
//! pretraining, and evaluation-time scoring.

use crate::augment::{augment, AugmentSpec};
use crate::dataset::{LabeledDataset, Label};
use crate::error::{Error, Result};
use crate::image::resize_nearest;
use crate::model::{stem_backward, stem_forward, Model, ModelGrads};
use crate::ops::{
    global_avg_pool, global_avg_pool_backward, softmax_xent_backward, softmax_xent_batch, Dense,
    Mat,
};
use crate::split::SplitPlan;
use crate::tensor::{Shape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
    pub augment: bool,
    pub augment_spec: AugmentSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 20,
            batch_size: 16,
            momentum: 0.950,
            seed: 0,
            augment: true,
            augment_spec: AugmentSpec::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
            ));
        }
        s
    }
}

/// Normalizes images into an (N, 1, side, side) batch, resizing as needed.
pub fn images_to_tensor(
    ds: &LabeledDataset,
    indices: &[usize],
    side: usize,
    augment_with: Option<(&AugmentSpec, &mut ChaCha8Rng)>,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    let mut batch = Tensor::zeros(Shape::new(indices.len(), 1, side, side));
    let mut labels = Vec::with_capacity(indices.len());
    let mut aug = augment_with;
    for (bi, &i) in indices.iter().enumerate() {
        let item = &ds.items[i];
        let mut img = if item.image.width == side && item.image.height == side {
            item.image.clone()
        } else {
            resize_nearest(&item.image, side)?
        };
        if let Some((spec, rng)) = aug.as_mut() {
            if rng.gen::<f64>() < spec.prob {
                img = augment(&img, spec, rng)?;
            }
        }
        let start = batch.shape.idx(bi, 0, 0, 0);
        for (dst, &px) in batch.data[start..start + side * side].iter_mut().zip(&img.pixels) {
            *dst = px as f32 / 255.0;
        }
        labels.push(item.label.index());
    }
    Ok((batch, labels))
}

/// v <- mu*v - lr*g ; w <- w + v
fn sgd_update(w: &mut [f32], g: &[f32], v: &mut [f32], lr: f64, mu: f64) {
    let (lr, mu) = (lr as f32, mu as f32);
    for i in 0..w.len() {
        v[i] = mu * v[i] - lr * g[i];
        w[i] += v[i];
    }
}

fn apply_model_update(model: &mut Model<f32>, grads: &ModelGrads<f32>, vel: &mut [Vec<f32>], lr: f64, mu: f64) {
    let frozen = model.aux_frozen;
    let params = model.params_mut();
    let flat = grads.flat();
    for (((w, is_aux), g), v) in params.into_iter().zip(flat).zip(vel.iter_mut()) {
        if is_aux && frozen {
            continue;
        }
        sgd_update(w, g, v, lr, mu);
    }
}

fn velocities_for(model: &Model<f32>) -> Vec<Vec<f32>> {
    model.params().iter().map(|(p, _)| vec![0.0; p.len()]).collect()
}

/// One optimizer step on a prepared batch. Returns (mean loss, accuracy).
fn train_step(
    model: &mut Model<f32>,
    batch: &Tensor<f32>,
    labels: &[usize],
    grads: &mut ModelGrads<f32>,
    vel: &mut [Vec<f32>],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let cache = model.forward_cached(batch, true, rng)?;
    let (probs, loss) = softmax_xent_batch(&cache.logits, labels)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    grads.zero();
    model.backward(batch, &cache, &probs, labels, grads);
    apply_model_update(model, grads, vel, cfg.learning_rate, cfg.momentum);
    Ok((loss as f64, accuracy(&probs, labels)))
}

fn accuracy(probs: &Mat<f32>, labels: &[usize]) -> f64 {
    let mut hits = 0;
    for (r, &l) in labels.iter().enumerate() {
        let row = probs.row(r);
        let pred = if row[1] > row[0] { 1 } else { 0 };
        if pred == l {
            hits += 1;
        }
    }
    hits as f64 / labels.len().max(1) as f64
}

/// Mean loss and accuracy over `indices` in inference mode.
pub fn evaluate(model: &Model<f32>, ds: &LabeledDataset, indices: &[usize]) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut total_loss = 0.0;
    let mut hits = 0usize;
    for chunk in indices.chunks(32) {
        let (batch, labels) = images_to_tensor(ds, chunk, model.config.side, None)?;
        let (logits, probs) = model.forward(&batch)?;
        let (_, loss) = softmax_xent_batch(&logits, &labels)?;
        total_loss += loss as f64 * chunk.len() as f64;
        for (r, &l) in labels.iter().enumerate() {
            let row = probs.row(r);
            if (row[1] > row[0]) as usize == l {
                hits += 1;
            }
        }
    }
    Ok((
        total_loss / indices.len() as f64,
        hits as f64 / indices.len() as f64,
    ))
}

/// Trains the model in place. Returns the per-epoch history and the
/// best-validation-accuracy snapshot (ties resolved to the earlier epoch).
pub fn train(
    model: &mut Model<f32>,
    ds: &LabeledDataset,
    plan: &SplitPlan,
    cfg: &TrainConfig,
) -> Result<(TrainHistory, Model<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut vel = velocities_for(model);
    let mut grads = model.grads_zero();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Model<f32>)> = None;
    let side = model.config.side;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order = plan.train.clone();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_hits = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (batch, labels) = images_to_tensor(
                ds,
                chunk,
                side,
                cfg.augment.then_some((&cfg.augment_spec, &mut rng)),
            )?;
            let (loss, acc) = train_step(model, &batch, labels.as_slice(), &mut grads, &mut vel, cfg, &mut rng)
                .map_err(|e| {
                    Error::NonFinite(format!("epoch {epoch}, batch {bi}: {e}"))
                })?;
            epoch_loss += loss * chunk.len() as f64;
            epoch_hits += acc * chunk.len() as f64;
        }
        let n_train = order.len().max(1) as f64;
        let (val_loss, val_acc) = evaluate(model, ds, &plan.val)?;
        history.records.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / n_train,
            train_acc: epoch_hits / n_train,
            val_loss,
            val_acc,
            wall_secs: started.elapsed().as_secs_f64(),
        });
        let better = match &best {
            None => true,
            Some((b, _)) => val_acc > *b,
        };
        if better {
            best = Some((val_acc, model.clone_model()));
        }
    }
    let best_model = best.map(|(_, m)| m).unwrap_or_else(|| model.clone_model());
    Ok((history, best_model))
}

/// Per-item malware probability over `indices`, inference mode.
pub fn score(
    model: &Model<f32>,
    ds: &LabeledDataset,
    indices: &[usize],
) -> Result<(Vec<f64>, Vec<Label>)> {
    let mut scores = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(32) {
        let (batch, _) = images_to_tensor(ds, chunk, model.config.side, None)?;
        let (_, probs) = model.forward(&batch)?;
        for (r, &i) in chunk.iter().enumerate() {
            scores.push(probs.row(r)[1] as f64);
            labels.push(ds.items[i].label);
        }
    }
    Ok((scores, labels))
}

/// Trains the auxiliary stem on the surrogate task with a throwaway head,
/// then freezes it. Returns per-epoch mean surrogate loss.
pub fn pretrain_auxiliary(
    model: &mut Model<f32>,
    surrogate: &LabeledDataset,
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if surrogate.is_empty() {
        return Err(Error::Data("surrogate dataset is empty".into()));
    }
    let side = model.config.side;
    let feat_dim = model.config.merged_widths()[2];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x7261_7465));
    let mut head: Dense<f32> = Dense::init(feat_dim, 2, &mut rng);
    let mut head_grads = head.grads_zero();
    let mut stem_grads: Vec<_> = model.aux.iter().map(|b| b.grads_zero()).collect();
    let mut vel: Vec<Vec<f32>> = model
        .aux
        .iter()
        .flat_map(|b| {
            [
                &b.boundary.weight,
                &b.boundary.bias,
                &b.region.weight,
                &b.region.bias,
                &b.dil1.weight,
                &b.dil1.bias,
                &b.dil2.weight,
                &b.dil2.bias,
            ]
            .map(|p| vec![0.0; p.len()])
        })
        .collect();
    let mut head_vel = (vec![0.0; head.weight.len()], vec![0.0; head.bias.len()]);

    let mut losses = Vec::with_capacity(epochs);
    let all: Vec<usize> = (0..surrogate.len()).collect();
    for _epoch in 0..epochs {
        let mut order = all.clone();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, labels) = images_to_tensor(surrogate, chunk, side, None)?;
            let caches = stem_forward(&model.aux, &batch)?;
            let feats = global_avg_pool(&caches.last().unwrap().out);
            let logits = head.forward(&feats)?;
            let (probs, loss) = softmax_xent_batch(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("surrogate pretraining loss".into()));
            }
            epoch_loss += loss as f64 * chunk.len() as f64;

            for g in stem_grads.iter_mut() {
                g.zero();
            }
            head_grads.dweight.iter_mut().for_each(|v| *v = 0.0);
            head_grads.dbias.iter_mut().for_each(|v| *v = 0.0);

            let dlogits = softmax_xent_backward(&probs, &labels);
            let dfeats = head.backward(&feats, &dlogits, &mut head_grads);
            let dlast = global_avg_pool_backward(caches.last().unwrap().out.shape, &dfeats);
            stem_backward(&model.aux, &batch, &caches, &dlast, None, &mut stem_grads);

            let mut vi = 0;
            for (b, g) in model.aux.iter_mut().zip(&stem_grads) {
                for (w, dg) in b.params_mut().into_iter().zip(g.flat()) {
                    sgd_update(w, dg, &mut vel[vi], cfg.learning_rate, cfg.momentum);
                    vi += 1;
                }
            }
            sgd_update(&mut head.weight, &head_grads.dweight, &mut head_vel.0, cfg.learning_rate, cfg.momentum);
            sgd_update(&mut head.bias, &head_grads.dbias, &mut head_vel.1, cfg.learning_rate, cfg.momentum);
        }
        losses.push(epoch_loss / surrogate.len() as f64);
    }
    model.aux_frozen = true;
    Ok(losses)
}

impl Model<f32> {
    /// Deep clone (parameters and flags).
    pub fn clone_model(&self) -> Model<f32> {
        self.cast::<f32>()
    }
}
