//! The SB-BR-STM network: three split-transform-merge blocks per stem, a
//! frozen auxiliary stem for channel boosting, a 1x1 fusion block and a
//! softmax head.
//!
//! Each STM block splits its input into four squeezed paths:
//! boundary (3x3 max-pool then 1x1 conv), region (3x3 avg-pool then 1x1
//! conv), and two dilated 3x3 convs (dilation 1 and 2). The paths are
//! concatenated to 4x the squeeze width and downsampled by a 2x2 max-pool.

use crate::error::{Error, Result};
use crate::ops::{
    concat_channels, dropout, dropout_backward, global_avg_pool, global_avg_pool_backward,
    pool2d, pool2d_backward, relu, relu_backward, softmax_xent_backward, split_channels,
    Conv2d, ConvGrads, ConvSpec, Dense, DenseGrads, Mat, PoolCache, PoolSpec,
};
use crate::tensor::{Scalar, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 3x3 stride-1 pad-1 max-pool feeding the boundary path.
pub const BOUNDARY_POOL: PoolSpec = PoolSpec {
    window: 3,
    stride: 1,
    pad: 1,
    mode: crate::ops::PoolMode::Max,
};
/// 3x3 stride-1 pad-1 avg-pool feeding the region path.
pub const REGION_POOL: PoolSpec = PoolSpec {
    window: 3,
    stride: 1,
    pad: 1,
    mode: crate::ops::PoolMode::Avg,
};
/// 2x2 stride-2 max-pool used after the merge and for spatial alignment.
pub const DOWN_POOL: PoolSpec = PoolSpec {
    window: 2,
    stride: 2,
    pad: 0,
    mode: crate::ops::PoolMode::Max,
};

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// input side length L (inputs are L x L)
    pub side: usize,
    /// per-path squeeze width of each STM block; merged width is 4x this
    pub stm_widths: Vec<usize>,
    pub dropout: f64,
    /// seed for parameter initialization
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            side: 64,
            stm_widths: vec![32, 64, 128],
            dropout: 0.5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stm_widths.len() != 3 {
            return Err(Error::Config(format!(
                "expected exactly 3 STM widths, got {}",
                self.stm_widths.len()
            )));
        }
        if self.stm_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("STM widths must be >= 1".into()));
        }
        if self.in_channels == 0 || self.side < 16 {
            return Err(Error::Config("input must be >= 16x16 with >= 1 channel".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0,1)".into()));
        }
        Ok(())
    }

    /// Channel widths after the four paths merge: 4x squeeze width.
    pub fn merged_widths(&self) -> Vec<usize> {
        self.stm_widths.iter().map(|w| w * 4).collect()
    }

    /// Channels entering block F: both stems contribute their last two
    /// block outputs (the mid output pooled down to the final grid).
    pub fn fusion_in_channels(&self) -> usize {
        let m = self.merged_widths();
        2 * (m[1] + m[2])
    }

    /// Block-F output width, which is also the deep-feature dimension.
    pub fn feature_dim(&self) -> usize {
        self.merged_widths()[2]
    }

    /// Canonical key=value text used in the checkpoint header.
    pub fn to_text(&self) -> String {
        let widths: Vec<String> = self.stm_widths.iter().map(|w| w.to_string()).collect();
        format!(
            "in_channels={}\nside={}\nstm_widths={}\ndropout={}\nseed={}\n",
            self.in_channels,
            self.side,
            widths.join(","),
            self.dropout,
            self.seed
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, val) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad config line: {line}")))?;
            let bad = || Error::Format(format!("bad value for {key}: {val}"));
            match key {
                "in_channels" => cfg.in_channels = val.parse().map_err(|_| bad())?,
                "side" => cfg.side = val.parse().map_err(|_| bad())?,
                "stm_widths" => {
                    cfg.stm_widths = val
                        .split(',')
                        .map(|v| v.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad())?;
                }
                "dropout" => cfg.dropout = val.parse().map_err(|_| bad())?,
                "seed" => cfg.seed = val.parse().map_err(|_| bad())?,
                _ => return Err(Error::Format(format!("unknown config key: {key}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// STM block
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct StmBlock<T: Scalar = f32> {
    pub boundary: Conv2d<T>,
    pub region: Conv2d<T>,
    pub dil1: Conv2d<T>,
    pub dil2: Conv2d<T>,
}

pub struct StmGrads<T: Scalar = f32> {
    pub boundary: ConvGrads<T>,
    pub region: ConvGrads<T>,
    pub dil1: ConvGrads<T>,
    pub dil2: ConvGrads<T>,
}

pub struct StmCache<T: Scalar = f32> {
    bp: Tensor<T>,
    bp_pool: PoolCache,
    bz: Tensor<T>,
    rp: Tensor<T>,
    rz: Tensor<T>,
    d1z: Tensor<T>,
    d2z: Tensor<T>,
    merged_shape: Shape,
    down_pool: PoolCache,
    pub out: Tensor<T>,
}

impl<T: Scalar> StmBlock<T> {
    pub fn init<R: Rng>(in_channels: usize, squeeze: usize, rng: &mut R) -> Self {
        StmBlock {
            boundary: Conv2d::init(ConvSpec::new(in_channels, squeeze, 1, 0, 1), rng),
            region: Conv2d::init(ConvSpec::new(in_channels, squeeze, 1, 0, 1), rng),
            dil1: Conv2d::init(ConvSpec::new(in_channels, squeeze, 3, 1, 1), rng),
            dil2: Conv2d::init(ConvSpec::new(in_channels, squeeze, 3, 2, 2), rng),
        }
    }

    pub fn squeeze_width(&self) -> usize {
        self.boundary.spec.out_channels
    }

    pub fn grads_zero(&self) -> StmGrads<T> {
        StmGrads {
            boundary: self.boundary.grads_zero(),
            region: self.region.grads_zero(),
            dil1: self.dil1.grads_zero(),
            dil2: self.dil2.grads_zero(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> StmBlock<U> {
        StmBlock {
            boundary: self.boundary.cast(),
            region: self.region.cast(),
            dil1: self.dil1.cast(),
            dil2: self.dil2.cast(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<StmCache<T>> {
        let (bp, bp_pool) = pool2d(x, &BOUNDARY_POOL)?;
        let bz = self.boundary.forward(&bp)?;
        let (rp, _) = pool2d(x, &REGION_POOL)?;
        let rz = self.region.forward(&rp)?;
        let d1z = self.dil1.forward(x)?;
        let d2z = self.dil2.forward(x)?;

        let act = |t: &Tensor<T>| Tensor::from_vec(t.shape, relu(&t.data)).unwrap();
        let merged = concat_channels(&[&act(&bz), &act(&rz), &act(&d1z), &act(&d2z)])?;
        let merged_shape = merged.shape;
        let (out, down_pool) = pool2d(&merged, &DOWN_POOL)?;
        Ok(StmCache {
            bp,
            bp_pool,
            bz,
            rp,
            rz,
            d1z,
            d2z,
            merged_shape,
            down_pool,
            out,
        })
    }

    pub fn backward(
        &self,
        x: &Tensor<T>,
        cache: &StmCache<T>,
        d_out: &Tensor<T>,
        grads: &mut StmGrads<T>,
    ) -> Tensor<T> {
        let s = self.squeeze_width();
        let d_merged = pool2d_backward(cache.merged_shape, &DOWN_POOL, &cache.down_pool, d_out);
        let parts = split_channels(&d_merged, &[s, s, s, s]);

        let dz = |pre: &Tensor<T>, g: &Tensor<T>| {
            Tensor::from_vec(pre.shape, relu_backward(&pre.data, &g.data)).unwrap()
        };

        let dbz = dz(&cache.bz, &parts[0]);
        let dbp = self.boundary.backward(&cache.bp, &dbz, &mut grads.boundary);
        let mut dx = pool2d_backward(x.shape, &BOUNDARY_POOL, &cache.bp_pool, &dbp);

        let drz = dz(&cache.rz, &parts[1]);
        let drp = self.region.backward(&cache.rp, &drz, &mut grads.region);
        let dxr = pool2d_backward(x.shape, &REGION_POOL, &PoolCache { argmax: vec![] }, &drp);

        let dd1 = dz(&cache.d1z, &parts[2]);
        let dx1 = self.dil1.backward(x, &dd1, &mut grads.dil1);
        let dd2 = dz(&cache.d2z, &parts[3]);
        let dx2 = self.dil2.backward(x, &dd2, &mut grads.dil2);

        for i in 0..dx.data.len() {
            dx.data[i] += dxr.data[i] + dx1.data[i] + dx2.data[i];
        }
        dx
    }
}

/// Forward through a stack of STM blocks; returns one cache per block.
pub fn stem_forward<T: Scalar>(blocks: &[StmBlock<T>], x: &Tensor<T>) -> Result<Vec<StmCache<T>>> {
    let mut caches: Vec<StmCache<T>> = Vec::with_capacity(blocks.len());
    for (i, b) in blocks.iter().enumerate() {
        let input = if i == 0 { x } else { &caches[i - 1].out };
        caches.push(b.forward(input)?);
    }
    Ok(caches)
}

/// Backward through a stem. `d_last` is the gradient at the final block
/// output; `d_mid_extra` is an extra gradient added at the second-to-last
/// block output (the channel-boost tap).
pub fn stem_backward<T: Scalar>(
    blocks: &[StmBlock<T>],
    x0: &Tensor<T>,
    caches: &[StmCache<T>],
    d_last: &Tensor<T>,
    d_mid_extra: Option<&Tensor<T>>,
    grads: &mut [StmGrads<T>],
) -> Tensor<T> {
    let mut d = d_last.clone();
    for i in (0..blocks.len()).rev() {
        let input = if i == 0 { x0 } else { &caches[i - 1].out };
        let mut dx = blocks[i].backward(input, &caches[i], &d, &mut grads[i]);
        if i >= 1 && i - 1 == blocks.len() - 2 {
            if let Some(extra) = d_mid_extra {
                for (a, b) in dx.data.iter_mut().zip(&extra.data) {
                    *a += *b;
                }
            }
        }
        d = dx;
    }
    d
}

// ---------------------------------------------------------------------------
// full model
// ---------------------------------------------------------------------------

pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub main: Vec<StmBlock<T>>,
    pub aux: Vec<StmBlock<T>>,
    pub fusion: Conv2d<T>,
    pub head: Dense<T>,
    pub aux_frozen: bool,
}

pub struct ModelGrads<T: Scalar = f32> {
    pub main: Vec<StmGrads<T>>,
    pub aux: Vec<StmGrads<T>>,
    pub fusion: ConvGrads<T>,
    pub head: DenseGrads<T>,
}

impl<T: Scalar> StmGrads<T> {
    pub fn flat(&self) -> Vec<&Vec<T>> {
        vec![
            &self.boundary.dweight,
            &self.boundary.dbias,
            &self.region.dweight,
            &self.region.dbias,
            &self.dil1.dweight,
            &self.dil1.dbias,
            &self.dil2.dweight,
            &self.dil2.dbias,
        ]
    }

    pub fn zero(&mut self) {
        for g in [
            &mut self.boundary,
            &mut self.region,
            &mut self.dil1,
            &mut self.dil2,
        ] {
            g.dweight.iter_mut().for_each(|v| *v = T::zero());
            g.dbias.iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

impl<T: Scalar> ModelGrads<T> {
    /// Gradient buffers in the same order as `Model::params`.
    pub fn flat(&self) -> Vec<&Vec<T>> {
        let mut v = Vec::new();
        for g in &self.main {
            v.extend(g.flat());
        }
        for g in &self.aux {
            v.extend(g.flat());
        }
        v.push(&self.fusion.dweight);
        v.push(&self.fusion.dbias);
        v.push(&self.head.dweight);
        v.push(&self.head.dbias);
        v
    }

    pub fn zero(&mut self) {
        for g in self.main.iter_mut().chain(self.aux.iter_mut()) {
            g.zero();
        }
        self.fusion.dweight.iter_mut().for_each(|v| *v = T::zero());
        self.fusion.dbias.iter_mut().for_each(|v| *v = T::zero());
        self.head.dweight.iter_mut().for_each(|v| *v = T::zero());
        self.head.dbias.iter_mut().for_each(|v| *v = T::zero());
    }
}

impl<T: Scalar> StmBlock<T> {
    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut v = Vec::new();
        for c in [&mut self.boundary, &mut self.region, &mut self.dil1, &mut self.dil2] {
            v.push(&mut c.weight);
            v.push(&mut c.bias);
        }
        v
    }
}

pub struct ModelCache<T: Scalar = f32> {
    main: Vec<StmCache<T>>,
    aux: Vec<StmCache<T>>,
    wd_pool: PoolCache,
    wb_pool: PoolCache,
    boosted: Tensor<T>,
    fz: Tensor<T>,
    f: Tensor<T>,
    /// global-average-pooled block-F activations, N x feature_dim
    pub feats: Mat<T>,
    dropped: Mat<T>,
    drop_mask: Vec<bool>,
    pub logits: Mat<T>,
}

impl Model<f32> {
    /// Builds a freshly initialized model, deterministic under config.seed.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let make_stem = |rng: &mut ChaCha8Rng| {
            let mut in_c = config.in_channels;
            let mut blocks = Vec::new();
            for &s in &config.stm_widths {
                blocks.push(StmBlock::init(in_c, s, rng));
                in_c = 4 * s;
            }
            blocks
        };
        let main = make_stem(&mut rng);
        let aux = make_stem(&mut rng);
        let fusion = Conv2d::init(
            ConvSpec::new(config.fusion_in_channels(), config.feature_dim(), 1, 0, 1),
            &mut rng,
        );
        let head = Dense::init(config.feature_dim(), 2, &mut rng);
        Ok(Model {
            config,
            main,
            aux,
            fusion,
            head,
            aux_frozen: false,
        })
    }
}

impl<T: Scalar> Model<T> {
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            main: self.main.iter().map(|b| b.cast()).collect(),
            aux: self.aux.iter().map(|b| b.cast()).collect(),
            fusion: self.fusion.cast(),
            head: self.head.cast(),
            aux_frozen: self.aux_frozen,
        }
    }

    pub fn grads_zero(&self) -> ModelGrads<T> {
        ModelGrads {
            main: self.main.iter().map(|b| b.grads_zero()).collect(),
            aux: self.aux.iter().map(|b| b.grads_zero()).collect(),
            fusion: self.fusion.grads_zero(),
            head: self.head.grads_zero(),
        }
    }

    /// Parameter buffers in the declared traversal order, paired with
    /// whether each belongs to the auxiliary stem.
    pub fn params_mut(&mut self) -> Vec<(&mut Vec<T>, bool)> {
        let mut v = Vec::new();
        for b in &mut self.main {
            for c in [&mut b.boundary, &mut b.region, &mut b.dil1, &mut b.dil2] {
                v.push((&mut c.weight, false));
                v.push((&mut c.bias, false));
            }
        }
        for b in &mut self.aux {
            for c in [&mut b.boundary, &mut b.region, &mut b.dil1, &mut b.dil2] {
                v.push((&mut c.weight, true));
                v.push((&mut c.bias, true));
            }
        }
        v.push((&mut self.fusion.weight, false));
        v.push((&mut self.fusion.bias, false));
        v.push((&mut self.head.weight, false));
        v.push((&mut self.head.bias, false));
        v
    }

    pub fn params(&self) -> Vec<(&Vec<T>, bool)> {
        let mut v = Vec::new();
        for b in &self.main {
            for c in [&b.boundary, &b.region, &b.dil1, &b.dil2] {
                v.push((&c.weight, false));
                v.push((&c.bias, false));
            }
        }
        for b in &self.aux {
            for c in [&b.boundary, &b.region, &b.dil1, &b.dil2] {
                v.push((&c.weight, true));
                v.push((&c.bias, true));
            }
        }
        v.push((&self.fusion.weight, false));
        v.push((&self.fusion.bias, false));
        v.push((&self.head.weight, false));
        v.push((&self.head.bias, false));
        v
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(p, _)| p.len()).sum()
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        let c = &self.config;
        if batch.shape.c != c.in_channels || batch.shape.h != c.side || batch.shape.w != c.side {
            return Err(Error::Shape(format!(
                "model expects {}x{}x{} inputs, got {:?}",
                c.in_channels, c.side, c.side, batch.shape
            )));
        }
        Ok(())
    }

    /// Full forward pass with caches kept for backprop.
    pub fn forward_cached<R: Rng>(
        &self,
        batch: &Tensor<T>,
        train: bool,
        rng: &mut R,
    ) -> Result<ModelCache<T>> {
        self.check_input(batch)?;
        let main = stem_forward(&self.main, batch)?;
        let aux = stem_forward(&self.aux, batch)?;
        let last = self.main.len() - 1;

        // boosted channel order: aux mid, aux last, main mid, main last
        let (wb, wb_pool) = pool2d(&aux[last - 1].out, &DOWN_POOL)?;
        let wc = &aux[last].out;
        let (wd, wd_pool) = pool2d(&main[last - 1].out, &DOWN_POOL)?;
        let we = &main[last].out;
        let boosted = concat_channels(&[&wb, wc, &wd, we])?;

        let fz = self.fusion.forward(&boosted)?;
        let f = Tensor::from_vec(fz.shape, relu(&fz.data))?;
        let feats = global_avg_pool(&f);

        let (dropped_data, drop_mask) = dropout(&feats.data, self.config.dropout, train, rng)?;
        let dropped = Mat::from_vec(feats.rows, feats.cols, dropped_data);
        let logits = self.head.forward(&dropped)?;
        logits
            .data
            .iter()
            .all(|v| v.is_finite())
            .then_some(())
            .ok_or_else(|| Error::NonFinite("model logits".into()))?;

        Ok(ModelCache {
            main,
            aux,
            wd_pool,
            wb_pool,
            boosted,
            fz,
            f,
            feats,
            dropped,
            drop_mask,
            logits,
        })
    }

    /// Inference: returns (logits, probabilities), dropout off.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<(Mat<T>, Mat<T>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cache = self.forward_cached(batch, false, &mut rng)?;
        let probs = softmax_rows(&cache.logits);
        Ok((cache.logits, probs))
    }

    /// Deep features: global-average-pooled block-F activations (pre-head).
    pub fn extract_features(&self, batch: &Tensor<T>) -> Result<Mat<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cache = self.forward_cached(batch, false, &mut rng)?;
        Ok(cache.feats)
    }

    /// Backprop of the mean cross-entropy loss. `probs` must be the softmax
    /// of `cache.logits`. Auxiliary-stem gradients are skipped when frozen.
    pub fn backward(
        &self,
        batch: &Tensor<T>,
        cache: &ModelCache<T>,
        probs: &Mat<T>,
        labels: &[usize],
        grads: &mut ModelGrads<T>,
    ) {
        let last = self.main.len() - 1;
        let dlogits = softmax_xent_backward(probs, labels);
        let ddropped = self.head.backward(&cache.dropped, &dlogits, &mut grads.head);
        let dfeats_data = dropout_backward(&ddropped.data, &cache.drop_mask, self.config.dropout);
        let dfeats = Mat::from_vec(ddropped.rows, ddropped.cols, dfeats_data);
        let df = global_avg_pool_backward(cache.f.shape, &dfeats);
        let dfz = Tensor::from_vec(cache.fz.shape, relu_backward(&cache.fz.data, &df.data)).unwrap();
        let dboosted = self.fusion.backward(&cache.boosted, &dfz, &mut grads.fusion);

        let m = self.config.merged_widths();
        let parts = split_channels(&dboosted, &[m[last - 1], m[last], m[last - 1], m[last]]);

        let d_main_mid = pool2d_backward(
            cache.main[last - 1].out.shape,
            &DOWN_POOL,
            &cache.wd_pool,
            &parts[2],
        );
        stem_backward(
            &self.main,
            batch,
            &cache.main,
            &parts[3],
            Some(&d_main_mid),
            &mut grads.main,
        );

        if !self.aux_frozen {
            let d_aux_mid = pool2d_backward(
                cache.aux[last - 1].out.shape,
                &DOWN_POOL,
                &cache.wb_pool,
                &parts[0],
            );
            stem_backward(
                &self.aux,
                batch,
                &cache.aux,
                &parts[1],
                Some(&d_aux_mid),
                &mut grads.aux,
            );
        }
    }
}

/// Row-wise stabilized softmax (no loss attached).
pub fn softmax_rows<T: Scalar>(logits: &Mat<T>) -> Mat<T> {
    let mut probs = Mat::zeros(logits.rows, logits.cols);
    for r in 0..logits.rows {
        let row = logits.row(r);
        let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        let prow = probs.row_mut(r);
        for (p, &v) in prow.iter_mut().zip(row) {
            *p = (v - mx).exp();
            denom += *p;
        }
        for p in prow.iter_mut() {
            *p = *p / denom;
        }
    }
    probs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::max_rel_error;
    use crate::ops::softmax_xent_batch;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            stm_widths: vec![1, 1, 1],
            side: 16,
            seed: 1,
            ..ModelConfig::default()
        }
    }

    /// Closed-form parameter count straight from the config.
    fn expected_params(cfg: &ModelConfig) -> usize {
        let mut per_stem = 0;
        let mut in_c = cfg.in_channels;
        for &s in &cfg.stm_widths {
            // boundary + region 1x1 convs, dil1 + dil2 3x3 convs, each with bias
            per_stem += 2 * (s * in_c + s) + 2 * (9 * s * in_c + s);
            in_c = 4 * s;
        }
        let fusion = cfg.feature_dim() * cfg.fusion_in_channels() + cfg.feature_dim();
        let head = 2 * cfg.feature_dim() + 2;
        2 * per_stem + fusion + head
    }

    #[test]
    fn param_count_matches_closed_form() {
        for cfg in [ModelConfig::default(), tiny_config()] {
            let model = Model::build(cfg.clone()).unwrap();
            assert_eq!(model.num_params(), expected_params(&cfg));
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = Model::build(tiny_config()).unwrap();
        let b = Model::build(tiny_config()).unwrap();
        for ((pa, _), (pb, _)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn merged_widths_are_four_times_squeeze() {
        let cfg = tiny_config();
        assert_eq!(cfg.merged_widths(), vec![4, 4, 4]);
        assert_eq!(ModelConfig::default().merged_widths(), vec![128, 256, 512]);
    }

    #[test]
    fn bad_configs_rejected() {
        let mut cfg = tiny_config();
        cfg.stm_widths = vec![1, 1];
        assert!(Model::build(cfg).is_err());
        let mut cfg = tiny_config();
        cfg.stm_widths = vec![1, 0, 1];
        assert!(Model::build(cfg).is_err());
        let mut cfg = tiny_config();
        cfg.dropout = 1.0;
        assert!(Model::build(cfg).is_err());
    }

    #[test]
    fn config_text_round_trips_and_rejects_unknown_keys() {
        let cfg = tiny_config();
        assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(ModelConfig::from_text("bogus_key=3\n").is_err());
    }

    #[test]
    fn zero_input_zero_head_gives_half_half() {
        let mut model = Model::build(tiny_config()).unwrap();
        model.head.weight.iter_mut().for_each(|v| *v = 0.0);
        let x = Tensor::<f32>::zeros(Shape::new(2, 1, 16, 16));
        let (_, probs) = model.forward(&x).unwrap();
        for r in 0..probs.rows {
            assert_eq!(probs.row(r), &[0.5, 0.5]);
        }
    }

    #[test]
    fn probabilities_are_distributions() {
        let model = Model::build(tiny_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let shape = Shape::new(100, 1, 16, 16);
            let data = (0..shape.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
            let x = Tensor::from_vec(shape, data).unwrap();
            let (_, probs) = model.forward(&x).unwrap();
            for r in 0..probs.rows {
                let row = probs.row(r);
                assert!(row.iter().all(|p| *p >= 0.0));
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identical_images_give_identical_rows() {
        let model = Model::build(tiny_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let one: Vec<f32> = (0..256).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut data = one.clone();
        data.extend_from_slice(&one);
        data.extend_from_slice(&one);
        let x = Tensor::from_vec(Shape::new(3, 1, 16, 16), data).unwrap();
        let (_, probs) = model.forward(&x).unwrap();
        let feats = model.extract_features(&x).unwrap();
        assert_eq!(feats.rows, 3);
        assert_eq!(feats.cols, model.config.feature_dim());
        for r in 1..3 {
            assert_eq!(probs.row(0), probs.row(r));
            assert_eq!(feats.row(0), feats.row(r));
        }
    }

    #[test]
    fn zero_image_gives_zero_features() {
        // conv biases are zero at init, so a zero input stays zero
        let model = Model::build(tiny_config()).unwrap();
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 16, 16));
        let feats = model.extract_features(&x).unwrap();
        assert!(feats.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn input_shape_mismatch_rejected() {
        let model = Model::build(tiny_config()).unwrap();
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 32, 32));
        assert!(model.forward(&x).is_err());
    }

    #[test]
    fn fusion_channel_ledger() {
        let cfg = ModelConfig::default();
        let model = Model::build(cfg.clone()).unwrap();
        let m = cfg.merged_widths();
        assert_eq!(model.fusion.spec.in_channels, 2 * (m[1] + m[2]));
        assert_eq!(model.fusion.spec.out_channels, cfg.feature_dim());
    }

    #[test]
    fn end_to_end_grad_check() {
        let cfg = ModelConfig {
            stm_widths: vec![2, 2, 2],
            side: 16,
            dropout: 0.0, // finite differences need a deterministic loss
            seed: 4,
            ..ModelConfig::default()
        };
        let model = Model::build(cfg).unwrap().cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = Shape::new(2, 1, 16, 16);
        let data = (0..shape.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x = Tensor::from_vec(shape, data).unwrap();
        let labels = [0usize, 1];

        let cache = model.forward_cached(&x, true, &mut rng).unwrap();
        let (probs, _) = softmax_xent_batch(&cache.logits, &labels).unwrap();
        let mut grads = model.grads_zero();
        model.backward(&x, &cache, &probs, &labels, &mut grads);

        // flatten parameters and analytic gradients in traversal order
        let mut flat_params: Vec<f64> = Vec::new();
        for (p, _) in model.params() {
            flat_params.extend_from_slice(p);
        }
        let mut flat_grads: Vec<f64> = Vec::new();
        for g in grads.flat() {
            flat_grads.extend_from_slice(g);
        }
        assert_eq!(flat_params.len(), flat_grads.len());

        let model_cell = std::cell::RefCell::new(model.cast::<f64>());
        let err = max_rel_error(
            |p| {
                let mut m = model_cell.borrow_mut();
                let mut pos = 0;
                for (buf, _) in m.params_mut() {
                    let n = buf.len();
                    buf.copy_from_slice(&p[pos..pos + n]);
                    pos += n;
                }
                let mut r = ChaCha8Rng::seed_from_u64(0);
                let cache = m.forward_cached(&x, true, &mut r).unwrap();
                softmax_xent_batch(&cache.logits, &labels).unwrap().1
            },
            &mut flat_params,
            &flat_grads,
            1e-4,
        );
        assert!(err < 1e-3, "end-to-end rel err {err}");
    }
}
