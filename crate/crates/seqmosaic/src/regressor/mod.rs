//! Trainable homography regressor.
//!
//! A shared convolutional stem encodes the query, key and value patches, the
//! fusion head mixes the three feature maps, and a small fully connected
//! head regresses the six corner displacements. Backpropagation is
//! hand-derived layer by layer; the optimizer is momentum SGD. Training is
//! deterministic for a fixed seed: shuffles, initialization and gradient
//! accumulation order are all pinned.

pub mod checkpoint;
mod layers;

pub use layers::{
    channel_mean_subtract, channel_mean_subtract_backward, correlation_backward,
    correlation_forward, global_mean_pool, global_mean_pool_backward, max_pool2,
    max_pool2_backward, ncc_descriptor, relu_backward, relu_forward, ConvLayer, FcLayer,
    NccDescriptor,
};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frame::ImageFrame;
use crate::fusion::{fuse, fuse_backward, FrameTriple, FusionHead, Neighborhood};
use crate::homography::{
    affine_from_deltas, deltas_from_affine, AffineTransform, PatchCorners, ThreePointDelta,
};
use crate::pig::PigRecord;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Stem widths, in order; pooling halves the extent after layers 2 and 4.
pub const CONV_CHANNELS: [usize; 4] = [8, 8, 16, 16];
/// Embedding width of the fusion head.
pub const EMBED_CHANNELS: usize = 8;
/// Hidden width of the regression head.
pub const FC_HIDDEN: usize = 64;
/// Output dimension: (dx1, dx2, dx3, dy1, dy2, dy3).
pub const OUTPUT_DIM: usize = 6;
/// Largest correlation offset, in cells of the deepest feature map. With
/// two 2x2 pools, 4 cells reach 16 px at the input, covering the
/// perturbation box.
pub const CORR_RADIUS_MAX: usize = 4;
/// Scale on the normalized correlation descriptor, putting coefficients in
/// a range the momentum steps of the pinned learning rate can fit quickly.
pub const NCC_SCALE: f64 = 8.0;

/// Correlation offset radius for a deep map of the given extent.
pub fn corr_radius(spatial: usize) -> usize {
    CORR_RADIUS_MAX.min((spatial - 1) / 2)
}

/// Regression-head input width for a given patch extent: per-channel means
/// of the fused map plus the pooled correlation descriptor.
pub fn head_input_len(patch: usize) -> usize {
    let spatial = patch / 4;
    let side = 2 * corr_radius(spatial) + 1;
    CONV_CHANNELS[3] + side * side
}

/// Training hyperparameters; also snapshotted into trained models.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Square input patch extent in pixels; must be a multiple of 4.
    pub patch: usize,
    /// How many frames back the key frame sits during sequence estimation.
    pub key_offset: usize,
    /// Optional cap on minibatch updates, for fixed-iteration runs.
    pub max_iters: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            momentum: 0.9,
            batch: 16,
            epochs: 50,
            seed: 0,
            patch: 64,
            key_offset: 4,
            max_iters: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Range(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Range(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch == 0 {
            return Err(Error::Range("batch size must be >= 1".into()));
        }
        if self.patch < 8 || self.patch % 4 != 0 {
            return Err(Error::Range(format!(
                "patch extent must be a multiple of 4 and >= 8, got {}",
                self.patch
            )));
        }
        if self.key_offset == 0 {
            return Err(Error::Range("key offset must be >= 1".into()));
        }
        Ok(())
    }
}

/// The full set of learnable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorModel {
    conv: Vec<ConvLayer>,
    fusion: FusionHead,
    fc1: FcLayer,
    fc2: FcLayer,
    patch: usize,
    key_offset: usize,
    hyper: TrainConfig,
}

impl RegressorModel {
    /// Fresh model for `patch`-pixel inputs. Weights are Glorot-uniform from
    /// `seed` except the output layer, which is zeroed so the untrained model
    /// predicts the identity homography.
    pub fn new(patch: usize, key_offset: usize, seed: u64) -> Result<Self> {
        if patch < 8 || patch % 4 != 0 {
            return Err(Error::Range(format!(
                "patch extent must be a multiple of 4 and >= 8, got {patch}"
            )));
        }
        if key_offset == 0 {
            return Err(Error::Range("key offset must be >= 1".into()));
        }
        let mut rng = Rng::stream(seed, 0xC0DE);
        let mut conv = Vec::with_capacity(4);
        let mut in_ch = 1;
        for out_ch in CONV_CHANNELS {
            conv.push(ConvLayer::glorot(in_ch, out_ch, &mut rng));
            in_ch = out_ch;
        }
        let deep = CONV_CHANNELS[3];
        let fusion = FusionHead::glorot(deep, EMBED_CHANNELS, Neighborhood::EightNeighbor, &mut rng);
        let fc1 = FcLayer::glorot(head_input_len(patch), FC_HIDDEN, &mut rng);
        let fc2 = FcLayer::zeroed(FC_HIDDEN, OUTPUT_DIM);
        Ok(RegressorModel {
            conv,
            fusion,
            fc1,
            fc2,
            patch,
            key_offset,
            hyper: TrainConfig {
                patch,
                key_offset,
                seed,
                ..TrainConfig::default()
            },
        })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn key_offset(&self) -> usize {
        self.key_offset
    }

    /// Same model with a different key frame distance.
    pub fn with_key_offset(mut self, key_offset: usize) -> Result<Self> {
        if key_offset == 0 {
            return Err(Error::Range("key offset must be >= 1".into()));
        }
        self.key_offset = key_offset;
        self.hyper.key_offset = key_offset;
        Ok(self)
    }

    pub fn hyper(&self) -> &TrainConfig {
        &self.hyper
    }

    pub fn conv_layers(&self) -> &[ConvLayer] {
        &self.conv
    }

    pub fn fusion_head(&self) -> &FusionHead {
        &self.fusion
    }

    pub fn fc1(&self) -> &FcLayer {
        &self.fc1
    }

    pub fn fc2(&self) -> &FcLayer {
        &self.fc2
    }

    pub fn num_params(&self) -> usize {
        self.params_vec().len()
    }

    /// All parameters flattened in declaration order.
    pub fn params_vec(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.conv {
            out.extend_from_slice(layer.weight.data());
            out.extend_from_slice(&layer.bias);
        }
        out.extend_from_slice(self.fusion.w_theta().data());
        out.extend_from_slice(self.fusion.w_phi().data());
        out.extend_from_slice(self.fusion.w_g().data());
        out.extend_from_slice(self.fc1.weight.data());
        out.extend_from_slice(&self.fc1.bias);
        out.extend_from_slice(self.fc2.weight.data());
        out.extend_from_slice(&self.fc2.bias);
        out
    }

    /// Overwrite all parameters from a flat vector (declaration order).
    pub fn set_params_vec(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "parameter vector of {} values, model has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut pos = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&flat[pos..pos + dst.len()]);
            pos += dst.len();
        };
        for layer in &mut self.conv {
            take(layer.weight.data_mut());
            take(&mut layer.bias);
        }
        for w in self.fusion.weights_mut() {
            take(w.data_mut());
        }
        take(self.fc1.weight.data_mut());
        take(&mut self.fc1.bias);
        take(self.fc2.weight.data_mut());
        take(&mut self.fc2.bias);
        Ok(())
    }

    /// True when every parameter is finite.
    pub fn is_finite(&self) -> bool {
        self.params_vec().iter().all(|v| v.is_finite())
    }

    fn set_hyper(&mut self, cfg: &TrainConfig) {
        self.hyper = cfg.clone();
        self.key_offset = cfg.key_offset;
    }

    pub(crate) fn from_parts(
        conv: Vec<ConvLayer>,
        fusion: FusionHead,
        fc1: FcLayer,
        fc2: FcLayer,
        patch: usize,
        key_offset: usize,
        hyper: TrainConfig,
    ) -> Self {
        RegressorModel {
            conv,
            fusion,
            fc1,
            fc2,
            patch,
            key_offset,
            hyper,
        }
    }
}

struct StreamCache {
    conv_in: Vec<Tensor>,
    conv_pre: Vec<Tensor>,
    pool_arg: [Vec<u32>; 2],
    pool_in_shape: [[usize; 3]; 2],
    features: Tensor,
}

struct ForwardCache {
    streams: [StreamCache; 3],
    ncc: layers::NccDescriptor,
    /// [pooled fused channels, normalized correlation descriptor] feeding fc1.
    head_in: Vec<f64>,
    fc1_pre: Vec<f64>,
    fc1_out: Vec<f64>,
    pred: [f64; OUTPUT_DIM],
}

fn stem_forward(model: &RegressorModel, input: &Tensor) -> Result<StreamCache> {
    let mut conv_in = Vec::with_capacity(4);
    let mut conv_pre = Vec::with_capacity(4);
    let mut pool_arg: [Vec<u32>; 2] = [Vec::new(), Vec::new()];
    let mut pool_in_shape = [[0usize; 3]; 2];

    let mut x = input.clone();
    let mut pool_idx = 0;
    for (i, layer) in model.conv.iter().enumerate() {
        conv_in.push(x.clone());
        let pre = layer.forward(&x)?;
        conv_pre.push(pre.clone());
        x = relu_forward(&pre);
        if i == 1 || i == 3 {
            pool_in_shape[pool_idx] = [x.shape()[0], x.shape()[1], x.shape()[2]];
            let (pooled, arg) = max_pool2(&x)?;
            pool_arg[pool_idx] = arg;
            pool_idx += 1;
            x = pooled;
        }
    }
    Ok(StreamCache {
        conv_in,
        conv_pre,
        pool_arg,
        pool_in_shape,
        features: x,
    })
}

fn stem_backward(
    model: &RegressorModel,
    cache: &StreamCache,
    grad_features: &Tensor,
    conv_grads: &mut [(Tensor, Vec<f64>)],
) -> Result<()> {
    // walk the stem in reverse: pool2, conv4, conv3, pool1, conv2, conv1
    let mut grad = max_pool2_backward(&cache.pool_arg[1], grad_features, &cache.pool_in_shape[1])?;
    for i in (2..4).rev() {
        grad = relu_backward(&cache.conv_pre[i], &grad);
        let (gw, gb, gin) = model.conv[i].backward(&cache.conv_in[i], &grad)?;
        accumulate(&mut conv_grads[i], &gw, &gb);
        grad = gin;
    }
    grad = max_pool2_backward(&cache.pool_arg[0], &grad, &cache.pool_in_shape[0])?;
    for i in (0..2).rev() {
        grad = relu_backward(&cache.conv_pre[i], &grad);
        let (gw, gb, gin) = model.conv[i].backward(&cache.conv_in[i], &grad)?;
        accumulate(&mut conv_grads[i], &gw, &gb);
        grad = gin;
    }
    Ok(())
}

fn accumulate(slot: &mut (Tensor, Vec<f64>), gw: &Tensor, gb: &[f64]) {
    for (dst, src) in slot.0.data_mut().iter_mut().zip(gw.data()) {
        *dst += src;
    }
    for (dst, src) in slot.1.iter_mut().zip(gb) {
        *dst += src;
    }
}

fn add_into(dst: &mut Tensor, src: &Tensor) {
    debug_assert_eq!(dst.shape(), src.shape());
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

fn forward_cached(model: &RegressorModel, triple: &FrameTriple) -> Result<ForwardCache> {
    let expected = [1, model.patch, model.patch];
    if triple.query.shape() != expected {
        return Err(Error::Dimension(format!(
            "regressor expects patches of shape {expected:?}, got {:?}",
            triple.query.shape()
        )));
    }
    let q = stem_forward(model, &triple.query)?;
    let k = stem_forward(model, &triple.key)?;
    let v = stem_forward(model, &triple.value)?;
    let fused = fuse(
        &model.fusion,
        &FrameTriple::new(q.features.clone(), k.features.clone(), v.features.clone())?,
    )?;
    let radius = corr_radius(model.patch / 4);
    let ncc = layers::ncc_descriptor(&q.features, &v.features, radius, NCC_SCALE)?;

    let mut head_in = layers::global_mean_pool(&fused);
    head_in.extend_from_slice(&ncc.values);
    let fc1_pre = model.fc1.forward(&head_in)?;
    let fc1_out: Vec<f64> = fc1_pre.iter().map(|&x| x.max(0.0)).collect();
    let out = model.fc2.forward(&fc1_out)?;
    let mut pred = [0.0; OUTPUT_DIM];
    pred.copy_from_slice(&out);
    Ok(ForwardCache {
        streams: [q, k, v],
        ncc,
        head_in,
        fc1_pre,
        fc1_out,
        pred,
    })
}

/// Predict the three corner displacements for a query/key/value patch triple.
pub fn forward(model: &RegressorModel, triple: &FrameTriple) -> Result<ThreePointDelta> {
    let cache = forward_cached(model, triple)?;
    Ok(ThreePointDelta::from_flat(cache.pred))
}

/// Regression-head input and hidden activations for a triple; used by tests
/// and diagnostics to inspect the feature pathway.
pub fn debug_head_features(model: &RegressorModel, triple: &FrameTriple) -> Result<(Vec<f64>, Vec<f64>)> {
    let cache = forward_cached(model, triple)?;
    Ok((cache.head_in, cache.fc1_out))
}

/// Distances to the nonsmooth points of the forward pass: the minimum
/// |pre-activation| across all ReLUs and the minimum winner/runner-up gap
/// across pooling windows (where the winner is positive). Finite-difference
/// checks are only valid on instances where both margins comfortably exceed
/// the probe step.
pub fn kink_margins(model: &RegressorModel, triple: &FrameTriple) -> Result<(f64, f64)> {
    let cache = forward_cached(model, triple)?;
    let mut relu_margin = f64::MAX;
    let mut pool_gap = f64::MAX;
    for stream in &cache.streams {
        for pre in &stream.conv_pre {
            for &v in pre.data() {
                relu_margin = relu_margin.min(v.abs());
            }
        }
        // pooling consumes the ReLU outputs of conv layers 2 and 4
        for &idx in &[1usize, 3] {
            let post = relu_forward(&stream.conv_pre[idx]);
            pool_gap = pool_gap.min(min_pool_gap(&post));
        }
    }
    for &v in &cache.fc1_pre {
        relu_margin = relu_margin.min(v.abs());
    }
    Ok((relu_margin, pool_gap))
}

/// Smallest (max - second_max) over 2x2 windows whose maximum is positive.
/// Windows that pool to zero are ignored: ReLU already zeroes their gradient
/// path, so ties there cannot flip anything.
fn min_pool_gap(t: &Tensor) -> f64 {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let data = t.data();
    let mut min_gap = f64::MAX;
    for ci in 0..c {
        let plane = ci * h * w;
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                let base = plane + 2 * oy * w + 2 * ox;
                let vals = [data[base], data[base + 1], data[base + w], data[base + w + 1]];
                let mut max = f64::MIN;
                let mut second = f64::MIN;
                for &v in &vals {
                    if v > max {
                        second = max;
                        max = v;
                    } else if v > second {
                        second = v;
                    }
                }
                if max > 0.0 {
                    min_gap = min_gap.min(max - second);
                }
            }
        }
    }
    min_gap
}

/// Euclidean loss `L = 1/2 Σ (pred_i - truth_i)^2` over the six outputs.
pub fn euclidean_loss(pred: &ThreePointDelta, truth: &ThreePointDelta) -> f64 {
    pred.to_flat()
        .iter()
        .zip(truth.to_flat())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        * 0.5
}

/// Gradients for every parameter group, in declaration order.
#[derive(Debug, Clone)]
pub struct ModelGradients {
    pub conv: Vec<(Tensor, Vec<f64>)>,
    pub w_theta: Tensor,
    pub w_phi: Tensor,
    pub w_g: Tensor,
    pub fc1_w: Tensor,
    pub fc1_b: Vec<f64>,
    pub fc2_w: Tensor,
    pub fc2_b: Vec<f64>,
}

impl ModelGradients {
    /// Flatten in the same order as [`RegressorModel::params_vec`].
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.conv {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out.extend_from_slice(self.w_theta.data());
        out.extend_from_slice(self.w_phi.data());
        out.extend_from_slice(self.w_g.data());
        out.extend_from_slice(self.fc1_w.data());
        out.extend_from_slice(&self.fc1_b);
        out.extend_from_slice(self.fc2_w.data());
        out.extend_from_slice(&self.fc2_b);
        out
    }
}

/// Loss and gradients of [`euclidean_loss`] w.r.t. every parameter for one
/// sample.
pub fn backward(
    model: &RegressorModel,
    triple: &FrameTriple,
    truth: &ThreePointDelta,
) -> Result<(f64, ModelGradients)> {
    let cache = forward_cached(model, triple)?;
    let truth_flat = truth.to_flat();
    let loss = cache
        .pred
        .iter()
        .zip(truth_flat)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        * 0.5;

    // dL/dpred for the Euclidean loss
    let d_pred: Vec<f64> = cache.pred.iter().zip(truth_flat).map(|(p, t)| p - t).collect();

    let (fc2_gw, fc2_gb, d_fc1_out) = model.fc2.backward(&cache.fc1_out, &d_pred)?;
    let d_fc1_pre: Vec<f64> = cache
        .fc1_pre
        .iter()
        .zip(&d_fc1_out)
        .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
        .collect();
    let (fc1_gw, fc1_gb, d_head_in) = model.fc1.backward(&cache.head_in, &d_fc1_pre)?;

    let feat_shape = cache.streams[0].features.shape().to_vec();
    let deep = feat_shape[0];
    let d_fused = layers::global_mean_pool_backward(&d_head_in[..deep], &feat_shape)?;
    let feature_triple = FrameTriple::new(
        cache.streams[0].features.clone(),
        cache.streams[1].features.clone(),
        cache.streams[2].features.clone(),
    )?;
    let fusion_grads = fuse_backward(&model.fusion, &feature_triple, &d_fused)?;

    let (corr_dq, corr_dv) = cache.ncc.backward(&d_head_in[deep..])?;
    let mut d_feat_q = fusion_grads.query.clone();
    let mut d_feat_v = fusion_grads.value.clone();
    add_into(&mut d_feat_q, &corr_dq);
    add_into(&mut d_feat_v, &corr_dv);

    let mut conv_grads: Vec<(Tensor, Vec<f64>)> = model
        .conv
        .iter()
        .map(|l| (Tensor::zeros(l.weight.shape()), vec![0.0; l.bias.len()]))
        .collect();
    // shared stem: gradients from the three streams accumulate
    stem_backward(model, &cache.streams[0], &d_feat_q, &mut conv_grads)?;
    stem_backward(model, &cache.streams[1], &fusion_grads.key, &mut conv_grads)?;
    stem_backward(model, &cache.streams[2], &d_feat_v, &mut conv_grads)?;

    Ok((
        loss,
        ModelGradients {
            conv: conv_grads,
            w_theta: fusion_grads.w_theta,
            w_phi: fusion_grads.w_phi,
            w_g: fusion_grads.w_g,
            fc1_w: fc1_gw,
            fc1_b: fc1_gb,
            fc2_w: fc2_gw,
            fc2_b: fc2_gb,
        },
    ))
}

/// One momentum-SGD update: `v <- momentum v - lr g`, `p <- p + v`.
pub fn momentum_step(params: &mut [f64], velocity: &mut [f64], grads: &[f64], lr: f64, momentum: f64) {
    debug_assert_eq!(params.len(), velocity.len());
    debug_assert_eq!(params.len(), grads.len());
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
}

/// A training sample: the patch triple plus its target displacements.
pub type Sample = (FrameTriple, ThreePointDelta);

/// Convert a perturbed pair into a training sample by centre-cropping both
/// frames to `patch` pixels. The moving (perturbed) frame enters as the
/// value stream so the head's value/key affinity compares it against the
/// template; the query and key are both the unperturbed template, the only
/// history a two-frame record carries.
pub fn record_to_sample(record: &PigRecord, patch: usize) -> Result<Sample> {
    let (fa, fb) = (&record.frame_a, &record.frame_b);
    if fa.width() != fb.width() || fa.height() != fb.height() {
        return Err(Error::Dimension("record frames differ in size".into()));
    }
    if fa.width() < patch || fa.height() < patch {
        return Err(Error::Dimension(format!(
            "frames of {}x{} cannot provide a {patch}-pixel patch",
            fa.width(),
            fa.height()
        )));
    }
    let ox = (fa.width() - patch) / 2;
    let oy = (fa.height() - patch) / 2;
    let crop = |img: &ImageFrame| -> Tensor {
        Tensor::from_fn(&[1, patch, patch], |i| {
            let y = i / patch;
            let x = i % patch;
            img.get(ox + x, oy + y)
        })
    };
    let triple = FrameTriple::new(crop(fa), crop(fa), crop(fb))?;
    let target = truth_to_patch_deltas(&record.truth, ox as f64, oy as f64, patch);
    Ok((triple, target))
}

/// Express a frame-coordinate transform as corner displacements of a
/// patch-local rectangle with origin (ox, oy).
pub fn truth_to_patch_deltas(truth: &AffineTransform, ox: f64, oy: f64, patch: usize) -> ThreePointDelta {
    let to_patch = AffineTransform::translation(-ox, -oy)
        .compose(truth)
        .compose(&AffineTransform::translation(ox, oy));
    deltas_from_affine(&patch_rect(patch), &to_patch)
}

/// The patch-local reference rectangle (0, 0) .. (patch-1, patch-1).
pub fn patch_rect(patch: usize) -> PatchCorners {
    PatchCorners::of_frame(patch, patch)
}

/// Per-epoch log row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Minibatch updates completed so far.
    pub iterations: usize,
    pub train_loss: f64,
    pub holdout_corner_error_px: f64,
}

/// Training history; row 0 captures the untrained model.
#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub rows: Vec<EpochStats>,
    pub iterations: usize,
}

impl TrainingLog {
    pub const CSV_HEADER: &'static str = "epoch,iterations,train_loss,holdout_corner_error_px";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.epoch, row.iterations, row.train_loss, row.holdout_corner_error_px
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::fsutil::write_atomic(path.as_ref(), self.to_csv().as_bytes())
    }
}

/// Mean corner error in pixels: per sample, the mean Euclidean distance
/// between predicted and true target corners over the three parameterizing
/// corners.
pub fn mean_corner_error(model: &RegressorModel, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let errors = samples
        .par_iter()
        .map(|(triple, truth)| {
            let pred = forward(model, triple)?;
            let err = pred
                .deltas
                .iter()
                .zip(truth.deltas)
                .map(|(p, t)| ((p.0 - t.0).powi(2) + (p.1 - t.1).powi(2)).sqrt())
                .sum::<f64>()
                / 3.0;
            Ok(err)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(errors.iter().sum::<f64>() / errors.len() as f64)
}

fn mean_loss(model: &RegressorModel, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let losses = samples
        .par_iter()
        .map(|(triple, truth)| Ok(euclidean_loss(&forward(model, triple)?, truth)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Train with momentum SGD. `holdout` is only evaluated, never trained on.
///
/// Per-sample gradients inside a batch are computed in parallel but reduced
/// in index order, so the run is bit-reproducible for a fixed seed.
pub fn train(
    mut model: RegressorModel,
    dataset: &[PigRecord],
    cfg: &TrainConfig,
    holdout: &[PigRecord],
) -> Result<(RegressorModel, TrainingLog)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Range("training dataset is empty".into()));
    }
    if cfg.patch != model.patch {
        return Err(Error::Dimension(format!(
            "config patch {} does not match model patch {}",
            cfg.patch, model.patch
        )));
    }

    let samples: Vec<Sample> = dataset
        .iter()
        .map(|r| record_to_sample(r, cfg.patch))
        .collect::<Result<_>>()?;
    let eval: Vec<Sample> = holdout
        .iter()
        .map(|r| record_to_sample(r, cfg.patch))
        .collect::<Result<_>>()?;

    let mut log = TrainingLog::default();
    log.rows.push(EpochStats {
        epoch: 0,
        iterations: 0,
        train_loss: mean_loss(&model, &samples)?,
        holdout_corner_error_px: mean_corner_error(&model, &eval)?,
    });

    let mut params = model.params_vec();
    let mut velocity = vec![0.0; params.len()];
    let mut iterations = 0usize;
    let max_iters = cfg.max_iters.unwrap_or(usize::MAX);

    'epochs: for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        Rng::stream(cfg.seed, 0x50_0000 + epoch as u64).shuffle(&mut order);

        let mut epoch_loss_sum = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            if iterations >= max_iters {
                break 'epochs;
            }
            let per_sample: Vec<(f64, Vec<f64>)> = chunk
                .par_iter()
                .map(|&idx| {
                    let (triple, truth) = &samples[idx];
                    let (loss, grads) = backward(&model, triple, truth)?;
                    Ok((loss, grads.to_vec()))
                })
                .collect::<Result<_>>()?;

            // batch loss and gradient are per-sample means
            let inv = 1.0 / chunk.len() as f64;
            let mut batch_loss = 0.0;
            let mut grads = vec![0.0; params.len()];
            for (loss, g) in &per_sample {
                batch_loss += loss;
                for (dst, src) in grads.iter_mut().zip(g) {
                    *dst += src;
                }
            }
            batch_loss *= inv;
            for g in &mut grads {
                *g *= inv;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    iteration: iterations,
                });
            }

            momentum_step(&mut params, &mut velocity, &grads, cfg.lr, cfg.momentum);
            model.set_params_vec(&params)?;
            iterations += 1;
            epoch_loss_sum += batch_loss;
            epoch_batches += 1;
        }

        if epoch_batches > 0 {
            log.rows.push(EpochStats {
                epoch,
                iterations,
                train_loss: epoch_loss_sum / epoch_batches as f64,
                holdout_corner_error_px: mean_corner_error(&model, &eval)?,
            });
        }
        if iterations >= max_iters {
            break;
        }
    }

    // final evaluation row when stopping mid-epoch
    if log.rows.last().map(|r| r.iterations) != Some(iterations) {
        log.rows.push(EpochStats {
            epoch: log.rows.len(),
            iterations,
            train_loss: mean_loss(&model, &samples)?,
            holdout_corner_error_px: mean_corner_error(&model, &eval)?,
        });
    }

    if !model.is_finite() {
        return Err(Error::Numeric("trained parameters contain non-finite values".into()));
    }
    log.iterations = iterations;
    model.set_hyper(cfg);
    Ok((model, log))
}

/// Estimate relative transforms for a frame sequence: entry 0 is the
/// identity, entry t maps frame-t coordinates onto frame-(t-1) coordinates.
///
/// Frame t enters as the value stream (the moving frame); the query is its
/// immediate predecessor and the key frame sits `key_offset` frames back
/// (clamped at the sequence start), supplying longer-range context.
pub fn estimate_sequence(model: &RegressorModel, frames: &[ImageFrame]) -> Result<Vec<AffineTransform>> {
    if frames.is_empty() {
        return Err(Error::Range("no frames to estimate".into()));
    }
    let patch = model.patch;
    for (i, f) in frames.iter().enumerate() {
        if f.width() < patch || f.height() < patch {
            return Err(Error::Dimension(format!(
                "frame {i} is {}x{}, smaller than the {patch}-pixel model patch",
                f.width(),
                f.height()
            )));
        }
    }
    let ox = (frames[0].width() - patch) / 2;
    let oy = (frames[0].height() - patch) / 2;
    let crop = |img: &ImageFrame| -> Tensor {
        Tensor::from_fn(&[1, patch, patch], |i| {
            let y = i / patch;
            let x = i % patch;
            img.get(ox + x, oy + y)
        })
    };
    let rect = patch_rect(patch);
    let to_frame = AffineTransform::translation(ox as f64, oy as f64);
    let to_patch = AffineTransform::translation(-(ox as f64), -(oy as f64));

    let mut relative = Vec::with_capacity(frames.len());
    relative.push(AffineTransform::IDENTITY);
    for t in 1..frames.len() {
        let key_idx = t.saturating_sub(model.key_offset);
        let triple = FrameTriple::new(crop(&frames[t - 1]), crop(&frames[key_idx]), crop(&frames[t]))?;
        let deltas = forward(model, &triple)?;
        // the prediction maps previous-frame patch coordinates onto
        // current-frame patch coordinates; the relative transform is its
        // inverse, lifted back to frame coordinates
        let local = affine_from_deltas(&rect, &deltas)?;
        let in_frame = to_frame.compose(&local).compose(&to_patch);
        relative.push(in_frame.invert()?);
    }
    Ok(relative)
}
