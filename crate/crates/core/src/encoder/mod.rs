//! Query/key convolutional encoders.
//!
//! Both sides share one architecture: a stack of 3x3 stride-2 convolutions
//! with batch norm and leaky-ReLU, a 1x1 channel squeeze to a single-channel spatial map
//! (the contrastive embedding), and, on the query side only, a linear
//! classifier over the globally averaged feature map. The key side is never
//! touched by gradients; it follows the query side by exponential moving
//! average.

pub mod conv;

use ndarray::{Array1, Array2, Array3, Axis};
use rayon::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{DclError, Result};
use crate::imageops::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Channel depth `C` of the final feature map.
    pub channels: usize,
    /// Number of stride-2 blocks.
    pub blocks: usize,
    pub input_size: usize,
    /// EMA coefficient for the key encoder.
    pub beta: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: 64,
            blocks: 4,
            input_size: 96,
            beta: 0.99,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(DclError::config("encoder.blocks", "must be >= 1"));
        }
        if self.channels == 0 {
            return Err(DclError::config("encoder.channels", "must be >= 1"));
        }
        let div = 1usize << self.blocks;
        if self.input_size % div != 0 || self.input_size / div < 2 {
            return Err(DclError::config(
                "encoder.input_size",
                format!(
                    "{} must be a multiple of 2^blocks = {div} with at least a 2x2 feature map",
                    self.input_size
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(DclError::config("encoder.beta", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Side length `H' = W'` of the feature map.
    pub fn feature_size(&self) -> usize {
        self.input_size >> self.blocks
    }

    /// Number of spatial locations `H' * W'`.
    pub fn locations(&self) -> usize {
        self.feature_size() * self.feature_size()
    }

    /// Output channels of each block; widths double up to `channels`.
    pub fn widths(&self) -> Vec<usize> {
        let floor = self.channels.min(16);
        (0..self.blocks)
            .map(|b| (self.channels >> (self.blocks - 1 - b)).max(floor))
            .collect()
    }
}

/// Flattened spatial map produced by the 1x1 squeeze. Stored unnormalized.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialEmbedding {
    pub values: Vec<f32>,
}

impl SpatialEmbedding {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

/// Batch-norm epsilon and running-statistics momentum.
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Convolution (no bias), batch norm, leaky-ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    /// `(out_channels, in_channels * 9)`
    pub weight: Array2<f32>,
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
}

/// One side (query or key) of the encoder: block stack plus 1x1 squeeze.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub blocks: Vec<ConvBlock>,
    pub squeeze_weight: Array1<f32>,
    pub squeeze_bias: Array1<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub weight: Array1<f32>,
    pub bias: Array1<f32>,
}

/// Named parameter tensor view, used for checkpointing and optimizer state.
pub struct ParamView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f32],
}

/// Batch norm normalizes with batch statistics in `Train` and running
/// statistics in `Eval`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-block, per-channel batch statistics of one train-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<Array1<f64>>,
    /// Biased variance.
    pub var: Vec<Array1<f64>>,
    /// Values per channel (batch size times locations), per block.
    pub count: Vec<usize>,
}

#[derive(Clone, Debug)]
struct BlockCache {
    cols: Vec<Array2<f32>>,
    xhat: Vec<Array2<f32>>,
    pre: Vec<Array2<f32>>,
    inv_std: Array1<f32>,
    in_dims: (usize, usize, usize),
}

impl Encoder {
    fn init(config: &EncoderConfig, rng: &mut impl Rng) -> Encoder {
        let mut in_ch = INPUT_CHANNELS;
        let mut blocks = Vec::with_capacity(config.blocks);
        for out_ch in config.widths() {
            let fan_in = in_ch * conv::KERNEL * conv::KERNEL;
            let bound = 1.0 / (fan_in as f32).sqrt();
            blocks.push(ConvBlock {
                weight: Array2::from_shape_simple_fn((out_ch, fan_in), || rng.gen_range(-bound..bound)),
                gamma: Array1::ones(out_ch),
                beta: Array1::zeros(out_ch),
                running_mean: Array1::zeros(out_ch),
                running_var: Array1::ones(out_ch),
            });
            in_ch = out_ch;
        }
        let normal = Normal::new(0.0, 1.0 / (config.channels as f64).sqrt()).expect("valid std");
        Encoder {
            blocks,
            squeeze_weight: Array1::from_shape_simple_fn(config.channels, || normal.sample(rng) as f32),
            squeeze_bias: Array1::zeros(1),
        }
    }

    fn zeros_like(&self) -> Encoder {
        Encoder {
            blocks: self
                .blocks
                .iter()
                .map(|b| ConvBlock {
                    weight: Array2::zeros(b.weight.dim()),
                    gamma: Array1::zeros(b.gamma.dim()),
                    beta: Array1::zeros(b.beta.dim()),
                    running_mean: Array1::zeros(b.running_mean.dim()),
                    running_var: Array1::zeros(b.running_var.dim()),
                })
                .collect(),
            squeeze_weight: Array1::zeros(self.squeeze_weight.dim()),
            squeeze_bias: Array1::zeros(1),
        }
    }

    /// Gradient-trained tensors, in a fixed order.
    pub fn params(&self) -> Vec<ParamView<'_>> {
        let mut out = Vec::with_capacity(3 * self.blocks.len() + 2);
        for (i, b) in self.blocks.iter().enumerate() {
            out.push(view(format!("block{i}.weight"), b.weight.shape(), b.weight.as_slice()));
            out.push(view(format!("block{i}.gamma"), b.gamma.shape(), b.gamma.as_slice()));
            out.push(view(format!("block{i}.beta"), b.beta.shape(), b.beta.as_slice()));
        }
        out.push(view("squeeze.weight".into(), self.squeeze_weight.shape(), self.squeeze_weight.as_slice()));
        out.push(view("squeeze.bias".into(), self.squeeze_bias.shape(), self.squeeze_bias.as_slice()));
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = Vec::with_capacity(3 * self.blocks.len() + 2);
        for b in &mut self.blocks {
            out.push(b.weight.as_slice_mut().expect("standard layout"));
            out.push(b.gamma.as_slice_mut().expect("standard layout"));
            out.push(b.beta.as_slice_mut().expect("standard layout"));
        }
        out.push(self.squeeze_weight.as_slice_mut().expect("standard layout"));
        out.push(self.squeeze_bias.as_slice_mut().expect("standard layout"));
        out
    }

    /// Batch-norm running statistics.
    pub fn buffers(&self) -> Vec<ParamView<'_>> {
        let mut out = Vec::with_capacity(2 * self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            out.push(view(format!("block{i}.running_mean"), b.running_mean.shape(), b.running_mean.as_slice()));
            out.push(view(format!("block{i}.running_var"), b.running_var.shape(), b.running_var.as_slice()));
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = Vec::with_capacity(2 * self.blocks.len());
        for b in &mut self.blocks {
            out.push(b.running_mean.as_slice_mut().expect("standard layout"));
            out.push(b.running_var.as_slice_mut().expect("standard layout"));
        }
        out
    }

    /// Blend one pass's batch statistics into the running statistics. The
    /// running variance uses the unbiased estimate.
    pub fn update_running_stats(&mut self, stats: &BatchStats) -> Result<()> {
        if stats.mean.len() != self.blocks.len() {
            return Err(DclError::shape("batch statistics do not match the block stack"));
        }
        let m = BN_MOMENTUM;
        for (b, block) in self.blocks.iter_mut().enumerate() {
            let count = stats.count[b] as f64;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            for ch in 0..block.gamma.len() {
                let rm = block.running_mean[ch] as f64;
                let rv = block.running_var[ch] as f64;
                block.running_mean[ch] = ((1.0 - m) * rm + m * stats.mean[b][ch]) as f32;
                block.running_var[ch] = ((1.0 - m) * rv + m * stats.var[b][ch] * unbias) as f32;
            }
        }
        Ok(())
    }

    /// Block stack over a batch of CHW inputs. Returns per-sample `(C, H' * W')`
    /// activations, the backprop cache (train mode with `keep_cache`) and the
    /// batch statistics (train mode).
    fn run_batch(
        &self,
        inputs: Vec<Array3<f32>>,
        mode: Mode,
        keep_cache: bool,
    ) -> (Vec<Array2<f32>>, Vec<BlockCache>, Option<BatchStats>) {
        let mut caches = Vec::new();
        let mut stats = BatchStats {
            mean: Vec::new(),
            var: Vec::new(),
            count: Vec::new(),
        };
        let mut xs = inputs;
        let mut acts: Vec<Array2<f32>> = Vec::new();
        for block in &self.blocks {
            let in_dims = xs[0].dim();
            let (ho, wo) = (conv::out_size(in_dims.1), conv::out_size(in_dims.2));
            let lowered: Vec<(Array2<f32>, Array2<f32>)> = xs
                .par_iter()
                .map(|x| {
                    let cols = conv::im2col(x.view());
                    let z = block.weight.dot(&cols);
                    (cols, z)
                })
                .collect();
            let out_ch = block.weight.nrows();
            let (mean, var) = match mode {
                Mode::Train => {
                    let count = (lowered.len() * ho * wo) as f64;
                    let mut mean = Array1::<f64>::zeros(out_ch);
                    let mut sq = Array1::<f64>::zeros(out_ch);
                    for (_, z) in &lowered {
                        for ch in 0..out_ch {
                            for &v in z.row(ch) {
                                mean[ch] += v as f64;
                                sq[ch] += (v as f64) * (v as f64);
                            }
                        }
                    }
                    mean /= count;
                    let var = Array1::from_shape_fn(out_ch, |ch| (sq[ch] / count - mean[ch] * mean[ch]).max(0.0));
                    stats.count.push(lowered.len() * ho * wo);
                    (mean, var)
                }
                Mode::Eval => (block.running_mean.mapv(f64::from), block.running_var.mapv(f64::from)),
            };
            let inv_std = var.mapv(|v| (1.0 / (v + BN_EPS).sqrt()) as f32);
            let shift = Array1::from_shape_fn(out_ch, |ch| mean[ch] as f32);
            let normed: Vec<(Array2<f32>, Array2<f32>)> = lowered
                .par_iter()
                .map(|(_, z)| {
                    let mut xhat = z - &shift.view().insert_axis(Axis(1));
                    xhat *= &inv_std.view().insert_axis(Axis(1));
                    let mut pre = &xhat * &block.gamma.view().insert_axis(Axis(1));
                    pre += &block.beta.view().insert_axis(Axis(1));
                    (xhat, pre)
                })
                .collect();
            acts = normed.par_iter().map(|(_, pre)| pre.mapv(conv::leaky_relu)).collect();
            xs = acts
                .iter()
                .map(|a| a.clone().into_shape_with_order((out_ch, ho, wo)).expect("contiguous activation"))
                .collect();
            if mode == Mode::Train {
                stats.mean.push(mean);
                stats.var.push(var);
            }
            if keep_cache && mode == Mode::Train {
                let (cols, _): (Vec<_>, Vec<_>) = lowered.into_iter().unzip();
                let (xhat, pre): (Vec<_>, Vec<_>) = normed.into_iter().unzip();
                caches.push(BlockCache {
                    cols,
                    xhat,
                    pre,
                    inv_std,
                    in_dims,
                });
            }
        }
        let stats = (mode == Mode::Train).then_some(stats);
        (acts, caches, stats)
    }

    fn squeeze(&self, features: &Array2<f32>) -> SpatialEmbedding {
        let mut q = self.squeeze_weight.dot(features);
        q += self.squeeze_bias[0];
        SpatialEmbedding { values: q.to_vec() }
    }
}

impl Classifier {
    fn zeros(channels: usize) -> Classifier {
        Classifier {
            weight: Array1::zeros(channels),
            bias: Array1::zeros(1),
        }
    }

    pub fn params(&self) -> Vec<ParamView<'_>> {
        vec![
            view("classifier.weight".into(), self.weight.shape(), self.weight.as_slice()),
            view("classifier.bias".into(), self.bias.shape(), self.bias.as_slice()),
        ]
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f32]> {
        vec![
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

fn view<'a>(name: String, shape: &[usize], data: Option<&'a [f32]>) -> ParamView<'a> {
    ParamView {
        name,
        shape: shape.to_vec(),
        data: data.expect("standard layout"),
    }
}

/// Query-side forward result for one sample.
#[derive(Clone, Debug)]
pub struct QueryOutput {
    /// `(C, H', W')`
    pub feature_map: Array3<f32>,
    pub query: SpatialEmbedding,
    pub logit: f32,
    /// Globally averaged feature map (the classifier input).
    pub pooled: Array1<f32>,
}

impl QueryOutput {
    /// Feature map as a `(H' * W') x C` matrix of per-location vectors.
    pub fn locations(&self) -> Array2<f32> {
        feature_rows(&self.feature_map)
    }
}

/// Train-mode query pass over a batch, carrying what backprop needs.
#[derive(Clone, Debug)]
pub struct QueryBatch {
    pub outputs: Vec<QueryOutput>,
    pub stats: BatchStats,
    cache: Vec<BlockCache>,
}

/// Upstream gradients of one sample's query outputs. `d_features` is
/// `(H' * W') x C` (location rows), matching [`QueryOutput::locations`].
#[derive(Clone, Copy, Debug, Default)]
pub struct Upstream<'a> {
    pub d_features: Option<&'a Array2<f32>>,
    pub d_query: Option<&'a [f32]>,
    pub d_logit: f32,
}

/// `(C, H', W') -> (H' * W', C)`, rows in row-major location order.
pub fn feature_rows(feature_map: &Array3<f32>) -> Array2<f32> {
    let (c, h, w) = feature_map.dim();
    feature_map
        .to_shape((c, h * w))
        .expect("contiguous feature map")
        .t()
        .as_standard_layout()
        .to_owned()
}

/// Gradients for every gradient-trained parameter (query encoder + classifier).
#[derive(Clone, Debug, PartialEq)]
pub struct QueryGrads {
    pub encoder: Encoder,
    pub classifier: Classifier,
}

impl QueryGrads {
    pub fn add_assign(&mut self, other: &QueryGrads) {
        let mine = self.slices_mut();
        let theirs = other.params();
        for (dst, src) in mine.into_iter().zip(theirs) {
            dst.iter_mut().zip(src.data).for_each(|(d, s)| *d += s);
        }
    }

    pub fn params(&self) -> Vec<ParamView<'_>> {
        let mut p = self.encoder.params();
        p.extend(self.classifier.params());
        p
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f32]> {
        let mut s = self.encoder.slices_mut();
        s.extend(self.classifier.slices_mut());
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderPair {
    pub config: EncoderConfig,
    pub query: Encoder,
    pub key: Encoder,
    pub classifier: Classifier,
}

/// HWC in [0, 1] to a 6-channel CHW stack: RGB mapped to [-1, 1], then the
/// scaled SRM residual of each colour channel.
fn to_chw(image: &Image) -> Array3<f32> {
    let (h, w, _) = image.dim();
    let residual = crate::views::srm_residual(image);
    let mut out = Array3::zeros((INPUT_CHANNELS, h, w));
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out[[c, y, x]] = 2.0 * image[[y, x, c]] - 1.0;
                out[[c + 3, y, x]] = RESIDUAL_GAIN * residual[[y, x, c]];
            }
        }
    }
    out
}

const INPUT_CHANNELS: usize = 6;
/// Brings the high-pass residual channels to roughly the range of the RGB ones.
const RESIDUAL_GAIN: f32 = 10.0;

impl EncoderPair {
    /// Random query weights, key weights copied from the query side, classifier
    /// weights uniform in `+-1/sqrt(C)` with zero bias.
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Result<EncoderPair> {
        config.validate()?;
        let query = Encoder::init(&config, rng);
        let key = query.clone();
        let bound = 1.0 / (config.channels as f32).sqrt();
        let mut classifier = Classifier::zeros(config.channels);
        classifier.weight.mapv_inplace(|_| rng.gen_range(-bound..bound));
        Ok(EncoderPair {
            config,
            query,
            key,
            classifier,
        })
    }

    fn check_inputs(&self, images: &[&Image]) -> Result<()> {
        if images.is_empty() {
            return Err(DclError::invalid("empty image batch"));
        }
        let n = self.config.input_size;
        for image in images {
            if image.dim() != (n, n, 3) {
                return Err(DclError::shape(format!(
                    "encoder expects {n}x{n}x3 input, got {:?}",
                    image.dim()
                )));
            }
        }
        Ok(())
    }

    fn query_outputs(&self, features: Vec<Array2<f32>>) -> Vec<QueryOutput> {
        let s = self.config.feature_size();
        let c = self.config.channels;
        features
            .into_iter()
            .map(|f| {
                let query = self.query.squeeze(&f);
                let pooled = f.mean_axis(Axis(1)).expect("non-empty feature map");
                let logit = self.classifier.weight.dot(&pooled) + self.classifier.bias[0];
                QueryOutput {
                    feature_map: f.into_shape_with_order((c, s, s)).expect("contiguous"),
                    query,
                    logit,
                    pooled,
                }
            })
            .collect()
    }

    /// Inference forward of one image (running batch-norm statistics).
    pub fn forward_query(&self, image: &Image) -> Result<QueryOutput> {
        self.check_inputs(&[image])?;
        let (features, _, _) = self.query.run_batch(vec![to_chw(image)], Mode::Eval, false);
        Ok(self.query_outputs(features).remove(0))
    }

    /// Train-mode forward of a batch through the query side.
    pub fn forward_query_batch(&self, images: &[&Image]) -> Result<QueryBatch> {
        self.check_inputs(images)?;
        let inputs = images.iter().map(|im| to_chw(im)).collect();
        let (features, cache, stats) = self.query.run_batch(inputs, Mode::Train, true);
        Ok(QueryBatch {
            outputs: self.query_outputs(features),
            stats: stats.expect("train mode yields statistics"),
            cache,
        })
    }

    /// Key embedding of one image through the EMA weights (running statistics).
    /// The result is a plain value; no gradient path leads back to any parameter.
    pub fn forward_key(&self, image: &Image) -> Result<SpatialEmbedding> {
        self.check_inputs(&[image])?;
        let (features, _, _) = self.key.run_batch(vec![to_chw(image)], Mode::Eval, false);
        Ok(self.key.squeeze(&features[0]))
    }

    /// Train-mode key embeddings of a batch and the key side's batch statistics.
    pub fn forward_key_batch(&self, images: &[&Image]) -> Result<(Vec<SpatialEmbedding>, BatchStats)> {
        self.check_inputs(images)?;
        let inputs = images.iter().map(|im| to_chw(im)).collect();
        let (features, _, stats) = self.key.run_batch(inputs, Mode::Train, false);
        let keys = features.iter().map(|f| self.key.squeeze(f)).collect();
        Ok((keys, stats.expect("train mode yields statistics")))
    }

    /// Backpropagate per-sample upstream gradients through a train-mode batch,
    /// including the coupling through batch statistics.
    pub fn backward(&self, batch: &QueryBatch, upstream: &[Upstream<'_>]) -> Result<QueryGrads> {
        if upstream.len() != batch.outputs.len() {
            return Err(DclError::shape(format!(
                "{} upstream gradients for a batch of {}",
                upstream.len(),
                batch.outputs.len()
            )));
        }
        let c = self.config.channels;
        let n = self.config.locations();
        let mut grads = QueryGrads {
            encoder: self.query.zeros_like(),
            classifier: Classifier::zeros(c),
        };

        let mut d_acts: Vec<Array2<f32>> = Vec::with_capacity(upstream.len());
        for (out, up) in batch.outputs.iter().zip(upstream) {
            let features = out.feature_map.to_shape((c, n)).expect("contiguous");
            let mut d_act = match up.d_features {
                Some(d) => d.t().as_standard_layout().to_owned(),
                None => Array2::zeros((c, n)),
            };
            if let Some(dq) = up.d_query {
                let dq = ndarray::ArrayView1::from(dq);
                grads.encoder.squeeze_weight += &features.dot(&dq);
                grads.encoder.squeeze_bias[0] += dq.sum();
                d_act += &self
                    .query
                    .squeeze_weight
                    .view()
                    .insert_axis(Axis(1))
                    .dot(&dq.insert_axis(Axis(0)));
            }
            if up.d_logit != 0.0 {
                grads.classifier.weight.scaled_add(up.d_logit, &out.pooled);
                grads.classifier.bias[0] += up.d_logit;
                let per_loc = &self.classifier.weight * (up.d_logit / n as f32);
                d_act += &per_loc.insert_axis(Axis(1));
            }
            d_acts.push(d_act);
        }

        for (b, (block, cache)) in self.query.blocks.iter().zip(&batch.cache).enumerate().rev() {
            let out_ch = block.weight.nrows();
            let gamma = block.gamma.view().insert_axis(Axis(1));
            let d_pres: Vec<Array2<f32>> = d_acts
                .par_iter()
                .zip(cache.pre.par_iter())
                .map(|(g, pre)| {
                    ndarray::Zip::from(g)
                        .and(pre)
                        .map_collect(|&g, &p| g * conv::leaky_relu_grad(p))
                })
                .collect();
            let mut sum_dy = vec![0.0f64; out_ch];
            let mut sum_dy_xhat = vec![0.0f64; out_ch];
            for (d_pre, xhat) in d_pres.iter().zip(&cache.xhat) {
                for ch in 0..out_ch {
                    for (&g, &x) in d_pre.row(ch).iter().zip(xhat.row(ch)) {
                        sum_dy[ch] += g as f64;
                        sum_dy_xhat[ch] += (g as f64) * (x as f64);
                    }
                }
            }
            let count = (d_pres.len() * d_pres[0].ncols()) as f64;
            let gb = &mut grads.encoder.blocks[b];
            for ch in 0..out_ch {
                gb.gamma[ch] = sum_dy_xhat[ch] as f32;
                gb.beta[ch] = sum_dy[ch] as f32;
            }
            let mean_dxhat = Array1::from_shape_fn(out_ch, |ch| (block.gamma[ch] as f64 * sum_dy[ch] / count) as f32);
            let mean_dxhat_xhat =
                Array1::from_shape_fn(out_ch, |ch| (block.gamma[ch] as f64 * sum_dy_xhat[ch] / count) as f32);
            let d_zs: Vec<Array2<f32>> = d_pres
                .par_iter()
                .zip(cache.xhat.par_iter())
                .map(|(d_pre, xhat)| {
                    let mut d_z = d_pre * &gamma;
                    d_z -= &mean_dxhat.view().insert_axis(Axis(1));
                    d_z -= &(xhat * &mean_dxhat_xhat.view().insert_axis(Axis(1)));
                    d_z *= &cache.inv_std.view().insert_axis(Axis(1));
                    d_z
                })
                .collect();
            let d_ws: Vec<Array2<f32>> = d_zs
                .par_iter()
                .zip(cache.cols.par_iter())
                .map(|(d_z, cols)| d_z.dot(&cols.t()))
                .collect();
            for d_w in &d_ws {
                grads.encoder.blocks[b].weight += d_w;
            }
            if b > 0 {
                let (ci, hi, wi) = cache.in_dims;
                d_acts = d_zs
                    .par_iter()
                    .map(|d_z| {
                        conv::col2im(&block.weight.t().dot(d_z), ci, hi, wi)
                            .into_shape_with_order((ci, hi * wi))
                            .expect("contiguous")
                    })
                    .collect();
            }
        }
        Ok(grads)
    }

    /// Key-side update `key = beta * key + (1 - beta) * query` over the
    /// gradient-trained tensors. Running statistics are not blended; the key
    /// side tracks its own.
    pub fn ema_update(&mut self, beta: f64) -> Result<()> {
        ema_update(&mut self.key, &self.query, beta)
    }

    /// Parameters updated by the optimizer, in a fixed order.
    pub fn trainable_params(&self) -> Vec<ParamView<'_>> {
        let mut p = self.query.params();
        p.extend(self.classifier.params());
        p
    }

    pub fn trainable_slices_mut(&mut self) -> Vec<&mut [f32]> {
        let mut s = self.query.slices_mut();
        s.extend(self.classifier.slices_mut());
        s
    }
}

/// `target = beta * target + (1 - beta) * source`, elementwise.
pub fn ema_blend<T>(target: &mut [T], source: &[T], beta: T) -> Result<()>
where
    T: Copy + From<u8> + std::ops::Mul<Output = T> + std::ops::Add<Output = T> + std::ops::Sub<Output = T>,
{
    if target.len() != source.len() {
        return Err(DclError::shape(format!(
            "ema target has {} elements, source {}",
            target.len(),
            source.len()
        )));
    }
    let keep = T::from(1u8) - beta;
    for (t, &s) in target.iter_mut().zip(source) {
        *t = beta * *t + keep * s;
    }
    Ok(())
}

pub fn ema_update(key: &mut Encoder, query: &Encoder, beta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&beta) {
        return Err(DclError::invalid(format!("ema beta {beta} outside [0, 1)")));
    }
    let sources = query.params();
    let targets = key.slices_mut();
    if sources.len() != targets.len() {
        return Err(DclError::shape("query and key encoders have different parameter sets"));
    }
    for (t, s) in targets.into_iter().zip(sources) {
        ema_blend(t, s.data, beta as f32).map_err(|_| DclError::shape(format!("ema shape mismatch at {}", s.name)))?;
    }
    Ok(())
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on a logit, `-[y log p + (1 - y) log(1 - p)]` with `p = sigmoid(logit)`.
pub fn bce_loss(logit: f64, label: Label) -> f64 {
    softplus(logit) - label.as_f64() * logit
}

pub fn bce_grad(logit: f64, label: Label) -> f64 {
    sigmoid(logit) - label.as_f64()
}

/// Mean BCE over a batch and the gradient of that mean with respect to each logit.
pub fn bce_batch(logits: &[f64], labels: &[Label]) -> (f64, Vec<f64>) {
    let n = logits.len().max(1) as f64;
    let loss = logits.iter().zip(labels).map(|(&z, &y)| bce_loss(z, y)).sum::<f64>() / n;
    let grads = logits.iter().zip(labels).map(|(&z, &y)| bce_grad(z, y) / n).collect();
    (loss, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            channels: 8,
            blocks: 2,
            input_size: 12,
            beta: 0.99,
        }
    }

    fn image(n: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_shape_simple_fn((n, n, 3), || rng.gen())
    }

    #[test]
    fn default_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pair = EncoderPair::new(EncoderConfig::default(), &mut rng).unwrap();
        let out = pair.forward_query(&image(96, 1)).unwrap();
        assert_eq!(out.feature_map.dim(), (64, 6, 6));
        assert_eq!(out.query.len(), 36);
        assert_eq!(pair.forward_key(&image(96, 1)).unwrap().len(), 36);
    }

    #[test]
    fn zero_classifier_gives_even_odds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pair = EncoderPair::new(small_config(), &mut rng).unwrap();
        pair.classifier.weight.fill(0.0);
        let out = pair.forward_query(&image(12, 3)).unwrap();
        assert_eq!(out.logit, 0.0);
        assert_eq!(sigmoid(out.logit as f64), 0.5);
    }

    #[test]
    fn identical_images_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pair = EncoderPair::new(small_config(), &mut rng).unwrap();
        let a = pair.forward_query(&image(12, 4)).unwrap();
        let b = pair.forward_query(&image(12, 4)).unwrap();
        assert_eq!(a.feature_map, b.feature_map);
        assert_eq!(a.query, b.query);
    }

    #[test]
    fn key_matches_query_after_init_and_is_isolated() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pair = EncoderPair::new(small_config(), &mut rng).unwrap();
        let x = image(12, 5);
        let key = pair.forward_key(&x).unwrap();
        assert_eq!(key, pair.forward_query(&x).unwrap().query);
        pair.query.blocks[0].weight.mapv_inplace(|w| w + 0.5);
        assert_eq!(pair.forward_key(&x).unwrap(), key);
        pair.ema_update(0.5).unwrap();
        assert_ne!(pair.forward_key(&x).unwrap(), key);
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pair = EncoderPair::new(small_config(), &mut rng).unwrap();
        assert!(matches!(pair.forward_query(&image(16, 0)), Err(DclError::Shape(_))));
        assert!(matches!(pair.forward_key(&image(16, 0)), Err(DclError::Shape(_))));
    }

    #[test]
    fn ema_scalar_examples() {
        let mut t = [0.0f64];
        ema_blend(&mut t, &[1.0], 0.99).unwrap();
        assert!((t[0] - 0.01).abs() < 1e-12);
        let mut t = [0.5f64];
        ema_blend(&mut t, &[0.3], 0.99).unwrap();
        assert!((t[0] - 0.498).abs() < 1e-12);
        assert!(ema_blend(&mut [0.0f64; 2], &[1.0], 0.9).is_err());
    }

    #[test]
    fn ema_rejects_beta_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pair = EncoderPair::new(small_config(), &mut rng).unwrap();
        assert!(pair.ema_update(1.0).is_err());
    }

    #[test]
    fn bce_examples() {
        assert!((bce_loss(0.0, Label::Fake) - std::f64::consts::LN_2).abs() < 1e-12);
        let logit_08 = (0.8f64 / 0.2).ln();
        assert!((bce_loss(logit_08, Label::Real) - 5f64.ln()).abs() < 1e-12);
        assert!(bce_loss(40.0, Label::Fake) < 1e-15);
        assert!(bce_loss(-800.0, Label::Fake).is_finite());
        assert!(bce_loss(800.0, Label::Real).is_finite());
    }

    #[test]
    fn running_stats_update_example() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut enc = EncoderPair::new(small_config(), &mut rng).unwrap().query;
        let widths: Vec<usize> = enc.blocks.iter().map(|b| b.gamma.len()).collect();
        let stats = BatchStats {
            mean: widths.iter().map(|&w| Array1::from_elem(w, 2.0)).collect(),
            var: widths.iter().map(|&w| Array1::from_elem(w, 4.0)).collect(),
            count: vec![5; widths.len()],
        };
        enc.update_running_stats(&stats).unwrap();
        // mean 0.9 * 0 + 0.1 * 2; var 0.9 * 1 + 0.1 * 4 * 5/4
        assert!((enc.blocks[0].running_mean[0] - 0.2).abs() < 1e-6);
        assert!((enc.blocks[1].running_var[3] - 1.4).abs() < 1e-6);
    }

    #[test]
    fn train_mode_depends_on_batch_eval_mode_does_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pair = EncoderPair::new(small_config(), &mut rng).unwrap();
        let (a, b, c) = (image(12, 1), image(12, 2), image(12, 3));
        let ab = pair.forward_query_batch(&[&a, &b]).unwrap();
        let ac = pair.forward_query_batch(&[&a, &c]).unwrap();
        assert_ne!(ab.outputs[0].feature_map, ac.outputs[0].feature_map);
        assert_eq!(pair.forward_query(&a).unwrap().feature_map, pair.forward_query(&a).unwrap().feature_map);
    }

    #[test]
    fn backward_matches_finite_differences() {
        // f32 network, so the tolerance is loose; this checks wiring, not precision.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pair = EncoderPair::new(small_config(), &mut rng).unwrap();
        pair.classifier.weight.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        for b in &mut pair.query.blocks {
            b.gamma.mapv_inplace(|_| rng.gen_range(0.5..1.5));
            b.beta.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        }
        let images = [image(12, 7), image(12, 8), image(12, 9)];
        let refs: Vec<&Image> = images.iter().collect();
        let n = pair.config.locations();
        let c = pair.config.channels;
        let wq: Vec<Vec<f32>> = (0..3).map(|s| (0..n).map(|i| ((i + 5 * s) as f32 * 0.7).sin()).collect()).collect();
        let wf: Vec<Array2<f32>> = (0..3)
            .map(|s| Array2::from_shape_fn((n, c), |(i, j)| ((i * c + j + s) as f32 * 0.3).cos()))
            .collect();
        let wl = [0.7f32, -0.4, 0.2];
        let objective = |p: &EncoderPair| -> f64 {
            let batch = p.forward_query_batch(&refs).unwrap();
            batch
                .outputs
                .iter()
                .enumerate()
                .map(|(s, out)| {
                    let q: f64 = out.query.values.iter().zip(&wq[s]).map(|(a, b)| (a * b) as f64).sum();
                    let f: f64 = (&out.locations() * &wf[s]).sum() as f64;
                    q + f + (wl[s] * out.logit) as f64
                })
                .sum()
        };
        let batch = pair.forward_query_batch(&refs).unwrap();
        let upstream: Vec<Upstream<'_>> = (0..3)
            .map(|s| Upstream {
                d_features: Some(&wf[s]),
                d_query: Some(&wq[s]),
                d_logit: wl[s],
            })
            .collect();
        let grads = pair.backward(&batch, &upstream).unwrap();
        let analytic: Vec<Vec<f32>> = grads.params().iter().map(|p| p.data.to_vec()).collect();
        // Directional derivatives along one random direction per tensor; a
        // single leaky-ReLU kink barely moves them, unlike per-element checks.
        let h = 1e-4f32;
        for (pi, g) in analytic.iter().enumerate() {
            let dir: Vec<f32> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut plus = pair.clone();
            let mut minus = pair.clone();
            for (e, &d) in dir.iter().enumerate() {
                plus.trainable_slices_mut()[pi][e] += h * d;
                minus.trainable_slices_mut()[pi][e] -= h * d;
            }
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h as f64);
            let a: f64 = g.iter().zip(&dir).map(|(&g, &d)| (g * d) as f64).sum();
            let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1.0));
            assert!(err < 2e-2, "param {pi}: analytic {a} numeric {numeric}");
        }
    }

    proptest! {
        #[test]
        fn shapes_follow_config(blocks in 2usize..=4, ch_pow in 3usize..=5, seed in any::<u64>()) {
            let size = (1usize << blocks) * 3;
            let cfg = EncoderConfig { channels: 1 << ch_pow, blocks, input_size: size, beta: 0.9 };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pair = EncoderPair::new(cfg.clone(), &mut rng).unwrap();
            let out = pair.forward_query(&image(size, seed)).unwrap();
            prop_assert_eq!(out.feature_map.dim(), (cfg.channels, 3, 3));
            prop_assert_eq!(out.query.len(), 9);
            prop_assert!(out.logit.is_finite());
        }
    }
}
