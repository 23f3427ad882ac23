//! Conditional image-to-image translation network.
//!
//! A U-Net generator maps a raw tile to an annotation overlay; a patch
//! discriminator scores `(input, overlay)` pairs per local patch. Both are
//! built from the same 4×4 convolution blocks and train with hand-written
//! gradients (see [`layers`]).
//!
//! Parameters are held in `f64` for arithmetic but always rounded to `f32`
//! precision after initialization and after every update, so checkpoints
//! can store `f32` tensors without loss.

pub mod checkpoint;
mod discriminator;
mod generator;
pub mod layers;
mod loss;
mod tensor;

pub use checkpoint::NetworkCheckpoint;
pub use discriminator::{Discriminator, DiscriminatorCache};
pub use generator::{Generator, GeneratorCache};
pub(crate) use loss::batch_losses;
pub use loss::{compute_losses, discriminator_loss_grads, generator_loss_grads, LossWeights, Losses, LOG_EPS};
pub use tensor::Tensor;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::ModelImage;
use layers::{BnCache, ConvGrads};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Batch statistics and active dropout.
    Train,
    /// Running statistics, no dropout; deterministic.
    Inference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub input_size: usize,
    pub block_count: usize,
    pub base_filters: usize,
    pub filter_cap: usize,
    pub dropout_rate: f64,
    pub dropout_blocks: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { input_size: 256, block_count: 8, base_filters: 64, filter_cap: 512, dropout_rate: 0.5, dropout_blocks: 3 }
    }
}

impl GeneratorConfig {
    /// Full-depth generator for `input_size` with narrow filters, for desk-scale runs.
    pub fn compact(input_size: usize, base_filters: usize, filter_cap: usize) -> Self {
        Self {
            input_size,
            block_count: input_size.trailing_zeros() as usize,
            base_filters,
            filter_cap,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_count == 0 || self.block_count >= usize::BITS as usize || 1usize << self.block_count != self.input_size {
            return Err(Error::InvalidArgument(format!(
                "generator input {} is not 2^{}",
                self.input_size, self.block_count
            )));
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {}", self.dropout_rate)));
        }
        if self.dropout_blocks > self.block_count {
            return Err(Error::InvalidArgument("more dropout blocks than decoder blocks".into()));
        }
        if self.base_filters == 0 || self.filter_cap < self.base_filters {
            return Err(Error::InvalidArgument("filter widths".into()));
        }
        Ok(())
    }

    /// Encoder output channels per block; decoder blocks mirror them.
    pub fn encoder_channels(&self) -> Vec<usize> {
        (0..self.block_count).map(|k| filters(self.base_filters, k, self.filter_cap)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub input_size: usize,
    pub down_blocks: usize,
    pub final_map: usize,
    pub base_filters: usize,
    pub filter_cap: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { input_size: 256, down_blocks: 4, final_map: 16, base_filters: 64, filter_cap: 512 }
    }
}

impl DiscriminatorConfig {
    pub fn new(input_size: usize, down_blocks: usize, base_filters: usize, filter_cap: usize) -> Self {
        Self { input_size, down_blocks, final_map: input_size >> down_blocks, base_filters, filter_cap }
    }

    pub fn validate(&self) -> Result<()> {
        if self.down_blocks >= usize::BITS as usize
            || self.final_map == 0
            || self.input_size != self.final_map << self.down_blocks
        {
            return Err(Error::InvalidArgument(format!(
                "discriminator {} / 2^{} != {}",
                self.input_size, self.down_blocks, self.final_map
            )));
        }
        if self.base_filters == 0 || self.filter_cap < self.base_filters {
            return Err(Error::InvalidArgument("filter widths".into()));
        }
        Ok(())
    }

    /// Side length, in input pixels, of the patch seen by one output cell.
    pub fn receptive_field(&self) -> usize {
        // final stride-1 conv, then each stride-2 block: r -> 2r + 2
        (0..self.down_blocks).fold(4, |r, _| 2 * r + 2)
    }
}

fn filters(base: usize, k: usize, cap: usize) -> usize {
    base.saturating_mul(1usize.checked_shl(k as u32).unwrap_or(usize::MAX)).min(cap)
}

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Running statistics are stored alongside weights but receive no gradient.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub params: Vec<Param>,
}

/// Gradients aligned with [`ParamStore::params`].
pub type Grads = Vec<Vec<f64>>;

impl ParamStore {
    fn add(&mut self, name: String, shape: Vec<usize>, data: Vec<f64>, trainable: bool) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.push(Param { name, shape, data, trainable });
        self.params.len() - 1
    }

    #[inline]
    pub fn get(&self, idx: usize) -> &[f64] {
        &self.params[idx].data
    }

    pub fn zero_grads(&self) -> Grads {
        self.params.iter().map(|p| vec![0.0; p.data.len()]).collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// Rounds every value to the nearest `f32`.
    pub fn quantize(&mut self) {
        for p in &mut self.params {
            p.data.iter_mut().for_each(|v| *v = f64::from(*v as f32));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Activation {
    Leaky,
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ConvKind {
    /// Stride-2 (downsampling) or stride-1 convolution with front padding 1.
    Down { stride: usize },
    /// Stride-2 transpose convolution.
    Up,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BnParams {
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
}

/// Convolution, optional batch normalization, optional dropout, activation.
#[derive(Debug, Clone)]
pub(crate) struct Block {
    kind: ConvKind,
    out_ch: usize,
    weight: usize,
    bias: Option<usize>,
    bn: Option<BnParams>,
    dropout: bool,
    act: Activation,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    input: Tensor,
    bn: Option<BnCache>,
    dropout_mask: Option<Vec<f64>>,
    /// Activation input (leaky/relu) or output (tanh/sigmoid).
    act_ref: Tensor,
}

pub(crate) struct BlockSpec<'a> {
    pub name: &'a str,
    pub kind: ConvKind,
    pub in_ch: usize,
    pub out_ch: usize,
    pub bn: bool,
    pub dropout: bool,
    pub act: Activation,
}

impl Block {
    pub(crate) fn build(store: &mut ParamStore, spec: BlockSpec<'_>, rng: &mut impl Rng) -> Block {
        let weight_normal = Normal::new(0.0, 0.02).expect("valid normal");
        let n = spec.in_ch * spec.out_ch * layers::K * layers::K;
        let weight_shape = match spec.kind {
            ConvKind::Down { .. } => vec![spec.out_ch, spec.in_ch, layers::K, layers::K],
            ConvKind::Up => vec![spec.in_ch, spec.out_ch, layers::K, layers::K],
        };
        let w: Vec<f64> = (0..n).map(|_| weight_normal.sample(rng)).collect();
        let weight = store.add(format!("{}.weight", spec.name), weight_shape, w, true);
        let (bias, bn) = if spec.bn {
            let gamma_normal = Normal::new(1.0, 0.02).expect("valid normal");
            let c = spec.out_ch;
            let gamma = store.add(format!("{}.bn.gamma", spec.name), vec![c], (0..c).map(|_| gamma_normal.sample(rng)).collect(), true);
            let beta = store.add(format!("{}.bn.beta", spec.name), vec![c], vec![0.0; c], true);
            let running_mean = store.add(format!("{}.bn.running_mean", spec.name), vec![c], vec![0.0; c], false);
            let running_var = store.add(format!("{}.bn.running_var", spec.name), vec![c], vec![1.0; c], false);
            (None, Some(BnParams { gamma, beta, running_mean, running_var }))
        } else {
            (Some(store.add(format!("{}.bias", spec.name), vec![spec.out_ch], vec![0.0; spec.out_ch], true)), None)
        };
        Block { kind: spec.kind, out_ch: spec.out_ch, weight, bias, bn, dropout: spec.dropout, act: spec.act }
    }

    fn conv(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let w = store.get(self.weight);
        let b = self.bias.map(|i| store.get(i));
        match self.kind {
            ConvKind::Down { stride } => {
                let (oh, ow) = (x.h / stride, x.w / stride);
                layers::conv_forward(x, w, b, self.out_ch, stride, 1, oh, ow)
            }
            ConvKind::Up => layers::conv_t_forward(x, w, b, self.out_ch),
        }
    }

    fn activate(&self, z: &Tensor) -> Tensor {
        match self.act {
            Activation::Leaky => layers::leaky_relu(z),
            Activation::Relu => layers::relu(z),
            Activation::Tanh => layers::tanh(z),
            Activation::Sigmoid => layers::sigmoid(z),
        }
    }

    pub(crate) fn forward_inference(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut z = self.conv(store, x);
        if let Some(bn) = self.bn {
            z = layers::batchnorm_eval(
                &z,
                store.get(bn.gamma),
                store.get(bn.beta),
                store.get(bn.running_mean),
                store.get(bn.running_var),
            );
        }
        self.activate(&z)
    }

    pub(crate) fn forward_train(
        &self,
        store: &ParamStore,
        x: &Tensor,
        dropout_rate: f64,
        rng: &mut impl Rng,
    ) -> (Tensor, BlockCache) {
        let mut z = self.conv(store, x);
        let mut bn_cache = None;
        if let Some(bn) = self.bn {
            let (y, cache) = layers::batchnorm_train(&z, store.get(bn.gamma), store.get(bn.beta));
            z = y;
            bn_cache = Some(cache);
        }
        let mut dropout_mask = None;
        if self.dropout && dropout_rate > 0.0 {
            let keep = if dropout_rate >= 1.0 { 0.0 } else { 1.0 / (1.0 - dropout_rate) };
            let mask: Vec<f64> =
                (0..z.data.len()).map(|_| if rng.random::<f64>() < dropout_rate { 0.0 } else { keep }).collect();
            z = layers::apply_mask(&z, &mask);
            dropout_mask = Some(mask);
        }
        let a = self.activate(&z);
        let act_ref = match self.act {
            Activation::Leaky | Activation::Relu => z,
            Activation::Tanh | Activation::Sigmoid => a.clone(),
        };
        (a, BlockCache { input: x.clone(), bn: bn_cache, dropout_mask, act_ref })
    }

    /// Accumulates parameter gradients into `grads`; returns the input gradient when requested.
    pub(crate) fn backward(
        &self,
        store: &ParamStore,
        cache: &BlockCache,
        grad_out: &Tensor,
        grads: &mut Grads,
        need_dx: bool,
    ) -> Option<Tensor> {
        let mut g = match self.act {
            Activation::Leaky => layers::leaky_relu_backward(&cache.act_ref, grad_out),
            Activation::Relu => layers::relu_backward(&cache.act_ref, grad_out),
            Activation::Tanh => layers::tanh_backward(&cache.act_ref, grad_out),
            Activation::Sigmoid => layers::sigmoid_backward(&cache.act_ref, grad_out),
        };
        if let Some(mask) = &cache.dropout_mask {
            g = layers::apply_mask(&g, mask);
        }
        if let (Some(bn), Some(bc)) = (self.bn, &cache.bn) {
            let (dx, dgamma, dbeta) = layers::batchnorm_backward(bc, store.get(bn.gamma), &g);
            add_into(&mut grads[bn.gamma], &dgamma);
            add_into(&mut grads[bn.beta], &dbeta);
            g = dx;
        }
        let w = store.get(self.weight);
        let ConvGrads { dx, dweight, dbias } = match self.kind {
            ConvKind::Down { stride } => layers::conv_backward(&cache.input, w, &g, stride, 1, need_dx),
            ConvKind::Up => layers::conv_t_backward(&cache.input, w, &g, need_dx),
        };
        add_into(&mut grads[self.weight], &dweight);
        if let Some(b) = self.bias {
            add_into(&mut grads[b], &dbias);
        }
        dx
    }

    /// Exponential moving average of the batch statistics (unbiased variance).
    pub(crate) fn update_running(&self, store: &mut ParamStore, cache: &BlockCache, momentum: f64) {
        let (Some(bn), Some(bc)) = (self.bn, &cache.bn) else { return };
        let count = (bc.xhat.n * bc.xhat.plane()) as f64;
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for (rm, m) in store.params[bn.running_mean].data.iter_mut().zip(&bc.mean) {
            *rm = (1.0 - momentum) * *rm + momentum * m;
        }
        for (rv, v) in store.params[bn.running_var].data.iter_mut().zip(&bc.var) {
            *rv = (1.0 - momentum) * *rv + momentum * v * unbias;
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// `final_map × final_map` grid of patch probabilities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchProbabilityMap {
    pub size: usize,
    pub data: Vec<f64>,
}

impl PatchProbabilityMap {
    pub fn new(size: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != size * size {
            return Err(Error::DimensionMismatch(format!("{} values for a {size}x{size} map", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("probability {v} outside [0, 1]")));
        }
        Ok(Self { size, data })
    }

    pub fn filled(size: usize, value: f64) -> Self {
        Self { size, data: vec![value; size * size] }
    }

    pub(crate) fn batch_from(t: &Tensor) -> Vec<Self> {
        t.data.chunks_exact(t.plane()).map(|c| Self { size: t.h, data: c.to_vec() }).collect()
    }
}

/// Generator and discriminator parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParameters {
    pub generator: Generator,
    pub discriminator: Discriminator,
}

impl NetworkParameters {
    pub fn new(gen: GeneratorConfig, disc: DiscriminatorConfig, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        if gen.input_size != disc.input_size {
            return Err(Error::InvalidArgument("generator and discriminator input sizes differ".into()));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Ok(Self { generator: Generator::new(gen, &mut rng)?, discriminator: Discriminator::new(disc, &mut rng)? })
    }

    pub fn generator_config(&self) -> &GeneratorConfig {
        &self.generator.config
    }

    pub fn discriminator_config(&self) -> &DiscriminatorConfig {
        &self.discriminator.config
    }

    /// Short hex digest identifying the architecture (not the weights).
    pub fn config_hash(&self) -> String {
        config_hash(&self.generator.config, &self.discriminator.config)
    }

    pub fn all_finite(&self) -> bool {
        self.generator.params.all_finite() && self.discriminator.params.all_finite()
    }
}

pub fn config_hash(gen: &GeneratorConfig, disc: &DiscriminatorConfig) -> String {
    let text = serde_json::to_string(&(gen, disc)).expect("configs serialize");
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Runs the generator on one image.
pub fn generator_forward(
    params: &NetworkParameters,
    x: &ModelImage,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<ModelImage> {
    let input = Tensor::from_images(&[x])?;
    let out = match mode {
        Mode::Inference => params.generator.forward_inference(&input)?,
        Mode::Train => params.generator.forward_train(&input, rng)?.0,
    };
    Ok(out.to_images().remove(0))
}

/// Patch probabilities for one `(input, overlay)` pair using frozen statistics.
pub fn discriminator_forward(params: &NetworkParameters, x: &ModelImage, y: &ModelImage) -> Result<PatchProbabilityMap> {
    if (x.height, x.width) != (y.height, y.width) {
        return Err(Error::DimensionMismatch("discriminator inputs differ in size".into()));
    }
    let xt = Tensor::from_images(&[x])?;
    let yt = Tensor::from_images(&[y])?;
    let out = params.discriminator.forward_inference(&xt, &yt)?;
    Ok(PatchProbabilityMap::batch_from(&out).remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(GeneratorConfig::default().validate().is_ok());
        assert!(GeneratorConfig { block_count: 7, ..Default::default() }.validate().is_err());
        assert!(GeneratorConfig { dropout_rate: 1.5, ..Default::default() }.validate().is_err());
        assert!(GeneratorConfig { dropout_blocks: 9, ..Default::default() }.validate().is_err());
        assert!(DiscriminatorConfig::default().validate().is_ok());
        assert!(DiscriminatorConfig { final_map: 8, ..Default::default() }.validate().is_err());
        assert_eq!(DiscriminatorConfig::new(32, 4, 8, 64).final_map, 2);
    }

    #[test]
    fn default_widths_double_and_cap() {
        assert_eq!(GeneratorConfig::default().encoder_channels(), vec![64, 128, 256, 512, 512, 512, 512, 512]);
    }

    #[test]
    fn receptive_field_of_default_discriminator() {
        assert_eq!(DiscriminatorConfig::default().receptive_field(), 94);
    }

    #[test]
    fn config_hash_tracks_architecture() {
        let g = GeneratorConfig::compact(16, 4, 16);
        let d = DiscriminatorConfig::new(16, 2, 4, 16);
        assert_eq!(config_hash(&g, &d), config_hash(&g, &d));
        assert_ne!(config_hash(&g, &d), config_hash(&GeneratorConfig { base_filters: 8, ..g }, &d));
    }

    #[test]
    fn quantize_is_idempotent() {
        let mut store = ParamStore::default();
        store.add("w".into(), vec![3], vec![0.1, 1.0 / 3.0, -2.5e-9], true);
        store.quantize();
        let once = store.clone();
        store.quantize();
        assert_eq!(store, once);
        assert_eq!(store.get(0)[0], 0.1f32 as f64);
    }
}
