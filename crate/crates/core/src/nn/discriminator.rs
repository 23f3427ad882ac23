use rand::Rng;

use super::generator::check_layout;
use super::{Activation, Block, BlockCache, BlockSpec, ConvKind, DiscriminatorConfig, Grads, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Patch classifier over the channel concatenation of input and overlay.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: ParamStore,
    blocks: Vec<Block>,
    head: Block,
}

impl PartialEq for Discriminator {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

#[derive(Debug, Clone)]
pub struct DiscriminatorCache {
    blocks: Vec<BlockCache>,
    head: BlockCache,
    /// Sigmoid output, `N × 1 × F × F`.
    pub probabilities: Tensor,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        let mut blocks = Vec::with_capacity(config.down_blocks);
        let mut in_ch = 6;
        for k in 0..config.down_blocks {
            let out_ch = super::filters(config.base_filters, k, config.filter_cap);
            blocks.push(Block::build(
                &mut params,
                BlockSpec {
                    name: &format!("disc.down{k}"),
                    kind: ConvKind::Down { stride: 2 },
                    in_ch,
                    out_ch,
                    bn: k > 0,
                    dropout: false,
                    act: Activation::Leaky,
                },
                rng,
            ));
            in_ch = out_ch;
        }
        let head = Block::build(
            &mut params,
            BlockSpec {
                name: "disc.head",
                kind: ConvKind::Down { stride: 1 },
                in_ch,
                out_ch: 1,
                bn: false,
                dropout: false,
                act: Activation::Sigmoid,
            },
            rng,
        );
        params.quantize();
        Ok(Self { config, params, blocks, head })
    }

    fn stack(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let s = self.config.input_size;
        if x.shape() != y.shape() || x.c != 3 || x.h != s || x.w != s {
            return Err(Error::DimensionMismatch(format!(
                "discriminator expects two 3x{s}x{s} inputs, got {:?} and {:?}",
                x.shape(),
                y.shape()
            )));
        }
        if !self.params.all_finite() {
            return Err(Error::NonFinite("discriminator parameters".into()));
        }
        Ok(Tensor::concat_channels(x, y))
    }

    pub fn forward_inference(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let mut h = self.stack(x, y)?;
        for block in &self.blocks {
            h = block.forward_inference(&self.params, &h);
        }
        Ok(self.head.forward_inference(&self.params, &h))
    }

    pub fn forward_train(&self, x: &Tensor, y: &Tensor, rng: &mut impl Rng) -> Result<DiscriminatorCache> {
        let mut h = self.stack(x, y)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (a, c) = block.forward_train(&self.params, &h, 0.0, rng);
            caches.push(c);
            h = a;
        }
        let (p, head) = self.head.forward_train(&self.params, &h, 0.0, rng);
        Ok(DiscriminatorCache { blocks: caches, head, probabilities: p })
    }

    /// Parameter gradients and the gradient w.r.t. the overlay input `y`,
    /// given the objective's gradient w.r.t. the output probabilities.
    pub fn backward(&self, cache: &DiscriminatorCache, grad_prob: &Tensor, need_dy: bool) -> (Grads, Option<Tensor>) {
        let mut grads = self.params.zero_grads();
        let need_dx = need_dy;
        let mut g = self.head.backward(&self.params, &cache.head, grad_prob, &mut grads, need_dx || !self.blocks.is_empty());
        for k in (0..self.blocks.len()).rev() {
            let gk = g.take().expect("upstream gradient");
            g = self.blocks[k].backward(&self.params, &cache.blocks[k], &gk, &mut grads, k > 0 || need_dx);
        }
        let dy = if need_dy { g.map(|t| t.split_channels(3).1) } else { None };
        (grads, dy)
    }

    pub fn update_running_stats(&mut self, cache: &DiscriminatorCache, momentum: f64) {
        for (block, c) in self.blocks.iter().zip(&cache.blocks) {
            block.update_running(&mut self.params, c, momentum);
        }
    }

    pub fn from_params(config: DiscriminatorConfig, params: ParamStore) -> Result<Self> {
        use rand::SeedableRng;
        let mut template = Self::new(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        check_layout(&template.params, &params)?;
        template.params = params;
        Ok(template)
    }
}
