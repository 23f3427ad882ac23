use rand::Rng;

use super::{Activation, Block, BlockCache, BlockSpec, ConvKind, GeneratorConfig, Grads, ParamStore, Tensor};
use crate::error::{Error, Result};

/// U-Net generator: `block_count` halving encoder blocks, mirrored decoder
/// with skip concatenation, hyperbolic-tangent output.
#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParamStore,
    encoder: Vec<Block>,
    decoder: Vec<Block>,
    output: Block,
}

impl PartialEq for Generator {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

/// Per-block caches from a training forward pass.
#[derive(Debug, Clone)]
pub struct GeneratorCache {
    encoder: Vec<BlockCache>,
    decoder: Vec<BlockCache>,
    output: BlockCache,
    /// Spatial side of each encoder activation, for shape checks.
    pub encoder_sizes: Vec<usize>,
    pub decoder_sizes: Vec<usize>,
}

impl Generator {
    pub fn new(config: GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let n = config.block_count;
        let ch = config.encoder_channels();
        let mut params = ParamStore::default();
        let mut encoder = Vec::with_capacity(n);
        for k in 0..n {
            let last = k == n - 1;
            encoder.push(Block::build(
                &mut params,
                BlockSpec {
                    name: &format!("gen.enc{k}"),
                    kind: ConvKind::Down { stride: 2 },
                    in_ch: if k == 0 { 3 } else { ch[k - 1] },
                    out_ch: ch[k],
                    // no normalization on the first block or on the bottleneck
                    bn: k > 0 && !last,
                    dropout: false,
                    act: if last { Activation::Relu } else { Activation::Leaky },
                },
                rng,
            ));
        }
        let mut decoder = Vec::with_capacity(n.saturating_sub(1));
        for j in 0..n - 1 {
            let skip = ch[n - 2 - j];
            decoder.push(Block::build(
                &mut params,
                BlockSpec {
                    name: &format!("gen.dec{j}"),
                    kind: ConvKind::Up,
                    in_ch: if j == 0 { ch[n - 1] } else { 2 * ch[n - 1 - j] },
                    out_ch: skip,
                    bn: true,
                    dropout: j < config.dropout_blocks,
                    act: Activation::Relu,
                },
                rng,
            ));
        }
        let output = Block::build(
            &mut params,
            BlockSpec {
                name: "gen.out",
                kind: ConvKind::Up,
                in_ch: if n == 1 { ch[0] } else { 2 * ch[0] },
                out_ch: 3,
                bn: false,
                dropout: false,
                act: Activation::Tanh,
            },
            rng,
        );
        params.quantize();
        Ok(Self { config, params, encoder, decoder, output })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = self.config.input_size;
        if x.c != 3 || x.h != s || x.w != s {
            return Err(Error::DimensionMismatch(format!(
                "generator expects 3x{s}x{s}, got {}x{}x{}",
                x.c, x.h, x.w
            )));
        }
        if !self.params.all_finite() {
            return Err(Error::NonFinite("generator parameters".into()));
        }
        Ok(())
    }

    pub fn forward_inference(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x.clone();
        for block in &self.encoder {
            h = block.forward_inference(&self.params, &h);
            skips.push(h.clone());
        }
        let n = self.encoder.len();
        for (j, block) in self.decoder.iter().enumerate() {
            let u = block.forward_inference(&self.params, &h);
            h = Tensor::concat_channels(&u, &skips[n - 2 - j]);
        }
        Ok(self.output.forward_inference(&self.params, &h))
    }

    /// Training pass: batch statistics, dropout masks drawn from `rng`.
    pub fn forward_train(&self, x: &Tensor, rng: &mut impl Rng) -> Result<(Tensor, GeneratorCache)> {
        self.check_input(x)?;
        let rate = self.config.dropout_rate;
        let mut enc_caches = Vec::with_capacity(self.encoder.len());
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x.clone();
        for block in &self.encoder {
            let (a, cache) = block.forward_train(&self.params, &h, rate, rng);
            enc_caches.push(cache);
            skips.push(a.clone());
            h = a;
        }
        let encoder_sizes = skips.iter().map(|t| t.h).collect();
        let n = self.encoder.len();
        let mut dec_caches = Vec::with_capacity(self.decoder.len());
        let mut decoder_sizes = Vec::with_capacity(self.decoder.len());
        for (j, block) in self.decoder.iter().enumerate() {
            let (u, cache) = block.forward_train(&self.params, &h, rate, rng);
            dec_caches.push(cache);
            let skip = &skips[n - 2 - j];
            debug_assert_eq!((u.h, u.w), (skip.h, skip.w), "skip connection joins equal sizes");
            decoder_sizes.push(u.h);
            h = Tensor::concat_channels(&u, skip);
        }
        let (out, out_cache) = self.output.forward_train(&self.params, &h, rate, rng);
        Ok((out, GeneratorCache { encoder: enc_caches, decoder: dec_caches, output: out_cache, encoder_sizes, decoder_sizes }))
    }

    /// Parameter gradients of a scalar objective given its gradient w.r.t. the output.
    pub fn backward(&self, cache: &GeneratorCache, grad_out: &Tensor) -> Grads {
        let mut grads = self.params.zero_grads();
        let n = self.encoder.len();
        let mut enc_grads: Vec<Option<Tensor>> = vec![None; n];
        let accumulate = |slot: &mut Option<Tensor>, g: Tensor| match slot {
            Some(t) => t.add_assign(&g),
            None => *slot = Some(g),
        };

        let mut gh = self.output.backward(&self.params, &cache.output, grad_out, &mut grads, true).expect("dx");
        for j in (0..self.decoder.len()).rev() {
            let u_ch = self.decoder[j].out_ch;
            let (gu, gskip) = gh.split_channels(u_ch);
            accumulate(&mut enc_grads[n - 2 - j], gskip);
            gh = self.decoder[j].backward(&self.params, &cache.decoder[j], &gu, &mut grads, true).expect("dx");
        }
        accumulate(&mut enc_grads[n - 1], gh);
        for k in (0..n).rev() {
            let g = enc_grads[k].take().expect("every encoder output receives gradient");
            let dx = self.encoder[k].backward(&self.params, &cache.encoder[k], &g, &mut grads, k > 0);
            if let Some(dx) = dx {
                accumulate(&mut enc_grads[k - 1], dx);
            }
        }
        grads
    }

    pub fn update_running_stats(&mut self, cache: &GeneratorCache, momentum: f64) {
        for (block, c) in self.encoder.iter().zip(&cache.encoder) {
            block.update_running(&mut self.params, c, momentum);
        }
        for (block, c) in self.decoder.iter().zip(&cache.decoder) {
            block.update_running(&mut self.params, c, momentum);
        }
    }

    /// Rebuilds the block layout for `config` around an existing parameter store.
    pub fn from_params(config: GeneratorConfig, params: ParamStore) -> Result<Self> {
        use rand::SeedableRng;
        let mut template = Self::new(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        check_layout(&template.params, &params)?;
        template.params = params;
        Ok(template)
    }
}

pub(crate) fn check_layout(expected: &ParamStore, got: &ParamStore) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::MalformedCheckpoint(format!("{} tensors, expected {}", got.len(), expected.len())));
    }
    for (a, b) in expected.params.iter().zip(&got.params) {
        if a.name != b.name || a.shape != b.shape {
            return Err(Error::MalformedCheckpoint(format!("tensor {} {:?} vs {} {:?}", b.name, b.shape, a.name, a.shape)));
        }
    }
    Ok(())
}
