//! Adversarial training loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ImagePair;
use crate::nn::{
    discriminator_loss_grads, generator_loss_grads, Grads, LossWeights, Losses, NetworkCheckpoint, NetworkParameters,
    ParamStore, Tensor,
};

/// Momentum of the batch-normalization running statistics.
pub const BN_MOMENTUM: f64 = 0.1;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda: LossWeights,
    pub checkpoint_interval: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 1,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            lambda: LossWeights::default(),
            checkpoint_interval: 250,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.steps == 0 || self.batch_size == 0 || self.checkpoint_interval == 0 {
            return bad("steps, batch size and checkpoint interval must be positive");
        }
        if self.checkpoint_interval > self.steps {
            return bad("checkpoint interval exceeds step count");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.beta1 <= 0.0 || self.beta2 <= 0.0 {
            return bad("momentum coefficients must lie in (0, 1)");
        }
        LossWeights::new(self.lambda.lambda)?;
        Ok(())
    }

    /// Steps at which [`Trainer::train`] emits checkpoints.
    pub fn checkpoint_steps(&self) -> Vec<u64> {
        let mut s: Vec<u64> = (1..=self.steps / self.checkpoint_interval).map(|k| k * self.checkpoint_interval).collect();
        if s.last() != Some(&self.steps) {
            s.push(self.steps);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub d_real: f64,
    pub d_fake: f64,
    pub g_total: f64,
    pub g_adv: f64,
    pub g_l1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub records: Vec<LossRecord>,
}

impl LossHistory {
    pub fn push(&mut self, step: u64, l: &Losses) -> Result<()> {
        if self.records.last().is_some_and(|r| r.step >= step) {
            return Err(Error::InvalidArgument(format!("step {step} does not increase")));
        }
        self.records.push(LossRecord {
            step,
            d_real: l.d_real,
            d_fake: l.d_fake,
            g_total: l.g_total,
            g_adv: l.g_adv,
            g_l1: l.g_l1,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(r)?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv(r: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let records = rdr.deserialize().collect::<std::result::Result<Vec<LossRecord>, _>>()?;
        Ok(Self { records })
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// First and second moment estimates for one network.
#[derive(Debug, Clone)]
struct Adam {
    m: Grads,
    v: Grads,
    t: i32,
}

impl Adam {
    fn new(store: &ParamStore) -> Self {
        Self { m: store.zero_grads(), v: store.zero_grads(), t: 0 }
    }

    fn update(&mut self, store: &mut ParamStore, grads: &Grads, cfg: &TrainConfig) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (pi, p) in store.params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v, g) = (&mut self.m[pi], &mut self.v[pi], &grads[pi]);
            for i in 0..p.data.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p.data[i] -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
            if !(m.iter().all(|x| x.is_finite()) && v.iter().all(|x| x.is_finite())) {
                return Err(Error::NonFinite(format!("Adam moments of {}", p.name)));
            }
        }
        store.quantize();
        Ok(())
    }
}

/// Owns the parameters and optimizer state for one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: NetworkParameters,
    pub config: TrainConfig,
    pub step: u64,
    adam_g: Adam,
    adam_d: Adam,
    /// Dropout masks.
    noise_rng: ChaCha8Rng,
    /// Epoch shuffles.
    data_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(params: NetworkParameters, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
        noise_rng.set_stream(1);
        let data_rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            adam_g: Adam::new(&params.generator.params),
            adam_d: Adam::new(&params.discriminator.params),
            params,
            config,
            step: 0,
            noise_rng,
            data_rng,
        })
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, batch: &[&ImagePair]) -> Result<Losses> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch".into()));
        }
        let size = self.params.generator.config.input_size;
        if batch.iter().any(|p| p.input.height != size || p.input.width != size) {
            return Err(Error::DimensionMismatch(format!("training pairs must be {size}x{size}")));
        }
        let inputs: Vec<_> = batch.iter().map(|p| &p.input).collect();
        let targets: Vec<_> = batch.iter().map(|p| &p.target).collect();
        let x = Tensor::from_images(&inputs)?;
        let y = Tensor::from_images(&targets)?;
        let cfg = self.config;
        let w = cfg.lambda;
        let NetworkParameters { generator: gen, discriminator: disc } = &mut self.params;

        let (fake, gcache) = gen.forward_train(&x, &mut self.noise_rng)?;

        // discriminator step on (real, fake) with the generator output held fixed
        let real_c = disc.forward_train(&x, &y, &mut self.noise_rng)?;
        let fake_c = disc.forward_train(&x, &fake, &mut self.noise_rng)?;
        let before = crate::nn::batch_losses(&real_c.probabilities, &fake_c.probabilities, &y, &fake, &w)?;
        let (gr, gf) = discriminator_loss_grads(&real_c.probabilities, &fake_c.probabilities);
        let (mut dgrads, _) = disc.backward(&real_c, &gr, false);
        let (dg_fake, _) = disc.backward(&fake_c, &gf, false);
        for (a, b) in dgrads.iter_mut().zip(dg_fake) {
            a.iter_mut().zip(b).for_each(|(p, q)| *p += q);
        }
        disc.update_running_stats(&real_c, BN_MOMENTUM);
        disc.update_running_stats(&fake_c, BN_MOMENTUM);
        self.adam_d.update(&mut disc.params, &dgrads, &cfg)?;

        // generator step through the updated discriminator
        let judge = disc.forward_train(&x, &fake, &mut self.noise_rng)?;
        let after = crate::nn::batch_losses(&real_c.probabilities, &judge.probabilities, &y, &fake, &w)?;
        let (dp, mut dout) = generator_loss_grads(&judge.probabilities, &y, &fake, &w);
        let (_, dy) = disc.backward(&judge, &dp, true);
        dout.add_assign(&dy.expect("input gradient requested"));
        let ggrads = gen.backward(&gcache, &dout);
        gen.update_running_stats(&gcache, BN_MOMENTUM);
        self.adam_g.update(&mut gen.params, &ggrads, &cfg)?;

        self.step += 1;
        let losses = Losses { g_adv: after.g_adv, g_total: after.g_total, ..before };
        if ![losses.d_real, losses.d_fake, losses.d_loss, losses.g_adv, losses.g_l1, losses.g_total]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFinite(format!("loss at step {}: {losses:?}", self.step)));
        }
        Ok(losses)
    }

    /// Runs `config.steps` steps over seeded per-epoch shuffles of `dataset`,
    /// dropping each epoch's incomplete final batch. `on_checkpoint` sees
    /// every emitted checkpoint.
    pub fn train(
        &mut self,
        dataset: &[ImagePair],
        mut on_checkpoint: impl FnMut(NetworkCheckpoint) -> Result<()>,
    ) -> Result<LossHistory> {
        if dataset.is_empty() {
            return Err(Error::Empty("training set".into()));
        }
        let bs = self.config.batch_size;
        if bs > dataset.len() {
            return Err(Error::InvalidArgument(format!("batch size {bs} exceeds {} training pairs", dataset.len())));
        }
        let emit = self.config.checkpoint_steps();
        let mut history = LossHistory::default();
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut cursor = usize::MAX;
        for _ in 0..self.config.steps {
            if cursor == usize::MAX || cursor + bs > order.len() {
                order.sort_unstable();
                order.shuffle(&mut self.data_rng);
                cursor = 0;
            }
            let batch: Vec<&ImagePair> = order[cursor..cursor + bs].iter().map(|&i| &dataset[i]).collect();
            cursor += bs;
            let losses = self.train_step(&batch)?;
            history.push(self.step, &losses)?;
            if emit.binary_search(&self.step).is_ok() {
                on_checkpoint(self.checkpoint())?;
            }
        }
        Ok(history)
    }

    pub fn checkpoint(&self) -> NetworkCheckpoint {
        NetworkCheckpoint::new(self.params.clone(), self.step)
    }
}

/// Trains from `params` and returns every emitted checkpoint with the loss history.
pub fn train(
    params: NetworkParameters,
    dataset: &[ImagePair],
    cfg: TrainConfig,
) -> Result<(Vec<NetworkCheckpoint>, LossHistory)> {
    let mut trainer = Trainer::new(params, cfg)?;
    let mut out = Vec::new();
    let history = trainer.train(dataset, |c| {
        out.push(c);
        Ok(())
    })?;
    Ok((out, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::ModelImage;
    use crate::nn::{DiscriminatorConfig, GeneratorConfig};

    fn tiny_params(seed: u64) -> NetworkParameters {
        NetworkParameters::new(GeneratorConfig::compact(8, 4, 16), DiscriminatorConfig::new(8, 2, 4, 16), seed).unwrap()
    }

    fn pair(k: usize) -> ImagePair {
        let img = |f: &dyn Fn(usize) -> f64| ModelImage { height: 8, width: 8, data: (0..192).map(f).collect() };
        ImagePair {
            input: img(&|i| ((i * 7 + k * 13) % 17) as f64 / 8.5 - 1.0),
            target: img(&|i| if (i + k) % 5 == 0 { 1.0 } else { -1.0 }),
        }
    }

    #[test]
    fn checkpoint_steps_follow_interval() {
        let cfg = TrainConfig { steps: 100, checkpoint_interval: 25, ..Default::default() };
        assert_eq!(cfg.checkpoint_steps(), vec![25, 50, 75, 100]);
        let cfg = TrainConfig { steps: 10, checkpoint_interval: 4, ..Default::default() };
        assert_eq!(cfg.checkpoint_steps(), vec![4, 8, 10]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { steps: 10, checkpoint_interval: 20, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn train_emits_checkpoints_and_full_history() {
        let data: Vec<_> = (0..3).map(pair).collect();
        let cfg = TrainConfig { steps: 10, checkpoint_interval: 4, batch_size: 2, ..Default::default() };
        let (cks, hist) = train(tiny_params(1), &data, cfg).unwrap();
        assert_eq!(cks.iter().map(|c| c.step).collect::<Vec<_>>(), vec![4, 8, 10]);
        assert_eq!(hist.records.iter().map(|r| r.step).collect::<Vec<_>>(), (1..=10).collect::<Vec<_>>());
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let data: Vec<_> = (0..4).map(pair).collect();
        let cfg = TrainConfig { steps: 6, checkpoint_interval: 6, batch_size: 2, seed: 9, ..Default::default() };
        let a = train(tiny_params(2), &data, cfg).unwrap();
        let b = train(tiny_params(2), &data, cfg).unwrap();
        assert_eq!(a.0, b.0);
        let bits = |h: &LossHistory| h.records.iter().map(|r| r.g_total.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.1), bits(&b.1));
        let c = train(tiny_params(2), &data, TrainConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(bits(&a.1), bits(&c.1));
    }

    #[test]
    fn zero_lambda_is_pure_adversarial() {
        let data = vec![pair(0)];
        let cfg = TrainConfig { steps: 1, checkpoint_interval: 1, lambda: LossWeights::new(0.0).unwrap(), ..Default::default() };
        let mut t = Trainer::new(tiny_params(3), cfg).unwrap();
        let l = t.train_step(&[&data[0]]).unwrap();
        assert_eq!(l.g_total, l.g_adv);
    }

    #[test]
    fn errors() {
        let cfg = TrainConfig { steps: 1, checkpoint_interval: 1, batch_size: 2, ..Default::default() };
        let mut t = Trainer::new(tiny_params(3), cfg).unwrap();
        assert!(matches!(t.train(&[], |_| Ok(())), Err(Error::Empty(_))));
        assert!(t.train(&[pair(0)], |_| Ok(())).is_err());
        assert!(matches!(t.train_step(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn history_csv_roundtrip() {
        let data = vec![pair(0), pair(1)];
        let cfg = TrainConfig { steps: 3, checkpoint_interval: 3, ..Default::default() };
        let (_, hist) = train(tiny_params(4), &data, cfg).unwrap();
        let mut buf = Vec::new();
        hist.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("step,d_real,d_fake,g_total"));
        assert_eq!(LossHistory::read_csv(&buf[..]).unwrap(), hist);
    }
}
