//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use meltpool_core::nn::{
    discriminator_loss_grads, generator_loss_grads, Discriminator, Generator, LossWeights, Tensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(n: usize, size: usize, seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(n, 3, size, size, (0..n * 3 * size * size).map(|_| rng.random_range(-0.9..0.9)).collect())
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(1e-7, 1.0 - 1e-7)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Target near the generator's training-mode output for `seed`, so the
/// objective stays O(1) and finite differences are not swamped by rounding.
pub fn nearby_target(g: &Generator, x: &Tensor, seed: u64, spread: f64) -> Tensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fake, _) = g.forward_train(x, &mut rng).unwrap();
    let mut noise = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let data = fake.data.iter().map(|v| (v + noise.random_range(-spread..spread)).clamp(-1.0, 1.0)).collect();
    Tensor { data, ..fake }
}

/// Generator objective evaluated directly from its definition.
pub fn generator_objective(g: &Generator, d: &Discriminator, x: &Tensor, y: &Tensor, w: &LossWeights, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fake, _) = g.forward_train(x, &mut rng).unwrap();
    let p = d.forward_train(x, &fake, &mut rng).unwrap().probabilities;
    let adv = -mean(&p.data.iter().map(|&v| clamp_p(v).ln()).collect::<Vec<_>>());
    let l1 = mean(&y.data.iter().zip(&fake.data).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>());
    adv + w.lambda * l1
}

/// Discriminator objective on a fixed fake batch.
pub fn discriminator_objective(d: &Discriminator, x: &Tensor, y: &Tensor, fake: &Tensor, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pr = d.forward_train(x, y, &mut rng).unwrap().probabilities;
    let pf = d.forward_train(x, fake, &mut rng).unwrap().probabilities;
    -mean(&pr.data.iter().map(|&v| clamp_p(v).ln()).collect::<Vec<_>>())
        - mean(&pf.data.iter().map(|&v| (1.0 - clamp_p(v)).ln()).collect::<Vec<_>>())
}

/// Analytic generator gradient through the library's backward passes.
pub fn generator_analytic(g: &Generator, d: &Discriminator, x: &Tensor, y: &Tensor, w: &LossWeights, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fake, gcache) = g.forward_train(x, &mut rng).unwrap();
    let dcache = d.forward_train(x, &fake, &mut rng).unwrap();
    let (dp, mut dg) = generator_loss_grads(&dcache.probabilities, y, &fake, w);
    let (_, dy) = d.backward(&dcache, &dp, true);
    dg.add_assign(&dy.unwrap());
    g.backward(&gcache, &dg)
}

pub fn discriminator_analytic(d: &Discriminator, x: &Tensor, y: &Tensor, fake: &Tensor, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cr = d.forward_train(x, y, &mut rng).unwrap();
    let cf = d.forward_train(x, fake, &mut rng).unwrap();
    let (gr, gf) = discriminator_loss_grads(&cr.probabilities, &cf.probabilities);
    let (mut a, _) = d.backward(&cr, &gr, false);
    let (b, _) = d.backward(&cf, &gf, false);
    for (u, v) in a.iter_mut().zip(b) {
        u.iter_mut().zip(v).for_each(|(p, q)| *p += q);
    }
    a
}

/// Largest relative error between analytic and central-difference gradients
/// over all trainable parameters, using a fourth-order central difference. Gradients smaller than `floor` in both
/// estimates are compared on an absolute scale.
pub fn max_relative_error(
    params: &mut meltpool_core::nn::ParamStore,
    analytic: &[Vec<f64>],
    h: f64,
    floor: f64,
    mut f: impl FnMut(&meltpool_core::nn::ParamStore) -> f64,
) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for pi in 0..params.params.len() {
        if !params.params[pi].trainable {
            continue;
        }
        for i in 0..params.params[pi].data.len() {
            let orig = params.params[pi].data[i];
            let mut at = |delta: f64| {
                params.params[pi].data[i] = orig + delta;
                f(params)
            };
            // fourth-order central stencil
            let numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            params.params[pi].data[i] = orig;
            let a = analytic[pi][i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if err > worst && std::env::var("GRADCHECK_DEBUG").is_ok() {
                eprintln!("{} [{i}] analytic {a:.6e} numeric {numeric:.6e} err {err:.3e}", params.params[pi].name);
            }
            worst = worst.max(err);
            checked += 1;
        }
    }
    (worst, checked)
}

/// 4-connected components of the pixels where `inside` holds, by explicit
/// stack flood fill: `(size, touches_border)` in scan order of first pixel.
pub fn flood_components(w: usize, h: usize, inside: impl Fn(usize, usize) -> bool) -> Vec<(usize, bool)> {
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    for start in 0..w * h {
        if seen[start] || !inside(start % w, start / w) {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let (mut size, mut border) = (0, false);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            size += 1;
            border |= x == 0 || y == 0 || x == w - 1 || y == h - 1;
            let mut push = |nx: usize, ny: usize| {
                let j = ny * w + nx;
                if !seen[j] && inside(nx, ny) {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                push(x - 1, y);
            }
            if x + 1 < w {
                push(x + 1, y);
            }
            if y > 0 {
                push(x, y - 1);
            }
            if y + 1 < h {
                push(x, y + 1);
            }
        }
        out.push((size, border));
    }
    out
}

pub mod fixture {
    use meltpool_core::nn::{DiscriminatorConfig, GeneratorConfig};
    use meltpool_core::synth::{generate_scene, SceneSpec};
    use meltpool_core::workflow::{AnnotationStatus, Provenance, WorkflowConfig, Workspace};
    use meltpool_core::{ClassPalette, ImagePair, TrainConfig};

    /// 32 px tiles, 16 px network, a few training steps.
    pub fn tiny_config() -> WorkflowConfig {
        WorkflowConfig {
            tile_size: 32,
            generator: GeneratorConfig::compact(16, 4, 16),
            discriminator: DiscriminatorConfig::new(16, 2, 4, 16),
            train: TrainConfig { steps: 6, checkpoint_interval: 3, ..TrainConfig::default() },
            ..WorkflowConfig::default()
        }
    }

    pub fn scene(seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            width: 64,
            height: 64,
            layers: 4,
            hatch_spacing: 12.0,
            pool_width: (14.0, 20.0),
            pool_depth: (8.0, 12.0),
            defect_count: 1,
            defect_radius: (1.0, 2.0),
            ..SceneSpec::default()
        }
    }

    /// `n` training pairs cut as 16×16 crops from consecutive 64×64 scenes.
    pub fn crop_pairs(first_seed: u64, n: usize) -> Vec<ImagePair> {
        let palette = ClassPalette::default();
        let mut out = Vec::with_capacity(n);
        let mut seed = first_seed;
        while out.len() < n {
            let (img, truth) = generate_scene(&scene(seed)).unwrap();
            for k in 0..16.min(n - out.len()) {
                let (r, c) = (16 * (k / 4), 16 * (k % 4));
                let tile = img.crop(r, c, 16, 16).unwrap();
                out.push(ImagePair::from_annotated(&tile, &truth.mask.crop(r, c, 16, 16).unwrap(), &palette).unwrap());
            }
            seed += 1;
        }
        out
    }

    /// Adds a synthetic 64×64 image as four tiles; returns the tile ids.
    pub fn add_scene(ws: &mut Workspace, id: &str, seed: u64, annotate: bool) -> Vec<String> {
        let (img, truth) = generate_scene(&scene(seed)).unwrap();
        let tiles = ws.add_image(id, &img, Provenance::Synthetic, (2, 2)).unwrap();
        if annotate {
            for t in &tiles {
                let (r, c) = ws.manifest().tile(t).unwrap().origin;
                let mask = truth.mask.crop(r, c, 32, 32).unwrap();
                ws.set_annotation(t, &mask, AnnotationStatus::Approved).unwrap();
            }
        }
        tiles
    }
}
