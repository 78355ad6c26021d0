use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{invalid, Result, TeaError};
use crate::gradcheck::{grad_check_picks, GradReport};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::ModelConfig;
use super::data::{add_noise, box_downsample, TexturePool};
use super::net::{forward_graph, Model};

/// What the network is asked to reproduce from its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Clean crop from a noisy (and, for `scale > 1`, downsampled) copy.
    Denoise,
    /// Clean crop from a clean (possibly downsampled) copy; at scale 1 the
    /// target equals the input.
    Identity,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Denoise => "denoise",
            Task::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "denoise" => Some(Task::Denoise),
            "identity" => Some(Task::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub task: Task,
    pub lr: f64,
    pub batch: usize,
    /// Side of the target crop.
    pub patch: usize,
    pub noise: f64,
    /// Pairs drawn up front; batches cycle through them in a shuffled order.
    pub dataset: usize,
    pub textures: usize,
    pub texture_side: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            task: Task::Denoise,
            lr: 1e-3,
            batch: 2,
            patch: 24,
            noise: 0.1,
            dataset: 128,
            textures: 4,
            texture_side: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Mean batch loss before each update.
    pub losses: Vec<f64>,
    pub model: Model<T>,
}

/// One (input, target) pair.
fn sample<R: Rng>(pool: &TexturePool, cfg: &ModelConfig, s: &TrainSettings, rng: &mut R) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let target = pool.crop(s.patch, rng)?;
    let low = box_downsample(&target, cfg.scale)?;
    let input = match s.task {
        Task::Denoise => add_noise(&low, s.noise, rng)?,
        Task::Identity => low,
    };
    Ok((input, target))
}

/// Shift-augmented pairs: every crop sits at a random position of a random
/// texture.
pub fn build_dataset<R: Rng>(
    cfg: &ModelConfig,
    settings: &TrainSettings,
    rng: &mut R,
) -> Result<Vec<(Tensor<f64>, Tensor<f64>)>> {
    let pool = TexturePool::generate(settings.textures, settings.texture_side, rng);
    (0..settings.dataset).map(|_| sample(&pool, cfg, settings, rng)).collect()
}

/// Minibatch SGD on the L1 loss. Initialization uses a ChaCha8 stream
/// seeded with `seed`; the dataset and batch order use stream 1 of the same
/// seed, so two configs trained with one seed see identical data.
pub fn train_toy<T: Scalar>(cfg: &ModelConfig, settings: &TrainSettings, steps: usize, seed: u64) -> Result<TrainOutcome<T>> {
    if steps == 0 || settings.batch == 0 || settings.batch > settings.dataset {
        return invalid(
            "train_toy",
            format!("need steps > 0 and 0 < batch <= dataset, got {steps}, {}, {}", settings.batch, settings.dataset),
        );
    }
    if !settings.patch.is_multiple_of(cfg.scale) {
        return invalid("train_toy", format!("patch {} not divisible by scale {}", settings.patch, cfg.scale));
    }
    cfg.validate_input(settings.patch / cfg.scale, settings.patch / cfg.scale)?;
    let mut model = Model::<T>::init(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let data = build_dataset(cfg, settings, &mut rng)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let lr = T::lit(settings.lr);
    let inv_batch = T::lit(1.0 / settings.batch as f64);

    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut total = 0.0;
        let mut acc: Vec<Tensor<T>> = model.params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        if cursor + settings.batch > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let mut batch = order[cursor..cursor + settings.batch].to_vec();
        batch.sort_unstable();
        cursor += settings.batch;
        for i in batch {
            let (input, target) = &data[i];
            let tape = Tape::new();
            let x = tape.constant(input.cast());
            let p = model.params.bind(&tape, true);
            let diverged = |e: TeaError| match e {
                TeaError::NonFinite(_) => TeaError::Diverged { step, loss: f64::NAN },
                e => e,
            };
            let out = forward_graph(&tape, x, cfg, &p).map_err(diverged)?;
            let loss = tape.l1_loss(out, &target.cast())?;
            total += tape.value(loss).item().as_f64();
            let grads = tape.backward(loss).map_err(diverged)?;
            for (a, &v) in acc.iter_mut().zip(p.vars()) {
                if let Some(g) = grads.get(v) {
                    *a = a.add(g)?;
                }
            }
        }
        let loss = total / settings.batch as f64;
        if !loss.is_finite() {
            return Err(TeaError::Diverged { step, loss });
        }
        losses.push(loss);
        for ((_, t), g) in model.params.iter_mut().zip(&acc) {
            *t = t.zip_map(g, "sgd", |w, g| w - lr * g * inv_batch)?;
        }
    }
    Ok(TrainOutcome { losses, model })
}

/// Finite-difference check of the L1 loss gradient on a random `fraction`
/// of all parameter scalars (at least one).
pub fn grad_check_model(
    model: &Model<f64>,
    input: &Tensor<f64>,
    target: &Tensor<f64>,
    fraction: f64,
    eps: f64,
    seed: u64,
) -> Result<GradReport> {
    let tensors: Vec<Tensor<f64>> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let total = model.numel();
    let count = ((total as f64 * fraction).ceil() as usize).clamp(1, total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flat: Vec<usize> = rand::seq::index::sample(&mut rng, total, count).into_vec();
    flat.sort_unstable();
    let mut picks = Vec::with_capacity(count);
    let mut base = 0;
    let mut which = 0;
    for i in flat {
        while i >= base + tensors[which].len() {
            base += tensors[which].len();
            which += 1;
        }
        picks.push((which, i - base));
    }
    let store = &model.params;
    grad_check_picks(
        |tape, vars| {
            let bound = store.bind_vars(vars);
            let x = tape.constant(input.clone());
            let out = forward_graph(tape, x, &model.cfg, &bound)?;
            tape.l1_loss(out, target)
        },
        &tensors,
        &picks,
        eps,
    )
}
