use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numcore::{Graph, NumError};
use crate::regions::RegionSet;

use super::{CaptionError, Captioner, DecodeOptions};

/// One training image: preloaded region features and its encoded captions
/// (BOS ... EOS).
#[derive(Clone, Debug)]
pub struct CaptionExample {
    pub image_id: String,
    pub regions: RegionSet,
    pub captions: Vec<Vec<u32>>,
}

/// Straight-line learning-rate schedule with momentum SGD and global-norm
/// clipping.
#[derive(Clone, Copy, Debug)]
pub struct XeTrainOptions {
    pub lr0: f64,
    pub total_iterations: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl XeTrainOptions {
    pub fn desk() -> Self {
        XeTrainOptions {
            lr0: 0.1,
            total_iterations: 1500,
            batch_size: 8,
            momentum: 0.9,
            clip_norm: 5.0,
            seed: 0,
        }
    }

    /// Published schedule: 0.01 to zero over 60k iterations, batch 100,
    /// momentum 0.9.
    pub fn paper() -> Self {
        XeTrainOptions {
            lr0: 0.01,
            total_iterations: 60_000,
            batch_size: 100,
            momentum: 0.9,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

/// One row of the loss curve CSV.
#[derive(Clone, Copy, Debug)]
pub struct LossRow {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
}

fn wrap_divergence(e: CaptionError, iteration: usize) -> CaptionError {
    match e {
        CaptionError::Num(source @ (NumError::NonFinite { .. } | NumError::BackwardNonFinite { .. })) => {
            CaptionError::Diverged { iteration, source }
        }
        other => other,
    }
}

/// Teacher-forced cross-entropy training. The learning rate decays to zero
/// on a straight line over the configured iterations; each iteration draws a
/// uniform batch of (image, caption) pairs.
pub fn train_xe(
    model: &mut Captioner,
    data: &[CaptionExample],
    options: &XeTrainOptions,
) -> Result<Vec<LossRow>, CaptionError> {
    if data.is_empty() || data.iter().any(|ex| ex.captions.is_empty()) {
        return Err(CaptionError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut curve = Vec::with_capacity(options.total_iterations);

    for iteration in 0..options.total_iterations {
        let lr = options.lr0 * (1.0 - iteration as f64 / options.total_iterations as f64);
        let loss = xe_iteration(model, data, options, lr, &mut rng)
            .map_err(|e| wrap_divergence(e, iteration))?;
        curve.push(LossRow { iteration, lr, loss });
    }
    Ok(curve)
}

fn xe_iteration(
    model: &mut Captioner,
    data: &[CaptionExample],
    options: &XeTrainOptions,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64, CaptionError> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g)?;
    let mut losses = Vec::with_capacity(options.batch_size);
    for _ in 0..options.batch_size {
        let example = &data[rng.random_range(0..data.len())];
        let caption = &example.captions[rng.random_range(0..example.captions.len())];
        let (v, vbar) = model.image_nodes(&mut g, &example.regions)?;
        losses.push(model.xe_loss(&mut g, &bound, v, vbar, &caption[1..])?);
    }
    let stacked = g.concat(&losses)?;
    let total = g.sum(stacked)?;
    let mean = g.scalar_mul(total, 1.0 / options.batch_size as f64)?;
    let loss = g.value(mean).scalar_value();

    g.backward(mean)?;
    for (name, node) in bound.named_leaves() {
        model.params.set_grad(&name, g.grad(node).clone())?;
    }
    model.params.clip_global_norm(options.clip_norm)?;
    model.params.sgd_momentum_step(lr, options.momentum)?;
    Ok(loss)
}

/// Scalar cross-entropy of one caption, forward only.
pub fn xe_loss_value(
    model: &Captioner,
    regions: &RegionSet,
    target: &[u32],
) -> Result<f64, CaptionError> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g)?;
    let (v, vbar) = model.image_nodes(&mut g, regions)?;
    let loss = model.xe_loss(&mut g, &bound, v, vbar, target)?;
    Ok(g.value(loss).scalar_value())
}

/// Analytic gradients of one caption's cross-entropy for every parameter.
pub fn xe_loss_grads(
    model: &Captioner,
    regions: &RegionSet,
    target: &[u32],
) -> Result<Vec<(String, crate::numcore::Tensor)>, CaptionError> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g)?;
    let (v, vbar) = model.image_nodes(&mut g, regions)?;
    let loss = model.xe_loss(&mut g, &bound, v, vbar, target)?;
    g.backward(loss)?;
    Ok(bound
        .named_leaves()
        .into_iter()
        .map(|(name, node)| (name, g.grad(node).clone()))
        .collect())
}

/// Fraction of reference tokens reproduced position-by-position by greedy
/// decoding, over each example's first caption.
pub fn token_reconstruction(
    model: &Captioner,
    data: &[CaptionExample],
    options: &DecodeOptions,
) -> Result<f64, CaptionError> {
    let mut matched = 0usize;
    let mut total = 0usize;
    for example in data {
        let reference = &example.captions[0];
        // strip BOS and EOS
        let content = &reference[1..reference.len() - 1];
        let decoded = model.greedy_decode(&example.regions, options)?;
        total += content.len();
        matched += content
            .iter()
            .zip(&decoded.tokens)
            .filter(|(a, b)| a == b)
            .count();
    }
    Ok(if total == 0 { 1.0 } else { matched as f64 / total as f64 })
}
