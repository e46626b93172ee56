use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::metrics::vqa_accuracy;
use crate::numcore::{Graph, NumError, ParamStore, Tensor};
use crate::regions::RegionSet;

use super::{argmax_answer, AnswerVocab, VqaError, VqaModel};

/// One training question: preloaded features, encoded question tokens, the
/// ten annotator answers and the precomputed soft targets.
#[derive(Clone, Debug)]
pub struct QaExample {
    pub image_id: String,
    pub regions: RegionSet,
    pub question_ids: Vec<u32>,
    pub answers: Vec<String>,
    pub targets: Tensor,
}

/// AdaDelta with early stopping on held-out accuracy.
#[derive(Clone, Copy, Debug)]
pub struct VqaTrainOptions {
    pub rho: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without a validation improvement; the
    /// best parameters are restored.
    pub patience: usize,
    pub seed: u64,
}

impl VqaTrainOptions {
    /// AdaDelta adapts its effective step size from accumulated statistics,
    /// so small batches (more updates per epoch) converge fastest at desk
    /// scale.
    pub fn desk() -> Self {
        VqaTrainOptions { rho: 0.95, eps: 1e-6, epochs: 50, batch_size: 4, patience: 10, seed: 0 }
    }
}

/// One row of the accuracy curve CSV.
#[derive(Clone, Copy, Debug)]
pub struct VqaTrainRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

/// Mean consensus accuracy of argmax answers over a dataset.
pub fn vqa_dataset_accuracy(
    model: &VqaModel,
    answer_vocab: &AnswerVocab,
    data: &[QaExample],
) -> Result<f64, VqaError> {
    let mut total = 0.0;
    for example in data {
        let prediction = model.predict(&example.regions, &example.question_ids)?;
        let (idx, _) = argmax_answer(&prediction.scores);
        let answer = answer_vocab.answer(idx as u32).unwrap_or("");
        total += vqa_accuracy(answer, &example.answers)?;
    }
    Ok(total / data.len() as f64)
}

/// Train with AdaDelta on soft-target binary cross entropy. When a
/// validation set is given, training stops early once accuracy fails to
/// improve for `patience` epochs and the best parameters are restored.
pub fn train_vqa(
    model: &mut VqaModel,
    answer_vocab: &AnswerVocab,
    train: &[QaExample],
    validation: Option<&[QaExample]>,
    options: &VqaTrainOptions,
) -> Result<Vec<VqaTrainRow>, VqaError> {
    if train.is_empty() {
        return Err(VqaError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut curve = Vec::new();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0usize;

    for epoch in 0..options.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;

        for chunk in order.chunks(options.batch_size) {
            let loss = vqa_batch_step(model, train, chunk, options)
                .map_err(|e| wrap_divergence(e, epoch))?;
            epoch_loss += loss;
            batches += 1;
        }

        let train_accuracy = vqa_dataset_accuracy(model, answer_vocab, train)?;
        let val_accuracy = match validation {
            Some(val) => Some(vqa_dataset_accuracy(model, answer_vocab, val)?),
            None => None,
        };
        curve.push(VqaTrainRow {
            epoch,
            train_loss: epoch_loss / batches as f64,
            train_accuracy,
            val_accuracy,
        });

        if let Some(acc) = val_accuracy {
            let improved = best.as_ref().map_or(true, |(b, _)| acc > *b);
            if improved {
                best = Some((acc, model.params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= options.patience {
                    break;
                }
            }
        }
    }

    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(curve)
}

fn wrap_divergence(e: VqaError, epoch: usize) -> VqaError {
    match e {
        VqaError::Num(source @ (NumError::NonFinite { .. } | NumError::BackwardNonFinite { .. })) => {
            VqaError::Diverged { epoch, source }
        }
        other => other,
    }
}

fn vqa_batch_step(
    model: &mut VqaModel,
    train: &[QaExample],
    batch: &[usize],
    options: &VqaTrainOptions,
) -> Result<f64, VqaError> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g)?;
    let mut losses = Vec::with_capacity(batch.len());
    for &idx in batch {
        let example = &train[idx];
        let v = model.region_leaf(&mut g, &example.regions)?;
        let (logits, _) = model.logits_on_graph(&mut g, &bound, v, &example.question_ids)?;
        losses.push(g.bce_with_logits(logits, example.targets.clone())?);
    }
    let stacked = g.concat(&losses)?;
    let total = g.sum(stacked)?;
    let mean = g.scalar_mul(total, 1.0 / batch.len() as f64)?;
    let loss = g.value(mean).scalar_value();

    g.backward(mean)?;
    for (name, node) in bound.named_leaves() {
        model.params.set_grad(&name, g.grad(node).clone())?;
    }
    model.params.adadelta_step(options.rho, options.eps)?;
    Ok(loss)
}

/// Forward-only loss of one example, for gradient checks.
pub fn vqa_loss_value(model: &VqaModel, example: &QaExample) -> Result<f64, VqaError> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g)?;
    let v = model.region_leaf(&mut g, &example.regions)?;
    let (logits, _) = model.logits_on_graph(&mut g, &bound, v, &example.question_ids)?;
    let loss = g.bce_with_logits(logits, example.targets.clone())?;
    Ok(g.value(loss).scalar_value())
}

/// Analytic gradients of one example's loss for every parameter.
pub fn vqa_loss_grads(
    model: &VqaModel,
    example: &QaExample,
) -> Result<Vec<(String, Tensor)>, VqaError> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g)?;
    let v = model.region_leaf(&mut g, &example.regions)?;
    let (logits, _) = model.logits_on_graph(&mut g, &bound, v, &example.question_ids)?;
    let loss = g.bce_with_logits(logits, example.targets.clone())?;
    g.backward(loss)?;
    Ok(bound
        .named_leaves()
        .into_iter()
        .map(|(name, node)| (name, g.grad(node).clone()))
        .collect())
}
