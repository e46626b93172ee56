//! The VQA model: a GRU question encoder, gated-tanh non-linearities,
//! question-conditioned soft attention over region features, a joint
//! question/image embedding and independent per-answer sigmoid scores
//! trained against soft annotator-agreement targets.

mod train;

pub use train::{
    train_vqa, vqa_dataset_accuracy, vqa_loss_grads, vqa_loss_value, QaExample, VqaTrainOptions,
    VqaTrainRow,
};

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::PAD;
use crate::metrics::{normalize_answer, vqa_accuracy, MetricError};
use crate::numcore::{Graph, NodeId, NumError, ParamStore, Tensor};
use crate::regions::RegionSet;

#[derive(Debug, thiserror::Error)]
pub enum VqaError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("question token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("target scores must lie in [0, 1]")]
    TargetOutOfRange,
    #[error("region features have dimension {found}, model expects {expected}")]
    FeatureDimMismatch { expected: usize, found: usize },
    #[error("checkpoint does not match the configuration: {detail}")]
    CheckpointMismatch { detail: String },
    #[error("training diverged at epoch {epoch}: {source}")]
    Diverged { epoch: usize, source: NumError },
    #[error("dataset is empty")]
    EmptyDataset,
}

/// Model dimensions. Question words beyond `max_question_len` are dropped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VqaConfig {
    pub embed_dim: usize,
    pub gru_hidden: usize,
    pub attn_hidden: usize,
    pub joint_dim: usize,
    pub feature_dim: usize,
    pub max_question_len: usize,
}

impl VqaConfig {
    pub fn desk() -> Self {
        VqaConfig {
            embed_dim: 32,
            gru_hidden: 64,
            attn_hidden: 64,
            joint_dim: 64,
            feature_dim: 64,
            max_question_len: 14,
        }
    }

    /// Published dimensions: 300-d word embeddings, 512 hidden.
    pub fn paper() -> Self {
        VqaConfig {
            embed_dim: 300,
            gru_hidden: 512,
            attn_hidden: 512,
            joint_dim: 512,
            feature_dim: 2048,
            max_question_len: 14,
        }
    }
}

/// Answer string <-> id with occurrence counts from the training set.
#[derive(Clone, Debug, PartialEq)]
pub struct AnswerVocab {
    answers: Vec<String>,
    counts: Vec<usize>,
    index: HashMap<String, u32>,
}

impl AnswerVocab {
    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn id(&self, answer: &str) -> Option<u32> {
        self.index.get(&normalize_answer(answer)).copied()
    }

    pub fn answer(&self, id: u32) -> Option<&str> {
        self.answers.get(id as usize).map(|s| s.as_str())
    }

    pub fn count(&self, answer: &str) -> usize {
        self.id(answer).map(|id| self.counts[id as usize]).unwrap_or(0)
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    /// Soft per-answer credit from ten annotator answers: min(matches/3, 1).
    pub fn soft_targets(&self, annotator_answers: &[String]) -> Result<Tensor, VqaError> {
        if annotator_answers.len() != 10 {
            return Err(VqaError::Metric(MetricError::WrongAnnotatorCount {
                found: annotator_answers.len(),
            }));
        }
        let mut counts = vec![0usize; self.answers.len()];
        for answer in annotator_answers {
            if let Some(id) = self.id(answer) {
                counts[id as usize] += 1;
            }
        }
        let data = counts.iter().map(|&c| (c as f64 / 3.0).min(1.0)).collect();
        Ok(Tensor::vector(data))
    }
}

/// Candidate answers that appear strictly more than `min_occurrences - 1`
/// times in the training answers, ordered by count then lexicographically.
pub fn build_answer_vocab<'a, I>(training_answers: I, min_occurrences: usize) -> AnswerVocab
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: HashMap<String, usize> = HashMap::new();
    for answer in training_answers {
        *counts.entry(normalize_answer(answer)).or_insert(0) += 1;
    }
    let mut kept: Vec<(String, usize)> =
        counts.into_iter().filter(|&(_, c)| c >= min_occurrences).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let answers: Vec<String> = kept.iter().map(|(a, _)| a.clone()).collect();
    let counts: Vec<usize> = kept.iter().map(|&(_, c)| c).collect();
    let index = answers.iter().enumerate().map(|(i, a)| (a.clone(), i as u32)).collect();
    AnswerVocab { answers, counts, index }
}

pub const DEFAULT_ANSWER_MIN_OCCURRENCES: usize = 9;

const GATED_BLOCKS: [&str; 4] = ["f_a", "f_q", "f_v", "f_o"];
const GRU_GATES: [&str; 3] = ["z", "r", "h"];

/// The VQA model: configuration, question vocabulary size, answer count and
/// every learned tensor in a named store.
pub struct VqaModel {
    pub config: VqaConfig,
    pub question_vocab_size: usize,
    pub num_answers: usize,
    pub params: ParamStore,
}

impl VqaModel {
    pub fn new(
        config: VqaConfig,
        question_vocab_size: usize,
        num_answers: usize,
        seed: u64,
    ) -> Result<Self, VqaError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (e, gh, a, j, d) = (
            config.embed_dim,
            config.gru_hidden,
            config.attn_hidden,
            config.joint_dim,
            config.feature_dim,
        );
        params.insert("w_emb", Tensor::uniform(&[question_vocab_size, e], -0.1, 0.1, &mut rng))?;
        for gate in GRU_GATES {
            params.insert(&format!("gru.w_{gate}"), Tensor::glorot_uniform(gh, e, &mut rng))?;
            params.insert(&format!("gru.u_{gate}"), Tensor::glorot_uniform(gh, gh, &mut rng))?;
            params.insert(&format!("gru.b_{gate}"), Tensor::zeros(&[gh]))?;
        }
        let block_dims = [("f_a", a, d + gh), ("f_q", j, gh), ("f_v", j, d), ("f_o", j, j)];
        for (name, out, input) in block_dims {
            params.insert(&format!("{name}.w"), Tensor::glorot_uniform(out, input, &mut rng))?;
            params.insert(&format!("{name}.w_gate"), Tensor::glorot_uniform(out, input, &mut rng))?;
            params.insert(&format!("{name}.b"), Tensor::zeros(&[out]))?;
            params.insert(&format!("{name}.b_gate"), Tensor::zeros(&[out]))?;
        }
        let limit = (6.0 / (a + 1) as f64).sqrt();
        params.insert("w_a", Tensor::uniform(&[a], -limit, limit, &mut rng))?;
        params.insert("w_o", Tensor::glorot_uniform(num_answers, j, &mut rng))?;
        Ok(VqaModel { config, question_vocab_size, num_answers, params })
    }

    pub fn from_store(
        config: VqaConfig,
        question_vocab_size: usize,
        num_answers: usize,
        params: ParamStore,
    ) -> Result<Self, VqaError> {
        let template = VqaModel::new(config, question_vocab_size, num_answers, 0)?;
        for (name, tensor) in template.params.values() {
            match params.get(name) {
                Ok(loaded) if loaded.shape() == tensor.shape() => {}
                Ok(loaded) => {
                    return Err(VqaError::CheckpointMismatch {
                        detail: format!(
                            "{name}: checkpoint shape {:?}, expected {:?}",
                            loaded.shape(),
                            tensor.shape()
                        ),
                    })
                }
                Err(_) => {
                    return Err(VqaError::CheckpointMismatch {
                        detail: format!("checkpoint is missing {name}"),
                    })
                }
            }
        }
        Ok(VqaModel { config, question_vocab_size, num_answers, params })
    }

    /// Overwrite embedding rows from a plain-text "word v1 v2 ..." file for
    /// words present in the vocabulary.
    pub fn load_pretrained_embeddings(
        &mut self,
        path: &std::path::Path,
        vocab: &crate::corpus::Vocabulary,
    ) -> Result<usize, VqaError> {
        let text = std::fs::read_to_string(path).map_err(NumError::Io)?;
        let e = self.config.embed_dim;
        let mut loaded = 0;
        for line in text.lines() {
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let Some(id) = vocab.id(word) else { continue };
            let values: Vec<f64> = parts.filter_map(|p| p.parse().ok()).collect();
            if values.len() != e {
                continue;
            }
            let table = self.params.get_mut("w_emb")?;
            table.data_mut()[id as usize * e..(id as usize + 1) * e].copy_from_slice(&values);
            loaded += 1;
        }
        Ok(loaded)
    }

    pub fn bind(&self, g: &mut Graph) -> Result<BoundVqa, VqaError> {
        let leaf = |g: &mut Graph, store: &ParamStore, name: &str| -> Result<NodeId, VqaError> {
            let tensor = store.get(name)?.clone();
            Ok(g.leaf(tensor)?)
        };
        let block = |g: &mut Graph, store: &ParamStore, name: &str| -> Result<BoundGatedTanh, VqaError> {
            Ok(BoundGatedTanh {
                w: leaf(g, store, &format!("{name}.w"))?,
                w_gate: leaf(g, store, &format!("{name}.w_gate"))?,
                b: leaf(g, store, &format!("{name}.b"))?,
                b_gate: leaf(g, store, &format!("{name}.b_gate"))?,
            })
        };
        Ok(BoundVqa {
            w_emb: leaf(g, &self.params, "w_emb")?,
            gru: BoundGru {
                w: [
                    leaf(g, &self.params, "gru.w_z")?,
                    leaf(g, &self.params, "gru.w_r")?,
                    leaf(g, &self.params, "gru.w_h")?,
                ],
                u: [
                    leaf(g, &self.params, "gru.u_z")?,
                    leaf(g, &self.params, "gru.u_r")?,
                    leaf(g, &self.params, "gru.u_h")?,
                ],
                b: [
                    leaf(g, &self.params, "gru.b_z")?,
                    leaf(g, &self.params, "gru.b_r")?,
                    leaf(g, &self.params, "gru.b_h")?,
                ],
            },
            f_a: block(g, &self.params, "f_a")?,
            f_q: block(g, &self.params, "f_q")?,
            f_v: block(g, &self.params, "f_v")?,
            f_o: block(g, &self.params, "f_o")?,
            w_a: leaf(g, &self.params, "w_a")?,
            w_o: leaf(g, &self.params, "w_o")?,
        })
    }

    pub fn region_leaf(&self, g: &mut Graph, regions: &RegionSet) -> Result<NodeId, VqaError> {
        if regions.feature_dim() != self.config.feature_dim {
            return Err(VqaError::FeatureDimMismatch {
                expected: self.config.feature_dim,
                found: regions.feature_dim(),
            });
        }
        Ok(g.leaf(regions.to_tensor())?)
    }

    /// GRU encoding of a question: tokens beyond the trim length are
    /// dropped; an empty question contributes one PAD step.
    pub fn encode_question_on_graph(
        &self,
        g: &mut Graph,
        bound: &BoundVqa,
        token_ids: &[u32],
    ) -> Result<NodeId, VqaError> {
        let trimmed: Vec<u32> = token_ids.iter().copied().take(self.config.max_question_len).collect();
        let effective: Vec<u32> = if trimmed.is_empty() { vec![PAD] } else { trimmed };
        let mut h = g.leaf(Tensor::zeros(&[self.config.gru_hidden]))?;
        for &token in &effective {
            if token as usize >= self.question_vocab_size {
                return Err(VqaError::TokenOutOfRange { id: token, vocab: self.question_vocab_size });
            }
            let x = g.row_lookup(bound.w_emb, token as usize)?;
            h = gru_cell(g, &bound.gru, x, h)?;
        }
        Ok(h)
    }

    /// Question-conditioned attention: scores from a gated-tanh projection
    /// of each region concatenated with the question state.
    pub fn attend_on_graph(
        &self,
        g: &mut Graph,
        bound: &BoundVqa,
        v: NodeId,
        q: NodeId,
    ) -> Result<(NodeId, NodeId), VqaError> {
        let k = g.value(v).rows();
        let mut scores = Vec::with_capacity(k);
        for i in 0..k {
            let v_i = g.row_lookup(v, i)?;
            let joint = g.concat(&[v_i, q])?;
            let projected = gated_tanh(g, &bound.f_a, joint)?;
            let weighted = g.hadamard(bound.w_a, projected)?;
            scores.push(g.sum(weighted)?);
        }
        let stacked = g.concat(&scores)?;
        let alpha = g.softmax_row(stacked)?;
        let vhat = g.vecmat(alpha, v)?;
        Ok((alpha, vhat))
    }

    /// Per-answer logits: h = f_q(q) o f_v(vhat), logits = W_o f_o(h).
    pub fn logits_on_graph(
        &self,
        g: &mut Graph,
        bound: &BoundVqa,
        v: NodeId,
        question_ids: &[u32],
    ) -> Result<(NodeId, NodeId), VqaError> {
        let q = self.encode_question_on_graph(g, bound, question_ids)?;
        let (alpha, vhat) = self.attend_on_graph(g, bound, v, q)?;
        let question_part = gated_tanh(g, &bound.f_q, q)?;
        let visual_part = gated_tanh(g, &bound.f_v, vhat)?;
        let joint = g.hadamard(question_part, visual_part)?;
        let fused = gated_tanh(g, &bound.f_o, joint)?;
        let logits = g.matmul(bound.w_o, fused)?;
        Ok((logits, alpha))
    }

    /// Inference: independent per-answer sigmoid scores plus the attention
    /// weights.
    pub fn predict(
        &self,
        regions: &RegionSet,
        question_ids: &[u32],
    ) -> Result<VqaPrediction, VqaError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let v = self.region_leaf(&mut g, regions)?;
        let (logits, alpha) = self.logits_on_graph(&mut g, &bound, v, question_ids)?;
        let scores = g.sigmoid(logits)?;
        Ok(VqaPrediction {
            scores: g.value(scores).clone(),
            alpha: g.value(alpha).clone(),
        })
    }

    /// Question state as a plain tensor, for probes.
    pub fn question_state(&self, question_ids: &[u32]) -> Result<Tensor, VqaError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let q = self.encode_question_on_graph(&mut g, &bound, question_ids)?;
        Ok(g.value(q).clone())
    }
}

/// Best-scoring answer index and score.
pub fn argmax_answer(scores: &Tensor) -> (usize, f64) {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, &s) in scores.data().iter().enumerate() {
        if s > best.1 {
            best = (i, s);
        }
    }
    best
}

pub struct VqaPrediction {
    pub scores: Tensor,
    pub alpha: Tensor,
}

/// Mean binary cross entropy between scores and soft targets, clamped at
/// 1e-12. Forward-only; training uses the stable logits form.
pub fn vqa_loss(scores: &Tensor, targets: &Tensor) -> Result<f64, VqaError> {
    if !scores.same_shape(targets) {
        return Err(VqaError::Num(NumError::ShapeMismatch {
            op: "vqa_loss",
            detail: format!("{:?} vs {:?}", scores.shape(), targets.shape()),
        }));
    }
    if targets.data().iter().any(|&t| !(0.0..=1.0).contains(&t)) {
        return Err(VqaError::TargetOutOfRange);
    }
    let clamp = |p: f64| p.max(1e-12).min(1.0 - 1e-12);
    let total: f64 = scores
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&s, &t)| {
            let s = clamp(s);
            -(t * s.ln() + (1.0 - t) * (1.0 - s).ln())
        })
        .sum();
    Ok(total / scores.numel() as f64)
}

/// Leaf ids of a gated-tanh block: y = tanh(Wx + b) o sigmoid(W'x + b').
pub struct BoundGatedTanh {
    pub w: NodeId,
    pub w_gate: NodeId,
    pub b: NodeId,
    pub b_gate: NodeId,
}

pub fn gated_tanh(g: &mut Graph, p: &BoundGatedTanh, x: NodeId) -> Result<NodeId, NumError> {
    let pre = g.affine(p.w, x, p.b)?;
    let activated = g.tanh(pre)?;
    let gate_pre = g.affine(p.w_gate, x, p.b_gate)?;
    let gate = g.sigmoid(gate_pre)?;
    g.hadamard(activated, gate)
}

/// Leaf ids of the GRU in z (update), r (reset), h (candidate) order.
pub struct BoundGru {
    w: [NodeId; 3],
    u: [NodeId; 3],
    b: [NodeId; 3],
}

/// Cho-variant GRU cell: z and r sigmoid gates, candidate from the reset
/// state, new state h + z o (candidate - h).
pub fn gru_cell(g: &mut Graph, p: &BoundGru, x: NodeId, h_prev: NodeId) -> Result<NodeId, NumError> {
    let gate = |g: &mut Graph, idx: usize, state: NodeId| -> Result<NodeId, NumError> {
        let wx = g.affine(p.w[idx], x, p.b[idx])?;
        let uh = g.matmul(p.u[idx], state)?;
        g.add(wx, uh)
    };
    let z_pre = gate(g, 0, h_prev)?;
    let z = g.sigmoid(z_pre)?;
    let r_pre = gate(g, 1, h_prev)?;
    let r = g.sigmoid(r_pre)?;
    let reset = g.hadamard(r, h_prev)?;
    let cand_pre = gate(g, 2, reset)?;
    let candidate = g.tanh(cand_pre)?;
    // h' = (1 - z) o h_prev + z o candidate, written as h + z o (cand - h)
    let neg_h = g.scalar_mul(h_prev, -1.0)?;
    let delta = g.add(candidate, neg_h)?;
    let gated = g.hadamard(z, delta)?;
    g.add(h_prev, gated)
}

/// Leaf ids of every VQA parameter in one graph.
pub struct BoundVqa {
    pub w_emb: NodeId,
    gru: BoundGru,
    f_a: BoundGatedTanh,
    f_q: BoundGatedTanh,
    f_v: BoundGatedTanh,
    f_o: BoundGatedTanh,
    pub w_a: NodeId,
    pub w_o: NodeId,
}

impl BoundVqa {
    pub fn named_leaves(&self) -> Vec<(String, NodeId)> {
        let mut out = vec![
            ("w_emb".to_string(), self.w_emb),
            ("w_a".to_string(), self.w_a),
            ("w_o".to_string(), self.w_o),
        ];
        for (idx, gate) in GRU_GATES.iter().enumerate() {
            out.push((format!("gru.w_{gate}"), self.gru.w[idx]));
            out.push((format!("gru.u_{gate}"), self.gru.u[idx]));
            out.push((format!("gru.b_{gate}"), self.gru.b[idx]));
        }
        for (name, block) in GATED_BLOCKS
            .iter()
            .zip([&self.f_a, &self.f_q, &self.f_v, &self.f_o])
        {
            out.push((format!("{name}.w"), block.w));
            out.push((format!("{name}.w_gate"), block.w_gate));
            out.push((format!("{name}.b"), block.b));
            out.push((format!("{name}.b_gate"), block.b_gate));
        }
        out
    }
}
