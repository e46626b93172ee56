//! Two-layer attention captioner: an attention LSTM conditioned on the
//! language state, the mean-pooled image feature and the previous word, a
//! soft attention over region features, and a language LSTM producing the
//! word distribution. Cross-entropy training, greedy and beam decoding live
//! in the submodules.

mod decode;
mod train;

pub use decode::{caption_string, DecodeOptions, Hypothesis};
pub use train::{
    token_reconstruction, train_xe, xe_loss_grads, xe_loss_value, CaptionExample, LossRow,
    XeTrainOptions,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{BOS, EOS, PAD};
use crate::numcore::{Graph, NodeId, NumError, ParamStore, Tensor};
use crate::regions::RegionSet;

#[derive(Debug, thiserror::Error)]
pub enum CaptionError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("word id {id} out of range for vocabulary of {vocab}")]
    WordIdOutOfRange { id: u32, vocab: usize },
    #[error("empty target sequence")]
    EmptyTarget,
    #[error("target sequence must end with EOS")]
    TargetMissingEos,
    #[error("region features have dimension {found}, model expects {expected}")]
    FeatureDimMismatch { expected: usize, found: usize },
    #[error("checkpoint does not match the configuration: {detail}")]
    CheckpointMismatch { detail: String },
    #[error("training diverged at iteration {iteration}: {source}")]
    Diverged { iteration: usize, source: NumError },
    #[error("dataset is empty")]
    EmptyDataset,
}

/// Model dimensions. `lstm_hidden` is shared by both LSTM layers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaptionerConfig {
    pub lstm_hidden: usize,
    pub attn_hidden: usize,
    pub embed_dim: usize,
    pub feature_dim: usize,
    pub beam_size: usize,
    pub max_len: usize,
}

impl CaptionerConfig {
    /// Desk-scale defaults: small enough to train on one core in minutes.
    pub fn desk() -> Self {
        CaptionerConfig {
            lstm_hidden: 64,
            attn_hidden: 32,
            embed_dim: 32,
            feature_dim: 64,
            beam_size: 5,
            max_len: 16,
        }
    }

    /// Published full-scale hyperparameters, kept for documentation parity.
    pub fn paper() -> Self {
        CaptionerConfig {
            lstm_hidden: 1000,
            attn_hidden: 512,
            embed_dim: 1000,
            feature_dim: 2048,
            beam_size: 5,
            max_len: 20,
        }
    }

    pub fn validate(&self) -> Result<(), CaptionError> {
        let fields = [
            ("lstm_hidden", self.lstm_hidden),
            ("attn_hidden", self.attn_hidden),
            ("embed_dim", self.embed_dim),
            ("feature_dim", self.feature_dim),
            ("beam_size", self.beam_size),
            ("max_len", self.max_len),
        ];
        for (name, value) in fields {
            if value == 0 {
                return Err(CaptionError::CheckpointMismatch {
                    detail: format!("{name} must be positive"),
                });
            }
        }
        Ok(())
    }
}

const LSTM_GATES: [&str; 4] = ["i", "f", "o", "g"];

/// The captioning model: configuration, vocabulary size, and every learned
/// tensor in a named store. The word embedding is stored row-per-token so
/// lookup is a row read.
pub struct Captioner {
    pub config: CaptionerConfig,
    pub vocab_size: usize,
    pub params: ParamStore,
}

impl Captioner {
    /// Fresh model: Glorot-uniform weights, uniform(-0.1, 0.1) embeddings,
    /// zero biases.
    pub fn new(config: CaptionerConfig, vocab_size: usize, seed: u64) -> Result<Self, CaptionError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (m, h, e, d) = (config.lstm_hidden, config.attn_hidden, config.embed_dim, config.feature_dim);

        params.insert("w_e", Tensor::uniform(&[vocab_size, e], -0.1, 0.1, &mut rng))?;
        let x1_dim = m + d + e;
        let x2_dim = d + m;
        for (layer, input_dim) in [("lstm1", x1_dim), ("lstm2", x2_dim)] {
            for gate in LSTM_GATES {
                params.insert(&format!("{layer}.w_x{gate}"), Tensor::glorot_uniform(m, input_dim, &mut rng))?;
                params.insert(&format!("{layer}.w_h{gate}"), Tensor::glorot_uniform(m, m, &mut rng))?;
                params.insert(&format!("{layer}.b_{gate}"), Tensor::zeros(&[m]))?;
            }
        }
        params.insert("w_va", Tensor::glorot_uniform(h, d, &mut rng))?;
        params.insert("w_ha", Tensor::glorot_uniform(h, m, &mut rng))?;
        let limit = (6.0 / (h + 1) as f64).sqrt();
        params.insert("w_a", Tensor::uniform(&[h], -limit, limit, &mut rng))?;
        params.insert("w_p", Tensor::glorot_uniform(vocab_size, m, &mut rng))?;
        params.insert("b_p", Tensor::zeros(&[vocab_size]))?;
        Ok(Captioner { config, vocab_size, params })
    }

    /// Wrap a loaded store, verifying every expected tensor and shape.
    pub fn from_store(
        config: CaptionerConfig,
        vocab_size: usize,
        params: ParamStore,
    ) -> Result<Self, CaptionError> {
        config.validate()?;
        let template = Captioner::new(config, vocab_size, 0)?;
        for (name, tensor) in template.params.values() {
            match params.get(name) {
                Ok(loaded) if loaded.shape() == tensor.shape() => {}
                Ok(loaded) => {
                    return Err(CaptionError::CheckpointMismatch {
                        detail: format!(
                            "{name}: checkpoint shape {:?}, expected {:?}",
                            loaded.shape(),
                            tensor.shape()
                        ),
                    })
                }
                Err(_) => {
                    return Err(CaptionError::CheckpointMismatch {
                        detail: format!("checkpoint is missing {name}"),
                    })
                }
            }
        }
        Ok(Captioner { config, vocab_size, params })
    }

    /// Insert every parameter as a graph leaf. The returned binding maps the
    /// leaves back to store names for gradient extraction.
    pub fn bind(&self, g: &mut Graph) -> Result<BoundCaptioner, CaptionError> {
        let leaf = |g: &mut Graph, store: &ParamStore, name: &str| -> Result<NodeId, CaptionError> {
            let tensor = store.get(name)?.clone();
            Ok(g.leaf(tensor)?)
        };
        let lstm = |g: &mut Graph, store: &ParamStore, layer: &str| -> Result<BoundLstm, CaptionError> {
            Ok(BoundLstm {
                w_x: [
                    leaf(g, store, &format!("{layer}.w_xi"))?,
                    leaf(g, store, &format!("{layer}.w_xf"))?,
                    leaf(g, store, &format!("{layer}.w_xo"))?,
                    leaf(g, store, &format!("{layer}.w_xg"))?,
                ],
                w_h: [
                    leaf(g, store, &format!("{layer}.w_hi"))?,
                    leaf(g, store, &format!("{layer}.w_hf"))?,
                    leaf(g, store, &format!("{layer}.w_ho"))?,
                    leaf(g, store, &format!("{layer}.w_hg"))?,
                ],
                b: [
                    leaf(g, store, &format!("{layer}.b_i"))?,
                    leaf(g, store, &format!("{layer}.b_f"))?,
                    leaf(g, store, &format!("{layer}.b_o"))?,
                    leaf(g, store, &format!("{layer}.b_g"))?,
                ],
            })
        };
        let bound = BoundCaptioner {
            w_e: leaf(g, &self.params, "w_e")?,
            lstm1: lstm(g, &self.params, "lstm1")?,
            lstm2: lstm(g, &self.params, "lstm2")?,
            w_va: leaf(g, &self.params, "w_va")?,
            w_ha: leaf(g, &self.params, "w_ha")?,
            w_a: leaf(g, &self.params, "w_a")?,
            w_p: leaf(g, &self.params, "w_p")?,
            b_p: leaf(g, &self.params, "b_p")?,
        };
        Ok(bound)
    }

    /// Region features as a graph leaf plus their mean-pooled vector.
    pub fn image_nodes(&self, g: &mut Graph, regions: &RegionSet) -> Result<(NodeId, NodeId), CaptionError> {
        if regions.feature_dim() != self.config.feature_dim {
            return Err(CaptionError::FeatureDimMismatch {
                expected: self.config.feature_dim,
                found: regions.feature_dim(),
            });
        }
        let v = g.leaf(regions.to_tensor())?;
        let vbar = g.mean_rows(v)?;
        Ok((v, vbar))
    }

    fn check_word(&self, id: u32) -> Result<usize, CaptionError> {
        if (id as usize) < self.vocab_size {
            Ok(id as usize)
        } else {
            Err(CaptionError::WordIdOutOfRange { id, vocab: self.vocab_size })
        }
    }

    /// One decoder step on the graph: embeds the previous word, advances both
    /// LSTMs through the attention block, and returns the next state with the
    /// log word distribution and the attention weights.
    pub fn step_on_graph(
        &self,
        g: &mut Graph,
        bound: &BoundCaptioner,
        state: &StepNodes,
        prev_word: u32,
        v: NodeId,
        vbar: NodeId,
    ) -> Result<(StepNodes, NodeId, NodeId), CaptionError> {
        let word = self.check_word(prev_word)?;
        let embedding = g.row_lookup(bound.w_e, word)?;
        let x1 = g.concat(&[state.h2, vbar, embedding])?;
        let (h1, c1) = lstm_cell(g, &bound.lstm1, x1, state.h1, state.c1)?;
        let (alpha, vhat) = attend_nodes(g, bound, v, h1)?;
        let x2 = g.concat(&[vhat, h1])?;
        let (h2, c2) = lstm_cell(g, &bound.lstm2, x2, state.h2, state.c2)?;
        let logits = g.affine(bound.w_p, h2, bound.b_p)?;
        let log_probs = g.log_softmax_row(logits)?;
        Ok((StepNodes { h1, c1, h2, c2 }, log_probs, alpha))
    }

    /// Zero-initialized hidden and memory cells.
    pub fn init_state_nodes(&self, g: &mut Graph) -> Result<StepNodes, CaptionError> {
        let m = self.config.lstm_hidden;
        Ok(StepNodes {
            h1: g.leaf(Tensor::zeros(&[m]))?,
            c1: g.leaf(Tensor::zeros(&[m]))?,
            h2: g.leaf(Tensor::zeros(&[m]))?,
            c2: g.leaf(Tensor::zeros(&[m]))?,
        })
    }

    /// Single-shot step over plain tensors; builds a throwaway graph.
    pub fn step(
        &self,
        state: &DecodeState,
        prev_word: u32,
        regions: &RegionSet,
    ) -> Result<(DecodeState, Tensor, Tensor), CaptionError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let (v, vbar) = self.image_nodes(&mut g, regions)?;
        let nodes = StepNodes {
            h1: g.leaf(state.h1.clone())?,
            c1: g.leaf(state.c1.clone())?,
            h2: g.leaf(state.h2.clone())?,
            c2: g.leaf(state.c2.clone())?,
        };
        let (next, log_probs, alpha) = self.step_on_graph(&mut g, &bound, &nodes, prev_word, v, vbar)?;
        let state = DecodeState {
            h1: g.value(next.h1).clone(),
            c1: g.value(next.c1).clone(),
            h2: g.value(next.h2).clone(),
            c2: g.value(next.c2).clone(),
            vbar: g.value(vbar).clone(),
            t: state.t + 1,
        };
        Ok((state, g.value(log_probs).clone(), g.value(alpha).clone()))
    }

    pub fn init_state(&self, regions: &RegionSet) -> Result<DecodeState, CaptionError> {
        if regions.feature_dim() != self.config.feature_dim {
            return Err(CaptionError::FeatureDimMismatch {
                expected: self.config.feature_dim,
                found: regions.feature_dim(),
            });
        }
        let m = self.config.lstm_hidden;
        let mut g = Graph::new();
        let v = g.leaf(regions.to_tensor())?;
        let vbar = g.mean_rows(v)?;
        Ok(DecodeState {
            h1: Tensor::zeros(&[m]),
            c1: Tensor::zeros(&[m]),
            h2: Tensor::zeros(&[m]),
            c2: Tensor::zeros(&[m]),
            vbar: g.value(vbar).clone(),
            t: 0,
        })
    }

    /// Teacher-forced negative log likelihood of a target sequence. The
    /// target excludes BOS; PAD entries and everything after them are
    /// masked out.
    pub fn sequence_nll(
        &self,
        g: &mut Graph,
        bound: &BoundCaptioner,
        v: NodeId,
        vbar: NodeId,
        target: &[u32],
    ) -> Result<NodeId, CaptionError> {
        if target.is_empty() {
            return Err(CaptionError::EmptyTarget);
        }
        let mut state = self.init_state_nodes(g)?;
        let mut picked = Vec::new();
        let mut prev = BOS;
        for &word in target {
            if word == PAD {
                break;
            }
            let index = self.check_word(word)?;
            let (next, log_probs, _) = self.step_on_graph(g, bound, &state, prev, v, vbar)?;
            picked.push(g.pick(log_probs, index)?);
            state = next;
            prev = word;
        }
        if picked.is_empty() {
            return Err(CaptionError::EmptyTarget);
        }
        let joined = g.concat(&picked)?;
        let total = g.sum(joined)?;
        Ok(g.scalar_mul(total, -1.0)?)
    }

    /// Cross-entropy loss of one caption: the target must end with EOS.
    pub fn xe_loss(
        &self,
        g: &mut Graph,
        bound: &BoundCaptioner,
        v: NodeId,
        vbar: NodeId,
        target: &[u32],
    ) -> Result<NodeId, CaptionError> {
        let effective: Vec<u32> = target.iter().copied().take_while(|&w| w != PAD).collect();
        if effective.is_empty() {
            return Err(CaptionError::EmptyTarget);
        }
        if *effective.last().expect("non-empty") != EOS {
            return Err(CaptionError::TargetMissingEos);
        }
        self.sequence_nll(g, bound, v, vbar, target)
    }
}

/// Graph handles for one decode step's recurrent state.
#[derive(Copy, Clone, Debug)]
pub struct StepNodes {
    pub h1: NodeId,
    pub c1: NodeId,
    pub h2: NodeId,
    pub c2: NodeId,
}

/// Tensor-level decoder state for the single-shot step API.
#[derive(Clone, Debug)]
pub struct DecodeState {
    pub h1: Tensor,
    pub c1: Tensor,
    pub h2: Tensor,
    pub c2: Tensor,
    pub vbar: Tensor,
    pub t: usize,
}

/// Leaf ids of one LSTM layer's gates in i, f, o, g order.
pub struct BoundLstm {
    w_x: [NodeId; 4],
    w_h: [NodeId; 4],
    b: [NodeId; 4],
}

/// Leaf ids of every captioner parameter in one graph.
pub struct BoundCaptioner {
    pub w_e: NodeId,
    lstm1: BoundLstm,
    lstm2: BoundLstm,
    pub w_va: NodeId,
    pub w_ha: NodeId,
    pub w_a: NodeId,
    pub w_p: NodeId,
    pub b_p: NodeId,
}

impl BoundCaptioner {
    /// (store name, leaf id) pairs for gradient extraction.
    pub fn named_leaves(&self) -> Vec<(String, NodeId)> {
        let mut out = vec![
            ("w_e".to_string(), self.w_e),
            ("w_va".to_string(), self.w_va),
            ("w_ha".to_string(), self.w_ha),
            ("w_a".to_string(), self.w_a),
            ("w_p".to_string(), self.w_p),
            ("b_p".to_string(), self.b_p),
        ];
        for (layer, bound) in [("lstm1", &self.lstm1), ("lstm2", &self.lstm2)] {
            for (gate_idx, gate) in LSTM_GATES.iter().enumerate() {
                out.push((format!("{layer}.w_x{gate}"), bound.w_x[gate_idx]));
                out.push((format!("{layer}.w_h{gate}"), bound.w_h[gate_idx]));
                out.push((format!("{layer}.b_{gate}"), bound.b[gate_idx]));
            }
        }
        out
    }
}

/// Standard four-gate LSTM cell: sigmoid input/forget/output gates, tanh
/// candidate, c = f.c_prev + i.g, h = o.tanh(c).
pub fn lstm_cell(
    g: &mut Graph,
    p: &BoundLstm,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
) -> Result<(NodeId, NodeId), NumError> {
    let mut pre = [None; 4];
    for gate in 0..4 {
        let wx = g.affine(p.w_x[gate], x, p.b[gate])?;
        let wh = g.matmul(p.w_h[gate], h_prev)?;
        pre[gate] = Some(g.add(wx, wh)?);
    }
    let input = g.sigmoid(pre[0].expect("set"))?;
    let forget = g.sigmoid(pre[1].expect("set"))?;
    let output = g.sigmoid(pre[2].expect("set"))?;
    let candidate = g.tanh(pre[3].expect("set"))?;
    let keep = g.hadamard(forget, c_prev)?;
    let write = g.hadamard(input, candidate)?;
    let c = g.add(keep, write)?;
    let c_act = g.tanh(c)?;
    let h = g.hadamard(output, c_act)?;
    Ok((h, c))
}

/// Soft attention over region rows: scores from a tanh projection of each
/// region and the attention-LSTM state, softmax-normalized, then a convex
/// combination of the rows.
fn attend_nodes(
    g: &mut Graph,
    bound: &BoundCaptioner,
    v: NodeId,
    h1: NodeId,
) -> Result<(NodeId, NodeId), NumError> {
    let w_va_t = g.transpose(bound.w_va)?;
    let projected = g.matmul(v, w_va_t)?;
    let state_proj = g.matmul(bound.w_ha, h1)?;
    let pre = g.add_row_broadcast(projected, state_proj)?;
    let activated = g.tanh(pre)?;
    let scores = g.matmul(activated, bound.w_a)?;
    let alpha = g.softmax_row(scores)?;
    let vhat = g.vecmat(alpha, v)?;
    Ok((alpha, vhat))
}

impl Captioner {
    /// Attention weights and attended feature for a given state, over plain
    /// tensors.
    pub fn attend(&self, regions: &RegionSet, h1: &Tensor) -> Result<(Tensor, Tensor), CaptionError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let (v, _) = self.image_nodes(&mut g, regions)?;
        let h1 = g.leaf(h1.clone())?;
        let (alpha, vhat) = attend_nodes(&mut g, &bound, v, h1)?;
        Ok((g.value(alpha).clone(), g.value(vhat).clone()))
    }
}
