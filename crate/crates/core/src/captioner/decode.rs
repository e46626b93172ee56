use crate::corpus::{Vocabulary, BOS, EOS, PAD, UNK};
use crate::numcore::Graph;
use crate::regions::RegionSet;

use super::{CaptionError, Captioner, StepNodes};

/// Decoding knobs. `no_repeat` forbids emitting the same word twice in a row.
#[derive(Clone, Copy, Debug)]
pub struct DecodeOptions {
    pub beam_size: usize,
    pub max_len: usize,
    pub no_repeat: bool,
}

impl DecodeOptions {
    pub fn from_config(config: &super::CaptionerConfig) -> Self {
        DecodeOptions { beam_size: config.beam_size, max_len: config.max_len, no_repeat: true }
    }
}

/// A decoded caption: content token ids (no BOS/EOS), the summed log
/// probability of every chosen step including the terminating EOS when
/// `finished`, and one attention row per content token.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
    pub alphas: Vec<Vec<f64>>,
}

/// PAD, BOS and UNK are never emitted; a repeat of the previous token is
/// dropped when `no_repeat` is on.
fn allowed(token: u32, prev_content: Option<u32>, no_repeat: bool) -> bool {
    if token == PAD || token == BOS || token == UNK {
        return false;
    }
    if no_repeat {
        if let Some(prev) = prev_content {
            if token == prev {
                return false;
            }
        }
    }
    true
}

/// Deterministic preference among expansion candidates: higher score first,
/// an exact score tie prefers content tokens over EOS, then the lower id.
/// Never ending on an exact tie keeps untrained (all-uniform) models from
/// collapsing to empty captions.
fn candidate_order(a: &(f64, u32), b: &(f64, u32)) -> std::cmp::Ordering {
    b.0.partial_cmp(&a.0)
        .expect("log probabilities are finite")
        .then((a.1 == EOS).cmp(&(b.1 == EOS)))
        .then(a.1.cmp(&b.1))
}

impl Captioner {
    /// Argmax decoding from BOS until EOS or `max_len` content tokens.
    /// Identical to beam search with a beam of one.
    pub fn greedy_decode(
        &self,
        regions: &RegionSet,
        options: &DecodeOptions,
    ) -> Result<Hypothesis, CaptionError> {
        let mut beam_one = *options;
        beam_one.beam_size = 1;
        let mut results = self.beam_search(regions, &beam_one)?;
        Ok(results.remove(0))
    }

    /// Length-synchronous beam search with per-step top-beam pruning.
    /// Hypotheses that emit EOS retire to a pool; the pool plus any
    /// still-live hypotheses at `max_len` are returned sorted by total log
    /// probability.
    pub fn beam_search(
        &self,
        regions: &RegionSet,
        options: &DecodeOptions,
    ) -> Result<Vec<Hypothesis>, CaptionError> {
        assert!(options.beam_size >= 1, "beam size must be at least 1");
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let (v, vbar) = self.image_nodes(&mut g, regions)?;

        struct Live {
            tokens: Vec<u32>,
            log_prob: f64,
            alphas: Vec<Vec<f64>>,
            state: StepNodes,
        }
        let mut live = vec![Live {
            tokens: Vec::new(),
            log_prob: 0.0,
            alphas: Vec::new(),
            state: self.init_state_nodes(&mut g)?,
        }];
        let mut pool: Vec<Hypothesis> = Vec::new();

        for _ in 0..options.max_len {
            if live.is_empty() {
                break;
            }
            struct Candidate {
                parent: usize,
                token: u32,
                score: f64,
                state: StepNodes,
                alpha: Vec<f64>,
            }
            let mut candidates: Vec<Candidate> = Vec::new();
            for (parent, hyp) in live.iter().enumerate() {
                let prev = hyp.tokens.last().copied();
                let input = prev.unwrap_or(BOS);
                let (state, log_probs, alpha) =
                    self.step_on_graph(&mut g, &bound, &hyp.state, input, v, vbar)?;
                let lp = g.value(log_probs).data();
                let alpha_values = g.value(alpha).data().to_vec();
                for (token, &token_lp) in lp.iter().enumerate() {
                    let token = token as u32;
                    if allowed(token, prev, options.no_repeat) {
                        candidates.push(Candidate {
                            parent,
                            token,
                            score: hyp.log_prob + token_lp,
                            state,
                            alpha: alpha_values.clone(),
                        });
                    }
                }
            }
            candidates.sort_by(|a, b| {
                candidate_order(&(a.score, a.token), &(b.score, b.token)).then(a.parent.cmp(&b.parent))
            });

            let mut next_live: Vec<Live> = Vec::new();
            for cand in candidates {
                if next_live.len() == options.beam_size {
                    break;
                }
                let parent = &live[cand.parent];
                if cand.token == EOS {
                    pool.push(Hypothesis {
                        tokens: parent.tokens.clone(),
                        log_prob: cand.score,
                        finished: true,
                        alphas: parent.alphas.clone(),
                    });
                } else {
                    let mut tokens = parent.tokens.clone();
                    tokens.push(cand.token);
                    let mut alphas = parent.alphas.clone();
                    alphas.push(cand.alpha);
                    next_live.push(Live {
                        tokens,
                        log_prob: cand.score,
                        alphas,
                        state: cand.state,
                    });
                }
            }
            live = next_live;
        }

        for hyp in live {
            pool.push(Hypothesis {
                tokens: hyp.tokens,
                log_prob: hyp.log_prob,
                finished: false,
                alphas: hyp.alphas,
            });
        }
        pool.sort_by(|a, b| {
            b.log_prob
                .partial_cmp(&a.log_prob)
                .expect("finite scores")
                .then(b.finished.cmp(&a.finished))
                .then(a.tokens.cmp(&b.tokens))
        });
        Ok(pool)
    }

    /// Teacher-forced attention rows for a given token sequence, one row per
    /// content token.
    pub fn forced_alphas(
        &self,
        regions: &RegionSet,
        tokens: &[u32],
    ) -> Result<Vec<Vec<f64>>, CaptionError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let (v, vbar) = self.image_nodes(&mut g, regions)?;
        let mut state = self.init_state_nodes(&mut g)?;
        let mut prev = BOS;
        let mut alphas = Vec::with_capacity(tokens.len());
        for &token in tokens {
            if token == PAD || token == EOS {
                break;
            }
            let (next, _, alpha) = self.step_on_graph(&mut g, &bound, &state, prev, v, vbar)?;
            alphas.push(g.value(alpha).data().to_vec());
            state = next;
            prev = token;
        }
        Ok(alphas)
    }
}

/// Decode ids back to a caption string, for reports and reward computation.
pub fn caption_string(vocab: &Vocabulary, hypothesis: &Hypothesis) -> String {
    hypothesis
        .tokens
        .iter()
        .filter_map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}
