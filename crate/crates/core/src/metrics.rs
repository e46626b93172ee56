//! Caption evaluation: corpus BLEU-4, sentence ROUGE-L, consensus-based
//! CIDEr-D, and the annotator-agreement VQA accuracy measure. All functions
//! take whitespace tokens and are deterministic and order-invariant in the
//! references.

use std::collections::{HashMap, HashSet};

pub const CIDER_SIGMA: f64 = 6.0;
pub const ROUGE_BETA: f64 = 1.2;
const MAX_N: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{candidates} candidates but {references} reference sets")]
    MismatchedLengths { candidates: usize, references: usize },
    #[error("candidate {index} has no references")]
    NoReferences { index: usize },
    #[error("degenerate IDF: CIDEr-D needs a corpus of at least two images")]
    DegenerateIdf,
    #[error("expected exactly 10 annotator answers, got {found}")]
    WrongAnnotatorCount { found: usize },
}

type NGram = Vec<String>;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<NGram, f64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    counts
}

fn check_corpus(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
) -> Result<(), MetricError> {
    if candidates.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    if candidates.len() != references.len() {
        return Err(MetricError::MismatchedLengths {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if let Some(index) = references.iter().position(|r| r.is_empty()) {
        return Err(MetricError::NoReferences { index });
    }
    Ok(())
}

/// Corpus-level BLEU-4: clipped modified n-gram precisions for n = 1..4,
/// geometric mean, brevity penalty against the closest reference length
/// (ties toward the shorter reference). No smoothing.
pub fn bleu4(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
) -> Result<f64, MetricError> {
    check_corpus(candidates, references)?;
    let mut matched = [0.0f64; MAX_N];
    let mut total = [0.0f64; MAX_N];
    let mut cand_len = 0usize;
    let mut effective_ref_len = 0usize;

    for (cand, refs) in candidates.iter().zip(references) {
        cand_len += cand.len();
        effective_ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| ((l as i64 - cand.len() as i64).abs(), l))
            .expect("non-empty reference set");

        for n in 1..=MAX_N {
            let mut clip: HashMap<NGram, f64> = HashMap::new();
            for r in refs {
                for (gram, count) in ngram_counts(r, n) {
                    let entry = clip.entry(gram).or_insert(0.0);
                    *entry = entry.max(count);
                }
            }
            for (gram, count) in ngram_counts(cand, n) {
                total[n - 1] += count;
                matched[n - 1] += count.min(clip.get(&gram).copied().unwrap_or(0.0));
            }
        }
    }

    if matched.iter().zip(&total).any(|(&m, &t)| m == 0.0 || t == 0.0) {
        return Ok(0.0);
    }
    let precision_log_mean = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m / t).ln())
        .sum::<f64>()
        / MAX_N as f64;
    let brevity = if cand_len > effective_ref_len {
        1.0
    } else {
        (1.0 - effective_ref_len as f64 / cand_len as f64).exp()
    };
    Ok(brevity * precision_log_mean.exp())
}

/// Sentence ROUGE-L: LCS-based F-measure with beta = 1.2, maximum over
/// references.
pub fn rouge_l(candidate: &[String], references: &[Vec<String>]) -> f64 {
    let beta2 = ROUGE_BETA * ROUGE_BETA;
    references
        .iter()
        .map(|r| {
            let lcs = lcs_length(candidate, r) as f64;
            if lcs == 0.0 {
                return 0.0;
            }
            let recall = lcs / r.len() as f64;
            let precision = lcs / candidate.len() as f64;
            (1.0 + beta2) * recall * precision / (recall + beta2 * precision)
        })
        .fold(0.0, f64::max)
}

fn lcs_length(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Per-n TF-IDF n-gram vector plus its norms and token length.
struct TfIdfVec {
    per_n: [HashMap<NGram, f64>; MAX_N],
    norms: [f64; MAX_N],
    len: usize,
}

/// CIDEr-D scorer with document frequencies precomputed over the reference
/// sets of a corpus. One image's reference set is one IDF document; weights
/// use natural logs and a 0/0 cosine counts as 0.
pub struct CiderScorer {
    doc_freq: HashMap<NGram, f64>,
    log_num_images: f64,
}

impl CiderScorer {
    pub fn new(references_per_image: &[Vec<Vec<String>>]) -> Result<Self, MetricError> {
        if references_per_image.len() < 2 {
            return Err(MetricError::DegenerateIdf);
        }
        let mut doc_freq: HashMap<NGram, f64> = HashMap::new();
        for refs in references_per_image {
            let mut seen: HashSet<NGram> = HashSet::new();
            for r in refs {
                for n in 1..=MAX_N {
                    seen.extend(ngram_counts(r, n).into_keys());
                }
            }
            for gram in seen {
                *doc_freq.entry(gram).or_insert(0.0) += 1.0;
            }
        }
        Ok(CiderScorer {
            doc_freq,
            log_num_images: (references_per_image.len() as f64).ln(),
        })
    }

    fn tfidf(&self, tokens: &[String]) -> TfIdfVec {
        let mut per_n: [HashMap<NGram, f64>; MAX_N] = Default::default();
        let mut norms = [0.0f64; MAX_N];
        for n in 1..=MAX_N {
            for (gram, count) in ngram_counts(tokens, n) {
                let df = self.doc_freq.get(&gram).copied().unwrap_or(0.0);
                let weight = count * (self.log_num_images - df.max(1.0).ln());
                norms[n - 1] += weight * weight;
                per_n[n - 1].insert(gram, weight);
            }
        }
        for norm in &mut norms {
            *norm = norm.sqrt();
        }
        TfIdfVec { per_n, norms, len: tokens.len() }
    }

    /// CIDEr-D of one candidate against one image's references, in [0, 10].
    pub fn score(&self, candidate: &[String], references: &[Vec<String>]) -> f64 {
        if references.is_empty() {
            return 0.0;
        }
        let cand = self.tfidf(candidate);
        let mut total = 0.0;
        for r in references {
            let rv = self.tfidf(r);
            let delta = cand.len as f64 - rv.len as f64;
            let penalty = (-delta * delta / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            for n in 0..MAX_N {
                let mut dot = 0.0;
                for (gram, &cw) in &cand.per_n[n] {
                    if let Some(&rw) = rv.per_n[n].get(gram) {
                        dot += cw.min(rw) * rw;
                    }
                }
                let cosine = if cand.norms[n] != 0.0 && rv.norms[n] != 0.0 {
                    dot / (cand.norms[n] * rv.norms[n])
                } else {
                    0.0
                };
                total += cosine * penalty;
            }
        }
        10.0 * total / (MAX_N as f64 * references.len() as f64)
    }
}

/// Per-image CIDEr-D scores plus the corpus mean.
#[derive(Clone, Debug)]
pub struct CiderScores {
    pub per_image: Vec<f64>,
    pub mean: f64,
}

/// Score every candidate against its own references with IDF built from the
/// same corpus's reference sets.
pub fn cider_d(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
) -> Result<CiderScores, MetricError> {
    check_corpus(candidates, references)?;
    let scorer = CiderScorer::new(references)?;
    let per_image: Vec<f64> = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| scorer.score(c, r))
        .collect();
    let mean = per_image.iter().sum::<f64>() / per_image.len() as f64;
    Ok(CiderScores { per_image, mean })
}

/// Lowercased, trimmed answer string for matching.
pub fn normalize_answer(answer: &str) -> String {
    answer.trim().to_lowercase()
}

/// Standard consensus accuracy: min(matching annotators / 3, 1).
pub fn vqa_accuracy(predicted: &str, annotator_answers: &[String]) -> Result<f64, MetricError> {
    if annotator_answers.len() != 10 {
        return Err(MetricError::WrongAnnotatorCount { found: annotator_answers.len() });
    }
    let prediction = normalize_answer(predicted);
    let matches = annotator_answers
        .iter()
        .filter(|a| normalize_answer(a) == prediction)
        .count();
    Ok((matches as f64 / 3.0).min(1.0))
}
