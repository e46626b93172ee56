//! Independent brute-force oracles shared by the integration and acceptance
//! suites. These deliberately avoid the library's own metric code paths:
//! n-grams are joined strings in ordered maps and every formula is evaluated
//! directly from its definition.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(|w| w.to_string()).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<String, f64> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window.join("\u{1}")).or_insert(0.0) += 1.0;
        }
    }
    counts
}

/// Corpus BLEU-4 evaluated straight from the definition: clipped modified
/// precisions for n = 1..4, geometric mean, brevity penalty from closest
/// reference lengths (ties toward the shorter reference).
pub fn bleu4_oracle(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> f64 {
    assert_eq!(candidates.len(), references.len());
    let mut matched = [0.0f64; 4];
    let mut total = [0.0f64; 4];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;

    for (cand, refs) in candidates.iter().zip(references) {
        cand_len += cand.len();
        let closest = refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| ((l as i64 - cand.len() as i64).abs(), l))
            .expect("at least one reference");
        ref_len += closest;

        for n in 1..=4 {
            let cand_counts = ngram_counts(cand, n);
            let mut max_ref: BTreeMap<String, f64> = BTreeMap::new();
            for r in refs {
                for (gram, count) in ngram_counts(r, n) {
                    let entry = max_ref.entry(gram).or_insert(0.0);
                    if count > *entry {
                        *entry = count;
                    }
                }
            }
            for (gram, count) in &cand_counts {
                total[n - 1] += count;
                matched[n - 1] += count.min(max_ref.get(gram).copied().unwrap_or(0.0));
            }
        }
    }

    let mut log_sum = 0.0;
    for n in 0..4 {
        if total[n] == 0.0 || matched[n] == 0.0 {
            return 0.0;
        }
        log_sum += (matched[n] / total[n]).ln();
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    bp * (log_sum / 4.0).exp()
}

/// CIDEr-D evaluated straight from the definition: TF-IDF n-gram vectors with
/// document frequency over per-image reference sets, count-clipped cosine,
/// Gaussian length penalty with sigma = 6, averaged over n = 1..4, times 10.
pub fn cider_d_oracle(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Vec<f64> {
    assert_eq!(candidates.len(), references.len());
    let num_images = references.len();
    assert!(num_images >= 2, "IDF is degenerate below two images");
    let sigma = 6.0f64;
    let log_images = (num_images as f64).ln();

    // DF[gram] = number of images whose reference set contains the gram.
    let mut df: BTreeMap<String, f64> = BTreeMap::new();
    for refs in references {
        let mut seen: BTreeSet<String> = BTreeSet::new();
        for r in refs {
            for n in 1..=4 {
                seen.extend(ngram_counts(r, n).into_keys());
            }
        }
        for gram in seen {
            *df.entry(gram).or_insert(0.0) += 1.0;
        }
    }

    let tfidf = |tokens: &[String], n: usize| -> BTreeMap<String, f64> {
        ngram_counts(tokens, n)
            .into_iter()
            .map(|(gram, count)| {
                let d = df.get(&gram).copied().unwrap_or(0.0).max(1.0).ln();
                (gram, count * (log_images - d))
            })
            .collect()
    };
    let norm = |v: &BTreeMap<String, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();

    let mut scores = Vec::with_capacity(num_images);
    for (cand, refs) in candidates.iter().zip(references) {
        let mut total = 0.0;
        for r in refs {
            for n in 1..=4 {
                let vc = tfidf(cand, n);
                let vr = tfidf(r, n);
                let (nc, nr) = (norm(&vc), norm(&vr));
                let mut dot = 0.0;
                for (gram, &c) in &vc {
                    if let Some(&rv) = vr.get(gram) {
                        dot += c.min(rv) * rv;
                    }
                }
                let cosine = if nc != 0.0 && nr != 0.0 { dot / (nc * nr) } else { 0.0 };
                let delta = cand.len() as f64 - r.len() as f64;
                total += cosine * (-delta * delta / (2.0 * sigma * sigma)).exp();
            }
        }
        scores.push(10.0 * total / (4.0 * refs.len() as f64));
    }
    scores
}

/// Sentence ROUGE-L from the definition: LCS recall and precision combined
/// with beta = 1.2, maximum over references.
pub fn rouge_l_oracle(candidate: &[String], references: &[Vec<String>]) -> f64 {
    let beta2 = 1.2f64 * 1.2;
    let mut best = 0.0f64;
    for r in references {
        let lcs = lcs_len(candidate, r) as f64;
        if lcs == 0.0 {
            continue;
        }
        let recall = lcs / r.len() as f64;
        let precision = lcs / candidate.len() as f64;
        let f = (1.0 + beta2) * recall * precision / (recall + beta2 * precision);
        best = best.max(f);
    }
    best
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut table = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            table[i][j] = if a[i - 1] == b[j - 1] {
                table[i - 1][j - 1] + 1
            } else {
                table[i - 1][j].max(table[i][j - 1])
            };
        }
    }
    table[a.len()][b.len()]
}

/// Deterministic toy corpora over a tiny alphabet for oracle comparisons.
pub fn random_toy_corpus(seed: u64, images: usize) -> (Vec<Vec<String>>, Vec<Vec<Vec<String>>>) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let words = ["red", "blue", "circle", "square", "big", "small", "left", "of", "a", "the"];
    let sentence = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<String> {
        let len = rng.random_range(3..10);
        (0..len).map(|_| words[rng.random_range(0..words.len())].to_string()).collect()
    };
    let mut candidates = Vec::new();
    let mut references = Vec::new();
    for _ in 0..images {
        candidates.push(sentence(&mut rng));
        let refs = (0..rng.random_range(1..4)).map(|_| sentence(&mut rng)).collect();
        references.push(refs);
    }
    (candidates, references)
}
