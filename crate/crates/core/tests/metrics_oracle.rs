//! Cross-checks the metric implementations against the independent
//! brute-force oracles on random toy corpora.

mod common;

use common::{bleu4_oracle, cider_d_oracle, random_toy_corpus, rouge_l_oracle, toks};
use updown_core::metrics;

#[test]
fn cider_d_matches_oracle_on_twenty_random_corpora() {
    for seed in 0..20 {
        let (cands, refs) = random_toy_corpus(1000 + seed, 2 + (seed as usize % 6));
        let got = metrics::cider_d(&cands, &refs).unwrap();
        let expected = cider_d_oracle(&cands, &refs);
        for (i, (g, e)) in got.per_image.iter().zip(&expected).enumerate() {
            assert!(
                (g - e).abs() < 1e-9,
                "seed {seed} image {i}: implementation {g} vs oracle {e}"
            );
        }
    }
}

#[test]
fn bleu4_matches_oracle_on_twenty_random_corpora() {
    for seed in 0..20 {
        let (cands, refs) = random_toy_corpus(2000 + seed, 1 + (seed as usize % 7));
        let got = metrics::bleu4(&cands, &refs).unwrap();
        let expected = bleu4_oracle(&cands, &refs);
        assert!((got - expected).abs() < 1e-9, "seed {seed}: {got} vs {expected}");
    }
}

#[test]
fn rouge_l_matches_oracle_on_random_sentences() {
    for seed in 0..20 {
        let (cands, refs) = random_toy_corpus(3000 + seed, 5);
        for (cand, rs) in cands.iter().zip(&refs) {
            let got = metrics::rouge_l(cand, rs);
            let expected = rouge_l_oracle(cand, rs);
            assert!((got - expected).abs() < 1e-12, "seed {seed}: {got} vs {expected}");
        }
    }
}

#[test]
fn vqa_accuracy_reproduces_adopted_formula_for_all_match_counts() {
    for n in 0..=10usize {
        let mut answers: Vec<String> = vec!["yes".into(); n];
        answers.extend(vec!["no".to_string(); 10 - n]);
        let got = metrics::vqa_accuracy("yes", &answers).unwrap();
        let expected = (n as f64 / 3.0).min(1.0);
        assert!((got - expected).abs() < 1e-12, "n = {n}");
    }
}

#[test]
fn self_reference_eval_on_disjoint_corpus() {
    let cands = vec![toks("a small green circle left of a box"), toks("two huge purple dogs")];
    let refs: Vec<Vec<Vec<String>>> = cands.iter().map(|c| vec![c.clone()]).collect();
    assert!((metrics::bleu4(&cands, &refs).unwrap() - 1.0).abs() < 1e-12);
    let cider = metrics::cider_d(&cands, &refs).unwrap();
    assert!((cider.mean - 10.0).abs() < 1e-9);
}
