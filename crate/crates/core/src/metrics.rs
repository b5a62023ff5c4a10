//! Corpus BLEU, paired bootstrap resampling, and greedy/beam similarity.
//!
//! BLEU pools clipped n-gram matches (n = 1..4) over the whole corpus before
//! taking precisions. Orders for which the hypothesis side has no n-grams at
//! all are dropped from the geometric mean; otherwise a zero precision gives
//! a zero score. There is no smoothing.

use std::collections::HashMap;
use std::hash::Hash;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Counts of every n-gram of orders 1..=4 in a token sequence.
#[derive(Clone, Debug, Default)]
pub struct NgramProfile<'a, T: Eq + Hash> {
    counts: [HashMap<&'a [T], usize>; MAX_ORDER],
}

impl<'a, T: Eq + Hash> NgramProfile<'a, T> {
    pub fn new(tokens: &'a [T]) -> Self {
        let mut counts: [HashMap<&[T], usize>; MAX_ORDER] = Default::default();
        for (n, table) in counts.iter_mut().enumerate() {
            for gram in tokens.windows(n + 1) {
                *table.entry(gram).or_default() += 1;
            }
        }
        NgramProfile { counts }
    }

    pub fn count(&self, gram: &[T]) -> usize {
        self.counts[gram.len() - 1].get(gram).copied().unwrap_or(0)
    }

    /// Total n-grams of order `n` (1-based).
    pub fn total(&self, n: usize) -> usize {
        self.counts[n - 1].values().sum()
    }
}

/// Sufficient statistics of one or more sentence pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn of_pair<T: Eq + Hash>(hyp: &[T], reference: &[T]) -> Self {
        let h = NgramProfile::new(hyp);
        let r = NgramProfile::new(reference);
        let mut s = BleuStats {
            hyp_len: hyp.len(),
            ref_len: reference.len(),
            ..Default::default()
        };
        for n in 0..MAX_ORDER {
            for (gram, &c) in &h.counts[n] {
                s.matches[n] += c.min(r.count(gram));
            }
            s.totals[n] = hyp.len().saturating_sub(n);
        }
        s
    }

    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// BLEU on a 0-100 scale.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut orders = 0;
        for n in 0..MAX_ORDER {
            if self.totals[n] == 0 {
                continue;
            }
            if self.matches[n] == 0 {
                return 0.0;
            }
            log_sum += (self.matches[n] as f64 / self.totals[n] as f64).ln();
            orders += 1;
        }
        let bp = (1.0 - self.ref_len as f64 / self.hyp_len as f64).min(0.0);
        100.0 * (log_sum / orders as f64 + bp).exp()
    }
}

fn check_aligned(hyps: usize, refs: usize) -> Result<()> {
    if hyps != refs {
        return Err(Error::contract(format!("{hyps} hypotheses for {refs} references")));
    }
    if hyps == 0 {
        return Err(Error::contract("BLEU of an empty corpus"));
    }
    Ok(())
}

fn sentence_stats<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Vec<BleuStats> {
    hyps.iter().zip(refs).map(|(h, r)| BleuStats::of_pair(h, r)).collect()
}

pub fn corpus_bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    check_aligned(hypotheses.len(), references.len())?;
    let mut total = BleuStats::default();
    for s in sentence_stats(hypotheses, references) {
        total.add(&s);
    }
    Ok(total.score())
}

/// BLEU of beam outputs scored against greedy outputs as references.
pub fn output_similarity_bleu<T: Eq + Hash>(greedy: &[Vec<T>], beam: &[Vec<T>]) -> Result<f64> {
    corpus_bleu(beam, greedy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub bleu_a: f64,
    pub bleu_b: f64,
    /// Fraction of resamples with `BLEU(b) >= BLEU(a)`: a one-sided p-value
    /// for "a is better than b".
    pub p_value: f64,
    /// Fraction of resamples where both scores are equal.
    pub tie_fraction: f64,
    pub resamples: usize,
    pub seed: u64,
}

/// Paired bootstrap over sentence indices, drawn with replacement.
pub fn paired_bootstrap<T: Eq + Hash>(
    hyp_a: &[Vec<T>],
    hyp_b: &[Vec<T>],
    references: &[Vec<T>],
    resamples: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    check_aligned(hyp_a.len(), references.len())?;
    check_aligned(hyp_b.len(), references.len())?;
    if resamples < 100 {
        return Err(Error::config(format!("at least 100 resamples required, got {resamples}")));
    }
    let sa = sentence_stats(hyp_a, references);
    let sb = sentence_stats(hyp_b, references);
    let n = references.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b_wins = 0usize;
    let mut ties = 0usize;
    for _ in 0..resamples {
        let mut ta = BleuStats::default();
        let mut tb = BleuStats::default();
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            ta.add(&sa[i]);
            tb.add(&sb[i]);
        }
        let (a, b) = (ta.score(), tb.score());
        if b >= a {
            b_wins += 1;
        }
        if a == b {
            ties += 1;
        }
    }
    Ok(BootstrapResult {
        bleu_a: corpus_bleu(hyp_a, references)?,
        bleu_b: corpus_bleu(hyp_b, references)?,
        p_value: b_wins as f64 / resamples as f64,
        tie_fraction: ties as f64 / resamples as f64,
        resamples,
        seed,
    })
}

/// Structured score report for one system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub metric: String,
    pub value: f64,
    pub n_sentences: usize,
    pub config_hash: Option<String>,
}

/// Score report extended with a paired-bootstrap comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub metric: String,
    pub value: f64,
    pub value_b: f64,
    pub n_sentences: usize,
    pub config_hash: Option<String>,
    pub p_value: f64,
    pub tie_fraction: f64,
    pub resamples: usize,
    pub seed: u64,
}

impl SignificanceReport {
    pub fn new(result: &BootstrapResult, n_sentences: usize, config_hash: Option<String>) -> Self {
        SignificanceReport {
            metric: "bleu".to_string(),
            value: result.bleu_a,
            value_b: result.bleu_b,
            n_sentences,
            config_hash,
            p_value: result.p_value,
            tie_fraction: result.tie_fraction,
            resamples: result.resamples,
            seed: result.seed,
        }
    }
}
