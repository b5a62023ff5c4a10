//! Greedy and beam search.
//!
//! Decoding always uses the raw logits (temperature 1). Hypotheses are
//! scored as `log_prob / ((5 + len) / 6)^alpha`, where `len` counts the
//! generated tokens including EOS.

use std::cell::RefCell;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{SourceEncoding, TransformerModel};
use crate::tensor::log_softmax_row;

/// Anything that yields next-token logits for a prefix starting with BOS.
pub trait StepScorer {
    fn next_logits(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

/// A model bound to one encoded source sentence.
pub struct ModelScorer<'a> {
    model: &'a TransformerModel,
    encoding: SourceEncoding,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a TransformerModel, source: &[usize]) -> Result<Self> {
        Ok(ModelScorer {
            model,
            encoding: model.encode(source)?,
        })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn next_logits(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        self.model.decode_step(&self.encoding, prefix)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub length_penalty_alpha: f64,
    pub max_length: usize,
}

impl BeamConfig {
    pub fn new(beam_size: usize, length_penalty_alpha: f64, max_length: usize) -> Result<Self> {
        let cfg = BeamConfig {
            beam_size,
            length_penalty_alpha,
            max_length,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::config("beam_size must be at least 1"));
        }
        if !(self.length_penalty_alpha >= 0.0 && self.length_penalty_alpha.is_finite()) {
            return Err(Error::config(format!(
                "length penalty alpha must be a finite value >= 0, got {}",
                self.length_penalty_alpha
            )));
        }
        if self.max_length == 0 {
            return Err(Error::config("max_length must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// `BOS y_1 .. y_n`, ending in EOS when finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Generated length (everything after BOS).
    pub fn len(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn recomputed_score(&self, alpha: f64) -> f64 {
        self.log_prob / length_penalty(self.len(), alpha)
    }

    /// Output tokens without BOS and EOS.
    pub fn output(&self) -> &[usize] {
        let body = &self.tokens[1..];
        match body.last() {
            Some(&EOS) => &body[..body.len() - 1],
            _ => body,
        }
    }
}

pub fn length_penalty(length: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        return 1.0;
    }
    ((5.0 + length as f64) / 6.0).powf(alpha)
}

/// Indices of the `k` largest values, ties to the lower index.
fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn greedy_search(scorer: &impl StepScorer, max_length: usize) -> Result<Hypothesis> {
    if max_length == 0 {
        return Err(Error::config("max_length must be at least 1"));
    }
    let mut tokens = vec![BOS];
    let mut log_prob = 0.0;
    while tokens.len() <= max_length {
        let logits = scorer.next_logits(&tokens)?;
        let next = top_k(&logits, 1)[0];
        log_prob += log_softmax_row(&logits)[next];
        tokens.push(next);
        if next == EOS {
            break;
        }
    }
    let finished = tokens.last() == Some(&EOS);
    Ok(Hypothesis {
        tokens,
        log_prob,
        score: log_prob,
        finished,
    })
}

/// Beam search returning every completed hypothesis, best first.
///
/// Each step expands every live hypothesis by its `beam_size` best
/// continuations and keeps the `beam_size` best candidates overall; those
/// ending in EOS retire to the completed pool. The search stops early once
/// no live hypothesis can still overtake the `beam_size`-th best completed
/// one. If nothing completes within `max_length`, the live beam is returned
/// with `finished = false`.
pub fn beam_search(scorer: &impl StepScorer, cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let alpha = cfg.length_penalty_alpha;
    let mut live = vec![Hypothesis {
        tokens: vec![BOS],
        log_prob: 0.0,
        score: 0.0,
        finished: false,
    }];
    let mut completed: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_length {
        let mut candidates = Vec::with_capacity(live.len() * cfg.beam_size);
        for hyp in &live {
            let logits = scorer.next_logits(&hyp.tokens)?;
            let logp = log_softmax_row(&logits);
            for tok in top_k(&logits, cfg.beam_size) {
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                let log_prob = hyp.log_prob + logp[tok];
                let score = log_prob / length_penalty(tokens.len() - 1, alpha);
                candidates.push(Hypothesis {
                    tokens,
                    log_prob,
                    score,
                    finished: tok == EOS,
                });
            }
        }
        // stable: ties keep (parent, token) order
        candidates.sort_by(|a, b| b.score.total_cmp(&a.score));
        candidates.truncate(cfg.beam_size);
        live.clear();
        for c in candidates {
            if c.finished {
                completed.push(c);
            } else {
                live.push(c);
            }
        }
        if live.is_empty() || cannot_improve(&live, &mut completed, cfg) {
            break;
        }
    }
    if completed.is_empty() {
        live.sort_by(|a, b| b.score.total_cmp(&a.score));
        return Ok(live);
    }
    completed.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(completed)
}

/// True when the best score any live hypothesis could still reach is no
/// better than the `beam_size`-th completed score. Log-probabilities only
/// fall as tokens are added, so the most a live score can grow is by
/// dividing by the penalty at `max_length`.
fn cannot_improve(live: &[Hypothesis], completed: &mut [Hypothesis], cfg: &BeamConfig) -> bool {
    if completed.len() < cfg.beam_size {
        return false;
    }
    completed.sort_by(|a, b| b.score.total_cmp(&a.score));
    let threshold = completed[cfg.beam_size - 1].score;
    let max_pen = length_penalty(cfg.max_length, cfg.length_penalty_alpha);
    live.iter().all(|h| {
        let bound = if h.log_prob < 0.0 { h.log_prob / max_pen } else { h.log_prob };
        bound <= threshold
    })
}

/// Memoizes another scorer by prefix so that several searches over the same
/// source (e.g. a grid of beam sizes and length penalties) evaluate each
/// prefix once.
pub struct CachedScorer<S> {
    inner: S,
    cache: RefCell<HashMap<Vec<usize>, Vec<f64>>>,
}

impl<S: StepScorer> CachedScorer<S> {
    pub fn new(inner: S) -> Self {
        CachedScorer {
            inner,
            cache: RefCell::new(HashMap::new()),
        }
    }

    /// Distinct prefixes evaluated so far.
    pub fn evaluations(&self) -> usize {
        self.cache.borrow().len()
    }
}

impl<S: StepScorer> StepScorer for CachedScorer<S> {
    fn next_logits(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        if let Some(hit) = self.cache.borrow().get(prefix) {
            return Ok(hit.clone());
        }
        let logits = self.inner.next_logits(prefix)?;
        self.cache.borrow_mut().insert(prefix.to_vec(), logits.clone());
        Ok(logits)
    }
}

pub fn greedy_decode(model: &TransformerModel, source: &[usize], max_length: usize) -> Result<Hypothesis> {
    greedy_search(&ModelScorer::new(model, source)?, max_length)
}

pub fn beam_decode(model: &TransformerModel, source: &[usize], cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
    beam_search(&ModelScorer::new(model, source)?, cfg)
}

#[cfg(test)]
pub(crate) mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// First-order Markov model over a tiny vocabulary: the next-token
    /// distribution depends only on the last token.
    pub(crate) struct MarkovScorer {
        /// `log_probs[prev][next]`
        pub log_probs: Vec<Vec<f64>>,
    }

    impl MarkovScorer {
        pub fn random(vocab: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let log_probs = (0..vocab)
                .map(|_| {
                    let w: Vec<f64> = (0..vocab)
                        .map(|j| if j == BOS { 0.0 } else { rng.gen_range(0.05..1.0) })
                        .collect();
                    let total: f64 = w.iter().sum();
                    w.iter().map(|x| (x / total).ln()).collect()
                })
                .collect();
            MarkovScorer { log_probs }
        }
    }

    impl StepScorer for MarkovScorer {
        fn next_logits(&self, prefix: &[usize]) -> Result<Vec<f64>> {
            let row = &self.log_probs[*prefix.last().unwrap()];
            // BOS is never a valid continuation
            Ok(row.iter().map(|&x| if x == f64::NEG_INFINITY { -1e9 } else { x }).collect())
        }
    }

    /// Exhaustive search over every sequence that ends in EOS within
    /// `max_length` generated tokens.
    pub(crate) fn brute_force_best(scorer: &MarkovScorer, max_length: usize, alpha: f64) -> (Vec<usize>, f64) {
        let mut best: (Vec<usize>, f64) = (Vec::new(), f64::NEG_INFINITY);
        let mut stack = vec![(vec![BOS], 0.0)];
        while let Some((prefix, lp)) = stack.pop() {
            let logits = scorer.next_logits(&prefix).unwrap();
            let logp = log_softmax_row(&logits);
            for (tok, step) in logp.iter().enumerate() {
                let mut next = prefix.clone();
                next.push(tok);
                let l = lp + step;
                if tok == EOS {
                    let s = l / length_penalty(next.len() - 1, alpha);
                    if s > best.1 {
                        best = (next, s);
                    }
                } else if next.len() - 1 < max_length {
                    stack.push((next, l));
                }
            }
        }
        best
    }

    #[test]
    fn length_penalty_examples() {
        assert_eq!(length_penalty(17, 0.0), 1.0);
        assert_eq!(length_penalty(1, 0.7), 1.0);
        assert!((length_penalty(13, 1.0) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn hand_built_three_token_model() {
        // tokens: 0 = a, 1 = BOS, 2 = EOS. Greedy takes "a" first (0.6) and
        // ends at 0.6 * 0.55 = 0.33; stopping at once (0.4) is better.
        let ln = f64::ln;
        let scorer = MarkovScorer {
            log_probs: vec![
                vec![ln(0.45), f64::NEG_INFINITY, ln(0.55)],
                vec![ln(0.6), f64::NEG_INFINITY, ln(0.4)],
                vec![ln(0.5), f64::NEG_INFINITY, ln(0.5)],
            ],
        };
        let (best, best_score) = brute_force_best(&scorer, 4, 0.0);
        assert_eq!(best, vec![BOS, EOS]);
        let beams = beam_search(&scorer, &BeamConfig::new(2, 0.0, 4).unwrap()).unwrap();
        assert_eq!(beams[0].tokens, best);
        assert!((beams[0].score - best_score).abs() < 1e-12);
        let greedy = greedy_search(&scorer, 4).unwrap();
        assert_eq!(greedy.tokens, vec![BOS, 0, EOS]);
    }

    #[test]
    fn beam_one_is_greedy() {
        for seed in 0..20 {
            let scorer = MarkovScorer::random(6, seed);
            let g = greedy_search(&scorer, 7).unwrap();
            let b = beam_search(&scorer, &BeamConfig::new(1, 0.0, 7).unwrap()).unwrap();
            assert_eq!(b[0].tokens, g.tokens);
            assert_eq!(b[0].log_prob, g.log_prob);
            assert_eq!(b[0].finished, g.finished);
        }
    }

    #[test]
    fn wide_beam_matches_exhaustive_search() {
        for seed in 0..30 {
            let scorer = MarkovScorer::random(4, 100 + seed);
            for alpha in [0.0, 0.6, 1.0, 1.4] {
                let (best, score) = brute_force_best(&scorer, 4, alpha);
                // width 3^4 keeps every non-EOS prefix alive
                let beams = beam_search(&scorer, &BeamConfig::new(81, alpha, 4).unwrap()).unwrap();
                assert_eq!(beams[0].tokens, best, "seed {seed} alpha {alpha}");
                assert!((beams[0].score - score).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ranked_and_self_consistent() {
        let scorer = MarkovScorer::random(7, 42);
        let cfg = BeamConfig::new(4, 1.0, 8).unwrap();
        let beams = beam_search(&scorer, &cfg).unwrap();
        for w in beams.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
        for h in &beams {
            assert_eq!(h.score, h.recomputed_score(1.0));
        }
        assert_eq!(beams, beam_search(&scorer, &cfg).unwrap());
    }

    #[test]
    fn unfinished_when_eos_is_unreachable() {
        let ln = f64::ln;
        let scorer = MarkovScorer {
            log_probs: vec![
                vec![ln(0.5), f64::NEG_INFINITY, f64::NEG_INFINITY, ln(0.5)],
                vec![ln(0.5), f64::NEG_INFINITY, f64::NEG_INFINITY, ln(0.5)],
                vec![ln(0.5), f64::NEG_INFINITY, f64::NEG_INFINITY, ln(0.5)],
                vec![ln(0.5), f64::NEG_INFINITY, f64::NEG_INFINITY, ln(0.5)],
            ],
        };
        let g = greedy_search(&scorer, 3).unwrap();
        assert!(!g.finished);
        assert_eq!(g.len(), 3);
        let b = beam_search(&scorer, &BeamConfig::new(2, 0.0, 3).unwrap()).unwrap();
        assert!(!b[0].finished);
        assert_eq!(b[0].tokens, g.tokens);
    }

    #[test]
    fn output_strips_markers() {
        let h = Hypothesis {
            tokens: vec![BOS, 5, 6, EOS],
            log_prob: -1.0,
            score: -1.0,
            finished: true,
        };
        assert_eq!(h.output(), &[5, 6]);
    }

    #[test]
    fn cached_scorer_is_transparent() {
        let scorer = MarkovScorer::random(6, 17);
        let cached = CachedScorer::new(MarkovScorer::random(6, 17));
        for (k, alpha) in [(1, 0.0), (3, 0.6), (5, 1.2)] {
            let cfg = BeamConfig::new(k, alpha, 6).unwrap();
            assert_eq!(beam_search(&scorer, &cfg).unwrap(), beam_search(&cached, &cfg).unwrap());
        }
        let before = cached.evaluations();
        beam_search(&cached, &BeamConfig::new(3, 0.6, 6).unwrap()).unwrap();
        assert_eq!(cached.evaluations(), before);
    }
}
