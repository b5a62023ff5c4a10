//! Randomized properties of the numeric core, decoding, metrics and
//! checkpoint averaging.

use proptest::collection::vec;
use proptest::prelude::*;

use templab::data::{BOS, EOS};
use templab::decoding::{beam_search, BeamConfig, StepScorer};
use templab::metrics::{corpus_bleu, paired_bootstrap, BleuStats, NgramProfile};
use templab::model::{Checkpoint, ModelConfig, TransformerModel};
use templab::tempering::tempered_softmax;
use templab::tensor::{finite_difference_gradient, relative_error, softmax_row, Graph, Tensor};
use templab::training::average_checkpoints;

fn logits(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    vec(-30.0..30.0f64, 1..max_len)
}

fn sentences(max_sentences: usize) -> impl Strategy<Value = Vec<Vec<u8>>> {
    vec(vec(0u8..4, 0..9), 1..max_sentences)
}

/// Scores the continuation of a prefix by a fixed table indexed by the
/// prefix length and the last token.
struct TableScorer {
    table: Vec<Vec<f64>>,
    vocab: usize,
}

impl StepScorer for TableScorer {
    fn next_logits(&self, prefix: &[usize]) -> templab::Result<Vec<f64>> {
        let last = *prefix.last().expect("prefix starts with BOS");
        let row = (prefix.len() * 7 + last) % self.table.len();
        Ok((0..self.vocab)
            .map(|j| if j == BOS { -1e9 } else { self.table[row][j] })
            .collect())
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(row in logits(40), shift in -50.0..50.0f64) {
        let p = softmax_row(&row);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|x| *x >= 0.0));
        let shifted: Vec<f64> = row.iter().map(|x| x + shift).collect();
        let q = softmax_row(&shifted);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn tempered_softmax_ignores_shifts(row in logits(40), shift in -50.0..50.0f64, t in 1.0..10.0f64) {
        let p = tempered_softmax(&row, t).unwrap();
        let shifted: Vec<f64> = row.iter().map(|x| x + shift).collect();
        let q = tempered_softmax(&shifted, t).unwrap();
        for (a, b) in p.probs().iter().zip(q.probs()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn backward_agrees_with_finite_differences_on_small_graphs(
        a in vec(-2.0..2.0f64, 6),
        b in vec(-2.0..2.0f64, 6),
        op in 0usize..3,
    ) {
        // loss = sum(f(A·B) ⊙ A·B) for a 2×3 · 3×2 product and f one of
        // relu / softmax / layer norm without affine parameters
        let forward = |a: &Tensor, b: &Tensor, g: &mut Graph| {
            let va = g.leaf(a.clone(), true);
            let vb = g.leaf(b.clone(), true);
            let m = g.matmul(va, vb).unwrap();
            let f = match op {
                0 => g.relu(m),
                1 => g.row_softmax(m).unwrap(),
                _ => {
                    let gain = g.leaf(Tensor::vector(vec![1.0, 1.0]), false);
                    let bias = g.leaf(Tensor::vector(vec![0.0, 0.0]), false);
                    g.layer_norm(m, gain, bias, 1e-6).unwrap()
                }
            };
            let prod = g.mul(f, m).unwrap();
            let loss = g.sum(prod);
            (va, loss)
        };
        let ta = Tensor::matrix(2, 3, a).unwrap();
        let tb = Tensor::matrix(3, 2, b).unwrap();
        let mut g = Graph::new();
        let (va, loss) = forward(&ta, &tb, &mut g);
        let grads = g.backward(loss).unwrap();
        let analytic = grads.get(va).unwrap().clone();
        let fd = finite_difference_gradient(
            |x| {
                let mut g = Graph::new();
                let (_, loss) = forward(x, &tb, &mut g);
                g.value(loss).item()
            },
            &ta,
            1e-6,
        );
        prop_assert!(relative_error(analytic.data(), fd.data(), 1e-3) < 1e-4);
    }

    #[test]
    fn ngram_totals_follow_length(tokens in vec(0u8..5, 0..15)) {
        let profile = NgramProfile::new(&tokens);
        for n in 1..=4 {
            prop_assert_eq!(profile.total(n), (tokens.len() + 1).saturating_sub(n));
        }
    }

    #[test]
    fn corpus_bleu_ignores_sentence_order(
        pairs in sentences(8).prop_flat_map(|refs| {
            let n = refs.len();
            (Just(refs), vec(vec(0u8..4, 0..9), n), Just(n))
        }),
        rotation in 0usize..8,
    ) {
        let (refs, hyps, n) = pairs;
        let score = corpus_bleu(&hyps, &refs).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        order.rotate_left(rotation % n);
        order.reverse();
        let ph: Vec<Vec<u8>> = order.iter().map(|&i| hyps[i].clone()).collect();
        let pr: Vec<Vec<u8>> = order.iter().map(|&i| refs[i].clone()).collect();
        prop_assert_eq!(score.to_bits(), corpus_bleu(&ph, &pr).unwrap().to_bits());
    }

    #[test]
    fn bleu_stats_pool_additively(refs in sentences(6)) {
        let hyps: Vec<Vec<u8>> = refs.iter().map(|r| r.iter().rev().copied().collect()).collect();
        let mut pooled = BleuStats::default();
        for (h, r) in hyps.iter().zip(&refs) {
            pooled.add(&BleuStats::of_pair(h, r));
        }
        prop_assert_eq!(pooled.score().to_bits(), corpus_bleu(&hyps, &refs).unwrap().to_bits());
        prop_assert!((0.0..=100.0).contains(&pooled.score()));
    }

    #[test]
    fn bootstrap_p_value_is_a_fraction_and_reproducible(refs in sentences(10), seed in 0u64..1000) {
        let a: Vec<Vec<u8>> = refs.iter().map(|r| r.iter().take(3).copied().collect()).collect();
        let b: Vec<Vec<u8>> = refs.iter().map(|r| r.iter().rev().copied().collect()).collect();
        let first = paired_bootstrap(&a, &b, &refs, 100, seed).unwrap();
        let again = paired_bootstrap(&a, &b, &refs, 100, seed).unwrap();
        prop_assert!((0.0..=1.0).contains(&first.p_value));
        prop_assert!((0.0..=first.p_value).contains(&first.tie_fraction));
        prop_assert_eq!(first, again);
    }

    #[test]
    fn beam_hypotheses_are_ranked_and_self_consistent(
        table in vec(vec(-3.0..3.0f64, 6), 5),
        beam in 1usize..6,
        alpha in 0.0..1.5f64,
    ) {
        let scorer = TableScorer { table, vocab: 6 };
        let hyps = beam_search(&scorer, &BeamConfig::new(beam, alpha, 6).unwrap()).unwrap();
        prop_assert!(!hyps.is_empty());
        for w in hyps.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
        for h in &hyps {
            prop_assert_eq!(h.tokens[0], BOS);
            prop_assert_eq!(h.finished, h.tokens.last() == Some(&EOS));
            prop_assert!((h.score - h.recomputed_score(alpha)).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn averaging_ignores_checkpoint_order(seeds in vec(0u64..1000, 2..5), rotation in 1usize..5) {
        let config = ModelConfig {
            num_layers: 1,
            model_dim: 16,
            num_heads: 2,
            ff_dim: 32,
            source_vocab: 12,
            target_vocab: 12,
            max_positions: 16,
            ..ModelConfig::default()
        };
        let snapshots: Vec<Checkpoint> = seeds
            .iter()
            .enumerate()
            .map(|(i, &s)| Checkpoint {
                step: i,
                model: TransformerModel::init_parameters(&config, s).unwrap(),
                averaged_steps: Vec::new(),
            })
            .collect();
        let mut permuted = snapshots.clone();
        permuted.rotate_left(rotation % snapshots.len());
        permuted.swap(0, snapshots.len() - 1);
        let a = average_checkpoints(&snapshots).unwrap();
        let b = average_checkpoints(&permuted).unwrap();
        for (name, t) in a.model.parameters() {
            let u = b.model.parameter(name).unwrap();
            for (x, y) in t.data().iter().zip(u.data()) {
                prop_assert!((x - y).abs() <= 1e-15, "{name}: {x} vs {y}");
            }
        }
    }
}
