//! Optimization loop: Adam under an inverse-square-root schedule, dev-BLEU
//! early stopping, checkpoint averaging and per-step diagnostics.

use std::collections::VecDeque;
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Batch};
use crate::decoding::greedy_decode;
use crate::error::{Error, Result};
use crate::metrics::corpus_bleu;
use crate::model::{Checkpoint, TransformerModel};
use crate::tempering::{batch_entropies, record_batch_loss, Reduction, TemperingConfig};
use crate::tensor::{Gradients, Tensor};

/// How the early-stopping band over recent dev scores is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// The last `patience` scores span at most `min_delta` (max − min).
    #[default]
    WindowRange,
    /// None of the last `patience` scores beats the best earlier score by
    /// more than `min_delta`.
    NoImprovement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// Multiplier on `min(s * w^-1.5, s^-0.5)`.
    pub lr_scale: f64,
    pub warmup_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Sentence pairs per batch.
    pub batch_size: usize,
    pub eval_interval: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub stop_rule: StopRule,
    pub max_steps: usize,
    pub checkpoint_keep: usize,
    /// Return the mean of the kept checkpoints instead of the last weights.
    pub average_checkpoints: bool,
    /// Optional global-norm clipping threshold; off by default.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            lr_scale: 0.05,
            warmup_steps: 400,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_epsilon: 1e-9,
            batch_size: 32,
            eval_interval: 200,
            patience: 10,
            min_delta: 0.1,
            stop_rule: StopRule::WindowRange,
            max_steps: 3000,
            checkpoint_keep: 10,
            average_checkpoints: true,
            clip_norm: None,
            seed: 1,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::config(msg)) };
        check(self.lr_scale > 0.0 && self.lr_scale.is_finite(), "trainer.lr_scale must be positive")?;
        check(self.warmup_steps >= 1, "trainer.warmup_steps must be at least 1")?;
        check((0.0..1.0).contains(&self.adam_beta1), "trainer.adam_beta1 must lie in [0, 1)")?;
        check((0.0..1.0).contains(&self.adam_beta2), "trainer.adam_beta2 must lie in [0, 1)")?;
        check(self.adam_epsilon > 0.0, "trainer.adam_epsilon must be positive")?;
        check(self.batch_size >= 1, "trainer.batch_size must be at least 1")?;
        check(self.eval_interval >= 1, "trainer.eval_interval must be at least 1")?;
        check(self.patience >= 1, "trainer.patience must be at least 1")?;
        check(self.min_delta >= 0.0, "trainer.min_delta must be non-negative")?;
        check(self.max_steps >= 1, "trainer.max_steps must be at least 1")?;
        check(self.checkpoint_keep >= 1, "trainer.checkpoint_keep must be at least 1")?;
        if let Some(c) = self.clip_norm {
            check(c > 0.0, "trainer.clip_norm must be positive")?;
        }
        Ok(())
    }

    /// Learning rate at 1-based step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps as f64;
        self.lr_scale * (s * w.powf(-1.5)).min(s.powf(-0.5))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Mean tempered loss per non-padding target token.
    pub loss: f64,
    pub tempered_entropy: f64,
    pub raw_entropy: f64,
    pub grad_norm: f64,
    pub learning_rate: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub dev_bleu: f64,
    /// Step of the checkpoint taken at this evaluation.
    pub checkpoint: usize,
}

/// One line of the persisted record stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RecordLine {
    Step(StepRecord),
    Eval(EvalRecord),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl ExperimentRecord {
    /// Writes one JSON object per line, steps and evaluations interleaved
    /// in training order.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        let mut evals = self.evals.iter().peekable();
        for s in &self.steps {
            write_line(&mut w, path, &RecordLine::Step(s.clone()))?;
            while let Some(e) = evals.next_if(|e| e.step <= s.step) {
                write_line(&mut w, path, &RecordLine::Eval(e.clone()))?;
            }
        }
        for e in evals {
            write_line(&mut w, path, &RecordLine::Eval(e.clone()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rec = ExperimentRecord::default();
        for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: RecordLine = serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
            match parsed {
                RecordLine::Step(s) => rec.steps.push(s),
                RecordLine::Eval(e) => rec.evals.push(e),
            }
        }
        Ok(rec)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

fn write_line(w: &mut impl Write, path: &Path, line: &RecordLine) -> Result<()> {
    let text = serde_json::to_string(line).expect("records serialize");
    writeln!(w, "{text}").map_err(|e| Error::io(path, e))
}

/// Early-stopping test on the dev-BLEU history.
pub fn should_stop(history: &[f64], patience: usize, min_delta: f64) -> bool {
    should_stop_with(history, patience, min_delta, StopRule::WindowRange)
}

pub fn should_stop_with(history: &[f64], patience: usize, min_delta: f64, rule: StopRule) -> bool {
    if patience == 0 || history.len() < patience {
        return false;
    }
    let (before, window) = history.split_at(history.len() - patience);
    let max = window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    match rule {
        StopRule::WindowRange => {
            let min = window.iter().copied().fold(f64::INFINITY, f64::min);
            max - min <= min_delta
        }
        StopRule::NoImprovement => {
            let best = before.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            !before.is_empty() && max - best <= min_delta
        }
    }
}

/// Element-wise mean of checkpoints that share a configuration.
pub fn average_checkpoints(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::contract("no checkpoints to average"))?;
    let k = checkpoints.len() as f64;
    let mut model = first.model.clone();
    for c in &checkpoints[1..] {
        if c.model.config() != first.model.config() {
            return Err(Error::contract("checkpoints have different model configurations"));
        }
    }
    let names: Vec<String> = first.model.parameters().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let base = first.model.parameter(&name).expect("listed parameter");
        // shifted mean: exact when every snapshot holds the same value
        let mut sum = vec![0.0; base.numel()];
        for c in checkpoints {
            let t = c
                .model
                .parameter(&name)
                .ok_or_else(|| Error::contract(format!("checkpoint at step {} lacks {name}", c.step)))?;
            if t.shape() != base.shape() {
                return Err(Error::Shape {
                    op: "average_checkpoints",
                    left: base.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            sum.iter_mut()
                .zip(t.data().iter().zip(base.data()))
                .for_each(|(s, (v, b))| *s += v - b);
        }
        sum.iter_mut().zip(base.data()).for_each(|(s, b)| *s = b + *s / k);
        model.set_parameter(&name, base.with_data(sum))?;
    }
    Ok(Checkpoint {
        step: checkpoints.iter().map(|c| c.step).max().unwrap_or(0),
        model,
        averaged_steps: checkpoints.iter().map(|c| c.step).collect(),
    })
}

/// L2 norm over the concatenation of all given gradients.
pub fn global_gradient_norm<'a>(grads: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    grads.into_iter().map(Tensor::squared_norm).sum::<f64>().sqrt()
}

/// Global norm of the parameter gradients produced by one backward pass.
pub fn record_gradient_norm(grads: &Gradients, params: &[(String, crate::tensor::Var)]) -> f64 {
    global_gradient_norm(params.iter().filter_map(|(_, v)| grads.get(*v)))
}

/// Longest output considered when decoding a source of `source_len` tokens.
pub fn decode_limit(source_len: usize, max_positions: usize) -> usize {
    (2 * source_len + 10).min(max_positions.saturating_sub(1)).max(1)
}

/// Greedy-decodes the sources and returns the output id sequences.
pub fn greedy_outputs(model: &TransformerModel, sources: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
    let limit = model.config().max_positions;
    sources
        .iter()
        .map(|s| Ok(greedy_decode(model, s, decode_limit(s.len(), limit))?.output().to_vec()))
        .collect()
}

/// Corpus BLEU of greedy outputs on encoded `(source, target)` pairs.
/// Decoding uses the raw logits; the training temperature plays no part.
pub fn evaluate_checkpoint(model: &TransformerModel, dev: &[(Vec<usize>, Vec<usize>)]) -> Result<f64> {
    let sources: Vec<Vec<usize>> = dev.iter().map(|p| p.0.clone()).collect();
    let refs: Vec<Vec<usize>> = dev.iter().map(|p| p.1.clone()).collect();
    corpus_bleu(&greedy_outputs(model, &sources)?, &refs)
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(model: &TransformerModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.parameters().map(|(_, p)| vec![0.0; p.numel()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// `grads` must follow the model's parameter order.
    fn step(&mut self, model: &mut TransformerModel, grads: &[Option<&Tensor>], lr: f64, cfg: &TrainerConfig, scale: f64) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (i, (_, p)) in model.parameters_mut().enumerate() {
            let Some(g) = grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g * scale;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_epsilon);
            }
        }
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Average of the kept checkpoints, or the last weights when averaging
    /// is off or no evaluation happened.
    pub model: TransformerModel,
    /// The last `checkpoint_keep` snapshots, oldest first.
    pub checkpoints: Vec<Checkpoint>,
    /// Steps averaged into `model`; empty when it is the last weights.
    pub averaged_steps: Vec<usize>,
    pub record: ExperimentRecord,
    pub stopped_early: bool,
}

/// Trains `model` on encoded `(source, target)` pairs with the tempered loss.
///
/// Each epoch reshuffles with `seed + epoch`; dropout at step `s` draws from
/// a stream derived from `(seed, s)`, so runs are reproducible bit for bit.
pub fn train(
    model: &TransformerModel,
    train: &[(Vec<usize>, Vec<usize>)],
    dev: &[(Vec<usize>, Vec<usize>)],
    tempering: &TemperingConfig,
    cfg: &TrainerConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tempering.validate()?;
    check_vocabulary(model, train, "train")?;
    check_vocabulary(model, dev, "dev")?;
    if train.is_empty() {
        return Err(Error::data("empty training set"));
    }
    let mut model = model.clone();
    let mut adam = Adam::new(&model);
    let mut record = ExperimentRecord::default();
    let mut kept: VecDeque<Checkpoint> = VecDeque::new();
    let mut history = Vec::new();
    let mut stopped_early = false;
    let mut step = 0usize;
    let start = Instant::now();
    'epochs: for epoch in 0u64.. {
        let batches = make_batches(train, cfg.batch_size, cfg.seed.wrapping_add(epoch))?;
        for (batch_id, batch) in batches.iter().enumerate() {
            step += 1;
            let lr = cfg.lr_at(step);
            let (loss, entropies, norm) = train_step(&mut model, &mut adam, batch, tempering, cfg, step, lr)
                .map_err(|e| match e {
                    Error::NonFinite(_) | Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { step, batch: batch_id },
                    other => other,
                })?;
            record.steps.push(StepRecord {
                step,
                loss,
                tempered_entropy: entropies.0,
                raw_entropy: entropies.1,
                grad_norm: norm,
                learning_rate: lr,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
            if step.is_multiple_of(cfg.eval_interval) {
                let bleu = if dev.is_empty() { 0.0 } else { evaluate_checkpoint(&model, dev)? };
                log::debug!("step {step}: loss {loss:.4}, dev BLEU {bleu:.2}");
                record.evals.push(EvalRecord {
                    step,
                    dev_bleu: bleu,
                    checkpoint: step,
                });
                kept.push_back(Checkpoint {
                    step,
                    model: model.clone(),
                    averaged_steps: Vec::new(),
                });
                if kept.len() > cfg.checkpoint_keep {
                    kept.pop_front();
                }
                history.push(bleu);
                if should_stop_with(&history, cfg.patience, cfg.min_delta, cfg.stop_rule) {
                    stopped_early = true;
                    break 'epochs;
                }
            }
            if step >= cfg.max_steps {
                break 'epochs;
            }
        }
    }
    let checkpoints: Vec<Checkpoint> = kept.into();
    let (final_model, averaged_steps) = if cfg.average_checkpoints && !checkpoints.is_empty() {
        let avg = average_checkpoints(&checkpoints)?;
        (avg.model, avg.averaged_steps)
    } else {
        (model, Vec::new())
    };
    Ok(TrainOutcome {
        model: final_model,
        checkpoints,
        averaged_steps,
        record,
        stopped_early,
    })
}

fn check_vocabulary(model: &TransformerModel, pairs: &[(Vec<usize>, Vec<usize>)], split: &str) -> Result<()> {
    let cfg = model.config();
    for (i, (s, t)) in pairs.iter().enumerate() {
        if s.is_empty() || t.is_empty() {
            return Err(Error::data(format!("{split} pair {i} has an empty side")));
        }
        if s.iter().any(|&x| x >= cfg.source_vocab) || t.iter().any(|&x| x >= cfg.target_vocab) {
            return Err(Error::data(format!("{split} pair {i} has ids outside the model vocabulary")));
        }
        if s.len() > cfg.max_positions || t.len() + 1 > cfg.max_positions {
            return Err(Error::data(format!("{split} pair {i} exceeds max_positions")));
        }
    }
    Ok(())
}

/// One optimizer step; returns `(loss, (tempered, raw) entropy, grad norm)`.
fn train_step(
    model: &mut TransformerModel,
    adam: &mut Adam,
    batch: &Batch,
    tempering: &TemperingConfig,
    cfg: &TrainerConfig,
    step: usize,
    lr: f64,
) -> Result<(f64, (f64, f64), f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(step as u64);
    let mut pass = model.record_forward(batch, Some(&mut rng))?;
    let targets = batch.decoder_output();
    let loss = record_batch_loss(&mut pass.graph, pass.logits, &targets, tempering, Reduction::Mean)?;
    let loss_value = pass.graph.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let entropies = batch_entropies(pass.graph.value(pass.logits), &targets, tempering.temperature);
    let grads = pass.graph.backward(loss)?;
    let norm = record_gradient_norm(&grads, &pass.params);
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm"));
    }
    let scale = match cfg.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    let by_name: std::collections::HashMap<&str, crate::tensor::Var> =
        pass.params.iter().map(|(n, v)| (n.as_str(), *v)).collect();
    let names: Vec<String> = model.parameters().map(|(n, _)| n.to_string()).collect();
    let ordered: Vec<Option<&Tensor>> = names
        .iter()
        .map(|n| by_name.get(n.as_str()).and_then(|v| grads.get(*v)))
        .collect();
    drop(pass.graph);
    adam.step(model, &ordered, lr, cfg, scale);
    Ok((loss_value, entropies, norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocabulary, encode_pairs, generate_synthetic_corpus, Side, SyntheticTaskSpec, TaskKind};
    use crate::model::ModelConfig;

    type Pairs = Vec<(Vec<usize>, Vec<usize>)>;

    fn tiny_task(noise: f64, train: usize) -> (ModelConfig, Pairs, Pairs) {
        let spec = SyntheticTaskSpec {
            kind: TaskKind::Copy,
            alphabet_size: 8,
            min_len: 2,
            max_len: 5,
            train_size: train,
            dev_size: 10,
            test_size: 10,
            noise_rate: noise,
            seed: 3,
        };
        let corpus = generate_synthetic_corpus(&spec).unwrap();
        let sv = build_vocabulary(&corpus.train, Side::Source, &[]).unwrap();
        let tv = build_vocabulary(&corpus.train, Side::Target, &[]).unwrap();
        let cfg = ModelConfig {
            num_layers: 1,
            model_dim: 16,
            num_heads: 2,
            ff_dim: 32,
            source_vocab: sv.len(),
            target_vocab: tv.len(),
            max_positions: 16,
            ..ModelConfig::default()
        };
        (cfg, encode_pairs(&corpus.train, &sv, &tv), encode_pairs(&corpus.dev, &sv, &tv))
    }

    fn quick_trainer(max_steps: usize) -> TrainerConfig {
        TrainerConfig {
            lr_scale: 0.02,
            warmup_steps: 20,
            batch_size: 8,
            eval_interval: 10,
            max_steps,
            checkpoint_keep: 3,
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn schedule_branches_meet_at_warmup() {
        let cfg = TrainerConfig {
            warmup_steps: 4000,
            lr_scale: 0.7,
            ..TrainerConfig::default()
        };
        let w = 4000.0f64;
        let linear = 0.7 * w * w.powf(-1.5);
        let decay = 0.7 * w.powf(-0.5);
        assert!((linear - decay).abs() <= 1e-15 * decay);
        assert!((cfg.lr_at(4000) - decay).abs() <= 1e-15 * decay);
        assert!(cfg.lr_at(100) < cfg.lr_at(200));
        assert!(cfg.lr_at(8000) < cfg.lr_at(4000));
    }

    #[test]
    fn stopping_rule_examples() {
        assert!(should_stop(&[10.0; 10], 10, 0.1));
        let band: Vec<f64> = (0..10).map(|i| 10.0 + 0.01 * i as f64).collect();
        assert!(should_stop(&band, 10, 0.1));
        let mut broken = vec![10.0; 9];
        broken.push(10.2);
        assert!(!should_stop(&broken, 10, 0.1));
        assert!(!should_stop(&[10.0; 9], 10, 0.1));
        // only the trailing window matters
        let mut h = vec![0.0, 50.0];
        h.extend([20.0; 10]);
        assert!(should_stop(&h, 10, 0.1));
    }

    #[test]
    fn no_improvement_rule() {
        let mut h = vec![30.0];
        h.extend([29.0, 30.05, 28.0]);
        assert!(should_stop_with(&h, 3, 0.1, StopRule::NoImprovement));
        h.push(31.0);
        assert!(!should_stop_with(&h, 3, 0.1, StopRule::NoImprovement));
        assert!(!should_stop_with(&[1.0, 1.0], 2, 0.1, StopRule::NoImprovement));
    }

    fn small_model(seed: u64) -> TransformerModel {
        let cfg = ModelConfig {
            num_layers: 1,
            model_dim: 4,
            num_heads: 2,
            ff_dim: 4,
            source_vocab: 6,
            target_vocab: 6,
            max_positions: 8,
            ..ModelConfig::default()
        };
        TransformerModel::init_parameters(&cfg, seed).unwrap()
    }

    fn filled(model: &TransformerModel, value: f64) -> TransformerModel {
        let mut m = model.clone();
        let names: Vec<String> = m.parameters().map(|(n, _)| n.to_string()).collect();
        for n in names {
            let t = m.parameter(&n).unwrap();
            let t = t.with_data(vec![value; t.numel()]);
            m.set_parameter(&n, t).unwrap();
        }
        m
    }

    #[test]
    fn averaging_examples() {
        let base = small_model(1);
        let c = |step, model| Checkpoint {
            step,
            model,
            averaged_steps: vec![],
        };
        let avg = average_checkpoints(&[c(1, filled(&base, 0.0)), c(2, filled(&base, 2.0))]).unwrap();
        assert!(avg.model.parameters().all(|(_, t)| t.data().iter().all(|&v| v == 1.0)));
        assert_eq!(avg.averaged_steps, vec![1, 2]);

        let same: Vec<Checkpoint> = (0..10).map(|i| c(i, base.clone())).collect();
        let avg = average_checkpoints(&same).unwrap();
        for ((_, a), (_, b)) in avg.model.parameters().zip(base.parameters()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= f64::EPSILON * y.abs());
            }
        }

        let other = TransformerModel::init_parameters(
            &ModelConfig {
                ff_dim: 8,
                ..base.config().clone()
            },
            1,
        )
        .unwrap();
        assert!(matches!(
            average_checkpoints(&[c(1, base.clone()), c(2, other)]),
            Err(Error::Contract(_))
        ));
        assert!(average_checkpoints(&[]).is_err());
    }

    #[test]
    fn record_round_trips_through_jsonl() {
        let (cfg, train_set, dev) = tiny_task(0.0, 40);
        let model = TransformerModel::init_parameters(&cfg, 0).unwrap();
        let out = train(&model, &train_set, &dev, &TemperingConfig::default(), &quick_trainer(20)).unwrap();
        assert_eq!(out.record.steps.len(), 20);
        assert_eq!(out.record.evals.len(), 2);
        assert_eq!(out.checkpoints.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("record.jsonl");
        out.record.write_jsonl(&path).unwrap();
        let back = ExperimentRecord::read_jsonl(&path).unwrap();
        assert_eq!(back, out.record);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().nth(9).unwrap().contains("\"kind\":\"step\""));
        assert!(text.lines().nth(10).unwrap().contains("\"kind\":\"eval\""));
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let (cfg, train_set, dev) = tiny_task(0.1, 40);
        let model = TransformerModel::init_parameters(&cfg, 0).unwrap();
        let t = TemperingConfig::new(2.0, true, 0.1).unwrap();
        let a = train(&model, &train_set, &dev, &t, &quick_trainer(15)).unwrap();
        let b = train(&model, &train_set, &dev, &t, &quick_trainer(15)).unwrap();
        let bits = |o: &TrainOutcome| o.record.losses().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.model, b.model);
        let other = TrainerConfig {
            seed: 2,
            ..quick_trainer(15)
        };
        let c = train(&model, &train_set, &dev, &t, &other).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn recorded_norm_matches_gradient_dump() {
        let (cfg, train_set, _) = tiny_task(0.0, 16);
        let model = TransformerModel::init_parameters(&cfg, 5).unwrap();
        let batch = &make_batches(&train_set, 8, 0).unwrap()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pass = model.record_forward(batch, Some(&mut rng)).unwrap();
        let targets = batch.decoder_output();
        let loss = record_batch_loss(
            &mut pass.graph,
            pass.logits,
            &targets,
            &TemperingConfig::default(),
            Reduction::Mean,
        )
        .unwrap();
        let grads = pass.graph.backward(loss).unwrap();
        let recorded = record_gradient_norm(&grads, &pass.params);
        // the dump: every parameter gradient flattened into one vector
        let dump: Vec<f64> = pass
            .params
            .iter()
            .flat_map(|(_, v)| grads.get(*v).map(|g| g.data().to_vec()).unwrap_or_default())
            .collect();
        let expect = dump.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((recorded - expect).abs() <= 1e-10 * expect);
        assert!(recorded > 0.0);
    }

    #[test]
    fn non_finite_loss_reports_step_and_batch() {
        let (cfg, train_set, dev) = tiny_task(0.0, 16);
        let mut model = TransformerModel::init_parameters(&cfg, 0).unwrap();
        let b = model.parameter("out.b").unwrap();
        let b = b.with_data(vec![f64::NAN; b.numel()]);
        model.set_parameter("out.b", b).unwrap();
        let err = train(&model, &train_set, &dev, &TemperingConfig::default(), &quick_trainer(5)).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { step: 1, batch: 0 }), "{err:?}");
    }

    #[test]
    fn early_stopping_halts_at_the_evaluation() {
        let (cfg, train_set, dev) = tiny_task(0.0, 16);
        let model = TransformerModel::init_parameters(&cfg, 0).unwrap();
        // an enormous band: the rule fires at the first full window
        let tc = TrainerConfig {
            patience: 2,
            min_delta: 1000.0,
            ..quick_trainer(100)
        };
        let out = train(&model, &train_set, &dev, &TemperingConfig::default(), &tc).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.record.steps.len(), 20);
        assert_eq!(out.model.parameter("out.w"), average_checkpoints(&out.checkpoints).unwrap().model.parameter("out.w"));
    }

    #[test]
    fn loss_falls_on_a_small_copy_task() {
        let (cfg, train_set, dev) = tiny_task(0.0, 64);
        let model = TransformerModel::init_parameters(&cfg.clone().without_dropout(), 0).unwrap();
        let out = train(&model, &train_set, &dev, &TemperingConfig::default(), &quick_trainer(60)).unwrap();
        let l = out.record.losses();
        let head: f64 = l[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = l[l.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail < 0.8 * head, "{head} -> {tail}");
        let v = cfg.target_vocab as f64;
        for s in &out.record.steps {
            assert!(s.tempered_entropy >= 0.0 && s.tempered_entropy <= v.ln() + 1e-12);
            assert!(s.raw_entropy >= 0.0 && s.raw_entropy <= v.ln() + 1e-12);
        }
    }
}
