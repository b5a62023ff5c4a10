//! Tempered softmax training objective.
//!
//! During training the decoder logits `D` are divided by a temperature `T`
//! before the softmax, and the resulting cross-entropy against the
//! (optionally smoothed) reference label is multiplied by `T`:
//!
//! ```text
//! P_temp = softmax(D / T)
//! loss   = -<log P_temp, L> * T
//! ```
//!
//! With the rescaling on, the gradient w.r.t. the logits is exactly
//! `P_temp - L`: the factor `T` cancels the `1/T` from the chain rule.
//! Decoding never sees the temperature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemperingConfig {
    pub temperature: f64,
    pub rescale_loss: bool,
    pub label_smoothing: f64,
}

impl Default for TemperingConfig {
    fn default() -> Self {
        TemperingConfig {
            temperature: 1.0,
            rescale_loss: true,
            label_smoothing: 0.1,
        }
    }
}

impl TemperingConfig {
    pub fn new(temperature: f64, rescale_loss: bool, label_smoothing: f64) -> Result<Self> {
        let cfg = TemperingConfig {
            temperature,
            rescale_loss,
            label_smoothing,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::config(format!(
                "temperature must be a positive real, got {}",
                self.temperature
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config(format!(
                "label smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        Ok(())
    }

    /// Multiplier applied to the cross-entropy.
    fn loss_scale(&self) -> f64 {
        if self.rescale_loss {
            self.temperature
        } else {
            1.0
        }
    }
}

/// Reference distribution: `1 - ε` on the target and `ε / (v - 1)` on every
/// other entry. `ε = 0` is the one-hot label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelDistribution {
    target: usize,
    vocab_size: usize,
    smoothing: f64,
}

impl LabelDistribution {
    pub fn new(target: usize, vocab_size: usize, smoothing: f64) -> Result<Self> {
        if target >= vocab_size {
            return Err(Error::contract(format!(
                "target id {target} outside vocabulary of size {vocab_size}"
            )));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::config(format!("label smoothing must lie in [0, 1), got {smoothing}")));
        }
        if vocab_size < 2 && smoothing > 0.0 {
            return Err(Error::config("label smoothing needs a vocabulary of at least two tokens"));
        }
        Ok(LabelDistribution {
            target,
            vocab_size,
            smoothing,
        })
    }

    pub fn one_hot(target: usize, vocab_size: usize) -> Result<Self> {
        LabelDistribution::new(target, vocab_size, 0.0)
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn prob(&self, i: usize) -> f64 {
        if i == self.target {
            1.0 - self.smoothing
        } else if self.smoothing == 0.0 {
            0.0
        } else {
            self.smoothing / (self.vocab_size - 1) as f64
        }
    }

    pub fn probs(&self) -> Vec<f64> {
        (0..self.vocab_size).map(|i| self.prob(i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityDistribution(Vec<f64>);

impl ProbabilityDistribution {
    /// Wraps `probs` after checking it is a distribution (sum within 1e-9).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let total: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|p| p.is_nan() || *p < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::contract("not a probability distribution"));
        }
        Ok(ProbabilityDistribution(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::contract("empty logit vector"));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("tempered_softmax"));
    }
    Ok(())
}

fn check_temperature(t: f64) -> Result<()> {
    if t.is_finite() && t > 0.0 {
        Ok(())
    } else {
        Err(Error::config(format!("temperature must be a positive real, got {t}")))
    }
}

/// `log softmax(logits / t)` without forming the softmax first.
fn tempered_log_softmax(logits: &[f64], t: f64) -> Vec<f64> {
    let top = argmax(logits);
    let max = logits[top] / t;
    // ln(1 + rest) keeps precision when the top entry dominates
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != top)
        .map(|(_, x)| (x / t - max).exp())
        .sum();
    let shift = rest.ln_1p();
    logits.iter().map(|x| (x / t - max) - shift).collect()
}

fn softmax_scaled(logits: &[f64], t: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max) / t;
    let mut out: Vec<f64> = logits.iter().map(|x| (x / t - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

/// `softmax(logits / t)`.
pub fn tempered_softmax(logits: &[f64], t: f64) -> Result<ProbabilityDistribution> {
    check_temperature(t)?;
    check_logits(logits)?;
    Ok(ProbabilityDistribution(softmax_scaled(logits, t)))
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn check_label(logits: &[f64], label: &LabelDistribution) -> Result<()> {
    if logits.len() != label.vocab_size {
        return Err(Error::contract(format!(
            "{} logits for a label over {} tokens",
            logits.len(),
            label.vocab_size
        )));
    }
    Ok(())
}

/// Cross-entropy between the label and `softmax(logits / T)`, multiplied by
/// `T` when `rescale_loss` is set.
pub fn tempered_cross_entropy(
    logits: &[f64],
    label: &LabelDistribution,
    cfg: &TemperingConfig,
) -> Result<f64> {
    cfg.validate()?;
    check_logits(logits)?;
    check_label(logits, label)?;
    let logp = tempered_log_softmax(logits, cfg.temperature);
    Ok(cross_entropy_from_log_probs(&logp, label) * cfg.loss_scale())
}

fn cross_entropy_from_log_probs(logp: &[f64], label: &LabelDistribution) -> f64 {
    let target = label.target;
    let on = 1.0 - label.smoothing;
    let mut ce = -on * logp[target];
    if label.smoothing > 0.0 {
        let off = label.smoothing / (label.vocab_size - 1) as f64;
        let rest: f64 = logp
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != target)
            .map(|(_, lp)| lp)
            .sum();
        ce -= off * rest;
    }
    ce
}

/// Gradient of [`tempered_cross_entropy`] with respect to the logits.
pub fn analytic_logit_gradient(
    logits: &[f64],
    label: &LabelDistribution,
    cfg: &TemperingConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_logits(logits)?;
    check_label(logits, label)?;
    Ok(logit_gradient_unchecked(logits, label, cfg))
}

fn logit_gradient_unchecked(logits: &[f64], label: &LabelDistribution, cfg: &TemperingConfig) -> Vec<f64> {
    let p = softmax_scaled(logits, cfg.temperature);
    let mut grad: Vec<f64> = p
        .iter()
        .enumerate()
        .map(|(i, pi)| pi - label.prob(i))
        .collect();
    if !cfg.rescale_loss {
        grad.iter_mut().for_each(|g| *g /= cfg.temperature);
    }
    grad
}

/// Entropy in nats, with `0 log 0 = 0`.
pub fn shannon_entropy(p: &ProbabilityDistribution) -> f64 {
    entropy_of(p.probs())
}

fn entropy_of(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|x| **x > 0.0)
        .map(|x| x * x.ln())
        .sum::<f64>()
}

/// How per-token losses are pooled over a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    /// Average over non-padding positions.
    Mean,
}

/// Records the tempered loss of a `[positions × vocab]` logit matrix on the
/// graph. `targets[i] = None` marks a padding position, which contributes
/// neither loss nor gradient.
pub fn record_batch_loss(
    graph: &mut Graph,
    logits: Var,
    targets: &[Option<usize>],
    cfg: &TemperingConfig,
    reduction: Reduction,
) -> Result<Var> {
    cfg.validate()?;
    let (value, grad) = batch_loss_and_gradient(graph.value(logits), targets, cfg, reduction)?;
    graph.scalar_with_gradient(logits, value, grad)
}

/// Tempered loss of a logit matrix and its gradient, without a graph.
pub fn batch_loss_and_gradient(
    logits: &Tensor,
    targets: &[Option<usize>],
    cfg: &TemperingConfig,
    reduction: Reduction,
) -> Result<(f64, Vec<f64>)> {
    let v = logits.cols();
    if logits.rows() != targets.len() {
        return Err(Error::contract(format!(
            "{} logit rows for {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("decoder logits"));
    }
    let count = targets.iter().filter(|t| t.is_some()).count();
    let weight = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean if count > 0 => 1.0 / count as f64,
        Reduction::Mean => 0.0,
    };
    let mut total = 0.0;
    let mut grad = vec![0.0; logits.numel()];
    for (i, target) in targets.iter().enumerate() {
        let Some(target) = *target else { continue };
        let row = logits.row(i);
        let label = LabelDistribution::new(target, v, cfg.label_smoothing)?;
        let logp = tempered_log_softmax(row, cfg.temperature);
        total += cross_entropy_from_log_probs(&logp, &label) * cfg.loss_scale();
        let g = logit_gradient_unchecked(row, &label, cfg);
        grad[i * v..(i + 1) * v]
            .iter_mut()
            .zip(g)
            .for_each(|(a, b)| *a = b * weight);
    }
    Ok((total * weight, grad))
}

/// Mean entropies over non-padding rows: `(tempered view, raw view)`,
/// i.e. of `softmax(D / T)` and of `softmax(D)`.
pub fn batch_entropies(logits: &Tensor, targets: &[Option<usize>], temperature: f64) -> (f64, f64) {
    let mut tempered = 0.0;
    let mut raw = 0.0;
    let mut count = 0usize;
    for (i, t) in targets.iter().enumerate() {
        if t.is_none() {
            continue;
        }
        let row = logits.row(i);
        tempered += entropy_of(&softmax_scaled(row, temperature));
        raw += entropy_of(&softmax_scaled(row, 1.0));
        count += 1;
    }
    if count == 0 {
        return (0.0, 0.0);
    }
    (tempered / count as f64, raw / count as f64)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{finite_difference_gradient, relative_error};

    fn cfg(t: f64, rescale: bool, eps: f64) -> TemperingConfig {
        TemperingConfig::new(t, rescale, eps).unwrap()
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(TemperingConfig::new(0.0, true, 0.1).is_err());
        assert!(TemperingConfig::new(-1.0, true, 0.1).is_err());
        assert!(TemperingConfig::new(2.0, true, 1.0).is_err());
        assert!(tempered_softmax(&[1.0, 2.0], 0.0).is_err());
    }

    #[test]
    fn label_distribution_sums_to_one() {
        let l = LabelDistribution::new(2, 7, 0.1).unwrap();
        assert!((l.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(LabelDistribution::one_hot(1, 3).unwrap().probs(), vec![0.0, 1.0, 0.0]);
        assert!(LabelDistribution::new(3, 3, 0.0).is_err());
    }

    #[test]
    fn tempered_softmax_examples() {
        let p = tempered_softmax(&[2.0, 0.0], 2.0).unwrap();
        let e = 1f64.exp();
        assert!((p.probs()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p.probs()[0] - 0.731059).abs() < 1e-6);
        assert!((p.probs()[1] - 0.268941).abs() < 1e-6);
        let u = tempered_softmax(&[0.0; 8], 3.7).unwrap();
        assert!(u.probs().iter().all(|x| (x - 0.125).abs() < 1e-15));
        let h1 = shannon_entropy(&tempered_softmax(&[2.0, 0.0], 1.0).unwrap());
        let h10 = shannon_entropy(&tempered_softmax(&[2.0, 0.0], 10.0).unwrap());
        assert!(h10 > h1);
    }

    #[test]
    fn cross_entropy_examples() {
        let label = LabelDistribution::one_hot(3, 8).unwrap();
        let loss = tempered_cross_entropy(&[0.0; 8], &label, &cfg(2.0, true, 0.0)).unwrap();
        assert!((loss - 2.0 * 8f64.ln()).abs() < 1e-12);
        assert!((loss - 4.158883).abs() < 1e-6);

        let label = LabelDistribution::one_hot(0, 2).unwrap();
        let loss = tempered_cross_entropy(&[10.0, -10.0], &label, &cfg(1.0, true, 0.0)).unwrap();
        // -log sigmoid(20) = log(1 + e^-20)
        let want = (-20f64).exp().ln_1p();
        assert!((loss - want).abs() < 1e-12 * want);
        assert!((loss - 2.06e-9).abs() < 1e-11);

        let logits = [0.3, -1.0, 2.2, 0.0];
        let label = LabelDistribution::new(1, 4, 0.1).unwrap();
        let on = tempered_cross_entropy(&logits, &label, &cfg(2.0, true, 0.1)).unwrap();
        let off = tempered_cross_entropy(&logits, &label, &cfg(2.0, false, 0.1)).unwrap();
        assert_eq!(on, 2.0 * off);
    }

    #[test]
    fn cross_entropy_length_mismatch_is_contract_error() {
        let label = LabelDistribution::one_hot(0, 3).unwrap();
        let err = tempered_cross_entropy(&[0.0, 1.0], &label, &cfg(1.0, true, 0.0)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn gradient_examples() {
        let logits = [0.5, -0.25, 1.5];
        let label = LabelDistribution::one_hot(1, 3).unwrap();
        let g = analytic_logit_gradient(&logits, &label, &cfg(1.0, true, 0.0)).unwrap();
        let p = tempered_softmax(&logits, 1.0).unwrap();
        for (i, (gi, pi)) in g.iter().zip(p.probs()).enumerate() {
            let want = pi - if i == 1 { 1.0 } else { 0.0 };
            assert_eq!(*gi, want);
        }
        let g = analytic_logit_gradient(&logits, &label, &cfg(4.0, true, 0.2)).unwrap();
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences_with_and_without_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let label = LabelDistribution::new(4, 16, 0.1).unwrap();
        for rescale in [true, false] {
            let c = cfg(3.0, rescale, 0.1);
            let g = analytic_logit_gradient(&logits, &label, &c).unwrap();
            let fd = finite_difference_gradient(
                |t| tempered_cross_entropy(t.data(), &label, &c).unwrap(),
                &Tensor::vector(logits.clone()),
                1e-5,
            );
            assert!(relative_error(&g, fd.data(), 1e-4) < 1e-6);
        }
    }

    #[test]
    fn entropy_examples() {
        let u = ProbabilityDistribution::new(vec![0.125; 8]).unwrap();
        assert!((shannon_entropy(&u) - 8f64.ln()).abs() < 1e-12);
        assert!((shannon_entropy(&u) - 2.079442).abs() < 1e-6);
        let one_hot = ProbabilityDistribution::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(shannon_entropy(&one_hot), 0.0);
        let p = tempered_softmax(&[2.0, 0.0], 2.0).unwrap();
        assert!((shannon_entropy(&p) - 0.582203).abs() < 1e-6);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }

    #[test]
    fn batch_loss_skips_padding() {
        let logits = Tensor::from_rows(&[vec![1.0, 0.0, -1.0], vec![5.0, 5.0, 5.0], vec![0.0, 2.0, 0.0]])
            .unwrap();
        let c = cfg(2.0, true, 0.1);
        let targets = [Some(0), None, Some(1)];
        let (sum, grad) = batch_loss_and_gradient(&logits, &targets, &c, Reduction::Sum).unwrap();
        let l0 = tempered_cross_entropy(logits.row(0), &LabelDistribution::new(0, 3, 0.1).unwrap(), &c).unwrap();
        let l2 = tempered_cross_entropy(logits.row(2), &LabelDistribution::new(1, 3, 0.1).unwrap(), &c).unwrap();
        assert!((sum - (l0 + l2)).abs() < 1e-14);
        assert_eq!(&grad[3..6], &[0.0; 3]);
        let (mean, _) = batch_loss_and_gradient(&logits, &targets, &c, Reduction::Mean).unwrap();
        assert!((mean - sum / 2.0).abs() < 1e-14);
    }
}
