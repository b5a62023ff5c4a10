//! Post-norm transformer encoder-decoder.
//!
//! Each sublayer computes `LayerNorm(x + Dropout(f(x)))`. Positions use a
//! fixed sinusoidal table, so the only learned parameters are embeddings,
//! the layer stacks and the output projection. With recurrent stacking a
//! single layer per stack is applied `num_layers` times.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, BOS, PAD};
use crate::error::{Error, Result};
use crate::tensor::{AttentionSpec, Graph, Tensor, Var};

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub attention_dropout: f64,
    pub embedding_dropout: f64,
    pub layer_dropout: f64,
    pub recurrent_stacking: bool,
    pub source_vocab: usize,
    pub target_vocab: usize,
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 2,
            model_dim: 64,
            num_heads: 4,
            ff_dim: 128,
            attention_dropout: 0.1,
            embedding_dropout: 0.1,
            layer_dropout: 0.1,
            recurrent_stacking: false,
            source_vocab: 68,
            target_vocab: 68,
            max_positions: 64,
        }
    }
}

impl ModelConfig {
    /// Transformer-base layout (6 layers, 512/2048, 8 heads), for reference.
    pub fn base_preset(source_vocab: usize, target_vocab: usize) -> Self {
        ModelConfig {
            num_layers: 6,
            model_dim: 512,
            num_heads: 8,
            ff_dim: 2048,
            source_vocab,
            target_vocab,
            max_positions: 256,
            ..ModelConfig::default()
        }
    }

    /// Transformer-big layout (6 layers, 1024/4096, 16 heads, dropout 0.3).
    pub fn big_preset(source_vocab: usize, target_vocab: usize) -> Self {
        ModelConfig {
            model_dim: 1024,
            num_heads: 16,
            ff_dim: 4096,
            attention_dropout: 0.3,
            embedding_dropout: 0.3,
            layer_dropout: 0.3,
            ..ModelConfig::base_preset(source_vocab, target_vocab)
        }
    }

    /// Zeroes the attention, embedding and residual dropout sites.
    pub fn without_dropout(mut self) -> Self {
        self.attention_dropout = 0.0;
        self.embedding_dropout = 0.0;
        self.layer_dropout = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("ff_dim", self.ff_dim),
            ("source_vocab", self.source_vocab),
            ("target_vocab", self.target_vocab),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be positive")));
            }
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "model.model_dim ({}) must be divisible by model.num_heads ({})",
                self.model_dim, self.num_heads
            )));
        }
        for (name, r) in [
            ("attention_dropout", self.attention_dropout),
            ("embedding_dropout", self.embedding_dropout),
            ("layer_dropout", self.layer_dropout),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::config(format!("model.{name} must lie in [0, 1), got {r}")));
            }
        }
        Ok(())
    }

    fn stored_layers(&self) -> usize {
        if self.recurrent_stacking {
            1
        } else {
            self.num_layers
        }
    }
}

/// Scalar parameter counts by component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParameterCount {
    pub embeddings: usize,
    pub encoder_stack: usize,
    pub decoder_stack: usize,
    pub output: usize,
}

impl ParameterCount {
    pub fn total(&self) -> usize {
        self.embeddings + self.encoder_stack + self.decoder_stack + self.output
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    params: BTreeMap<String, Arc<Tensor>>,
    positions: Arc<Tensor>,
}

/// Encoder output for one source sentence, reused across decoding steps.
#[derive(Clone, Debug)]
pub struct SourceEncoding {
    memory: Arc<Tensor>,
    mask: Vec<bool>,
}

impl SourceEncoding {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// A recorded forward pass with its parameter leaves.
pub struct ForwardPass {
    pub graph: Graph,
    pub params: Vec<(String, Var)>,
    /// `[batch*(target_len-1) × target_vocab]`
    pub logits: Var,
}

fn sinusoid_table(max_positions: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; max_positions * dim];
    for pos in 0..max_positions {
        for i in 0..dim {
            let exponent = (2 * (i / 2)) as f64 / dim as f64;
            let angle = pos as f64 / 10_000f64.powf(exponent);
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![max_positions, dim], data).expect("positive table shape")
}

fn layer_shapes(prefix: &str, cfg: &ModelConfig, cross: bool) -> Vec<(String, Vec<usize>)> {
    let d = cfg.model_dim;
    let mut out = Vec::new();
    let attn = |out: &mut Vec<(String, Vec<usize>)>, name: &str| {
        for w in ["q", "k", "v", "o"] {
            out.push((format!("{prefix}.{name}.w{w}"), vec![d, d]));
            out.push((format!("{prefix}.{name}.b{w}"), vec![d]));
        }
    };
    attn(&mut out, "self");
    if cross {
        attn(&mut out, "cross");
    }
    out.push((format!("{prefix}.ff.w1"), vec![d, cfg.ff_dim]));
    out.push((format!("{prefix}.ff.b1"), vec![cfg.ff_dim]));
    out.push((format!("{prefix}.ff.w2"), vec![cfg.ff_dim, d]));
    out.push((format!("{prefix}.ff.b2"), vec![d]));
    let norms = if cross { 3 } else { 2 };
    for n in 1..=norms {
        out.push((format!("{prefix}.ln{n}.gain"), vec![d]));
        out.push((format!("{prefix}.ln{n}.bias"), vec![d]));
    }
    out
}

fn parameter_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.model_dim;
    let mut shapes = vec![
        ("src_embed".to_string(), vec![cfg.source_vocab, d]),
        ("tgt_embed".to_string(), vec![cfg.target_vocab, d]),
    ];
    for i in 0..cfg.stored_layers() {
        shapes.extend(layer_shapes(&format!("enc.{i}"), cfg, false));
    }
    for i in 0..cfg.stored_layers() {
        shapes.extend(layer_shapes(&format!("dec.{i}"), cfg, true));
    }
    shapes.push(("out.w".to_string(), vec![d, cfg.target_vocab]));
    shapes.push(("out.b".to_string(), vec![cfg.target_vocab]));
    shapes
}

fn init_tensor(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = if name.ends_with(".gain") {
        vec![1.0; n]
    } else if shape.len() == 1 {
        vec![0.0; n]
    } else {
        let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
        (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
    };
    Tensor::new(shape.to_vec(), data).expect("valid parameter shape")
}

/// Dropout randomness for training mode; `None` in evaluation mode.
type DropRng<'a> = Option<&'a mut ChaCha8Rng>;

impl TransformerModel {
    /// Scaled-uniform (Glorot) weights, zero biases, unit norm gains;
    /// deterministic in `seed`.
    pub fn init_parameters(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = parameter_shapes(config)
            .into_iter()
            .map(|(name, shape)| {
                let t = init_tensor(&name, &shape, &mut rng);
                (name, Arc::new(t))
            })
            .collect();
        Ok(TransformerModel {
            config: config.clone(),
            params,
            positions: Arc::new(sinusoid_table(config.max_positions, config.model_dim)),
        })
    }

    /// Rebuilds a model from named tensors, checking names and shapes.
    pub fn from_parameters(config: &ModelConfig, params: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = parameter_shapes(config);
        if expected.len() != params.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Shape {
                        op: "from_parameters",
                        left: shape.clone(),
                        right: t.shape().to_vec(),
                    })
                }
                None => return Err(Error::contract(format!("missing parameter {name}"))),
            }
        }
        Ok(TransformerModel {
            config: config.clone(),
            params: params.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
            positions: Arc::new(sinusoid_table(config.max_positions, config.model_dim)),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    /// Mutable access for in-place optimizer updates; a tensor still shared
    /// with a recorded graph is copied first.
    pub(crate) fn parameters_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params
            .iter_mut()
            .map(|(k, v)| (k.as_str(), Arc::make_mut(v)))
    }

    pub fn parameter(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(Arc::as_ref)
    }

    /// Replaces one parameter tensor; the shape must not change.
    pub fn set_parameter(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_parameter",
                left: slot.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        *slot = Arc::new(value);
        Ok(())
    }

    pub fn parameter_count(&self) -> ParameterCount {
        let mut c = ParameterCount {
            embeddings: 0,
            encoder_stack: 0,
            decoder_stack: 0,
            output: 0,
        };
        for (name, t) in &self.params {
            let slot = if name.ends_with("_embed") {
                &mut c.embeddings
            } else if name.starts_with("enc.") {
                &mut c.encoder_stack
            } else if name.starts_with("dec.") {
                &mut c.decoder_stack
            } else {
                &mut c.output
            };
            *slot += t.numel();
        }
        c
    }

    fn layer_index(&self, i: usize) -> usize {
        if self.config.recurrent_stacking {
            0
        } else {
            i
        }
    }

    fn bind(&self, graph: &mut Graph, tracked: bool) -> BTreeMap<&str, Var> {
        self.params
            .iter()
            .map(|(name, t)| (name.as_str(), graph.leaf(Arc::clone(t), tracked)))
            .collect()
    }

    fn check_ids(&self, ids: &[usize], vocab: usize, what: &str) -> Result<()> {
        if let Some(pos) = ids.iter().position(|&t| t >= vocab) {
            return Err(Error::data(format!(
                "{what} token id {} at position {pos} is outside the vocabulary of size {vocab}",
                ids[pos]
            )));
        }
        Ok(())
    }

    fn embed(
        &self,
        g: &mut Graph,
        table: Var,
        ids: &[usize],
        seq_len: usize,
        rng: &mut DropRng,
    ) -> Result<Var> {
        if seq_len > self.config.max_positions {
            return Err(Error::data(format!(
                "sequence of length {seq_len} exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        let d = self.config.model_dim;
        let tokens = g.gather_rows(table, ids)?;
        let scaled = g.scale(tokens, (d as f64).sqrt());
        let positions: Vec<usize> = (0..ids.len()).map(|i| i % seq_len).collect();
        let table = g.leaf(Arc::clone(&self.positions), false);
        let pe = g.gather_rows(table, &positions)?;
        let x = g.add(scaled, pe)?;
        dropout(g, x, self.config.embedding_dropout, rng)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_block(
        &self,
        g: &mut Graph,
        p: &BTreeMap<&str, Var>,
        prefix: &str,
        queries: Var,
        keys: Var,
        spec: &AttentionSpec,
        rng: &mut DropRng,
    ) -> Result<Var> {
        let proj = |g: &mut Graph, x: Var, w: &str| -> Result<Var> {
            let y = g.matmul(x, p[format!("{prefix}.w{w}").as_str()])?;
            g.add_bias(y, p[format!("{prefix}.b{w}").as_str()])
        };
        let q = proj(g, queries, "q")?;
        let k = proj(g, keys, "k")?;
        let v = proj(g, keys, "v")?;
        let rate = self.config.attention_dropout;
        let a = match rng {
            Some(r) => g.attention(q, k, v, spec, rate, &mut **r)?,
            None => g.attention(q, k, v, spec, 0.0, &mut NoRng)?,
        };
        proj(g, a, "o")
    }

    fn feed_forward(&self, g: &mut Graph, p: &BTreeMap<&str, Var>, prefix: &str, x: Var) -> Result<Var> {
        let h = g.matmul(x, p[format!("{prefix}.ff.w1").as_str()])?;
        let h = g.add_bias(h, p[format!("{prefix}.ff.b1").as_str()])?;
        let h = g.relu(h);
        let y = g.matmul(h, p[format!("{prefix}.ff.w2").as_str()])?;
        g.add_bias(y, p[format!("{prefix}.ff.b2").as_str()])
    }

    fn residual_norm(
        &self,
        g: &mut Graph,
        p: &BTreeMap<&str, Var>,
        norm: &str,
        x: Var,
        branch: Var,
        rng: &mut DropRng,
    ) -> Result<Var> {
        let branch = dropout(g, branch, self.config.layer_dropout, rng)?;
        let sum = g.add(x, branch)?;
        g.layer_norm(
            sum,
            p[format!("{norm}.gain").as_str()],
            p[format!("{norm}.bias").as_str()],
            LN_EPS,
        )
    }

    fn encode_on(
        &self,
        g: &mut Graph,
        p: &BTreeMap<&str, Var>,
        source: &[usize],
        batch: usize,
        src_len: usize,
        rng: &mut DropRng,
    ) -> Result<(Var, Vec<bool>)> {
        self.check_ids(source, self.config.source_vocab, "source")?;
        let mask: Vec<bool> = source.iter().map(|&t| t != PAD).collect();
        let spec = AttentionSpec {
            batch,
            query_len: src_len,
            key_len: src_len,
            heads: self.config.num_heads,
            causal: false,
            key_mask: mask.clone(),
        };
        let mut x = self.embed(g, p["src_embed"], source, src_len, rng)?;
        for i in 0..self.config.num_layers {
            let pre = format!("enc.{}", self.layer_index(i));
            let a = self.attention_block(g, p, &format!("{pre}.self"), x, x, &spec, rng)?;
            x = self.residual_norm(g, p, &format!("{pre}.ln1"), x, a, rng)?;
            let f = self.feed_forward(g, p, &pre, x)?;
            x = self.residual_norm(g, p, &format!("{pre}.ln2"), x, f, rng)?;
        }
        Ok((x, mask))
    }

    #[allow(clippy::too_many_arguments)]
    fn decode_on(
        &self,
        g: &mut Graph,
        p: &BTreeMap<&str, Var>,
        memory: Var,
        memory_mask: &[bool],
        src_len: usize,
        target_in: &[usize],
        batch: usize,
        tgt_len: usize,
        rng: &mut DropRng,
    ) -> Result<Var> {
        self.check_ids(target_in, self.config.target_vocab, "target")?;
        let self_spec = AttentionSpec {
            batch,
            query_len: tgt_len,
            key_len: tgt_len,
            heads: self.config.num_heads,
            causal: true,
            key_mask: target_in.iter().map(|&t| t != PAD).collect(),
        };
        let cross_spec = AttentionSpec {
            batch,
            query_len: tgt_len,
            key_len: src_len,
            heads: self.config.num_heads,
            causal: false,
            key_mask: memory_mask.to_vec(),
        };
        let mut y = self.embed(g, p["tgt_embed"], target_in, tgt_len, rng)?;
        for i in 0..self.config.num_layers {
            let pre = format!("dec.{}", self.layer_index(i));
            let a = self.attention_block(g, p, &format!("{pre}.self"), y, y, &self_spec, rng)?;
            y = self.residual_norm(g, p, &format!("{pre}.ln1"), y, a, rng)?;
            let c = self.attention_block(g, p, &format!("{pre}.cross"), y, memory, &cross_spec, rng)?;
            y = self.residual_norm(g, p, &format!("{pre}.ln2"), y, c, rng)?;
            let f = self.feed_forward(g, p, &pre, y)?;
            y = self.residual_norm(g, p, &format!("{pre}.ln3"), y, f, rng)?;
        }
        Ok(y)
    }

    fn project(&self, g: &mut Graph, p: &BTreeMap<&str, Var>, hidden: Var) -> Result<Var> {
        let logits = g.matmul(hidden, p["out.w"])?;
        g.add_bias(logits, p["out.b"])
    }

    /// Records a teacher-forced pass over `batch`. Passing an RNG enables
    /// dropout and tracks parameters for backpropagation.
    pub fn record_forward(&self, batch: &Batch, rng: Option<&mut ChaCha8Rng>) -> Result<ForwardPass> {
        let training = rng.is_some();
        let mut rng = rng;
        let mut g = Graph::new();
        let p = self.bind(&mut g, training);
        let (memory, mask) = self.encode_on(&mut g, &p, &batch.source, batch.size, batch.source_len, &mut rng)?;
        let target_in = batch.decoder_input();
        let hidden = self.decode_on(
            &mut g,
            &p,
            memory,
            &mask,
            batch.source_len,
            &target_in,
            batch.size,
            batch.target_len - 1,
            &mut rng,
        )?;
        let logits = self.project(&mut g, &p, hidden)?;
        let params = p.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        Ok(ForwardPass {
            graph: g,
            params,
            logits,
        })
    }

    /// Evaluation-mode logits `[batch × (target_len-1) × target_vocab]`.
    pub fn forward_teacher_forced(&self, batch: &Batch) -> Result<Tensor> {
        let pass = self.record_forward(batch, None)?;
        let logits = pass.graph.value(pass.logits).clone();
        Tensor::new(
            vec![batch.size, batch.target_len - 1, self.config.target_vocab],
            logits.into_data(),
        )
    }

    /// Runs the encoder once for a single unpadded source sentence.
    pub fn encode(&self, source: &[usize]) -> Result<SourceEncoding> {
        if source.is_empty() {
            return Err(Error::data("empty source sentence"));
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let (memory, mask) = self.encode_on(&mut g, &p, source, 1, source.len(), &mut None)?;
        Ok(SourceEncoding {
            memory: g.shared_value(memory),
            mask,
        })
    }

    /// Logits for the token following `prefix` (which starts with BOS).
    pub fn decode_step(&self, encoding: &SourceEncoding, prefix: &[usize]) -> Result<Vec<f64>> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::data("decoding prefix must start with BOS"));
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let memory = g.leaf(Arc::clone(&encoding.memory), false);
        let hidden = self.decode_on(
            &mut g,
            &p,
            memory,
            &encoding.mask,
            encoding.len(),
            prefix,
            1,
            prefix.len(),
            &mut None,
        )?;
        let last = g.gather_rows(hidden, &[prefix.len() - 1])?;
        let logits = self.project(&mut g, &p, last)?;
        Ok(g.value(logits).data().to_vec())
    }
}

fn dropout(g: &mut Graph, x: Var, rate: f64, rng: &mut DropRng) -> Result<Var> {
    match rng {
        Some(r) if rate > 0.0 => g.dropout(x, rate, &mut **r),
        _ => Ok(x),
    }
}

/// Stand-in RNG for evaluation mode, where dropout rates are zero and no
/// randomness is ever drawn.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("evaluation mode draws no random numbers")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("evaluation mode draws no random numbers")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("evaluation mode draws no random numbers")
    }
    fn try_fill_bytes(&mut self, _: &mut [u8]) -> std::result::Result<(), rand::Error> {
        unreachable!("evaluation mode draws no random numbers")
    }
}
