//! Synthetic transduction corpora, vocabularies and batching.
//!
//! Sentences are sequences of single-symbol word tokens. Four transductions
//! are available; `noise_rate` corrupts target tokens to give the label
//! sequences some diversity.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Reverse,
    /// Every symbol is replaced by the one three places further on.
    ShiftSubstitution,
    /// Each output symbol is the sum of the current and previous input
    /// symbols modulo the alphabet.
    BigramGrammar,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::Copy,
        TaskKind::Reverse,
        TaskKind::ShiftSubstitution,
        TaskKind::BigramGrammar,
    ];

    /// Language tag used for one-to-many training.
    pub fn tag(self) -> &'static str {
        match self {
            TaskKind::Copy => "<2copy>",
            TaskKind::Reverse => "<2rev>",
            TaskKind::ShiftSubstitution => "<2shift>",
            TaskKind::BigramGrammar => "<2bigram>",
        }
    }

    fn transduce(self, source: &[usize], alphabet: usize) -> Vec<usize> {
        match self {
            TaskKind::Copy => source.to_vec(),
            TaskKind::Reverse => source.iter().rev().copied().collect(),
            TaskKind::ShiftSubstitution => source.iter().map(|s| (s + 3) % alphabet).collect(),
            TaskKind::BigramGrammar => source
                .iter()
                .enumerate()
                .map(|(i, s)| if i == 0 { *s } else { (s + source[i - 1]) % alphabet })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    pub alphabet_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            kind: TaskKind::Copy,
            alphabet_size: 64,
            min_len: 5,
            max_len: 20,
            train_size: 2000,
            dev_size: 200,
            test_size: 200,
            noise_rate: 0.1,
            seed: 1,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.alphabet_size < 2 {
            return Err(Error::config(format!(
                "alphabet_size must be at least 2, got {}",
                self.alphabet_size
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config(format!(
                "length range [{}, {}] is empty or starts at zero",
                self.min_len, self.max_len
            )));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::config(format!("noise_rate must lie in [0, 1), got {}", self.noise_rate)));
        }
        if self.train_size == 0 {
            return Err(Error::config("train_size must be positive"));
        }
        let distinct: f64 = (self.min_len..=self.max_len)
            .map(|l| (self.alphabet_size as f64).powi(l as i32))
            .sum();
        let wanted = (self.train_size + self.dev_size + self.test_size) as f64;
        if distinct < 2.0 * wanted {
            return Err(Error::config(format!(
                "only {distinct} distinct sources exist for {wanted} disjoint sentences"
            )));
        }
        Ok(())
    }
}

pub fn symbol(i: usize) -> String {
    format!("w{i}")
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl SentencePair {
    pub fn new(source: &[&str], target: &[&str]) -> Self {
        SentencePair {
            source: source.iter().map(|s| s.to_string()).collect(),
            target: target.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub train: Vec<SentencePair>,
    pub dev: Vec<SentencePair>,
    pub test: Vec<SentencePair>,
}

/// Per-split corruption statistics, kept for checking the noise model.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NoiseStats {
    pub target_tokens: usize,
    pub corrupted: usize,
}

#[derive(Clone, Copy)]
enum Split {
    Train,
    Dev,
    Test,
}

fn split_stream(seed: u64, split: Split) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match split {
        Split::Train => 1,
        Split::Dev => 2,
        Split::Test => 3,
    });
    rng
}

fn sample_sources(
    spec: &SyntheticTaskSpec,
    split: Split,
    count: usize,
    taken: &mut HashSet<Vec<usize>>,
) -> Vec<Vec<usize>> {
    let mut rng = split_stream(spec.seed, split);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let src: Vec<usize> = (0..len).map(|_| rng.gen_range(0..spec.alphabet_size)).collect();
        if taken.insert(src.clone()) {
            out.push(src);
        }
    }
    out
}

/// Replaces each token with a different, uniformly chosen symbol with
/// probability `rate`.
fn corrupt(tokens: &mut [usize], alphabet: usize, rate: f64, rng: &mut ChaCha8Rng) -> usize {
    let mut hits = 0;
    for t in tokens.iter_mut() {
        if rate > 0.0 && rng.gen::<f64>() < rate {
            let r = rng.gen_range(0..alphabet - 1);
            *t = if r >= *t { r + 1 } else { r };
            hits += 1;
        }
    }
    hits
}

fn to_words(ids: &[usize]) -> Vec<String> {
    ids.iter().map(|&i| symbol(i)).collect()
}

/// Source sentences of each split, drawn from independent streams with
/// dev and test sources disjoint from train (and from each other).
fn split_sources(spec: &SyntheticTaskSpec) -> [Vec<Vec<usize>>; 3] {
    let mut taken = HashSet::new();
    let train = sample_sources(spec, Split::Train, spec.train_size, &mut taken);
    let dev = sample_sources(spec, Split::Dev, spec.dev_size, &mut taken);
    let test = sample_sources(spec, Split::Test, spec.test_size, &mut taken);
    [train, dev, test]
}

/// Generates the three splits. Noise is applied to training targets only,
/// so dev and test references are exact transductions.
pub fn generate_synthetic_corpus(spec: &SyntheticTaskSpec) -> Result<Corpus> {
    Ok(generate_with_stats(spec)?.0)
}

pub fn generate_with_stats(spec: &SyntheticTaskSpec) -> Result<(Corpus, NoiseStats)> {
    spec.validate()?;
    let [train, dev, test] = split_sources(spec);
    let mut noise_rng = split_stream(spec.seed ^ 0x9e37_79b9_7f4a_7c15, Split::Train);
    let mut stats = NoiseStats::default();
    let train = train
        .into_iter()
        .map(|src| {
            let mut tgt = spec.kind.transduce(&src, spec.alphabet_size);
            stats.target_tokens += tgt.len();
            stats.corrupted += corrupt(&mut tgt, spec.alphabet_size, spec.noise_rate, &mut noise_rng);
            SentencePair {
                source: to_words(&src),
                target: to_words(&tgt),
            }
        })
        .collect();
    let clean = |srcs: Vec<Vec<usize>>| -> Vec<SentencePair> {
        srcs.into_iter()
            .map(|src| SentencePair {
                target: to_words(&spec.kind.transduce(&src, spec.alphabet_size)),
                source: to_words(&src),
            })
            .collect()
    };
    let corpus = Corpus {
        train,
        dev: clean(dev),
        test: clean(test),
    };
    Ok((corpus, stats))
}

/// One-to-many corpus: every source sentence appears once per task, tagged
/// with that task's target-language token.
pub fn generate_multilingual_corpus(spec: &SyntheticTaskSpec, kinds: &[TaskKind]) -> Result<Corpus> {
    spec.validate()?;
    if kinds.is_empty() {
        return Err(Error::config("multilingual corpus needs at least one task"));
    }
    let mut out = Corpus::default();
    for &kind in kinds {
        let per_task = SyntheticTaskSpec {
            kind,
            ..spec.clone()
        };
        // same seed, so every task shares the source sentences
        let corpus = generate_synthetic_corpus(&per_task)?;
        let tag = |pairs: Vec<SentencePair>| -> Vec<SentencePair> {
            pairs.into_iter().map(|p| tag_pair(p, kind.tag())).collect()
        };
        out.train.extend(tag(corpus.train));
        out.dev.extend(tag(corpus.dev));
        out.test.extend(tag(corpus.test));
    }
    Ok(out)
}

fn tag_pair(mut pair: SentencePair, tag: &str) -> SentencePair {
    pair.source.insert(0, tag.to_string());
    pair
}

/// Prefixes the source with `tag`. The tag must already be a known source
/// token; applying it twice yields two tags.
pub fn prepend_target_tag(pair: &SentencePair, tag: &str, source_vocab: &Vocabulary) -> Result<SentencePair> {
    if source_vocab.id(tag).is_none() {
        return Err(Error::config(format!("tag {tag} is not registered in the source vocabulary")));
    }
    Ok(tag_pair(pair.clone(), tag))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

/// Token/id bijection with four reserved ids followed by any registered
/// tags and then corpus tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(extra: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for t in RESERVED.iter().map(|s| s.to_string()).chain(extra) {
            if v.ids.insert(t.clone(), v.tokens.len()).is_some() {
                return Err(Error::data(format!("duplicate vocabulary token {t}")));
            }
            v.tokens.push(t);
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    /// Maps ids back to tokens, stopping at EOS and skipping BOS/PAD.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != BOS && i != PAD)
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }

    /// Writes one non-reserved token per line; zero-based line `n` holds id
    /// `n + 4`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            body.push_str(t);
            body.push('\n');
        }
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::from_tokens(text.lines().map(str::to_string))
            .map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Builds a vocabulary for one side of the corpus: `tags` first, then
/// tokens by descending frequency with lexicographic tie-breaking.
pub fn build_vocabulary(pairs: &[SentencePair], side: Side, tags: &[&str]) -> Result<Vocabulary> {
    if pairs.is_empty() {
        return Err(Error::data("cannot build a vocabulary from an empty corpus"));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for p in pairs {
        let sent = match side {
            Side::Source => &p.source,
            Side::Target => &p.target,
        };
        for t in sent {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut ordered: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, _)| !tags.contains(t) && !RESERVED.contains(t))
        .collect();
    ordered.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Vocabulary::from_tokens(
        tags.iter()
            .map(|t| t.to_string())
            .chain(ordered.into_iter().map(|(t, _)| t.to_string())),
    )
}

/// Padded id matrices for one minibatch.
///
/// `target` rows are `BOS y_1 .. y_n EOS` followed by padding; the decoder
/// consumes `target[.., ..len-1]` and predicts `target[.., 1..]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub source_len: usize,
    pub target_len: usize,
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    /// Indices of the constituent pairs in the input slice.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_encoded(pairs: &[(Vec<usize>, Vec<usize>)], indices: Vec<usize>) -> Self {
        let source_len = pairs.iter().map(|p| p.0.len()).max().unwrap_or(1).max(1);
        let target_len = pairs.iter().map(|p| p.1.len() + 2).max().unwrap_or(2);
        let mut source = vec![PAD; pairs.len() * source_len];
        let mut target = vec![PAD; pairs.len() * target_len];
        for (b, (src, tgt)) in pairs.iter().enumerate() {
            source[b * source_len..b * source_len + src.len()].copy_from_slice(src);
            let row = &mut target[b * target_len..];
            row[0] = BOS;
            row[1..=tgt.len()].copy_from_slice(tgt);
            row[tgt.len() + 1] = EOS;
        }
        Batch {
            size: pairs.len(),
            source_len,
            target_len,
            source,
            target,
            indices,
        }
    }

    pub fn source_mask(&self) -> Vec<bool> {
        self.source.iter().map(|&t| t != PAD).collect()
    }

    /// Decoder inputs: every target row without its final position.
    pub fn decoder_input(&self) -> Vec<usize> {
        let l = self.target_len;
        self.target
            .chunks(l)
            .flat_map(|row| row[..l - 1].iter().copied())
            .collect()
    }

    /// Prediction targets aligned with [`Batch::decoder_input`]; padding is
    /// `None`.
    pub fn decoder_output(&self) -> Vec<Option<usize>> {
        let l = self.target_len;
        self.target
            .chunks(l)
            .flat_map(|row| row[1..].iter().map(|&t| (t != PAD).then_some(t)))
            .collect()
    }

    pub fn padding_fraction(&self) -> f64 {
        let pads = self.source.iter().chain(&self.target).filter(|&&t| t == PAD).count();
        pads as f64 / (self.source.len() + self.target.len()) as f64
    }
}

pub fn encode_pairs(pairs: &[SentencePair], src: &Vocabulary, tgt: &Vocabulary) -> Vec<(Vec<usize>, Vec<usize>)> {
    pairs
        .iter()
        .map(|p| (src.encode(&p.source), tgt.encode(&p.target)))
        .collect()
}

/// Shuffles with `seed`, groups pairs of similar length, and returns the
/// batches in shuffled order. Every pair appears in exactly one batch.
pub fn make_batches(pairs: &[(Vec<usize>, Vec<usize>)], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    batches_impl(pairs, batch_size, seed, true)
}

/// Same as [`make_batches`] without length bucketing.
pub fn make_unbucketed_batches(
    pairs: &[(Vec<usize>, Vec<usize>)],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    batches_impl(pairs, batch_size, seed, false)
}

fn batches_impl(
    pairs: &[(Vec<usize>, Vec<usize>)],
    batch_size: usize,
    seed: u64,
    bucket: bool,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    if bucket {
        // stable sort keeps the shuffled order among equal lengths
        order.sort_by_key(|&i| (pairs[i].0.len(), pairs[i].1.len()));
    }
    let mut batches: Vec<Batch> = order
        .chunks(batch_size)
        .map(|idx| {
            let members: Vec<_> = idx.iter().map(|&i| pairs[i].clone()).collect();
            Batch::from_encoded(&members, idx.to_vec())
        })
        .collect();
    if bucket {
        batches.shuffle(&mut rng);
    }
    Ok(batches)
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for l in lines {
        writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Writes a split as two parallel plain-text files.
pub fn save_parallel(pairs: &[SentencePair], source_path: &Path, target_path: &Path) -> Result<()> {
    write_lines(source_path, pairs.iter().map(|p| p.source.join(" ")))?;
    write_lines(target_path, pairs.iter().map(|p| p.target.join(" ")))
}

pub fn read_sentences(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

pub fn load_parallel(source_path: &Path, target_path: &Path) -> Result<Vec<SentencePair>> {
    let src = read_sentences(source_path)?;
    let tgt = read_sentences(target_path)?;
    if src.len() != tgt.len() {
        return Err(Error::format(
            target_path,
            format!("{} target lines for {} source lines", tgt.len(), src.len()),
        ));
    }
    Ok(src
        .into_iter()
        .zip(tgt)
        .map(|(source, target)| SentencePair { source, target })
        .collect())
}
