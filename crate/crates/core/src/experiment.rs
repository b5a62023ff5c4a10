//! Experiment orchestration: declarative configs, single training runs,
//! temperature sweeps with oracle beam grids, and analysis reports.
//!
//! Every output directory receives a `manifest.json` naming the files
//! written there together with the hash of the resolved configuration that
//! produced them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    build_vocabulary, encode_pairs, generate_multilingual_corpus, generate_synthetic_corpus, save_parallel, Corpus,
    Side, SyntheticTaskSpec, TaskKind, Vocabulary,
};
use crate::decoding::{beam_search, greedy_search, BeamConfig, CachedScorer, ModelScorer};
use crate::error::{Error, Result};
use crate::metrics::{corpus_bleu, output_similarity_bleu};
use crate::model::{save_checkpoint, Checkpoint, ModelConfig, TransformerModel};
use crate::tempering::TemperingConfig;
use crate::training::{decode_limit, evaluate_checkpoint, train, ExperimentRecord, TrainOutcome, TrainerConfig};

pub type Pairs = Vec<(Vec<usize>, Vec<usize>)>;
/// Token-id sequences, one per sentence.
pub type Outputs = Vec<Vec<usize>>;

/// Beam sizes × length penalties searched for the oracle beam score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamGrid {
    pub sizes: Vec<usize>,
    pub alphas: Vec<f64>,
}

impl Default for BeamGrid {
    fn default() -> Self {
        BeamGrid {
            sizes: vec![2, 4, 6, 8, 10, 12],
            alphas: (6..=14).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub temperatures: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            temperatures: vec![1.0, 1.2, 1.4, 1.6, 1.8, 2.0, 3.0, 4.0, 5.0, 10.0],
            seeds: vec![1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Beam used for the greedy–beam similarity measure.
    pub similarity_beam: usize,
    pub similarity_alpha: f64,
    /// Beam sizes timed against greedy decoding.
    pub timing_beams: Vec<usize>,
    pub timing_alpha: f64,
    pub timing_passes: usize,
    /// Fraction of final training steps summarized as "late training".
    pub late_fraction: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            similarity_beam: 4,
            similarity_alpha: 1.0,
            timing_beams: vec![4, 10],
            timing_alpha: 1.0,
            timing_passes: 3,
            late_fraction: 0.25,
        }
    }
}

/// A complete, declarative description of an experiment.
///
/// `model.source_vocab` and `model.target_vocab` are replaced by the sizes
/// of the vocabularies built from the generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: SyntheticTaskSpec,
    /// When non-empty, train one-to-many over these tasks, each selected by
    /// its tag token prepended to the source.
    pub multilingual: Vec<TaskKind>,
    pub model: ModelConfig,
    pub tempering: TemperingConfig,
    pub trainer: TrainerConfig,
    pub beam: BeamGrid,
    pub sweep: SweepConfig,
    pub analysis: AnalysisConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: SyntheticTaskSpec::default(),
            multilingual: Vec::new(),
            model: ModelConfig::default(),
            tempering: TemperingConfig::default(),
            trainer: TrainerConfig::default(),
            beam: BeamGrid::default(),
            sweep: SweepConfig::default(),
            analysis: AnalysisConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    /// Reads a TOML file (or starts from defaults) and applies
    /// `key.path=value` overrides. Values are parsed as TOML literals and
    /// fall back to plain strings.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse()
                    .map_err(|e: toml::de::Error| Error::config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.tempering.validate()?;
        self.trainer.validate()?;
        if self.beam.sizes.is_empty() || self.beam.sizes.contains(&0) {
            return Err(Error::config("beam.sizes must be a non-empty list of positive sizes"));
        }
        if self.beam.alphas.is_empty() || self.beam.alphas.iter().any(|a| a.is_nan() || *a < 0.0) {
            return Err(Error::config("beam.alphas must be a non-empty list of non-negative values"));
        }
        if self.sweep.temperatures.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::config("sweep.temperatures must be positive"));
        }
        if self.sweep.seeds.is_empty() {
            return Err(Error::config("sweep.seeds must not be empty"));
        }
        let a = &self.analysis;
        if a.similarity_beam == 0 || a.timing_beams.contains(&0) || a.timing_passes == 0 {
            return Err(Error::config("analysis beams and passes must be positive"));
        }
        if !(a.late_fraction > 0.0 && a.late_fraction <= 1.0) {
            return Err(Error::config("analysis.late_fraction must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Hex SHA-256 prefix of the canonical JSON form of the configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Zeroes the attention, embedding and residual dropout sites.
    pub fn without_dropout(mut self) -> Self {
        self.model = self.model.without_dropout();
        self
    }

    /// The model configuration with vocabulary sizes taken from `data`.
    pub fn model_config(&self, data: &PreparedData) -> ModelConfig {
        ModelConfig {
            source_vocab: data.source_vocab.len(),
            target_vocab: data.target_vocab.len(),
            ..self.model.clone()
        }
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("bad override key {key:?}")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override key {key:?} descends into a non-table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Generated corpus with its vocabularies and id-encoded splits.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub corpus: Corpus,
    pub source_vocab: Vocabulary,
    pub target_vocab: Vocabulary,
    pub train: Pairs,
    pub dev: Pairs,
    pub test: Pairs,
}

impl PreparedData {
    /// Writes the splits as parallel text files and both vocabularies.
    pub fn save(&self, dir: &Path) -> Result<Vec<String>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();
        for (name, pairs) in [("train", &self.corpus.train), ("dev", &self.corpus.dev), ("test", &self.corpus.test)] {
            save_parallel(pairs, &dir.join(format!("{name}.src")), &dir.join(format!("{name}.tgt")))?;
            files.push(format!("{name}.src"));
            files.push(format!("{name}.tgt"));
        }
        self.source_vocab.save(&dir.join("vocab.src"))?;
        self.target_vocab.save(&dir.join("vocab.tgt"))?;
        files.extend(["vocab.src".to_string(), "vocab.tgt".to_string()]);
        Ok(files)
    }
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let (corpus, tags): (Corpus, Vec<&str>) = if cfg.multilingual.is_empty() {
        (generate_synthetic_corpus(&cfg.task)?, Vec::new())
    } else {
        let tags = cfg.multilingual.iter().map(|k| k.tag()).collect();
        (generate_multilingual_corpus(&cfg.task, &cfg.multilingual)?, tags)
    };
    let source_vocab = build_vocabulary(&corpus.train, Side::Source, &tags)?;
    let target_vocab = build_vocabulary(&corpus.train, Side::Target, &[])?;
    Ok(PreparedData {
        train: encode_pairs(&corpus.train, &source_vocab, &target_vocab),
        dev: encode_pairs(&corpus.dev, &source_vocab, &target_vocab),
        test: encode_pairs(&corpus.test, &source_vocab, &target_vocab),
        corpus,
        source_vocab,
        target_vocab,
    })
}

/// Trains one model at `temperature`; `seed` drives both initialization and
/// the trainer's shuffling and dropout streams.
pub fn train_run(cfg: &ExperimentConfig, data: &PreparedData, temperature: f64, seed: u64) -> Result<TrainOutcome> {
    let model = TransformerModel::init_parameters(&cfg.model_config(data), seed)?;
    let tempering = TemperingConfig {
        temperature,
        ..cfg.tempering
    };
    let trainer = TrainerConfig {
        seed,
        ..cfg.trainer.clone()
    };
    train(&model, &data.train, &data.dev, &tempering, &trainer)
}

/// Writes `manifest.json` listing `files` under the configuration hash.
pub fn write_manifest(dir: &Path, config_hash: &str, files: &[String]) -> Result<()> {
    #[derive(Serialize)]
    struct Manifest<'a> {
        config_hash: &'a str,
        files: &'a [String],
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&Manifest { config_hash, files }).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Saves a run's record, kept checkpoints and final model under `dir`.
pub fn save_run(outcome: &TrainOutcome, dir: &Path, config_hash: &str) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = vec!["record.jsonl".to_string()];
    outcome.record.write_jsonl(&dir.join("record.jsonl"))?;
    for c in &outcome.checkpoints {
        let name = format!("step-{}.ckpt", c.step);
        save_checkpoint(c, &dir.join(&name))?;
        files.push(name);
    }
    let final_ckpt = Checkpoint {
        step: outcome.record.steps.last().map_or(0, |s| s.step),
        model: outcome.model.clone(),
        averaged_steps: outcome.averaged_steps.clone(),
    };
    save_checkpoint(&final_ckpt, &dir.join("final.ckpt"))?;
    files.push("final.ckpt".to_string());
    write_manifest(dir, config_hash, &files)?;
    Ok(files)
}

/// Directory name for one run of a sweep.
pub fn run_dir_name(temperature: f64, seed: u64) -> String {
    format!("T{temperature}-seed{seed}")
}

/// Decodes every source with greedy search and one beam configuration.
pub fn decode_pair(
    model: &TransformerModel,
    sources: &[Vec<usize>],
    beam_size: usize,
    alpha: f64,
) -> Result<(Outputs, Outputs)> {
    let mut greedy = Vec::with_capacity(sources.len());
    let mut beam = Vec::with_capacity(sources.len());
    let limit = model.config().max_positions;
    for s in sources {
        let scorer = CachedScorer::new(ModelScorer::new(model, s)?);
        let max_len = decode_limit(s.len(), limit);
        greedy.push(greedy_search(&scorer, max_len)?.output().to_vec());
        let cfg = BeamConfig::new(beam_size, alpha, max_len)?;
        beam.push(beam_search(&scorer, &cfg)?[0].output().to_vec());
    }
    Ok((greedy, beam))
}

/// BLEU of one beam configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub beam_size: usize,
    pub alpha: f64,
    pub bleu: f64,
}

/// Scores every configuration of `grid` on `pairs`, sharing model
/// evaluations across configurations sentence by sentence.
pub fn beam_grid_bleu(model: &TransformerModel, pairs: &[(Vec<usize>, Vec<usize>)], grid: &BeamGrid) -> Result<Vec<GridPoint>> {
    let configs: Vec<(usize, f64)> = grid
        .sizes
        .iter()
        .flat_map(|&k| grid.alphas.iter().map(move |&a| (k, a)))
        .collect();
    let mut outputs: Vec<Vec<Vec<usize>>> = vec![Vec::with_capacity(pairs.len()); configs.len()];
    let limit = model.config().max_positions;
    for (src, _) in pairs {
        let scorer = CachedScorer::new(ModelScorer::new(model, src)?);
        let max_len = decode_limit(src.len(), limit);
        for (c, &(k, a)) in configs.iter().enumerate() {
            let best = beam_search(&scorer, &BeamConfig::new(k, a, max_len)?)?;
            outputs[c].push(best[0].output().to_vec());
        }
    }
    let refs: Vec<Vec<usize>> = pairs.iter().map(|p| p.1.clone()).collect();
    configs
        .iter()
        .zip(&outputs)
        .map(|(&(beam_size, alpha), hyps)| {
            Ok(GridPoint {
                beam_size,
                alpha,
                bleu: corpus_bleu(hyps, &refs)?,
            })
        })
        .collect()
}

/// Best grid point; ties go to the earlier configuration.
pub fn oracle(points: &[GridPoint]) -> Option<&GridPoint> {
    points.iter().fold(None, |best: Option<&GridPoint>, p| match best {
        Some(b) if b.bleu >= p.bleu => Some(b),
        _ => Some(p),
    })
}

/// Summary of the final part of a run's step records.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LateTraining {
    pub tempered_entropy: f64,
    pub raw_entropy: f64,
    pub grad_norm: f64,
    pub loss: f64,
}

/// Means over the last `fraction` of the recorded steps (at least one).
pub fn late_training(record: &ExperimentRecord, fraction: f64) -> Option<LateTraining> {
    let n = record.steps.len();
    if n == 0 {
        return None;
    }
    let take = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
    let tail = &record.steps[n - take..];
    let mean = |f: fn(&crate::training::StepRecord) -> f64| tail.iter().map(f).sum::<f64>() / take as f64;
    Some(LateTraining {
        tempered_entropy: mean(|s| s.tempered_entropy),
        raw_entropy: mean(|s| s.raw_entropy),
        grad_norm: mean(|s| s.grad_norm),
        loss: mean(|s| s.loss),
    })
}

/// One trained model of a sweep. Test fields are filled only after the
/// temperature has been selected on dev data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub temperature: f64,
    pub seed: u64,
    pub error: Option<String>,
    pub steps: usize,
    pub stopped_early: bool,
    pub dev_greedy_bleu: Option<f64>,
    pub test_greedy_bleu: Option<f64>,
    /// Test BLEU of the similarity beam configuration.
    pub test_beam_bleu: Option<f64>,
    pub similarity_bleu: Option<f64>,
    pub oracle_beam_bleu: Option<f64>,
    pub oracle_beam_size: Option<usize>,
    pub oracle_alpha: Option<f64>,
    pub late: Option<LateTraining>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config_hash: String,
    pub rows: Vec<SweepRow>,
    /// Temperature above 1 with the best mean dev greedy BLEU, or the only
    /// temperature when the grid has no tempered entry.
    pub t_opt: Option<f64>,
}

impl SweepReport {
    pub fn rows_at(&self, temperature: f64) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(move |r| r.temperature == temperature)
    }
}

/// Picks the tempered (T > 1) temperature with the highest mean dev greedy
/// BLEU, ties to the lower temperature; falls back to the best overall when
/// no tempered run succeeded. Only dev scores are consulted.
pub fn select_t_opt<'a>(rows: impl IntoIterator<Item = &'a SweepRow>) -> Option<f64> {
    let mut by_t: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
    for r in rows {
        if let Some(b) = r.dev_greedy_bleu {
            let e = by_t.entry(r.temperature.to_bits()).or_insert((r.temperature, 0.0, 0));
            e.1 += b;
            e.2 += 1;
        }
    }
    let mut means: Vec<(f64, f64)> = by_t.values().map(|&(t, s, n)| (t, s / n as f64)).collect();
    means.sort_by(|a, b| a.0.total_cmp(&b.0));
    let pick = |cands: Vec<(f64, f64)>| {
        cands
            .into_iter()
            .fold(None, |best: Option<(f64, f64)>, c| match best {
                Some(b) if b.1 >= c.1 => Some(b),
                _ => Some(c),
            })
            .map(|(t, _)| t)
    };
    let tempered: Vec<(f64, f64)> = means.iter().copied().filter(|(t, _)| *t > 1.0).collect();
    if tempered.is_empty() {
        pick(means)
    } else {
        pick(tempered)
    }
}

/// Trains one model per (temperature, seed), selects T_opt on dev, then
/// evaluates every model on test with greedy search and the beam grid.
/// A failed run is recorded in its row and the sweep carries on.
///
/// With `out_dir`, each run is saved under `runs/<T>-seed<s>/` and the
/// sweep tables are written next to it.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    temperatures: &[f64],
    out_dir: Option<&Path>,
) -> Result<(SweepReport, Vec<Option<TrainOutcome>>)> {
    if temperatures.is_empty() {
        return Err(Error::config("a sweep needs at least one temperature"));
    }
    let hash = cfg.hash();
    let mut rows = Vec::new();
    let mut outcomes = Vec::new();
    for &t in temperatures {
        for &seed in &cfg.sweep.seeds {
            let mut row = SweepRow {
                temperature: t,
                seed,
                ..Default::default()
            };
            let started = Instant::now();
            match train_run(cfg, data, t, seed).and_then(|o| {
                if let Some(dir) = out_dir {
                    save_run(&o, &dir.join("runs").join(run_dir_name(t, seed)), &hash)?;
                }
                let dev = evaluate_checkpoint(&o.model, &data.dev)?;
                Ok((o, dev))
            }) {
                Ok((o, dev)) => {
                    row.steps = o.record.steps.len();
                    row.stopped_early = o.stopped_early;
                    row.dev_greedy_bleu = Some(dev);
                    row.late = late_training(&o.record, cfg.analysis.late_fraction);
                    log::info!(
                        "T={t} seed={seed}: {} steps, dev BLEU {dev:.2} ({:.0}s)",
                        row.steps,
                        started.elapsed().as_secs_f64()
                    );
                    outcomes.push(Some(o));
                }
                Err(e) => {
                    log::warn!("T={t} seed={seed} failed: {e}");
                    row.error = Some(e.to_string());
                    outcomes.push(None);
                }
            }
            rows.push(row);
        }
    }
    // selection is complete before any test sentence is decoded
    let t_opt = select_t_opt(&rows);
    let sources: Vec<Vec<usize>> = data.test.iter().map(|p| p.0.clone()).collect();
    let refs: Vec<Vec<usize>> = data.test.iter().map(|p| p.1.clone()).collect();
    for (row, outcome) in rows.iter_mut().zip(&outcomes) {
        let Some(o) = outcome else { continue };
        let evaluated = (|| -> Result<()> {
            let (greedy, beam) = decode_pair(&o.model, &sources, cfg.analysis.similarity_beam, cfg.analysis.similarity_alpha)?;
            row.test_greedy_bleu = Some(corpus_bleu(&greedy, &refs)?);
            row.test_beam_bleu = Some(corpus_bleu(&beam, &refs)?);
            row.similarity_bleu = Some(output_similarity_bleu(&greedy, &beam)?);
            let grid = beam_grid_bleu(&o.model, &data.test, &cfg.beam)?;
            if let Some(best) = oracle(&grid) {
                row.oracle_beam_bleu = Some(best.bleu);
                row.oracle_beam_size = Some(best.beam_size);
                row.oracle_alpha = Some(best.alpha);
            }
            Ok(())
        })();
        if let Err(e) = evaluated {
            row.error = Some(e.to_string());
        }
    }
    let report = SweepReport {
        config_hash: hash,
        rows,
        t_opt,
    };
    if let Some(dir) = out_dir {
        write_sweep_files(&report, dir)?;
    }
    Ok((report, outcomes))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x}"))
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Writes `sweep.csv` (one row per run), `curve.csv` (seed means per T),
/// `sweep.json` and the manifest.
pub fn write_sweep_files(report: &SweepReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("sweep.csv");
    let mut w = csv_writer(&path)?;
    let header = [
        "temperature",
        "seed",
        "status",
        "steps",
        "dev_greedy_bleu",
        "test_greedy_bleu",
        "test_beam_bleu",
        "similarity_bleu",
        "oracle_beam_bleu",
        "oracle_beam_size",
        "oracle_alpha",
    ];
    w.write_record(header).map_err(|e| csv_error(&path, e))?;
    for r in &report.rows {
        let status = r.error.as_deref().map_or("ok".to_string(), |e| format!("failed: {e}"));
        w.write_record([
            format!("{}", r.temperature),
            r.seed.to_string(),
            status,
            r.steps.to_string(),
            opt(r.dev_greedy_bleu),
            opt(r.test_greedy_bleu),
            opt(r.test_beam_bleu),
            opt(r.similarity_bleu),
            opt(r.oracle_beam_bleu),
            r.oracle_beam_size.map_or(String::new(), |k| k.to_string()),
            opt(r.oracle_alpha),
        ])
        .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("curve.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["temperature", "greedy_bleu", "oracle_beam_bleu"])
        .map_err(|e| csv_error(&path, e))?;
    let mut temps: Vec<f64> = report.rows.iter().map(|r| r.temperature).collect();
    temps.dedup();
    for t in temps {
        w.write_record([
            format!("{t}"),
            opt(mean_of(report.rows_at(t).map(|r| r.test_greedy_bleu))),
            opt(mean_of(report.rows_at(t).map(|r| r.oracle_beam_bleu))),
        ])
        .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("sweep.json");
    fs::write(&path, serde_json::to_string_pretty(report).expect("report serializes"))
        .map_err(|e| Error::io(&path, e))?;
    let mut files: Vec<String> = ["sweep.csv", "curve.csv", "sweep.json"].map(String::from).to_vec();
    if dir.join("runs").is_dir() {
        files.push("runs/".to_string());
    }
    write_manifest(dir, &report.config_hash, &files)
}

/// Median wall-clock seconds for decoding a set of sources.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    /// `None` for greedy search.
    pub beam_size: Option<usize>,
    pub median_seconds: f64,
    pub passes: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingTable {
    pub sentences: usize,
    pub rows: Vec<TimingRow>,
}

impl TimingTable {
    pub fn greedy_seconds(&self) -> Option<f64> {
        self.rows.iter().find(|r| r.beam_size.is_none()).map(|r| r.median_seconds)
    }

    /// `beam time / greedy time` for beam size `k`.
    pub fn speedup(&self, k: usize) -> Option<f64> {
        let g = self.greedy_seconds()?;
        let b = self.rows.iter().find(|r| r.beam_size == Some(k))?.median_seconds;
        Some(b / g)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Times greedy and beam decoding of `sources`, one sentence at a time,
/// after one untimed warm-up pass per decoder. Reports medians.
pub fn time_decoding(
    model: &TransformerModel,
    sources: &[Vec<usize>],
    beams: &[usize],
    alpha: f64,
    passes: usize,
) -> Result<TimingTable> {
    if passes == 0 || sources.is_empty() {
        return Err(Error::config("timing needs at least one pass and one sentence"));
    }
    let limit = model.config().max_positions;
    let run = |beam: Option<usize>| -> Result<f64> {
        let start = Instant::now();
        for s in sources {
            let max_len = decode_limit(s.len(), limit);
            let scorer = ModelScorer::new(model, s)?;
            match beam {
                None => {
                    std::hint::black_box(greedy_search(&scorer, max_len)?);
                }
                Some(k) => {
                    std::hint::black_box(beam_search(&scorer, &BeamConfig::new(k, alpha, max_len)?)?);
                }
            }
        }
        Ok(start.elapsed().as_secs_f64())
    };
    let mut rows = Vec::new();
    for beam in std::iter::once(None).chain(beams.iter().map(|&k| Some(k))) {
        run(beam)?;
        let times = (0..passes).map(|_| run(beam)).collect::<Result<Vec<f64>>>()?;
        rows.push(TimingRow {
            beam_size: beam,
            median_seconds: median(times.clone()),
            passes: times,
        });
    }
    Ok(TimingTable {
        sentences: sources.len(),
        rows,
    })
}

/// Records of one run, as read back for analysis.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub temperature: f64,
    pub seed: u64,
    pub record: ExperimentRecord,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRow {
    pub temperature: f64,
    pub seed: u64,
    pub late: Option<LateTraining>,
    pub similarity_bleu: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub config_hash: String,
    pub rows: Vec<AnalysisRow>,
    pub timing: Option<TimingTable>,
    /// Missing inputs, each noted instead of failing the report.
    pub gaps: Vec<String>,
    pub summary: String,
}

/// Assembles curves, timing and similarity into CSV files plus a text
/// summary. `similarity` holds `(temperature, seed, similarity BLEU)`;
/// `gaps` lists inputs the caller already knows to be missing.
pub fn run_analysis(
    cfg: &ExperimentConfig,
    runs: &[RunRecord],
    timing: Option<TimingTable>,
    similarity: &[(f64, u64, f64)],
    mut gaps: Vec<String>,
    out_dir: Option<&Path>,
) -> Result<AnalysisReport> {
    let mut rows = Vec::new();
    for r in runs {
        let late = late_training(&r.record, cfg.analysis.late_fraction);
        if late.is_none() {
            gaps.push(format!("T={} seed={}: no step records", r.temperature, r.seed));
        }
        let sim = similarity
            .iter()
            .find(|(t, s, _)| *t == r.temperature && *s == r.seed)
            .map(|x| x.2);
        if sim.is_none() {
            gaps.push(format!("T={} seed={}: no similarity BLEU", r.temperature, r.seed));
        }
        rows.push(AnalysisRow {
            temperature: r.temperature,
            seed: r.seed,
            late,
            similarity_bleu: sim,
        });
    }
    if timing.is_none() {
        gaps.push("no decoding timings".to_string());
    }
    let mut report = AnalysisReport {
        config_hash: cfg.hash(),
        rows,
        timing,
        gaps,
        summary: String::new(),
    };
    report.summary = summarize(&report, cfg);
    if let Some(dir) = out_dir {
        write_analysis_files(&report, runs, dir)?;
    }
    Ok(report)
}

fn summarize(report: &AnalysisReport, cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    s.push_str(&format!("config hash: {}\n\n", report.config_hash));
    s.push_str(&format!(
        "late training (final {:.0}% of steps), means per run:\n",
        100.0 * cfg.analysis.late_fraction
    ));
    s.push_str("  T       seed  tempered_H  raw_H     grad_norm  similarity\n");
    for r in &report.rows {
        let (te, re, gn) = r
            .late
            .map_or(("-".into(), "-".into(), "-".into()), |l| {
                (format!("{:.4}", l.tempered_entropy), format!("{:.4}", l.raw_entropy), format!("{:.4}", l.grad_norm))
            });
        let sim = r.similarity_bleu.map_or("-".to_string(), |x| format!("{x:.2}"));
        s.push_str(&format!("  {:<7} {:<5} {te:<11} {re:<9} {gn:<10} {sim}\n", r.temperature, r.seed));
    }
    if let Some(t) = &report.timing {
        s.push_str(&format!("\ndecoding {} sentences, batch size 1, median of passes:\n", t.sentences));
        for row in &t.rows {
            let name = row.beam_size.map_or("greedy".to_string(), |k| format!("beam-{k}"));
            let ratio = row
                .beam_size
                .and_then(|k| t.speedup(k))
                .map_or(String::new(), |x| format!("  (greedy is {x:.2}x faster)"));
            s.push_str(&format!("  {name:<8} {:.3}s{ratio}\n", row.median_seconds));
        }
        s.push_str(
            "  context: full-scale systems decode a 1k-sentence test set greedily in tens of seconds \
             (37.6s on average in a published setting); toy timings are not comparable in absolute terms.\n",
        );
    }
    if !report.gaps.is_empty() {
        s.push_str("\ngaps:\n");
        for g in &report.gaps {
            s.push_str(&format!("  {g}\n"));
        }
    }
    s
}

fn write_analysis_files(report: &AnalysisReport, runs: &[RunRecord], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("entropy.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["temperature", "seed", "step", "tempered_entropy", "raw_entropy"])
        .map_err(|e| csv_error(&path, e))?;
    for r in runs {
        for s in &r.record.steps {
            w.write_record([
                format!("{}", r.temperature),
                r.seed.to_string(),
                s.step.to_string(),
                format!("{}", s.tempered_entropy),
                format!("{}", s.raw_entropy),
            ])
            .map_err(|e| csv_error(&path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("grad_norm.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["temperature", "seed", "step", "grad_norm"])
        .map_err(|e| csv_error(&path, e))?;
    for r in runs {
        for s in &r.record.steps {
            w.write_record([
                format!("{}", r.temperature),
                r.seed.to_string(),
                s.step.to_string(),
                format!("{}", s.grad_norm),
            ])
            .map_err(|e| csv_error(&path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("timing.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["decoder", "beam_size", "median_seconds", "beam_over_greedy"])
        .map_err(|e| csv_error(&path, e))?;
    if let Some(t) = &report.timing {
        for row in &t.rows {
            w.write_record([
                row.beam_size.map_or("greedy", |_| "beam").to_string(),
                row.beam_size.map_or("1".to_string(), |k| k.to_string()),
                format!("{}", row.median_seconds),
                row.beam_size.and_then(|k| t.speedup(k)).map_or("1".to_string(), |x| format!("{x}")),
            ])
            .map_err(|e| csv_error(&path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("similarity.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["temperature", "seed", "similarity_bleu"])
        .map_err(|e| csv_error(&path, e))?;
    for r in &report.rows {
        w.write_record([format!("{}", r.temperature), r.seed.to_string(), opt(r.similarity_bleu)])
            .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("summary.txt");
    fs::write(&path, &report.summary).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("analysis.json");
    fs::write(&path, serde_json::to_string_pretty(report).expect("report serializes"))
        .map_err(|e| Error::io(&path, e))?;
    let files = ["entropy.csv", "grad_norm.csv", "timing.csv", "similarity.csv", "summary.txt", "analysis.json"]
        .map(String::from)
        .to_vec();
    write_manifest(dir, &report.config_hash, &files)
}

/// Reads back the per-run records saved by a sweep in `dir`.
pub fn load_sweep_records(dir: &Path, report: &SweepReport) -> (Vec<RunRecord>, Vec<String>) {
    let mut runs = Vec::new();
    let mut missing = Vec::new();
    for r in &report.rows {
        let path = dir.join("runs").join(run_dir_name(r.temperature, r.seed)).join("record.jsonl");
        match ExperimentRecord::read_jsonl(&path) {
            Ok(record) => runs.push(RunRecord {
                temperature: r.temperature,
                seed: r.seed,
                record,
            }),
            Err(e) => missing.push(format!("T={} seed={}: {e}", r.temperature, r.seed)),
        }
    }
    (runs, missing)
}

/// Per-sentence decoding record written next to an output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub line: usize,
    pub score: f64,
    pub log_prob: f64,
    /// Generated tokens, EOS included.
    pub length: usize,
    pub finished: bool,
    pub nanos: u128,
}

/// Decodes tokenized sentences with greedy search (`beam = None`) or beam
/// search, returning detokenized outputs and their records.
pub fn decode_sentences(
    model: &TransformerModel,
    source_vocab: &Vocabulary,
    target_vocab: &Vocabulary,
    sentences: &[Vec<String>],
    beam: Option<(usize, f64)>,
    max_length: Option<usize>,
) -> Result<Vec<(String, DecodeRecord)>> {
    let limit = model.config().max_positions;
    let mut out = Vec::with_capacity(sentences.len());
    for (line, sentence) in sentences.iter().enumerate() {
        let ids = source_vocab.encode(sentence);
        if ids.is_empty() {
            return Err(Error::data(format!("input line {} is empty", line + 1)));
        }
        if ids.len() > limit {
            return Err(Error::data(format!("input line {} exceeds {limit} tokens", line + 1)));
        }
        let max_len = max_length.unwrap_or_else(|| decode_limit(ids.len(), limit)).min(limit - 1).max(1);
        let start = Instant::now();
        let scorer = ModelScorer::new(model, &ids)?;
        let hyp = match beam {
            None => greedy_search(&scorer, max_len)?,
            Some((k, alpha)) => beam_search(&scorer, &BeamConfig::new(k, alpha, max_len)?)?.swap_remove(0),
        };
        let nanos = start.elapsed().as_nanos();
        out.push((
            target_vocab.decode(hyp.output()).join(" "),
            DecodeRecord {
                line: line + 1,
                score: hyp.score,
                log_prob: hyp.log_prob,
                length: hyp.len(),
                finished: hyp.finished,
                nanos,
            },
        ));
    }
    Ok(out)
}
