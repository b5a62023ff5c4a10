//! Command-line driver for softmax-tempering experiments.
//!
//! ```text
//! templab train   --config exp.toml --set tempering.temperature=2.0
//! templab sweep   --config exp.toml --temperatures 1,2,5
//! templab analyze --config exp.toml
//! templab decode  --run runs/train --input test.src --output hyp.txt --beam-size 4
//! templab report  --hyp hyp.txt --ref test.tgt [--hyp-b other.txt]
//! templab config  --config exp.toml   # print the resolved configuration
//! ```
//!
//! Exit codes: 0 success, 2 configuration error, 3 data or file error,
//! 4 numeric abort, 5 internal contract violation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use templab::data::{read_sentences, Vocabulary};
use templab::experiment::{
    decode_sentences, load_sweep_records, prepare_data, run_analysis, run_sweep, save_run,
    time_decoding, train_run, write_manifest, ExperimentConfig, RunRecord, SweepReport,
};
use templab::metrics::{corpus_bleu, paired_bootstrap, ScoreReport, SignificanceReport};
use templab::model::load_checkpoint;
use templab::training::evaluate_checkpoint;
use templab::{Error, Result};

#[derive(Parser)]
#[command(name = "templab", version, about = "Softmax tempering experiments on synthetic seq2seq tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment configuration; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a configuration key, e.g. `--set trainer.max_steps=500`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Zero the attention, embedding and residual dropout rates
    #[arg(long)]
    no_dropout: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let cfg = ExperimentConfig::load(self.config.as_deref(), &self.overrides)?;
        Ok(if self.no_dropout { cfg.without_dropout() } else { cfg })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one model at `tempering.temperature` with `trainer.seed`
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Decode a tokenized text file with a trained model
    Decode {
        /// Run directory written by `train` (uses final.ckpt and data/vocab.*)
        #[arg(long, conflicts_with_all = ["checkpoint", "source_vocab", "target_vocab"])]
        run: Option<PathBuf>,
        #[arg(long, requires_all = ["source_vocab", "target_vocab"])]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        source_vocab: Option<PathBuf>,
        #[arg(long)]
        target_vocab: Option<PathBuf>,
        /// One whitespace-tokenized sentence per line
        #[arg(long)]
        input: PathBuf,
        /// Hypotheses; per-sentence records go to `<output>.jsonl`
        #[arg(long)]
        output: PathBuf,
        /// Beam size; greedy search when omitted
        #[arg(long)]
        beam_size: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long)]
        max_length: Option<usize>,
    },
    /// Train one model per temperature and seed, select T_opt on dev, and
    /// score every model on test with greedy search and the beam grid
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated temperatures, overriding `sweep.temperatures`
        #[arg(long, value_delimiter = ',')]
        temperatures: Option<Vec<f64>>,
    },
    /// Entropy and gradient-norm curves, timing table and similarity BLEU
    /// for a completed sweep
    Analyze {
        #[command(flatten)]
        config: ConfigArgs,
        /// Sweep directory; defaults to the configured output directory
        #[arg(long)]
        sweep_dir: Option<PathBuf>,
        /// Skip the decoding timing measurements
        #[arg(long)]
        no_timing: bool,
    },
    /// Corpus BLEU of a hypothesis file, optionally with a paired bootstrap
    /// against a second system
    Report {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp_b: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        resamples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Configuration whose hash is attached to the report
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the JSON report here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the resolved configuration and its hash
    Config {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config } => train_cmd(&config.load()?),
        Command::Decode {
            run,
            checkpoint,
            source_vocab,
            target_vocab,
            input,
            output,
            beam_size,
            alpha,
            max_length,
        } => {
            let (ckpt, sv, tv) = match run {
                Some(dir) => (dir.join("final.ckpt"), dir.join("data/vocab.src"), dir.join("data/vocab.tgt")),
                None => match (checkpoint, source_vocab, target_vocab) {
                    (Some(c), Some(s), Some(t)) => (c, s, t),
                    _ => return Err(Error::Config("give --run or --checkpoint with both vocabularies".into())),
                },
            };
            decode_cmd(&ckpt, &sv, &tv, &input, &output, beam_size.map(|k| (k, alpha)), max_length)
        }
        Command::Sweep { config, temperatures } => {
            let cfg = config.load()?;
            let temps = temperatures.unwrap_or_else(|| cfg.sweep.temperatures.clone());
            sweep_cmd(&cfg, &temps)
        }
        Command::Analyze {
            config,
            sweep_dir,
            no_timing,
        } => {
            // a sweep directory carries the configuration that produced it
            let cfg = match &sweep_dir {
                Some(dir) if config.config.is_none() && dir.join("config.toml").exists() => {
                    let cfg = ExperimentConfig::load(Some(&dir.join("config.toml")), &config.overrides)?;
                    if config.no_dropout { cfg.without_dropout() } else { cfg }
                }
                _ => config.load()?,
            };
            let dir = sweep_dir.unwrap_or_else(|| cfg.output_dir.clone());
            analyze_cmd(&cfg, &dir, !no_timing)
        }
        Command::Report {
            hyp,
            reference,
            hyp_b,
            resamples,
            seed,
            config,
            out,
        } => {
            let hash = config
                .map(|p| ExperimentConfig::load(Some(&p), &[]).map(|c| c.hash()))
                .transpose()?;
            report_cmd(&hyp, &reference, hyp_b.as_deref(), resamples, seed, hash, out.as_deref())
        }
        Command::Config { config } => {
            let cfg = config.load()?;
            print!("# config hash {}\n{}", cfg.hash(), cfg.to_toml_string());
            Ok(())
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn train_cmd(cfg: &ExperimentConfig) -> Result<()> {
    let dir = &cfg.output_dir;
    let hash = cfg.hash();
    let data = prepare_data(cfg)?;
    create_dir(dir)?;
    let data_files = data.save(&dir.join("data"))?;
    write_manifest(&dir.join("data"), &hash, &data_files)?;
    log::info!(
        "training T={} seed={} on {} pairs (config {hash})",
        cfg.tempering.temperature,
        cfg.trainer.seed,
        data.train.len()
    );
    let outcome = train_run(cfg, &data, cfg.tempering.temperature, cfg.trainer.seed)?;
    let mut files = save_run(&outcome, dir, &hash)?;
    write_text(&dir.join("config.toml"), &cfg.to_toml_string())?;
    files.extend(["config.toml".to_string(), "data/".to_string()]);
    write_manifest(dir, &hash, &files)?;
    let dev = evaluate_checkpoint(&outcome.model, &data.dev)?;
    let last = outcome.record.steps.last().expect("at least one step");
    println!(
        "steps {} (early stop: {}), final loss {:.4}, dev greedy BLEU {dev:.2}",
        last.step, outcome.stopped_early, last.loss
    );
    Ok(())
}

fn decode_cmd(
    checkpoint: &Path,
    source_vocab: &Path,
    target_vocab: &Path,
    input: &Path,
    output: &Path,
    beam: Option<(usize, f64)>,
    max_length: Option<usize>,
) -> Result<()> {
    let model = load_checkpoint(checkpoint)?.model;
    let sv = Vocabulary::load(source_vocab)?;
    let tv = Vocabulary::load(target_vocab)?;
    if sv.len() != model.config().source_vocab || tv.len() != model.config().target_vocab {
        return Err(Error::Data("vocabulary sizes do not match the checkpoint".into()));
    }
    let sentences = read_sentences(input)?;
    let decoded = decode_sentences(&model, &sv, &tv, &sentences, beam, max_length)?;
    let mut text = String::new();
    let mut records = String::new();
    for (line, rec) in &decoded {
        text.push_str(line);
        text.push('\n');
        records.push_str(&serde_json::to_string(rec).expect("record serializes"));
        records.push('\n');
    }
    write_text(output, &text)?;
    let mut sidecar = output.as_os_str().to_owned();
    sidecar.push(".jsonl");
    write_text(Path::new(&sidecar), &records)?;
    log::info!("decoded {} sentences into {}", decoded.len(), output.display());
    Ok(())
}

fn sweep_cmd(cfg: &ExperimentConfig, temperatures: &[f64]) -> Result<()> {
    let dir = &cfg.output_dir;
    let data = prepare_data(cfg)?;
    create_dir(dir)?;
    write_text(&dir.join("config.toml"), &cfg.to_toml_string())?;
    let data_files = data.save(&dir.join("data"))?;
    write_manifest(&dir.join("data"), &cfg.hash(), &data_files)?;
    let (report, _) = run_sweep(cfg, &data, temperatures, Some(dir))?;
    println!("T\tseed\tdev_greedy\ttest_greedy\toracle_beam\tsimilarity");
    for r in &report.rows {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
        match &r.error {
            Some(e) => println!("{}\t{}\tfailed: {e}", r.temperature, r.seed),
            None => println!(
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.temperature,
                r.seed,
                f(r.dev_greedy_bleu),
                f(r.test_greedy_bleu),
                f(r.oracle_beam_bleu),
                f(r.similarity_bleu)
            ),
        }
    }
    match report.t_opt {
        Some(t) => println!("T_opt (dev greedy BLEU): {t}"),
        None => println!("T_opt: none (every run failed)"),
    }
    Ok(())
}

fn analyze_cmd(cfg: &ExperimentConfig, dir: &Path, timing: bool) -> Result<()> {
    let path = dir.join("sweep.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    let report: SweepReport = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if report.config_hash != cfg.hash() {
        log::warn!(
            "sweep in {} was produced by config {}, analyzing with config {}",
            dir.display(),
            report.config_hash,
            cfg.hash()
        );
    }
    let (runs, missing) = load_sweep_records(dir, &report);
    let similarity: Vec<(f64, u64, f64)> = report
        .rows
        .iter()
        .filter_map(|r| r.similarity_bleu.map(|s| (r.temperature, r.seed, s)))
        .collect();
    let timing_table = if timing {
        baseline_timing(cfg, dir, &report, &runs)?
    } else {
        None
    };
    let analysis = run_analysis(cfg, &runs, timing_table, &similarity, missing, Some(&dir.join("analysis")))?;
    print!("{}", analysis.summary);
    Ok(())
}

/// Times decoding of the test set with the lowest-temperature model.
fn baseline_timing(
    cfg: &ExperimentConfig,
    dir: &Path,
    report: &SweepReport,
    runs: &[RunRecord],
) -> Result<Option<templab::experiment::TimingTable>> {
    let Some(base) = runs.iter().min_by(|a, b| a.temperature.total_cmp(&b.temperature)) else {
        return Ok(None);
    };
    let ckpt = dir
        .join("runs")
        .join(templab::experiment::run_dir_name(base.temperature, base.seed))
        .join("final.ckpt");
    let model = load_checkpoint(&ckpt)?.model;
    let data = prepare_data(cfg)?;
    let sources: Vec<Vec<usize>> = data.test.iter().map(|p| p.0.clone()).collect();
    log::info!(
        "timing {} test sentences with the T={} model (config {})",
        sources.len(),
        base.temperature,
        report.config_hash
    );
    let a = &cfg.analysis;
    Ok(Some(time_decoding(&model, &sources, &a.timing_beams, a.timing_alpha, a.timing_passes)?))
}

fn report_cmd(
    hyp: &Path,
    reference: &Path,
    hyp_b: Option<&Path>,
    resamples: usize,
    seed: u64,
    config_hash: Option<String>,
    out: Option<&Path>,
) -> Result<()> {
    let h = read_sentences(hyp)?;
    let r = read_sentences(reference)?;
    let json = match hyp_b {
        None => {
            let report = ScoreReport {
                metric: "bleu".to_string(),
                value: corpus_bleu(&h, &r)?,
                n_sentences: r.len(),
                config_hash,
            };
            serde_json::to_string_pretty(&report)
        }
        Some(b) => {
            let hb = read_sentences(b)?;
            let result = paired_bootstrap(&h, &hb, &r, resamples, seed)?;
            serde_json::to_string_pretty(&SignificanceReport::new(&result, r.len(), config_hash))
        }
    }
    .expect("report serializes");
    match out {
        Some(p) => write_text(p, &(json + "\n")),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}
