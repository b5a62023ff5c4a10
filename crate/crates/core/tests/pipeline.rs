//! End-to-end behaviour of the experiment pipeline on small corpora.

use std::fs;
use std::path::Path;

use templab::data::{Batch, TaskKind};
use templab::experiment::{
    decode_sentences, load_sweep_records, prepare_data, run_analysis, run_sweep, time_decoding, train_run,
    ExperimentConfig,
};
use templab::metrics::{corpus_bleu, paired_bootstrap};
use templab::model::{load_checkpoint, TransformerModel};
use templab::tempering::{batch_loss_and_gradient, Reduction, TemperingConfig};
use templab::training::{evaluate_checkpoint, greedy_outputs, ExperimentRecord};
use templab::Error;

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.task.alphabet_size = 12;
    cfg.task.min_len = 3;
    cfg.task.max_len = 6;
    cfg.task.train_size = 120;
    cfg.task.dev_size = 12;
    cfg.task.test_size = 12;
    cfg.model.num_layers = 1;
    cfg.model.model_dim = 16;
    cfg.model.num_heads = 2;
    cfg.model.ff_dim = 32;
    cfg.model.max_positions = 24;
    cfg.trainer.max_steps = 24;
    cfg.trainer.warmup_steps = 8;
    cfg.trainer.eval_interval = 8;
    cfg.trainer.batch_size = 16;
    cfg.beam.sizes = vec![2, 4];
    cfg.beam.alphas = vec![0.6, 1.0];
    cfg.sweep.seeds = vec![3];
    cfg
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn overrides_change_the_hash_and_survive_a_round_trip() {
    let base = ExperimentConfig::load(None, &[]).unwrap();
    let cfg = ExperimentConfig::load(
        None,
        &[
            "tempering.temperature=3".to_string(),
            "task.kind=\"reverse\"".to_string(),
            "sweep.seeds=[0, 1]".to_string(),
        ],
    )
    .unwrap();
    assert_eq!(cfg.tempering.temperature, 3.0);
    assert_eq!(cfg.task.kind, TaskKind::Reverse);
    assert_eq!(cfg.sweep.seeds, vec![0, 1]);
    assert_ne!(base.hash(), cfg.hash());
    assert_eq!(cfg.hash().len(), 16);

    let reparsed = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
    assert_eq!(reparsed, cfg);
    assert_eq!(reparsed.hash(), cfg.hash());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    fs::write(&path, cfg.to_toml_string()).unwrap();
    let loaded = ExperimentConfig::load(Some(&path), &["trainer.patience=4".to_string()]).unwrap();
    assert_eq!(loaded.trainer.patience, 4);
    assert_eq!(loaded.tempering.temperature, 3.0);
}

#[test]
fn invalid_configurations_are_config_errors() {
    for bad in [
        "tempering.temperature=0",
        "tempering.label_smoothing=1.5",
        "trainer.eval_interval=0",
        "model.num_heads=3",
        "no_such_section.key=1",
        "trainer.no_such_key=1",
        "missing_equals_sign",
    ] {
        match ExperimentConfig::load(None, &[bad.to_string()]) {
            Err(Error::Config(_)) => {}
            other => panic!("{bad}: expected a configuration error, got {other:?}"),
        }
    }
}

#[test]
fn padding_does_not_change_the_summed_loss() {
    let cfg = tiny_config();
    let data = prepare_data(&cfg).unwrap();
    let model = TransformerModel::init_parameters(&cfg.model_config(&data), 2).unwrap();
    let tempering = TemperingConfig::new(2.5, true, 0.1).unwrap();
    let pairs = &data.train[..9];
    let loss_of = |batch: &Batch| {
        let logits = model.forward_teacher_forced(batch).unwrap();
        let flat = logits.with_data(logits.data().to_vec());
        let v = cfg.model_config(&data).target_vocab;
        let matrix = templab::tensor::Tensor::matrix(flat.numel() / v, v, flat.into_data()).unwrap();
        batch_loss_and_gradient(&matrix, &batch.decoder_output(), &tempering, Reduction::Sum)
            .unwrap()
            .0
    };
    let batched = loss_of(&Batch::from_encoded(pairs, (0..pairs.len()).collect()));
    let single: f64 = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| loss_of(&Batch::from_encoded(std::slice::from_ref(p), vec![i])))
        .sum();
    assert!((batched - single).abs() <= 1e-10, "{batched} vs {single}");
}

#[test]
fn sweep_and_analysis_write_manifested_outputs() {
    let cfg = tiny_config();
    let data = prepare_data(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (report, outcomes) = run_sweep(&cfg, &data, &[1.0, 2.0], Some(dir.path())).unwrap();

    assert_eq!(report.rows.len(), 2);
    assert_eq!(outcomes.len(), 2);
    assert_eq!(report.t_opt, Some(2.0), "only tempered runs are candidates");
    for row in &report.rows {
        assert!(row.error.is_none(), "{row:?}");
        assert_eq!(row.steps, 24);
        for v in [row.dev_greedy_bleu, row.test_greedy_bleu, row.similarity_bleu, row.oracle_beam_bleu] {
            assert!((0.0..=100.0).contains(&v.unwrap()));
        }
        // the grid contains the (4, 1.0) configuration used for test_beam_bleu
        assert!(row.oracle_beam_bleu.unwrap() >= row.test_beam_bleu.unwrap());
    }
    let m = manifest(dir.path());
    assert_eq!(m["config_hash"], cfg.hash());
    for file in m["files"].as_array().unwrap() {
        assert!(dir.path().join(file.as_str().unwrap()).exists(), "{file}");
    }

    // every run directory is self-describing and reloadable
    let run_dir = dir.path().join("runs").join("T2-seed3");
    assert_eq!(manifest(&run_dir)["config_hash"], cfg.hash());
    let ckpt = load_checkpoint(&run_dir.join("final.ckpt")).unwrap();
    let reference = outcomes[1].as_ref().unwrap();
    for (name, t) in reference.model.parameters() {
        assert_eq!(ckpt.model.parameter(name).unwrap(), t);
    }
    let record = ExperimentRecord::read_jsonl(&run_dir.join("record.jsonl")).unwrap();
    assert_eq!(record.losses(), reference.record.losses());

    let (runs, missing) = load_sweep_records(dir.path(), &report);
    assert!(missing.is_empty());
    let sources: Vec<Vec<usize>> = data.test.iter().map(|p| p.0.clone()).collect();
    let timing = time_decoding(&reference.model, &sources, &[2], 1.0, 1).unwrap();
    assert_eq!(timing.sentences, sources.len());
    let similarity: Vec<(f64, u64, f64)> = report
        .rows
        .iter()
        .map(|r| (r.temperature, r.seed, r.similarity_bleu.unwrap()))
        .collect();
    let analysis_dir = dir.path().join("analysis");
    fs::create_dir_all(&analysis_dir).unwrap();
    let analysis = run_analysis(&cfg, &runs, Some(timing), &similarity, Vec::new(), Some(&analysis_dir)).unwrap();
    assert!(analysis.gaps.is_empty(), "{:?}", analysis.gaps);
    assert_eq!(analysis.rows.len(), 2);
    let m = manifest(&analysis_dir);
    assert_eq!(m["config_hash"], cfg.hash());
    let files: Vec<&str> = m["files"].as_array().unwrap().iter().map(|f| f.as_str().unwrap()).collect();
    for expected in ["entropy.csv", "grad_norm.csv", "timing.csv", "similarity.csv", "summary.txt"] {
        assert!(files.contains(&expected), "{expected} missing from {files:?}");
        assert!(analysis_dir.join(expected).exists());
    }

    // missing inputs are reported, not fatal
    let partial = run_analysis(&cfg, &runs[..1], None, &[], Vec::new(), None).unwrap();
    assert!(partial.gaps.iter().any(|g| g.contains("timings")));
    assert!(partial.gaps.iter().any(|g| g.contains("similarity")));
}

#[test]
fn decoding_sentences_returns_outputs_and_records() {
    let cfg = tiny_config();
    let data = prepare_data(&cfg).unwrap();
    let model = TransformerModel::init_parameters(&cfg.model_config(&data), 0).unwrap();
    let sentences: Vec<Vec<String>> = data.corpus.test.iter().take(4).map(|p| p.source.clone()).collect();
    for beam in [None, Some((3, 1.0))] {
        let out = decode_sentences(&model, &data.source_vocab, &data.target_vocab, &sentences, beam, Some(5)).unwrap();
        assert_eq!(out.len(), 4);
        for (i, (text, record)) in out.iter().enumerate() {
            assert_eq!(record.line, i + 1);
            assert!(record.length <= 5);
            assert!(record.log_prob <= 0.0);
            let tokens = text.split_whitespace().count();
            assert!(tokens <= record.length);
        }
    }
    let empty = vec![Vec::new()];
    assert!(matches!(
        decode_sentences(&model, &data.source_vocab, &data.target_vocab, &empty, None, None),
        Err(Error::Data(_))
    ));
}

#[test]
fn untrained_model_scores_near_zero() {
    let mut cfg = ExperimentConfig::default();
    cfg.task.dev_size = 50;
    let data = prepare_data(&cfg).unwrap();
    let model = TransformerModel::init_parameters(&cfg.model_config(&data), 0).unwrap();
    let bleu = evaluate_checkpoint(&model, &data.dev).unwrap();
    assert!(bleu < 1.0, "untrained dev BLEU {bleu}");
    assert_eq!(bleu, evaluate_checkpoint(&model, &data.dev).unwrap());
}

#[test]
fn bootstrap_separates_a_perfect_system_from_a_random_one() {
    let cfg = ExperimentConfig::default();
    let data = prepare_data(&cfg).unwrap();
    let refs: Vec<Vec<usize>> = data.test.iter().map(|p| p.1.clone()).collect();
    let random: Vec<Vec<usize>> = refs.iter().map(|r| r.iter().map(|t| 4 + (t * 7 + 3) % 60).collect()).collect();
    let result = paired_bootstrap(&random, &refs, &refs, 1000, 7).unwrap();
    assert_eq!(result.bleu_b, 100.0);
    assert!(result.bleu_a < 5.0);
    // p is the share of resamples in which the perfect system fails to win
    let reversed = paired_bootstrap(&refs, &random, &refs, 1000, 7).unwrap();
    assert!(reversed.p_value < 0.05, "p = {}", reversed.p_value);
    assert_eq!(result.p_value, 1.0);
}

#[test]
fn multilingual_corpus_tags_every_source() {
    let mut cfg = tiny_config();
    cfg.multilingual = vec![TaskKind::Copy, TaskKind::Reverse];
    let data = prepare_data(&cfg).unwrap();
    assert_eq!(data.corpus.train.len(), 2 * cfg.task.train_size);
    for pair in &data.corpus.train {
        let tag = &pair.source[0];
        assert!(tag == TaskKind::Copy.tag() || tag == TaskKind::Reverse.tag(), "{tag}");
        assert!(data.source_vocab.id(tag).is_some());
    }
}

/// Noise-free copy at desk defaults with one-hot labels: the training loss
/// falls below 0.1 nats per token within 3k steps and the model copies its
/// input.
#[test]
fn desk_model_learns_to_copy() {
    let mut cfg = ExperimentConfig::default();
    cfg.task.noise_rate = 0.0;
    cfg.tempering.label_smoothing = 0.0;
    cfg.trainer.max_steps = 3000;
    let data = prepare_data(&cfg).unwrap();
    let outcome = train_run(&cfg, &data, 1.0, 0).unwrap();
    let losses = outcome.record.losses();
    assert!(losses.len() <= 3000);
    let tail = &losses[losses.len() - 50..];
    let late = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(late < 0.1, "late training loss {late}");

    let dev = evaluate_checkpoint(&outcome.model, &data.dev).unwrap();
    assert!(dev > 99.0, "dev BLEU {dev}");
    let sources: Vec<Vec<usize>> = data.test.iter().map(|p| p.0.clone()).collect();
    let outputs = greedy_outputs(&outcome.model, &sources).unwrap();
    let exact = outputs.iter().zip(&sources).filter(|(o, s)| o == s).count();
    assert!(exact * 100 >= 95 * sources.len(), "{exact}/{} copied exactly", sources.len());
    assert!(corpus_bleu(&outputs, &sources).unwrap() > 99.0);
}
