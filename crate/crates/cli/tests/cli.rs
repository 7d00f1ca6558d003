use std::fs;
use std::path::{Path, PathBuf};

use ccr_cli::commands::{ablate, dataset_hash, eval, localize, synth, train};
use ccr_cli::{exit_code, resolve_config, run, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL, EXIT_OK};
use ccr_core::config::RunConfig;
use ccr_core::data::{load_dataset, read_manifest, Lexicon, DEFAULT_STOPWORDS};
use ccr_core::eval::{predict_dataset, write_predictions, Prediction};
use ccr_core::losses::LossBundle;
use ccr_core::model::Model;
use ccr_core::trainer::load_checkpoint;
use ccr_core::{CcrError, Vocab};

const TINY: &[(&str, &str)] = &[
    ("synth_pairs", "6"),
    ("synth_frames", "12"),
    ("synth_feature_dim", "6"),
    ("synth_vocab_size", "20"),
    ("hidden_dim", "8"),
    ("heads", "2"),
    ("ff_dim", "16"),
    ("batch_size", "2"),
    ("steps", "3"),
];

fn tiny(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in TINY {
        cfg.set(k, v).unwrap();
    }
    cfg.manifest = dir.join("data/manifest.jsonl");
    cfg.out_dir = dir.join("run");
    fs::create_dir_all(dir.join("data")).unwrap();
    cfg
}

fn config_file(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("run.cfg");
    fs::write(&path, cfg.to_text()).unwrap();
    path
}

fn args(extra: &[&str]) -> Vec<String> {
    std::iter::once("ccr").chain(extra.iter().copied()).map(String::from).collect()
}

fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(read_tree(&path));
        } else {
            out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth(&tiny(a.path())).unwrap();
    synth(&tiny(b.path())).unwrap();
    let ta = read_tree(&a.path().join("data"));
    assert_eq!(ta.len(), 6 + 2);
    assert_eq!(ta, read_tree(&b.path().join("data")));
}

#[test]
fn synth_missing_output_dir_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("absent/manifest.jsonl");
    let code = run(args(&["synth", "--manifest", manifest.to_str().unwrap()]));
    assert_eq!(code, EXIT_DATA);
    assert!(!manifest.exists());
}

#[test]
fn synth_bias_flag_reaches_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.set("synth_pairs", "200").unwrap();
    cfg.set("synth_bias", "1.0").unwrap();
    let file = config_file(dir.path(), &cfg);
    assert_eq!(run(args(&["synth", "--config", file.to_str().unwrap()])), EXIT_OK);
    let queries: Vec<String> = read_manifest(&cfg.manifest).unwrap().into_iter().map(|e| e.query).collect();
    let lex = Lexicon::for_vocab_size(20);
    let stats = lex.partner_stats(queries.iter().map(String::as_str));
    assert_eq!(stats.count, 200);
    assert_eq!(stats.conditional, 1.0);

    assert_eq!(
        run(args(&["synth", "--config", file.to_str().unwrap(), "--synth-bias", "0.0"])),
        EXIT_OK
    );
    let queries: Vec<String> = read_manifest(&cfg.manifest).unwrap().into_iter().map(|e| e.query).collect();
    assert!(lex.partner_stats(queries.iter().map(String::as_str)).conditional < 0.5);
}

#[test]
fn zero_step_training_saves_the_initial_state() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.train.steps = 0;
    synth(&cfg).unwrap();
    let outcome = train(&cfg).unwrap();
    assert!(outcome.reports.is_empty());
    let (state, _) = load_checkpoint(&cfg.checkpoint_path()).unwrap();
    assert_eq!(state.step, 0);
    let fresh = Model::new(state.model.config.clone(), cfg.seed).unwrap();
    assert_eq!(state.model, fresh);
    let curve = fs::read_to_string(cfg.out_dir.join("loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1);
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let a = tempfile::tempdir().unwrap();
    let mut whole = tiny(a.path());
    whole.train.steps = 4;
    synth(&whole).unwrap();
    train(&whole).unwrap();

    let b = tempfile::tempdir().unwrap();
    let mut split = tiny(b.path());
    synth(&split).unwrap();
    split.train.steps = 2;
    train(&split).unwrap();
    split.train.steps = 4;
    split.resume = true;
    let second = train(&split).unwrap();
    assert_eq!(second.reports.first().map(|r| r.step), Some(2));

    for name in ["train_log.jsonl", "loss_curve.csv"] {
        assert_eq!(
            fs::read_to_string(whole.out_dir.join(name)).unwrap(),
            fs::read_to_string(split.out_dir.join(name)).unwrap(),
            "{name}"
        );
    }
    assert_eq!(
        fs::read(whole.checkpoint_path()).unwrap(),
        fs::read(split.checkpoint_path()).unwrap()
    );
}

#[test]
fn unknown_keys_and_bad_values_exit_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bad.cfg");
    fs::write(&file, "seed = 1\nlearning_rate = 0.1\n").unwrap();
    assert_eq!(run(args(&["train", "--config", file.to_str().unwrap()])), EXIT_CONFIG);
    assert_eq!(run(args(&["train", "--no-such-flag", "1"])), EXIT_CONFIG);
    assert_eq!(run(args(&["train", "--strategy", "median"])), EXIT_CONFIG);
    assert_eq!(run(args(&["train", "--steps", "-3"])), EXIT_CONFIG);
}

#[test]
fn exit_codes_follow_error_categories() {
    let numerical = CcrError::NonFinite {
        step: 3,
        losses: Box::new(LossBundle::default()),
    };
    assert_eq!(exit_code(&numerical.into()), EXIT_NUMERICAL);
    assert_eq!(exit_code(&CcrError::Config("x".into()).into()), EXIT_CONFIG);
    assert_eq!(exit_code(&CcrError::Truncated("x".into()).into()), EXIT_DATA);
}

#[test]
fn data_root_rebases_relative_paths() {
    let m = ccr_cli::cli()
        .try_get_matches_from(args(&["eval", "--manifest", "sub/manifest.jsonl", "--vocab", "/abs/vocab.txt"]))
        .unwrap();
    let (_, sub) = m.subcommand().unwrap();
    let cfg = resolve_config(sub, Some(PathBuf::from("/data"))).unwrap();
    assert_eq!(cfg.manifest, PathBuf::from("/data/sub/manifest.jsonl"));
    assert_eq!(cfg.vocab_path(), PathBuf::from("/abs/vocab.txt"));
    let cfg = resolve_config(sub, None).unwrap();
    assert_eq!(cfg.manifest, PathBuf::from("sub/manifest.jsonl"));
}

#[test]
fn oracle_predictions_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    synth(&cfg).unwrap();
    let entries = read_manifest(&cfg.manifest).unwrap();
    let preds: Vec<Prediction> = entries
        .iter()
        .map(|e| Prediction {
            video_id: e.video_id.clone(),
            segments: vec![e.gt_span.unwrap()],
            scores: vec![0.0],
        })
        .collect();
    let file = dir.path().join("oracle.jsonl");
    write_predictions(&file, &preds).unwrap();
    let report = eval(&cfg, Some(&file)).unwrap();
    for t in [0.1, 0.3, 0.5, 0.7] {
        assert_eq!(report.recall_at(1, t), Some(1.0));
    }
    assert_eq!(report.miou_at(1), Some(1.0));

    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(cfg.out_dir.join("report.json")).unwrap()).unwrap();
    let table = fs::read_to_string(cfg.out_dir.join("report.txt")).unwrap();
    let r1: Vec<f64> = table
        .lines()
        .find(|l| l.starts_with("R@1"))
        .unwrap()
        .split_whitespace()
        .skip(1)
        .map(|v| v.parse().unwrap())
        .collect();
    let from_json: Vec<f64> = json["recall"][0]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap() * 100.0)
        .chain(std::iter::once(json["miou"][0].as_f64().unwrap() * 100.0))
        .collect();
    assert_eq!(r1, from_json);
    let ious = fs::read_to_string(cfg.out_dir.join("ious.csv")).unwrap();
    assert_eq!(ious.lines().count(), 1 + entries.len());
}

#[test]
fn eval_matches_direct_inference() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    synth(&cfg).unwrap();
    train(&cfg).unwrap();
    let report = eval(&cfg, None).unwrap();

    let vocab = Vocab::load(&cfg.vocab_path(), DEFAULT_STOPWORDS).unwrap();
    let data = load_dataset(&cfg.manifest, &vocab).unwrap();
    let (state, _) = load_checkpoint(&cfg.checkpoint_path()).unwrap();
    let (preds, direct) = predict_dataset(&state.model, &data, &vocab, cfg.train.p_mask, cfg.gamma, cfg.seed).unwrap();
    assert_eq!(report, direct);
    let written = ccr_core::eval::read_predictions(&cfg.out_dir.join("predictions.jsonl")).unwrap();
    assert_eq!(written, preds);

    // the injected-prediction path scores the same file identically
    let again = eval(&cfg, Some(&cfg.out_dir.join("predictions.jsonl"))).unwrap();
    assert_eq!(again, report);
}

#[test]
fn localize_ranks_every_positive() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    synth(&cfg).unwrap();
    train(&cfg).unwrap();
    let entry = &read_manifest(&cfg.manifest).unwrap()[0];
    let features = dir.path().join("data").join(&entry.feature_path);
    let pred = localize(&cfg, &features, &entry.query, Some(entry.duration_s)).unwrap();
    assert_eq!(pred.segments.len(), 2);
    assert!(pred.segments.iter().all(|s| s[0] <= s[1]));
    let file = config_file(dir.path(), &cfg);
    let code = run(args(&[
        "localize",
        "--config",
        file.to_str().unwrap(),
        "--features",
        features.to_str().unwrap(),
        "--query",
        &entry.query,
    ]));
    assert_eq!(code, EXIT_OK);
}

#[test]
fn ablation_covers_the_full_grid() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.train.steps = 2;
    synth(&cfg).unwrap();
    let grid = ablate(&cfg).unwrap();
    assert_eq!(grid.len(), 9);
    let hash = {
        let vocab = Vocab::load(&cfg.vocab_path(), DEFAULT_STOPWORDS).unwrap();
        dataset_hash(&load_dataset(&cfg.manifest, &vocab).unwrap())
    };
    let strip = |text: &str| -> Vec<String> {
        text.lines()
            .filter(|l| !["strategy =", "aggregator =", "out_dir ="].iter().any(|k| l.starts_with(k)))
            .map(String::from)
            .collect()
    };
    let base = strip(&fs::read_to_string(grid[0].out_dir.join("config.txt")).unwrap());
    let mut seen = std::collections::HashSet::new();
    for cell in &grid {
        assert_eq!(cell.data_hash, hash);
        assert!(cell.report.samples == 6 && cell.report.recall.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(strip(&fs::read_to_string(cell.out_dir.join("config.txt")).unwrap()), base);
        assert!(seen.insert((cell.strategy, cell.aggregator)));
    }
    let csv = fs::read_to_string(cfg.out_dir.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 10);
    assert!(cfg.out_dir.join("ablation.txt").exists());
    assert!(cfg.out_dir.join("ablation.json").exists());
}
