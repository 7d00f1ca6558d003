use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ccr_core::ccr::{AggregatorKind, CounterfactualStrategy};
use ccr_core::config::RunConfig;
use ccr_core::data::{
    encode_fmat, load_dataset, load_features, synth_dataset, write_features, write_manifest, ManifestEntry, DEFAULT_STOPWORDS,
};
use ccr_core::eval::{
    eval_mask, evaluate, iou, predict_dataset, rank_proposals, read_predictions, write_predictions, EvalReport, Prediction,
};
use ccr_core::model::Model;
use ccr_core::trainer::{load_checkpoint, train as run_training, RunOutputs, StepReport, TrainPair, TrainState};
use ccr_core::{CcrError, DatasetRecord, VideoFeatures, Vocab};
use serde::Serialize;

type Dataset = Vec<(DatasetRecord, VideoFeatures)>;

fn create_dir(path: &Path) -> Result<(), CcrError> {
    fs::create_dir_all(path).map_err(|e| CcrError::io(path, e))
}

fn write_file(path: &Path, body: &str) -> Result<(), CcrError> {
    fs::write(path, body).map_err(|e| CcrError::io(path, e))
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocab, CcrError> {
    Vocab::load(&cfg.vocab_path(), DEFAULT_STOPWORDS)
}

fn load_data(cfg: &RunConfig) -> Result<(Vocab, Dataset), CcrError> {
    let vocab = load_vocab(cfg)?;
    let data = load_dataset(&cfg.manifest, &vocab)?;
    if data.is_empty() {
        return Err(CcrError::Data(format!("{} lists no records", cfg.manifest.display())));
    }
    Ok((vocab, data))
}

/// FNV-1a over every record's query, span and feature bytes.
pub fn dataset_hash(data: &Dataset) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
        }
    };
    for (r, v) in data {
        feed(r.video_id.as_bytes());
        feed(r.query.text.as_bytes());
        feed(&r.duration_s.to_le_bytes());
        if let Some([s, e]) = r.gt_span {
            feed(&s.to_le_bytes());
            feed(&e.to_le_bytes());
        }
        feed(&encode_fmat(&v.frames));
    }
    format!("{h:016x}")
}

/// Writes the synthetic corpus next to the configured manifest. The
/// manifest's directory must already exist.
pub fn synth(cfg: &RunConfig) -> Result<PathBuf, CcrError> {
    let dir = cfg
        .manifest
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    if !dir.is_dir() {
        return Err(CcrError::io(
            &dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        ));
    }
    let ds = synth_dataset(&cfg.synth_config())?;
    create_dir(&dir.join("features"))?;
    let mut entries = Vec::with_capacity(ds.pairs.len());
    for (r, v) in &ds.pairs {
        write_features(&dir.join(&r.feature_path), v)?;
        entries.push(ManifestEntry {
            video_id: r.video_id.clone(),
            feature_path: r.feature_path.to_string_lossy().into_owned(),
            query: r.query.text.clone(),
            gt_span: r.gt_span,
            duration_s: r.duration_s,
        });
    }
    write_manifest(&cfg.manifest, &entries)?;
    ds.vocab.save(&cfg.vocab_path())?;
    Ok(cfg.manifest.clone())
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub reports: Vec<StepReport>,
    pub data_hash: String,
}

const CURVE_HEADER: &str = "step,epoch,total,l_c,l_q,l_div,l_kl,lc_p,lc_r,lc_n1,lc_n2,mu,grad_norm_main,grad_norm_mu";

fn curve_row(r: &StepReport) -> String {
    let l = &r.losses;
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.step,
        r.epoch,
        l.total,
        l.l_c,
        l.l_q,
        l.l_div,
        l.l_kl,
        l.lc_p,
        l.lc_r,
        l.lc_n1,
        l.lc_n2,
        r.mu,
        r.grad_norm_main,
        r.grad_norm_mu
    )
}

fn open_append(path: &Path, fresh: bool) -> Result<fs::File, CcrError> {
    fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(path)
        .map_err(|e| CcrError::io(path, e))
}

/// Trains to the configured step budget. Writes `config.txt`,
/// `train_log.jsonl`, `loss_curve.csv` and the checkpoint into `out_dir`;
/// with `resume` set and a checkpoint present, continues it and appends.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome, CcrError> {
    let (vocab, data) = load_data(cfg)?;
    let data_hash = dataset_hash(&data);
    let feature_dim = data[0].1.feature_dim();
    let model_cfg = cfg.model_config(feature_dim, vocab.len());
    let ckpt = cfg.checkpoint_path();
    let resumed = cfg.resume && ckpt.exists();
    let mut state = if resumed {
        let (state, _) = load_checkpoint(&ckpt)?;
        if state.model.config != model_cfg {
            return Err(CcrError::Config(format!(
                "{} was trained with a different model configuration",
                ckpt.display()
            )));
        }
        state
    } else {
        TrainState::new(Model::new(model_cfg, cfg.seed)?)
    };
    create_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join("config.txt"), &cfg.to_text())?;
    let pairs: Vec<TrainPair> = data
        .into_iter()
        .map(|(r, v)| TrainPair {
            video: v,
            query: r.query,
        })
        .collect();

    let log_path = cfg.out_dir.join("train_log.jsonl");
    let mut log = BufWriter::new(open_append(&log_path, !resumed)?);
    let train_cfg = cfg.train_config();
    let result = {
        let mut out = RunOutputs {
            log: Some(&mut log),
            checkpoint: Some(ckpt),
            dump: Some(cfg.out_dir.join("dump")),
        };
        run_training(&mut state, &pairs, &vocab, &train_cfg, &mut out)
    };
    log.flush().map_err(|e| CcrError::io(&log_path, e))?;
    let reports = result?;

    let curve_path = cfg.out_dir.join("loss_curve.csv");
    let fresh = !resumed || !curve_path.exists();
    let mut curve = BufWriter::new(open_append(&curve_path, fresh)?);
    let mut body = String::new();
    if fresh {
        body.push_str(CURVE_HEADER);
        body.push('\n');
    }
    for r in &reports {
        body.push_str(&curve_row(r));
        body.push('\n');
    }
    curve
        .write_all(body.as_bytes())
        .and_then(|_| curve.flush())
        .map_err(|e| CcrError::io(&curve_path, e))?;
    Ok(TrainOutcome {
        state,
        reports,
        data_hash,
    })
}

fn ious_csv(preds: &[Prediction], data: &Dataset) -> Result<String, CcrError> {
    let mut out = String::from("record,video_id,rank,start_s,end_s,iou\n");
    for (i, (p, (r, _))) in preds.iter().zip(data).enumerate() {
        let Some(gt) = r.gt_span else { continue };
        for (k, seg) in p.segments.iter().enumerate() {
            let _ = writeln!(out, "{i},{},{},{},{},{}", r.video_id, k + 1, seg[0], seg[1], iou(seg, &gt)?);
        }
    }
    Ok(out)
}

/// Scores `predictions` against the manifest, or runs the checkpoint to
/// produce them first. Writes `report.txt`, `report.json` and `ious.csv`
/// (plus `predictions.jsonl` when the model ran) into `out_dir`.
pub fn eval(cfg: &RunConfig, predictions: Option<&Path>) -> Result<EvalReport, CcrError> {
    let (vocab, data) = load_data(cfg)?;
    create_dir(&cfg.out_dir)?;
    let (preds, report) = match predictions {
        Some(path) => {
            let preds = read_predictions(path)?;
            if preds.len() != data.len() {
                return Err(CcrError::Data(format!(
                    "{} holds {} predictions for {} records",
                    path.display(),
                    preds.len(),
                    data.len()
                )));
            }
            for (p, (r, _)) in preds.iter().zip(&data) {
                if p.video_id != r.video_id {
                    return Err(CcrError::Data(format!(
                        "prediction for {} where the manifest lists {}",
                        p.video_id, r.video_id
                    )));
                }
            }
            let ranked: Vec<_> = preds.iter().map(|p| p.segments.clone()).collect();
            let gts: Vec<_> = data.iter().map(|(r, _)| r.gt_span).collect();
            let report = evaluate(&ranked, &gts)?;
            (preds, report)
        }
        None => {
            let (state, _) = load_checkpoint(&cfg.checkpoint_path())?;
            let (preds, report) = predict_dataset(&state.model, &data, &vocab, cfg.train.p_mask, cfg.gamma, cfg.seed)?;
            write_predictions(&cfg.out_dir.join("predictions.jsonl"), &preds)?;
            (preds, report)
        }
    };
    write_file(&cfg.out_dir.join("report.txt"), &report.table())?;
    write_file(&cfg.out_dir.join("report.json"), &report.to_json())?;
    write_file(&cfg.out_dir.join("ious.csv"), &ious_csv(&preds, &data)?)?;
    Ok(report)
}

/// Ranks moments of one feature file for one query with the checkpoint.
pub fn localize(cfg: &RunConfig, features: &Path, query: &str, duration_s: Option<f64>) -> Result<Prediction, CcrError> {
    let vocab = load_vocab(cfg)?;
    let (state, _) = load_checkpoint(&cfg.checkpoint_path())?;
    let mut video = load_features(features)?;
    if let Some(d) = duration_s {
        video = video.with_duration(d)?;
    }
    let q = eval_mask(&video.video_id, &vocab.encode(query)?, cfg.train.p_mask, &vocab, cfg.seed)?;
    rank_proposals(&state.model, &video, &q, cfg.gamma)
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationCell {
    pub strategy: CounterfactualStrategy,
    pub aggregator: AggregatorKind,
    pub out_dir: PathBuf,
    pub data_hash: String,
    pub final_loss: Option<f64>,
    pub report: EvalReport,
}

pub fn cell_config(base: &RunConfig, strategy: CounterfactualStrategy, aggregator: AggregatorKind) -> RunConfig {
    let mut cfg = base.clone();
    cfg.ccr.strategy = strategy;
    cfg.ccr.aggregator = aggregator;
    cfg.out_dir = base.out_dir.join(format!("{strategy}__{aggregator}"));
    cfg.checkpoint = None;
    cfg.resume = false;
    cfg
}

/// Trains and evaluates every strategy and aggregator pair from the same
/// base configuration and seed. Writes `ablation.txt`, `ablation.json` and
/// `ablation.csv` into `out_dir`.
pub fn ablate(base: &RunConfig) -> Result<Vec<AblationCell>, CcrError> {
    let mut grid = Vec::new();
    for strategy in CounterfactualStrategy::ALL {
        for aggregator in AggregatorKind::ALL {
            let cfg = cell_config(base, strategy, aggregator);
            let outcome = train(&cfg)?;
            let report = eval(&cfg, None)?;
            grid.push(AblationCell {
                strategy,
                aggregator,
                out_dir: cfg.out_dir.clone(),
                data_hash: outcome.data_hash,
                final_loss: outcome.reports.last().map(|r| r.losses.total),
                report,
            });
        }
    }
    write_file(&base.out_dir.join("ablation.txt"), &ablation_table(&grid))?;
    write_file(
        &base.out_dir.join("ablation.json"),
        &serde_json::to_string_pretty(&grid).expect("grid serializes"),
    )?;
    write_file(&base.out_dir.join("ablation.csv"), &ablation_csv(&grid))?;
    Ok(grid)
}

fn metric_columns() -> Vec<(String, Box<dyn Fn(&EvalReport) -> f64>)> {
    let mut cols: Vec<(String, Box<dyn Fn(&EvalReport) -> f64>)> = Vec::new();
    for rank in [1usize, 5] {
        for t in [0.3, 0.5, 0.7] {
            cols.push((
                format!("R@{rank},IoU={t}"),
                Box::new(move |r: &EvalReport| r.recall_at(rank, t).unwrap_or(f64::NAN)),
            ));
        }
        cols.push((
            format!("R@{rank},mIoU"),
            Box::new(move |r: &EvalReport| r.miou_at(rank).unwrap_or(f64::NAN)),
        ));
    }
    cols
}

/// One row per cell, metrics in percent.
pub fn ablation_table(grid: &[AblationCell]) -> String {
    let cols = metric_columns();
    let mut out = format!("{:<16}{:<16}", "strategy", "aggregator");
    for (name, _) in &cols {
        let _ = write!(out, "{name:>14}");
    }
    out.push('\n');
    for c in grid {
        let _ = write!(out, "{:<16}{:<16}", c.strategy.as_str(), c.aggregator.as_str());
        for (_, f) in &cols {
            let _ = write!(out, "{:>14.2}", f(&c.report) * 100.0);
        }
        out.push('\n');
    }
    out
}

pub fn ablation_csv(grid: &[AblationCell]) -> String {
    let cols = metric_columns();
    let mut out = String::from("strategy,aggregator,data_hash");
    for (name, _) in &cols {
        let _ = write!(out, ",{name}");
    }
    out.push('\n');
    for c in grid {
        let _ = write!(out, "{},{},{}", c.strategy, c.aggregator, c.data_hash);
        for (_, f) in &cols {
            let _ = write!(out, ",{}", f(&c.report));
        }
        out.push('\n');
    }
    out
}
