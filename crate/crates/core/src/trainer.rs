//! Two-group training loop, checkpoints and the per-step log.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Mat, ParamStore};
use crate::data::{mask_query, MaskedQuery, TokenizedQuery, VideoFeatures, Vocab};
use crate::error::{CcrError, Result};
use crate::losses::LossBundle;
use crate::model::{Model, ModelConfig};
use crate::pipeline::{batch_objective, IsolationProbe, ObjectiveConfig, PairSample};
use crate::rng::{rng_for, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Learning rate of the fusion module, projection, embeddings and any
    /// learned aggregator.
    pub lr_main: f64,
    /// Learning rate of `mu`.
    pub lr_mu: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub p_mask: f64,
    pub objective: ObjectiveConfig,
    /// Per-group global gradient-norm bound.
    pub clip_norm: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_main: 4e-4,
            lr_mu: 1e-3,
            batch_size: 8,
            steps: 2000,
            p_mask: 1.0 / 3.0,
            objective: ObjectiveConfig::default(),
            clip_norm: 5.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if !(self.lr_main >= 0.0 && self.lr_mu >= 0.0 && self.lr_main.is_finite() && self.lr_mu.is_finite()) {
            return Err(CcrError::Config("learning rates must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(CcrError::Config("batch_size must be positive".into()));
        }
        if !(self.p_mask > 0.0 && self.p_mask <= 1.0) {
            return Err(CcrError::Config(format!("p_mask {} outside (0, 1]", self.p_mask)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(CcrError::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainPair {
    pub video: VideoFeatures,
    pub query: TokenizedQuery,
}

/// Adam moments for every parameter slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Mat> = params.iter().map(|(_, _, m)| Mat::zeros(m.rows(), m.cols())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of the given slots at time step `t` (1-based).
    fn update(&mut self, params: &mut ParamStore, grads: &Gradients, slots: &[usize], lr: f64, clip: f64, t: u64) -> f64 {
        let norm = slots
            .iter()
            .filter_map(|&s| grads.get(s))
            .map(|g| g.frobenius_sq())
            .sum::<f64>()
            .sqrt();
        let scale = if norm > clip { clip / norm } else { 1.0 };
        let c1 = 1.0 - self.beta1.powi(t as i32);
        let c2 = 1.0 - self.beta2.powi(t as i32);
        for &s in slots {
            let Some(g) = grads.get(s) else { continue };
            let (m, v) = (&mut self.m[s], &mut self.v[s]);
            let p = params.value_mut(s);
            for i in 0..g.len() {
                let gi = g.data()[i] * scale;
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                p.data_mut()[i] -= lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
            }
        }
        norm
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    /// Completed steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let adam = Adam::new(&model.params);
        Self { model, adam, step: 0 }
    }
}

/// `(epoch, pair index)` for each element of the batch at `step`.
///
/// Epochs walk a seed-dependent permutation of the pairs; batches run
/// across epoch boundaries.
pub fn batch_schedule(seed: u64, step: u64, batch_size: usize, n: usize) -> Vec<(u64, usize)> {
    use rand::seq::SliceRandom;
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch_size as u64)
        .map(|i| {
            let pos = step * batch_size as u64 + i;
            let epoch = pos / n as u64;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng_for(&[seed, stream::SHUFFLE, epoch]));
                cached = Some((epoch, perm));
            }
            let perm = &cached.as_ref().expect("filled above").1;
            (epoch, perm[(pos % n as u64) as usize])
        })
        .collect()
}

/// The mask drawn for a pair in a given epoch.
pub fn training_mask(seed: u64, epoch: u64, idx: usize, q: &TokenizedQuery, p_mask: f64, vocab: &Vocab) -> Result<MaskedQuery> {
    mask_query(q, p_mask, vocab, &mut rng_for(&[seed, stream::MASK, epoch, idx as u64]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub epoch: u64,
    #[serde(flatten)]
    pub losses: LossBundle,
    pub mu: f64,
    pub grad_norm_main: f64,
    pub grad_norm_mu: f64,
    #[serde(skip)]
    pub probe: IsolationProbe,
}

/// One optimisation step: main group from the main objective, then `mu`
/// from the alignment objective. The state is untouched on error.
pub fn train_step(state: &mut TrainState, data: &[TrainPair], vocab: &Vocab, cfg: &TrainConfig) -> Result<StepReport> {
    if data.is_empty() {
        return Err(CcrError::Data("no training pairs".into()));
    }
    let step = state.step;
    let schedule = batch_schedule(cfg.seed, step, cfg.batch_size.min(data.len()), data.len());
    let masked = schedule
        .iter()
        .map(|&(epoch, idx)| training_mask(cfg.seed, epoch, idx, &data[idx].query, cfg.p_mask, vocab))
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<PairSample> = schedule
        .iter()
        .zip(&masked)
        .map(|(&(_, idx), q)| PairSample { video: &data[idx].video, query: q })
        .collect();
    let obj = batch_objective(
        &state.model,
        &samples,
        &cfg.objective,
        rng_for(&[cfg.seed, stream::DROPOUT, step]),
        &mut rng_for(&[cfg.seed, stream::COUNTERFACTUAL, step]),
    )?;
    if !obj.losses.is_finite() {
        return Err(CcrError::NonFinite {
            step,
            losses: Box::new(obj.losses),
        });
    }
    let t = step + 1;
    let main_slots = state.model.main_slots();
    let mu_slot = [state.model.mu_slot()];
    let grad_norm_main = state
        .adam
        .update(&mut state.model.params, &obj.main, &main_slots, cfg.lr_main, cfg.clip_norm, t);
    let grad_norm_mu = state
        .adam
        .update(&mut state.model.params, &obj.kl, &mu_slot, cfg.lr_mu, cfg.clip_norm, t);
    state.step = t;
    Ok(StepReport {
        step,
        epoch: schedule[0].0,
        losses: obj.losses,
        mu: state.model.mu(),
        grad_norm_main,
        grad_norm_mu,
        probe: obj.probe,
    })
}

/// Where a run writes its artifacts. Every field is optional.
#[derive(Default)]
pub struct RunOutputs<'a> {
    /// One JSON object per step.
    pub log: Option<&'a mut dyn Write>,
    pub checkpoint: Option<PathBuf>,
    /// Written when a non-finite loss aborts the run.
    pub dump: Option<PathBuf>,
}

/// Steps until `cfg.steps` are complete.
pub fn train(
    state: &mut TrainState,
    data: &[TrainPair],
    vocab: &Vocab,
    cfg: &TrainConfig,
    out: &mut RunOutputs,
) -> Result<Vec<StepReport>> {
    cfg.validate()?;
    let mut reports = Vec::new();
    while state.step < cfg.steps {
        let report = match train_step(state, data, vocab, cfg) {
            Ok(r) => r,
            Err(e @ CcrError::NonFinite { .. }) => {
                if let Some(path) = &out.dump {
                    write_dump(path, state, cfg, &e)?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if let Some(log) = out.log.as_mut() {
            let line = serde_json::to_string(&report).expect("report serializes");
            writeln!(log, "{line}").map_err(|e| CcrError::io("<log>", e))?;
        }
        if let Some(path) = &out.checkpoint {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
                save_checkpoint(state, cfg, path)?;
            }
        }
        reports.push(report);
    }
    if let Some(path) = &out.checkpoint {
        save_checkpoint(state, cfg, path)?;
    }
    Ok(reports)
}

fn write_dump(path: &Path, state: &TrainState, cfg: &TrainConfig, err: &CcrError) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CcrError::io(path, e))?;
    save_checkpoint(state, cfg, &path.join("state.ckpt"))?;
    let info = serde_json::json!({
        "error": err.to_string(),
        "step": state.step,
        "losses": match err {
            CcrError::NonFinite { losses, .. } => serde_json::to_value(losses).ok(),
            _ => None,
        },
        "params": state.model.params.iter().map(|(_, name, m)| {
            serde_json::json!({
                "name": name,
                "finite": m.is_finite(),
                "max_abs": m.data().iter().fold(0.0f64, |a, v| a.max(v.abs())),
            })
        }).collect::<Vec<_>>(),
    });
    let file = path.join("diagnostics.json");
    fs::write(&file, serde_json::to_string_pretty(&info).expect("json")).map_err(|e| CcrError::io(&file, e))
}

const CKPT_MAGIC: &[u8; 4] = b"CCRC";
pub const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
    params: Vec<(String, usize, usize)>,
    adam: (f64, f64, f64),
}

/// Magic, version, JSON header length and header, then for every parameter
/// its values and both Adam moments as little-endian `f64`.
pub fn encode_checkpoint(state: &TrainState, cfg: &TrainConfig) -> Vec<u8> {
    let header = CheckpointHeader {
        model: state.model.config.clone(),
        train: cfg.clone(),
        step: state.step,
        params: state
            .model
            .params
            .iter()
            .map(|(_, n, m)| (n.to_string(), m.rows(), m.cols()))
            .collect(),
        adam: (state.adam.beta1, state.adam.beta2, state.adam.eps),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (slot, _, m) in state.model.params.iter() {
        for mat in [m, &state.adam.m[slot], &state.adam.v[slot]] {
            for v in mat.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(TrainState, TrainConfig)> {
    let take = |at: usize, n: usize| {
        bytes
            .get(at..at + n)
            .ok_or_else(|| CcrError::Truncated(format!("checkpoint ends before byte {}", at + n)))
    };
    if take(0, 4)? != CKPT_MAGIC {
        return Err(CcrError::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(4, 4)?.try_into().expect("4 bytes"));
    if version != CKPT_VERSION {
        return Err(CcrError::Version {
            found: version,
            expected: CKPT_VERSION,
        });
    }
    let len = u64::from_le_bytes(take(8, 8)?.try_into().expect("8 bytes")) as usize;
    let header: CheckpointHeader = serde_json::from_slice(take(16, len)?)
        .map_err(|e| CcrError::Format(format!("checkpoint header: {e}")))?;
    let mut at = 16 + len;
    let mut read_mat = |rows: usize, cols: usize| -> Result<Mat> {
        let raw = take(at, rows * cols * 8)?;
        at += rows * cols * 8;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Mat::from_vec(rows, cols, data)
    };
    let mut params = ParamStore::new();
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for (name, rows, cols) in &header.params {
        params.insert(name.clone(), read_mat(*rows, *cols)?);
        m.push(read_mat(*rows, *cols)?);
        v.push(read_mat(*rows, *cols)?);
    }
    if at != bytes.len() {
        return Err(CcrError::Format(format!("{} trailing bytes in checkpoint", bytes.len() - at)));
    }
    // the parameter set must be exactly what the configuration implies
    let fresh = Model::new(header.model.clone(), 0)?;
    let expected: Vec<(&str, (usize, usize))> = fresh.params.iter().map(|(_, n, m)| (n, m.shape())).collect();
    let found: Vec<(&str, (usize, usize))> = params.iter().map(|(_, n, m)| (n, m.shape())).collect();
    if expected != found {
        return Err(CcrError::Format("checkpoint parameters do not match its configuration".into()));
    }
    let (beta1, beta2, eps) = header.adam;
    let state = TrainState {
        model: Model {
            config: header.model,
            params,
        },
        adam: Adam { beta1, beta2, eps, m, v },
        step: header.step,
    };
    Ok((state, header.train))
}

pub fn save_checkpoint(state: &TrainState, cfg: &TrainConfig, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CcrError::io(dir, e))?;
    }
    fs::write(path, encode_checkpoint(state, cfg)).map_err(|e| CcrError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainState, TrainConfig)> {
    decode_checkpoint(&fs::read(path).map_err(|e| CcrError::io(path, e))?)
}
