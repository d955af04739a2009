//! Minibatch training with rectifier dropout, PLCC loss and Adam.

use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::eval::{evaluate_run, predict_clips, MetricReport, ScoreMetrics, SplitPlan};
use crate::media::{load_clip, CropMode, DatasetManifest};
use crate::nn::{step_decay, Adam, AdamConfig, Gradients, Graph, NodeId, Scalar, Tensor};
use crate::rectify::{base_crops, ClipInputs, DropoutDraw, ModelConfig, VqaModel};

/// Learning rate used with large pretrained backbones.
pub const PRETRAINED_LR: f64 = 1e-5;
/// Variance floor inside the PLCC loss normalization.
pub const PLCC_LOSS_EPS: f64 = 1e-8;
const MAX_RESAMPLES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub p_s: f64,
    pub p_t: f64,
    pub seed: u64,
    /// Never evaluate the rectifiers and draw no dropout decisions.
    pub base_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr: 1e-4,
            decay: 0.9,
            decay_every: 2,
            epochs: 30,
            p_s: 0.2,
            p_t: 0.2,
            seed: 0,
            base_only: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(invalid!("batch_size must be at least 2, got {}", self.batch_size));
        }
        for (name, p) in [("p_s", self.p_s), ("p_t", self.p_t)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid!("lr must be finite and non-negative, got {}", self.lr));
        }
        if self.epochs == 0 {
            return Err(invalid!("epochs must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        step_decay(self.lr, self.decay, self.decay_every, epoch)
    }
}

/// Clips with their preprocessing done once, plus labels.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub name: String,
    pub clips: Vec<ClipInputs>,
    pub mos: Vec<f64>,
    pub scene_ids: Vec<String>,
    /// Hex SHA-256 of the manifest file, empty for in-memory datasets.
    pub manifest_sha256: String,
}

impl PreparedDataset {
    pub fn load(manifest_path: &Path, config: &ModelConfig) -> Result<Self> {
        let bytes = std::fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest = DatasetManifest::read(manifest_path)?;
        let clips = manifest
            .rows
            .par_iter()
            .map(|row| ClipInputs::prepare(&load_clip(manifest.clip_dir(row))?, config))
            .collect::<Result<Vec<_>>>()?;
        let name = manifest_path
            .parent()
            .and_then(|p| p.file_name())
            .map_or_else(|| "dataset".to_string(), |n| n.to_string_lossy().into_owned());
        Ok(Self {
            name,
            clips,
            mos: manifest.rows.iter().map(|r| r.mos).collect(),
            scene_ids: manifest.rows.iter().map(|r| r.scene_id.clone()).collect(),
            manifest_sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Indices of every clip whose scene is listed, in dataset order.
    pub fn indices_in(&self, scenes: &[String]) -> Vec<usize> {
        (0..self.len()).filter(|&i| scenes.contains(&self.scene_ids[i])).collect()
    }
}

/// Appends `(1 - PLCC(pred, mos)) / 2` to the graph; `pred` is a vector node.
pub fn plcc_loss_nodes<T: Scalar>(g: &mut Graph<T>, pred: NodeId, mos: &[f64]) -> Result<NodeId> {
    let n = g.value(pred).len();
    if n != mos.len() || n < 2 {
        return Err(invalid!("plcc loss needs equal lengths of at least 2, got {n} and {}", mos.len()));
    }
    let mean_m = mos.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = mos.iter().map(|m| m - mean_m).collect();
    let var_m = centered.iter().map(|c| c * c).sum::<f64>() / n as f64;
    if var_m == 0.0 {
        return Err(invalid!("plcc loss is undefined for constant labels"));
    }
    let mc = g.constant(Tensor::from_vec(centered.iter().map(|&c| T::lit(c)).collect()));
    let mean_p = g.mean(pred);
    let pc = g.sub(pred, mean_p)?;
    let prod = g.mul(pc, mc)?;
    let cov = g.mean(prod);
    let sq = g.mul(pc, pc)?;
    let var_p = g.mean(sq);
    let var_p = g.shift(var_p, T::lit(PLCC_LOSS_EPS));
    let std_p = g.sqrt(var_p);
    let denom = g.scale(std_p, T::lit((var_m + PLCC_LOSS_EPS).sqrt()));
    let r = g.div(cov, denom)?;
    let neg = g.scale(r, T::lit(-0.5));
    Ok(g.shift(neg, T::lit(0.5)))
}

/// Scalar loss value and its gradient with respect to each prediction.
pub fn plcc_loss_with_grad(pred: &[f64], mos: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::<f64>::new();
    let p = g.leaf(Tensor::from_vec(pred.to_vec()), true);
    let loss = plcc_loss_nodes(&mut g, p, mos)?;
    g.backward(loss)?;
    let grad = g.grad(p).expect("leaf requires grad").data().to_vec();
    Ok((g.scalar_value(loss), grad))
}

pub fn plcc_loss(pred: &[f64], mos: &[f64]) -> Result<f64> {
    Ok(plcc_loss_with_grad(pred, mos)?.0)
}

/// One row of `log.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_srcc: [f64; 4],
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,val_srcc_q_b,val_srcc_q_s,val_srcc_q_t,val_srcc_q_st";

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for e in log {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            e.epoch, e.lr, e.train_loss, e.val_srcc[0], e.val_srcc[1], e.val_srcc[2], e.val_srcc[3]
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation SRCC of `q_st`.
    pub model: VqaModel<f32>,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    /// Batches redrawn because their labels were all equal.
    pub resampled_batches: usize,
}

struct Streams {
    shuffle: ChaCha8Rng,
    crop: ChaCha8Rng,
    dropout: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |s| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        Self {
            shuffle: stream(1),
            crop: stream(2),
            dropout: stream(3),
        }
    }
}

fn constant_labels(batch: &[usize], mos: &[f64]) -> bool {
    batch.iter().all(|&i| mos[i] == mos[batch[0]])
}

/// Runs one optimizer step on `batch` and returns the batch loss.
fn train_step(
    model: &mut VqaModel<f32>,
    adam: &mut Adam,
    data: &PreparedDataset,
    batch: &[usize],
    draw: DropoutDraw,
    crops: &[Vec<(usize, usize)>],
    lr: f64,
) -> Result<f64> {
    let base_size = model.config.base_size;
    let (arch, params) = (&model.arch, &model.params);
    let forwards = batch
        .par_iter()
        .zip(crops)
        .map(|(&i, crop)| {
            let mut g = Graph::<f32>::new();
            let nodes = arch.clip_nodes(&mut g, params, &data.clips[i], crop, base_size, draw.active_s, draw.active_t)?;
            Ok((g, nodes.q_st))
        })
        .collect::<Result<Vec<_>>>()?;
    let preds: Vec<f64> = forwards.iter().map(|(g, q)| g.scalar_value(*q) as f64).collect();
    let mos: Vec<f64> = batch.iter().map(|&i| data.mos[i]).collect();
    let (loss, dq) = plcc_loss_with_grad(&preds, &mos)?;
    let ids = || batch.iter().map(|&i| data.clips[i].clip_id.as_str()).collect::<Vec<_>>().join(", ");
    if !loss.is_finite() || dq.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numeric(format!("non-finite loss on batch with clips [{}]", ids())));
    }
    let per_clip = forwards
        .into_par_iter()
        .zip(dq)
        .map(|((mut g, q), d)| {
            g.backward_seeded(&[(q, Tensor::scalar(d as f32))])?;
            Ok(g.param_grads())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grads = Gradients::new();
    for g in &per_clip {
        grads.accumulate(g)?;
    }
    adam.step(&mut model.params, &grads, lr)
        .map_err(|e| Error::Numeric(format!("{e} (batch clips [{}])", ids())))?;
    Ok(loss)
}

/// Validation SRCC of the four scores.
pub fn validation_srcc(model: &VqaModel<f32>, data: &PreparedDataset, idx: &[usize]) -> Result<[f64; 4]> {
    let quads = predict_clips(model, data, idx)?;
    let mos: Vec<f64> = idx.iter().map(|&i| data.mos[i]).collect();
    Ok(ScoreMetrics::compute(&quads, &mos)?.srcc)
}

/// Trains on `train_idx`, selecting the epoch with the best validation SRCC of `q_st`.
pub fn train_epochs(
    mut model: VqaModel<f32>,
    data: &PreparedDataset,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_idx.len() < 2 || val_idx.len() < 2 {
        return Err(invalid!(
            "training needs at least 2 train and 2 validation clips, got {} and {}",
            train_idx.len(),
            val_idx.len()
        ));
    }
    let mut rng = Streams::new(cfg.seed);
    let mut adam = Adam::new(AdamConfig::default());
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, VqaModel<f32>)> = None;
    let mut resampled = 0;
    let mut order = train_idx.to_vec();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng.shuffle);
        let (mut loss_sum, mut batches) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut batch = chunk.to_vec();
            let mut tries = 0;
            while constant_labels(&batch, &data.mos) {
                tries += 1;
                if tries > MAX_RESAMPLES {
                    return Err(invalid!("every sampled batch has constant labels; cannot compute PLCC loss"));
                }
                warn!("batch with constant labels; resampling");
                resampled += 1;
                batch = (0..chunk.len())
                    .map(|_| train_idx[rng.shuffle.gen_range(0..train_idx.len())])
                    .collect();
            }
            let draw = if cfg.base_only {
                DropoutDraw::new(0.0, 0.0, 1.0, 1.0)
            } else {
                DropoutDraw::sample(&mut rng.dropout, cfg.p_s, cfg.p_t)
            };
            let size = model.config.base_size;
            let crops: Vec<_> = batch
                .iter()
                .map(|&i| base_crops(&data.clips[i], size, CropMode::Random, &mut rng.crop))
                .collect();
            loss_sum += train_step(&mut model, &mut adam, data, &batch, draw, &crops, lr)?;
            batches += 1;
        }
        let val_srcc = validation_srcc(&model, data, val_idx)?;
        let train_loss = if batches > 0 { loss_sum / batches as f64 } else { f64::NAN };
        info!(
            "epoch {epoch}: lr {lr:.3e} loss {train_loss:.4} val srcc q_b {:.3} q_s {:.3} q_t {:.3} q_st {:.3}",
            val_srcc[0], val_srcc[1], val_srcc[2], val_srcc[3]
        );
        if best.as_ref().map_or(true, |(s, _, _)| val_srcc[3] > *s) {
            best = Some((val_srcc[3], epoch, model.clone()));
        }
        log.push(EpochLog {
            epoch,
            lr,
            train_loss,
            val_srcc,
        });
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        best_epoch,
        log,
        resampled_batches: resampled,
    })
}

/// Everything needed to re-run one training job.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub manifest_sha256: String,
    pub plan: SplitPlan,
    pub best_epoch: usize,
}

/// Writes `run.json`, `log.csv` and `best.mvqw` into `dir`.
pub fn write_run_artifacts(dir: &Path, record: &RunRecord, outcome: &TrainOutcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let run = serde_json::to_string_pretty(record).map_err(|e| Error::Format(e.to_string()))?;
    let p = dir.join("run.json");
    std::fs::write(&p, run).map_err(|e| Error::io(&p, e))?;
    let p = dir.join("log.csv");
    std::fs::write(&p, log_csv(&outcome.log)).map_err(|e| Error::io(&p, e))?;
    outcome.model.save(&dir.join("best.mvqw"))
}

/// Seed for repeat `r`: the run seed mixed with the repeat index.
pub fn repeat_seed(seed: u64, repeat: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(repeat as u64 + 1)
}

/// Result of training one model per split plan and testing each.
#[derive(Debug, Clone)]
pub struct ProtocolResult {
    pub outcomes: Vec<TrainOutcome>,
    pub report: MetricReport,
}

/// Trains a fresh model per plan and evaluates each on its test scenes.
/// With `out_dir`, artifacts go to `out_dir/repeat_XX/`.
pub fn run_protocol(
    data: &PreparedDataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    plans: &[SplitPlan],
    out_dir: Option<&Path>,
) -> Result<ProtocolResult> {
    let mut outcomes = Vec::with_capacity(plans.len());
    for plan in plans {
        let seed = repeat_seed(train_cfg.seed, plan.repeat_index);
        let cfg = TrainConfig {
            seed,
            ..train_cfg.clone()
        };
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        let model = VqaModel::new(model_cfg.clone(), &mut init_rng)?;
        let train_idx = data.indices_in(&plan.train);
        let val_idx = data.indices_in(&plan.val);
        info!("repeat {}: {} train / {} val clips", plan.repeat_index, train_idx.len(), val_idx.len());
        let outcome = train_epochs(model, data, &train_idx, &val_idx, &cfg)?;
        if let Some(dir) = out_dir {
            let record = RunRecord {
                model: model_cfg.clone(),
                train: cfg.clone(),
                seed,
                manifest_sha256: data.manifest_sha256.clone(),
                plan: plan.clone(),
                best_epoch: outcome.best_epoch,
            };
            write_run_artifacts(&repeat_dir(dir, plan.repeat_index), &record, &outcome)?;
        }
        outcomes.push(outcome);
    }
    let models: Vec<_> = outcomes.iter().map(|o| o.model.clone()).collect();
    let report = evaluate_run(&models, data, plans)?;
    Ok(ProtocolResult { outcomes, report })
}

pub fn repeat_dir(root: &Path, repeat: usize) -> PathBuf {
    root.join(format!("repeat_{repeat:02}"))
}
