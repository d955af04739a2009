//! Correlation metrics, content-independent split plans and metric reports.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rectify::{QualityQuad, VqaModel};
use crate::train::PreparedDataset;

pub const DEFAULT_REPEATS: usize = 10;
pub const TRAIN_FRACTION: f64 = 0.6;
pub const VAL_FRACTION: f64 = 0.2;
pub const TEST_FRACTION: f64 = 0.2;

/// A correlation value and whether it was forced to 0 by a constant input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub value: f64,
    pub degenerate: bool,
}

fn check_pair(pred: &[f64], mos: &[f64]) -> Result<()> {
    if pred.len() != mos.len() {
        return Err(invalid!("correlation of vectors with lengths {} and {}", pred.len(), mos.len()));
    }
    if pred.len() < 2 {
        return Err(invalid!("correlation needs at least 2 points, got {}", pred.len()));
    }
    Ok(())
}

/// Centered, normalized dot product. A constant input yields 0, flagged.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Correlation {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Correlation {
        value: (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn srcc_flagged(pred: &[f64], mos: &[f64]) -> Result<Correlation> {
    check_pair(pred, mos)?;
    pearson(&average_ranks(pred), &average_ranks(mos))
}

pub fn plcc_flagged(pred: &[f64], mos: &[f64]) -> Result<Correlation> {
    pearson(pred, mos)
}

/// Spearman rank correlation; 0 (with a warning) when either side has no rank variance.
pub fn srcc(pred: &[f64], mos: &[f64]) -> Result<f64> {
    let c = srcc_flagged(pred, mos)?;
    if c.degenerate {
        warn!("srcc of a constant vector is undefined; reporting 0");
    }
    Ok(c.value)
}

/// Pearson linear correlation on raw predictions; 0 (with a warning) for constant inputs.
pub fn plcc(pred: &[f64], mos: &[f64]) -> Result<f64> {
    let c = plcc_flagged(pred, mos)?;
    if c.degenerate {
        warn!("plcc of a constant vector is undefined; reporting 0");
    }
    Ok(c.value)
}

/// One repeat's scene partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub repeat_index: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitPlan {
    pub fn partition_of(&self, scene: &str) -> Option<Partition> {
        let has = |v: &[String]| v.iter().any(|s| s == scene);
        if has(&self.train) {
            Some(Partition::Train)
        } else if has(&self.val) {
            Some(Partition::Val)
        } else if has(&self.test) {
            Some(Partition::Test)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Train,
    Val,
    Test,
}

/// Content-independent train/val/test plans over the distinct scene ids.
///
/// Validation and test each get `floor(0.2 n)` scenes; the remainder trains.
pub fn make_splits(scene_ids: &[String], seed: u64, repeats: usize) -> Result<Vec<SplitPlan>> {
    let scenes: Vec<String> = scene_ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if scenes.len() < 5 {
        return Err(invalid!("content-independent splits need at least 5 scenes, got {}", scenes.len()));
    }
    let n = scenes.len();
    let n_val = (n as f64 * VAL_FRACTION).floor() as usize;
    let n_test = (n as f64 * TEST_FRACTION).floor() as usize;
    Ok((0..repeats)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64 + 1);
            let mut s = scenes.clone();
            s.shuffle(&mut rng);
            let test = s.split_off(n - n_test);
            let val = s.split_off(n - n_test - n_val);
            SplitPlan {
                repeat_index: r,
                train: s,
                val,
                test,
            }
        })
        .collect())
}

/// SRCC and PLCC for each of `q_b, q_s, q_t, q_st`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreMetrics {
    pub srcc: [f64; 4],
    pub plcc: [f64; 4],
}

impl ScoreMetrics {
    pub fn compute(quads: &[QualityQuad], mos: &[f64]) -> Result<Self> {
        let mut out = Self::default();
        for s in 0..4 {
            let pred: Vec<f64> = quads.iter().map(|q| q.as_array()[s]).collect();
            out.srcc[s] = srcc(&pred, mos)?;
            out.plcc[s] = plcc(&pred, mos)?;
        }
        Ok(out)
    }

    fn flat(&self) -> [f64; 8] {
        let mut v = [0.0; 8];
        v[..4].copy_from_slice(&self.srcc);
        v[4..].copy_from_slice(&self.plcc);
        v
    }

    fn from_flat(v: [f64; 8]) -> Self {
        let mut m = Self::default();
        m.srcc.copy_from_slice(&v[..4]);
        m.plcc.copy_from_slice(&v[4..]);
        m
    }
}

/// Middle value; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Per-repeat test metrics and their median.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub num_clips: usize,
    pub repeats: Vec<ScoreMetrics>,
}

impl MetricReport {
    pub fn median(&self) -> ScoreMetrics {
        let flats: Vec<[f64; 8]> = self.repeats.iter().map(ScoreMetrics::flat).collect();
        let mut out = [0.0; 8];
        for (i, o) in out.iter_mut().enumerate() {
            let col: Vec<f64> = flats.iter().map(|f| f[i]).collect();
            *o = median(&col).unwrap_or(f64::NAN);
        }
        ScoreMetrics::from_flat(out)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("repeat");
        for metric in ["srcc", "plcc"] {
            for name in QualityQuad::NAMES {
                write!(s, ",{metric}_{name}").expect("string write");
            }
        }
        s.push('\n');
        let mut row = |label: &str, m: &ScoreMetrics| {
            s.push_str(label);
            for v in m.flat() {
                write!(s, ",{v}").expect("string write");
            }
            s.push('\n');
        };
        for (i, m) in self.repeats.iter().enumerate() {
            row(&i.to_string(), m);
        }
        row("median", &self.median());
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("### {} ({} clips, {} repeats)\n\n", self.dataset, self.num_clips, self.repeats.len());
        s.push_str("| | ");
        s.push_str(&QualityQuad::NAMES.map(|n| format!("SRCC {n} | PLCC {n}")).join(" | "));
        s.push_str(" |\n|---|");
        s.push_str(&"---:|".repeat(8));
        s.push('\n');
        let mut row = |label: &str, m: &ScoreMetrics| {
            write!(s, "| {label} |").expect("string write");
            for i in 0..4 {
                write!(s, " {:.3} | {:.3} |", m.srcc[i], m.plcc[i]).expect("string write");
            }
            s.push('\n');
        };
        for (i, m) in self.repeats.iter().enumerate() {
            row(&i.to_string(), m);
        }
        row("**median**", &self.median());
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("report.csv", self.to_csv()), ("report.md", self.to_markdown())] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Median metrics of several datasets averaged with weights proportional to clip counts.
pub fn weighted_average(reports: &[MetricReport]) -> Result<ScoreMetrics> {
    let total: usize = reports.iter().map(|r| r.num_clips).sum();
    if total == 0 {
        return Err(invalid!("weighted average over no clips"));
    }
    let mut acc = [0.0; 8];
    for r in reports {
        let w = r.num_clips as f64 / total as f64;
        for (a, v) in acc.iter_mut().zip(r.median().flat()) {
            *a += w * v;
        }
    }
    Ok(ScoreMetrics::from_flat(acc))
}

/// Scores every listed clip with a frozen model.
pub fn predict_clips(model: &VqaModel<f32>, data: &PreparedDataset, idx: &[usize]) -> Result<Vec<QualityQuad>> {
    idx.par_iter().map(|&i| model.predict_inputs(&data.clips[i])).collect()
}

/// Test-set metrics of one trained model per plan.
pub fn evaluate_run(models: &[VqaModel<f32>], data: &PreparedDataset, plans: &[SplitPlan]) -> Result<MetricReport> {
    if models.len() != plans.len() {
        return Err(invalid!("{} models for {} split plans", models.len(), plans.len()));
    }
    let repeats = models
        .iter()
        .zip(plans)
        .map(|(m, plan)| {
            let idx = data.indices_in(&plan.test);
            let quads = predict_clips(m, data, &idx)?;
            let mos: Vec<f64> = idx.iter().map(|&i| data.mos[i]).collect();
            ScoreMetrics::compute(&quads, &mos)
        })
        .collect::<Result<_>>()?;
    Ok(MetricReport {
        dataset: data.name.clone(),
        num_clips: data.len(),
        repeats,
    })
}
