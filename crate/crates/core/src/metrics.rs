//! Resource accounting (communication, memory) and robustness statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{mem_bytes, ExpertMask, MemoryMode, ModelConfig, MoeModel};

pub const BYTES_PER_GIB: f64 = (1u64 << 30) as f64;

/// One sampled client's outcome in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundEntry {
    pub client_id: usize,
    pub task_id: usize,
    /// Validation accuracy after local training; NaN when the client failed.
    pub score: f64,
    pub loss: f64,
    pub expert_count: usize,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    pub mem_bytes: u64,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub entries: Vec<ClientRoundEntry>,
    /// Mean score per task over this round's successful sampled clients.
    pub task_scores: Vec<Option<f64>>,
}

impl RoundReport {
    pub fn new(round: usize, entries: Vec<ClientRoundEntry>, num_tasks: usize) -> Self {
        let task_scores = (0..num_tasks)
            .map(|t| {
                let s: Vec<f64> = entries
                    .iter()
                    .filter(|e| e.task_id == t && !e.failed)
                    .map(|e| e.score)
                    .collect();
                (!s.is_empty()).then(|| s.iter().sum::<f64>() / s.len() as f64)
            })
            .collect();
        Self {
            round,
            entries,
            task_scores,
        }
    }

    pub fn uplink(&self) -> u64 {
        self.entries.iter().map(|e| e.uplink_bytes).sum()
    }

    pub fn downlink(&self) -> u64 {
        self.entries.iter().map(|e| e.downlink_bytes).sum()
    }
}

/// `L·E` activation probabilities, one value each.
pub fn profile_bytes(cfg: &ModelConfig) -> u64 {
    (cfg.num_layers * cfg.experts_per_layer) as u64 * cfg.bytes_per_param
}

pub fn score_bytes(cfg: &ModelConfig) -> u64 {
    cfg.bytes_per_param
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Down,
    Up,
}

/// Bytes moved for one client in one stage-two round. Downlink ships the
/// submodel; uplink returns it with the activation profile and a score.
pub fn comm_bytes(cfg: &ModelConfig, mask: &[Vec<bool>], dir: Direction) -> u64 {
    let weights = mem_bytes(cfg, mask, MemoryMode::Eval);
    match dir {
        Direction::Down => weights,
        Direction::Up => weights + profile_bytes(cfg) + score_bytes(cfg),
    }
}

/// Stage-one traffic for one measuring client: the full model down, the
/// activation profile up.
pub fn stage_one_bytes(cfg: &ModelConfig, dir: Direction) -> u64 {
    match dir {
        Direction::Down => mem_bytes(cfg, &crate::model::full_mask(cfg), MemoryMode::Eval),
        Direction::Up => profile_bytes(cfg),
    }
}

/// Raw little-endian parameter payload of a model, `bytes_per_param` wide
/// per value (4 → f32, 8 → f64).
pub fn serialize_params(model: &MoeModel) -> Result<Vec<u8>> {
    let width = model.config.bytes_per_param;
    if width != 4 && width != 8 {
        return Err(Error::Config(format!("no payload encoding for {width}-byte parameters")));
    }
    let mut out = Vec::new();
    model.for_each_tensor(&mut |_, data| {
        for &v in data {
            if width == 4 {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            } else {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    });
    Ok(out)
}

/// Training-mode peak over clients; `proximal_anchor` adds one frozen copy of
/// each client's model (FedProx keeps the global weights around).
pub fn peak_memory(cfg: &ModelConfig, masks: &[&ExpertMask], mode: MemoryMode, proximal_anchor: bool) -> u64 {
    masks
        .iter()
        .map(|m| {
            let base = mem_bytes(cfg, m, mode);
            if proximal_anchor {
                base + mem_bytes(cfg, m, MemoryMode::Eval)
            } else {
                base
            }
        })
        .max()
        .unwrap_or(0)
}

/// Coefficient of variation `σ/μ` with population standard deviation.
pub fn coefficient_of_variation(scores: &[f64]) -> Result<f64> {
    if scores.len() < 2 {
        return Err(Error::UndefinedMetric("c_v needs at least two settings".into()));
    }
    let n = scores.len() as f64;
    let mu = scores.iter().sum::<f64>() / n;
    if !(mu > 0.0) {
        return Err(Error::UndefinedMetric(format!("c_v undefined for mean {mu}")));
    }
    let var = scores.iter().map(|s| (s - mu).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt() / mu)
}

/// Per-task `c_v` across settings and their mean (the composite index).
/// `per_task[t]` lists task `t`'s score in each setting.
pub fn cv_index(per_task: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
    if per_task.is_empty() {
        return Err(Error::UndefinedMetric("no tasks".into()));
    }
    let cvs = per_task
        .iter()
        .map(|s| coefficient_of_variation(s))
        .collect::<Result<Vec<_>>>()?;
    let cvi = cvs.iter().sum::<f64>() / cvs.len() as f64;
    Ok((cvs, cvi))
}

/// First round (1-based) whose value reaches `fraction` of the series maximum.
pub fn rounds_to_target(series: &[f64], fraction: f64) -> Option<usize> {
    let best = series.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !best.is_finite() {
        return None;
    }
    series.iter().position(|&v| v >= fraction * best).map(|i| i + 1)
}

pub fn to_gib(bytes: u64) -> f64 {
    bytes as f64 / BYTES_PER_GIB
}
