//! Synthetic multi-task federated datasets.
//!
//! Each task owns a disjoint band of the vocabulary; each class of a task
//! concentrates mass on its own chunk of that band. Sequences are drawn
//! token-by-token from the class-conditional distribution, so different
//! tasks light up different tokens and, through the router, different
//! experts.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenBatch;
use crate::rng::substream;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkewKind {
    Iid,
    Dirichlet,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Skew {
    Iid,
    Dirichlet(f64),
}

/// Knobs for the federation generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub skew: SkewKind,
    pub dirichlet_beta: f64,
    /// Probability mass on the class's own token chunk.
    pub class_mass: f64,
    /// Mass spread over the task's whole band.
    pub band_mass: f64,
    /// Per-token multiplicative jitter half-width inside each chunk.
    pub jitter: f64,
    /// Samples per task in the pooled pre-training shard.
    pub pretrain_per_task: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            num_clients: 30,
            num_tasks: 3,
            classes_per_task: 4,
            vocab_size: 64,
            seq_len: 16,
            train_size: 200,
            val_size: 100,
            test_size: 100,
            skew: SkewKind::Iid,
            dirichlet_beta: 1.0,
            class_mass: 0.3,
            band_mass: 0.5,
            jitter: 0.5,
            pretrain_per_task: 400,
        }
    }
}

impl FederationConfig {
    pub fn skew(&self) -> Skew {
        match self.skew {
            SkewKind::Iid => Skew::Iid,
            SkewKind::Dirichlet => Skew::Dirichlet(self.dirichlet_beta),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 || self.num_clients < self.num_tasks {
            return Err(Error::Config(format!(
                "need num_clients >= num_tasks >= 1 (got {} clients, {} tasks)",
                self.num_clients, self.num_tasks
            )));
        }
        if self.classes_per_task == 0 || self.seq_len == 0 {
            return Err(Error::Config("classes_per_task and seq_len must be >= 1".into()));
        }
        if self.train_size == 0 || self.val_size == 0 || self.test_size == 0 {
            return Err(Error::Config(
                "every client needs at least one sample in each of train/val/test".into(),
            ));
        }
        let band = self.vocab_size / self.num_tasks;
        if band < self.classes_per_task {
            return Err(Error::Config(format!(
                "vocab_size {} too small for {} tasks x {} classes",
                self.vocab_size, self.num_tasks, self.classes_per_task
            )));
        }
        if self.skew == SkewKind::Dirichlet && !(self.dirichlet_beta > 0.0) {
            return Err(Error::Config("dirichlet_beta must be > 0".into()));
        }
        let masses_ok = self.class_mass >= 0.0
            && self.band_mass >= 0.0
            && self.class_mass + self.band_mass <= 1.0
            && (0.0..1.0).contains(&self.jitter);
        if !masses_ok {
            return Err(Error::Config(
                "class_mass, band_mass must be >= 0 with sum <= 1 and jitter in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Generator for one task: a token distribution per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDef {
    pub task_id: usize,
    pub num_classes: usize,
    pub seq_len: usize,
    /// `num_classes` probability vectors over the vocabulary.
    pub class_token_dists: Vec<Vec<f64>>,
    pub class_prior: Vec<f64>,
}

impl TaskDef {
    pub fn build<R: Rng + ?Sized>(cfg: &FederationConfig, task_id: usize, rng: &mut R) -> TaskDef {
        let v = cfg.vocab_size;
        let c = cfg.classes_per_task;
        let band = v / cfg.num_tasks;
        let band_start = task_id * band;
        let chunk = band / c;
        let background = 1.0 - cfg.class_mass - cfg.band_mass;
        let mut jit = |w: f64| w * (1.0 + cfg.jitter * (2.0 * rng.random::<f64>() - 1.0));
        let class_token_dists = (0..c)
            .map(|class| {
                let mut p = vec![background / v as f64; v];
                for x in &mut p[band_start..band_start + band] {
                    *x += jit(cfg.band_mass / band as f64);
                }
                let lo = band_start + class * chunk;
                for x in &mut p[lo..lo + chunk] {
                    *x += jit(cfg.class_mass / chunk as f64);
                }
                let sum: f64 = p.iter().sum();
                p.iter_mut().for_each(|x| *x /= sum);
                p
            })
            .collect();
        TaskDef {
            task_id,
            num_classes: c,
            seq_len: cfg.seq_len,
            class_token_dists,
            class_prior: vec![1.0 / c as f64; c],
        }
    }

    pub fn sample_sequence<R: Rng + ?Sized>(&self, label: usize, rng: &mut R) -> Sample {
        let dist = WeightedIndex::new(&self.class_token_dists[label]).expect("valid distribution");
        Sample {
            tokens: (0..self.seq_len).map(|_| dist.sample(rng)).collect(),
            label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub task_id: usize,
    /// Class proportions this client's labels follow.
    pub class_proportions: Vec<f64>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl ClientDataset {
    /// `|D_k|`, the training-shard size.
    pub fn data_volume(&self) -> usize {
        self.train.len()
    }
}

/// A generated federation: task generators, client shards and a pooled
/// pre-training shard drawn independently of every client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Federation {
    pub version: u32,
    pub tasks: Vec<TaskDef>,
    pub clients: Vec<ClientDataset>,
    pub pretrain: Vec<Sample>,
    /// Task of each pre-training sample.
    pub pretrain_tasks: Vec<usize>,
}

fn dirichlet<R: Rng + ?Sized>(beta: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(beta, 1.0).expect("beta > 0");
    let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.iter_mut().for_each(|x| *x /= sum);
    } else {
        // Every component underflowed (tiny beta): all mass on one class.
        let hot = rng.random_range(0..k);
        draws = (0..k).map(|i| if i == hot { 1.0 } else { 0.0 }).collect();
    }
    draws
}

/// Largest-remainder apportionment of `n` items to `props`, then shuffled.
fn apportion_labels<R: Rng + ?Sized>(props: &[f64], n: usize, rng: &mut R) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut short = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if short == 0 {
            break;
        }
        counts[i] += 1;
        short -= 1;
    }
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
        .collect();
    labels.shuffle(rng);
    labels
}

/// Build the whole federation deterministically from `seed`.
pub fn generate_federation(cfg: &FederationConfig, seed: u64) -> Result<Federation> {
    cfg.validate()?;
    let tasks: Vec<TaskDef> = (0..cfg.num_tasks)
        .map(|t| TaskDef::build(cfg, t, &mut substream(seed, "data.task", &[t as u64])))
        .collect();
    let mut clients = Vec::with_capacity(cfg.num_clients);
    for k in 0..cfg.num_clients {
        let task = &tasks[k % cfg.num_tasks];
        let mut rng = substream(seed, "data.client", &[k as u64]);
        let props = match cfg.skew() {
            Skew::Iid => task.class_prior.clone(),
            Skew::Dirichlet(beta) => dirichlet(beta, task.num_classes, &mut rng),
        };
        let mut shard = |n: usize| -> Vec<Sample> {
            apportion_labels(&props, n, &mut rng)
                .into_iter()
                .map(|y| task.sample_sequence(y, &mut rng))
                .collect()
        };
        let train = shard(cfg.train_size);
        let val = shard(cfg.val_size);
        let test = shard(cfg.test_size);
        clients.push(ClientDataset {
            client_id: k,
            task_id: task.task_id,
            class_proportions: props,
            train,
            val,
            test,
        });
    }
    let mut rng = substream(seed, "data.pretrain", &[]);
    let mut pool = Vec::with_capacity(cfg.pretrain_per_task * cfg.num_tasks);
    for task in &tasks {
        for y in apportion_labels(&task.class_prior, cfg.pretrain_per_task, &mut rng) {
            pool.push((task.task_id, task.sample_sequence(y, &mut rng)));
        }
    }
    pool.shuffle(&mut rng);
    let (pretrain_tasks, pretrain) = pool.into_iter().unzip();
    Ok(Federation {
        version: DATASET_FORMAT_VERSION,
        tasks,
        clients,
        pretrain,
        pretrain_tasks,
    })
}

pub fn save_federation(fed: &Federation, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string(fed)?)?;
    Ok(())
}

pub fn load_federation(path: &Path) -> Result<Federation> {
    let fed: Federation = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if fed.version != DATASET_FORMAT_VERSION {
        return Err(Error::Serde(format!("unsupported dataset version {}", fed.version)));
    }
    Ok(fed)
}

/// Epoch-shuffled cursor over a shard. A batch never straddles an epoch
/// boundary; crossing one reshuffles with a fresh per-epoch stream.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchCursor {
    seed: u64,
    epoch: u64,
    pos: usize,
    order: Vec<usize>,
}

impl BatchCursor {
    pub fn new(shard_len: usize, seed: u64) -> Self {
        let mut c = BatchCursor {
            seed,
            epoch: 0,
            pos: 0,
            order: (0..shard_len).collect(),
        };
        c.reshuffle();
        c
    }

    fn reshuffle(&mut self) {
        self.order.sort_unstable();
        self.order
            .shuffle(&mut substream(self.seed, "data.epoch", &[self.epoch]));
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Indices of the next batch.
    pub fn next_indices(&mut self, batch_size: usize) -> Vec<usize> {
        if self.order.is_empty() {
            return Vec::new();
        }
        if self.pos >= self.order.len() {
            self.epoch += 1;
            self.pos = 0;
            self.reshuffle();
        }
        let end = (self.pos + batch_size.max(1)).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }

    /// Number of batches in one epoch.
    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        self.order.len().div_ceil(batch_size.max(1))
    }
}

/// Next batch from `shard` as a token matrix plus labels.
pub fn sample_batch(
    shard: &[Sample],
    batch_size: usize,
    cursor: &mut BatchCursor,
) -> (TokenBatch, Vec<usize>) {
    let idx = cursor.next_indices(batch_size);
    to_batch(shard, &idx)
}

pub fn to_batch(shard: &[Sample], idx: &[usize]) -> (TokenBatch, Vec<usize>) {
    let t = idx.first().map(|&i| shard[i].tokens.len()).unwrap_or(0);
    let tokens = Array2::from_shape_fn((idx.len(), t), |(r, c)| shard[idx[r]].tokens[c]);
    let labels = idx.iter().map(|&i| shard[i].label).collect();
    (tokens, labels)
}
