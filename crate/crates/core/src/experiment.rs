//! End-to-end experiment driver: configuration, stage one, plan
//! initialisation, stage-two rounds, and baselines.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationProfile;
use crate::data::{generate_federation, Federation, FederationConfig};
use crate::error::{Error, Result};
use crate::fed::local::{accuracy, train_steps};
use crate::fed::{
    initialize_plans, run_round, sample_round, stage_one, AdjustEvent, ClientState,
    RecommendationConfig, RoundSettings, SamplingMode,
};
use crate::metrics::{ClientRoundEntry, RoundReport};
use crate::model::{mem_bytes, ExpertMask, MemoryMode, ModelConfig, MoeModel, TrainConfig};
use crate::rng::{substream, substream_key};
use crate::search::{SearchConfig, SubmodelPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fedmoe,
    RandomMoe,
    Fedprox,
    /// FedProx's fixed architecture without the proximal term.
    Fedavg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Plans built from uniform profiles; no activation collection.
    NoStage1,
    /// No expert recommendation during rounds.
    NoStage2,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no_stage1" => Ok(Variant::NoStage1),
            "no_stage2" => Ok(Variant::NoStage2),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected full, no_stage1, no_stage2)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub mode: SamplingMode,
    pub clients_per_round: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            mode: SamplingMode::Uniform,
            clients_per_round: 5,
        }
    }
}

/// Client budgets are drawn uniformly from `[min_frac, max_frac]` times the
/// training-mode bytes of the full global model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    pub budget_min_frac: f64,
    pub budget_max_frac: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            budget_min_frac: 0.55,
            budget_max_frac: 0.65,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub stage_one_epochs: usize,
    pub local_epochs: usize,
    pub lora_rank: usize,
    /// Steps of pooled pre-training applied to the fresh global model.
    pub pretrain_steps: usize,
    /// Give each task its own block of head outputs (task `t`, local label
    /// `y` trains against output `t * classes_per_task + y`).
    pub per_task_labels: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            stage_one_epochs: 5,
            local_epochs: 1,
            lora_rank: 4,
            pretrain_steps: 200,
            per_task_labels: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub fedprox_mu: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { fedprox_mu: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: usize,
    pub method: Method,
    pub variant: Variant,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub data: FederationConfig,
    pub train: TrainConfig,
    pub search: SearchConfig,
    pub recommendation: RecommendationConfig,
    pub sampling: SamplingConfig,
    pub memory: MemoryConfig,
    pub protocol: ProtocolConfig,
    pub baseline: BaselineConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            rounds: 100,
            method: Method::Fedmoe,
            variant: Variant::Full,
            output_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            data: FederationConfig::default(),
            train: TrainConfig::default(),
            search: SearchConfig::default(),
            recommendation: RecommendationConfig::default(),
            sampling: SamplingConfig::default(),
            memory: MemoryConfig::default(),
            protocol: ProtocolConfig::default(),
            baseline: BaselineConfig::default(),
        }
    }
}

fn collect_unknown(user: &toml::Value, known: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    if let (toml::Value::Table(u), toml::Value::Table(k)) = (user, known) {
        for (key, value) in u {
            let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
            match k.get(key) {
                Some(kv) => collect_unknown(value, kv, &path, out),
                None => out.push(path),
            }
        }
    }
}

impl ExperimentConfig {
    /// Parse TOML, rejecting unknown keys (all of them are listed).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let known = toml::Value::try_from(ExperimentConfig::default())
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut unknown = Vec::new();
        collect_unknown(&user, &known, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        self.search.validate()?;
        self.recommendation.validate()?;
        if self.data.vocab_size != self.model.vocab_size {
            return Err(Error::Config(format!(
                "data.vocab_size {} != model.vocab_size {}",
                self.data.vocab_size, self.model.vocab_size
            )));
        }
        let outputs = self.head_outputs_needed();
        if outputs > self.model.num_classes {
            return Err(Error::Config(format!(
                "model.num_classes {} too small: need {outputs} head outputs",
                self.model.num_classes
            )));
        }
        let per_round = self.sampling.clients_per_round;
        if per_round == 0 || per_round > self.data.num_clients {
            return Err(Error::Config("sampling.clients_per_round must lie in [1, num_clients]".into()));
        }
        if self.sampling.mode == SamplingMode::EnforcedHetero && per_round > self.data.num_tasks {
            return Err(Error::Config("enforced_hetero needs clients_per_round <= num_tasks".into()));
        }
        let m = &self.memory;
        if !(m.budget_min_frac > 0.0 && m.budget_min_frac <= m.budget_max_frac) {
            return Err(Error::Config("memory: need 0 < budget_min_frac <= budget_max_frac".into()));
        }
        if self.protocol.lora_rank == 0 || self.protocol.local_epochs == 0 {
            return Err(Error::Config("protocol.lora_rank and local_epochs must be >= 1".into()));
        }
        if !(self.baseline.fedprox_mu >= 0.0) {
            return Err(Error::Config("baseline.fedprox_mu must be >= 0".into()));
        }
        Ok(())
    }

    /// Head outputs the label mapping requires.
    pub fn head_outputs_needed(&self) -> usize {
        if self.protocol.per_task_labels {
            self.data.num_tasks * self.data.classes_per_task
        } else {
            self.data.classes_per_task
        }
    }

    pub fn memory_mode(&self) -> MemoryMode {
        MemoryMode::Train(self.train.optimizer)
    }
}

/// Everything an experiment produces.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    /// Profiles that seeded plan initialisation (measured, predicted or uniform).
    pub initial_profiles: Vec<ActivationProfile>,
    pub measured: Vec<bool>,
    pub initial_plans: Vec<SubmodelPlan>,
    /// Stage-one traffic rows (reported as round 0).
    pub stage_one_entries: Vec<ClientRoundEntry>,
    pub stage_one_peak_bytes: u64,
    pub rounds: Vec<RoundReport>,
    pub events: Vec<(usize, AdjustEvent)>,
    pub clients: Vec<ClientState>,
    /// Final test accuracy of each client's submodel cut from the final global model.
    pub final_test_scores: Vec<f64>,
    pub global: MoeModel,
}

/// Map local labels to head outputs as configured.
pub fn to_head_labels(cfg: &ExperimentConfig, fed: &Federation) -> Federation {
    let mut out = fed.clone();
    if !cfg.protocol.per_task_labels {
        return out;
    }
    let c = cfg.data.classes_per_task;
    for client in &mut out.clients {
        let offset = client.task_id * c;
        for s in client.train.iter_mut().chain(client.val.iter_mut()).chain(client.test.iter_mut()) {
            s.label += offset;
        }
    }
    for (s, &t) in out.pretrain.iter_mut().zip(&fed.pretrain_tasks) {
        s.label += t * c;
    }
    out
}

/// Generate the federation for `cfg` with labels already mapped to head outputs.
pub fn prepare_federation(cfg: &ExperimentConfig) -> Result<Federation> {
    cfg.validate()?;
    let fed = generate_federation(&cfg.data, substream_key(cfg.seed, "data", &[]))?;
    Ok(to_head_labels(cfg, &fed))
}

/// Pre-trained global model shared by every method for a given seed.
/// `fed` must carry head labels (see [`prepare_federation`]).
pub fn pretrained_global(cfg: &ExperimentConfig, fed: &Federation) -> Result<MoeModel> {
    let mut global = MoeModel::init(&cfg.model, &mut substream(cfg.seed, "init", &[]))?;
    if cfg.protocol.pretrain_steps > 0 && !fed.pretrain.is_empty() {
        train_steps(
            &mut global,
            &fed.pretrain,
            &cfg.train,
            cfg.protocol.pretrain_steps,
            substream_key(cfg.seed, "pretrain", &[]),
        )?;
    }
    Ok(global)
}

/// Per-client budgets in bytes.
pub fn client_budgets(cfg: &ExperimentConfig) -> Vec<u64> {
    let full = mem_bytes(&cfg.model, &crate::model::full_mask(&cfg.model), cfg.memory_mode()) as f64;
    let mut rng = substream(cfg.seed, "budget", &[]);
    (0..cfg.data.num_clients)
        .map(|_| {
            let frac = if cfg.memory.budget_max_frac > cfg.memory.budget_min_frac {
                rng.random_range(cfg.memory.budget_min_frac..=cfg.memory.budget_max_frac)
            } else {
                cfg.memory.budget_min_frac
            };
            (frac * full).floor() as u64
        })
        .collect()
}

/// Largest uniform experts-per-layer count whose training footprint fits `budget`.
pub fn uniform_arch_mask(cfg: &ModelConfig, budget: u64, mode: MemoryMode) -> Option<ExpertMask> {
    (1..=cfg.experts_per_layer)
        .rev()
        .map(|k| vec![(0..cfg.experts_per_layer).map(|j| j < k).collect::<Vec<bool>>(); cfg.num_layers])
        .find(|m| mem_bytes(cfg, m, mode) <= budget)
}

/// Random masks with the same per-layer counts as `plans`.
pub fn random_plans(plans: &[SubmodelPlan], cfg: &ModelConfig, profiles: &[ActivationProfile], seed: u64, mode: MemoryMode) -> Vec<SubmodelPlan> {
    plans
        .iter()
        .zip(profiles)
        .map(|(p, prof)| {
            let mut rng = substream(seed, "random_baseline", &[p.client_id as u64]);
            let mask: ExpertMask = p
                .layer_counts()
                .into_iter()
                .map(|n| {
                    let picked: BTreeSet<usize> = sample(&mut rng, cfg.experts_per_layer, n).into_iter().collect();
                    (0..cfg.experts_per_layer).map(|j| picked.contains(&j)).collect()
                })
                .collect();
            SubmodelPlan::new(p.client_id, mask, &prof.probs, cfg, mode)
        })
        .collect()
}

/// Run a whole experiment in memory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment_on(cfg, &prepare_federation(cfg)?)
}

/// Run on a federation whose labels are already mapped (see [`prepare_federation`]).
pub fn run_experiment_on(cfg: &ExperimentConfig, fed: &Federation) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mode = cfg.memory_mode();
    let mcfg = &cfg.model;
    let budgets = client_budgets(cfg);
    let mut global = pretrained_global(cfg, fed)?;
    let tasks: Vec<usize> = fed.clients.iter().map(|c| c.task_id).collect();
    let meta: Vec<(usize, usize, u64, usize)> = fed
        .clients
        .iter()
        .zip(&budgets)
        .map(|(c, &b)| (c.client_id, c.task_id, b, c.data_volume()))
        .collect();

    let uses_stage_one = matches!(cfg.method, Method::Fedmoe | Method::RandomMoe) && cfg.variant != Variant::NoStage1;
    let (profiles, measured, stage_one_entries, stage_one_peak) = if uses_stage_one {
        let out = stage_one(
            &global,
            &fed.clients,
            &budgets,
            &cfg.train,
            cfg.protocol.stage_one_epochs,
            cfg.protocol.lora_rank,
            substream_key(cfg.seed, "stage1", &[]),
        )?;
        let any = out.measured.iter().any(|&m| m);
        // Only FedMoE pays for collection; randomMoE borrows the expert counts.
        let entries = if cfg.method == Method::Fedmoe { out.entries } else { Vec::new() };
        let peak = if any && cfg.method == Method::Fedmoe { out.lora_mem_bytes } else { 0 };
        (out.profiles, out.measured, entries, peak)
    } else {
        let uniform = (0..fed.clients.len())
            .map(|k| ActivationProfile::uniform(k, mcfg.num_layers, mcfg.experts_per_layer))
            .collect();
        (uniform, vec![false; fed.clients.len()], Vec::new(), 0)
    };

    let mut clients = match cfg.method {
        Method::Fedmoe | Method::RandomMoe => initialize_plans(&profiles, &meta, &cfg.search, mcfg, mode)?,
        Method::Fedprox | Method::Fedavg => {
            let min_budget = *budgets.iter().min().expect("at least one client");
            let mask = uniform_arch_mask(mcfg, min_budget, mode).ok_or_else(|| {
                let need = mem_bytes(mcfg, &vec![vec![true]; mcfg.num_layers], mode);
                let (client_id, _) = budgets.iter().enumerate().min_by_key(|(_, &b)| b).unwrap();
                Error::Infeasible {
                    client_id,
                    needed: need,
                    available: min_budget,
                    deficit: need.saturating_sub(min_budget),
                }
            })?;
            meta.iter()
                .zip(&profiles)
                .map(|(&(id, task, budget, volume), p)| {
                    let plan = SubmodelPlan::new(id, mask.clone(), &p.probs, mcfg, mode);
                    ClientState::new(id, task, budget, volume, plan, p.clone())
                })
                .collect()
        }
    };
    if cfg.method == Method::RandomMoe {
        let plans: Vec<SubmodelPlan> = clients.iter().map(|c| c.plan.clone()).collect();
        for (c, p) in clients.iter_mut().zip(random_plans(&plans, mcfg, &profiles, cfg.seed, mode)) {
            c.plan = p;
        }
    }
    let initial_plans: Vec<SubmodelPlan> = clients.iter().map(|c| c.plan.clone()).collect();

    let settings = RoundSettings {
        train: cfg.train.clone(),
        local_epochs: cfg.protocol.local_epochs,
        recommendation: cfg.recommendation.clone(),
        adjust: cfg.method == Method::Fedmoe && cfg.variant != Variant::NoStage2,
        proximal_mu: (cfg.method == Method::Fedprox).then_some(cfg.baseline.fedprox_mu),
        num_tasks: cfg.data.num_tasks,
        seed: substream_key(cfg.seed, "rounds", &[]),
    };
    let mut sampler = substream(cfg.seed, "sampling", &[]);
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut events = Vec::new();
    for r in 1..=cfg.rounds {
        let plan = sample_round(r, &tasks, cfg.sampling.mode, cfg.sampling.clients_per_round, &mut sampler)?;
        let (report, ev) = run_round(&mut global, &plan, &mut clients, &fed.clients, &settings)?;
        events.extend(ev.into_iter().map(|e| (r, e)));
        rounds.push(report);
    }

    let final_test_scores = clients
        .iter()
        .map(|c| {
            let sub = global.extract(&c.plan.mask)?;
            accuracy(&sub, &fed.clients[c.client_id].test)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ExperimentReport {
        config: cfg.clone(),
        initial_profiles: profiles,
        measured,
        initial_plans,
        stage_one_entries,
        stage_one_peak_bytes: stage_one_peak,
        rounds,
        events,
        clients,
        final_test_scores,
        global,
    })
}
