//! One stage-two round: deploy submodels, train locally, validate,
//! aggregate, then adjust structures.

use rayon::prelude::*;

use super::aggregate::{modular_aggregate, EdgeUpdate};
use super::client::ClientState;
use super::local::{accuracy, local_train};
use super::recommend::{adjust_submodels, AdjustEvent, RecommendationConfig};
use super::sampling::RoundPlan;
use crate::activation::{measure_profile, ActivationProfile};
use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::metrics::{comm_bytes, ClientRoundEntry, Direction, RoundReport};
use crate::model::{mem_bytes, MemoryMode, MoeModel, TrainConfig};
use crate::rng::substream_key;

#[derive(Debug, Clone)]
pub struct RoundSettings {
    pub train: TrainConfig,
    pub local_epochs: usize,
    pub recommendation: RecommendationConfig,
    /// Run expert recommendation after aggregation.
    pub adjust: bool,
    /// FedProx coefficient; `None` disables the proximal term entirely.
    pub proximal_mu: Option<f64>,
    pub num_tasks: usize,
    pub seed: u64,
}

struct ClientOutcome {
    idx: usize,
    model: Option<MoeModel>,
    profile: Option<ActivationProfile>,
    score: f64,
    loss: f64,
}

/// Execute one round in place on `global` and `clients`.
pub fn run_round(
    global: &mut MoeModel,
    plan: &RoundPlan,
    clients: &mut [ClientState],
    data: &[ClientDataset],
    settings: &RoundSettings,
) -> Result<(RoundReport, Vec<AdjustEvent>)> {
    let cfg = global.config.clone();
    let mode = MemoryMode::Train(settings.train.optimizer);
    let lookup = |id: usize| {
        clients
            .iter()
            .position(|c| c.client_id == id)
            .ok_or_else(|| Error::Input(format!("sampled unknown client {id}")))
    };
    let indices: Vec<usize> = plan.clients.iter().map(|&id| lookup(id)).collect::<Result<_>>()?;
    let global_ref = &*global;
    let clients_ref = &*clients;

    let outcomes: Vec<ClientOutcome> = indices
        .par_iter()
        .map(|&idx| -> Result<ClientOutcome> {
            let state = &clients_ref[idx];
            let ds = &data[state.client_id];
            let mut model = global_ref.extract(&state.plan.mask)?;
            let anchor = settings.proximal_mu.map(|mu| (mu, model.clone()));
            let seed = substream_key(settings.seed, "round.batches", &[plan.round as u64, state.client_id as u64]);
            let trained = local_train(
                &mut model,
                &ds.train,
                &settings.train,
                settings.local_epochs,
                seed,
                anchor.as_ref().map(|(mu, a)| (*mu, a)),
            );
            match trained {
                Ok(loss) => {
                    let score = accuracy(&model, &ds.val)?;
                    let profile = measure_profile(&model, &ds.val, state.client_id)?;
                    Ok(ClientOutcome { idx, model: Some(model), profile: Some(profile), score, loss })
                }
                Err(Error::Numerical(msg)) => {
                    log::warn!("round {}: client {} diverged: {msg}", plan.round, state.client_id);
                    Ok(ClientOutcome { idx, model: None, profile: None, score: f64::NAN, loss: f64::NAN })
                }
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;

    let updates: Vec<EdgeUpdate> = outcomes
        .iter()
        .filter_map(|o| {
            o.model.as_ref().map(|m| EdgeUpdate {
                client_id: clients[o.idx].client_id,
                model: m,
                volume: clients[o.idx].volume as f64,
            })
        })
        .collect();
    modular_aggregate(global, &updates)?;

    let mut entries = Vec::with_capacity(outcomes.len());
    let mut scores = Vec::new();
    for o in outcomes {
        let c = &mut clients[o.idx];
        let failed = o.model.is_none();
        let mask = &c.plan.mask;
        let proximal_copy = if settings.proximal_mu.is_some() { mem_bytes(&cfg, mask, MemoryMode::Eval) } else { 0 };
        entries.push(ClientRoundEntry {
            client_id: c.client_id,
            task_id: c.task_id,
            score: o.score,
            loss: o.loss,
            expert_count: c.plan.expert_count(),
            uplink_bytes: if failed { 0 } else { comm_bytes(&cfg, mask, Direction::Up) },
            downlink_bytes: comm_bytes(&cfg, mask, Direction::Down),
            mem_bytes: mem_bytes(&cfg, mask, mode) + proximal_copy,
            failed,
        });
        if let Some(p) = o.profile {
            c.profile = p;
            c.last_score = Some(o.score);
            scores.push((o.idx, o.score));
        }
    }

    let events = if settings.adjust {
        adjust_submodels(clients, &scores, &settings.recommendation, &cfg, mode)?
    } else {
        Vec::new()
    };
    Ok((RoundReport::new(plan.round, entries, settings.num_tasks), events))
}
