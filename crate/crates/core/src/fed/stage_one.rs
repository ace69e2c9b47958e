//! Stage one: activation collection.
//!
//! Clients whose memory holds the full model with adapters fine-tune it
//! briefly and measure their profile on validation data; the rest receive a
//! volume-weighted prediction from same-task peers (or the uniform profile
//! when no peer measured). Fine-tuned weights never leave the client.

use rayon::prelude::*;

use super::local::{accuracy, local_train};
use crate::activation::{measure_profile, predict_profile, ActivationProfile};
use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::metrics::{stage_one_bytes, ClientRoundEntry, Direction};
use crate::model::{attach_lora, merge_lora, model_mem_bytes, MemoryMode, MoeModel, TrainConfig};
use crate::rng::{substream, substream_key};

#[derive(Debug, Clone)]
pub struct StageOneOutput {
    /// One profile per client, indexed like the input.
    pub profiles: Vec<ActivationProfile>,
    /// Whether each profile was measured (true) or predicted.
    pub measured: Vec<bool>,
    /// Traffic and score rows for measuring clients (round 0).
    pub entries: Vec<ClientRoundEntry>,
    /// Training-mode bytes of the full model with adapters.
    pub lora_mem_bytes: u64,
}

/// Memory of the full model with adapters attached, training mode.
pub fn lora_training_bytes(global: &MoeModel, rank: usize, mode: MemoryMode) -> Result<u64> {
    let mut probe = global.clone();
    attach_lora(&mut probe, rank, &mut substream(0, "probe", &[]))?;
    Ok(model_mem_bytes(&probe, mode))
}

#[allow(clippy::too_many_arguments)]
pub fn stage_one(
    global: &MoeModel,
    data: &[ClientDataset],
    budgets: &[u64],
    train: &TrainConfig,
    epochs: usize,
    lora_rank: usize,
    seed: u64,
) -> Result<StageOneOutput> {
    if data.len() != budgets.len() {
        return Err(Error::Input("one budget per client required".into()));
    }
    let mode = MemoryMode::Train(train.optimizer);
    let need = lora_training_bytes(global, lora_rank, mode)?;
    let cfg = &global.config;

    let measured: Vec<Option<(ActivationProfile, ClientRoundEntry)>> = data
        .par_iter()
        .zip(budgets.par_iter())
        .map(|(client, &budget)| -> Result<Option<(ActivationProfile, ClientRoundEntry)>> {
            if need > budget {
                return Ok(None);
            }
            let k = client.client_id as u64;
            let mut model = global.clone();
            attach_lora(&mut model, lora_rank, &mut substream(seed, "stage1.lora", &[k]))?;
            let loss = local_train(
                &mut model,
                &client.train,
                train,
                epochs,
                substream_key(seed, "stage1.batches", &[k]),
                None,
            )?;
            merge_lora(&mut model);
            let profile = measure_profile(&model, &client.val, client.client_id)?;
            let score = accuracy(&model, &client.val)?;
            let entry = ClientRoundEntry {
                client_id: client.client_id,
                task_id: client.task_id,
                score,
                loss,
                expert_count: cfg.num_layers * cfg.experts_per_layer,
                uplink_bytes: stage_one_bytes(cfg, Direction::Up),
                downlink_bytes: stage_one_bytes(cfg, Direction::Down),
                mem_bytes: need,
                failed: false,
            };
            Ok(Some((profile, entry)))
        })
        .collect::<Result<_>>()?;

    let mut profiles = Vec::with_capacity(data.len());
    for (idx, client) in data.iter().enumerate() {
        let p = match &measured[idx] {
            Some((p, _)) => p.clone(),
            None => {
                let donors: Vec<(&ActivationProfile, usize)> = data
                    .iter()
                    .zip(&measured)
                    .filter(|(d, m)| d.task_id == client.task_id && m.is_some())
                    .map(|(d, m)| (&m.as_ref().unwrap().0, d.data_volume()))
                    .collect();
                match predict_profile(client.client_id, &donors) {
                    Ok(p) => p,
                    Err(Error::NoDonor(_)) => {
                        log::warn!("client {}: no same-task donor, using uniform profile", client.client_id);
                        ActivationProfile::uniform(client.client_id, cfg.num_layers, cfg.experts_per_layer)
                    }
                    Err(e) => return Err(e),
                }
            }
        };
        profiles.push(p);
    }
    let flags = measured.iter().map(Option::is_some).collect();
    let entries = measured.into_iter().flatten().map(|(_, e)| e).collect();
    Ok(StageOneOutput {
        profiles,
        measured: flags,
        entries,
        lora_mem_bytes: need,
    })
}
