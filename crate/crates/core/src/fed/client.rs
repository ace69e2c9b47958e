use serde::{Deserialize, Serialize};

use crate::activation::ActivationProfile;
use crate::error::Result;
use crate::model::{MemoryMode, ModelConfig};
use crate::search::{heuristic_search, SearchConfig, SubmodelPlan};

/// Server-side bookkeeping for one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub client_id: usize,
    pub task_id: usize,
    /// `M_k` in bytes.
    pub budget: u64,
    /// `|D_k|`
    pub volume: usize,
    pub plan: SubmodelPlan,
    /// Once set, the plan never changes again.
    pub frozen: bool,
    /// Consecutive sampled rounds without improvement.
    pub patience: usize,
    pub best_score: f64,
    /// Plan before a pending exploratory adjustment; restored if it does not pay off.
    pub previous_plan: Option<SubmodelPlan>,
    /// Most recent activation profile over the full grid.
    pub profile: ActivationProfile,
    pub last_score: Option<f64>,
}

impl ClientState {
    pub fn new(client_id: usize, task_id: usize, budget: u64, volume: usize, plan: SubmodelPlan, profile: ActivationProfile) -> Self {
        Self {
            client_id,
            task_id,
            budget,
            volume,
            plan,
            frozen: false,
            patience: 0,
            best_score: f64::NEG_INFINITY,
            previous_plan: None,
            profile,
            last_score: None,
        }
    }
}

/// Heuristic submodel search for every client from its profile and budget.
/// `clients` carries `(client_id, task_id, budget, volume)`.
pub fn initialize_plans(
    profiles: &[ActivationProfile],
    clients: &[(usize, usize, u64, usize)],
    search: &SearchConfig,
    cfg: &ModelConfig,
    mode: MemoryMode,
) -> Result<Vec<ClientState>> {
    clients
        .iter()
        .zip(profiles)
        .map(|(&(id, task, budget, volume), profile)| {
            let plan = heuristic_search(profile, budget, search, cfg, mode)?;
            Ok(ClientState::new(id, task, budget, volume, plan, profile.clone()))
        })
        .collect()
}
