use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Uniform without replacement over all clients.
    Uniform,
    /// One client from each of `per_round` distinct tasks.
    EnforcedHetero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub round: usize,
    /// Sampled client ids, ascending.
    pub clients: Vec<usize>,
    pub mode: SamplingMode,
}

/// Draw the participants of one round. `tasks[k]` is client `k`'s task.
pub fn sample_round<R: Rng + ?Sized>(
    round: usize,
    tasks: &[usize],
    mode: SamplingMode,
    per_round: usize,
    rng: &mut R,
) -> Result<RoundPlan> {
    if per_round == 0 || per_round > tasks.len() {
        return Err(Error::Config(format!(
            "clients_per_round must lie in [1, {}]",
            tasks.len()
        )));
    }
    let mut clients = match mode {
        SamplingMode::Uniform => {
            let mut ids: Vec<usize> = (0..tasks.len()).collect();
            ids.shuffle(rng);
            ids.truncate(per_round);
            ids
        }
        SamplingMode::EnforcedHetero => {
            let mut distinct: Vec<usize> = tasks.to_vec();
            distinct.sort_unstable();
            distinct.dedup();
            if per_round > distinct.len() {
                return Err(Error::Config(format!(
                    "enforced sampling of {per_round} clients needs as many tasks (have {})",
                    distinct.len()
                )));
            }
            distinct.shuffle(rng);
            distinct
                .into_iter()
                .take(per_round)
                .map(|t| {
                    let members: Vec<usize> = (0..tasks.len()).filter(|&k| tasks[k] == t).collect();
                    *members.choose(rng).expect("task has members")
                })
                .collect()
        }
    };
    clients.sort_unstable();
    Ok(RoundPlan { round, clients, mode })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn enforced_rounds_span_distinct_tasks() {
        let tasks: Vec<usize> = (0..30).map(|k| k % 3).collect();
        let mut rng = substream(4, "sampling", &[]);
        for r in 0..200 {
            let plan = sample_round(r, &tasks, SamplingMode::EnforcedHetero, 3, &mut rng).unwrap();
            let mut t: Vec<usize> = plan.clients.iter().map(|&k| tasks[k]).collect();
            t.sort();
            t.dedup();
            assert_eq!(t.len(), 3);
        }
    }

    #[test]
    fn uniform_rounds_are_distinct_and_sized() {
        let tasks: Vec<usize> = (0..12).map(|k| k % 3).collect();
        let mut rng = substream(4, "sampling", &[]);
        let plan = sample_round(0, &tasks, SamplingMode::Uniform, 5, &mut rng).unwrap();
        let mut ids = plan.clients.clone();
        ids.dedup();
        assert_eq!(ids.len(), 5);
    }

    #[test]
    fn bad_sizes_are_config_errors() {
        let tasks = vec![0, 1, 2];
        let mut rng = substream(4, "sampling", &[]);
        assert!(sample_round(0, &tasks, SamplingMode::Uniform, 0, &mut rng).is_err());
        assert!(sample_round(0, &[0, 0, 1], SamplingMode::EnforcedHetero, 3, &mut rng).is_err());
    }
}
