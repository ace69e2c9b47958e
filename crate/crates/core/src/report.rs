//! CSV report writers and readers.
//!
//! Column orders are stable:
//! - `rounds.csv`: round, client, task, score, loss, expert_count, uplink_bytes, downlink_bytes
//! - `map.csv`: client, task, layer, expert, retained, activation, theta, mem_estimate, frozen
//! - `summary.csv`: metric, task, value (task empty for run-wide metrics)
//! - `similarity.csv`: client_a, client_b, similarity
//! - `profiles.csv`: client, layer, expert, p

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::activation::{profile_similarity, ActivationProfile};
use crate::error::{Error, Result};
use crate::experiment::ExperimentReport;
use crate::fed::AdjustEvent;
use crate::metrics::{coefficient_of_variation, rounds_to_target, to_gib};

pub const ROUNDS_FILE: &str = "rounds.csv";
pub const MAP_FILE: &str = "map.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SIMILARITY_FILE: &str = "similarity.csv";
pub const PROFILES_FILE: &str = "profiles.csv";
pub const CONFIG_ECHO_FILE: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub round: usize,
    pub client: usize,
    pub task: usize,
    pub score: f64,
    pub loss: f64,
    pub expert_count: usize,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapRow {
    pub client: usize,
    pub task: usize,
    pub layer: usize,
    pub expert: usize,
    pub retained: bool,
    pub activation: f64,
    pub theta: f64,
    pub mem_estimate: u64,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub metric: String,
    pub task: Option<usize>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub client_a: usize,
    pub client_b: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub client: usize,
    pub layer: usize,
    pub expert: usize,
    pub p: f64,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Serde(e.to_string())
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

/// Stage-one rows (round 0) followed by every round's entries.
pub fn round_rows(report: &ExperimentReport) -> Vec<RoundRow> {
    let stage = report.stage_one_entries.iter().map(|e| (0, e));
    let rounds = report.rounds.iter().flat_map(|r| r.entries.iter().map(move |e| (r.round, e)));
    stage
        .chain(rounds)
        .map(|(round, e)| RoundRow {
            round,
            client: e.client_id,
            task: e.task_id,
            score: e.score,
            loss: e.loss,
            expert_count: e.expert_count,
            uplink_bytes: e.uplink_bytes,
            downlink_bytes: e.downlink_bytes,
        })
        .collect()
}

pub fn map_rows(report: &ExperimentReport) -> Vec<MapRow> {
    let mut rows = Vec::new();
    for c in &report.clients {
        for (i, layer) in c.plan.mask.iter().enumerate() {
            for (j, &retained) in layer.iter().enumerate() {
                rows.push(MapRow {
                    client: c.client_id,
                    task: c.task_id,
                    layer: i,
                    expert: j,
                    retained,
                    activation: c.profile.probs[[i, j]],
                    theta: c.plan.theta,
                    mem_estimate: c.plan.mem_estimate,
                    frozen: c.frozen,
                });
            }
        }
    }
    rows
}

/// Pairwise similarity of the clients' most recent profiles.
pub fn similarity_rows(report: &ExperimentReport) -> Result<Vec<SimilarityRow>> {
    let mut rows = Vec::new();
    for a in &report.clients {
        for b in &report.clients {
            rows.push(SimilarityRow {
                client_a: a.client_id,
                client_b: b.client_id,
                similarity: profile_similarity(&a.profile, &b.profile)?,
            });
        }
    }
    Ok(rows)
}

pub fn profile_rows(profiles: &[ActivationProfile]) -> Vec<ProfileRow> {
    profiles
        .iter()
        .flat_map(|p| {
            p.probs.indexed_iter().map(move |((i, j), &v)| ProfileRow {
                client: p.client_id,
                layer: i,
                expert: j,
                p: v,
            })
        })
        .collect()
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn avg_experts(counts: impl Iterator<Item = usize>, n: usize) -> f64 {
    counts.sum::<usize>() as f64 / n.max(1) as f64
}

/// Per-task and run-wide summary metrics.
pub fn summary_rows(report: &ExperimentReport) -> Vec<SummaryRow> {
    let num_tasks = report.config.data.num_tasks;
    let mut rows = Vec::new();
    let mut push = |metric: &str, task: Option<usize>, value: f64| {
        rows.push(SummaryRow { metric: metric.to_string(), task, value })
    };
    let mut task_means = Vec::new();
    for t in 0..num_tasks {
        let finals: Vec<f64> = report
            .clients
            .iter()
            .zip(&report.final_test_scores)
            .filter(|(c, _)| c.task_id == t)
            .map(|(_, &s)| s)
            .collect();
        let fin = mean(&finals).unwrap_or(f64::NAN);
        task_means.push(fin);
        push("final_test_accuracy", Some(t), fin);
        let series: Vec<f64> = report.rounds.iter().filter_map(|r| r.task_scores[t]).collect();
        let best = series.iter().copied().fold(f64::NAN, f64::max);
        push("best_round_score", Some(t), best);
        push("last_round_score", Some(t), series.last().copied().unwrap_or(f64::NAN));
        let rtt = rounds_to_target(&series, 0.95).map(|r| r as f64).unwrap_or(f64::NAN);
        push("rounds_to_95pct_best", Some(t), rtt);
    }
    push("mean_final_test_accuracy", None, mean(&task_means).unwrap_or(f64::NAN));

    let rows_all = round_rows(report);
    let up: u64 = rows_all.iter().map(|r| r.uplink_bytes).sum();
    let down: u64 = rows_all.iter().map(|r| r.downlink_bytes).sum();
    push("total_uplink_bytes", None, up as f64);
    push("total_downlink_bytes", None, down as f64);
    push("total_comm_bytes", None, (up + down) as f64);
    push("total_comm_gib", None, to_gib(up + down));

    let peak = report
        .rounds
        .iter()
        .flat_map(|r| r.entries.iter().map(|e| e.mem_bytes))
        .chain(std::iter::once(report.stage_one_peak_bytes))
        .max()
        .unwrap_or(0);
    push("peak_memory_bytes", None, peak as f64);
    push("peak_memory_gib", None, to_gib(peak));
    let violations = report
        .rounds
        .iter()
        .flat_map(|r| r.entries.iter())
        .filter(|e| e.mem_bytes > report.clients[e.client_id].budget)
        .count();
    push("budget_violations", None, violations as f64);

    let n = report.clients.len();
    push("initial_avg_expert_count", None, avg_experts(report.initial_plans.iter().map(|p| p.expert_count()), n));
    push("final_avg_expert_count", None, avg_experts(report.clients.iter().map(|c| c.plan.expert_count()), n));
    push("frozen_clients", None, report.clients.iter().filter(|c| c.frozen).count() as f64);
    let count = |f: fn(&AdjustEvent) -> bool| report.events.iter().filter(|(_, e)| f(e)).count() as f64;
    push("adjustments", None, count(|e| matches!(e, AdjustEvent::Adjusted { .. })));
    push("accepted_adjustments", None, count(|e| matches!(e, AdjustEvent::Accepted { .. })));
    push("reverts", None, count(|e| matches!(e, AdjustEvent::Reverted { .. })));
    let failed = report.rounds.iter().flat_map(|r| r.entries.iter()).filter(|e| e.failed).count();
    push("failed_client_rounds", None, failed as f64);
    rows
}

/// Write every report file plus the resolved config into `dir`.
pub fn write_reports(report: &ExperimentReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_rows(&dir.join(ROUNDS_FILE), &round_rows(report))?;
    write_rows(&dir.join(MAP_FILE), &map_rows(report))?;
    write_rows(&dir.join(SUMMARY_FILE), &summary_rows(report))?;
    write_rows(&dir.join(SIMILARITY_FILE), &similarity_rows(report)?)?;
    let latest: Vec<ActivationProfile> = report.clients.iter().map(|c| c.profile.clone()).collect();
    write_rows(&dir.join(PROFILES_FILE), &profile_rows(&latest))?;
    std::fs::write(dir.join(CONFIG_ECHO_FILE), report.config.to_toml_string()?)?;
    Ok(())
}

pub fn read_round_rows(path: &Path) -> Result<Vec<RoundRow>> {
    read_rows(path)
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    read_rows(path)
}

/// Look up one summary value.
pub fn summary_value(rows: &[SummaryRow], metric: &str, task: Option<usize>) -> Option<f64> {
    rows.iter().find(|r| r.metric == metric && r.task == task).map(|r| r.value)
}

/// Per-task c_v and CVI of `final_test_accuracy` across several runs.
pub fn cvi_from_summaries(summaries: &[Vec<SummaryRow>]) -> Result<(Vec<f64>, f64)> {
    if summaries.len() < 2 {
        return Err(Error::UndefinedMetric("CVI needs at least two settings".into()));
    }
    let tasks: usize = summaries[0]
        .iter()
        .filter(|r| r.metric == "final_test_accuracy")
        .filter_map(|r| r.task)
        .map(|t| t + 1)
        .max()
        .unwrap_or(0);
    if tasks == 0 {
        return Err(Error::Input("summary has no final_test_accuracy rows".into()));
    }
    let mut cvs = Vec::with_capacity(tasks);
    for t in 0..tasks {
        let scores = summaries
            .iter()
            .map(|s| {
                summary_value(s, "final_test_accuracy", Some(t))
                    .ok_or_else(|| Error::Input(format!("task {t} missing from a summary")))
            })
            .collect::<Result<Vec<f64>>>()?;
        cvs.push(coefficient_of_variation(&scores)?);
    }
    let cvi = cvs.iter().sum::<f64>() / cvs.len() as f64;
    Ok((cvs, cvi))
}

/// Read one client's profile from a `client,layer,expert,p` or
/// `layer,expert,p` CSV.
pub fn read_profile_csv(path: &Path, client: Option<usize>) -> Result<ActivationProfile> {
    #[derive(Deserialize)]
    struct Row {
        client: Option<usize>,
        layer: usize,
        expert: usize,
        p: f64,
    }
    let rows: Vec<Row> = read_rows(path)?;
    let want = client.or_else(|| rows.first().and_then(|r| r.client));
    let rows: Vec<&Row> = rows.iter().filter(|r| want.is_none() || r.client == want || r.client.is_none()).collect();
    if rows.is_empty() {
        return Err(Error::Input(format!("{}: no profile rows", path.display())));
    }
    let layers = rows.iter().map(|r| r.layer).max().unwrap() + 1;
    let experts = rows.iter().map(|r| r.expert).max().unwrap() + 1;
    let mut probs = Array2::<f64>::from_elem((layers, experts), f64::NAN);
    for r in &rows {
        probs[[r.layer, r.expert]] = r.p;
    }
    if probs.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Input(format!("{}: profile incomplete or has invalid entries", path.display())));
    }
    Ok(ActivationProfile {
        client_id: want.unwrap_or(0),
        probs,
        counts: None,
        token_count: 0,
    })
}

/// Mean of a metric over several summaries, skipping missing entries.
pub fn mean_summary_value(summaries: &[Vec<SummaryRow>], metric: &str, task: Option<usize>) -> Option<f64> {
    let v: Vec<f64> = summaries.iter().filter_map(|s| summary_value(s, metric, task)).collect();
    mean(&v)
}
