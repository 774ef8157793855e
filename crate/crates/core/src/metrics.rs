//! Run-level metrics: throughput, transmission rate, true skip rate, risk
//! and fidelity.

use serde::{Deserialize, Serialize};

use crate::engine::{EngineConfig, LatencyModel, Method, RoundRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    pub episodes: usize,
    pub rounds: usize,
    pub tokens_generated: usize,
    pub total_time_s: f64,
    pub throughput_tok_per_s: f64,
    /// Transmission rate: share of rounds that used the uplink.
    pub tr: f64,
    /// True skip rate; needs oracle mode.
    pub tsr: Option<f64>,
    pub mean_beta: Option<f64>,
    pub mean_u: Option<f64>,
    /// Mean counterfactual rejection probability over skipped rounds.
    pub realized_risk: Option<f64>,
    /// Mean per-round TV distance of the response law from `y`.
    pub fidelity_tv: Option<f64>,
}

impl RunSummary {
    pub fn skip_rate(&self) -> f64 {
        if self.rounds == 0 {
            0.0
        } else {
            1.0 - self.tr
        }
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn summarize(cfg: &EngineConfig, records: &[RoundRecord]) -> RunSummary {
    let rounds = records.len();
    let total_time_s: f64 = records.iter().map(|r| r.round_time_s).sum();
    let transmitted = records.iter().filter(|r| r.delta == 1).count();
    let oracle = cfg.oracle_mode;
    let episodes = records.iter().map(|r| r.episode + 1).max().unwrap_or(0);
    RunSummary {
        method: cfg.method,
        seed: cfg.seed,
        episodes,
        rounds,
        tokens_generated: rounds,
        total_time_s,
        throughput_tok_per_s: if total_time_s > 0.0 { rounds as f64 / total_time_s } else { 0.0 },
        tr: if rounds > 0 { transmitted as f64 / rounds as f64 } else { 0.0 },
        tsr: if oracle { compute_tsr(records).ok().flatten() } else { None },
        mean_beta: mean(records.iter().filter_map(RoundRecord::beta)),
        mean_u: mean(records.iter().filter_map(|r| r.u)),
        realized_risk: if oracle {
            mean(records.iter().filter(|r| r.delta == 0).filter_map(|r| r.counterfactual_outcome.map(|o| o.beta)))
        } else {
            None
        },
        fidelity_tv: if oracle { mean(records.iter().filter_map(|r| r.tv)) } else { None },
    }
}

/// `#(skipped and would accept) / #(would accept)`, counting actual outcomes
/// of transmitted rounds and counterfactual outcomes of skipped ones.
///
/// `None` when no drafted round would have been accepted.
pub fn compute_tsr(records: &[RoundRecord]) -> Result<Option<f64>> {
    let (mut accepts, mut skipped_accepts) = (0usize, 0usize);
    for r in records.iter().filter(|r| r.draft.is_some()) {
        let outcome = r.verification().ok_or_else(|| {
            Error::InvalidConfig(format!(
                "round {}/{} has no counterfactual outcome; TSR needs oracle mode",
                r.episode, r.t
            ))
        })?;
        if outcome.decision.is_accept() {
            accepts += 1;
            if r.delta == 0 {
                skipped_accepts += 1;
            }
        }
    }
    Ok((accepts > 0).then(|| skipped_accepts as f64 / accepts as f64))
}

/// Result of [`throughput_identity_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityCheck {
    pub failures: Vec<String>,
}

impl IdentityCheck {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Checks every round's time against its latency branch and the summary
/// throughput against `tokens / Σ round_time`.
pub fn throughput_identity_check(records: &[RoundRecord], summary: &RunSummary, latency: &LatencyModel) -> IdentityCheck {
    let mut failures = Vec::new();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()));
    for r in records {
        let expect = if r.draft.is_none() {
            latency.tau_llm_s
        } else {
            latency.round_time(r.delta, r.tau_uplink_s)
        };
        if r.delta == 0 && r.tau_uplink_s != 0.0 {
            failures.push(format!("round {}/{}: skipped but tau_uplink = {}", r.episode, r.t, r.tau_uplink_s));
        }
        if r.delta == 0 && r.draft != Some(r.response) {
            failures.push(format!("round {}/{}: skipped but response differs from draft", r.episode, r.t));
        }
        if !close(r.round_time_s, expect) {
            failures.push(format!("round {}/{}: time {} != {}", r.episode, r.t, r.round_time_s, expect));
        }
    }
    let total: f64 = records.iter().map(|r| r.round_time_s).sum();
    if !records.is_empty() {
        let expect = records.len() as f64 / total;
        if summary.tokens_generated != records.len() {
            failures.push(format!("summary counts {} tokens, trace has {}", summary.tokens_generated, records.len()));
        }
        if (summary.throughput_tok_per_s - expect).abs() > 1e-9 {
            failures.push(format!("throughput {} != {}", summary.throughput_tok_per_s, expect));
        }
    }
    IdentityCheck { failures }
}
