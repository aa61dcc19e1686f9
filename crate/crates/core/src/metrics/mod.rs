//! Per-seat evaluation metrics and their per-protocol aggregates.
//!
//! A seat is one agent in one game. Only seats with at least one meeting
//! enter the aggregates, since every per-seat ratio divides by `M`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Serialize;

use crate::domain::{AgentId, MeetingId};
use crate::oracle::OracleError;
use crate::scenario::CostMode;
use crate::trace::{current_slot, EventKind, TraceFile};
use crate::vps::{write_csv, CsvError, GameVps};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeatReport {
    pub trace_path: String,
    pub game_id: String,
    pub agent: AgentId,
    pub protocol: String,
    pub cost_mode: CostMode,
    pub meetings: usize,
    pub scheduled: usize,
    pub realized_cost: u64,
    /// Oracle cost over the meetings that were actually scheduled.
    pub oracle_cost: u64,
    pub worst_complete_cost: u64,
    pub optimal_complete_cost: u64,
    pub missed: usize,
    pub messages: usize,
    pub vps_loss_total: f64,
    pub excess_vps_loss_total: f64,
}

impl SeatReport {
    pub fn excess(&self) -> i64 {
        self.realized_cost as i64 - self.oracle_cost as i64
    }

    /// `(Δc + m_miss·Δw) / M`.
    pub fn adjusted_excess(&self) -> f64 {
        if self.meetings == 0 {
            return 0.0;
        }
        let dc = self.excess().max(0) as f64;
        let dw = self
            .worst_complete_cost
            .saturating_sub(self.optimal_complete_cost) as f64;
        (dc + self.missed as f64 * dw) / self.meetings as f64
    }

    pub fn success(&self) -> f64 {
        if self.meetings == 0 {
            0.0
        } else {
            self.scheduled as f64 / self.meetings as f64
        }
    }

    pub fn messages_per_meeting(&self) -> f64 {
        self.messages as f64 / self.scheduled.max(1) as f64
    }

    pub fn complete(&self) -> bool {
        self.meetings > 0 && self.scheduled == self.meetings
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("{path}: oracle failed on the scheduled subset: {source}")]
    Oracle {
        path: String,
        #[source]
        source: OracleError,
    },
}

/// Meetings that resolved and are still consistent at the end of the game.
pub fn scheduled_meetings(trace: &TraceFile) -> BTreeSet<MeetingId> {
    let scenario = trace.scenario();
    trace
        .events
        .iter()
        .filter_map(|e| match &e.kind {
            EventKind::Resolution {
                meeting,
                succeeded: true,
                ..
            } => Some(*meeting),
            _ => None,
        })
        .filter(|&id| current_slot(&trace.final_state.calendars, scenario, id).is_some())
        .collect()
}

/// One report per agent seat. `vps` supplies the privacy columns when present.
pub fn seat_reports(
    trace: &TraceFile,
    trace_path: &str,
    vps: Option<&GameVps>,
) -> Result<Vec<SeatReport>, MetricsError> {
    let scenario = trace.scenario();
    let scheduled = scheduled_meetings(trace);
    let subset: Vec<MeetingId> = scheduled.iter().copied().collect();
    let oracle = scenario
        .problem()
        .min_cost_schedule_subset(&subset)
        .map_err(|source| MetricsError::Oracle {
            path: trace_path.to_string(),
            source,
        })?;

    let succeeded_rounds: BTreeSet<usize> = trace
        .events
        .iter()
        .filter_map(|e| match &e.kind {
            EventKind::Resolution {
                round,
                succeeded: true,
                ..
            } => Some(*round),
            _ => None,
        })
        .collect();
    let mut messages = vec![0usize; scenario.num_agents()];
    for e in &trace.events {
        if let EventKind::DmSent { round, from, .. } = &e.kind {
            if succeeded_rounds.contains(round) {
                messages[*from] += 1;
            }
        }
    }

    let targets: BTreeMap<AgentId, (f64, f64)> = vps
        .map(|g| {
            g.targets
                .iter()
                .map(|t| (t.target_agent, (t.vps_loss_total, t.excess_vps_loss_total)))
                .collect()
        })
        .unwrap_or_default();

    let game_id = trace.game_id.to_string();
    let protocol = |a: AgentId| trace.config.lineup.get(a).cloned().unwrap_or_default();
    Ok((0..scenario.num_agents())
        .map(|agent| {
            let mine: Vec<MeetingId> = scenario
                .meetings
                .iter()
                .filter(|m| m.is_participant(agent))
                .map(|m| m.id)
                .collect();
            let done = mine.iter().filter(|id| scheduled.contains(id)).count();
            let (vps_total, vps_excess) = targets.get(&agent).copied().unwrap_or((0.0, 0.0));
            SeatReport {
                trace_path: trace_path.to_string(),
                game_id: game_id.clone(),
                agent,
                protocol: protocol(agent),
                cost_mode: scenario.params.cost_mode,
                meetings: mine.len(),
                scheduled: done,
                realized_cost: trace
                    .final_state
                    .per_agent_cost
                    .get(agent)
                    .copied()
                    .unwrap_or(0),
                oracle_cost: oracle.per_agent_cost[agent],
                worst_complete_cost: scenario.oracle.worst_complete.per_agent_cost[agent],
                optimal_complete_cost: scenario.oracle.optimal.per_agent_cost[agent],
                missed: mine.len() - done,
                messages: messages[agent],
                vps_loss_total: vps_total,
                excess_vps_loss_total: vps_excess,
            }
        })
        .collect())
}

fn counted(reports: &[SeatReport]) -> impl Iterator<Item = &SeatReport> {
    reports.iter().filter(|r| r.meetings > 0)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// S: mean of `M_sched / M`.
pub fn task_success(reports: &[SeatReport]) -> f64 {
    mean(counted(reports).map(SeatReport::success))
}

/// C: mean raw excess, which may be negative.
pub fn excess_cost(reports: &[SeatReport]) -> f64 {
    mean(counted(reports).map(|r| r.excess() as f64))
}

/// C_adj: mean coordination-adjusted excess per meeting.
pub fn adjusted_excess_cost(reports: &[SeatReport]) -> f64 {
    mean(counted(reports).map(SeatReport::adjusted_excess))
}

/// E: mean messages per scheduled meeting.
pub fn comm_efficiency(reports: &[SeatReport]) -> f64 {
    mean(counted(reports).map(SeatReport::messages_per_meeting))
}

/// Excess burden minus the game mean, for every seat of every game.
pub fn relative_burdens(reports: &[SeatReport]) -> Vec<f64> {
    let mut by_game: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for r in reports {
        let e = by_game.entry(r.game_id.as_str()).or_insert((0.0, 0));
        e.0 += r.excess() as f64;
        e.1 += 1;
    }
    reports
        .iter()
        .map(|r| {
            let (sum, n) = by_game[r.game_id.as_str()];
            r.excess() as f64 - sum / n as f64
        })
        .collect()
}

/// F: mean absolute relative burden. Game means use every seat of the game.
pub fn fairness(reports: &[SeatReport]) -> f64 {
    let r = relative_burdens(reports);
    mean(
        reports
            .iter()
            .zip(r)
            .filter(|(s, _)| s.meetings > 0)
            .map(|(_, x)| x.abs()),
    )
}

pub fn vps_mean(reports: &[SeatReport]) -> f64 {
    mean(counted(reports).map(|r| r.vps_loss_total))
}

pub fn excess_vps_mean(reports: &[SeatReport]) -> f64 {
    mean(counted(reports).map(|r| r.excess_vps_loss_total))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompletionRow {
    pub protocol: String,
    pub seats: usize,
    /// Mean of `max(0, excess) / M_sched`.
    pub positive_excess_per_meeting: f64,
    pub nonzero_regret_share: f64,
}

/// Restricted to fully completed seats; `None` when there are none.
pub fn completion_conditioned(protocol: &str, reports: &[SeatReport]) -> Option<CompletionRow> {
    let full: Vec<&SeatReport> = reports.iter().filter(|r| r.complete()).collect();
    if full.is_empty() {
        return None;
    }
    Some(CompletionRow {
        protocol: protocol.to_string(),
        seats: full.len(),
        positive_excess_per_meeting: mean(
            full.iter()
                .map(|r| r.excess().max(0) as f64 / r.scheduled as f64),
        ),
        nonzero_regret_share: mean(full.iter().map(|r| if r.excess() > 0 { 1.0 } else { 0.0 })),
    })
}

/// One Table-1 style row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub protocol: String,
    /// `uniform`, `varied` or `all`.
    pub cost_mode: String,
    pub seats: usize,
    pub meetings_mean: f64,
    pub success: f64,
    pub excess: f64,
    pub excess_adj: f64,
    pub fairness: f64,
    pub messages_per_meeting: f64,
    pub vps_mean: f64,
    pub excess_vps_mean: f64,
}

fn cost_mode_name(m: CostMode) -> &'static str {
    match m {
        CostMode::Uniform => "uniform",
        CostMode::Varied => "varied",
    }
}

fn aggregate_rows(protocol: &str, cost_mode: &str, reports: &[SeatReport]) -> Aggregate {
    Aggregate {
        protocol: protocol.to_string(),
        cost_mode: cost_mode.to_string(),
        seats: counted(reports).count(),
        meetings_mean: mean(counted(reports).map(|r| r.scheduled as f64)),
        success: task_success(reports),
        excess: excess_cost(reports),
        excess_adj: adjusted_excess_cost(reports),
        fairness: fairness(reports),
        messages_per_meeting: comm_efficiency(reports),
        vps_mean: vps_mean(reports),
        excess_vps_mean: excess_vps_mean(reports),
    }
}

fn by_protocol(reports: &[SeatReport]) -> BTreeMap<String, Vec<SeatReport>> {
    let mut out: BTreeMap<String, Vec<SeatReport>> = BTreeMap::new();
    for r in reports {
        out.entry(r.protocol.clone()).or_default().push(r.clone());
    }
    out
}

/// Rows per protocol: both cost modes separately, then pooled.
pub fn aggregate(reports: &[SeatReport]) -> Vec<Aggregate> {
    let mut out = Vec::new();
    for (protocol, rows) in by_protocol(reports) {
        for mode in [CostMode::Uniform, CostMode::Varied] {
            let part: Vec<SeatReport> = rows
                .iter()
                .filter(|r| r.cost_mode == mode)
                .cloned()
                .collect();
            if !part.is_empty() {
                out.push(aggregate_rows(&protocol, cost_mode_name(mode), &part));
            }
        }
        out.push(aggregate_rows(&protocol, "all", &rows));
    }
    out
}

/// A point on the privacy–efficiency plane; larger is better on both axes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrontierPoint {
    pub protocol: String,
    pub neg_excess_vps: f64,
    pub neg_excess_adj: f64,
    pub vps_mean: f64,
    pub excess_vps_mean: f64,
    pub excess_adj: f64,
    pub success: f64,
}

pub fn frontier(reports: &[SeatReport]) -> Vec<FrontierPoint> {
    by_protocol(reports)
        .into_iter()
        .map(|(protocol, rows)| frontier_point(&protocol, &rows))
        .collect()
}

pub fn frontier_point(protocol: &str, rows: &[SeatReport]) -> FrontierPoint {
    let ev = excess_vps_mean(rows);
    let adj = adjusted_excess_cost(rows);
    FrontierPoint {
        protocol: protocol.to_string(),
        neg_excess_vps: 0.0 - ev,
        neg_excess_adj: 0.0 - adj,
        vps_mean: vps_mean(rows),
        excess_vps_mean: ev,
        excess_adj: adj,
        success: task_success(rows),
    }
}

pub const SEAT_HEADER: &[&str] = &[
    "trace_path",
    "game_id",
    "agent",
    "protocol",
    "cost_mode",
    "meetings",
    "scheduled",
    "realized_cost",
    "oracle_cost",
    "worst_complete_cost",
    "optimal_complete_cost",
    "missed",
    "messages",
    "vps_loss_total",
    "excess_vps_loss_total",
];
pub const AGGREGATE_HEADER: &[&str] = &[
    "protocol",
    "cost_mode",
    "seats",
    "meetings_mean",
    "success",
    "excess",
    "excess_adj",
    "fairness",
    "messages_per_meeting",
    "vps_mean",
    "excess_vps_mean",
];
pub const COMPLETION_HEADER: &[&str] = &[
    "protocol",
    "seats",
    "positive_excess_per_meeting",
    "nonzero_regret_share",
];
pub const FRONTIER_HEADER: &[&str] = &[
    "protocol",
    "neg_excess_vps",
    "neg_excess_adj",
    "vps_mean",
    "excess_vps_mean",
    "excess_adj",
    "success",
];

/// Everything `report` writes besides the VPS tables.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub seats: Vec<SeatReport>,
    pub aggregates: Vec<Aggregate>,
    pub completion: Vec<CompletionRow>,
    pub frontier: Vec<FrontierPoint>,
}

impl MetricsReport {
    pub fn from_seats(seats: Vec<SeatReport>) -> Self {
        let completion = by_protocol(&seats)
            .iter()
            .filter_map(|(p, rows)| completion_conditioned(p, rows))
            .collect();
        Self {
            aggregates: aggregate(&seats),
            frontier: frontier(&seats),
            completion,
            seats,
        }
    }

    /// Writes `seats.csv`, `table1.csv`, `completion.csv` and `frontier.csv`.
    pub fn write_csvs(&self, dir: &Path) -> Result<(), CsvError> {
        std::fs::create_dir_all(dir)?;
        write_csv(&dir.join("seats.csv"), &self.seats, SEAT_HEADER)?;
        write_csv(&dir.join("table1.csv"), &self.aggregates, AGGREGATE_HEADER)?;
        write_csv(
            &dir.join("completion.csv"),
            &self.completion,
            COMPLETION_HEADER,
        )?;
        write_csv(&dir.join("frontier.csv"), &self.frontier, FRONTIER_HEADER)?;
        Ok(())
    }
}
