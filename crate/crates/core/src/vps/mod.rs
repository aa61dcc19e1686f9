//! Protocol-semantic privacy loss.
//!
//! Every delivered typed message is replayed into beliefs that the recipient
//! (observer) holds about the sender (target), one belief vector per
//! `(round, target, observer)`, starting from a uniform prior `p0`. A round's
//! loss for a pair is `Σ_k |Bel[k] - p0|` in slot-equivalent units.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use serde::Serialize;

use crate::domain::{apply_batch, ActionBatch, AgentId, Calendar, MeetingSpec, Slot};
use crate::engine::Phase;
use crate::protocols::{
    insertion_cost, DsmMessage, ImapMessage, SdMessage, SdStatus, TypedMessage, SATISFACTION_LEVELS,
};
use crate::trace::{EventKind, TraceFile};

pub const DEFAULT_PRIOR: f64 = 0.5;

/// Slot-equivalents subtracted from each (game, target) total.
pub const DEFAULT_FLOOR: f64 = 5.0;

/// Strength of SD proposals: strong but not a hard feasibility report.
pub const SD_PROPOSE_STRENGTH: f64 = 0.70;
pub const SD_PROPOSE_EVIDENCE: f64 = 0.85;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct VpsConfig {
    #[serde(default = "default_prior")]
    pub prior: f64,
    #[serde(default = "default_floor")]
    pub floor: f64,
}

fn default_prior() -> f64 {
    DEFAULT_PRIOR
}

fn default_floor() -> f64 {
    DEFAULT_FLOOR
}

impl Default for VpsConfig {
    fn default() -> Self {
        Self {
            prior: DEFAULT_PRIOR,
            floor: DEFAULT_FLOOR,
        }
    }
}

/// `(1-α)·before + α·e`.
pub fn nudge(before: f64, evidence: f64, strength: f64) -> f64 {
    (1.0 - strength) * before + strength * evidence
}

/// One inferred fact about a slot of the sender's calendar.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evidence {
    pub slot: Slot,
    pub evidence: f64,
    pub strength: f64,
    pub source: &'static str,
}

/// An applied [`Evidence`] with the belief it moved.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateEvent {
    pub evidence: Evidence,
    pub belief_before: f64,
    pub belief_after: f64,
}

/// Applies one update in place; only `slot` changes. Out-of-range slots are ignored.
pub fn apply_update(beliefs: &mut [f64], ev: Evidence) -> Option<UpdateEvent> {
    let cell = beliefs.get_mut(ev.slot)?;
    let before = *cell;
    *cell = nudge(before, ev.evidence, ev.strength);
    Some(UpdateEvent {
        evidence: ev,
        belief_before: before,
        belief_after: *cell,
    })
}

pub fn round_vps(beliefs: &[f64], prior: f64) -> f64 {
    beliefs.iter().map(|b| (b - prior).abs()).sum()
}

/// Request state needed to interpret replies, keyed by `(round, asker, answerer)`.
#[derive(Debug, Default)]
pub struct ReplayContext {
    cost_requests: BTreeMap<(usize, AgentId, AgentId), Vec<Slot>>,
    plans: BTreeMap<(usize, AgentId, AgentId), BTreeMap<u32, Slot>>,
}

fn exact(slot: Slot, evidence: f64, source: &'static str) -> Evidence {
    Evidence {
        slot,
        evidence,
        strength: 1.0,
        source,
    }
}

fn status_evidence(status: SdStatus) -> f64 {
    match status {
        SdStatus::Pending => 1.0,
        SdStatus::Impossible => 0.0,
    }
}

/// Belief updates one delivered message implies about its sender.
pub fn typed_message_to_updates(
    msg: &TypedMessage,
    ctx: &mut ReplayContext,
    round: usize,
    sender: AgentId,
    recipient: AgentId,
) -> Vec<Evidence> {
    match msg {
        TypedMessage::Imap(m) => match m {
            ImapMessage::CostRequest { slots, .. } => {
                ctx.cost_requests
                    .insert((round, sender, recipient), slots.clone());
                Vec::new()
            }
            ImapMessage::Costs { costs, .. } => {
                let Some(requested) = ctx.cost_requests.get(&(round, recipient, sender)) else {
                    return Vec::new();
                };
                requested
                    .iter()
                    .zip(costs)
                    .map(|(&slot, c)| {
                        exact(slot, if c.is_some() { 1.0 } else { 0.0 }, "imap.costs")
                    })
                    .collect()
            }
            ImapMessage::Decision { slot, .. } => slot
                .iter()
                .map(|&s| exact(s, 1.0, "imap.decision"))
                .collect(),
        },
        TypedMessage::Sd(m) => match m {
            SdMessage::Propose { slot, .. } => vec![Evidence {
                slot: *slot,
                evidence: SD_PROPOSE_EVIDENCE,
                strength: SD_PROPOSE_STRENGTH,
                source: "sd.propose",
            }],
            SdMessage::ProposeReschedule { slot, .. } => vec![Evidence {
                slot: *slot,
                evidence: SD_PROPOSE_EVIDENCE,
                strength: SD_PROPOSE_STRENGTH,
                source: "sd.propose_reschedule",
            }],
            SdMessage::Reply { slot, status, .. } => {
                vec![exact(*slot, status_evidence(*status), "sd.reply")]
            }
            SdMessage::RescheduleReply { slot, status, .. } => {
                vec![exact(
                    *slot,
                    status_evidence(*status),
                    "sd.reschedule_reply",
                )]
            }
            _ => Vec::new(),
        },
        TypedMessage::Dsm(m) => match m {
            DsmMessage::Proposals { plans, .. } => {
                let map = ctx.plans.entry((round, sender, recipient)).or_default();
                plans
                    .iter()
                    .map(|p| {
                        map.insert(p.plan_id, p.slot);
                        exact(p.slot, 1.0, "dsm.proposals")
                    })
                    .collect()
            }
            DsmMessage::Scores { scores, .. } => {
                let Some(map) = ctx.plans.get(&(round, recipient, sender)) else {
                    return Vec::new();
                };
                let top = f64::from(SATISFACTION_LEVELS - 1);
                scores
                    .iter()
                    .filter_map(|ps| {
                        let slot = *map.get(&ps.plan_id)?;
                        let e = if ps.score == 0 {
                            0.0
                        } else {
                            f64::from(ps.score) / top
                        };
                        Some(exact(slot, e, "dsm.scores"))
                    })
                    .collect()
            }
            DsmMessage::Decision { slot, .. } => slot
                .iter()
                .map(|&s| exact(s, 1.0, "dsm.decision"))
                .collect(),
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvidenceRow {
    pub trace_path: String,
    pub game_id: String,
    pub event_index: u64,
    pub round: usize,
    pub target_agent: AgentId,
    pub observer_agent: AgentId,
    pub slot: Slot,
    pub source: String,
    pub evidence: f64,
    pub strength: f64,
    pub belief_before: f64,
    pub belief_after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairRoundRow {
    pub trace_path: String,
    pub game_id: String,
    pub round: usize,
    pub target_agent: AgentId,
    pub observer_agent: AgentId,
    pub target_is_participant: bool,
    pub observer_is_participant: bool,
    pub num_agents: usize,
    pub num_slots: usize,
    pub observations: usize,
    /// `Σ|p0 - truth|`, truth being the target's one-hop feasibility at round start.
    pub prior_distance_to_ideal: f64,
    pub posterior_distance_to_ideal: f64,
    pub vps_loss: f64,
    pub vps_loss_per_slot: f64,
    pub prior: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GameSummaryRow {
    pub trace_path: String,
    pub game_id: String,
    pub protocol: String,
    pub num_rounds: usize,
    pub vps_loss_total: f64,
    /// Total over rounds.
    pub vps_loss_mean: f64,
    pub participant_pair_vps_loss_total: f64,
    pub participant_pair_vps_loss_mean: f64,
    pub observation_count: usize,
    pub unparsed_messages: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GameTargetRow {
    pub trace_path: String,
    pub game_id: String,
    pub target_agent: AgentId,
    pub vps_loss_total: f64,
    pub excess_vps_loss_total: f64,
    pub participant_pair_vps_loss_total: f64,
    pub floor: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GameVps {
    pub evidence: Vec<EvidenceRow>,
    pub pairs: Vec<PairRoundRow>,
    pub summary: Option<GameSummaryRow>,
    pub targets: Vec<GameTargetRow>,
}

/// Calendars at the start of every round, rebuilt from `batch_applied` events.
fn round_start_calendars(trace: &TraceFile) -> BTreeMap<usize, (MeetingSpec, Vec<Calendar>)> {
    let mut calendars = trace.scenario().calendars.clone();
    let mut meetings: BTreeMap<usize, MeetingSpec> = BTreeMap::new();
    let mut out = BTreeMap::new();
    for e in &trace.events {
        match &e.kind {
            EventKind::RoundStart { round, meeting, .. } => {
                meetings.insert(*round, meeting.clone());
                out.insert(*round, (meeting.clone(), calendars.clone()));
            }
            EventKind::BatchApplied {
                round,
                phase,
                agent,
                actions,
                ..
            } => {
                let incoming = (*phase == Phase::Decision)
                    .then(|| meetings.get(round))
                    .flatten();
                calendars[*agent] = apply_batch(
                    &calendars[*agent],
                    &ActionBatch::new(actions.clone()),
                    incoming,
                )
                .calendar;
            }
            _ => {}
        }
    }
    out
}

fn truth(cal: &Calendar) -> Vec<f64> {
    (0..cal.num_slots())
        .map(|k| {
            if insertion_cost(cal, k).is_some() {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Replays one trace into the four VPS tables.
pub fn analyze_trace(trace: &TraceFile, trace_path: &str, config: &VpsConfig) -> GameVps {
    let scenario = trace.scenario();
    let n = scenario.num_agents();
    let s = scenario.num_slots();
    let game_id = trace.game_id.to_string();
    let starts = round_start_calendars(trace);
    let mut ctx = ReplayContext::default();
    let mut beliefs: BTreeMap<(usize, AgentId, AgentId), (Vec<f64>, usize)> = BTreeMap::new();
    let mut out = GameVps::default();
    let mut unparsed = 0;

    for e in &trace.events {
        let EventKind::DmSent {
            round,
            from,
            to,
            content,
            ..
        } = &e.kind
        else {
            continue;
        };
        let Some(msg) = TypedMessage::parse(content) else {
            unparsed += 1;
            continue;
        };
        for &observer in to {
            for ev in typed_message_to_updates(&msg, &mut ctx, *round, *from, observer) {
                let (vec, count) = beliefs
                    .entry((*round, *from, observer))
                    .or_insert_with(|| (vec![config.prior; s], 0));
                if let Some(u) = apply_update(vec, ev) {
                    *count += 1;
                    out.evidence.push(EvidenceRow {
                        trace_path: trace_path.to_string(),
                        game_id: game_id.clone(),
                        event_index: e.event_index,
                        round: *round,
                        target_agent: *from,
                        observer_agent: observer,
                        slot: ev.slot,
                        source: ev.source.to_string(),
                        evidence: ev.evidence,
                        strength: ev.strength,
                        belief_before: u.belief_before,
                        belief_after: u.belief_after,
                    });
                }
            }
        }
    }

    let prior_vec = vec![config.prior; s];
    let mut target_totals = vec![0.0; n];
    let mut target_pp = vec![0.0; n];
    let (mut total, mut pp_total, mut observations) = (0.0, 0.0, 0);
    for (round, (meeting, calendars)) in &starts {
        for target in 0..n {
            let t = truth(&calendars[target]);
            for observer in (0..n).filter(|&o| o != target) {
                let (post, count) = beliefs
                    .get(&(*round, target, observer))
                    .map_or((&prior_vec, 0), |(v, c)| (v, *c));
                let loss = round_vps(post, config.prior);
                let both = meeting.is_participant(target) && meeting.is_participant(observer);
                total += loss;
                target_totals[target] += loss;
                if both {
                    pp_total += loss;
                    target_pp[target] += loss;
                }
                observations += count;
                out.pairs.push(PairRoundRow {
                    trace_path: trace_path.to_string(),
                    game_id: game_id.clone(),
                    round: *round,
                    target_agent: target,
                    observer_agent: observer,
                    target_is_participant: meeting.is_participant(target),
                    observer_is_participant: meeting.is_participant(observer),
                    num_agents: n,
                    num_slots: s,
                    observations: count,
                    prior_distance_to_ideal: distance(&prior_vec, &t),
                    posterior_distance_to_ideal: distance(post, &t),
                    vps_loss: loss,
                    vps_loss_per_slot: if s == 0 { 0.0 } else { loss / s as f64 },
                    prior: config.prior,
                });
            }
        }
    }
    let rounds = starts.len();
    let per_round = |x: f64| if rounds == 0 { 0.0 } else { x / rounds as f64 };
    out.summary = Some(GameSummaryRow {
        trace_path: trace_path.to_string(),
        game_id: game_id.clone(),
        protocol: trace.config.lineup.first().cloned().unwrap_or_default(),
        num_rounds: rounds,
        vps_loss_total: total,
        vps_loss_mean: per_round(total),
        participant_pair_vps_loss_total: pp_total,
        participant_pair_vps_loss_mean: per_round(pp_total),
        observation_count: observations,
        unparsed_messages: unparsed,
    });
    out.targets = (0..n)
        .map(|t| GameTargetRow {
            trace_path: trace_path.to_string(),
            game_id: game_id.clone(),
            target_agent: t,
            vps_loss_total: target_totals[t],
            excess_vps_loss_total: (target_totals[t] - config.floor).max(0.0),
            participant_pair_vps_loss_total: target_pp[t],
            floor: config.floor,
        })
        .collect();
    out
}

/// The four tables across many games.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VpsTables {
    pub evidence: Vec<EvidenceRow>,
    pub pairs: Vec<PairRoundRow>,
    pub games: Vec<GameSummaryRow>,
    pub targets: Vec<GameTargetRow>,
}

impl VpsTables {
    pub fn push(&mut self, game: GameVps) {
        self.evidence.extend(game.evidence);
        self.pairs.extend(game.pairs);
        self.games.extend(game.summary);
        self.targets.extend(game.targets);
    }

    /// Writes `belief_evidence.csv`, `pair_round_vps.csv`, `game_summary.csv`
    /// and `game_target_summary.csv` into `dir`.
    pub fn write_csvs(&self, dir: &Path) -> Result<(), CsvError> {
        std::fs::create_dir_all(dir)?;
        write_csv(
            &dir.join("belief_evidence.csv"),
            &self.evidence,
            EVIDENCE_HEADER,
        )?;
        write_csv(&dir.join("pair_round_vps.csv"), &self.pairs, PAIR_HEADER)?;
        write_csv(&dir.join("game_summary.csv"), &self.games, GAME_HEADER)?;
        write_csv(
            &dir.join("game_target_summary.csv"),
            &self.targets,
            TARGET_HEADER,
        )?;
        Ok(())
    }
}

const EVIDENCE_HEADER: &[&str] = &[
    "trace_path",
    "game_id",
    "event_index",
    "round",
    "target_agent",
    "observer_agent",
    "slot",
    "source",
    "evidence",
    "strength",
    "belief_before",
    "belief_after",
];
const PAIR_HEADER: &[&str] = &[
    "trace_path",
    "game_id",
    "round",
    "target_agent",
    "observer_agent",
    "target_is_participant",
    "observer_is_participant",
    "num_agents",
    "num_slots",
    "observations",
    "prior_distance_to_ideal",
    "posterior_distance_to_ideal",
    "vps_loss",
    "vps_loss_per_slot",
    "prior",
];
const GAME_HEADER: &[&str] = &[
    "trace_path",
    "game_id",
    "protocol",
    "num_rounds",
    "vps_loss_total",
    "vps_loss_mean",
    "participant_pair_vps_loss_total",
    "participant_pair_vps_loss_mean",
    "observation_count",
    "unparsed_messages",
];
const TARGET_HEADER: &[&str] = &[
    "trace_path",
    "game_id",
    "target_agent",
    "vps_loss_total",
    "excess_vps_loss_total",
    "participant_pair_vps_loss_total",
    "floor",
];

#[derive(Debug, thiserror::Error)]
pub enum CsvError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Writes rows with an explicit header so empty tables still carry one.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<(), CsvError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
