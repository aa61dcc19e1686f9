//! Append-only game event log, persisted as one JSON document per game.
//!
//! The trace carries the full scenario and engine configuration, so every
//! downstream report (metrics, VPS) is a pure function of trace files.

mod replay;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::domain::{
    apply_batch, Action, ActionBatch, AgentId, Calendar, MeetingId, MeetingSpec, Slot,
};
use crate::engine::{Channel, DroppedMessage, EngineConfig, InboxMessage, OutboundMessage, Phase};
use crate::scenario::Scenario;

pub use replay::{replay_check, ReplayReport};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// Placeholder written over wall-clock fields by [`canonicalize`].
pub const CANONICAL_TIMESTAMP: &str = "1970-01-01T00:00:00Z";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub event_index: u64,
    pub timestamp: String,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    GameStart {
        seed: u64,
        num_agents: usize,
        num_slots: usize,
        num_meetings: usize,
        optimal_cost: u64,
        greedy_cost: Option<u64>,
        nosy_agents: Vec<AgentId>,
    },
    AgentRegistered {
        agent: AgentId,
        protocol: String,
        system_prompt: String,
        calendar_render: String,
        is_nosy: bool,
    },
    RoundStart {
        round: usize,
        meeting: MeetingSpec,
        speaker_order: Vec<AgentId>,
    },
    TurnStart {
        round: usize,
        turn: usize,
        phase: Phase,
        agent: AgentId,
        participant: bool,
        inbox: Vec<InboxMessage>,
        prompt: String,
    },
    TurnEnd {
        round: usize,
        turn: usize,
        agent: AgentId,
        actions: Vec<OutboundMessage>,
        thinking: String,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        dropped: Vec<DroppedMessage>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
        usage: Option<serde_json::Value>,
        latency_ms: Option<f64>,
    },
    DmSent {
        round: usize,
        turn: usize,
        from: AgentId,
        to: Vec<AgentId>,
        channel: Channel,
        meeting: MeetingId,
        content: String,
        char_count: usize,
        /// Non-participants this message activated, in activation order.
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        activated: Vec<AgentId>,
    },
    DecideStart {
        round: usize,
        phase: Phase,
        agent: AgentId,
        attempt: usize,
        prompt: String,
        calendar_render: String,
    },
    DecideEnd {
        round: usize,
        phase: Phase,
        agent: AgentId,
        attempt: usize,
        actions: Vec<Action>,
        thinking: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
        usage: Option<serde_json::Value>,
        latency_ms: Option<f64>,
    },
    BatchRejected {
        round: usize,
        phase: Phase,
        agent: AgentId,
        attempt: usize,
        rule: Option<u8>,
        conflict: String,
        actions: Vec<Action>,
    },
    BatchApplied {
        round: usize,
        phase: Phase,
        agent: AgentId,
        actions: Vec<Action>,
        cost: u64,
        calendar_render: String,
    },
    Resolution {
        round: usize,
        meeting: MeetingId,
        succeeded: bool,
        slot: Option<Slot>,
        #[serde(with = "agent_keys")]
        chosen: BTreeMap<AgentId, Option<Slot>>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        broken_meetings: Vec<MeetingId>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
}

impl EventKind {
    pub fn type_name(&self) -> &'static str {
        match self {
            EventKind::GameStart { .. } => "game_start",
            EventKind::AgentRegistered { .. } => "agent_registered",
            EventKind::RoundStart { .. } => "round_start",
            EventKind::TurnStart { .. } => "turn_start",
            EventKind::TurnEnd { .. } => "turn_end",
            EventKind::DmSent { .. } => "dm_sent",
            EventKind::DecideStart { .. } => "decide_start",
            EventKind::DecideEnd { .. } => "decide_end",
            EventKind::BatchRejected { .. } => "batch_rejected",
            EventKind::BatchApplied { .. } => "batch_applied",
            EventKind::Resolution { .. } => "resolution",
        }
    }
}

/// Agent-keyed maps inside tagged events. serde buffers tagged enums, and the
/// buffered form cannot turn JSON string keys back into integers.
mod agent_keys {
    use std::collections::BTreeMap;

    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::domain::AgentId;

    pub fn serialize<V: Serialize, S: Serializer>(
        map: &BTreeMap<AgentId, V>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let keyed: BTreeMap<String, &V> = map.iter().map(|(k, v)| (k.to_string(), v)).collect();
        keyed.serialize(s)
    }

    pub fn deserialize<'de, V: Deserialize<'de>, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<AgentId, V>, D::Error> {
        BTreeMap::<String, V>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| k.parse().map(|k| (k, v)).map_err(D::Error::custom))
            .collect()
    }
}

/// Everything needed to rerun the game.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    pub scenario: Scenario,
    pub engine: EngineConfig,
    /// Protocol tag per agent seat.
    pub lineup: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalState {
    pub total_cost: u64,
    pub per_agent_cost: Vec<u64>,
    pub rounds_succeeded: usize,
    pub rounds_failed: usize,
    pub dm_count: usize,
    pub messages_by_channel: BTreeMap<String, usize>,
    pub consistency_violations: Vec<String>,
    pub scheduled: BTreeMap<MeetingId, Slot>,
    pub calendars: Vec<Calendar>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub optimal_cost: u64,
    pub greedy_cost: Option<u64>,
    pub realized_cost: u64,
    /// Realized over optimal; `None` when the optimum is zero.
    pub cost_vs_optimal: Option<f64>,
    pub cost_vs_greedy: Option<f64>,
    pub success_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub schema_version: u32,
    pub game_id: Uuid,
    pub config: TraceConfig,
    pub events: Vec<Event>,
    pub final_state: FinalState,
    pub metrics: RunMetrics,
    pub started_at: String,
    pub ended_at: String,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("event index {got} out of order, expected {expected}")]
    OutOfOrder { expected: u64, got: u64 },
    #[error("invalid event: {0}")]
    Schema(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: parse error at byte {offset} (line {line}, column {column}): {message}", path.display())]
    Parse {
        path: PathBuf,
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },
}

impl TraceFile {
    pub fn new(game_id: Uuid, config: TraceConfig, started_at: String) -> Self {
        Self {
            schema_version: TRACE_SCHEMA_VERSION,
            game_id,
            config,
            events: Vec::new(),
            final_state: FinalState::default(),
            metrics: RunMetrics::default(),
            ended_at: started_at.clone(),
            started_at,
        }
    }

    pub fn next_index(&self) -> u64 {
        self.events.last().map_or(0, |e| e.event_index + 1)
    }

    /// Appends an event that already carries its index.
    pub fn append(&mut self, event: Event) -> Result<u64, TraceError> {
        let expected = self.next_index();
        if event.event_index != expected {
            return Err(TraceError::OutOfOrder {
                expected,
                got: event.event_index,
            });
        }
        check_payload(
            &event.kind,
            self.config.scenario.num_agents(),
            self.config.scenario.num_slots(),
        )?;
        self.events.push(event);
        Ok(expected)
    }

    /// Appends with the next index.
    pub fn push(&mut self, timestamp: String, kind: EventKind) -> Result<u64, TraceError> {
        let event = Event {
            event_index: self.next_index(),
            timestamp,
            kind,
        };
        self.append(event)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.config.scenario
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

fn check_payload(kind: &EventKind, num_agents: usize, num_slots: usize) -> Result<(), TraceError> {
    let agent_ok = |a: AgentId| {
        if a < num_agents {
            Ok(())
        } else {
            Err(TraceError::Schema(format!("agent {a} out of range")))
        }
    };
    match kind {
        EventKind::BatchRejected { conflict, .. } if conflict.is_empty() => Err(
            TraceError::Schema("batch_rejected without conflict text".into()),
        ),
        EventKind::AgentRegistered { agent, .. }
        | EventKind::TurnStart { agent, .. }
        | EventKind::TurnEnd { agent, .. }
        | EventKind::DecideStart { agent, .. }
        | EventKind::DecideEnd { agent, .. }
        | EventKind::BatchRejected { agent, .. }
        | EventKind::BatchApplied { agent, .. } => agent_ok(*agent),
        EventKind::DmSent { from, to, .. } => {
            agent_ok(*from)?;
            if to.is_empty() {
                return Err(TraceError::Schema("dm_sent without recipients".into()));
            }
            to.iter().try_for_each(|a| agent_ok(*a))
        }
        EventKind::Resolution { slot: Some(s), .. } if *s >= num_slots => Err(TraceError::Schema(
            format!("resolution slot {s} out of range"),
        )),
        _ => Ok(()),
    }
}

pub fn write(trace: &TraceFile, path: &Path) -> Result<(), TraceError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| TraceError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, trace.to_json()).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read(path: &Path) -> Result<TraceFile, TraceError> {
    let text = fs::read_to_string(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse(&text, path)
}

/// Parses trace JSON, reporting failures with a byte offset.
pub fn parse(text: &str, path: &Path) -> Result<TraceFile, TraceError> {
    serde_json::from_str(text).map_err(|e| {
        let (line, column) = (e.line(), e.column());
        TraceError::Parse {
            path: path.to_path_buf(),
            offset: byte_offset(text, line, column),
            line,
            column,
            message: e.to_string(),
        }
    })
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (start + column.saturating_sub(1)).min(text.len())
}

/// Replaces wall-clock fields so two runs can be compared byte for byte.
pub fn canonicalize(trace: &TraceFile) -> TraceFile {
    let mut out = trace.clone();
    out.started_at = CANONICAL_TIMESTAMP.into();
    out.ended_at = CANONICAL_TIMESTAMP.into();
    for e in &mut out.events {
        e.timestamp = CANONICAL_TIMESTAMP.into();
        match &mut e.kind {
            EventKind::TurnEnd { latency_ms, .. } | EventKind::DecideEnd { latency_ms, .. } => {
                *latency_ms = None;
            }
            _ => {}
        }
    }
    out
}

/// Recomputes the final state from the scenario and the event stream alone.
pub fn fold_final_state(trace: &TraceFile) -> FinalState {
    let scenario = trace.scenario();
    let n = scenario.num_agents();
    let mut calendars = scenario.calendars.clone();
    let mut per_agent_cost = vec![0u64; n];
    let mut state = FinalState::default();
    let mut round_meetings: BTreeMap<usize, MeetingSpec> = BTreeMap::new();
    for e in &trace.events {
        match &e.kind {
            EventKind::RoundStart { round, meeting, .. } => {
                round_meetings.insert(*round, meeting.clone());
            }
            EventKind::DmSent { channel, .. } => {
                state.dm_count += 1;
                *state
                    .messages_by_channel
                    .entry(channel.as_str().to_string())
                    .or_insert(0) += 1;
            }
            EventKind::BatchApplied {
                round,
                agent,
                actions,
                phase,
                ..
            } => {
                let incoming = match phase {
                    Phase::Decision => round_meetings.get(round),
                    _ => None,
                };
                let batch = ActionBatch::new(actions.clone());
                let applied = apply_batch(&calendars[*agent], &batch, incoming);
                calendars[*agent] = applied.calendar;
                per_agent_cost[*agent] += u64::from(applied.cost);
            }
            EventKind::Resolution {
                meeting,
                succeeded,
                slot,
                broken_meetings,
                round,
                ..
            } => {
                if *succeeded {
                    state.rounds_succeeded += 1;
                    if let Some(s) = slot {
                        state.scheduled.insert(*meeting, *s);
                    }
                } else {
                    state.rounds_failed += 1;
                    state
                        .consistency_violations
                        .push(format!("round {round}: meeting {meeting} unresolved"));
                }
                for b in broken_meetings {
                    state
                        .consistency_violations
                        .push(format!("round {round}: meeting {b} no longer consistent"));
                }
            }
            _ => {}
        }
    }
    for (id, slot) in state.scheduled.iter_mut() {
        if let Some(s) = current_slot(&calendars, scenario, *id) {
            *slot = s;
        }
    }
    state.total_cost = per_agent_cost.iter().sum();
    state.per_agent_cost = per_agent_cost;
    state.calendars = calendars;
    state
}

/// Common slot of a meeting across its participants, if consistent.
pub fn current_slot(calendars: &[Calendar], scenario: &Scenario, id: MeetingId) -> Option<Slot> {
    let spec = scenario.meeting(id)?;
    let slots: BTreeSet<Option<Slot>> = spec
        .participants
        .iter()
        .map(|&p| calendars[p].find_meeting(id))
        .collect();
    match slots.into_iter().collect::<Vec<_>>().as_slice() {
        [Some(s)] => Some(*s),
        _ => None,
    }
}

/// Collects trace files under a directory, sorted by path.
pub fn list_traces(dir: &Path) -> Result<Vec<PathBuf>, TraceError> {
    let mut out = Vec::new();
    let entries = fs::read_dir(dir).map_err(|source| TraceError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for entry in entries {
        let entry = entry.map_err(|source| TraceError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e == "json") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
