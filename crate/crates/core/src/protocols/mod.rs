//! Deterministic reference agents: IMAP, SD-MAP and two DSM presets.
//!
//! Every protocol talks only through [`TypedMessage`] JSON carried in DM
//! content. No message ever contains free text or a calendar label.
//! The lowest-id participant of each meeting is its initiator.

mod dsm;
mod imap;
mod sd;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    validate_batch, Action, ActionBatch, AgentId, Calendar, ItemId, MeetingId, Slot, SlotState,
};
use crate::engine::{
    run_game, Agent, Clock, EngineConfig, EngineError, InboxMessage, OutboundMessage, RunOptions,
};
use crate::scenario::Scenario;
use crate::trace::TraceFile;

pub use dsm::{
    availability, choose_offer_size, flexibility, offer_utility, p_hat, reward, satisfaction,
    score_from_cost, scoring_cost, settle, Displacement, DsmAgent, DsmMessage, DsmParams, Plan,
    PlanScore, ResponderScores, ResponderSettlement, Settlement, SATISFACTION_LEVELS,
};
pub use imap::{ImapAgent, ImapMessage};
pub use sd::{SdAgent, SdMessage, SdModel, SdStatus};

/// Trace metadata key holding the JSON [`ProtocolSpec`] a game was run with.
pub const PROTOCOL_SPEC_KEY: &str = "protocol_spec";

/// Envelope for every reference-protocol message.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "snake_case")]
pub enum TypedMessage {
    Imap(ImapMessage),
    Sd(SdMessage),
    Dsm(DsmMessage),
}

impl TypedMessage {
    pub fn to_content(&self) -> String {
        serde_json::to_string(self).expect("typed message serializes")
    }

    /// `None` for anything that is not a typed message (free text included).
    pub fn parse(content: &str) -> Option<Self> {
        serde_json::from_str(content).ok()
    }

    pub fn kind(&self) -> &'static str {
        match self {
            TypedMessage::Imap(m) => m.kind(),
            TypedMessage::Sd(m) => m.kind(),
            TypedMessage::Dsm(m) => m.kind(),
        }
    }

    pub fn protocol(&self) -> &'static str {
        match self {
            TypedMessage::Imap(_) => "imap",
            TypedMessage::Sd(_) => "sd",
            TypedMessage::Dsm(_) => "dsm",
        }
    }
}

fn dm(to: AgentId, msg: TypedMessage) -> OutboundMessage {
    OutboundMessage::dm(to, msg.to_content())
}

fn parse_inbox(inbox: &[InboxMessage]) -> Vec<(AgentId, TypedMessage)> {
    inbox
        .iter()
        .filter_map(|m| TypedMessage::parse(&m.content).map(|t| (m.from, t)))
        .collect()
}

/// Lowest free slot outside `reserved`.
pub fn landing_slot(cal: &Calendar, reserved: &BTreeSet<Slot>) -> Option<Slot> {
    cal.free_slots().find(|s| !reserved.contains(s))
}

/// One-hop insertion cost at `slot`: 0 when free, the errand's cost when a
/// movable errand can land in a free slot, `None` otherwise.
pub fn insertion_cost(cal: &Calendar, slot: Slot) -> Option<u32> {
    match cal.slots.get(slot)? {
        SlotState::Free => Some(0),
        SlotState::Errand(e) if !e.blocked => {
            landing_slot(cal, &BTreeSet::from([slot])).map(|_| e.cost)
        }
        _ => None,
    }
}

/// A confirmed move of one prior meeting copy on one calendar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MeetingMove {
    pub meeting: MeetingId,
    pub from: Slot,
    pub to: Slot,
}

fn why(meeting: MeetingId) -> String {
    format!("make room for {meeting}")
}

/// Reschedules for `moves`, displacing one errand per landing slot when needed.
fn move_actions(
    cal: &Calendar,
    moves: &[MeetingMove],
    reserved: &mut BTreeSet<Slot>,
    context: MeetingId,
) -> Option<Vec<Action>> {
    let froms: BTreeSet<Slot> = moves.iter().map(|m| m.from).collect();
    reserved.extend(moves.iter().flat_map(|m| [m.from, m.to]));
    let mut actions = Vec::new();
    for mv in moves {
        match cal.slots.get(mv.from)? {
            SlotState::Meeting(m) if m.id == mv.meeting => {}
            _ => return None,
        }
        match cal.slots.get(mv.to)? {
            SlotState::Free => {}
            _ if froms.contains(&mv.to) => {}
            SlotState::Errand(e) if !e.blocked => {
                let landing = landing_slot(cal, reserved)?;
                reserved.insert(landing);
                actions.push(Action::reschedule(
                    ItemId::Errand(e.id),
                    mv.to,
                    landing,
                    &why(context),
                ));
            }
            _ => return None,
        }
        actions.push(Action::reschedule(
            ItemId::Meeting(mv.meeting),
            mv.from,
            mv.to,
            &why(context),
        ));
    }
    Some(actions)
}

/// Voluntary-phase batch applying confirmed meeting moves.
pub fn moves_batch(
    cal: &Calendar,
    moves: &[MeetingMove],
    context: MeetingId,
) -> Option<ActionBatch> {
    let actions = move_actions(cal, moves, &mut BTreeSet::new(), context)?;
    let batch = ActionBatch::new(actions);
    validate_batch(cal, &batch, false).ok().map(|_| batch)
}

/// Decision batch placing `meeting` at `slot` after applying `moves`.
pub fn placement_batch(
    cal: &Calendar,
    meeting: MeetingId,
    slot: Slot,
    moves: &[MeetingMove],
) -> Option<ActionBatch> {
    let mut reserved = BTreeSet::from([slot]);
    let mut actions = move_actions(cal, moves, &mut reserved, meeting)?;
    let vacated = moves.iter().any(|m| m.from == slot);
    if !vacated {
        match cal.slots.get(slot)? {
            SlotState::Free => {}
            SlotState::Errand(e) if !e.blocked => {
                let landing = landing_slot(cal, &reserved)?;
                actions.push(Action::reschedule(
                    ItemId::Errand(e.id),
                    slot,
                    landing,
                    &why(meeting),
                ));
            }
            _ => return None,
        }
    }
    actions.push(Action::Schedule {
        meeting_id: meeting,
        slot,
    });
    let batch = ActionBatch::new(actions);
    validate_batch(cal, &batch, true).ok().map(|_| batch)
}

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("unknown protocol {0:?}; expected imap, sd_map, dsm_welfare or dsm_private")]
    Unknown(String),
    #[error("mixed lineup {0:?}: every seat must run the same reference protocol")]
    MixedLineup(Vec<String>),
    #[error("invalid protocol parameters: {0}")]
    InvalidParams(String),
}

/// A reference protocol with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProtocolSpec {
    Imap,
    SdMap {
        #[serde(default)]
        sd_model: SdModel,
    },
    Dsm {
        name: String,
        params: DsmParams,
    },
}

impl ProtocolSpec {
    pub const NAMES: [&'static str; 4] = ["imap", "sd_map", "dsm_welfare", "dsm_private"];

    pub fn from_name(name: &str) -> Result<Self, ProtocolError> {
        match name {
            "imap" => Ok(ProtocolSpec::Imap),
            "sd_map" | "sd" => Ok(ProtocolSpec::SdMap {
                sd_model: SdModel::default(),
            }),
            "dsm_welfare" => Ok(ProtocolSpec::Dsm {
                name: name.into(),
                params: DsmParams::welfare(),
            }),
            "dsm_private" => Ok(ProtocolSpec::Dsm {
                name: name.into(),
                params: DsmParams::private(),
            }),
            other => Err(ProtocolError::Unknown(other.into())),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            ProtocolSpec::Imap => "imap",
            ProtocolSpec::SdMap { .. } => "sd_map",
            ProtocolSpec::Dsm { name, .. } => name,
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        match self {
            ProtocolSpec::Dsm { params, .. } => params.validate(),
            ProtocolSpec::SdMap { sd_model } => sd_model.validate(),
            ProtocolSpec::Imap => Ok(()),
        }
    }

    pub fn build(&self) -> Box<dyn Agent> {
        match self {
            ProtocolSpec::Imap => Box::new(ImapAgent::new()),
            ProtocolSpec::SdMap { sd_model } => Box::new(SdAgent::new(sd_model.clone())),
            ProtocolSpec::Dsm { name, params } => {
                Box::new(DsmAgent::new(name.clone(), params.clone()))
            }
        }
    }

    pub fn build_lineup(&self, num_agents: usize) -> Vec<Box<dyn Agent>> {
        (0..num_agents).map(|_| self.build()).collect()
    }
}

/// Resolves a seat lineup into one protocol. Protocols must match per meeting,
/// and meetings overlap, so every seat must run the same one.
pub fn resolve_lineup(names: &[String]) -> Result<ProtocolSpec, ProtocolError> {
    let first = names
        .first()
        .ok_or_else(|| ProtocolError::InvalidParams("empty lineup".into()))?;
    if names.iter().any(|n| n != first) {
        return Err(ProtocolError::MixedLineup(names.to_vec()));
    }
    ProtocolSpec::from_name(first)
}

/// Runs a scenario with every seat on `spec`, recording the protocol in the trace.
pub fn run_protocol_game(
    scenario: &Scenario,
    spec: &ProtocolSpec,
    config: &EngineConfig,
    clock: Clock,
) -> Result<TraceFile, EngineError> {
    let mut agents = spec.build_lineup(scenario.num_agents());
    let options = RunOptions {
        lineup: Some(vec![spec.name().to_string(); scenario.num_agents()]),
        clock,
        metadata: [(
            PROTOCOL_SPEC_KEY.to_string(),
            serde_json::to_string(spec).expect("spec serializes"),
        )]
        .into(),
    };
    run_game(scenario, &mut agents, config, &options)
}

/// The protocol a trace was produced with, from its metadata or lineup.
pub fn spec_for_trace(trace: &TraceFile) -> Result<ProtocolSpec, ProtocolError> {
    match trace.config.metadata.get(PROTOCOL_SPEC_KEY) {
        Some(json) => {
            serde_json::from_str(json).map_err(|e| ProtocolError::InvalidParams(e.to_string()))
        }
        None => resolve_lineup(&trace.config.lineup),
    }
}

/// Reruns a reference-protocol trace from its own configuration.
pub fn rerun_trace(trace: &TraceFile, clock: Clock) -> Result<TraceFile, RerunError> {
    let spec = spec_for_trace(trace)?;
    let mut agents = spec.build_lineup(trace.scenario().num_agents());
    let options = RunOptions {
        lineup: Some(trace.config.lineup.clone()),
        clock,
        metadata: trace.config.metadata.clone(),
    };
    Ok(run_game(
        trace.scenario(),
        &mut agents,
        &trace.config.engine,
        &options,
    )?)
}

#[derive(Debug, Error)]
pub enum RerunError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}
