//! Turn-based game engine.
//!
//! One round per incoming meeting, each in four phases:
//!
//! 1. **CHEAP_TALK**: sweeps over speakers until a sweep routes no message or
//!    the turn budget runs out. Participants speak every sweep in ascending
//!    id order; non-participants speak only in sweeps where a DM or all-agent
//!    broadcast reached them, after the participants, in queue order.
//! 2. **VOLUNTARY**: activated non-participants may reschedule their own items.
//! 3. **DECISION**: each participant submits a batch against a calendar
//!    snapshot frozen after VOLUNTARY; rejected batches are retried.
//! 4. **RESOLUTION**: staged batches are committed together only if every
//!    participant chose the same slot and no previously consistent meeting
//!    was broken. Otherwise nothing staged is applied.

mod prompts;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::domain::{
    apply_batch, render_calendar_with, validate_batch, Action, ActionBatch, AgentId, Calendar,
    CostScale, MeetingId, MeetingSpec, RenderOptions, Slot,
};
use crate::scenario::{Scenario, SeededRng};
use crate::trace::{
    current_slot, fold_final_state, EventKind, RunMetrics, TraceConfig, TraceError, TraceFile,
};

pub use prompts::{
    build_phase_message, decision_message, inbox_lines, meeting_block, retry_message,
    round_start_message, system_prompt, turn_budget_line, turn_message, voluntary_message,
    PhaseMessage, SystemPromptParams, EMPTY_INBOX, FINAL_TURN_NOTE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    CheapTalk,
    Voluntary,
    Decision,
    Resolution,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::CheapTalk => "CHEAP_TALK",
            Phase::Voluntary => "VOLUNTARY",
            Phase::Decision => "DECISION",
            Phase::Resolution => "RESOLUTION",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Dm,
    ParticipantGroupchat,
    AllAgentGroupchat,
}

impl Channel {
    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Dm => "dm",
            Channel::ParticipantGroupchat => "participant_groupchat",
            Channel::AllAgentGroupchat => "all_agent_groupchat",
        }
    }
}

/// A message an agent asks the engine to deliver.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OutboundMessage {
    Dm { to: AgentId, content: String },
    ParticipantGroupchat { content: String },
    AllAgentGroupchat { content: String },
}

impl OutboundMessage {
    pub fn dm(to: AgentId, content: impl Into<String>) -> Self {
        OutboundMessage::Dm {
            to,
            content: content.into(),
        }
    }

    pub fn channel(&self) -> Channel {
        match self {
            OutboundMessage::Dm { .. } => Channel::Dm,
            OutboundMessage::ParticipantGroupchat { .. } => Channel::ParticipantGroupchat,
            OutboundMessage::AllAgentGroupchat { .. } => Channel::AllAgentGroupchat,
        }
    }

    pub fn content(&self) -> &str {
        match self {
            OutboundMessage::Dm { content, .. }
            | OutboundMessage::ParticipantGroupchat { content }
            | OutboundMessage::AllAgentGroupchat { content } => content,
        }
    }
}

/// A delivered message as it sits in a recipient's inbox.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InboxMessage {
    pub from: AgentId,
    pub channel: Channel,
    pub meeting: MeetingId,
    pub content: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    SelfTarget,
    UnknownTarget,
    ChannelDisabled,
    DmCapReached,
    EmptyContent,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedMessage {
    pub message: OutboundMessage,
    pub reason: DropReason,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub dm: bool,
    pub participant_groupchat: bool,
    pub all_agent_groupchat: bool,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            dm: true,
            participant_groupchat: false,
            all_agent_groupchat: false,
        }
    }
}

impl ChannelConfig {
    pub fn all() -> Self {
        Self {
            dm: true,
            participant_groupchat: true,
            all_agent_groupchat: true,
        }
    }

    pub fn enabled(&self, channel: Channel) -> bool {
        match channel {
            Channel::Dm => self.dm,
            Channel::ParticipantGroupchat => self.participant_groupchat,
            Channel::AllAgentGroupchat => self.all_agent_groupchat,
        }
    }
}

fn default_max_turns() -> usize {
    15
}

fn default_retries() -> usize {
    2
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineConfig {
    #[serde(default = "default_max_turns")]
    pub max_turns_per_round: usize,
    #[serde(default = "default_retries")]
    pub decision_retries: usize,
    #[serde(default)]
    pub channels: ChannelConfig,
    /// Maximum DMs one agent may send per round; `None` for no cap.
    #[serde(default)]
    pub dm_cap: Option<usize>,
    /// Show costs to agents as `10^(c-1)`.
    #[serde(default = "default_true")]
    pub log_cost_display: bool,
    #[serde(default = "default_true")]
    pub include_labels: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            max_turns_per_round: default_max_turns(),
            decision_retries: default_retries(),
            channels: ChannelConfig::default(),
            dm_cap: None,
            log_cost_display: true,
            include_labels: true,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.max_turns_per_round == 0 {
            return Err(EngineError::InvalidConfig(
                "max_turns_per_round must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn render_options(&self) -> RenderOptions {
        RenderOptions {
            include_labels: self.include_labels,
            scale: if self.log_cost_display {
                CostScale::Logarithmic
            } else {
                CostScale::Internal
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct AgentError(pub String);

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("expected {expected} agents, got {got}")]
    AgentCount { expected: usize, got: usize },
    #[error("invalid engine config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Clone, Debug)]
pub struct Registration<'a> {
    pub agent: AgentId,
    pub num_agents: usize,
    pub num_slots: usize,
    pub system_prompt: &'a str,
    pub calendar: &'a Calendar,
}

#[derive(Clone, Debug)]
pub struct TurnRequest<'a> {
    pub round: usize,
    pub turn: usize,
    pub max_turns: usize,
    /// The meeting as this agent may see it; labels are stripped for non-participants.
    pub meeting: &'a MeetingSpec,
    pub is_participant: bool,
    pub calendar: &'a Calendar,
    pub inbox: &'a [InboxMessage],
    pub prompt: &'a str,
}

#[derive(Clone, Debug)]
pub struct DecideRequest<'a> {
    pub round: usize,
    pub phase: Phase,
    pub meeting: &'a MeetingSpec,
    pub calendar: &'a Calendar,
    pub prompt: &'a str,
}

#[derive(Clone, Debug)]
pub struct RetryRequest<'a> {
    pub round: usize,
    pub phase: Phase,
    /// 1-based retry counter.
    pub attempt: usize,
    pub max_attempts: usize,
    pub conflict: &'a str,
    pub meeting: &'a MeetingSpec,
    pub calendar: &'a Calendar,
    pub prompt: &'a str,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TurnResponse {
    pub thinking: String,
    pub messages: Vec<OutboundMessage>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Decision {
    pub thinking: String,
    pub actions: ActionBatch,
}

impl Decision {
    pub fn pass() -> Self {
        Self::default()
    }

    pub fn with(actions: Vec<Action>) -> Self {
        Self {
            thinking: String::new(),
            actions: ActionBatch::new(actions),
        }
    }
}

/// The contract every seat implements.
///
/// Callbacks see only what the engine hands them and change the game only
/// through their return values. An `Err` is logged and treated as silence
/// (no messages, no actions).
pub trait Agent {
    fn protocol(&self) -> &str {
        "custom"
    }

    fn on_register(&mut self, _reg: &Registration<'_>) -> Result<(), AgentError> {
        Ok(())
    }

    fn turn(&mut self, req: &TurnRequest<'_>) -> Result<TurnResponse, AgentError>;

    fn voluntary_decide(&mut self, _req: &DecideRequest<'_>) -> Result<Decision, AgentError> {
        Ok(Decision::pass())
    }

    fn decide(&mut self, req: &DecideRequest<'_>) -> Result<Decision, AgentError>;

    fn retry_decide(&mut self, req: &RetryRequest<'_>) -> Result<Decision, AgentError>;
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum Clock {
    #[default]
    System,
    Fixed(String),
}

impl Clock {
    pub fn now(&self) -> String {
        match self {
            Clock::System => Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            Clock::Fixed(s) => s.clone(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Protocol tag per seat; defaults to each agent's `protocol()`.
    pub lineup: Option<Vec<String>>,
    pub clock: Clock,
    pub metadata: BTreeMap<String, String>,
}

/// Summary of one round.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundOutcome {
    pub meeting: MeetingId,
    pub succeeded: bool,
    pub slot: Option<Slot>,
    pub chosen: BTreeMap<AgentId, Option<Slot>>,
    pub broken_meetings: Vec<MeetingId>,
}

/// Deterministic game id from the scenario seed and the seat lineup.
pub fn derive_game_id(seed: u64, lineup: &[String]) -> Uuid {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in lineup.join(",").bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = SeededRng::new(seed ^ h, 2);
    let mut bytes = [0u8; 16];
    bytes[..8].copy_from_slice(&rng.next_u64().to_le_bytes());
    bytes[8..].copy_from_slice(&rng.next_u64().to_le_bytes());
    uuid::Builder::from_random_bytes(bytes).into_uuid()
}

/// The meeting as seen by `viewer`: non-participants never get the label.
pub fn meeting_view(meeting: &MeetingSpec, viewer: AgentId) -> MeetingSpec {
    let mut view = meeting.clone();
    if !meeting.is_participant(viewer) {
        view.label = None;
    }
    view
}

/// Meetings that are present on every participant's calendar at one common slot.
pub fn consistent_meetings(
    calendars: &[Calendar],
    scenario: &Scenario,
    ids: &[MeetingId],
) -> BTreeSet<MeetingId> {
    ids.iter()
        .copied()
        .filter(|id| current_slot(calendars, scenario, *id).is_some())
        .collect()
}

struct Game<'s, 'a> {
    scenario: &'s Scenario,
    config: &'s EngineConfig,
    agents: &'a mut [Box<dyn Agent + 's>],
    trace: TraceFile,
    calendars: Vec<Calendar>,
    penalty: Vec<u64>,
    resolved: Vec<MeetingId>,
    clock: Clock,
}

/// What routing a single outbound message produced.
struct Routed {
    recipients: Vec<AgentId>,
    activated: Vec<AgentId>,
}

impl Game<'_, '_> {
    fn emit(&mut self, kind: EventKind) -> Result<u64, EngineError> {
        let ts = self.clock.now();
        Ok(self.trace.push(ts, kind)?)
    }

    fn render(&self, calendar: &Calendar) -> String {
        render_calendar_with(calendar, self.config.render_options())
    }

    fn route(
        &self,
        sender: AgentId,
        msg: &OutboundMessage,
        meeting: &MeetingSpec,
        dms_sent: &mut [usize],
        activated: &BTreeSet<AgentId>,
    ) -> Result<Routed, DropReason> {
        let n = self.scenario.num_agents();
        if msg.content().trim().is_empty() {
            return Err(DropReason::EmptyContent);
        }
        if !self.config.channels.enabled(msg.channel()) {
            return Err(DropReason::ChannelDisabled);
        }
        let recipients: Vec<AgentId> = match msg {
            OutboundMessage::Dm { to, .. } => {
                if *to == sender {
                    return Err(DropReason::SelfTarget);
                }
                if *to >= n {
                    return Err(DropReason::UnknownTarget);
                }
                if let Some(cap) = self.config.dm_cap {
                    if dms_sent[sender] >= cap {
                        return Err(DropReason::DmCapReached);
                    }
                }
                dms_sent[sender] += 1;
                vec![*to]
            }
            OutboundMessage::ParticipantGroupchat { .. } => meeting
                .participants
                .iter()
                .copied()
                .filter(|&a| a != sender)
                .collect(),
            OutboundMessage::AllAgentGroupchat { .. } => (0..n).filter(|&a| a != sender).collect(),
        };
        let activating = msg.channel() != Channel::ParticipantGroupchat;
        let newly: Vec<AgentId> = if activating {
            recipients
                .iter()
                .copied()
                .filter(|a| !meeting.is_participant(*a) && !activated.contains(a))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Routed {
            recipients,
            activated: newly,
        })
    }

    fn run(&mut self) -> Result<(), EngineError> {
        let sc = self.scenario;
        self.emit(EventKind::GameStart {
            seed: sc.params.seed,
            num_agents: sc.num_agents(),
            num_slots: sc.num_slots(),
            num_meetings: sc.meetings.len(),
            optimal_cost: sc.optimal_cost(),
            greedy_cost: sc.greedy_cost(),
            nosy_agents: Vec::new(),
        })?;
        let all_ids: Vec<AgentId> = (0..sc.num_agents()).collect();
        for agent in 0..sc.num_agents() {
            let prompt = system_prompt(&SystemPromptParams {
                agent_id: agent,
                all_agent_ids: all_ids.clone(),
                num_slots: sc.num_slots(),
                decision_retries: self.config.decision_retries,
                max_turns_per_round: self.config.max_turns_per_round,
                channels: self.config.channels,
            });
            let render = self.render(&self.calendars[agent]);
            let protocol = self.trace.config.lineup[agent].clone();
            self.emit(EventKind::AgentRegistered {
                agent,
                protocol,
                system_prompt: prompt.clone(),
                calendar_render: render,
                is_nosy: false,
            })?;
            let cal = self.calendars[agent].clone();
            // A failed registration leaves the agent in play; its later calls decide.
            let _ = self.agents[agent].on_register(&Registration {
                agent,
                num_agents: sc.num_agents(),
                num_slots: sc.num_slots(),
                system_prompt: &prompt,
                calendar: &cal,
            });
        }
        for meeting in &sc.meetings {
            self.run_round(meeting)?;
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn speak(
        &mut self,
        agent: AgentId,
        round: usize,
        turn: usize,
        meeting: &MeetingSpec,
        inboxes: &mut [Vec<InboxMessage>],
        dms_sent: &mut [usize],
        activated: &mut Vec<AgentId>,
    ) -> Result<(bool, Vec<AgentId>), EngineError> {
        let participant = meeting.is_participant(agent);
        let inbox = std::mem::take(&mut inboxes[agent]);
        let max_turns = self.config.max_turns_per_round;
        let view = meeting_view(meeting, agent);
        let prompt = if participant && turn == 0 {
            let render = self.render(&self.calendars[agent]);
            round_start_message(
                &view,
                agent,
                &render,
                round + 1,
                self.penalty[agent],
                turn,
                max_turns,
                &inbox,
            )
        } else {
            turn_message(&inbox, turn, max_turns)
        };
        self.emit(EventKind::TurnStart {
            round,
            turn,
            phase: Phase::CheapTalk,
            agent,
            participant,
            inbox: inbox.clone(),
            prompt: prompt.clone(),
        })?;
        let cal = self.calendars[agent].clone();
        let result = self.agents[agent].turn(&TurnRequest {
            round,
            turn,
            max_turns,
            meeting: &view,
            is_participant: participant,
            calendar: &cal,
            inbox: &inbox,
            prompt: &prompt,
        });
        let (response, error) = match result {
            Ok(r) => (r, None),
            Err(e) => (TurnResponse::default(), Some(e.0)),
        };

        let activated_set: BTreeSet<AgentId> = activated.iter().copied().collect();
        let mut dropped = Vec::new();
        let mut deliveries = Vec::new();
        let mut newly_all = Vec::new();
        for msg in &response.messages {
            let mut known = activated_set.clone();
            known.extend(newly_all.iter().copied());
            match self.route(agent, msg, meeting, dms_sent, &known) {
                Ok(routed) => {
                    newly_all.extend(routed.activated.iter().copied());
                    deliveries.push((msg.clone(), routed));
                }
                Err(reason) => dropped.push(DroppedMessage {
                    message: msg.clone(),
                    reason,
                }),
            }
        }
        self.emit(EventKind::TurnEnd {
            round,
            turn,
            agent,
            actions: response.messages.clone(),
            thinking: response.thinking,
            dropped,
            error,
            usage: None,
            latency_ms: None,
        })?;

        let mut queued = Vec::new();
        for (msg, routed) in &deliveries {
            for &r in &routed.recipients {
                inboxes[r].push(InboxMessage {
                    from: agent,
                    channel: msg.channel(),
                    meeting: meeting.id,
                    content: msg.content().to_string(),
                });
                if !meeting.is_participant(r) && msg.channel() != Channel::ParticipantGroupchat {
                    queued.push(r);
                }
            }
            activated.extend(routed.activated.iter().copied());
            self.emit(EventKind::DmSent {
                round,
                turn,
                from: agent,
                to: routed.recipients.clone(),
                channel: msg.channel(),
                meeting: meeting.id,
                content: msg.content().to_string(),
                char_count: msg.content().chars().count(),
                activated: routed.activated.clone(),
            })?;
        }
        Ok((!deliveries.is_empty(), queued))
    }

    fn run_round(&mut self, meeting: &MeetingSpec) -> Result<RoundOutcome, EngineError> {
        let round = meeting.round;
        let n = self.scenario.num_agents();
        let participants: Vec<AgentId> = meeting.participants.iter().copied().collect();
        self.emit(EventKind::RoundStart {
            round,
            meeting: meeting.clone(),
            speaker_order: participants.clone(),
        })?;
        let consistent_at_start =
            consistent_meetings(&self.calendars, self.scenario, &self.resolved);

        // CHEAP_TALK
        let mut inboxes: Vec<Vec<InboxMessage>> = vec![Vec::new(); n];
        let mut dms_sent = vec![0usize; n];
        let mut activated: Vec<AgentId> = Vec::new();
        let mut carry: Vec<AgentId> = Vec::new();
        let mut turn = 0;
        let mut has_activity = true;
        while has_activity && turn < self.config.max_turns_per_round {
            has_activity = false;
            let mut queue: Vec<AgentId> = std::mem::take(&mut carry);
            let mut spoken: BTreeSet<AgentId> = BTreeSet::new();
            let enqueue = |queue: &mut Vec<AgentId>,
                           carry: &mut Vec<AgentId>,
                           spoken: &BTreeSet<AgentId>,
                           a| {
                if spoken.contains(&a) {
                    if !carry.contains(&a) {
                        carry.push(a);
                    }
                } else if !queue.contains(&a) {
                    queue.push(a);
                }
            };
            for &a in &participants {
                let (active, queued) = self.speak(
                    a,
                    round,
                    turn,
                    meeting,
                    &mut inboxes,
                    &mut dms_sent,
                    &mut activated,
                )?;
                has_activity |= active;
                for q in queued {
                    enqueue(&mut queue, &mut carry, &spoken, q);
                }
            }
            let mut qi = 0;
            while qi < queue.len() {
                let a = queue[qi];
                qi += 1;
                spoken.insert(a);
                let (active, queued) = self.speak(
                    a,
                    round,
                    turn,
                    meeting,
                    &mut inboxes,
                    &mut dms_sent,
                    &mut activated,
                )?;
                has_activity |= active;
                for q in queued {
                    enqueue(&mut queue, &mut carry, &spoken, q);
                }
            }
            turn += 1;
        }

        // VOLUNTARY
        for &agent in &activated {
            self.voluntary(agent, meeting)?;
        }

        // DECISION
        let frozen = self.calendars.clone();
        let mut staged: BTreeMap<AgentId, Option<ActionBatch>> = BTreeMap::new();
        for &agent in &participants {
            let batch = self.decision(agent, meeting, &frozen[agent])?;
            staged.insert(agent, batch);
        }

        // RESOLUTION
        let chosen: BTreeMap<AgentId, Option<Slot>> = staged
            .iter()
            .map(|(a, b)| (*a, b.as_ref().and_then(ActionBatch::scheduled_slot)))
            .collect();
        let slots: BTreeSet<Option<Slot>> = chosen.values().copied().collect();
        let common = match slots.iter().collect::<Vec<_>>().as_slice() {
            [Some(s)] => Some(*s),
            _ => None,
        };
        let mut reason = None;
        let mut succeeded = false;
        if let Some(slot) = common {
            let mut tentative = self.calendars.clone();
            let mut costs = BTreeMap::new();
            for (agent, batch) in &staged {
                let batch = batch.as_ref().expect("common slot implies a batch");
                let applied = apply_batch(&tentative[*agent], batch, Some(meeting));
                tentative[*agent] = applied.calendar;
                costs.insert(*agent, u64::from(applied.cost));
            }
            let still = consistent_meetings(&tentative, self.scenario, &self.resolved);
            let broken: Vec<MeetingId> = consistent_at_start.difference(&still).copied().collect();
            if broken.is_empty() {
                for (agent, batch) in &staged {
                    let batch = batch.as_ref().expect("common slot implies a batch");
                    self.calendars[*agent] = tentative[*agent].clone();
                    self.penalty[*agent] += costs[agent];
                    let render = self.render(&self.calendars[*agent]);
                    self.emit(EventKind::BatchApplied {
                        round,
                        phase: Phase::Decision,
                        agent: *agent,
                        actions: batch.actions.clone(),
                        cost: costs[agent],
                        calendar_render: render,
                    })?;
                }
                succeeded = true;
                debug_assert_eq!(
                    current_slot(&self.calendars, self.scenario, meeting.id),
                    Some(slot)
                );
            } else {
                let names: Vec<String> = broken.iter().map(|m| m.to_string()).collect();
                reason = Some(format!(
                    "decision batches would break previously scheduled meetings: {}",
                    names.join(", ")
                ));
            }
        } else if chosen.values().any(Option::is_none) {
            let missing: Vec<String> = chosen
                .iter()
                .filter(|(_, s)| s.is_none())
                .map(|(a, _)| a.to_string())
                .collect();
            reason = Some(format!(
                "no valid decision from agent(s) {}",
                missing.join(", ")
            ));
        } else {
            reason = Some("participants chose different slots".into());
        }
        let now = consistent_meetings(&self.calendars, self.scenario, &self.resolved);
        let broken_meetings: Vec<MeetingId> =
            consistent_at_start.difference(&now).copied().collect();
        if succeeded {
            self.resolved.push(meeting.id);
        }
        self.emit(EventKind::Resolution {
            round,
            meeting: meeting.id,
            succeeded,
            slot: if succeeded { common } else { None },
            chosen: chosen.clone(),
            broken_meetings: broken_meetings.clone(),
            reason,
        })?;
        Ok(RoundOutcome {
            meeting: meeting.id,
            succeeded,
            slot: if succeeded { common } else { None },
            chosen,
            broken_meetings,
        })
    }

    fn voluntary(&mut self, agent: AgentId, meeting: &MeetingSpec) -> Result<(), EngineError> {
        let round = meeting.round;
        let view = meeting_view(meeting, agent);
        let cal = self.calendars[agent].clone();
        let render = self.render(&cal);
        let prompt = voluntary_message(&view, agent, &render);
        self.emit(EventKind::DecideStart {
            round,
            phase: Phase::Voluntary,
            agent,
            attempt: 0,
            prompt: prompt.clone(),
            calendar_render: render,
        })?;
        let result = self.agents[agent].voluntary_decide(&DecideRequest {
            round,
            phase: Phase::Voluntary,
            meeting: &view,
            calendar: &cal,
            prompt: &prompt,
        });
        let mut batch = self.record_decide_end(round, Phase::Voluntary, agent, 0, result)?;
        let retries = self.config.decision_retries;
        let mut attempt = 0;
        loop {
            let candidate = batch.reschedules_only();
            match validate_batch(&cal, &candidate, false) {
                Ok(()) => {
                    if !candidate.is_empty() {
                        let applied = apply_batch(&cal, &candidate, None);
                        self.calendars[agent] = applied.calendar;
                        self.penalty[agent] += u64::from(applied.cost);
                        let render = self.render(&self.calendars[agent]);
                        self.emit(EventKind::BatchApplied {
                            round,
                            phase: Phase::Voluntary,
                            agent,
                            actions: candidate.actions,
                            cost: u64::from(applied.cost),
                            calendar_render: render,
                        })?;
                    }
                    return Ok(());
                }
                Err(conflict) => {
                    self.emit(EventKind::BatchRejected {
                        round,
                        phase: Phase::Voluntary,
                        agent,
                        attempt,
                        rule: Some(conflict.rule.number()),
                        conflict: conflict.message.clone(),
                        actions: candidate.actions,
                    })?;
                    if attempt >= retries {
                        return Ok(());
                    }
                    attempt += 1;
                    batch = self.retry(
                        agent,
                        Phase::Voluntary,
                        meeting,
                        &cal,
                        attempt,
                        &conflict.message,
                    )?;
                }
            }
        }
    }

    fn decision(
        &mut self,
        agent: AgentId,
        meeting: &MeetingSpec,
        frozen: &Calendar,
    ) -> Result<Option<ActionBatch>, EngineError> {
        let round = meeting.round;
        let render = self.render(frozen);
        let prompt = decision_message(meeting, agent, &render);
        self.emit(EventKind::DecideStart {
            round,
            phase: Phase::Decision,
            agent,
            attempt: 0,
            prompt: prompt.clone(),
            calendar_render: render,
        })?;
        let result = self.agents[agent].decide(&DecideRequest {
            round,
            phase: Phase::Decision,
            meeting,
            calendar: frozen,
            prompt: &prompt,
        });
        let mut batch = self.record_decide_end(round, Phase::Decision, agent, 0, result)?;
        let retries = self.config.decision_retries;
        let mut attempt = 0;
        loop {
            let verdict = match wrong_meeting(&batch, meeting.id) {
                Some(msg) => Err((None, msg)),
                None => validate_batch(frozen, &batch, true)
                    .map_err(|c| (Some(c.rule.number()), c.message)),
            };
            match verdict {
                Ok(()) => return Ok(Some(batch)),
                Err((rule, message)) => {
                    self.emit(EventKind::BatchRejected {
                        round,
                        phase: Phase::Decision,
                        agent,
                        attempt,
                        rule,
                        conflict: message.clone(),
                        actions: batch.actions.clone(),
                    })?;
                    if attempt >= retries {
                        return Ok(None);
                    }
                    attempt += 1;
                    batch =
                        self.retry(agent, Phase::Decision, meeting, frozen, attempt, &message)?;
                }
            }
        }
    }

    fn retry(
        &mut self,
        agent: AgentId,
        phase: Phase,
        meeting: &MeetingSpec,
        calendar: &Calendar,
        attempt: usize,
        conflict: &str,
    ) -> Result<ActionBatch, EngineError> {
        let round = meeting.round;
        let max_attempts = self.config.decision_retries;
        let prompt = retry_message(attempt, max_attempts, conflict);
        let render = self.render(calendar);
        self.emit(EventKind::DecideStart {
            round,
            phase,
            agent,
            attempt,
            prompt: prompt.clone(),
            calendar_render: render,
        })?;
        let view = meeting_view(meeting, agent);
        let result = self.agents[agent].retry_decide(&RetryRequest {
            round,
            phase,
            attempt,
            max_attempts,
            conflict,
            meeting: &view,
            calendar,
            prompt: &prompt,
        });
        self.record_decide_end(round, phase, agent, attempt, result)
    }

    fn record_decide_end(
        &mut self,
        round: usize,
        phase: Phase,
        agent: AgentId,
        attempt: usize,
        result: Result<Decision, AgentError>,
    ) -> Result<ActionBatch, EngineError> {
        let (decision, error) = match result {
            Ok(d) => (d, None),
            Err(e) => (Decision::pass(), Some(e.0)),
        };
        self.emit(EventKind::DecideEnd {
            round,
            phase,
            agent,
            attempt,
            actions: decision.actions.actions.clone(),
            thinking: decision.thinking,
            error,
            usage: None,
            latency_ms: None,
        })?;
        Ok(decision.actions)
    }
}

fn wrong_meeting(batch: &ActionBatch, expected: MeetingId) -> Option<String> {
    batch.actions.iter().enumerate().find_map(|(i, a)| match a {
        Action::Schedule { meeting_id, .. } if *meeting_id != expected => Some(format!(
            "Wrong meeting: action {} schedules meeting {meeting_id}, but this round is for meeting {expected}",
            i + 1
        )),
        _ => None,
    })
}

/// Runs every round of a scenario and returns the finished trace.
pub fn run_game<'s>(
    scenario: &'s Scenario,
    agents: &mut [Box<dyn Agent + 's>],
    config: &'s EngineConfig,
    options: &RunOptions,
) -> Result<TraceFile, EngineError> {
    config.validate()?;
    if agents.len() != scenario.num_agents() {
        return Err(EngineError::AgentCount {
            expected: scenario.num_agents(),
            got: agents.len(),
        });
    }
    let lineup = options
        .lineup
        .clone()
        .unwrap_or_else(|| agents.iter().map(|a| a.protocol().to_string()).collect());
    let game_id = derive_game_id(scenario.params.seed, &lineup);
    let started_at = options.clock.now();
    let trace = TraceFile::new(
        game_id,
        TraceConfig {
            scenario: scenario.clone(),
            engine: config.clone(),
            lineup,
            metadata: options.metadata.clone(),
        },
        started_at,
    );
    let mut game = Game {
        scenario,
        config,
        agents,
        trace,
        calendars: scenario.calendars.clone(),
        penalty: vec![0; scenario.num_agents()],
        resolved: Vec::new(),
        clock: options.clock.clone(),
    };
    game.run()?;

    let final_state = fold_final_state(&game.trace);
    debug_assert_eq!(final_state.calendars, game.calendars);
    debug_assert_eq!(final_state.per_agent_cost, game.penalty);
    let total_rounds = scenario.meetings.len();
    let metrics = RunMetrics {
        optimal_cost: scenario.optimal_cost(),
        greedy_cost: scenario.greedy_cost(),
        realized_cost: final_state.total_cost,
        cost_vs_optimal: ratio(final_state.total_cost, scenario.optimal_cost()),
        cost_vs_greedy: scenario
            .greedy_cost()
            .and_then(|g| ratio(final_state.total_cost, g)),
        success_rate: if total_rounds == 0 {
            1.0
        } else {
            final_state.rounds_succeeded as f64 / total_rounds as f64
        },
    };
    let mut trace = game.trace;
    trace.final_state = final_state;
    trace.metrics = metrics;
    trace.ended_at = options.clock.now();
    Ok(trace)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}
