//! Scheduling-difficulty MAP: binary feasibility replies, no costs.
//!
//! A responder may accept a slot held by a prior meeting when bumping that
//! meeting is strictly easier than rescheduling the new one. The bump is
//! repaired in the same round: the bumper asks the bumped meeting's
//! initiator to find a new common slot before the decision phase.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{
    dm, insertion_cost, moves_batch, parse_inbox, placement_batch, MeetingMove, ProtocolError,
    TypedMessage,
};
use crate::domain::{AgentId, Calendar, MeetingId, MeetingSpec, Slot, SlotState};
use crate::engine::{
    Agent, AgentError, DecideRequest, Decision, OutboundMessage, RetryRequest, TurnRequest,
    TurnResponse,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SdStatus {
    Pending,
    Impossible,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SdMessage {
    Propose {
        meeting: MeetingId,
        slot: Slot,
    },
    Reply {
        meeting: MeetingId,
        slot: Slot,
        status: SdStatus,
    },
    Confirm {
        meeting: MeetingId,
        slot: Slot,
    },
    Fail {
        meeting: MeetingId,
    },
    RescheduleRequest {
        meeting: MeetingId,
    },
    ProposeReschedule {
        meeting: MeetingId,
        slot: Slot,
    },
    RescheduleReply {
        meeting: MeetingId,
        slot: Slot,
        status: SdStatus,
    },
    ConfirmReschedule {
        meeting: MeetingId,
        slot: Slot,
    },
    FailReschedule {
        meeting: MeetingId,
    },
}

impl SdMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            SdMessage::Propose { .. } => "propose",
            SdMessage::Reply { .. } => "reply",
            SdMessage::Confirm { .. } => "confirm",
            SdMessage::Fail { .. } => "fail",
            SdMessage::RescheduleRequest { .. } => "reschedule_request",
            SdMessage::ProposeReschedule { .. } => "propose_reschedule",
            SdMessage::RescheduleReply { .. } => "reschedule_reply",
            SdMessage::ConfirmReschedule { .. } => "confirm_reschedule",
            SdMessage::FailReschedule { .. } => "fail_reschedule",
        }
    }
}

/// Per-agent difficulty weights; agents not listed weigh 1.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SdModel {
    pub sigma: BTreeMap<AgentId, f64>,
}

impl SdModel {
    pub fn weight(&self, agent: AgentId) -> f64 {
        self.sigma.get(&agent).copied().unwrap_or(1.0)
    }

    /// Δ(M) from `me`'s point of view: summed weight of the other participants.
    pub fn difficulty(&self, participants: &BTreeSet<AgentId>, me: AgentId) -> f64 {
        participants
            .iter()
            .filter(|&&a| a != me)
            .map(|&a| self.weight(a))
            .sum()
    }

    /// Bump the existing meeting only if rescheduling it is strictly easier.
    pub fn bump_allowed(
        &self,
        existing: &BTreeSet<AgentId>,
        incoming: &BTreeSet<AgentId>,
        me: AgentId,
    ) -> bool {
        self.difficulty(existing, me) < self.difficulty(incoming, me)
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        match self
            .sigma
            .iter()
            .find(|(_, w)| !(w.is_finite() && **w >= 0.0))
        {
            Some((a, w)) => Err(ProtocolError::InvalidParams(format!(
                "sigma[{a}] = {w} must be a finite nonnegative weight"
            ))),
            None => Ok(()),
        }
    }
}

/// Local binary check of `slot` for `incoming`, with the meeting it would bump.
fn check_slot(
    cal: &Calendar,
    slot: Slot,
    incoming: &MeetingSpec,
    model: &SdModel,
) -> (SdStatus, Option<MeetingId>) {
    match cal.slots.get(slot) {
        Some(SlotState::Meeting(m))
            if model.bump_allowed(&m.participants, &incoming.participants, cal.agent) =>
        {
            (SdStatus::Pending, Some(m.id))
        }
        Some(_) if insertion_cost(cal, slot).is_some() => (SdStatus::Pending, None),
        _ => (SdStatus::Impossible, None),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum RepairStatus {
    Waiting,
    Confirmed,
    Failed,
}

#[derive(Debug)]
struct Bump {
    meeting: MeetingId,
    status: RepairStatus,
}

/// A repair this agent coordinates as the bumped meeting's initiator.
#[derive(Debug)]
struct Repair {
    from: Slot,
    affected: Vec<AgentId>,
    current: Slot,
    replies: BTreeMap<AgentId, SdStatus>,
    done: bool,
}

#[derive(Debug, Default)]
struct RoundState {
    round: usize,
    // initiator of the incoming meeting
    started: bool,
    current: Option<Slot>,
    replies: BTreeMap<AgentId, SdStatus>,
    concluded: bool,
    // every participant
    agreed: Option<Slot>,
    tentative: Option<(Slot, MeetingId)>,
    bump: Option<Bump>,
    requested: BTreeSet<MeetingId>,
    // bumped-meeting initiators
    repairs: BTreeMap<MeetingId, Repair>,
    moves: Vec<MeetingMove>,
}

#[derive(Debug, Default)]
pub struct SdAgent {
    model: SdModel,
    state: RoundState,
}

fn sd(msg: SdMessage) -> TypedMessage {
    TypedMessage::Sd(msg)
}

impl SdAgent {
    pub fn new(model: SdModel) -> Self {
        Self {
            model,
            state: RoundState::default(),
        }
    }

    fn sync(&mut self, round: usize) {
        if self.state.round != round {
            self.state = RoundState {
                round,
                ..RoundState::default()
            };
        }
    }

    /// First slot at or after `from` this agent can accept, recording any bump.
    fn next_candidate(
        &mut self,
        cal: &Calendar,
        from: Slot,
        incoming: &MeetingSpec,
    ) -> Option<Slot> {
        (from..cal.num_slots()).find(|&k| {
            let (status, bump) = check_slot(cal, k, incoming, &self.model);
            if status == SdStatus::Pending {
                self.state.tentative = bump.map(|m| (k, m));
                true
            } else {
                false
            }
        })
    }

    fn become_bumper(
        &mut self,
        cal: &Calendar,
        slot: Slot,
        last_turn: bool,
        out: &mut Vec<OutboundMessage>,
    ) {
        let Some((bump_slot, bumped)) = self.state.tentative else {
            return;
        };
        if bump_slot != slot {
            return;
        }
        self.state.bump = Some(Bump {
            meeting: bumped,
            status: RepairStatus::Waiting,
        });
        let Some(SlotState::Meeting(m)) = cal.slots.get(slot) else {
            return;
        };
        let initiator = *m.participants.first().expect("meeting has participants");
        if initiator == cal.agent {
            self.start_repair(cal, bumped, last_turn, out);
        } else if self.state.requested.insert(bumped) {
            out.push(dm(
                initiator,
                sd(SdMessage::RescheduleRequest { meeting: bumped }),
            ));
        }
    }

    fn start_repair(
        &mut self,
        cal: &Calendar,
        bumped: MeetingId,
        last_turn: bool,
        out: &mut Vec<OutboundMessage>,
    ) {
        if self.state.repairs.contains_key(&bumped) {
            return;
        }
        let Some(from) = cal.find_meeting(bumped) else {
            return;
        };
        let SlotState::Meeting(m) = cal.slot(from) else {
            return;
        };
        let affected: Vec<AgentId> = m
            .participants
            .iter()
            .copied()
            .filter(|&a| a != cal.agent)
            .collect();
        let first = if last_turn {
            None
        } else {
            cal.free_slots().find(|&r| r != from)
        };
        match first {
            Some(r) => {
                for &a in &affected {
                    out.push(dm(
                        a,
                        sd(SdMessage::ProposeReschedule {
                            meeting: bumped,
                            slot: r,
                        }),
                    ));
                }
                self.state.repairs.insert(
                    bumped,
                    Repair {
                        from,
                        affected,
                        current: r,
                        replies: BTreeMap::new(),
                        done: false,
                    },
                );
            }
            None => {
                for &a in &affected {
                    out.push(dm(a, sd(SdMessage::FailReschedule { meeting: bumped })));
                }
                self.mark_bump(bumped, RepairStatus::Failed);
                self.state.repairs.insert(
                    bumped,
                    Repair {
                        from,
                        affected,
                        current: from,
                        replies: BTreeMap::new(),
                        done: true,
                    },
                );
            }
        }
    }

    fn mark_bump(&mut self, meeting: MeetingId, status: RepairStatus) {
        if let Some(b) = self.state.bump.as_mut() {
            if b.meeting == meeting {
                b.status = status;
            }
        }
    }

    fn advance_repairs(&mut self, cal: &Calendar, last_turn: bool, out: &mut Vec<OutboundMessage>) {
        let ids: Vec<MeetingId> = self.state.repairs.keys().copied().collect();
        for id in ids {
            let repair = &self.state.repairs[&id];
            if repair.done
                || !repair
                    .affected
                    .iter()
                    .all(|a| repair.replies.contains_key(a))
            {
                continue;
            }
            let accepted = repair.replies.values().all(|s| *s == SdStatus::Pending);
            let (from, current) = (repair.from, repair.current);
            let affected = repair.affected.clone();
            if accepted {
                for &a in &affected {
                    out.push(dm(
                        a,
                        sd(SdMessage::ConfirmReschedule {
                            meeting: id,
                            slot: current,
                        }),
                    ));
                }
                self.state.moves.push(MeetingMove {
                    meeting: id,
                    from,
                    to: current,
                });
                self.mark_bump(id, RepairStatus::Confirmed);
                self.state.repairs.get_mut(&id).expect("present").done = true;
                continue;
            }
            let next = if last_turn {
                None
            } else {
                cal.free_slots().find(|&r| r > current && r != from)
            };
            let repair = self.state.repairs.get_mut(&id).expect("present");
            repair.replies.clear();
            match next {
                Some(r) => {
                    repair.current = r;
                    for &a in &affected {
                        out.push(dm(
                            a,
                            sd(SdMessage::ProposeReschedule {
                                meeting: id,
                                slot: r,
                            }),
                        ));
                    }
                }
                None => {
                    repair.done = true;
                    for &a in &affected {
                        out.push(dm(a, sd(SdMessage::FailReschedule { meeting: id })));
                    }
                    self.mark_bump(id, RepairStatus::Failed);
                }
            }
        }
    }

    fn propose(
        &mut self,
        meeting: &MeetingSpec,
        responders: &[AgentId],
        slot: Slot,
        out: &mut Vec<OutboundMessage>,
    ) {
        self.state.current = Some(slot);
        self.state.replies.clear();
        for &r in responders {
            out.push(dm(
                r,
                sd(SdMessage::Propose {
                    meeting: meeting.id,
                    slot,
                }),
            ));
        }
    }

    fn fail(
        &mut self,
        meeting: &MeetingSpec,
        responders: &[AgentId],
        out: &mut Vec<OutboundMessage>,
    ) {
        self.state.concluded = true;
        self.state.agreed = None;
        for &r in responders {
            out.push(dm(
                r,
                sd(SdMessage::Fail {
                    meeting: meeting.id,
                }),
            ));
        }
    }
}

impl Agent for SdAgent {
    fn protocol(&self) -> &str {
        "sd_map"
    }

    fn turn(&mut self, req: &TurnRequest<'_>) -> Result<TurnResponse, AgentError> {
        self.sync(req.round);
        let cal = req.calendar;
        let me = cal.agent;
        let meeting = req.meeting;
        let last_turn = req.turn + 1 >= req.max_turns;
        let mut out = Vec::new();

        for (from, msg) in parse_inbox(req.inbox) {
            let TypedMessage::Sd(msg) = msg else { continue };
            match msg {
                SdMessage::Propose { meeting: id, slot }
                    if id == meeting.id && req.is_participant =>
                {
                    let (status, bump) = check_slot(cal, slot, meeting, &self.model);
                    self.state.tentative = bump.map(|m| (slot, m));
                    out.push(dm(
                        from,
                        sd(SdMessage::Reply {
                            meeting: id,
                            slot,
                            status,
                        }),
                    ));
                }
                SdMessage::Reply {
                    meeting: id,
                    slot,
                    status,
                } if id == meeting.id => {
                    if self.state.current == Some(slot) {
                        self.state.replies.insert(from, status);
                    }
                }
                SdMessage::Confirm { meeting: id, slot } if id == meeting.id => {
                    self.state.agreed = Some(slot);
                    self.state.concluded = true;
                    self.become_bumper(cal, slot, last_turn, &mut out);
                }
                SdMessage::Fail { meeting: id } if id == meeting.id => {
                    self.state.agreed = None;
                    self.state.concluded = true;
                }
                SdMessage::RescheduleRequest { meeting: bumped } => {
                    self.start_repair(cal, bumped, last_turn, &mut out);
                }
                SdMessage::ProposeReschedule {
                    meeting: bumped,
                    slot,
                } => {
                    let status = if cal.find_meeting(bumped).is_some() && cal.is_free(slot) {
                        SdStatus::Pending
                    } else {
                        SdStatus::Impossible
                    };
                    out.push(dm(
                        from,
                        sd(SdMessage::RescheduleReply {
                            meeting: bumped,
                            slot,
                            status,
                        }),
                    ));
                }
                SdMessage::RescheduleReply {
                    meeting: bumped,
                    slot,
                    status,
                } => {
                    if let Some(r) = self.state.repairs.get_mut(&bumped) {
                        if !r.done && r.current == slot {
                            r.replies.insert(from, status);
                        }
                    }
                }
                SdMessage::ConfirmReschedule {
                    meeting: bumped,
                    slot,
                } => {
                    if let Some(s) = cal.find_meeting(bumped) {
                        self.state.moves.push(MeetingMove {
                            meeting: bumped,
                            from: s,
                            to: slot,
                        });
                    }
                    self.mark_bump(bumped, RepairStatus::Confirmed);
                }
                SdMessage::FailReschedule { meeting: bumped } => {
                    self.mark_bump(bumped, RepairStatus::Failed);
                }
                _ => {}
            }
        }

        if req.is_participant && me == meeting.initiator() && !self.state.concluded {
            let responders: Vec<AgentId> = meeting
                .participants
                .iter()
                .copied()
                .filter(|&a| a != me)
                .collect();
            if !self.state.started {
                self.state.started = true;
                match self.next_candidate(cal, 0, meeting) {
                    Some(k) => self.propose(meeting, &responders, k, &mut out),
                    None => self.fail(meeting, &responders, &mut out),
                }
            } else if let Some(current) = self.state.current {
                if responders
                    .iter()
                    .all(|r| self.state.replies.contains_key(r))
                {
                    if self.state.replies.values().all(|s| *s == SdStatus::Pending) {
                        self.state.concluded = true;
                        self.state.agreed = Some(current);
                        for &r in &responders {
                            out.push(dm(
                                r,
                                sd(SdMessage::Confirm {
                                    meeting: meeting.id,
                                    slot: current,
                                }),
                            ));
                        }
                        self.become_bumper(cal, current, last_turn, &mut out);
                    } else {
                        match self
                            .next_candidate(cal, current + 1, meeting)
                            .filter(|_| !last_turn)
                        {
                            Some(k) => self.propose(meeting, &responders, k, &mut out),
                            None => self.fail(meeting, &responders, &mut out),
                        }
                    }
                } else if last_turn {
                    self.fail(meeting, &responders, &mut out);
                }
            }
        }
        self.advance_repairs(cal, last_turn, &mut out);
        Ok(TurnResponse {
            thinking: String::new(),
            messages: out,
        })
    }

    fn voluntary_decide(&mut self, req: &DecideRequest<'_>) -> Result<Decision, AgentError> {
        self.sync(req.round);
        if self.state.moves.is_empty() {
            return Ok(Decision::pass());
        }
        Ok(
            match moves_batch(req.calendar, &self.state.moves, req.meeting.id) {
                Some(actions) => Decision {
                    thinking: "apply confirmed reschedule".into(),
                    actions,
                },
                None => Decision::pass(),
            },
        )
    }

    fn decide(&mut self, req: &DecideRequest<'_>) -> Result<Decision, AgentError> {
        self.sync(req.round);
        let Some(slot) = self.state.agreed else {
            return Ok(Decision::pass());
        };
        if let Some(b) = &self.state.bump {
            if b.status != RepairStatus::Confirmed {
                return Ok(Decision {
                    thinking: format!("{} could not be repaired; keeping it in place", b.meeting),
                    actions: Default::default(),
                });
            }
        }
        Ok(
            match placement_batch(req.calendar, req.meeting.id, slot, &self.state.moves) {
                Some(actions) => Decision {
                    thinking: format!("schedule {} at slot {slot}", req.meeting.id),
                    actions,
                },
                None => Decision::pass(),
            },
        )
    }

    fn retry_decide(&mut self, _req: &RetryRequest<'_>) -> Result<Decision, AgentError> {
        Ok(Decision::pass())
    }
}
