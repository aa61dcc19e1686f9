//! Incremental MAP: responders disclose their full per-slot cost vector and
//! the initiator picks the cheapest slot every participant can take.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{dm, insertion_cost, parse_inbox, placement_batch, TypedMessage};
use crate::domain::{AgentId, MeetingId, Slot};
use crate::engine::{
    Agent, AgentError, DecideRequest, Decision, OutboundMessage, RetryRequest, TurnRequest,
    TurnResponse,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImapMessage {
    CostRequest {
        meeting: MeetingId,
        slots: Vec<Slot>,
    },
    /// Aligned with the request's slot list; `None` marks an infeasible slot.
    Costs {
        meeting: MeetingId,
        costs: Vec<Option<u32>>,
    },
    Decision {
        meeting: MeetingId,
        slot: Option<Slot>,
    },
}

impl ImapMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            ImapMessage::CostRequest { .. } => "cost_request",
            ImapMessage::Costs { .. } => "costs",
            ImapMessage::Decision { .. } => "decision",
        }
    }
}

#[derive(Debug, Default)]
struct RoundState {
    round: usize,
    requested: Option<Vec<Slot>>,
    costs: BTreeMap<AgentId, Vec<Option<u32>>>,
    decided: bool,
    agreed: Option<Slot>,
}

#[derive(Debug, Default)]
pub struct ImapAgent {
    state: RoundState,
}

impl ImapAgent {
    pub fn new() -> Self {
        Self::default()
    }

    fn sync(&mut self, round: usize) {
        if self.state.round != round {
            self.state = RoundState {
                round,
                ..RoundState::default()
            };
        }
    }
}

/// Minimum total cost over slots feasible for everyone, ties to the lower slot.
fn pick_slot(
    own: &[Option<u32>],
    requested: &[Slot],
    replies: &BTreeMap<AgentId, Vec<Option<u32>>>,
) -> Option<(Slot, u32)> {
    let mut best: Option<(Slot, u32)> = None;
    for (i, &slot) in requested.iter().enumerate() {
        let mut total = match own.get(slot).copied().flatten() {
            Some(c) => c,
            None => continue,
        };
        let mut feasible = true;
        for costs in replies.values() {
            match costs.get(i).copied().flatten() {
                Some(c) => total += c,
                None => {
                    feasible = false;
                    break;
                }
            }
        }
        if feasible && best.map_or(true, |(_, t)| total < t) {
            best = Some((slot, total));
        }
    }
    best
}

impl Agent for ImapAgent {
    fn protocol(&self) -> &str {
        "imap"
    }

    fn turn(&mut self, req: &TurnRequest<'_>) -> Result<TurnResponse, AgentError> {
        self.sync(req.round);
        if !req.is_participant {
            return Ok(TurnResponse::default());
        }
        let me = req.calendar.agent;
        let meeting = req.meeting;
        let num_slots = req.calendar.num_slots();
        let responders: Vec<AgentId> = meeting
            .participants
            .iter()
            .copied()
            .filter(|&a| a != me)
            .collect();
        let mut out: Vec<OutboundMessage> = Vec::new();
        let mut thinking = String::new();

        for (from, msg) in parse_inbox(req.inbox) {
            let TypedMessage::Imap(msg) = msg else {
                continue;
            };
            match msg {
                ImapMessage::CostRequest { meeting: id, slots } if id == meeting.id => {
                    let costs = slots
                        .iter()
                        .map(|&k| {
                            if k < num_slots {
                                insertion_cost(req.calendar, k)
                            } else {
                                None
                            }
                        })
                        .collect();
                    out.push(dm(
                        from,
                        TypedMessage::Imap(ImapMessage::Costs { meeting: id, costs }),
                    ));
                }
                ImapMessage::Costs { meeting: id, costs } if id == meeting.id => {
                    self.state.costs.insert(from, costs);
                }
                ImapMessage::Decision { meeting: id, slot } if id == meeting.id => {
                    self.state.decided = true;
                    self.state.agreed = slot;
                }
                _ => {}
            }
        }

        if me == meeting.initiator() && !self.state.decided {
            match self.state.requested.clone() {
                None => {
                    let slots: Vec<Slot> = (0..num_slots).collect();
                    for &r in &responders {
                        out.push(dm(
                            r,
                            TypedMessage::Imap(ImapMessage::CostRequest {
                                meeting: meeting.id,
                                slots: slots.clone(),
                            }),
                        ));
                    }
                    self.state.requested = Some(slots);
                }
                Some(requested) => {
                    let complete = responders.iter().all(|r| self.state.costs.contains_key(r));
                    if complete || req.turn + 1 >= req.max_turns {
                        let own: Vec<Option<u32>> = (0..num_slots)
                            .map(|k| insertion_cost(req.calendar, k))
                            .collect();
                        let choice = if complete {
                            pick_slot(&own, &requested, &self.state.costs)
                        } else {
                            None
                        };
                        thinking = match choice {
                            Some((slot, total)) => {
                                format!("slot {slot} has minimum total cost {total}")
                            }
                            None => "no slot is feasible for every participant".into(),
                        };
                        let slot = choice.map(|(s, _)| s);
                        self.state.decided = true;
                        self.state.agreed = slot;
                        for &r in &responders {
                            out.push(dm(
                                r,
                                TypedMessage::Imap(ImapMessage::Decision {
                                    meeting: meeting.id,
                                    slot,
                                }),
                            ));
                        }
                    }
                }
            }
        }
        Ok(TurnResponse {
            thinking,
            messages: out,
        })
    }

    fn decide(&mut self, req: &DecideRequest<'_>) -> Result<Decision, AgentError> {
        self.sync(req.round);
        let Some(slot) = self.state.agreed else {
            return Ok(Decision::pass());
        };
        Ok(
            match placement_batch(req.calendar, req.meeting.id, slot, &[]) {
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_minimum_total_with_slot_tiebreak() {
        let own = vec![Some(0), Some(0), Some(1), None];
        let requested = vec![0, 1, 2, 3];
        let mut replies = BTreeMap::new();
        replies.insert(1, vec![Some(3), Some(2), Some(0), Some(0)]);
        replies.insert(2, vec![Some(2), Some(0), Some(1), Some(0)]);
        // totals: 5, 2, 2, infeasible
        assert_eq!(pick_slot(&own, &requested, &replies), Some((1, 2)));
    }

    #[test]
    fn null_cost_makes_slot_infeasible() {
        let own = vec![Some(0), Some(0)];
        let mut replies = BTreeMap::new();
        replies.insert(1, vec![None, None]);
        assert_eq!(pick_slot(&own, &[0, 1], &replies), None);
    }

    #[test]
    fn all_free_picks_slot_zero() {
        let own = vec![Some(0); 4];
        let mut replies = BTreeMap::new();
        replies.insert(1, vec![Some(0); 4]);
        assert_eq!(pick_slot(&own, &[0, 1, 2, 3], &replies), Some((0, 0)));
    }
}
