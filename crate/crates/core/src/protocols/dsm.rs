//! Distributed score-based multi-round mechanism.
//!
//! The initiator offers `L` candidate slots per sub-round, responders answer
//! with satisfaction levels in `0..D`, and the initiator announces the best
//! slot every scorer can take. Points flow from scorers to the initiator
//! (scoring cost) and back to the scorers whose slot is chosen (reward).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{
    dm, insertion_cost, landing_slot, moves_batch, parse_inbox, placement_batch, MeetingMove,
    ProtocolError, TypedMessage,
};
use crate::domain::{AgentId, Calendar, MeetingId, MeetingSpec, Slot, SlotState};
use crate::engine::{
    Agent, AgentError, DecideRequest, Decision, OutboundMessage, RetryRequest, TurnRequest,
    TurnResponse,
};

/// Number of satisfaction levels `D`.
pub const SATISFACTION_LEVELS: u8 = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DsmParams {
    pub l_min: usize,
    pub l_max: usize,
    pub beta: f64,
    pub theta: f64,
    pub w_soc: f64,
    /// 1: a displaced meeting lands on a free slot. 2: its landing slot may
    /// hold a movable errand, displaced one more hop.
    pub cascade_depth: usize,
    pub displacement_targets: usize,
    pub exhaustive: bool,
    #[serde(default = "default_levels")]
    pub d: u8,
}

fn default_levels() -> u8 {
    SATISFACTION_LEVELS
}

impl DsmParams {
    pub fn welfare() -> Self {
        Self {
            l_min: 1,
            l_max: 12,
            beta: 1.0,
            theta: 0.0,
            w_soc: 1.0,
            cascade_depth: 2,
            displacement_targets: 4,
            exhaustive: true,
            d: SATISFACTION_LEVELS,
        }
    }

    pub fn private() -> Self {
        Self {
            l_min: 1,
            l_max: 2,
            beta: 0.25,
            theta: 10.0,
            w_soc: 0.25,
            cascade_depth: 1,
            displacement_targets: 2,
            exhaustive: false,
            d: SATISFACTION_LEVELS,
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: &str| Err(ProtocolError::InvalidParams(m.into()));
        if self.l_min == 0 || self.l_min > self.l_max {
            return bad("need 1 <= l_min <= l_max");
        }
        if [self.beta, self.theta, self.w_soc]
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return bad("beta, theta and w_soc must be finite and nonnegative");
        }
        if self.d < 3 {
            return bad("d must be at least 3");
        }
        Ok(())
    }
}

/// Maps a one-hop displacement cost to a level: `D-1` for 0, then
/// `clamp(D-1-c, 1, D-2)`.
pub fn score_from_cost(cost: u32, d: u8) -> u8 {
    let top = u32::from(d - 1);
    if cost == 0 {
        d - 1
    } else {
        top.saturating_sub(cost).clamp(1, top - 1) as u8
    }
}

/// Satisfaction of placing a meeting at `slot`; 0 when infeasible.
pub fn satisfaction(cal: &Calendar, slot: Slot, d: u8) -> u8 {
    insertion_cost(cal, slot).map_or(0, |c| score_from_cost(c, d))
}

/// `C(s) = D - s - 1`.
pub fn scoring_cost(s: u8, d: u8) -> u32 {
    u32::from(d - 1 - s)
}

pub fn availability(scores: &[u8]) -> usize {
    scores.iter().filter(|&&s| s > 0).count()
}

/// Scores sorted descending, the `i`-th weighted by `(A+1)^i`.
pub fn flexibility(scores: &[u8]) -> u128 {
    let base = availability(scores) as u128 + 1;
    let mut sorted = scores.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let mut weight: u128 = 1;
    let mut total: u128 = 0;
    for s in sorted {
        total = total.saturating_add(u128::from(s).saturating_mul(weight));
        weight = weight.saturating_mul(base);
    }
    total
}

/// `R = (D-1-s*) + max(0, min(A, L) - 1)`, zero when `s*` is 0 or `D-1`.
pub fn reward(selected: u8, availability: usize, offer_size: usize, d: u8) -> u32 {
    if selected == 0 || selected == d - 1 {
        return 0;
    }
    u32::from(d - 1 - selected) + availability.min(offer_size).saturating_sub(1) as u32
}

/// One scorer's reply in the deciding sub-round.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponderScores {
    pub agent: AgentId,
    pub scores: Vec<u8>,
    /// Index of the chosen plan in `scores`, if this agent scored it.
    pub selected: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponderSettlement {
    pub agent: AgentId,
    pub availability: usize,
    pub flexibility: u128,
    pub scoring_cost: u32,
    pub selected_score: Option<u8>,
    pub reward: u32,
    /// Net change of this responder's points.
    pub delta: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Settlement {
    pub responders: Vec<ResponderSettlement>,
    /// `Σ C(s) - Σ R` over all responders.
    pub initiator_delta: i64,
}

pub fn settle(replies: &[ResponderScores], d: u8) -> Settlement {
    let mut responders = Vec::new();
    let mut initiator_delta = 0i64;
    for r in replies {
        let a = availability(&r.scores);
        let cost: u32 = r
            .scores
            .iter()
            .filter(|&&s| s > 0)
            .map(|&s| scoring_cost(s, d))
            .sum();
        let selected_score = r.selected.and_then(|i| r.scores.get(i).copied());
        let rew = selected_score.map_or(0, |s| reward(s, a, r.scores.len(), d));
        initiator_delta += i64::from(cost) - i64::from(rew);
        responders.push(ResponderSettlement {
            agent: r.agent,
            availability: a,
            flexibility: flexibility(&r.scores),
            scoring_cost: cost,
            selected_score,
            reward: rew,
            delta: i64::from(rew) - i64::from(cost),
        });
    }
    Settlement {
        responders,
        initiator_delta,
    }
}

/// `(free fraction)^(responders)`.
pub fn p_hat(free_slots: usize, num_slots: usize, responders: usize) -> f64 {
    if num_slots == 0 {
        return 0.0;
    }
    (free_slots as f64 / num_slots as f64).powi(responders as i32)
}

/// Expected utility of an offer of size `l`.
pub fn offer_utility(l: usize, p_hat: f64, v_bar: f64, params: &DsmParams) -> f64 {
    let p = 1.0 - (1.0 - p_hat).powi(l as i32);
    p * v_bar + params.w_soc * p - params.theta * l as f64 - params.beta * (1.0 - p)
}

/// Offer size maximizing `U(L)` over `[L_min, min(L_max, n)]`, ties to the
/// smaller `L`. `local_scores` are the candidates' scores, best first.
pub fn choose_offer_size(
    local_scores: &[u8],
    p_hat: f64,
    params: &DsmParams,
) -> Option<(usize, f64)> {
    let n = local_scores.len();
    if n == 0 {
        return None;
    }
    let hi = params.l_max.min(n);
    let lo = params.l_min.min(hi);
    let top = f64::from(params.d - 1);
    let mut best: Option<(usize, f64)> = None;
    let mut sum = 0.0;
    for (i, &s) in local_scores.iter().enumerate().take(hi) {
        sum += f64::from(s) / top;
        let l = i + 1;
        if l < lo {
            continue;
        }
        let u = offer_utility(l, p_hat, sum / l as f64, params);
        if best.map_or(true, |(_, b)| u > b) {
            best = Some((l, u));
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Displacement {
    pub meeting: MeetingId,
    pub to: Slot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub plan_id: u32,
    pub slot: Slot,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub displace: Option<Displacement>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanScore {
    pub plan_id: u32,
    pub score: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DsmMessage {
    Proposals {
        meeting: MeetingId,
        sub_round: u32,
        plans: Vec<Plan>,
    },
    Scores {
        meeting: MeetingId,
        sub_round: u32,
        scores: Vec<PlanScore>,
    },
    Decision {
        meeting: MeetingId,
        slot: Option<Slot>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        plan_id: Option<u32>,
    },
}

impl DsmMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            DsmMessage::Proposals { .. } => "proposals",
            DsmMessage::Scores { .. } => "scores",
            DsmMessage::Decision { .. } => "decision",
        }
    }
}

fn msg(m: DsmMessage) -> TypedMessage {
    TypedMessage::Dsm(m)
}

/// Score for moving the meeting at `from` to `to` so `from` opens up.
fn displacement_score(cal: &Calendar, from: Slot, to: Slot, depth: usize, d: u8) -> u8 {
    if to == from || depth == 0 {
        return 0;
    }
    let cost = match cal.slots.get(to) {
        Some(SlotState::Free) => Some(0),
        Some(SlotState::Errand(e)) if !e.blocked && depth >= 2 => {
            landing_slot(cal, &BTreeSet::from([from, to])).map(|_| e.cost)
        }
        _ => None,
    };
    cost.map_or(0, |c| score_from_cost(1 + c, d))
}

/// How this agent scores a plan for `incoming`.
fn plan_score(cal: &Calendar, plan: &Plan, incoming: &MeetingSpec, params: &DsmParams) -> u8 {
    if let Some(disp) = plan.displace {
        if cal.find_meeting(disp.meeting) == Some(plan.slot) {
            return displacement_score(cal, plan.slot, disp.to, params.cascade_depth, params.d);
        }
    }
    if incoming.is_participant(cal.agent) {
        satisfaction(cal, plan.slot, params.d)
    } else {
        0
    }
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    slot: Slot,
    displace: Option<Displacement>,
    score: u8,
}

/// The initiator's locally schedulable options, best first.
fn candidate_pool(cal: &Calendar, params: &DsmParams) -> Vec<Candidate> {
    let mut pool: Vec<Candidate> = (0..cal.num_slots())
        .filter_map(|k| {
            let score = satisfaction(cal, k, params.d);
            (score > 0).then_some(Candidate {
                slot: k,
                displace: None,
                score,
            })
        })
        .collect();
    if params.cascade_depth >= 1 {
        for (k, m) in cal.meetings() {
            let targets = (0..cal.num_slots())
                .filter_map(|t| {
                    let score = displacement_score(cal, k, t, params.cascade_depth, params.d);
                    (score > 0).then_some(Candidate {
                        slot: k,
                        displace: Some(Displacement {
                            meeting: m.id,
                            to: t,
                        }),
                        score,
                    })
                })
                .take(params.displacement_targets);
            pool.extend(targets);
        }
    }
    pool.sort_by(|a, b| {
        b.score
            .cmp(&a.score)
            .then(a.slot.cmp(&b.slot))
            .then(a.displace.cmp(&b.displace))
    });
    pool
}

#[derive(Debug, Default)]
struct RoundState {
    round: usize,
    // initiator
    started: bool,
    concluded: bool,
    sub_round: u32,
    next_plan_id: u32,
    tried: BTreeSet<(Slot, Option<Displacement>)>,
    offer: Vec<Plan>,
    own_scores: Vec<u8>,
    /// Who was sent which plans this sub-round.
    sent: BTreeMap<AgentId, Vec<u32>>,
    replies: BTreeMap<AgentId, Vec<PlanScore>>,
    // any agent
    received: BTreeMap<u32, Plan>,
    agreed: Option<Plan>,
    moves: Vec<MeetingMove>,
}

#[derive(Debug)]
pub struct DsmAgent {
    name: String,
    params: DsmParams,
    points: i64,
    state: RoundState,
}

impl DsmAgent {
    pub fn new(name: String, params: DsmParams) -> Self {
        Self {
            name,
            params,
            points: 0,
            state: RoundState::default(),
        }
    }

    pub fn points(&self) -> i64 {
        self.points
    }

    fn sync(&mut self, round: usize) {
        if self.state.round != round {
            self.state = RoundState {
                round,
                ..RoundState::default()
            };
        }
    }

    fn fail(
        &mut self,
        meeting: &MeetingSpec,
        responders: &[AgentId],
        out: &mut Vec<OutboundMessage>,
    ) -> String {
        self.state.concluded = true;
        for &r in responders {
            out.push(dm(
                r,
                msg(DsmMessage::Decision {
                    meeting: meeting.id,
                    slot: None,
                    plan_id: None,
                }),
            ));
        }
        format!(
            "no jointly feasible slot after {} sub-round(s)",
            self.state.sub_round
        )
    }

    /// Sends the next offer, or fails when the search should stop.
    fn start_sub_round(
        &mut self,
        cal: &Calendar,
        meeting: &MeetingSpec,
        responders: &[AgentId],
        last_turn: bool,
        out: &mut Vec<OutboundMessage>,
    ) -> String {
        let pool: Vec<Candidate> = candidate_pool(cal, &self.params)
            .into_iter()
            .filter(|c| !self.state.tried.contains(&(c.slot, c.displace)))
            .collect();
        let scores: Vec<u8> = pool.iter().map(|c| c.score).collect();
        let ph = p_hat(cal.free_count(), cal.num_slots(), responders.len());
        let Some((l, utility)) = choose_offer_size(&scores, ph, &self.params) else {
            return self.fail(meeting, responders, out);
        };
        let first = self.state.sub_round == 0;
        // A later sub-round must beat giving up, which costs beta.
        let stop = !first && !self.params.exhaustive && utility + self.params.beta <= 0.0;
        if last_turn || stop {
            return self.fail(meeting, responders, out);
        }
        self.state.sub_round += 1;
        self.state.offer.clear();
        self.state.own_scores.clear();
        self.state.sent.clear();
        self.state.replies.clear();
        for c in pool.iter().take(l) {
            let plan = Plan {
                plan_id: self.state.next_plan_id,
                slot: c.slot,
                displace: c.displace,
            };
            self.state.next_plan_id += 1;
            self.state.tried.insert((c.slot, c.displace));
            self.state.offer.push(plan);
            self.state.own_scores.push(c.score);
        }
        for &r in responders {
            self.state
                .sent
                .insert(r, self.state.offer.iter().map(|p| p.plan_id).collect());
        }
        // Participants of a displaced meeting outside this one score its plans too.
        for plan in &self.state.offer {
            let Some(disp) = plan.displace else { continue };
            let Some(SlotState::Meeting(m)) = cal.slots.get(plan.slot) else {
                continue;
            };
            for &a in &m.participants {
                if a != cal.agent && !meeting.is_participant(a) {
                    self.state.sent.entry(a).or_default().push(plan.plan_id);
                }
            }
            debug_assert_eq!(m.id, disp.meeting);
        }
        for (&to, ids) in &self.state.sent {
            let plans: Vec<Plan> = self
                .state
                .offer
                .iter()
                .filter(|p| ids.contains(&p.plan_id))
                .copied()
                .collect();
            out.push(dm(
                to,
                msg(DsmMessage::Proposals {
                    meeting: meeting.id,
                    sub_round: self.state.sub_round,
                    plans,
                }),
            ));
        }
        format!(
            "sub-round {}: offering {l} plan(s), p_hat {ph:.4}, U {utility:.4}",
            self.state.sub_round
        )
    }

    /// Picks the best plan every scorer can take, if any.
    fn evaluate(&self) -> Option<usize> {
        let mut best: Option<(usize, u32)> = None;
        for (i, plan) in self.state.offer.iter().enumerate() {
            let own = self.state.own_scores[i];
            if own == 0 {
                continue;
            }
            let mut sum = u32::from(own);
            let mut feasible = true;
            for (agent, ids) in &self.state.sent {
                if !ids.contains(&plan.plan_id) {
                    continue;
                }
                let s = self.state.replies[agent]
                    .iter()
                    .find(|ps| ps.plan_id == plan.plan_id)
                    .map_or(0, |ps| ps.score);
                if s == 0 {
                    feasible = false;
                    break;
                }
                sum += u32::from(s);
            }
            if feasible && best.map_or(true, |(_, b)| sum > b) {
                best = Some((i, sum));
            }
        }
        best.map(|(i, _)| i)
    }

    fn decide_plan(
        &mut self,
        cal: &Calendar,
        meeting: &MeetingSpec,
        index: usize,
        out: &mut Vec<OutboundMessage>,
    ) -> String {
        let plan = self.state.offer[index];
        self.state.concluded = true;
        self.state.agreed = Some(plan);
        if let Some(disp) = plan.displace {
            if cal.find_meeting(disp.meeting) == Some(plan.slot) {
                self.state.moves.push(MeetingMove {
                    meeting: disp.meeting,
                    from: plan.slot,
                    to: disp.to,
                });
            }
        }
        let mut replies = Vec::new();
        for (&agent, ids) in &self.state.sent {
            let scores: Vec<u8> = ids
                .iter()
                .map(|id| {
                    self.state.replies[&agent]
                        .iter()
                        .find(|ps| ps.plan_id == *id)
                        .map_or(0, |ps| ps.score)
                })
                .collect();
            let selected = ids.iter().position(|id| *id == plan.plan_id);
            replies.push(ResponderScores {
                agent,
                scores,
                selected,
            });
            if meeting.is_participant(agent) || selected.is_some() {
                out.push(dm(
                    agent,
                    msg(DsmMessage::Decision {
                        meeting: meeting.id,
                        slot: Some(plan.slot),
                        plan_id: Some(plan.plan_id),
                    }),
                ));
            }
        }
        let settlement = settle(&replies, self.params.d);
        self.points += settlement.initiator_delta;
        serde_json::json!({
            "decision": plan,
            "sub_rounds": self.state.sub_round,
            "settlement": settlement,
            "initiator_points": self.points,
        })
        .to_string()
    }
}

impl Agent for DsmAgent {
    fn protocol(&self) -> &str {
        &self.name
    }

    fn turn(&mut self, req: &TurnRequest<'_>) -> Result<TurnResponse, AgentError> {
        self.sync(req.round);
        let cal = req.calendar;
        let me = cal.agent;
        let meeting = req.meeting;
        let last_turn = req.turn + 1 >= req.max_turns;
        let mut out = Vec::new();
        let mut thinking = String::new();

        for (from, message) in parse_inbox(req.inbox) {
            let TypedMessage::Dsm(message) = message else {
                continue;
            };
            match message {
                DsmMessage::Proposals {
                    meeting: id,
                    sub_round,
                    plans,
                } if id == meeting.id => {
                    let scores = plans
                        .iter()
                        .map(|p| PlanScore {
                            plan_id: p.plan_id,
                            score: plan_score(cal, p, meeting, &self.params),
                        })
                        .collect();
                    for p in plans {
                        self.state.received.insert(p.plan_id, p);
                    }
                    out.push(dm(
                        from,
                        msg(DsmMessage::Scores {
                            meeting: id,
                            sub_round,
                            scores,
                        }),
                    ));
                }
                DsmMessage::Scores {
                    meeting: id,
                    sub_round,
                    scores,
                } if id == meeting.id && sub_round == self.state.sub_round => {
                    self.state.replies.insert(from, scores);
                }
                DsmMessage::Decision {
                    meeting: id,
                    plan_id,
                    ..
                } if id == meeting.id => {
                    let plan = plan_id.and_then(|p| self.state.received.get(&p).copied());
                    self.state.agreed = plan;
                    if let Some(Plan {
                        slot,
                        displace: Some(disp),
                        ..
                    }) = plan
                    {
                        if cal.find_meeting(disp.meeting) == Some(slot) {
                            self.state.moves.push(MeetingMove {
                                meeting: disp.meeting,
                                from: slot,
                                to: disp.to,
                            });
                        }
                    }
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
                thinking = self.start_sub_round(cal, meeting, &responders, last_turn, &mut out);
            } else if self
                .state
                .sent
                .keys()
                .all(|a| self.state.replies.contains_key(a))
            {
                thinking = match self.evaluate() {
                    Some(i) => self.decide_plan(cal, meeting, i, &mut out),
                    None => self.start_sub_round(cal, meeting, &responders, last_turn, &mut out),
                };
            } else if last_turn {
                thinking = self.fail(meeting, &responders, &mut out);
            }
        }
        Ok(TurnResponse {
            thinking,
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
                    thinking: "apply agreed displacement".into(),
                    actions,
                },
                None => Decision::pass(),
            },
        )
    }

    fn decide(&mut self, req: &DecideRequest<'_>) -> Result<Decision, AgentError> {
        self.sync(req.round);
        let Some(plan) = self.state.agreed else {
            return Ok(Decision::pass());
        };
        Ok(
            match placement_batch(req.calendar, req.meeting.id, plan.slot, &self.state.moves) {
                Some(actions) => Decision {
                    thinking: format!("schedule {} at slot {}", req.meeting.id, plan.slot),
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
