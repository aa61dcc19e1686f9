//! Test-only helpers: hand-built calendars and a brute-force oracle that
//! shares no code with the library solver.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use calsched::domain::{
    AgentId, Calendar, Errand, ErrandId, MeetingId, MeetingSpec, ScheduledMeeting, Slot, SlotState,
};
use calsched::scenario::{Scenario, ScenarioParams, SeededRng};

pub fn free() -> SlotState {
    SlotState::Free
}

pub fn errand(id: u32, cost: u32) -> SlotState {
    SlotState::Errand(Errand {
        id: ErrandId(id),
        cost,
        blocked: false,
        label: None,
    })
}

pub fn blocked(id: u32, cost: u32) -> SlotState {
    SlotState::Errand(Errand {
        id: ErrandId(id),
        cost,
        blocked: true,
        label: None,
    })
}

pub fn prior(id: u32, participants: &[AgentId]) -> SlotState {
    SlotState::Meeting(ScheduledMeeting {
        id: MeetingId(id),
        cost: 1,
        participants: participants.iter().copied().collect(),
        label: None,
    })
}

pub fn cal(agent: AgentId, slots: Vec<SlotState>) -> Calendar {
    Calendar { agent, slots }
}

pub fn meeting(id: u32, participants: &[AgentId], round: usize) -> MeetingSpec {
    MeetingSpec {
        id: MeetingId(id),
        participants: participants.iter().copied().collect::<BTreeSet<_>>(),
        round,
        label: None,
    }
}

/// Scenario from explicit calendars with meetings in the given order.
pub fn scenario(calendars: Vec<Calendar>, meetings: Vec<MeetingSpec>) -> Scenario {
    let mut params = ScenarioParams::new(0, calendars.len(), meetings.len());
    params.num_slots = calendars[0].num_slots();
    params.participant_lists = Some(
        meetings
            .iter()
            .map(|m| m.participants.iter().copied().collect())
            .collect(),
    );
    Scenario::from_parts(params, calendars, meetings, BTreeMap::new())
        .expect("hand-built scenario is feasible")
}

/// Brute-force results over all injective assignments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Brute {
    /// Lexicographically smallest slot vector among minimum-cost assignments.
    pub min: Option<(u64, Vec<Slot>)>,
    pub max: Option<u64>,
    pub count: u64,
}

/// Kuhn's augmenting-path matching of displaced errands onto free slots.
fn can_rehome(errands: usize, targets: &[Slot]) -> bool {
    // Every displaced errand may land on any target, so build the full
    // bipartite graph and match it explicitly.
    let mut owner: Vec<Option<usize>> = vec![None; targets.len()];
    fn augment(e: usize, seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for t in 0..owner.len() {
            if seen[t] {
                continue;
            }
            seen[t] = true;
            if owner[t].map_or(true, |o| augment(o, seen, owner)) {
                owner[t] = Some(e);
                return true;
            }
        }
        false
    }
    (0..errands).all(|e| {
        let mut seen = vec![false; targets.len()];
        augment(e, &mut seen, &mut owner)
    })
}

/// Cost of one assignment, or `None` if infeasible.
pub fn brute_cost(calendars: &[Calendar], meetings: &[MeetingSpec], slots: &[Slot]) -> Option<u64> {
    let used: BTreeSet<Slot> = slots.iter().copied().collect();
    if used.len() != slots.len() {
        return None;
    }
    let mut total = 0;
    for (a, c) in calendars.iter().enumerate() {
        let mut displaced = 0;
        for (m, &s) in meetings.iter().zip(slots) {
            if !m.participants.contains(&a) {
                continue;
            }
            match &c.slots[s] {
                SlotState::Free => {}
                SlotState::Errand(e) if !e.blocked => {
                    displaced += 1;
                    total += u64::from(e.cost);
                }
                _ => return None,
            }
        }
        let mine: BTreeSet<Slot> = meetings
            .iter()
            .zip(slots)
            .filter(|(m, _)| m.participants.contains(&a))
            .map(|(_, &s)| s)
            .collect();
        let targets: Vec<Slot> = (0..c.num_slots())
            .filter(|s| c.slots[*s] == SlotState::Free && !mine.contains(s))
            .collect();
        if !can_rehome(displaced, &targets) {
            return None;
        }
    }
    Some(total)
}

pub fn brute_force(calendars: &[Calendar], meetings: &[MeetingSpec]) -> Brute {
    let s = calendars[0].num_slots();
    let m = meetings.len();
    let mut out = Brute {
        min: None,
        max: None,
        count: 0,
    };
    let mut slots = vec![0; m];
    fn rec(i: usize, s: usize, slots: &mut Vec<Slot>, f: &mut dyn FnMut(&[Slot])) {
        if i == slots.len() {
            f(slots);
            return;
        }
        for k in 0..s {
            if slots[..i].contains(&k) {
                continue;
            }
            slots[i] = k;
            rec(i + 1, s, slots, f);
        }
    }
    rec(0, s, &mut slots, &mut |v| {
        if let Some(c) = brute_cost(calendars, meetings, v) {
            out.count += 1;
            // Enumeration is already lexicographic, so strict < keeps the first.
            if out.min.as_ref().map_or(true, |(b, _)| c < *b) {
                out.min = Some((c, v.to_vec()));
            }
            out.max = Some(out.max.map_or(c, |b: u64| b.max(c)));
        }
    });
    out
}

/// Random small instance: S ≤ 8, M ≤ 3, N ≤ 3, mixed free/errand/blocked slots.
pub fn random_instance(seed: u64) -> (Vec<Calendar>, Vec<MeetingSpec>) {
    let mut rng = SeededRng::new(seed, 99);
    let n = 2 + rng.below(2);
    let s = 3 + rng.below(6);
    let m = 1 + rng.below(3.min(s));
    let mut id = 0;
    let calendars = (0..n)
        .map(|a| {
            let slots = (0..s)
                .map(|_| {
                    id += 1;
                    match rng.below(10) {
                        0..=4 => free(),
                        5..=8 => errand(id, 1 + rng.below(3) as u32),
                        _ => blocked(id, 1),
                    }
                })
                .collect();
            cal(a, slots)
        })
        .collect();
    let meetings = (0..m)
        .map(|k| {
            let mut ps: Vec<AgentId> = (0..n).collect();
            rng.shuffle(&mut ps);
            let size = 2 + rng.below(n - 1);
            ps.truncate(size);
            meeting(k as u32, &ps, k)
        })
        .collect();
    (calendars, meetings)
}
