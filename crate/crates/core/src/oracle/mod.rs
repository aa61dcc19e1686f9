//! Exact full-information solvers over a scenario's initial calendars.
//!
//! The model: each meeting takes one slot, no two meetings share a slot, and
//! every participant must be able to clear that slot. A slot is clearable by
//! an agent if it is free, or holds a movable errand that can hop to a slot
//! the agent leaves free. Blocked errands and prior meetings are fixed.
//!
//! Because a displaced errand may land on *any* slot its owner keeps free,
//! the per-agent re-placement matching is complete bipartite, and Hall's
//! condition reduces to a count: the agent needs at least as many leftover
//! free slots as displaced errands. The solvers track that count
//! incrementally; the test suite checks it against an explicit matching.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AgentId, Calendar, MeetingId, MeetingSpec, Slot, SlotState};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OracleError {
    #[error("no feasible assignment exists for the requested meetings")]
    Infeasible,
    #[error("unknown meeting {0}")]
    UnknownMeeting(MeetingId),
}

/// What one agent's slot contributes to the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cell {
    Free,
    Movable(u32),
    Fixed,
}

impl Cell {
    fn from_state(state: &SlotState) -> Self {
        match state {
            SlotState::Free => Cell::Free,
            SlotState::Errand(e) if !e.blocked => Cell::Movable(e.cost),
            _ => Cell::Fixed,
        }
    }
}

#[derive(Clone, Debug)]
struct MeetingNode {
    id: MeetingId,
    participants: Vec<AgentId>,
}

/// Solver input built from calendars and a meeting list.
#[derive(Clone, Debug)]
pub struct Problem {
    num_slots: usize,
    meetings: Vec<MeetingNode>,
    cells: Vec<Vec<Cell>>,
    free_total: Vec<usize>,
}

/// A meeting→slot map with its cost split per agent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointAssignment {
    pub slots: BTreeMap<MeetingId, Slot>,
    pub per_agent_cost: Vec<u64>,
    pub total_cost: u64,
}

/// Outcome of the greedy baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum GreedyOutcome {
    Complete {
        cost: u64,
    },
    Stuck {
        meeting: MeetingId,
        cost_so_far: u64,
    },
}

impl GreedyOutcome {
    pub fn cost(&self) -> Option<u64> {
        match self {
            GreedyOutcome::Complete { cost } => Some(*cost),
            GreedyOutcome::Stuck { .. } => None,
        }
    }
}

/// Per-agent bookkeeping used while searching.
#[derive(Clone, Debug)]
struct Usage {
    errands: Vec<usize>,
    free: Vec<usize>,
    slot_used: Vec<bool>,
}

impl Problem {
    pub fn new(calendars: &[Calendar], meetings: &[MeetingSpec]) -> Self {
        let num_slots = calendars.first().map_or(0, Calendar::num_slots);
        let cells: Vec<Vec<Cell>> = calendars
            .iter()
            .map(|c| c.slots.iter().map(Cell::from_state).collect())
            .collect();
        let free_total = cells
            .iter()
            .map(|row| row.iter().filter(|c| **c == Cell::Free).count())
            .collect();
        Self {
            num_slots,
            meetings: meetings
                .iter()
                .map(|m| MeetingNode {
                    id: m.id,
                    participants: m.participants.iter().copied().collect(),
                })
                .collect(),
            cells,
            free_total,
        }
    }

    pub fn num_slots(&self) -> usize {
        self.num_slots
    }

    pub fn num_meetings(&self) -> usize {
        self.meetings.len()
    }

    pub fn num_agents(&self) -> usize {
        self.cells.len()
    }

    pub fn cell(&self, agent: AgentId, slot: Slot) -> Cell {
        self.cells[agent][slot]
    }

    fn index_of(&self, id: MeetingId) -> Result<usize, OracleError> {
        self.meetings
            .iter()
            .position(|m| m.id == id)
            .ok_or(OracleError::UnknownMeeting(id))
    }

    fn all_indices(&self) -> Vec<usize> {
        (0..self.meetings.len()).collect()
    }

    fn subset_indices(&self, subset: &[MeetingId]) -> Result<Vec<usize>, OracleError> {
        let mut idx = subset
            .iter()
            .map(|&id| self.index_of(id))
            .collect::<Result<Vec<_>, _>>()?;
        idx.sort_unstable();
        idx.dedup();
        Ok(idx)
    }

    /// Cost of placing meeting `k` at `slot` ignoring other meetings, or
    /// `None` if some participant holds a fixed item there.
    fn standalone_cost(&self, k: usize, slot: Slot) -> Option<u64> {
        let mut total = 0u64;
        for &a in &self.meetings[k].participants {
            match self.cells[a][slot] {
                Cell::Free => {}
                Cell::Movable(c) => total += u64::from(c),
                Cell::Fixed => return None,
            }
        }
        Some(total)
    }

    fn new_usage(&self) -> Usage {
        Usage {
            errands: vec![0; self.cells.len()],
            free: vec![0; self.cells.len()],
            slot_used: vec![false; self.num_slots],
        }
    }

    /// Places meeting `k` at `slot` if that keeps every participant's
    /// displaced errands re-placeable. Returns the incurred cost.
    fn try_place(&self, usage: &mut Usage, k: usize, slot: Slot) -> Option<u64> {
        if usage.slot_used[slot] {
            return None;
        }
        let cost = self.standalone_cost(k, slot)?;
        let parts = &self.meetings[k].participants;
        for &a in parts {
            let (e, f) = match self.cells[a][slot] {
                Cell::Movable(_) => (usage.errands[a] + 1, usage.free[a]),
                _ => (usage.errands[a], usage.free[a] + 1),
            };
            if e > self.free_total[a] - f {
                return None;
            }
        }
        for &a in parts {
            match self.cells[a][slot] {
                Cell::Movable(_) => usage.errands[a] += 1,
                _ => usage.free[a] += 1,
            }
        }
        usage.slot_used[slot] = true;
        Some(cost)
    }

    fn unplace(&self, usage: &mut Usage, k: usize, slot: Slot) {
        for &a in &self.meetings[k].participants {
            match self.cells[a][slot] {
                Cell::Movable(_) => usage.errands[a] -= 1,
                _ => usage.free[a] -= 1,
            }
        }
        usage.slot_used[slot] = false;
    }

    fn build_assignment(&self, order: &[usize], slots: &[Slot]) -> JointAssignment {
        let mut per_agent = vec![0u64; self.cells.len()];
        let mut map = BTreeMap::new();
        for (&k, &s) in order.iter().zip(slots) {
            map.insert(self.meetings[k].id, s);
            for &a in &self.meetings[k].participants {
                if let Cell::Movable(c) = self.cells[a][s] {
                    per_agent[a] += u64::from(c);
                }
            }
        }
        let total_cost = per_agent.iter().sum();
        JointAssignment {
            slots: map,
            per_agent_cost: per_agent,
            total_cost,
        }
    }

    /// Checks a given assignment and prices it.
    pub fn evaluate(
        &self,
        assignment: &BTreeMap<MeetingId, Slot>,
    ) -> Result<JointAssignment, OracleError> {
        let mut usage = self.new_usage();
        let mut order = Vec::new();
        let mut slots = Vec::new();
        for (&id, &slot) in assignment {
            let k = self.index_of(id)?;
            if slot >= self.num_slots || self.try_place(&mut usage, k, slot).is_none() {
                return Err(OracleError::Infeasible);
            }
            order.push(k);
            slots.push(slot);
        }
        Ok(self.build_assignment(&order, &slots))
    }

    fn optimize(&self, order: &[usize], maximize: bool) -> Result<JointAssignment, OracleError> {
        // Per-meeting optimistic bound, summed over the unassigned suffix.
        let bound: Vec<u64> = order
            .iter()
            .map(|&k| {
                let costs = (0..self.num_slots).filter_map(|s| self.standalone_cost(k, s));
                if maximize {
                    costs.max().unwrap_or(0)
                } else {
                    costs.min().unwrap_or(0)
                }
            })
            .collect();
        let mut suffix = vec![0u64; order.len() + 1];
        for i in (0..order.len()).rev() {
            suffix[i] = suffix[i + 1] + bound[i];
        }

        let mut search = BranchAndBound {
            problem: self,
            order,
            suffix: &suffix,
            maximize,
            usage: self.new_usage(),
            current: Vec::with_capacity(order.len()),
            best: None,
        };
        search.descend(0, 0);
        let (_, slots) = search.best.ok_or(OracleError::Infeasible)?;
        Ok(self.build_assignment(order, &slots))
    }

    /// Minimum-cost complete schedule over all meetings.
    pub fn min_cost_schedule(&self) -> Result<JointAssignment, OracleError> {
        self.optimize(&self.all_indices(), false)
    }

    /// Minimum-cost schedule restricted to `subset`; ties go to the
    /// lexicographically smallest slot vector in meeting order.
    pub fn min_cost_schedule_subset(
        &self,
        subset: &[MeetingId],
    ) -> Result<JointAssignment, OracleError> {
        let idx = self.subset_indices(subset)?;
        self.optimize(&idx, false)
    }

    /// Complete feasible schedule with the largest total displacement cost.
    pub fn worst_cost_schedule(&self) -> Result<JointAssignment, OracleError> {
        self.optimize(&self.all_indices(), true)
    }

    /// Number of injective meeting→slot assignments that are feasible.
    pub fn count_feasible_assignments(&self) -> u64 {
        fn walk(p: &Problem, usage: &mut Usage, k: usize) -> u64 {
            if k == p.meetings.len() {
                return 1;
            }
            let mut n = 0;
            for s in 0..p.num_slots {
                if p.try_place(usage, k, s).is_some() {
                    n += walk(p, usage, k + 1);
                    p.unplace(usage, k, s);
                }
            }
            n
        }
        let mut usage = self.new_usage();
        walk(self, &mut usage, 0)
    }

    /// `S! / (S−M)!`, the number of injective assignments.
    pub fn total_assignments(&self) -> u64 {
        falling_factorial(self.num_slots as u64, self.meetings.len() as u64)
    }

    /// Meetings in stream order, each taking its cheapest feasible slot given
    /// earlier picks (ties to the lower slot).
    pub fn greedy(&self) -> GreedyOutcome {
        let mut usage = self.new_usage();
        let mut total = 0;
        for k in 0..self.meetings.len() {
            let pick = (0..self.num_slots)
                .filter(|&s| !usage.slot_used[s])
                .filter_map(|s| {
                    let mut probe = usage.clone();
                    self.try_place(&mut probe, k, s).map(|c| (c, s))
                })
                .min();
            match pick {
                Some((cost, slot)) => {
                    self.try_place(&mut usage, k, slot);
                    total += cost;
                }
                None => {
                    return GreedyOutcome::Stuck {
                        meeting: self.meetings[k].id,
                        cost_so_far: total,
                    }
                }
            }
        }
        GreedyOutcome::Complete { cost: total }
    }
}

struct BranchAndBound<'a> {
    problem: &'a Problem,
    order: &'a [usize],
    suffix: &'a [u64],
    maximize: bool,
    usage: Usage,
    current: Vec<Slot>,
    best: Option<(u64, Vec<Slot>)>,
}

impl BranchAndBound<'_> {
    fn descend(&mut self, depth: usize, cost: u64) {
        if let Some((best, _)) = &self.best {
            let bound = cost + self.suffix[depth];
            // Slots are tried in ascending order, so the first optimum found is
            // the lexicographically smallest; equal-cost branches are pruned.
            let hopeless = if self.maximize {
                bound <= *best
            } else {
                bound >= *best
            };
            if hopeless {
                return;
            }
        }
        if depth == self.order.len() {
            self.best = Some((cost, self.current.clone()));
            return;
        }
        let k = self.order[depth];
        for s in 0..self.problem.num_slots {
            if let Some(c) = self.problem.try_place(&mut self.usage, k, s) {
                self.current.push(s);
                self.descend(depth + 1, cost + c);
                self.current.pop();
                self.problem.unplace(&mut self.usage, k, s);
            }
        }
    }
}

/// `n · (n−1) · … · (n−k+1)`; zero when `k > n`.
pub fn falling_factorial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    (n - k + 1..=n).product()
}
