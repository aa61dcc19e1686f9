//! Seeded generation of solvable scheduling tasks.
//!
//! Generation works backwards from a hidden witness: every meeting first gets
//! a distinct slot, calendars are filled with errands around it, and one free
//! absorbing slot per witness-slot errand is reserved on that agent's
//! calendar so the witness stays feasible.
//!
//! # Random stream
//!
//! All draws come from [`SeededRng`] stream 0 in this order, repeated per
//! attempt until one succeeds (at most [`RESAMPLE_ATTEMPTS`]):
//!
//! 1. witness slot for each meeting, in meeting order, uniform over unused slots;
//! 2. for each agent in id order:
//!    errand slots, carve-outs, absorbing slots, errand costs, blocked flags.
//!
//! Labels use stream 1 (see [`assign_labels`]), so relabelling never shifts
//! the calendars.

mod difficulty;
mod labels;
mod rng;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AgentId, Calendar, Errand, ErrandId, MeetingId, MeetingSpec, Slot, SlotState};
use crate::oracle::{GreedyOutcome, JointAssignment, OracleError, Problem};

pub use difficulty::{compute_difficulty, Difficulty, DifficultyBucket, DifficultyBuckets};
pub use labels::{assign_labels, ErrandLabel, LabelAssignments, LabelBank, MeetingLabel, Tier};
pub use rng::SeededRng;

pub const RESAMPLE_ATTEMPTS: usize = 1000;
pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario parameters: {0}")]
    InvalidParams(String),
    #[error("could not generate a feasible scenario after {attempts} attempts")]
    GenerationInfeasible { attempts: usize },
    #[error("label bank has no labels for tier {0}")]
    MissingTier(Tier),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    #[default]
    Uniform,
    Varied,
}

/// One shared density or one entry per agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Density {
    Shared(f64),
    PerAgent(Vec<f64>),
}

impl Default for Density {
    fn default() -> Self {
        Density::Shared(0.0)
    }
}

impl Density {
    pub fn for_agent(&self, agent: AgentId) -> f64 {
        match self {
            Density::Shared(d) => *d,
            Density::PerAgent(v) => v[agent],
        }
    }
}

fn default_num_slots() -> usize {
    16
}

fn default_level() -> u32 {
    3
}

fn default_meeting_cost_level() -> u32 {
    1
}

fn default_participants_per_meeting() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioParams {
    pub seed: u64,
    pub num_agents: usize,
    #[serde(default = "default_num_slots")]
    pub num_slots: usize,
    #[serde(default)]
    pub density: Density,
    pub num_meetings: usize,
    #[serde(default = "default_level")]
    pub pref_level: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub errand_cost_level: Option<u32>,
    #[serde(default = "default_meeting_cost_level")]
    pub meeting_cost_level: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub participant_lists: Option<Vec<Vec<AgentId>>>,
    /// Size of each default participant set when no lists are given.
    #[serde(default = "default_participants_per_meeting")]
    pub participants_per_meeting: usize,
    #[serde(default)]
    pub blocked_errand_count: usize,
    #[serde(default)]
    pub force_witness_errand: bool,
    #[serde(default)]
    pub cost_mode: CostMode,
}

impl ScenarioParams {
    pub fn new(seed: u64, num_agents: usize, num_meetings: usize) -> Self {
        Self {
            seed,
            num_agents,
            num_slots: default_num_slots(),
            density: Density::default(),
            num_meetings,
            pref_level: default_level(),
            errand_cost_level: None,
            meeting_cost_level: default_meeting_cost_level(),
            participant_lists: None,
            participants_per_meeting: default_participants_per_meeting(),
            blocked_errand_count: 0,
            force_witness_errand: false,
            cost_mode: CostMode::Uniform,
        }
    }

    pub fn errand_cost_ceiling(&self) -> u32 {
        self.errand_cost_level.unwrap_or(self.pref_level)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |msg: String| Err(ScenarioError::InvalidParams(msg));
        if self.num_agents < 2 {
            return bad(format!(
                "num_agents must be at least 2, got {}",
                self.num_agents
            ));
        }
        if self.num_meetings > self.num_slots {
            return bad(format!(
                "num_meetings ({}) exceeds num_slots ({})",
                self.num_meetings, self.num_slots
            ));
        }
        match &self.density {
            Density::Shared(d) => {
                if !(0.0..=1.0).contains(d) {
                    return bad(format!("density {d} outside [0, 1]"));
                }
            }
            Density::PerAgent(v) => {
                if v.len() != self.num_agents {
                    return bad(format!(
                        "density vector has {} entries for {} agents",
                        v.len(),
                        self.num_agents
                    ));
                }
                if let Some(d) = v.iter().find(|d| !(0.0..=1.0).contains(*d)) {
                    return bad(format!("density {d} outside [0, 1]"));
                }
            }
        }
        if self.cost_mode == CostMode::Varied && self.errand_cost_ceiling() == 0 {
            return bad("errand cost level must be at least 1".into());
        }
        match &self.participant_lists {
            Some(lists) => {
                if lists.len() != self.num_meetings {
                    return bad(format!(
                        "{} participant lists for {} meetings",
                        lists.len(),
                        self.num_meetings
                    ));
                }
                for (k, list) in lists.iter().enumerate() {
                    let set: BTreeSet<_> = list.iter().collect();
                    if set.len() != list.len() {
                        return bad(format!("participant list {k} has duplicates"));
                    }
                    if list.len() < 2 || list.len() > self.num_agents {
                        return bad(format!(
                            "participant list {k} has {} members, expected 2..={}",
                            list.len(),
                            self.num_agents
                        ));
                    }
                    if let Some(a) = list.iter().find(|a| **a >= self.num_agents) {
                        return bad(format!("participant list {k} names unknown agent {a}"));
                    }
                }
            }
            None => {
                if self.participants_per_meeting < 2
                    || self.participants_per_meeting > self.num_agents
                {
                    return bad(format!(
                        "participants_per_meeting {} outside 2..={}",
                        self.participants_per_meeting, self.num_agents
                    ));
                }
            }
        }
        Ok(())
    }

    /// Participant sets per meeting.
    ///
    /// Without explicit lists, meeting `k` gets the window
    /// `{(k + j) mod N : j < participants_per_meeting}`.
    pub fn participant_sets(&self) -> Vec<BTreeSet<AgentId>> {
        match &self.participant_lists {
            Some(lists) => lists.iter().map(|l| l.iter().copied().collect()).collect(),
            None => (0..self.num_meetings)
                .map(|k| {
                    (0..self.participants_per_meeting)
                        .map(|j| (k + j) % self.num_agents)
                        .collect()
                })
                .collect(),
        }
    }

    fn errand_target(&self, agent: AgentId) -> usize {
        (self.num_slots as f64 * self.density.for_agent(agent) + 1e-9).floor() as usize
    }
}

/// Oracle statistics stored with every scenario.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleStats {
    pub optimal: JointAssignment,
    pub worst_complete: JointAssignment,
    pub greedy: GreedyOutcome,
    pub feasible_assignments: u64,
    pub total_assignments: u64,
}

impl OracleStats {
    pub fn compute(problem: &Problem) -> Result<Self, OracleError> {
        Ok(Self {
            optimal: problem.min_cost_schedule()?,
            worst_complete: problem.worst_cost_schedule()?,
            greedy: problem.greedy(),
            feasible_assignments: problem.count_feasible_assignments(),
            total_assignments: problem.total_assignments(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub schema_version: u32,
    pub params: ScenarioParams,
    pub calendars: Vec<Calendar>,
    pub meetings: Vec<MeetingSpec>,
    pub witness: BTreeMap<MeetingId, Slot>,
    /// Per agent, the free slots reserved as landing pads.
    pub absorbing_slots: Vec<Vec<Slot>>,
    /// Per agent, errands dropped so absorbing slots fit.
    pub carve_outs: Vec<usize>,
    pub oracle: OracleStats,
    pub difficulty: Difficulty,
    #[serde(default)]
    pub label_assignments: LabelAssignments,
}

impl Scenario {
    /// Builds a scenario from hand-made calendars, computing oracle statistics.
    pub fn from_parts(
        params: ScenarioParams,
        calendars: Vec<Calendar>,
        meetings: Vec<MeetingSpec>,
        witness: BTreeMap<MeetingId, Slot>,
    ) -> Result<Self, ScenarioError> {
        let problem = Problem::new(&calendars, &meetings);
        let oracle = OracleStats::compute(&problem)?;
        let difficulty = Difficulty::new(oracle.feasible_assignments, oracle.total_assignments);
        Ok(Self {
            schema_version: SCENARIO_SCHEMA_VERSION,
            absorbing_slots: vec![Vec::new(); calendars.len()],
            carve_outs: vec![0; calendars.len()],
            params,
            calendars,
            meetings,
            witness,
            oracle,
            difficulty,
            label_assignments: LabelAssignments::default(),
        })
    }

    pub fn num_agents(&self) -> usize {
        self.calendars.len()
    }

    pub fn num_slots(&self) -> usize {
        self.params.num_slots
    }

    pub fn problem(&self) -> Problem {
        Problem::new(&self.calendars, &self.meetings)
    }

    pub fn optimal_cost(&self) -> u64 {
        self.oracle.optimal.total_cost
    }

    pub fn greedy_cost(&self) -> Option<u64> {
        self.oracle.greedy.cost()
    }

    pub fn worst_complete_cost(&self) -> u64 {
        self.oracle.worst_complete.total_cost
    }

    pub fn difficulty_d(&self) -> f64 {
        self.difficulty.value()
    }

    pub fn meeting(&self, id: MeetingId) -> Option<&MeetingSpec> {
        self.meetings.iter().find(|m| m.id == id)
    }

    /// Meetings per agent, counted over the whole stream.
    pub fn meetings_per_agent(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_agents()];
        for m in &self.meetings {
            for &p in &m.participants {
                counts[p] += 1;
            }
        }
        counts
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

struct AgentLayout {
    errands: Vec<(Slot, u32, bool)>,
    absorbers: Vec<Slot>,
    carved: usize,
}

fn sorted_complement(all: usize, exclude: &BTreeSet<Slot>) -> Vec<Slot> {
    (0..all).filter(|s| !exclude.contains(s)).collect()
}

fn layout_agent(
    rng: &mut SeededRng,
    params: &ScenarioParams,
    agent: AgentId,
    witness_slots: &BTreeSet<Slot>,
) -> Option<AgentLayout> {
    let s = params.num_slots;
    let target = params.errand_target(agent);

    let mut errand_slots: BTreeSet<Slot> = BTreeSet::new();
    if params.force_witness_errand {
        let mut w: Vec<Slot> = witness_slots.iter().copied().collect();
        rng.shuffle(&mut w);
        errand_slots.extend(w.into_iter().take(target));
        let mut rest = sorted_complement(s, witness_slots);
        rng.shuffle(&mut rest);
        let remaining = target - errand_slots.len();
        errand_slots.extend(rest.into_iter().take(remaining));
    } else {
        let mut all: Vec<Slot> = (0..s).collect();
        rng.shuffle(&mut all);
        errand_slots.extend(all.into_iter().take(target));
    }

    let needed = errand_slots.intersection(witness_slots).count();
    let mut free_non_witness: Vec<Slot> = (0..s)
        .filter(|x| !witness_slots.contains(x) && !errand_slots.contains(x))
        .collect();
    let mut carved = 0;
    if free_non_witness.len() < needed {
        let short = needed - free_non_witness.len();
        let mut removable: Vec<Slot> = errand_slots
            .iter()
            .copied()
            .filter(|x| !witness_slots.contains(x))
            .collect();
        if removable.len() < short {
            return None;
        }
        rng.shuffle(&mut removable);
        for slot in removable.into_iter().take(short) {
            errand_slots.remove(&slot);
            carved += 1;
        }
        free_non_witness = (0..s)
            .filter(|x| !witness_slots.contains(x) && !errand_slots.contains(x))
            .collect();
    }
    rng.shuffle(&mut free_non_witness);
    let mut absorbers: Vec<Slot> = free_non_witness.into_iter().take(needed).collect();
    absorbers.sort_unstable();

    let slots: Vec<Slot> = errand_slots.iter().copied().collect();
    let costs: Vec<u32> = match params.cost_mode {
        CostMode::Uniform => vec![1; slots.len()],
        CostMode::Varied => {
            let level = params.errand_cost_ceiling();
            let mut c: Vec<u32> = (0..slots.len()).map(|i| (i as u32 % level) + 1).collect();
            rng.shuffle(&mut c);
            c
        }
    };

    let mut blockable: Vec<Slot> = slots
        .iter()
        .copied()
        .filter(|x| !witness_slots.contains(x))
        .collect();
    rng.shuffle(&mut blockable);
    let blocked: BTreeSet<Slot> = blockable
        .into_iter()
        .take(params.blocked_errand_count)
        .collect();

    Some(AgentLayout {
        errands: slots
            .iter()
            .zip(costs)
            .map(|(&slot, cost)| (slot, cost, blocked.contains(&slot)))
            .collect(),
        absorbers,
        carved,
    })
}

/// Generates a scenario whose witness assignment is feasible by construction.
pub fn generate_scenario(params: &ScenarioParams) -> Result<Scenario, ScenarioError> {
    params.validate()?;
    let n = params.num_agents;
    let s = params.num_slots;
    let participant_sets = params.participant_sets();
    let meetings: Vec<MeetingSpec> = participant_sets
        .into_iter()
        .enumerate()
        .map(|(k, participants)| MeetingSpec {
            id: MeetingId(k as u32),
            participants,
            round: k,
            label: None,
        })
        .collect();

    let mut rng = SeededRng::new(params.seed, 0);
    'attempt: for _ in 0..RESAMPLE_ATTEMPTS {
        let mut used = BTreeSet::new();
        let mut witness = BTreeMap::new();
        for m in &meetings {
            let open = sorted_complement(s, &used);
            let slot = open[rng.below(open.len())];
            used.insert(slot);
            witness.insert(m.id, slot);
        }

        let mut layouts = Vec::with_capacity(n);
        for agent in 0..n {
            let witness_slots: BTreeSet<Slot> = meetings
                .iter()
                .filter(|m| m.is_participant(agent))
                .map(|m| witness[&m.id])
                .collect();
            match layout_agent(&mut rng, params, agent, &witness_slots) {
                Some(layout) => layouts.push(layout),
                None => continue 'attempt,
            }
        }

        let mut calendars = Vec::with_capacity(n);
        let mut next_id = 0u32;
        for (agent, layout) in layouts.iter().enumerate() {
            let mut cal = Calendar::new(agent, s);
            for &(slot, cost, blocked) in &layout.errands {
                cal.slots[slot] = SlotState::Errand(Errand {
                    id: ErrandId(next_id),
                    cost,
                    blocked,
                    label: None,
                });
                next_id += 1;
            }
            calendars.push(cal);
        }

        let problem = Problem::new(&calendars, &meetings);
        if problem.evaluate(&witness).is_err() {
            continue;
        }
        let oracle = OracleStats::compute(&problem)?;
        let difficulty = Difficulty::new(oracle.feasible_assignments, oracle.total_assignments);
        return Ok(Scenario {
            schema_version: SCENARIO_SCHEMA_VERSION,
            params: params.clone(),
            calendars,
            meetings,
            witness,
            absorbing_slots: layouts.iter().map(|l| l.absorbers.clone()).collect(),
            carve_outs: layouts.iter().map(|l| l.carved).collect(),
            oracle,
            difficulty,
            label_assignments: LabelAssignments::default(),
        });
    }
    Err(ScenarioError::GenerationInfeasible {
        attempts: RESAMPLE_ATTEMPTS,
    })
}
