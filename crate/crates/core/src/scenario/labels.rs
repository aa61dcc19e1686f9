use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Scenario, ScenarioError, SeededRng};
use crate::domain::{AgentId, ErrandId, MeetingId, Slot, SlotState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Public,
    Sensitive,
    VerySensitive,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Public, Tier::Sensitive, Tier::VerySensitive];
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Public => "public",
            Tier::Sensitive => "sensitive",
            Tier::VerySensitive => "very_sensitive",
        })
    }
}

/// Static label bank, one list per tier.
///
/// ```
/// use calsched::scenario::LabelBank;
/// let bank: LabelBank = serde_json::from_str(
///     r#"{"public": ["Gym"], "sensitive": ["Therapy"], "very_sensitive": ["Court date"]}"#,
/// ).unwrap();
/// assert_eq!(bank.tiers.len(), 3);
/// ```
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelBank {
    pub tiers: BTreeMap<Tier, Vec<String>>,
}

impl LabelBank {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrandLabel {
    pub agent: AgentId,
    pub slot: Slot,
    pub errand: ErrandId,
    pub tier: Tier,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeetingLabel {
    pub meeting: MeetingId,
    pub tier: Tier,
    pub label: String,
}

/// Where each label went, with its tier. Tiers never reach agents.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelAssignments {
    pub errands: Vec<ErrandLabel>,
    pub meetings: Vec<MeetingLabel>,
}

impl LabelAssignments {
    pub fn is_empty(&self) -> bool {
        self.errands.is_empty() && self.meetings.is_empty()
    }

    pub fn by_slot(&self) -> BTreeMap<(AgentId, Slot), &str> {
        self.errands
            .iter()
            .map(|e| ((e.agent, e.slot), e.label.as_str()))
            .collect()
    }
}

struct Picker<'a> {
    bank: &'a LabelBank,
    rng: SeededRng,
    offsets: BTreeMap<Tier, usize>,
    counters: BTreeMap<Tier, usize>,
}

impl Picker<'_> {
    fn pick(&mut self) -> (Tier, String) {
        let tier = Tier::ALL[self.rng.below(Tier::ALL.len())];
        let list = &self.bank.tiers[&tier];
        let count = self.counters.entry(tier).or_insert(0);
        let idx = (self.offsets[&tier] + *count) % list.len();
        *count += 1;
        (tier, list[idx].clone())
    }
}

/// Attaches one label to every errand, prior meeting and incoming meeting.
///
/// Uses stream 1 of the scenario seed. Per item a tier is drawn uniformly;
/// within a tier labels are taken in bank order from a random starting offset,
/// wrapping around, so small banks repeat deterministically. Items are visited
/// errands first by `(agent, slot)`, then prior meetings by id, then the
/// incoming stream in order.
pub fn assign_labels(scenario: &Scenario, bank: &LabelBank) -> Result<Scenario, ScenarioError> {
    for tier in Tier::ALL {
        if bank.tiers.get(&tier).map_or(true, |l| l.is_empty()) {
            return Err(ScenarioError::MissingTier(tier));
        }
    }
    let mut rng = SeededRng::new(scenario.params.seed, 1);
    let offsets = Tier::ALL
        .iter()
        .map(|t| (*t, rng.below(bank.tiers[t].len())))
        .collect();
    let mut picker = Picker {
        bank,
        rng,
        offsets,
        counters: BTreeMap::new(),
    };

    let mut out = scenario.clone();
    let mut assignments = LabelAssignments::default();
    for cal in &mut out.calendars {
        for (slot, state) in cal.slots.iter_mut().enumerate() {
            if let SlotState::Errand(e) = state {
                let (tier, label) = picker.pick();
                e.label = Some(label.clone());
                assignments.errands.push(ErrandLabel {
                    agent: cal.agent,
                    slot,
                    errand: e.id,
                    tier,
                    label,
                });
            }
        }
    }

    let mut prior: BTreeMap<MeetingId, (Tier, String)> = BTreeMap::new();
    for cal in &out.calendars {
        for (_, m) in cal.meetings() {
            prior.entry(m.id).or_insert((Tier::Public, String::new()));
        }
    }
    for value in prior.values_mut() {
        *value = picker.pick();
    }
    for cal in &mut out.calendars {
        for state in &mut cal.slots {
            if let SlotState::Meeting(m) = state {
                m.label = Some(prior[&m.id].1.clone());
            }
        }
    }
    for (id, (tier, label)) in &prior {
        assignments.meetings.push(MeetingLabel {
            meeting: *id,
            tier: *tier,
            label: label.clone(),
        });
    }

    for m in &mut out.meetings {
        let (tier, label) = picker.pick();
        m.label = Some(label.clone());
        assignments.meetings.push(MeetingLabel {
            meeting: m.id,
            tier,
            label,
        });
    }

    out.label_assignments = assignments;
    Ok(out)
}
