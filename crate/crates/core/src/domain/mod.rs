//! Calendar data model shared by every other module.
//!
//! A [`Calendar`] is one agent's private, fixed-length list of [`SlotState`]s.
//! The only way game state changes is through an [`ActionBatch`], which is
//! validated as a whole by [`validate_batch`] and applied by [`apply_batch`].

mod render;
mod validate;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use render::{display_cost, render_calendar, render_calendar_with, CostScale, RenderOptions};
pub use validate::{apply_batch, validate_batch, Applied, Conflict, Rule};

/// Agents are numbered `0..N`.
pub type AgentId = usize;

/// Slot index in `0..S`.
pub type Slot = usize;

/// Identifier of a meeting in the incoming stream. Rendered as `M<n>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MeetingId(pub u32);

impl fmt::Display for MeetingId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "M{}", self.0)
    }
}

/// Identifier of an errand. Unique within a scenario.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ErrandId(pub u32);

impl fmt::Display for ErrandId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// The item named by a reschedule action.
///
/// Serialized as a short string: `"E3"` for errand 3, `"M2"` for meeting 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ItemId {
    Errand(ErrandId),
    Meeting(MeetingId),
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ItemId::Errand(id) => write!(f, "E{}", id.0),
            ItemId::Meeting(id) => write!(f, "M{}", id.0),
        }
    }
}

impl FromStr for ItemId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse = |rest: &str| {
            rest.parse::<u32>()
                .map_err(|_| format!("invalid item id {s:?}"))
        };
        match s.as_bytes().first() {
            Some(b'E') | Some(b'e') => Ok(ItemId::Errand(ErrandId(parse(&s[1..])?))),
            Some(b'M') | Some(b'm') => Ok(ItemId::Meeting(MeetingId(parse(&s[1..])?))),
            _ => Err(format!("invalid item id {s:?}: expected E<n> or M<n>")),
        }
    }
}

impl TryFrom<String> for ItemId {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<ItemId> for String {
    fn from(value: ItemId) -> Self {
        value.to_string()
    }
}

/// A movable (or blocked) private calendar item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Errand {
    pub id: ErrandId,
    pub cost: u32,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub blocked: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// One participant's copy of a previously scheduled meeting.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledMeeting {
    pub id: MeetingId,
    pub cost: u32,
    pub participants: BTreeSet<AgentId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// Prior meetings cost 1 to move, per participant calendar.
pub const MEETING_MOVE_COST: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SlotState {
    #[default]
    Free,
    Errand(Errand),
    Meeting(ScheduledMeeting),
}

impl SlotState {
    pub fn is_free(&self) -> bool {
        matches!(self, SlotState::Free)
    }

    pub fn item_id(&self) -> Option<ItemId> {
        match self {
            SlotState::Free => None,
            SlotState::Errand(e) => Some(ItemId::Errand(e.id)),
            SlotState::Meeting(m) => Some(ItemId::Meeting(m.id)),
        }
    }

    /// Cost of moving this item, or `None` for free slots and blocked errands.
    pub fn move_cost(&self) -> Option<u32> {
        match self {
            SlotState::Free => None,
            SlotState::Errand(e) if e.blocked => None,
            SlotState::Errand(e) => Some(e.cost),
            SlotState::Meeting(m) => Some(m.cost),
        }
    }

    pub fn is_movable_errand(&self) -> bool {
        matches!(self, SlotState::Errand(e) if !e.blocked)
    }

    pub fn is_blocked(&self) -> bool {
        matches!(self, SlotState::Errand(e) if e.blocked)
    }

    pub fn label(&self) -> Option<&str> {
        match self {
            SlotState::Free => None,
            SlotState::Errand(e) => e.label.as_deref(),
            SlotState::Meeting(m) => m.label.as_deref(),
        }
    }

    /// Short human description used in conflict strings.
    pub(crate) fn describe(&self) -> String {
        match self {
            SlotState::Free => "nothing".to_owned(),
            SlotState::Errand(e) if e.blocked => format!("Blocked Errand {}", e.id),
            SlotState::Errand(e) => format!("Errand {}", e.id),
            SlotState::Meeting(m) => format!("Meeting {}", m.id),
        }
    }
}

/// One agent's private schedule of `S` slots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Calendar {
    pub agent: AgentId,
    pub slots: Vec<SlotState>,
}

impl Calendar {
    pub fn new(agent: AgentId, num_slots: usize) -> Self {
        Self {
            agent,
            slots: vec![SlotState::Free; num_slots],
        }
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn slot(&self, slot: Slot) -> &SlotState {
        &self.slots[slot]
    }

    pub fn is_free(&self, slot: Slot) -> bool {
        self.slots.get(slot).is_some_and(SlotState::is_free)
    }

    pub fn free_slots(&self) -> impl Iterator<Item = Slot> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_free())
            .map(|(i, _)| i)
    }

    pub fn free_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_free()).count()
    }

    pub fn find_meeting(&self, id: MeetingId) -> Option<Slot> {
        self.slots
            .iter()
            .position(|s| matches!(s, SlotState::Meeting(m) if m.id == id))
    }

    /// Meetings present on this calendar, with their slots, in slot order.
    pub fn meetings(&self) -> impl Iterator<Item = (Slot, &ScheduledMeeting)> {
        self.slots.iter().enumerate().filter_map(|(i, s)| match s {
            SlotState::Meeting(m) => Some((i, m)),
            _ => None,
        })
    }

    /// Checks the structural invariants: no meeting id appears twice.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for (slot, m) in self.meetings() {
            if !seen.insert(m.id) {
                return Err(format!(
                    "meeting {} appears twice (again at slot {slot})",
                    m.id
                ));
            }
        }
        for (slot, state) in self.slots.iter().enumerate() {
            if let SlotState::Errand(e) = state {
                if e.cost == 0 {
                    return Err(format!("errand {} at slot {slot} has zero cost", e.id));
                }
            }
        }
        Ok(())
    }
}

/// An incoming meeting in the stream; one per round.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeetingSpec {
    pub id: MeetingId,
    pub participants: BTreeSet<AgentId>,
    pub round: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl MeetingSpec {
    /// Lowest-id participant; the initiator in every reference protocol.
    pub fn initiator(&self) -> AgentId {
        *self
            .participants
            .first()
            .expect("meeting has at least two participants")
    }

    pub fn is_participant(&self, agent: AgentId) -> bool {
        self.participants.contains(&agent)
    }

    /// The placed copy of this meeting as it appears on a participant's calendar.
    pub fn to_scheduled(&self) -> ScheduledMeeting {
        ScheduledMeeting {
            id: self.id,
            cost: MEETING_MOVE_COST,
            participants: self.participants.clone(),
            label: self.label.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Action {
    Schedule {
        meeting_id: MeetingId,
        slot: Slot,
    },
    Reschedule {
        item_id: ItemId,
        from_slot: Slot,
        to_slot: Slot,
        #[serde(default)]
        justification: String,
    },
}

impl Action {
    pub fn reschedule(item_id: ItemId, from_slot: Slot, to_slot: Slot, why: &str) -> Self {
        Action::Reschedule {
            item_id,
            from_slot,
            to_slot,
            justification: why.to_owned(),
        }
    }

    pub fn is_schedule(&self) -> bool {
        matches!(self, Action::Schedule { .. })
    }
}

/// An ordered set of actions validated and applied as one unit.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionBatch {
    pub actions: Vec<Action>,
}

impl ActionBatch {
    pub fn new(actions: Vec<Action>) -> Self {
        Self { actions }
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Slot of the (first) schedule action, if any.
    pub fn scheduled_slot(&self) -> Option<Slot> {
        self.actions.iter().find_map(|a| match a {
            Action::Schedule { slot, .. } => Some(*slot),
            _ => None,
        })
    }

    /// Batch with schedule actions removed, as used in the voluntary phase.
    pub fn reschedules_only(&self) -> ActionBatch {
        ActionBatch::new(
            self.actions
                .iter()
                .filter(|a| !a.is_schedule())
                .cloned()
                .collect(),
        )
    }
}

impl From<Vec<Action>> for ActionBatch {
    fn from(actions: Vec<Action>) -> Self {
        Self::new(actions)
    }
}
