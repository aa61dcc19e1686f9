use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Action, ActionBatch, Calendar, ItemId, MeetingSpec, SlotState};

/// The seven batch validation rules, checked in this order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    SlotBounds,
    ItemIdentity,
    BlockedMove,
    DestinationConflict,
    DestinationNotFree,
    ScheduleCount,
    ScheduleSlotFree,
}

impl Rule {
    pub const ALL: [Rule; 7] = [
        Rule::SlotBounds,
        Rule::ItemIdentity,
        Rule::BlockedMove,
        Rule::DestinationConflict,
        Rule::DestinationNotFree,
        Rule::ScheduleCount,
        Rule::ScheduleSlotFree,
    ];

    /// 1-based rule number.
    pub fn number(self) -> u8 {
        self as u8 + 1
    }
}

/// First violated rule of a rejected batch.
///
/// `message` is the exact text delivered to the agent in the retry prompt and
/// recorded in `batch_rejected` events. `action` is the 1-based position of
/// the offending action, when one action is to blame.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conflict {
    pub rule: Rule,
    pub action: Option<usize>,
    pub message: String,
}

impl Conflict {
    fn new(rule: Rule, action: Option<usize>, message: String) -> Self {
        Self {
            rule,
            action,
            message,
        }
    }
}

impl fmt::Display for Conflict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Conflict {}

struct Move<'a> {
    pos: usize,
    item: &'a ItemId,
    from: usize,
    to: usize,
}

/// Checks a batch against a calendar without changing anything.
///
/// Reschedules are treated as simultaneous: a destination may be a slot
/// vacated by any other reschedule in the batch, so chains such as
/// `A: 2→5, B: 5→7` validate regardless of their order.
pub fn validate_batch(
    calendar: &Calendar,
    batch: &ActionBatch,
    require_schedule: bool,
) -> Result<(), Conflict> {
    let num_slots = calendar.num_slots();

    // Rule 1: slot bounds.
    for (i, action) in batch.actions.iter().enumerate() {
        let pos = i + 1;
        let slots: &[usize] = match action {
            Action::Schedule { slot, .. } => std::slice::from_ref(slot),
            Action::Reschedule {
                from_slot, to_slot, ..
            } => &[*from_slot, *to_slot],
        };
        if let Some(bad) = slots.iter().find(|&&s| s >= num_slots) {
            return Err(Conflict::new(
                Rule::SlotBounds,
                Some(pos),
                format!("Slot out of bounds: action {pos} uses slot {bad}, valid slots are 0..{num_slots}"),
            ));
        }
    }

    let moves: Vec<Move<'_>> = batch
        .actions
        .iter()
        .enumerate()
        .filter_map(|(i, a)| match a {
            Action::Reschedule {
                item_id,
                from_slot,
                to_slot,
                ..
            } => Some(Move {
                pos: i + 1,
                item: item_id,
                from: *from_slot,
                to: *to_slot,
            }),
            Action::Schedule { .. } => None,
        })
        .collect();

    // Rule 2: the named item is at from_slot, and no slot is emptied twice.
    let mut moved_from: BTreeMap<usize, usize> = BTreeMap::new();
    for m in &moves {
        let present = calendar.slot(m.from);
        if present.item_id().as_ref() != Some(m.item) {
            return Err(Conflict::new(
                Rule::ItemIdentity,
                Some(m.pos),
                format!(
                    "Item mismatch: action {} moves {} from slot {}, but slot {} holds {}",
                    m.pos,
                    m.item,
                    m.from,
                    m.from,
                    present.describe()
                ),
            ));
        }
        if let Some(prev) = moved_from.insert(m.from, m.pos) {
            return Err(Conflict::new(
                Rule::ItemIdentity,
                Some(m.pos),
                format!(
                    "Item mismatch: action {} moves {} from slot {}, which action {} already moves",
                    m.pos, m.item, m.from, prev
                ),
            ));
        }
    }

    // Rule 3: blocked items stay put.
    for m in &moves {
        if let SlotState::Errand(e) = calendar.slot(m.from) {
            if e.blocked {
                return Err(Conflict::new(
                    Rule::BlockedMove,
                    Some(m.pos),
                    format!(
                        "Blocked item: action {} tries to move Blocked Errand {} at slot {}",
                        m.pos, e.id, m.from
                    ),
                ));
            }
        }
    }

    // Rule 4: no two reschedules share a destination.
    let mut targeted: BTreeMap<usize, usize> = BTreeMap::new();
    for m in &moves {
        if let Some(prev) = targeted.insert(m.to, m.pos) {
            return Err(Conflict::new(
                Rule::DestinationConflict,
                Some(m.pos),
                format!(
                    "Destination conflict: actions {} and {} both target slot {}",
                    prev, m.pos, m.to
                ),
            ));
        }
    }

    // Rule 5: each destination is free, or vacated by another reschedule.
    for m in &moves {
        let vacated_by_other = moved_from.get(&m.to).is_some_and(|&p| p != m.pos);
        if !calendar.is_free(m.to) && !vacated_by_other {
            return Err(Conflict::new(
                Rule::DestinationNotFree,
                Some(m.pos),
                format!(
                    "Destination occupied: action {} moves {} to slot {}, which holds {}",
                    m.pos,
                    m.item,
                    m.to,
                    calendar.slot(m.to).describe()
                ),
            ));
        }
    }

    // Rule 6: schedule count.
    let schedules: Vec<(usize, &Action)> = batch
        .actions
        .iter()
        .enumerate()
        .filter(|(_, a)| a.is_schedule())
        .map(|(i, a)| (i + 1, a))
        .collect();
    if require_schedule && schedules.len() != 1 {
        return Err(Conflict::new(
            Rule::ScheduleCount,
            None,
            format!(
                "Expected exactly 1 schedule action, got {}",
                schedules.len()
            ),
        ));
    }
    if !require_schedule && !schedules.is_empty() {
        return Err(Conflict::new(
            Rule::ScheduleCount,
            Some(schedules[0].0),
            format!("Expected no schedule action, got {}", schedules.len()),
        ));
    }

    // Rule 7: the schedule slot is free once every reschedule has happened.
    if let Some(&(pos, Action::Schedule { meeting_id, slot })) = schedules.first() {
        if let Some(existing) = calendar.find_meeting(*meeting_id) {
            return Err(Conflict::new(
                Rule::ScheduleSlotFree,
                Some(pos),
                format!(
                    "Schedule slot occupied: meeting {meeting_id} is already scheduled at slot {existing}"
                ),
            ));
        }
        let occupant = if let Some(&p) = targeted.get(slot) {
            Some(format!("the item moved there by action {p}"))
        } else if !calendar.is_free(*slot) && !moved_from.contains_key(slot) {
            Some(calendar.slot(*slot).describe())
        } else {
            None
        };
        if let Some(occupant) = occupant {
            return Err(Conflict::new(
                Rule::ScheduleSlotFree,
                Some(pos),
                format!("Schedule slot occupied: slot {slot} holds {occupant} after reschedules"),
            ));
        }
    }

    Ok(())
}

/// Result of applying a valid batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Applied {
    pub calendar: Calendar,
    /// Sum of internal errand costs plus one per moved meeting copy.
    pub cost: u32,
}

/// Applies a batch that [`validate_batch`] accepted.
///
/// `incoming` supplies the meeting placed by a schedule action.
///
/// # Panics
///
/// Panics if the batch is invalid for `calendar`, or if it schedules a meeting
/// other than `incoming`. Both are caller bugs.
pub fn apply_batch(
    calendar: &Calendar,
    batch: &ActionBatch,
    incoming: Option<&MeetingSpec>,
) -> Applied {
    let require_schedule = batch.actions.iter().any(Action::is_schedule);
    if let Err(conflict) = validate_batch(calendar, batch, require_schedule) {
        panic!("apply_batch called with an invalid batch: {conflict}");
    }

    let mut next = calendar.clone();
    let mut cost = 0;
    let mut lifted = Vec::new();
    let mut vacated = BTreeSet::new();
    for action in &batch.actions {
        if let Action::Reschedule {
            from_slot, to_slot, ..
        } = action
        {
            let item = std::mem::take(&mut next.slots[*from_slot]);
            cost += item.move_cost().expect("validated item is movable");
            vacated.insert(*from_slot);
            lifted.push((*to_slot, item));
        }
    }
    for (to, item) in lifted {
        debug_assert!(next.slots[to].is_free());
        next.slots[to] = item;
    }
    for action in &batch.actions {
        if let Action::Schedule { meeting_id, slot } = action {
            let spec = incoming.expect("schedule action without an incoming meeting");
            assert_eq!(
                spec.id, *meeting_id,
                "schedule action names a different meeting"
            );
            next.slots[*slot] = SlotState::Meeting(spec.to_scheduled());
        }
    }
    Applied {
        calendar: next,
        cost,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Errand, ErrandId, MeetingId, ScheduledMeeting};

    fn errand(id: u32, cost: u32, blocked: bool) -> SlotState {
        SlotState::Errand(Errand {
            id: ErrandId(id),
            cost,
            blocked,
            label: None,
        })
    }

    fn meeting(id: u32) -> MeetingSpec {
        MeetingSpec {
            id: MeetingId(id),
            participants: [0, 1].into(),
            round: 0,
            label: None,
        }
    }

    fn cal() -> Calendar {
        // 0 free, 1 errand #1 cost 3, 2 blocked #2, 3 prior meeting M9, 4..5 free
        let mut c = Calendar::new(0, 6);
        c.slots[1] = errand(1, 3, false);
        c.slots[2] = errand(2, 1, true);
        c.slots[3] = SlotState::Meeting(ScheduledMeeting {
            id: MeetingId(9),
            cost: 1,
            participants: [0, 4].into(),
            label: None,
        });
        c
    }

    fn e(id: u32) -> ItemId {
        ItemId::Errand(ErrandId(id))
    }

    fn sched(slot: usize) -> Action {
        Action::Schedule {
            meeting_id: MeetingId(0),
            slot,
        }
    }

    #[test]
    fn empty_batch_without_schedule_is_ok() {
        assert!(validate_batch(&cal(), &ActionBatch::default(), false).is_ok());
    }

    #[test]
    fn empty_batch_when_schedule_required() {
        let err = validate_batch(&cal(), &ActionBatch::default(), true).unwrap_err();
        assert_eq!(err.rule, Rule::ScheduleCount);
        assert_eq!(err.message, "Expected exactly 1 schedule action, got 0");
    }

    #[test]
    fn move_then_schedule_in_vacated_slot() {
        let batch = ActionBatch::new(vec![Action::reschedule(e(1), 1, 5, "room"), sched(1)]);
        assert!(validate_batch(&cal(), &batch, true).is_ok());
        let applied = apply_batch(&cal(), &batch, Some(&meeting(0)));
        assert_eq!(applied.cost, 3);
        assert!(matches!(applied.calendar.slot(1), SlotState::Meeting(m) if m.id == MeetingId(0)));
        assert!(matches!(applied.calendar.slot(5), SlotState::Errand(x) if x.id == ErrandId(1)));
    }

    #[test]
    fn each_rule_has_its_own_message() {
        let c = cal();
        let cases: Vec<(Vec<Action>, bool, Rule, &str)> = vec![
            (
                vec![sched(6)],
                true,
                Rule::SlotBounds,
                "Slot out of bounds: action 1 uses slot 6, valid slots are 0..6",
            ),
            (
                vec![Action::reschedule(e(5), 1, 4, "")],
                false,
                Rule::ItemIdentity,
                "Item mismatch: action 1 moves E5 from slot 1, but slot 1 holds Errand #1",
            ),
            (
                vec![Action::reschedule(e(2), 2, 4, "")],
                false,
                Rule::BlockedMove,
                "Blocked item: action 1 tries to move Blocked Errand #2 at slot 2",
            ),
            (
                vec![
                    Action::reschedule(e(1), 1, 4, ""),
                    Action::reschedule(ItemId::Meeting(MeetingId(9)), 3, 4, ""),
                ],
                false,
                Rule::DestinationConflict,
                "Destination conflict: actions 1 and 2 both target slot 4",
            ),
            (
                vec![Action::reschedule(e(1), 1, 3, "")],
                false,
                Rule::DestinationNotFree,
                "Destination occupied: action 1 moves E1 to slot 3, which holds Meeting M9",
            ),
            (
                vec![sched(0), sched(4)],
                true,
                Rule::ScheduleCount,
                "Expected exactly 1 schedule action, got 2",
            ),
            (
                vec![sched(3)],
                true,
                Rule::ScheduleSlotFree,
                "Schedule slot occupied: slot 3 holds Meeting M9 after reschedules",
            ),
        ];
        for (actions, require, rule, text) in cases {
            let err = validate_batch(&c, &ActionBatch::new(actions), require).unwrap_err();
            assert_eq!(err.rule, rule);
            assert_eq!(err.message, text);
        }
    }

    #[test]
    fn chained_reschedules_are_order_independent() {
        let mut c = Calendar::new(0, 4);
        c.slots[0] = errand(1, 2, false);
        c.slots[1] = errand(2, 1, false);
        // E1 0→1 needs slot 1 vacated by the later E2 1→3; then schedule at 0.
        let batch = ActionBatch::new(vec![
            Action::reschedule(e(1), 0, 1, ""),
            Action::reschedule(e(2), 1, 3, ""),
            sched(0),
        ]);
        assert!(validate_batch(&c, &batch, true).is_ok());
        let applied = apply_batch(&c, &batch, Some(&meeting(0)));
        assert_eq!(applied.cost, 3);
        assert!(matches!(applied.calendar.slot(1), SlotState::Errand(x) if x.id == ErrandId(1)));
        assert!(matches!(applied.calendar.slot(3), SlotState::Errand(x) if x.id == ErrandId(2)));
    }

    #[test]
    fn self_move_is_not_freed_by_itself() {
        let batch = ActionBatch::new(vec![Action::reschedule(e(1), 1, 1, "")]);
        let err = validate_batch(&cal(), &batch, false).unwrap_err();
        assert_eq!(err.rule, Rule::DestinationNotFree);
    }

    #[test]
    fn schedule_into_slot_targeted_by_reschedule() {
        let batch = ActionBatch::new(vec![Action::reschedule(e(1), 1, 4, ""), sched(4)]);
        let err = validate_batch(&cal(), &batch, true).unwrap_err();
        assert_eq!(err.rule, Rule::ScheduleSlotFree);
        assert_eq!(err.message, "Schedule slot occupied: slot 4 holds the item moved there by action 1 after reschedules");
    }

    #[test]
    fn rescheduling_same_meeting_again_is_rule_seven() {
        let mut c = cal();
        c.slots[0] = SlotState::Meeting(meeting(0).to_scheduled());
        let err = validate_batch(&c, &ActionBatch::new(vec![sched(0)]), true).unwrap_err();
        assert_eq!(err.rule, Rule::ScheduleSlotFree);
        assert!(err.message.contains("already scheduled at slot 0"));
    }

    #[test]
    fn voluntary_batches_reject_schedules() {
        let err = validate_batch(&cal(), &ActionBatch::new(vec![sched(0)]), false).unwrap_err();
        assert_eq!(err.rule, Rule::ScheduleCount);
        assert_eq!(err.message, "Expected no schedule action, got 1");
    }

    #[test]
    fn prior_meeting_move_costs_one() {
        let batch = ActionBatch::new(vec![Action::reschedule(
            ItemId::Meeting(MeetingId(9)),
            3,
            0,
            "",
        )]);
        let applied = apply_batch(&cal(), &batch, None);
        assert_eq!(applied.cost, 1);
        assert_eq!(applied.calendar.find_meeting(MeetingId(9)), Some(0));
    }

    #[test]
    fn empty_apply_is_identity() {
        let c = cal();
        let applied = apply_batch(&c, &ActionBatch::default(), None);
        assert_eq!(applied.calendar, c);
        assert_eq!(applied.cost, 0);
    }

    #[test]
    #[should_panic(expected = "invalid batch")]
    fn apply_rejects_invalid_batch() {
        apply_batch(
            &cal(),
            &ActionBatch::new(vec![Action::reschedule(e(2), 2, 4, "")]),
            None,
        );
    }
}
