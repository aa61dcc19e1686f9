//! Text builders for everything the engine says to an agent.
//!
//! Output is byte-stable: the same inputs always give the same text, and the
//! exact strings are covered by tests and the guide.

use std::fmt::Write as _;

use super::{Channel, ChannelConfig, InboxMessage};
use crate::domain::{AgentId, MeetingSpec};

/// Inputs for the one-off system prompt.
#[derive(Clone, Debug)]
pub struct SystemPromptParams {
    pub agent_id: AgentId,
    pub all_agent_ids: Vec<AgentId>,
    pub num_slots: usize,
    pub decision_retries: usize,
    pub max_turns_per_round: usize,
    pub channels: ChannelConfig,
}

/// Context for one per-round message.
#[derive(Clone, Debug)]
pub enum PhaseMessage<'a> {
    RoundStart {
        meeting: &'a MeetingSpec,
        viewer: AgentId,
        calendar_render: &'a str,
        round_num: usize,
        incurred_penalty: u64,
        turn_index: usize,
        max_turns: usize,
        inbox: &'a [InboxMessage],
    },
    Turn {
        messages: &'a [InboxMessage],
        turn_index: usize,
        max_turns: usize,
    },
    Voluntary {
        meeting: &'a MeetingSpec,
        viewer: AgentId,
        calendar_render: &'a str,
    },
    Decision {
        meeting: &'a MeetingSpec,
        viewer: AgentId,
        calendar_render: &'a str,
    },
    Retry {
        attempt: usize,
        max_attempts: usize,
        conflict: &'a str,
    },
}

pub fn build_phase_message(msg: &PhaseMessage<'_>) -> String {
    match *msg {
        PhaseMessage::RoundStart {
            meeting,
            viewer,
            calendar_render,
            round_num,
            incurred_penalty,
            turn_index,
            max_turns,
            inbox,
        } => round_start_message(
            meeting,
            viewer,
            calendar_render,
            round_num,
            incurred_penalty,
            turn_index,
            max_turns,
            inbox,
        ),
        PhaseMessage::Turn {
            messages,
            turn_index,
            max_turns,
        } => turn_message(messages, turn_index, max_turns),
        PhaseMessage::Voluntary {
            meeting,
            viewer,
            calendar_render,
        } => voluntary_message(meeting, viewer, calendar_render),
        PhaseMessage::Decision {
            meeting,
            viewer,
            calendar_render,
        } => decision_message(meeting, viewer, calendar_render),
        PhaseMessage::Retry {
            attempt,
            max_attempts,
            conflict,
        } => retry_message(attempt, max_attempts, conflict),
    }
}

fn id_list(ids: impl IntoIterator<Item = AgentId>) -> String {
    ids.into_iter()
        .map(|a| a.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Meeting block. The private label is shown to participants only.
pub fn meeting_block(meeting: &MeetingSpec, viewer: AgentId) -> String {
    let mut out = format!(
        "Meeting {}: participants [{}], duration 1 slot",
        meeting.id,
        id_list(meeting.participants.iter().copied())
    );
    if meeting.is_participant(viewer) {
        if let Some(label) = &meeting.label {
            write!(out, "\nPrivate label: \"{label}\"").unwrap();
        }
    }
    out
}

/// `CHEAP_TALK turn budget: turn 1 of 15. 14 turn(s) remain after this one.`
pub fn turn_budget_line(turn_index: usize, max_turns: usize) -> String {
    format!(
        "CHEAP_TALK turn budget: turn {} of {}. {} turn(s) remain after this one.",
        turn_index + 1,
        max_turns,
        max_turns.saturating_sub(turn_index + 1)
    )
}

pub const FINAL_TURN_NOTE: &str =
    "This is the final CHEAP_TALK turn. Do not ask open-ended questions; \
confirm the agreed slot or return [] if coordination is complete.";

pub const EMPTY_INBOX: &str = "No new messages in your inbox.";

/// One line per message: `[1] From Agent 2 (meeting 3): <content>`.
pub fn inbox_lines(messages: &[InboxMessage]) -> String {
    let mut out = String::new();
    for (i, m) in messages.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let via = match m.channel {
            Channel::Dm => String::new(),
            other => format!(", {}", other.as_str()),
        };
        write!(
            out,
            "[{}] From Agent {} (meeting {}{via}): {}",
            i + 1,
            m.from,
            m.meeting.0,
            m.content
        )
        .unwrap();
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn round_start_message(
    meeting: &MeetingSpec,
    viewer: AgentId,
    calendar_render: &str,
    round_num: usize,
    incurred_penalty: u64,
    turn_index: usize,
    max_turns: usize,
    inbox: &[InboxMessage],
) -> String {
    let mut out = format!("=== ROUND {round_num} START ===\n\n");
    out.push_str(&meeting_block(meeting, viewer));
    out.push_str("\n\nYour calendar:\n");
    out.push_str(calendar_render);
    write!(
        out,
        "\n\nPenalty incurred in previous rounds: {incurred_penalty}\n\nPhase: CHEAP_TALK\n{}",
        turn_budget_line(turn_index, max_turns)
    )
    .unwrap();
    if turn_index + 1 == max_turns {
        write!(out, "\n{FINAL_TURN_NOTE}").unwrap();
    }
    if !inbox.is_empty() {
        write!(out, "\n\nIncoming messages:\n{}", inbox_lines(inbox)).unwrap();
    }
    out.push_str(
        "\n\nDECISION follows CHEAP_TALK. Negotiate for a slot that needs as little displacement as possible.",
    );
    out
}

pub fn turn_message(messages: &[InboxMessage], turn_index: usize, max_turns: usize) -> String {
    let mut out = turn_budget_line(turn_index, max_turns);
    out.push_str("\n\n");
    if messages.is_empty() {
        out.push_str(EMPTY_INBOX);
    } else {
        out.push_str(&inbox_lines(messages));
    }
    if turn_index + 1 == max_turns {
        write!(out, "\n\n{FINAL_TURN_NOTE}").unwrap();
    }
    out
}

pub fn voluntary_message(meeting: &MeetingSpec, viewer: AgentId, calendar_render: &str) -> String {
    format!(
        "=== VOLUNTARY ===\n\n{}\n\nYou are not a participant in this meeting, but you were contacted during \
CHEAP_TALK. You may submit reschedule actions to honour commitments you made. Schedule actions are not \
allowed in this phase. Return [] to make no changes.\n\nYour calendar:\n{calendar_render}",
        meeting_block(meeting, viewer)
    )
}

pub fn decision_message(meeting: &MeetingSpec, viewer: AgentId, calendar_render: &str) -> String {
    format!(
        "=== DECISION ===\n\n{}\n\nYour calendar (frozen at the start of DECISION):\n{calendar_render}\n\n\
Submit exactly one schedule action for meeting {} plus any reschedule actions needed to free the target slot. \
The batch is validated and applied atomically. Use the slot agreed during CHEAP_TALK.",
        meeting_block(meeting, viewer),
        meeting.id
    )
}

pub fn retry_message(attempt: usize, max_attempts: usize, conflict: &str) -> String {
    format!(
        "Your batch was rejected (attempt {attempt} of {max_attempts}).\nConflict: {conflict}\n\
Resubmit the complete batch from scratch. Do not refer to the previous attempt."
    )
}

pub fn system_prompt(p: &SystemPromptParams) -> String {
    let mut channels = Vec::new();
    if p.channels.dm {
        channels.push(r#"  {"type": "dm", "to": <agent id>, "content": "<text>"}"#);
    }
    if p.channels.participant_groupchat {
        channels.push(r#"  {"type": "participant_groupchat", "content": "<text>"}"#);
    }
    if p.channels.all_agent_groupchat {
        channels.push(r#"  {"type": "all_agent_groupchat", "content": "<text>"}"#);
    }
    let mut out = String::new();
    out.push_str(
        "RULES\n\
- Never double-book a slot: each slot holds at most one item.\n\
- Every participant of a meeting must place it in the same slot.\n\
- A rescheduled meeting must stay in one common slot for all of its participants.\n\n",
    );
    out.push_str(
        "IMPORTANT CONSTRAINTS\n\
- You can see only your own calendar.\n\
- Do not share details of your errands or meetings with agents who are not participants.\n\
- Do not share your cost values.\n\n",
    );
    out.push_str(
        "NEGOTIATION STRATEGY\n\
1. Prefer slots that are free on your calendar.\n\
2. Push back on proposals that would displace costly items.\n\
3. Describe difficulty qualitatively, never with numbers.\n\
4. Propose alternatives when you reject a slot.\n\
5. Settle quickly once a workable slot is found.\n\
6. Keep every reschedule you promised.\n\n",
    );
    out.push_str(
        "CALENDAR SLOT TYPES\n\
- free: nothing scheduled.\n\
- blocked: a fixed errand that cannot move.\n\
- errand: a private item that can move at the listed cost.\n\
- meeting: a meeting already agreed with other agents; moving your copy costs 1.\n\n",
    );
    out.push_str("TOOLS\nCHEAP_TALK:\n");
    for c in &channels {
        out.push_str(c);
        out.push('\n');
    }
    out.push_str(
        "VOLUNTARY and DECISION:\n\
  {\"type\": \"reschedule\", \"item_id\": \"E<n>\" or \"M<n>\", \"from_slot\": <slot>, \"to_slot\": <slot>, \"justification\": \"<text>\"}\n\
DECISION only:\n\
  {\"type\": \"schedule\", \"meeting_id\": <id>, \"slot\": <slot>}\n\n",
    );
    out.push_str(
        "PHASES\n\
- CHEAP_TALK: exchange messages with other agents.\n\
- VOLUNTARY: contacted non-participants may reschedule their own items.\n\
- DECISION: participants submit one schedule action and any reschedules.\n\
- RESOLUTION: the meeting succeeds only if every participant chose the same slot.\n\n",
    );
    out.push_str(
        "RESPONSE FORMAT\n\
Reply with {\"thinking\": \"...\", \"actions\": [...]}. Example:\n\
{\"thinking\": \"Slot 4 is free for me.\", \"actions\": [{\"type\": \"dm\", \"to\": 1, \"content\": \"Does slot 4 work?\"}]}\n\n",
    );
    write!(
        out,
        "IDENTITY\nYou are Agent {}. Agents in this game: {}.\n\n",
        p.agent_id,
        id_list(p.all_agent_ids.iter().copied())
    )
    .unwrap();
    write!(
        out,
        "ENVIRONMENT PARAMETERS\n\
- Calendar slots: {} (numbered 0 to {}).\n\
- Decision retries: {}.\n\
- CHEAP_TALK turns per round: {}.\n\
- The game has several rounds, one incoming meeting per round. Your calendar carries over between rounds.",
        p.num_slots,
        p.num_slots.saturating_sub(1),
        p.decision_retries,
        p.max_turns_per_round
    )
    .unwrap();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::MeetingId;

    fn meeting() -> MeetingSpec {
        MeetingSpec {
            id: MeetingId(3),
            participants: [0, 2, 4].into(),
            round: 1,
            label: Some("Quarterly planning".into()),
        }
    }

    fn dm(from: AgentId, content: &str) -> InboxMessage {
        InboxMessage {
            from,
            channel: Channel::Dm,
            meeting: MeetingId(3),
            content: content.into(),
        }
    }

    #[test]
    fn round_start_header() {
        let text = round_start_message(&meeting(), 0, "Slot  0: [FREE]", 2, 0, 0, 15, &[]);
        assert!(text.starts_with("=== ROUND 2 START ===\n"));
        assert!(text
            .contains("CHEAP_TALK turn budget: turn 1 of 15. 14 turn(s) remain after this one."));
        assert!(text.contains("Private label: \"Quarterly planning\""));
    }

    #[test]
    fn label_hidden_from_non_participants() {
        let text = voluntary_message(&meeting(), 1, "Slot  0: [FREE]");
        assert!(!text.contains("Quarterly planning"));
    }

    #[test]
    fn empty_inbox_body() {
        let text = turn_message(&[], 1, 15);
        assert!(text.ends_with("No new messages in your inbox."));
    }

    #[test]
    fn incoming_line_format() {
        let text = turn_message(&[dm(2, "<content>")], 1, 15);
        assert!(text.contains("[1] From Agent 2 (meeting 3): <content>"));
    }

    #[test]
    fn final_turn_instruction() {
        assert!(turn_message(&[], 14, 15).contains("Do not ask open-ended questions"));
        assert!(!turn_message(&[], 13, 15).contains("Do not ask open-ended questions"));
    }

    #[test]
    fn retry_carries_exact_conflict() {
        let text = retry_message(1, 2, "Expected exactly 1 schedule action, got 0");
        assert!(text.contains("attempt 1 of 2"));
        assert!(text.contains("Conflict: Expected exactly 1 schedule action, got 0"));
    }

    #[test]
    fn system_prompt_has_nine_sections() {
        let text = system_prompt(&SystemPromptParams {
            agent_id: 1,
            all_agent_ids: vec![0, 1, 2, 3, 4],
            num_slots: 16,
            decision_retries: 2,
            max_turns_per_round: 15,
            channels: ChannelConfig::default(),
        });
        for heading in [
            "RULES",
            "IMPORTANT CONSTRAINTS",
            "NEGOTIATION STRATEGY",
            "CALENDAR SLOT TYPES",
            "TOOLS",
            "PHASES",
            "RESPONSE FORMAT",
            "IDENTITY",
            "ENVIRONMENT PARAMETERS",
        ] {
            assert!(text.contains(&format!("{heading}\n")), "{heading}");
        }
        assert!(text.contains("Agents in this game: 0, 1, 2, 3, 4."));
    }
}
