use std::fmt::Write as _;

use super::{Calendar, SlotState};

/// How costs are printed.
///
/// Metric arithmetic always uses internal costs. Agent-facing prompts use the
/// logarithmic scale, where internal cost `c` is shown as `10^(c-1)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CostScale {
    #[default]
    Internal,
    Logarithmic,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RenderOptions {
    pub include_labels: bool,
    pub scale: CostScale,
}

/// Maps an internal cost onto the requested scale. `{1,2,3}` becomes `{1,10,100}`.
pub fn display_cost(cost: u32, scale: CostScale) -> u64 {
    match scale {
        CostScale::Internal => u64::from(cost),
        CostScale::Logarithmic => 10u64.saturating_pow(cost.saturating_sub(1)),
    }
}

/// Renders one line per slot with internal costs.
///
/// ```
/// use calsched::domain::{render_calendar, Calendar};
/// let cal = Calendar::new(0, 2);
/// assert_eq!(render_calendar(&cal, false), "Slot  0: [FREE]\nSlot  1: [FREE]");
/// ```
pub fn render_calendar(calendar: &Calendar, include_labels: bool) -> String {
    render_calendar_with(
        calendar,
        RenderOptions {
            include_labels,
            scale: CostScale::Internal,
        },
    )
}

pub fn render_calendar_with(calendar: &Calendar, opts: RenderOptions) -> String {
    let mut out = String::new();
    for (i, state) in calendar.slots.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        write!(out, "Slot {i:>2}: ").unwrap();
        match state {
            SlotState::Free => out.push_str("[FREE]"),
            SlotState::Errand(e) => {
                if e.blocked {
                    out.push_str("Blocked ");
                }
                write!(
                    out,
                    "Errand {} (cost={})",
                    e.id,
                    display_cost(e.cost, opts.scale)
                )
                .unwrap();
            }
            SlotState::Meeting(m) => {
                let parts: Vec<String> = m.participants.iter().map(|p| p.to_string()).collect();
                write!(
                    out,
                    "Meeting {} (cost={}) participants=[{}]",
                    m.id,
                    display_cost(m.cost, opts.scale),
                    parts.join(", ")
                )
                .unwrap();
            }
        }
        if opts.include_labels {
            if let Some(label) = state.label() {
                write!(out, " \"{label}\"").unwrap();
            }
        }
    }
    out
}
