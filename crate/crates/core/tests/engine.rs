mod common;

use std::cell::RefCell;
use std::rc::Rc;

use calsched::domain::{Action, ItemId, MeetingId, MeetingSpec};
use calsched::engine::{
    run_game, Agent, AgentError, ChannelConfig, Clock, DecideRequest, Decision, DropReason,
    EngineConfig, EngineError, OutboundMessage, Phase, RetryRequest, RunOptions, TurnRequest,
    TurnResponse,
};
use calsched::scenario::Scenario;
use calsched::trace::{fold_final_state, replay_check, EventKind, TraceFile};
use common::*;

type TurnFn = Box<dyn FnMut(&TurnRequest<'_>) -> Result<TurnResponse, AgentError>>;
type DecideFn = Box<dyn FnMut(&DecideRequest<'_>) -> Result<Decision, AgentError>>;
type RetryFn = Box<dyn FnMut(&RetryRequest<'_>) -> Result<Decision, AgentError>>;

/// Seat driven by closures. Defaults: silent, schedules at `slot`, retries the same.
struct Scripted {
    turn: TurnFn,
    decide: DecideFn,
    retry: RetryFn,
    voluntary: DecideFn,
}

fn sched(meeting: MeetingId, slot: usize) -> Action {
    Action::Schedule {
        meeting_id: meeting,
        slot,
    }
}

impl Scripted {
    fn at(slot: usize) -> Self {
        Self {
            turn: Box::new(|_| Ok(TurnResponse::default())),
            decide: Box::new(move |r| Ok(Decision::with(vec![sched(r.meeting.id, slot)]))),
            retry: Box::new(move |r| Ok(Decision::with(vec![sched(r.meeting.id, slot)]))),
            voluntary: Box::new(|_| Ok(Decision::pass())),
        }
    }

    fn talk(
        mut self,
        f: impl FnMut(&TurnRequest<'_>) -> Result<TurnResponse, AgentError> + 'static,
    ) -> Self {
        self.turn = Box::new(f);
        self
    }

    fn decide(
        mut self,
        f: impl FnMut(&DecideRequest<'_>) -> Result<Decision, AgentError> + 'static,
    ) -> Self {
        self.decide = Box::new(f);
        self
    }

    fn retry(
        mut self,
        f: impl FnMut(&RetryRequest<'_>) -> Result<Decision, AgentError> + 'static,
    ) -> Self {
        self.retry = Box::new(f);
        self
    }

    fn voluntary(
        mut self,
        f: impl FnMut(&DecideRequest<'_>) -> Result<Decision, AgentError> + 'static,
    ) -> Self {
        self.voluntary = Box::new(f);
        self
    }
}

impl Agent for Scripted {
    fn turn(&mut self, req: &TurnRequest<'_>) -> Result<TurnResponse, AgentError> {
        (self.turn)(req)
    }
    fn voluntary_decide(&mut self, req: &DecideRequest<'_>) -> Result<Decision, AgentError> {
        (self.voluntary)(req)
    }
    fn decide(&mut self, req: &DecideRequest<'_>) -> Result<Decision, AgentError> {
        (self.decide)(req)
    }
    fn retry_decide(&mut self, req: &RetryRequest<'_>) -> Result<Decision, AgentError> {
        (self.retry)(req)
    }
}

fn say(msgs: Vec<OutboundMessage>) -> TurnResponse {
    TurnResponse {
        thinking: String::new(),
        messages: msgs,
    }
}

fn fixed() -> RunOptions {
    RunOptions {
        clock: Clock::Fixed("2024-01-01T00:00:00Z".into()),
        ..RunOptions::default()
    }
}

fn play(sc: &Scenario, seats: Vec<Scripted>, config: &EngineConfig) -> TraceFile {
    let mut agents: Vec<Box<dyn Agent>> = seats
        .into_iter()
        .map(|s| Box::new(s) as Box<dyn Agent>)
        .collect();
    run_game(sc, &mut agents, config, &fixed()).expect("game runs")
}

fn kinds(trace: &TraceFile) -> Vec<&EventKind> {
    trace.events.iter().map(|e| &e.kind).collect()
}

fn resolutions(trace: &TraceFile) -> Vec<(bool, Option<usize>, Option<String>)> {
    kinds(trace)
        .into_iter()
        .filter_map(|k| match k {
            EventKind::Resolution {
                succeeded,
                slot,
                reason,
                ..
            } => Some((*succeeded, *slot, reason.clone())),
            _ => None,
        })
        .collect()
}

fn three_free(slots: usize, meetings: Vec<MeetingSpec>) -> Scenario {
    scenario(
        (0..3).map(|a| cal(a, vec![free(); slots])).collect(),
        meetings,
    )
}

#[test]
fn agreement_commits_and_matches_the_fold() {
    let sc = scenario(
        vec![
            cal(0, vec![errand(1, 2), free(), free()]),
            cal(1, vec![free(); 3]),
        ],
        vec![meeting(0, &[0, 1], 0)],
    );
    let move_then_schedule = Scripted::at(0).decide(|r| {
        Ok(Decision::with(vec![
            Action::reschedule(ItemId::Errand(calsched::domain::ErrandId(1)), 0, 2, "clear"),
            sched(r.meeting.id, 0),
        ]))
    });
    let trace = play(
        &sc,
        vec![move_then_schedule, Scripted::at(0)],
        &EngineConfig::default(),
    );
    assert_eq!(resolutions(&trace), vec![(true, Some(0), None)]);
    assert_eq!(trace.final_state.per_agent_cost, vec![2, 0]);
    assert_eq!(trace.final_state.scheduled.get(&MeetingId(0)), Some(&0));
    assert_eq!(fold_final_state(&trace), trace.final_state);
    assert_eq!(trace.metrics.success_rate, 1.0);
    let applied = kinds(&trace)
        .iter()
        .filter(|k| matches!(k, EventKind::BatchApplied { .. }))
        .count();
    assert_eq!(applied, 2);
}

#[test]
fn silence_ends_cheap_talk_after_one_sweep() {
    let sc = three_free(4, vec![meeting(0, &[0, 1], 0)]);
    let trace = play(
        &sc,
        vec![Scripted::at(1), Scripted::at(1), Scripted::at(1)],
        &EngineConfig::default(),
    );
    let turns: Vec<(usize, usize)> = kinds(&trace)
        .iter()
        .filter_map(|k| match k {
            EventKind::TurnStart { turn, agent, .. } => Some((*turn, *agent)),
            _ => None,
        })
        .collect();
    assert_eq!(turns, vec![(0, 0), (0, 1)]);
}

#[test]
fn chatter_is_capped_by_the_turn_budget() {
    let sc = three_free(4, vec![meeting(0, &[0, 1], 0)]);
    let chatty = Scripted::at(0).talk(|_| Ok(say(vec![OutboundMessage::dm(1, "slot 0?")])));
    let config = EngineConfig {
        max_turns_per_round: 4,
        ..EngineConfig::default()
    };
    let trace = play(&sc, vec![chatty, Scripted::at(0), Scripted::at(0)], &config);
    let last_turn = kinds(&trace)
        .iter()
        .filter_map(|k| match k {
            EventKind::TurnStart { turn, .. } => Some(*turn),
            _ => None,
        })
        .max();
    assert_eq!(last_turn, Some(3));
    assert_eq!(trace.final_state.dm_count, 4);
}

#[test]
fn final_turn_prompt_mentions_the_budget() {
    let sc = three_free(4, vec![meeting(0, &[0, 1], 0)]);
    let seen = Rc::new(RefCell::new(Vec::new()));
    let log = seen.clone();
    let listener = Scripted::at(0).talk(move |r| {
        log.borrow_mut()
            .push((r.turn, r.prompt.to_string(), r.inbox.len()));
        Ok(TurnResponse::default())
    });
    let chatty = Scripted::at(0).talk(|_| Ok(say(vec![OutboundMessage::dm(1, "hi")])));
    let config = EngineConfig {
        max_turns_per_round: 2,
        ..EngineConfig::default()
    };
    play(&sc, vec![chatty, listener, Scripted::at(0)], &config);
    let seen = seen.borrow();
    assert_eq!(seen.len(), 2);
    assert_eq!(seen[0].2, 1, "DM from agent 0 arrives in the same sweep");
    assert!(seen[1].1.contains(calsched::engine::FINAL_TURN_NOTE));
}

#[test]
fn dm_to_self_and_unknown_targets_are_dropped() {
    let sc = three_free(4, vec![meeting(0, &[0, 1], 0)]);
    let odd = Scripted::at(0).talk(|r| {
        Ok(if r.turn == 0 {
            say(vec![
                OutboundMessage::dm(0, "me"),
                OutboundMessage::dm(9, "nobody"),
                OutboundMessage::dm(1, "  "),
                OutboundMessage::ParticipantGroupchat {
                    content: "all".into(),
                },
            ])
        } else {
            TurnResponse::default()
        })
    });
    let trace = play(
        &sc,
        vec![odd, Scripted::at(0), Scripted::at(0)],
        &EngineConfig::default(),
    );
    let dropped: Vec<DropReason> = kinds(&trace)
        .iter()
        .flat_map(|k| match k {
            EventKind::TurnEnd { dropped, .. } => dropped.iter().map(|d| d.reason).collect(),
            _ => Vec::new(),
        })
        .collect();
    assert_eq!(
        dropped,
        vec![
            DropReason::SelfTarget,
            DropReason::UnknownTarget,
            DropReason::EmptyContent,
            DropReason::ChannelDisabled
        ]
    );
    assert_eq!(trace.final_state.dm_count, 0);
}

#[test]
fn dm_cap_limits_sends_per_round() {
    let sc = three_free(4, vec![meeting(0, &[0, 1], 0)]);
    let chatty = Scripted::at(0).talk(|r| {
        Ok(if r.turn == 0 {
            say(vec![
                OutboundMessage::dm(1, "a"),
                OutboundMessage::dm(1, "b"),
                OutboundMessage::dm(1, "c"),
            ])
        } else {
            TurnResponse::default()
        })
    });
    let config = EngineConfig {
        dm_cap: Some(2),
        ..EngineConfig::default()
    };
    let trace = play(&sc, vec![chatty, Scripted::at(0), Scripted::at(0)], &config);
    assert_eq!(trace.final_state.dm_count, 2);
}

#[test]
fn dm_activates_a_non_participant_who_may_move_voluntarily() {
    let sc = scenario(
        vec![
            cal(0, vec![free(); 3]),
            cal(1, vec![free(); 3]),
            cal(2, vec![errand(5, 1), free(), free()]),
        ],
        vec![meeting(0, &[0, 1], 0)],
    );
    let views = Rc::new(RefCell::new(Vec::new()));
    let log = views.clone();
    let asker = Scripted::at(0).talk(|r| {
        Ok(if r.turn == 0 {
            say(vec![OutboundMessage::dm(2, "can you free slot 0?")])
        } else {
            TurnResponse::default()
        })
    });
    let helper = Scripted::at(0)
        .talk(move |r| {
            log.borrow_mut()
                .push((r.is_participant, r.inbox.len(), r.meeting.label.clone()));
            Ok(TurnResponse::default())
        })
        .voluntary(|_| {
            Ok(Decision::with(vec![Action::reschedule(
                ItemId::Errand(calsched::domain::ErrandId(5)),
                0,
                2,
                "sure",
            )]))
        });
    let mut sc = sc;
    sc.meetings[0].label = Some("Secret offsite".into());
    let trace = play(
        &sc,
        vec![asker, Scripted::at(0), helper],
        &EngineConfig::default(),
    );
    assert_eq!(*views.borrow(), vec![(false, 1, None)]);
    let dm = kinds(&trace)
        .into_iter()
        .find_map(|k| match k {
            EventKind::DmSent { activated, .. } => Some(activated.clone()),
            _ => None,
        })
        .unwrap();
    assert_eq!(dm, vec![2]);
    assert!(kinds(&trace).iter().any(|k| matches!(
        k,
        EventKind::BatchApplied {
            phase: Phase::Voluntary,
            agent: 2,
            cost: 1,
            ..
        }
    )));
    assert_eq!(trace.final_state.per_agent_cost, vec![0, 0, 1]);
}

#[test]
fn participant_groupchat_does_not_activate_outsiders() {
    let sc = three_free(4, vec![meeting(0, &[0, 1], 0)]);
    let config = EngineConfig {
        channels: ChannelConfig::all(),
        ..EngineConfig::default()
    };
    let group = Scripted::at(0).talk(|r| {
        Ok(if r.turn == 0 {
            say(vec![OutboundMessage::ParticipantGroupchat {
                content: "slot 0".into(),
            }])
        } else {
            TurnResponse::default()
        })
    });
    let trace = play(&sc, vec![group, Scripted::at(0), Scripted::at(0)], &config);
    assert!(!kinds(&trace)
        .iter()
        .any(|k| matches!(k, EventKind::TurnStart { agent: 2, .. })));
    let broadcast = Scripted::at(0).talk(|r| {
        Ok(if r.turn == 0 {
            say(vec![OutboundMessage::AllAgentGroupchat {
                content: "anyone?".into(),
            }])
        } else {
            TurnResponse::default()
        })
    });
    let trace = play(
        &sc,
        vec![broadcast, Scripted::at(0), Scripted::at(0)],
        &config,
    );
    assert!(kinds(&trace).iter().any(|k| matches!(
        k,
        EventKind::TurnStart {
            agent: 2,
            participant: false,
            ..
        }
    )));
}

#[test]
fn rejected_batch_is_retried_with_the_conflict() {
    let sc = scenario(
        vec![cal(0, vec![blocked(1, 1), free()]), cal(1, vec![free(); 2])],
        vec![meeting(0, &[0, 1], 0)],
    );
    let conflicts = Rc::new(RefCell::new(Vec::new()));
    let log = conflicts.clone();
    let wrong_first = Scripted::at(1)
        .decide(|r| Ok(Decision::with(vec![sched(r.meeting.id, 0)])))
        .retry(move |r| {
            log.borrow_mut().push((r.attempt, r.conflict.to_string()));
            Ok(Decision::with(vec![sched(r.meeting.id, 1)]))
        });
    let trace = play(
        &sc,
        vec![wrong_first, Scripted::at(1)],
        &EngineConfig::default(),
    );
    assert_eq!(
        *conflicts.borrow(),
        vec![(
            1,
            "Schedule slot occupied: slot 0 holds Blocked Errand #1 after reschedules".to_string()
        )]
    );
    assert_eq!(resolutions(&trace), vec![(true, Some(1), None)]);
    assert!(kinds(&trace).iter().any(|k| matches!(
        k,
        EventKind::BatchRejected {
            rule: Some(7),
            attempt: 0,
            ..
        }
    )));
}

#[test]
fn exhausted_retries_fail_the_round() {
    let sc = scenario(
        vec![cal(0, vec![blocked(1, 1), free()]), cal(1, vec![free(); 2])],
        vec![meeting(0, &[0, 1], 0)],
    );
    let stubborn = Scripted::at(0);
    let trace = play(
        &sc,
        vec![stubborn, Scripted::at(1)],
        &EngineConfig::default(),
    );
    let rejected = kinds(&trace)
        .iter()
        .filter(|k| matches!(k, EventKind::BatchRejected { .. }))
        .count();
    assert_eq!(rejected, 3);
    assert_eq!(
        resolutions(&trace),
        vec![(
            false,
            None,
            Some("no valid decision from agent(s) 0".into())
        )]
    );
    assert_eq!(trace.final_state.total_cost, 0);
    assert_eq!(trace.final_state.calendars, sc.calendars);
}

#[test]
fn wrong_meeting_id_is_rejected_without_a_rule() {
    let sc = three_free(3, vec![meeting(0, &[0, 1], 0)]);
    let confused = Scripted::at(0)
        .decide(|_| Ok(Decision::with(vec![sched(MeetingId(7), 0)])))
        .retry(|r| Ok(Decision::with(vec![sched(r.meeting.id, 0)])));
    let trace = play(
        &sc,
        vec![confused, Scripted::at(0), Scripted::at(0)],
        &EngineConfig::default(),
    );
    assert!(kinds(&trace)
        .iter()
        .any(|k| matches!(k, EventKind::BatchRejected { rule: None, .. })));
    assert_eq!(resolutions(&trace)[0].0, true);
}

#[test]
fn disagreement_applies_nothing() {
    let sc = three_free(3, vec![meeting(0, &[0, 1], 0)]);
    let trace = play(
        &sc,
        vec![Scripted::at(0), Scripted::at(1), Scripted::at(0)],
        &EngineConfig::default(),
    );
    assert_eq!(
        resolutions(&trace),
        vec![(
            false,
            None,
            Some("participants chose different slots".into())
        )]
    );
    assert!(!kinds(&trace)
        .iter()
        .any(|k| matches!(k, EventKind::BatchApplied { .. })));
}

#[test]
fn breaking_an_earlier_meeting_rolls_the_round_back() {
    let sc = three_free(3, vec![meeting(0, &[0, 1], 0), meeting(1, &[0, 2], 1)]);
    let mover = Scripted::at(0).decide(|r| {
        Ok(if r.round == 0 {
            Decision::with(vec![sched(r.meeting.id, 0)])
        } else {
            Decision::with(vec![
                Action::reschedule(ItemId::Meeting(MeetingId(0)), 0, 2, "make room"),
                sched(r.meeting.id, 0),
            ])
        })
    });
    let trace = play(
        &sc,
        vec![mover, Scripted::at(0), Scripted::at(0)],
        &EngineConfig::default(),
    );
    let r = resolutions(&trace);
    assert_eq!(r[0], (true, Some(0), None));
    assert!(!r[1].0);
    assert_eq!(
        r[1].2.as_deref(),
        Some("decision batches would break previously scheduled meetings: M0")
    );
    assert_eq!(
        trace.final_state.calendars[0].find_meeting(MeetingId(0)),
        Some(0)
    );
    assert_eq!(
        trace.final_state.calendars[0].find_meeting(MeetingId(1)),
        None
    );
    assert_eq!(trace.final_state.calendars[2], sc.calendars[2]);
}

#[test]
fn agent_errors_count_as_silence() {
    let sc = three_free(3, vec![meeting(0, &[0, 1], 0)]);
    let broken = Scripted::at(0)
        .talk(|_| Err(AgentError("timeout".into())))
        .decide(|_| Err(AgentError("timeout".into())))
        .retry(|_| Err(AgentError("timeout".into())));
    let trace = play(
        &sc,
        vec![broken, Scripted::at(0), Scripted::at(0)],
        &EngineConfig::default(),
    );
    assert!(kinds(&trace)
        .iter()
        .any(|k| matches!(k, EventKind::TurnEnd { error: Some(e), .. } if e == "timeout")));
    assert!(kinds(&trace).iter().any(|k| matches!(
        k,
        EventKind::DecideEnd {
            phase: Phase::Decision,
            error: Some(_),
            ..
        }
    )));
    assert!(!resolutions(&trace)[0].0);
}

#[test]
fn wrong_seat_count_is_refused() {
    let sc = three_free(3, vec![meeting(0, &[0, 1], 0)]);
    let default = EngineConfig::default();
    let mut agents: Vec<Box<dyn Agent>> = vec![Box::new(Scripted::at(0))];
    let err = run_game(&sc, &mut agents, &default, &fixed()).unwrap_err();
    assert!(matches!(
        err,
        EngineError::AgentCount {
            expected: 3,
            got: 1
        }
    ));
    let config = EngineConfig {
        max_turns_per_round: 0,
        ..EngineConfig::default()
    };
    let mut agents: Vec<Box<dyn Agent>> = (0..3)
        .map(|_| Box::new(Scripted::at(0)) as Box<dyn Agent>)
        .collect();
    assert!(matches!(
        run_game(&sc, &mut agents, &config, &fixed()),
        Err(EngineError::InvalidConfig(_))
    ));
}

#[test]
fn reruns_replay_identically() {
    let sc = three_free(4, vec![meeting(0, &[0, 1], 0), meeting(1, &[1, 2], 1)]);
    let seats = || {
        vec![
            Scripted::at(2).talk(|r| {
                Ok(say(if r.turn < 2 {
                    vec![OutboundMessage::dm(1, "2?")]
                } else {
                    vec![]
                }))
            }),
            Scripted::at(2),
            Scripted::at(2),
        ]
    };
    let a = play(&sc, seats(), &EngineConfig::default());
    let b = play(&sc, seats(), &EngineConfig::default());
    let report = replay_check(&a, &b);
    assert!(report.ok(), "{report:?}");
    assert_eq!(report.first_divergence, None);
    assert_eq!(a.to_json(), b.to_json());
    let indices: Vec<u64> = a.events.iter().map(|e| e.event_index).collect();
    assert_eq!(indices, (0..a.events.len() as u64).collect::<Vec<_>>());
    assert!(matches!(a.events[0].kind, EventKind::GameStart { .. }));
    assert!(matches!(
        a.events.last().unwrap().kind,
        EventKind::Resolution { .. }
    ));
}
