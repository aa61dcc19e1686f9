mod common;

use std::path::Path;

use calsched::engine::{Clock, EngineConfig};
use calsched::protocols::{rerun_trace, run_protocol_game, ProtocolSpec};
use calsched::scenario::{generate_scenario, Density, Scenario, ScenarioParams};
use calsched::trace::{
    canonicalize, fold_final_state, list_traces, parse, read, replay_check, write, Event,
    EventKind, TraceConfig, TraceError, TraceFile, CANONICAL_TIMESTAMP,
};
use common::*;

const GOLDEN: &str = "tests/fixtures/golden_imap_seed7.json";

fn canonical(seed: u64) -> Scenario {
    let mut p = ScenarioParams::new(seed, 5, 5);
    p.density = Density::Shared(0.8);
    p.blocked_errand_count = 2;
    p.force_witness_errand = true;
    generate_scenario(&p).unwrap()
}

fn run(sc: &Scenario, name: &str, clock: Clock) -> TraceFile {
    let spec = ProtocolSpec::from_name(name).unwrap();
    run_protocol_game(sc, &spec, &EngineConfig::default(), clock).unwrap()
}

fn empty_trace() -> TraceFile {
    let sc = scenario(
        vec![cal(0, vec![free(); 2]), cal(1, vec![free(); 2])],
        vec![meeting(0, &[0, 1], 0)],
    );
    TraceFile::new(
        uuid::Uuid::nil(),
        TraceConfig {
            scenario: sc,
            engine: EngineConfig::default(),
            lineup: vec!["imap".into(); 2],
            metadata: Default::default(),
        },
        "t0".into(),
    )
}

#[test]
fn append_checks_indices_and_payloads() {
    let mut t = empty_trace();
    let kind = EventKind::RoundStart {
        round: 0,
        meeting: meeting(0, &[0, 1], 0),
        speaker_order: vec![0, 1],
    };
    assert_eq!(t.push("t".into(), kind.clone()).unwrap(), 0);
    let err = t
        .append(Event {
            event_index: 5,
            timestamp: "t".into(),
            kind: kind.clone(),
        })
        .unwrap_err();
    assert!(matches!(
        err,
        TraceError::OutOfOrder {
            expected: 1,
            got: 5
        }
    ));
    let bad = EventKind::BatchRejected {
        round: 0,
        phase: calsched::engine::Phase::Decision,
        agent: 0,
        attempt: 0,
        rule: Some(7),
        conflict: String::new(),
        actions: vec![],
    };
    assert!(matches!(
        t.push("t".into(), bad),
        Err(TraceError::Schema(_))
    ));
    let stranger = EventKind::DmSent {
        round: 0,
        turn: 0,
        from: 0,
        to: vec![9],
        channel: calsched::engine::Channel::Dm,
        meeting: calsched::domain::MeetingId(0),
        content: "x".into(),
        char_count: 1,
        activated: vec![],
    };
    assert!(matches!(
        t.push("t".into(), stranger),
        Err(TraceError::Schema(_))
    ));
    assert_eq!(t.next_index(), 1);
}

#[test]
fn round_start_records_the_speaker_order() {
    let trace = run(&canonical(1), "imap", Clock::Fixed("t".into()));
    let json: serde_json::Value = serde_json::from_str(&trace.to_json()).unwrap();
    let rs = json["events"]
        .as_array()
        .unwrap()
        .iter()
        .find(|e| e["type"] == "round_start")
        .unwrap();
    assert!(rs["speaker_order"].is_array());
    assert!(rs["meeting"]["participants"].is_array());
    assert_eq!(json["events"][0]["event_index"], 0);
    assert_eq!(json["events"][0]["type"], "game_start");
}

#[test]
fn write_read_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for name in ProtocolSpec::NAMES {
        let trace = run(&canonical(3), name, Clock::System);
        let path = dir.path().join(format!("{name}.json"));
        write(&trace, &path).unwrap();
        assert_eq!(read(&path).unwrap(), trace);
    }
    assert_eq!(list_traces(dir.path()).unwrap().len(), 4);
}

#[test]
fn truncated_file_reports_an_offset() {
    let trace = run(&canonical(3), "sd_map", Clock::Fixed("t".into()));
    let text = trace.to_json();
    let cut = &text[..text.len() / 2];
    match parse(cut, Path::new("cut.json")) {
        Err(TraceError::Parse { offset, line, .. }) => {
            assert!(offset > 0 && offset <= cut.len());
            assert!(line > 1);
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
    assert!(matches!(
        read(Path::new("/nonexistent/x.json")),
        Err(TraceError::Io { .. })
    ));
}

#[test]
fn golden_trace_is_byte_stable() {
    let trace = canonicalize(&run(
        &canonical(7),
        "imap",
        Clock::Fixed(CANONICAL_TIMESTAMP.into()),
    ));
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(GOLDEN);
    if std::env::var_os("CALSCHED_BLESS").is_some() {
        write(&trace, &path).unwrap();
    }
    let golden = std::fs::read_to_string(&path)
        .expect("golden fixture present; set CALSCHED_BLESS=1 to create it");
    assert_eq!(trace.to_json(), golden);
}

#[test]
fn replay_of_every_protocol_is_identical() {
    for name in ProtocolSpec::NAMES {
        let trace = run(&canonical(4), name, Clock::System);
        let rerun = rerun_trace(&trace, Clock::System).unwrap();
        let report = replay_check(&trace, &rerun);
        assert!(report.ok(), "{name}: {report:?}");
    }
}

#[test]
fn altered_seed_diverges() {
    let a = run(&canonical(4), "imap", Clock::System);
    let b = run(&canonical(5), "imap", Clock::System);
    let report = replay_check(&a, &b);
    assert!(!report.identical);
    assert_eq!(
        report.first_divergence,
        Some(0),
        "game_start carries the seed"
    );
}

#[test]
fn empty_game_replays() {
    let mut sc = canonical(2);
    sc.meetings.clear();
    let a = run(&sc, "dsm_private", Clock::System);
    let b = rerun_trace(&a, Clock::System).unwrap();
    assert!(replay_check(&a, &b).ok());
    assert_eq!(a.final_state.rounds_succeeded, 0);
    assert_eq!(a.metrics.success_rate, 1.0);
}

#[test]
fn final_state_is_a_fold_and_batches_follow_decisions() {
    for name in ProtocolSpec::NAMES {
        let trace = run(&canonical(6), name, Clock::Fixed("t".into()));
        assert_eq!(fold_final_state(&trace), trace.final_state);
        let mut last_decide_end: Option<(usize, usize)> = None;
        for e in &trace.events {
            match &e.kind {
                EventKind::DecideEnd { round, agent, .. } => {
                    last_decide_end = Some((*round, *agent))
                }
                EventKind::BatchApplied { round, phase, .. } => {
                    assert!(
                        last_decide_end.is_some_and(|(r, _)| r == *round),
                        "{name}: {phase:?}"
                    );
                }
                EventKind::BatchRejected { conflict, .. } => assert!(!conflict.is_empty()),
                _ => {}
            }
        }
        let indices: Vec<u64> = trace.events.iter().map(|e| e.event_index).collect();
        assert!(indices.windows(2).all(|w| w[1] == w[0] + 1));
    }
}

#[test]
fn tampered_trace_fails_the_fold_check() {
    let mut trace = run(&canonical(6), "imap", Clock::Fixed("t".into()));
    let copy = trace.clone();
    trace.final_state.total_cost += 1;
    assert!(!replay_check(&trace, &copy).final_state_consistent);
}

#[test]
fn schema_document_lists_every_event_type() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/trace.schema.json");
    let schema: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let documented: std::collections::BTreeSet<&str> = schema["properties"]["events"]["items"]
        ["oneOf"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["properties"]["type"]["const"].as_str().unwrap())
        .collect();
    assert_eq!(documented.len(), 11);
    for name in ProtocolSpec::NAMES {
        let trace = run(&canonical(8), name, Clock::System);
        for e in &trace.events {
            assert!(
                documented.contains(e.kind.type_name()),
                "{}",
                e.kind.type_name()
            );
        }
        let json: serde_json::Value = serde_json::from_str(&trace.to_json()).unwrap();
        let top: std::collections::BTreeSet<&str> = json
            .as_object()
            .unwrap()
            .keys()
            .map(String::as_str)
            .collect();
        let required: std::collections::BTreeSet<&str> = schema["required"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_str().unwrap())
            .collect();
        assert_eq!(top, required);
    }
}
