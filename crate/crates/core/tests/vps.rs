mod common;

use std::collections::BTreeMap;

use calsched::domain::MeetingId;
use calsched::engine::{Clock, EngineConfig};
use calsched::protocols::{
    run_protocol_game, DsmMessage, ImapMessage, Plan, PlanScore, ProtocolSpec, SdMessage,
    TypedMessage,
};
use calsched::scenario::{generate_scenario, Density, Scenario, ScenarioParams};
use calsched::trace::{EventKind, TraceFile};
use calsched::vps::{
    analyze_trace, apply_update, round_vps, typed_message_to_updates, Evidence, ReplayContext,
    VpsConfig, VpsTables,
};
use common::*;
use proptest::prelude::*;

const M: MeetingId = MeetingId(0);

fn run(sc: &Scenario, name: &str) -> TraceFile {
    let spec = ProtocolSpec::from_name(name).unwrap();
    run_protocol_game(
        sc,
        &spec,
        &EngineConfig::default(),
        Clock::Fixed("t".into()),
    )
    .unwrap()
}

fn canonical(seed: u64) -> Scenario {
    let mut p = ScenarioParams::new(seed, 5, 5);
    p.density = Density::Shared(0.6);
    p.blocked_errand_count = 2;
    p.force_witness_errand = true;
    generate_scenario(&p).unwrap()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-9
}

#[test]
fn update_examples() {
    let ev = |e, a| Evidence {
        slot: 2,
        evidence: e,
        strength: a,
        source: "test",
    };
    let mut b = vec![0.5; 4];
    assert_eq!(
        apply_update(&mut b, ev(1.0, 1.0)).unwrap().belief_after,
        1.0
    );
    let mut b = vec![0.5; 4];
    let u = apply_update(&mut b, ev(0.85, 0.70)).unwrap();
    assert!(close(u.belief_after, 0.5 * 0.3 + 0.85 * 0.7));
    assert!(close(u.belief_after, 0.745));
    assert_eq!(b[0], 0.5);
    assert_eq!(b[3], 0.5);
    let mut b = vec![0.5; 4];
    apply_update(&mut b, ev(1.0, 0.0));
    assert_eq!(b, vec![0.5; 4]);
}

#[test]
fn round_vps_examples() {
    assert_eq!(round_vps(&[0.5; 16], 0.5), 0.0);
    let mut b = vec![0.5; 16];
    b[9] = 1.0;
    assert_eq!(round_vps(&b, 0.5), 0.5);
    assert_eq!(round_vps(&[0.0; 16], 0.5), 8.0);
}

#[test]
fn dsm_score_six_maps_to_six_elevenths() {
    let mut ctx = ReplayContext::default();
    let proposals = TypedMessage::Dsm(DsmMessage::Proposals {
        meeting: M,
        sub_round: 0,
        plans: vec![
            Plan {
                plan_id: 4,
                slot: 9,
                displace: None,
            },
            Plan {
                plan_id: 5,
                slot: 2,
                displace: None,
            },
        ],
    });
    let p = typed_message_to_updates(&proposals, &mut ctx, 0, 0, 1);
    assert_eq!(
        p.iter()
            .map(|e| (e.slot, e.evidence, e.strength))
            .collect::<Vec<_>>(),
        vec![(9, 1.0, 1.0), (2, 1.0, 1.0)]
    );
    let scores = TypedMessage::Dsm(DsmMessage::Scores {
        meeting: M,
        sub_round: 0,
        scores: vec![
            PlanScore {
                plan_id: 4,
                score: 6,
            },
            PlanScore {
                plan_id: 5,
                score: 0,
            },
            PlanScore {
                plan_id: 77,
                score: 3,
            },
        ],
    });
    let s = typed_message_to_updates(&scores, &mut ctx, 0, 1, 0);
    assert_eq!(s.len(), 2, "unknown plan ids give no update");
    assert_eq!(s[0].slot, 9);
    assert!(close(s[0].evidence, 6.0 / 11.0));
    assert_eq!((s[1].slot, s[1].evidence), (2, 0.0));
    // A third agent never saw the plan map.
    assert!(typed_message_to_updates(&scores, &mut ctx, 0, 2, 0).is_empty());
}

#[test]
fn imap_costs_are_bounded_by_the_request() {
    let mut ctx = ReplayContext::default();
    let req = TypedMessage::Imap(ImapMessage::CostRequest {
        meeting: M,
        slots: (0..8).collect(),
    });
    assert!(typed_message_to_updates(&req, &mut ctx, 0, 0, 1).is_empty());
    let mut costs = vec![Some(0); 8];
    costs[7] = None;
    costs.extend([Some(1), Some(2)]);
    let reply = TypedMessage::Imap(ImapMessage::Costs { meeting: M, costs });
    let u = typed_message_to_updates(&reply, &mut ctx, 0, 1, 0);
    assert_eq!(u.len(), 8);
    assert_eq!((u[7].slot, u[7].evidence), (7, 0.0));
    assert!(u[..7]
        .iter()
        .all(|e| e.evidence == 1.0 && e.strength == 1.0));
    // Costs nobody asked for say nothing.
    let stray = TypedMessage::Imap(ImapMessage::Costs {
        meeting: M,
        costs: vec![Some(0)],
    });
    assert!(typed_message_to_updates(&stray, &mut ctx, 1, 1, 0).is_empty());
}

#[test]
fn sd_propose_is_a_soft_update() {
    let mut ctx = ReplayContext::default();
    let u = typed_message_to_updates(
        &TypedMessage::Sd(SdMessage::Propose {
            meeting: M,
            slot: 4,
        }),
        &mut ctx,
        0,
        0,
        1,
    );
    assert_eq!(u.len(), 1);
    assert_eq!((u[0].slot, u[0].evidence, u[0].strength), (4, 0.85, 0.70));
    let confirm = TypedMessage::Sd(SdMessage::Confirm {
        meeting: M,
        slot: 4,
    });
    assert!(typed_message_to_updates(&confirm, &mut ctx, 0, 0, 1).is_empty());
}

fn imap_pair() -> TraceFile {
    let sc = scenario(
        vec![cal(0, vec![free(); 16]), cal(1, vec![free(); 16])],
        vec![meeting(0, &[0, 1], 0)],
    );
    run(&sc, "imap")
}

#[test]
fn one_imap_meeting_resolves_every_slot() {
    let game = analyze_trace(&imap_pair(), "imap.json", &VpsConfig::default());
    let pair = |t, o| {
        game.pairs
            .iter()
            .find(|p| p.target_agent == t && p.observer_agent == o)
            .unwrap()
    };
    assert!(close(pair(1, 0).vps_loss, 8.0));
    assert!(close(pair(1, 0).vps_loss_per_slot, 0.5));
    assert!(
        close(pair(0, 1).vps_loss, 0.5),
        "the decision reveals one slot"
    );
    assert_eq!(pair(1, 0).observations, 16);
    let targets: Vec<(f64, f64)> = game
        .targets
        .iter()
        .map(|t| (t.vps_loss_total, t.excess_vps_loss_total))
        .collect();
    assert!(close(targets[0].0, 0.5) && targets[0].1 == 0.0);
    assert!(close(targets[1].0, 8.0) && close(targets[1].1, 3.0));
    let summary = game.summary.unwrap();
    assert!(close(summary.vps_loss_total, 8.5));
    assert!(close(summary.participant_pair_vps_loss_total, 8.5));
    assert_eq!(summary.unparsed_messages, 0);
}

#[test]
fn floor_clamps_small_totals_to_zero() {
    let config = VpsConfig {
        prior: 0.5,
        floor: 5.0,
    };
    let mut trace = imap_pair();
    // Truncate the reply to 8 entries so the responder leaks 4 slot-equivalents.
    for e in &mut trace.events {
        if let EventKind::DmSent { content, .. } = &mut e.kind {
            if let Some(TypedMessage::Imap(ImapMessage::Costs { meeting, .. })) =
                TypedMessage::parse(content)
            {
                let costs = vec![Some(0); 8];
                *content = TypedMessage::Imap(ImapMessage::Costs { meeting, costs }).to_content();
            }
        }
    }
    let game = analyze_trace(&trace, "x", &config);
    let t1 = &game.targets[1];
    assert!(close(t1.vps_loss_total, 4.0));
    assert_eq!(t1.excess_vps_loss_total, 0.0);
}

#[test]
fn silent_trace_has_zero_loss_everywhere() {
    let mut trace = run(&canonical(1), "imap");
    trace
        .events
        .retain(|e| !matches!(e.kind, EventKind::DmSent { .. }));
    let game = analyze_trace(&trace, "silent", &VpsConfig::default());
    assert!(game.evidence.is_empty());
    assert_eq!(game.pairs.len(), 5 * 5 * 4);
    assert!(game
        .pairs
        .iter()
        .all(|p| p.vps_loss == 0.0 && p.observations == 0));
    assert!(game.targets.iter().all(|t| t.vps_loss_total == 0.0));
}

#[test]
fn free_text_is_counted_but_ignored() {
    let mut trace = imap_pair();
    for e in &mut trace.events {
        if let EventKind::DmSent { content, .. } = &mut e.kind {
            *content = "I'm free all morning".into();
        }
    }
    let game = analyze_trace(&trace, "x", &VpsConfig::default());
    assert_eq!(game.summary.unwrap().unparsed_messages, 3);
    assert!(game.evidence.is_empty());
}

#[test]
fn evidence_rows_rebuild_pair_values() {
    for name in ProtocolSpec::NAMES {
        for seed in 0..3 {
            let trace = run(&canonical(seed), name);
            let game = analyze_trace(&trace, "t", &VpsConfig::default());
            let mut last: BTreeMap<(usize, usize, usize), BTreeMap<usize, f64>> = BTreeMap::new();
            for row in &game.evidence {
                last.entry((row.round, row.target_agent, row.observer_agent))
                    .or_default()
                    .insert(row.slot, row.belief_after);
                assert!((0.0..=1.0).contains(&row.belief_after));
            }
            for p in &game.pairs {
                let rebuilt: f64 = last
                    .get(&(p.round, p.target_agent, p.observer_agent))
                    .map_or(0.0, |m| m.values().map(|b| (b - 0.5).abs()).sum());
                assert!(close(rebuilt, p.vps_loss), "{name} seed {seed}: {p:?}");
                assert!(p.vps_loss >= 0.0 && p.vps_loss <= 8.0);
            }
            let per_target: f64 = game.targets.iter().map(|t| t.vps_loss_total).sum();
            assert!(close(
                per_target,
                game.summary.as_ref().unwrap().vps_loss_total
            ));
        }
    }
}

#[test]
fn csv_output_is_deterministic() {
    let traces: Vec<TraceFile> = ProtocolSpec::NAMES
        .iter()
        .map(|n| run(&canonical(2), n))
        .collect();
    let write = || {
        let dir = tempfile::tempdir().unwrap();
        let mut tables = VpsTables::default();
        for (i, t) in traces.iter().enumerate() {
            tables.push(analyze_trace(
                t,
                &format!("traces/{i}.json"),
                &VpsConfig::default(),
            ));
        }
        tables.write_csvs(dir.path()).unwrap();
        let mut files = BTreeMap::new();
        for name in [
            "belief_evidence",
            "pair_round_vps",
            "game_summary",
            "game_target_summary",
        ] {
            files.insert(
                name,
                std::fs::read(dir.path().join(format!("{name}.csv"))).unwrap(),
            );
        }
        files
    };
    let a = write();
    assert_eq!(a, write());
    let header = String::from_utf8(a["belief_evidence"].clone()).unwrap();
    assert!(header.starts_with(
        "trace_path,game_id,event_index,round,target_agent,observer_agent,slot,source,evidence,strength,belief_before,belief_after\n"
    ));
}

#[test]
fn empty_tables_still_have_headers() {
    let dir = tempfile::tempdir().unwrap();
    VpsTables::default().write_csvs(dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("game_target_summary.csv")).unwrap();
    assert_eq!(
        text,
        "trace_path,game_id,target_agent,vps_loss_total,excess_vps_loss_total,participant_pair_vps_loss_total,floor\n"
    );
}

proptest! {
    #[test]
    fn beliefs_stay_in_the_unit_interval(
        prior in 0.0f64..=1.0,
        updates in proptest::collection::vec((0usize..16, 0.0f64..=1.0, 0.0f64..=1.0), 0..64),
    ) {
        let mut b = vec![prior; 16];
        for (slot, e, a) in updates {
            let before = b.clone();
            apply_update(&mut b, Evidence { slot, evidence: e, strength: a, source: "p" });
            prop_assert!(b.iter().all(|x| (0.0..=1.0).contains(x)));
            for k in (0..16).filter(|&k| k != slot) {
                prop_assert_eq!(b[k], before[k]);
            }
        }
        let v = round_vps(&b, 0.5);
        prop_assert!((0.0..=8.0 + 1e-12).contains(&v));
    }
}
