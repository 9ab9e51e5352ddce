use super::*;
use proptest::prelude::*;

fn cid(id: u8) -> ClassId {
    ClassId::new(id).unwrap()
}

fn volumes(n: usize) -> Vec<VolumeEntry> {
    (0..n).map(|i| VolumeEntry { id: format!("v{i:02}"), dims: [2, 2, 2] }).collect()
}

fn campaign(n: usize, classes: &[u8], fraction: f64) -> Campaign {
    let config = CampaignConfig { fraction, ..CampaignConfig::default() };
    Campaign::create("c1", config, volumes(n), classes.iter().map(|&c| cid(c)).collect(), "M0", Clock::Logical)
        .unwrap()
}

/// Size of volume `vi` for every class: higher index, higher size.
fn sizes_for(c: &Campaign) -> Vec<SizeRecord> {
    let mut out = Vec::new();
    for (i, v) in c.state().volumes.keys().enumerate() {
        for &class in &c.state().classes {
            out.push(SizeRecord { volume: v.clone(), class, size: i as f64 });
        }
    }
    out
}

fn mask(value: u8) -> VoxelGrid {
    VoxelGrid::from_u8([2, 2, 2], [1.0; 3], vec![value; 8]).unwrap()
}

fn rec(volume: &str, class: u8, iteration: u32, verdict: Verdict) -> RevisionRecord {
    RevisionRecord {
        volume: volume.into(),
        class: cid(class),
        iteration,
        annotator: "jr1".into(),
        verdict,
        mask_ref: (verdict == Verdict::Revised).then(|| format!("masks/{volume}_{class}.nii")),
        timestamp: 0,
    }
}

fn revise(c: &mut Campaign, volume: &str, class: u8, verdict: Verdict) -> Result<RevisionRecord> {
    let it = c.state().iteration;
    let m = mask(1);
    c.record_revision(rec(volume, class, it, verdict), (verdict == Verdict::Revised).then_some(&m))
}

#[test]
fn create_sets_all_pairs_unrevised() {
    let c = campaign(10, &[7, 11, 19], 0.05);
    assert_eq!(c.state().iteration, 0);
    assert_eq!(c.state().status_counts(), BTreeMap::from([(PairStatus::Unrevised, 30)]));
    assert_eq!(c.events().len(), 1);
    assert_eq!(c.events()[0].seq, 0);
}

#[test]
fn create_errors() {
    let cfg = CampaignConfig::default;
    let classes = vec![cid(7)];
    assert_eq!(
        Campaign::create("c", cfg(), vec![], classes.clone(), "M0", Clock::Logical).unwrap_err(),
        CampaignError::EmptyManifest
    );
    let mut dup = volumes(2);
    dup[1].id = dup[0].id.clone();
    assert!(matches!(
        Campaign::create("c", cfg(), dup, classes.clone(), "M0", Clock::Logical),
        Err(CampaignError::BadConfig(_))
    ));
    let bad = CampaignConfig { fraction: 0.0, ..cfg() };
    assert!(matches!(
        Campaign::create("c", bad, volumes(2), classes.clone(), "M0", Clock::Logical),
        Err(CampaignError::BadConfig(_))
    ));
    let bad = CampaignConfig { stop_ratio: 1.5, ..cfg() };
    assert!(matches!(
        Campaign::create("c", bad, volumes(2), classes, "M0", Clock::Logical),
        Err(CampaignError::BadConfig(_))
    ));
}

#[test]
fn genesis_replay_is_identity() {
    let c = campaign(10, &[7, 11], 0.05);
    let r = Campaign::replay(c.events().to_vec(), Clock::Logical).unwrap();
    assert_eq!(r.snapshot_json(), c.snapshot_json());
}

#[test]
fn event_line_shape() {
    let c = campaign(1, &[7], 0.05);
    let line = serde_json::to_value(&c.events()[0]).unwrap();
    let keys: Vec<_> = line.as_object().unwrap().keys().cloned().collect();
    assert_eq!(keys, ["kind", "payload", "seq", "ts"]);
    assert_eq!(line["kind"], "genesis");
    let back: Event = serde_json::from_value(line).unwrap();
    assert_eq!(back, c.events()[0]);
}

#[test]
fn pool_of_twenty_selects_one_per_class() {
    let mut c = campaign(20, &[7, 11], 0.05);
    let sel = c.open_iteration_with_sizes(&sizes_for(&c)).unwrap();
    assert_eq!(sel[&cid(7)].selected, ["v19"]);
    assert_eq!(sel[&cid(11)].selected, ["v19"]);
    assert_eq!(c.state().pair("v19", cid(7)).unwrap().status, PairStatus::Selected);
    assert_eq!(c.state().pair("v18", cid(7)).unwrap().status, PairStatus::Unrevised);
}

#[test]
fn open_twice_is_rejected() {
    let mut c = campaign(4, &[7], 0.05);
    c.open_iteration_with_sizes(&sizes_for(&c)).unwrap();
    assert_eq!(c.open_iteration_with_sizes(&sizes_for(&c)).unwrap_err(), CampaignError::IterationAlreadyOpen(0));
}

#[test]
fn open_requires_every_pool_pair() {
    let mut c = campaign(3, &[7, 11], 0.05);
    let mut sizes = sizes_for(&c);
    sizes.retain(|r| !(r.volume == "v01" && r.class == cid(11)));
    assert_eq!(
        c.open_iteration_with_sizes(&sizes).unwrap_err(),
        CampaignError::MissingPredictions { volume: "v01".into(), class: Some(cid(11)) }
    );
    assert_eq!(c.events().len(), 1);
}

#[test]
fn open_from_predictions_ranks_by_attention() {
    let mut c = campaign(3, &[7], 0.05);
    let confident = |id: &str| {
        EnsemblePrediction::from_probabilities(
            id,
            [2, 2, 2],
            [1.0; 3],
            vec![cid(7)],
            vec!["a".into(), "b".into()],
            vec![vec![vec![1.0; 8]], vec![vec![1.0; 8]]],
        )
        .unwrap()
    };
    let unsure = EnsemblePrediction::from_probabilities(
        "v01",
        [2, 2, 2],
        [1.0; 3],
        vec![cid(7)],
        vec!["a".into(), "b".into()],
        vec![vec![vec![0.9; 8]], vec![vec![0.1; 8]]],
    )
    .unwrap();
    let preds = vec![confident("v00"), unsure, confident("v02")];
    let sel = c.open_iteration(&preds).unwrap();
    assert_eq!(sel[&cid(7)].selected, ["v01"]);
    let list = &c.state().open.as_ref().unwrap().priority[&cid(7)];
    assert_eq!(list.entries[1].size, 0.0);
    assert_eq!(list.entries[1].volume, "v00");

    let mut c = campaign(3, &[7], 0.05);
    assert_eq!(
        c.open_iteration(&preds[..2]).unwrap_err(),
        CampaignError::MissingPredictions { volume: "v02".into(), class: None }
    );
}

#[test]
fn revision_transitions_and_errors() {
    let mut c = campaign(20, &[7], 0.1);
    c.open_iteration_with_sizes(&sizes_for(&c)).unwrap();
    // v19 and v18 are selected
    assert_eq!(
        revise(&mut c, "v00", 7, Verdict::NoChange).unwrap_err(),
        CampaignError::NotSelected { volume: "v00".into(), class: cid(7) }
    );
    let out = revise(&mut c, "v19", 7, Verdict::NoChange).unwrap();
    assert_eq!(out.timestamp, c.events().last().unwrap().ts);
    assert_eq!(c.state().pair("v19", cid(7)).unwrap().status, PairStatus::AcceptedNoChange);
    assert_eq!(
        revise(&mut c, "v19", 7, Verdict::NoChange).unwrap_err(),
        CampaignError::DuplicateRevision { volume: "v19".into(), class: cid(7) }
    );

    let wrong = VoxelGrid::from_u8([2, 2, 1], [1.0; 3], vec![1; 4]).unwrap();
    assert_eq!(
        c.record_revision(rec("v18", 7, 0, Verdict::Revised), Some(&wrong)).unwrap_err(),
        CampaignError::DimMismatch { expected: [2, 2, 2], actual: [2, 2, 1] }
    );
    assert_eq!(c.record_revision(rec("v18", 7, 0, Verdict::Revised), None).unwrap_err(), CampaignError::MaskRequired);
    assert_eq!(
        c.record_revision(rec("v18", 7, 0, Verdict::Revised), Some(&mask(2))).unwrap_err(),
        CampaignError::NonBinaryMask
    );
    assert_eq!(
        c.record_revision(rec("v18", 7, 0, Verdict::NoChange), Some(&mask(1))).unwrap_err(),
        CampaignError::UnexpectedMask
    );
    assert_eq!(
        c.record_revision(rec("v18", 7, 3, Verdict::NoChange), None).unwrap_err(),
        CampaignError::WrongIteration { open: 0, got: 3 }
    );
    revise(&mut c, "v18", 7, Verdict::Revised).unwrap();
    assert_eq!(c.state().pair("v18", cid(7)).unwrap().status, PairStatus::Revised);
}

#[test]
fn revision_without_open_iteration() {
    let mut c = campaign(2, &[7], 0.05);
    assert_eq!(revise(&mut c, "v00", 7, Verdict::NoChange).unwrap_err(), CampaignError::NoOpenIteration);
}

#[test]
fn manifest_lists_only_revised_pairs() {
    let mut c = campaign(100, &[7], 0.05);
    c.open_iteration_with_sizes(&sizes_for(&c)).unwrap();
    let selected = c.state().open.as_ref().unwrap().selections[&cid(7)].selected.clone();
    assert_eq!(selected.len(), 5);
    for (i, v) in selected.iter().enumerate() {
        revise(&mut c, v, 7, if i < 3 { Verdict::Revised } else { Verdict::NoChange }).unwrap();
    }
    let m = c.export_finetune_manifest().unwrap();
    assert_eq!(m.entries.len(), 3);
    assert_eq!(m.model_tag, "M0");
    let revised: Vec<_> = selected[..3].iter().cloned().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    assert_eq!(m.entries.iter().map(|e| e.volume.clone()).collect::<Vec<_>>(), revised);
    assert!(m.entries.iter().all(|e| e.mask_path.starts_with("masks/")));
    let n = c.events().len();
    assert_eq!(c.export_finetune_manifest().unwrap(), m);
    assert_eq!(c.events().len(), n, "re-export appends nothing");
}

#[test]
fn manifest_requires_resolution_and_may_be_empty() {
    let mut c = campaign(20, &[7, 11], 0.05);
    c.open_iteration_with_sizes(&sizes_for(&c)).unwrap();
    match c.export_finetune_manifest().unwrap_err() {
        CampaignError::IterationIncomplete { unresolved } => assert_eq!(unresolved.len(), 2),
        e => panic!("{e}"),
    }
    revise(&mut c, "v19", 7, Verdict::NoChange).unwrap();
    revise(&mut c, "v19", 11, Verdict::NoChange).unwrap();
    assert!(c.export_finetune_manifest().unwrap().entries.is_empty());
}

#[test]
fn manifest_scopes() {
    let mut c = campaign(20, &[7], 0.05);
    for it in 0..2 {
        c.open_iteration_with_sizes(&sizes_for(&c)).unwrap();
        let v = c.state().open.as_ref().unwrap().selections[&cid(7)].selected[0].clone();
        revise(&mut c, &v, 7, Verdict::Revised).unwrap();
        if it == 1 {
            let mut current = c.clone();
            let m = current.export_finetune_manifest_with(ManifestScope::CurrentIteration).unwrap();
            assert_eq!(m.entries.len(), 1);
            assert_eq!(m.entries[0].iteration, 1);
        }
        let m = c.export_finetune_manifest().unwrap();
        assert_eq!(m.scope, ManifestScope::Cumulative);
        assert_eq!(m.entries.len(), it + 1);
        c.advance_iteration(format!("M{}", it + 1)).unwrap();
    }
}

#[test]
fn advance_requires_export() {
    let mut c = campaign(20, &[7], 0.05);
    assert_eq!(c.advance_iteration("M1").unwrap_err(), CampaignError::NoOpenIteration);
    c.open_iteration_with_sizes(&sizes_for(&c)).unwrap();
    revise(&mut c, "v19", 7, Verdict::Revised).unwrap();
    assert_eq!(c.advance_iteration("M1").unwrap_err(), CampaignError::ManifestNotExported(0));
    c.export_finetune_manifest().unwrap();
    let s = c.advance_iteration("M1").unwrap();
    assert_eq!(s.iteration, 1);
    assert_eq!(s.model_tag, "M1");
    assert_eq!(s.model_lineage, ["M0", "M1"]);
    assert!(s.open.is_none());
    let r = Campaign::replay(c.events().to_vec(), Clock::Logical).unwrap();
    assert_eq!(r.snapshot_json(), c.snapshot_json());
}

fn run_iteration(c: &mut Campaign, verdicts: &[Verdict]) -> StopDecision {
    c.open_iteration_with_sizes(&sizes_for(c)).unwrap();
    let pairs = c.state().unresolved();
    assert_eq!(pairs.len(), verdicts.len());
    for (p, v) in pairs.iter().zip(verdicts) {
        revise(c, &p.volume, p.class.get(), *v).unwrap();
    }
    c.export_finetune_manifest().unwrap();
    let tag = format!("M{}", c.state().iteration + 1);
    c.advance_iteration(tag).unwrap();
    c.check_stop().unwrap()
}

#[test]
fn stop_rule() {
    use Verdict::*;
    let mut c = campaign(100, &[7], 0.05);
    assert_eq!(run_iteration(&mut c, &[Revised, NoChange, NoChange, NoChange, NoChange]), StopDecision::Continue);
    assert_eq!(
        run_iteration(&mut c, &[NoChange; 5]),
        StopDecision::Stop(StopReason::NoFurtherRevisions)
    );
    assert_eq!(c.state().stopped, Some(StopReason::NoFurtherRevisions));
    assert!(matches!(c.open_iteration_with_sizes(&[]), Err(CampaignError::CampaignStopped(_))));
}

#[test]
fn stop_ratio_below_one() {
    use Verdict::*;
    let config = CampaignConfig { stop_ratio: 0.8, ..CampaignConfig::default() };
    let mut c = Campaign::create("c", config, volumes(100), vec![cid(7)], "M0", Clock::Logical).unwrap();
    assert_eq!(
        run_iteration(&mut c, &[Revised, NoChange, NoChange, NoChange, NoChange]),
        StopDecision::Stop(StopReason::NoFurtherRevisions)
    );
}

#[test]
fn empty_pool_stops() {
    let mut c = campaign(2, &[7], 1.0);
    assert_eq!(run_iteration(&mut c, &[Verdict::Revised, Verdict::Revised]), StopDecision::Stop(StopReason::PoolEmpty));
}

#[test]
fn iteration_cap_stops() {
    let config = CampaignConfig { max_iterations: 2, ..CampaignConfig::default() };
    let mut c = Campaign::create("c", config, volumes(100), vec![cid(7)], "M0", Clock::Logical).unwrap();
    let verdicts = [Verdict::Revised; 5];
    assert_eq!(run_iteration(&mut c, &verdicts), StopDecision::Continue);
    assert_eq!(run_iteration(&mut c, &verdicts), StopDecision::Stop(StopReason::IterationCap));
}

#[test]
fn check_stop_while_open() {
    let mut c = campaign(4, &[7], 0.05);
    c.open_iteration_with_sizes(&sizes_for(&c)).unwrap();
    assert_eq!(c.check_stop().unwrap_err(), CampaignError::IterationStillOpen(0));
    assert_eq!(c.stop_decision(), StopDecision::Continue);
}

#[test]
fn signoff_approve_and_reopen() {
    let mut c = campaign(20, &[7, 11], 0.05);
    let approve = SignOff {
        reviewer: "sr1".into(),
        scope: SignOffScope::Campaign,
        decision: SignOffDecision::Approve,
        note: String::new(),
    };
    assert_eq!(c.final_signoff(approve.clone()).unwrap_err(), CampaignError::CampaignNotStopped);
    assert_eq!(run_iteration(&mut c, &[Verdict::NoChange; 2]), StopDecision::Stop(StopReason::NoFurtherRevisions));

    let mut reopened = c.clone();
    reopened
        .final_signoff(SignOff {
            reviewer: "sr1".into(),
            scope: SignOffScope::Volumes(vec!["v19".into(), "v03".into()]),
            decision: SignOffDecision::Reopen,
            note: "boundary issue".into(),
        })
        .unwrap();
    let s = reopened.state();
    assert_eq!(s.stopped, None);
    for v in ["v19", "v03"] {
        for class in [7, 11] {
            assert_eq!(s.pair(v, cid(class)).unwrap().status, PairStatus::Unrevised);
        }
    }
    assert_eq!(reopened.check_stop().unwrap(), StopDecision::Continue);
    reopened.open_iteration_with_sizes(&sizes_for(&reopened)).unwrap();

    c.final_signoff(approve).unwrap();
    assert_eq!(c.state().status_counts(), BTreeMap::from([(PairStatus::SignedOff, 40)]));
    assert!(matches!(
        c.final_signoff(SignOff {
            reviewer: "sr1".into(),
            scope: SignOffScope::Volumes(vec!["nope".into()]),
            decision: SignOffDecision::Approve,
            note: String::new(),
        }),
        Err(CampaignError::UnknownVolume(_))
    ));
}

#[test]
fn fully_accepted_campaign_opens_empty() {
    let mut c = campaign(1, &[7], 1.0);
    run_iteration(&mut c, &[Verdict::NoChange]);
    assert_eq!(c.state().stopped, Some(StopReason::NoFurtherRevisions));
    // pool empty as well, so a fresh evaluation on the same state also stops
    assert_eq!(c.state().pool_size(), 0);
}

#[test]
fn replay_rejects_broken_logs() {
    let mut c = campaign(4, &[7], 0.05);
    c.open_iteration_with_sizes(&sizes_for(&c)).unwrap();
    let mut events = c.events().to_vec();
    events[1].seq = 5;
    assert!(matches!(Campaign::replay(events, Clock::Logical), Err(CampaignError::Replay(_))));
    assert!(matches!(Campaign::replay(c.events()[1..].to_vec(), Clock::Logical), Err(CampaignError::Replay(_))));
    assert!(matches!(Campaign::replay(vec![], Clock::Logical), Err(CampaignError::Replay(_))));
}

#[test]
fn store_round_trip_with_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("c.jsonl");
    let mut store = CampaignStore::create(&log, campaign(20, &[7], 0.1)).unwrap().with_snapshot_every(2);
    store.apply(|c| c.open_iteration_with_sizes(&sizes_for(c))).unwrap();
    store.apply(|c| revise(c, "v19", 7, Verdict::NoChange)).unwrap();
    let err = store.apply(|c| revise(c, "v00", 7, Verdict::NoChange)).unwrap_err();
    assert!(matches!(err, StoreError::Campaign(CampaignError::NotSelected { .. })));
    store.apply(|c| revise(c, "v18", 7, Verdict::Revised)).unwrap();
    assert!(CampaignStore::snapshot_path(&log).exists());
    let live = store.campaign().snapshot_json();

    let reopened = CampaignStore::open(&log, Clock::Logical).unwrap();
    assert_eq!(reopened.campaign().snapshot_json(), live);
    let from_log = Campaign::replay(read_events(&log).unwrap(), Clock::Logical).unwrap();
    assert_eq!(from_log.snapshot_json(), live);
    assert!(matches!(CampaignStore::create(&log, campaign(1, &[7], 0.1)), Err(StoreError::AlreadyExists(_))));
}

#[derive(Debug, Clone)]
enum Step {
    Open,
    Verdict(bool),
    Finish,
    Reopen(usize),
    Approve,
}

fn arb_step() -> impl Strategy<Value = Step> {
    prop_oneof![
        3 => Just(Step::Open),
        6 => any::<bool>().prop_map(Step::Verdict),
        3 => Just(Step::Finish),
        1 => (0usize..8).prop_map(Step::Reopen),
        1 => Just(Step::Approve),
    ]
}

/// Drive a campaign through random operations; errors are part of the trace.
fn drive(steps: &[Step], seed_sizes: &[f64]) -> Campaign {
    let mut c = campaign(8, &[7, 11], 0.2);
    for (k, step) in steps.iter().enumerate() {
        match step {
            Step::Open => {
                let sizes: Vec<SizeRecord> = sizes_for(&c)
                    .into_iter()
                    .enumerate()
                    .map(|(i, mut r)| {
                        r.size = seed_sizes[(i + k) % seed_sizes.len()];
                        r
                    })
                    .collect();
                let _ = c.open_iteration_with_sizes(&sizes);
            }
            Step::Verdict(revised) => {
                if let Some(p) = c.state().unresolved().first().cloned() {
                    let v = if *revised { Verdict::Revised } else { Verdict::NoChange };
                    revise(&mut c, &p.volume, p.class.get(), v).unwrap();
                }
            }
            Step::Finish => {
                if c.export_finetune_manifest().is_ok() {
                    let tag = format!("M{}", c.state().iteration + 1);
                    c.advance_iteration(tag).unwrap();
                    c.check_stop().unwrap();
                }
            }
            Step::Reopen(i) => {
                let _ = c.final_signoff(SignOff {
                    reviewer: "sr".into(),
                    scope: SignOffScope::Volumes(vec![format!("v{i:02}")]),
                    decision: SignOffDecision::Reopen,
                    note: String::new(),
                });
            }
            Step::Approve => {
                let _ = c.final_signoff(SignOff {
                    reviewer: "sr".into(),
                    scope: SignOffScope::Campaign,
                    decision: SignOffDecision::Approve,
                    note: String::new(),
                });
            }
        }
    }
    c
}

fn status_rank(s: PairStatus) -> u8 {
    match s {
        PairStatus::Unrevised => 0,
        PairStatus::Selected => 1,
        PairStatus::Revised | PairStatus::AcceptedNoChange => 2,
        PairStatus::SignedOff => 3,
    }
}

proptest! {
    #[test]
    fn replay_reproduces_live_state(
        steps in proptest::collection::vec(arb_step(), 0..60),
        sizes in proptest::collection::vec(0.0f64..10.0, 1..16),
    ) {
        let c = drive(&steps, &sizes);
        let lines: Vec<String> = c.events().iter().map(|e| serde_json::to_string(e).unwrap()).collect();
        let parsed: Vec<Event> = lines.iter().map(|l| serde_json::from_str(l).unwrap()).collect();
        let r = Campaign::replay(parsed, Clock::Logical).unwrap();
        prop_assert_eq!(r.snapshot_json(), c.snapshot_json());
    }

    #[test]
    fn statuses_only_move_forward_without_reopen(
        steps in proptest::collection::vec(arb_step(), 0..60),
        sizes in proptest::collection::vec(0.0f64..10.0, 1..16),
    ) {
        let c = drive(&steps, &sizes);
        let events = c.events();
        let mut prev = Campaign::replay(events[..1].to_vec(), Clock::Logical).unwrap();
        for e in &events[1..] {
            let mut next_events = prev.events().to_vec();
            next_events.push(e.clone());
            let next = Campaign::replay(next_events, Clock::Logical).unwrap();
            let reopen = matches!(&e.body, EventBody::SignedOff { signoff } if signoff.decision == SignOffDecision::Reopen);
            if !reopen {
                for (v, pairs) in &next.state().pairs {
                    for (class, s) in pairs {
                        let before = prev.state().pairs[v][class].status;
                        prop_assert!(status_rank(s.status) >= status_rank(before));
                    }
                }
            }
            if let EventBody::IterationOpened { selections, .. } = &e.body {
                for s in selections {
                    let pool = prev.state().pool(s.class).count();
                    let want = crate::ranking::selection_count(pool, s.fraction).unwrap();
                    prop_assert_eq!(s.selected.len(), want);
                }
            }
            if let EventBody::ManifestExported { manifest } = &e.body {
                for entry in &manifest.entries {
                    prop_assert_eq!(next.state().pairs[&entry.volume][&entry.class].status, PairStatus::Revised);
                }
            }
            if let EventBody::IterationAdvanced { .. } = &e.body {
                prop_assert_eq!(next.state().iteration, prev.state().iteration + 1);
            }
            prev = next;
        }
    }
}
