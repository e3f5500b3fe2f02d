use offsim::data::{collect_dataset, collect_random, mix, Quality};
use offsim::envs::{EnvId, EnvSpec};
use offsim::harness::{run_pipeline_on, MetricsReport, PreparedData, References, RunConfig};
use offsim::policy::RandomActor;
use offsim::Error;

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::ci(EnvId::PointMass);
    cfg.seeds = vec![0, 1];
    cfg.eval_episodes = 2;
    cfg.sim.iterations = 40;
    cfg.sim.batch_size = 32;
    cfg.sim.arch.members = 2;
    cfg.sim.arch.transition_hidden = 8;
    cfg.sim.arch.reward_hidden = 8;
    cfg.policy.episodes = 10;
    cfg.policy.batch_size = 32;
    cfg.policy.eval_every = 5;
    cfg.policy.eval_episodes = 1;
    cfg.policy.arch.hidden = 8;
    cfg
}

fn tiny_data(with_diverse: bool) -> PreparedData {
    let spec = EnvSpec::new(EnvId::PointMass);
    let expert = collect_dataset(
        &spec,
        &RandomActor { spec: spec.clone() },
        Quality::Expert,
        600,
        1,
    )
    .unwrap();
    let diverse = with_diverse.then(|| collect_random(&spec, 300, 2).unwrap());
    PreparedData {
        mixed: diverse
            .as_ref()
            .map(|d| mix(expert.clone(), d.clone()).unwrap()),
        expert,
        diverse,
        expert_unseen: None,
        diverse_unseen: None,
        behavior_expert: None,
        references: References {
            expert_return: -40.0,
            random_return: -400.0,
        },
    }
}

#[test]
fn expert_only_runs_never_invoke_the_margin_penalty() {
    let (report, timing) = run_pipeline_on(&tiny_config(), &tiny_data(false)).unwrap();
    assert_eq!(report.dataset_combo, "expert");
    assert_eq!(report.margin_c, None);
    assert_eq!(report.dataset_hashes.len(), 1);
    for s in &report.seeds {
        assert!(s.ok(), "{:?}", s.error);
        assert!(!s.multi_dataset && !s.penalty_invoked && s.margin.is_none());
    }
    assert!(timing.total() > 0.0);
}

#[test]
fn mixed_runs_select_a_margin_and_apply_the_penalty() {
    let mut cfg = tiny_config();
    cfg.bc_baseline = true;
    cfg.bc.epochs = 1;
    let (report, _) = run_pipeline_on(&cfg, &tiny_data(true)).unwrap();
    assert_eq!(report.dataset_combo, "expert-random");
    assert_eq!(report.margin_c, Some(1.6));
    assert_eq!(report.dataset_hashes.len(), 2);
    for s in &report.seeds {
        assert!(s.ok(), "{:?}", s.error);
        assert!(s.multi_dataset && s.penalty_invoked);
        let m = s.margin.as_ref().unwrap();
        assert!((m.margin - 1.6 * m.r_max).abs() < 1e-12);
        assert!(s.bc_return.is_some());
    }
    assert_eq!(report.bc_aggregate.as_ref().unwrap().n, 2);
}

#[test]
fn reports_round_trip_and_reject_other_versions() {
    let (report, _) = run_pipeline_on(&tiny_config(), &tiny_data(false)).unwrap();
    assert_eq!(report.recompute_aggregate(), report.aggregate);
    let text = report.to_json();
    assert_eq!(MetricsReport::from_json(&text).unwrap(), report);
    let bumped = text.replacen("\"format_version\": 1", "\"format_version\": 2", 1);
    assert!(matches!(
        MetricsReport::from_json(&bumped),
        Err(Error::Version { found: 2, .. })
    ));

    let dir = tempfile::tempdir().unwrap();
    report.write(dir.path(), "r").unwrap();
    let rows = offsim::harness::read_csv(dir.path().join("r.csv")).unwrap();
    assert_eq!(rows.len(), report.seeds.len());
    assert_eq!(
        offsim::harness::aggregates_from_rows(&rows)[0].1,
        report.aggregate
    );
}

#[test]
fn identical_seeds_give_identical_reports() {
    let cfg = tiny_config();
    let a = run_pipeline_on(&cfg, &tiny_data(true)).unwrap().0;
    let b = run_pipeline_on(&cfg, &tiny_data(true)).unwrap().0;
    assert_eq!(a.to_json(), b.to_json());
}
