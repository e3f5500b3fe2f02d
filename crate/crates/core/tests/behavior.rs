use offsim::data::{collect_random, train_behavior_suite, BehaviorConfig};
use offsim::envs::{EnvId, EnvSpec};
use offsim::harness::evaluate;
use offsim::policy::RandomActor;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn tiers_are_ordered(env: EnvId) {
    let spec = EnvSpec::new(env);
    let suite = train_behavior_suite(&spec, &BehaviorConfig::default()).unwrap();
    let expert = evaluate(&spec, &suite.expert.policy, 10, &SEEDS)
        .unwrap()
        .mean;
    let medium = evaluate(&spec, &suite.medium.policy, 10, &SEEDS)
        .unwrap()
        .mean;
    let random = evaluate(&spec, &RandomActor { spec: spec.clone() }, 10, &SEEDS)
        .unwrap()
        .mean;
    assert!(
        expert > medium && medium > random,
        "{env}: expert {expert} medium {medium} random {random}"
    );
    let score = suite.normalized(suite.medium.eval_return);
    assert!(
        (0.5..1.0).contains(&score),
        "{env}: medium checkpoint score {score}"
    );
    assert!(suite.medium.episode < suite.expert.episode);
}

#[test]
fn pointmass_tiers_are_ordered_and_training_is_reproducible() {
    tiers_are_ordered(EnvId::PointMass);
    let spec = EnvSpec::new(EnvId::PointMass);
    let cfg = BehaviorConfig {
        seed: 3,
        ..BehaviorConfig::default()
    };
    let a = train_behavior_suite(&spec, &cfg).unwrap();
    let b = train_behavior_suite(&spec, &cfg).unwrap();
    assert_eq!(a.checkpoints, b.checkpoints);
}

#[test]
fn pendulum_tiers_are_ordered() {
    tiers_are_ordered(EnvId::Pendulum);
}

#[test]
fn random_tier_actions_are_centered() {
    for env in [EnvId::PointMass, EnvId::Pendulum] {
        let spec = EnvSpec::new(env);
        let d = collect_random(&spec, 20_000, 5).unwrap();
        let n = d.len() as f64;
        for k in 0..spec.action_dim {
            let (lo, hi) = (spec.action_low[k], spec.action_high[k]);
            let centre = 0.5 * (lo + hi);
            let sd = (hi - lo) / 12f64.sqrt();
            let mean = d.transitions().iter().map(|t| t.a[k]).sum::<f64>() / n;
            assert!(
                (mean - centre).abs() < 3.0 * sd / n.sqrt(),
                "{env} dim {k}: mean {mean}"
            );
            assert!(d.transitions().iter().all(|t| (lo..=hi).contains(&t.a[k])));
        }
    }
}
