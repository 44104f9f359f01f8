use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use tomstealth_core::acting::ActingRule;
use tomstealth_core::environments::build_avoid_zone;
use tomstealth_core::evidence::{exact_exposure, DEFAULT_RATIO_FLOOR};
use tomstealth_core::learner::gibbs_policy;
use tomstealth_core::monitoring::{belief_predict, uniform_hazard};
use tomstealth_core::rng::seeded;
use tomstealth_core::{AgeBelief, AgeFilter, MonitorState, TokenChannel};

fn age_filter(c: &mut Criterion) {
    let hazard = uniform_hazard(5, 9).unwrap();
    let mut group = c.benchmark_group("age_filter_1k_ticks");
    for (name, channel) in [
        ("noiseless_d1", TokenChannel::noiseless(1)),
        ("noisy_d3", TokenChannel::new(3, 0.9, 0.05).unwrap()),
    ] {
        let mut rng = seeded(7);
        let mut monitor = MonitorState::new();
        let tokens: Vec<Option<bool>> = (0..1000)
            .map(|_| monitor.tick(&hazard, &channel, &mut rng).1.first().map(|t| t.value))
            .collect();
        group.bench_with_input(BenchmarkId::from_parameter(name), &tokens, |b, tokens| {
            b.iter(|| {
                let mut filter = AgeFilter::new(hazard.clone(), channel);
                for &token in tokens {
                    filter.apply_token(token).unwrap();
                    black_box(filter.observation_probability());
                    filter.predict();
                }
            })
        });
    }
    group.finish();
}

fn belief_step(c: &mut Criterion) {
    let hazard = uniform_hazard(20, 60).unwrap();
    let belief = AgeBelief::new(vec![1.0 / 61.0; 61]).unwrap();
    c.bench_function("belief_predict_u60", |b| b.iter(|| belief_predict(black_box(&belief), &hazard).unwrap()));
}

fn gibbs(c: &mut Criterion) {
    let q = [0.3, -0.1, 0.8, 0.0, 0.2];
    let prior = [0.2; 5];
    c.bench_function("gibbs_policy_5", |b| b.iter(|| gibbs_policy(black_box(&q), &prior, black_box(0.4))));
}

fn exposure(c: &mut Criterion) {
    let scenario = build_avoid_zone(8, 0.01).unwrap();
    let hazard = uniform_hazard(5, 9).unwrap();
    let rule = ActingRule::from(scenario.reference.clone());
    c.bench_function("exact_exposure_zone8", |b| {
        b.iter(|| {
            exact_exposure(&scenario.mdp, &rule, &scenario.reference, &hazard, DEFAULT_RATIO_FLOOR, 0.99).unwrap()
        })
    });
}

criterion_group!(benches, age_filter, belief_step, gibbs, exposure);
criterion_main!(benches);
