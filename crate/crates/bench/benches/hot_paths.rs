use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cul_core::agent::{Batch, Transition};
use cul_core::curriculum::ZeroAction;
use cul_core::dynamics::linearize_nominal;
use cul_core::neural::{Activation, DenseNet};
use cul_core::{
    nominal_mbc, run_episode, step_plant, synthesize_mbc, Agent, AgentConfig, ControlVariant, PlantParams, PlantState,
    RunConfig, OBS_DIM,
};

fn plant(c: &mut Criterion) {
    let p = PlantParams::nominal();
    let s = PlantState { x_e: 1e-3, x_g: 5e-3, ..PlantState::default() };
    c.bench_function("step_plant/200_substeps", |b| b.iter(|| step_plant(&s, 10.0, 0.0, &p, 0.006, 200).unwrap()));
}

fn synthesis(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let model = linearize_nominal(&cfg.plant.linear(), cfg.env.dt).unwrap();
    c.bench_function("synthesize_mbc", |b| b.iter(|| synthesize_mbc(&model, &cfg.synthesis).unwrap()));
}

fn network(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = DenseNet::new(&[7, 128, 128, 1], Activation::Relu, Activation::Linear, &mut rng).unwrap();
    let x = DMatrix::from_fn(7, 128, |_, _| rng.random_range(-1.0..1.0));
    let up = DMatrix::from_element(1, 128, 1.0 / 128.0);
    c.bench_function("critic/forward_batch128", |b| b.iter(|| net.forward_batch(&x).unwrap()));
    let (_, cache) = net.forward_batch(&x).unwrap();
    c.bench_function("critic/backward_batch128", |b| b.iter(|| net.backward_batch(&cache, &up).unwrap()));
}

fn agent_update(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let agent = Agent::new(OBS_DIM, AgentConfig::default(), &mut rng).unwrap();
    let ts: Vec<Transition> = (0..128)
        .map(|_| Transition {
            s: (0..OBS_DIM).map(|_| rng.random_range(-1.0..1.0)).collect(),
            a: rng.random_range(-1.0..1.0),
            r: -rng.random::<f64>(),
            s_next: (0..OBS_DIM).map(|_| rng.random_range(-1.0..1.0)).collect(),
            done: false,
        })
        .collect();
    let batch = Batch::from_transitions(OBS_DIM, &ts).unwrap();
    c.bench_function("agent/critic_and_actor_update", |b| {
        b.iter_batched(
            || agent.clone(),
            |mut a| {
                a.critic_update(&batch).unwrap();
                a.actor_update(&batch, None).unwrap();
            },
            BatchSize::LargeInput,
        )
    });
}

fn rollout(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let mbc = nominal_mbc(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let policy = Agent::new(OBS_DIM, AgentConfig::default(), &mut rng).unwrap().policy();
    let mut group = c.benchmark_group("episode");
    group.sample_size(10);
    group.bench_function("mbc_only", |b| {
        b.iter(|| run_episode(&cfg.plant, &mbc, &mut ZeroAction, ControlVariant::MbcOnly, &cfg.env, 0).unwrap())
    });
    group.bench_function("residual_eval", |b| {
        b.iter(|| run_episode(&cfg.plant, &mbc, &mut &policy, ControlVariant::Residual, &cfg.env, 0).unwrap())
    });
    group.finish();
}

criterion_group!(benches, plant, synthesis, network, agent_update, rollout);
criterion_main!(benches);
