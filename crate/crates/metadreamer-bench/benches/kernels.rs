//! Throughput of the numeric kernels the training loop spends its time
//! in: tape forward/backward passes, environment stepping, context
//! encoding, world-model prediction, and one SAC update.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use metadreamer::nn::{Mlp, MlpSpec};
use metadreamer::train::{ed_step, ElboWeights, TaskEdData};
use metadreamer::{
    derive_rng, make_env_with, sample_task_specs, schema_for, ContextTuple, EnvId, EnvOptions,
    ParameterStore, PhysicsTemplate, Provenance, SacAgent, Tape, TaskEncoder,
    TrainConfig, Transition, WorldModel,
};

const SEED: u64 = 7;

fn explore(env_id: EnvId, steps: usize) -> Vec<Transition> {
    let mut rng = derive_rng(SEED, "bench-explore");
    let spec = sample_task_specs(env_id, 1, &mut rng).remove(0);
    let mut env = make_env_with(&spec, SEED, EnvOptions::default()).unwrap();
    let schema = schema_for(env_id);
    let mut explorer = metadreamer::env::RandomWalkExplorer::new(&schema);
    let mut state = env.reset();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let action = explorer.act(&mut rng);
        let (next, reward) = env.step(&action).unwrap();
        out.push(Transition {
            state: state.observation.clone(),
            action,
            reward,
            next_state: next.observation.clone(),
            terminal: next.terminal,
            provenance: Provenance::Real,
        });
        state = next;
        if state.done {
            state = env.reset();
        }
    }
    out
}

fn bench_tape(c: &mut Criterion) {
    let mut store = ParameterStore::new("bench");
    let mut rng = derive_rng(SEED, "bench-mlp");
    let mlp = Mlp::new(&mut store, "mlp", MlpSpec::new(64, &[64, 64], 4), &mut rng).unwrap();
    let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();

    c.bench_function("tape_mlp_forward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let input = tape.input_vec(black_box(&x));
            let out = mlp.forward(&mut tape, &store, input).unwrap();
            black_box(tape.value(out).data()[0])
        })
    });

    c.bench_function("tape_mlp_forward_backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let input = tape.input_vec(black_box(&x));
            let out = mlp.forward(&mut tape, &store, input).unwrap();
            let loss = tape.mean(out);
            tape.backward(loss, &mut [&mut store]).unwrap();
            black_box(tape.value(loss).data()[0])
        })
    });
}

fn bench_env_steps(c: &mut Criterion) {
    for env_id in [EnvId::Nav2d, EnvId::CartPole, EnvId::Highway] {
        c.bench_function(&format!("env_step_{env_id}"), |b| {
            let mut rng = derive_rng(SEED, "bench-env");
            let spec = sample_task_specs(env_id, 1, &mut rng).remove(0);
            let mut env = make_env_with(&spec, SEED, EnvOptions::default()).unwrap();
            let schema = schema_for(env_id);
            let mut explorer = metadreamer::env::RandomWalkExplorer::new(&schema);
            let mut state = env.reset();
            b.iter(|| {
                let action = explorer.act(&mut rng);
                let (next, reward) = env.step(&action).unwrap();
                state = next;
                if state.done {
                    state = env.reset();
                }
                black_box(reward)
            })
        });
    }
}

fn bench_encode(c: &mut Criterion) {
    let schema = schema_for(EnvId::Nav2d);
    let mut store = ParameterStore::new("encoder");
    let mut rng = derive_rng(SEED, "bench-encoder");
    let encoder = TaskEncoder::new(&mut store, &schema, 4, 64, &mut rng).unwrap();
    let tuples: Vec<Vec<f64>> = explore(EnvId::Nav2d, 64)
        .iter()
        .map(|t| t.context_tuple().encode(&schema).unwrap())
        .collect();

    c.bench_function("encode_context_64", |b| {
        b.iter(|| {
            let posterior = encoder.final_posterior(&store, black_box(&tuples)).unwrap();
            black_box(posterior.mean[0])
        })
    });
}

fn bench_world_model(c: &mut Criterion) {
    for env_id in [EnvId::Nav2d, EnvId::CartPole, EnvId::Highway] {
        c.bench_function(&format!("world_predict_{env_id}"), |b| {
            let schema = schema_for(env_id);
            let mut store = ParameterStore::new("world");
            let mut rng = derive_rng(SEED, "bench-world");
            let hidden = TrainConfig::default_for(env_id).model_hidden;
            let wm = WorldModel::new(
                &mut store,
                &schema,
                PhysicsTemplate::for_env(env_id),
                4,
                &hidden,
                &mut rng,
            )
            .unwrap();
            let t = explore(env_id, 1).remove(0);
            let z = vec![0.3; 4];
            b.iter(|| {
                let next = wm
                    .predict_transition(&store, black_box(&t.state), &t.action, &z)
                    .unwrap();
                black_box(next[0])
            })
        });
    }
}

fn bench_policy(c: &mut Criterion) {
    for env_id in [EnvId::Nav2d, EnvId::CartPole] {
        c.bench_function(&format!("sac_train_step_{env_id}"), |b| {
            let schema = schema_for(env_id);
            let mut rng = derive_rng(SEED, "bench-sac");
            let config = TrainConfig::default_for(env_id).sac;
            let batch_size = config.batch_size;
            let mut agent = SacAgent::new(&schema, 4, config, &mut rng).unwrap();
            let batch = explore(env_id, batch_size);
            let z = vec![0.3; 4];
            b.iter(|| {
                let losses = agent
                    .train_step(Some((black_box(&z), &batch)), None, &mut rng)
                    .unwrap();
                black_box(losses.critic)
            })
        });
    }
}

fn bench_ed_step(c: &mut Criterion) {
    c.bench_function("ed_step_2tasks_16tuples", |b| {
        let config = TrainConfig::default_for(EnvId::Nav2d);
        let schema = schema_for(EnvId::Nav2d);
        let mut rng = derive_rng(SEED, "bench-ed");
        let mut enc_store = ParameterStore::new("encoder");
        let encoder = TaskEncoder::new(&mut enc_store, &schema, 4, 32, &mut rng).unwrap();
        let mut world_store = ParameterStore::new("world");
        let wm = WorldModel::new(
            &mut world_store,
            &schema,
            PhysicsTemplate::for_env(EnvId::Nav2d),
            4,
            &[32],
            &mut rng,
        )
        .unwrap();
        let window: Vec<ContextTuple> = explore(EnvId::Nav2d, 16)
            .iter()
            .map(|t| t.context_tuple())
            .collect();
        let data = vec![
            TaskEdData {
                windows: vec![window.clone(), window.clone()],
            };
            2
        ];
        let weights = ElboWeights::from(&config);
        b.iter(|| {
            let terms = ed_step(
                &encoder,
                &mut enc_store,
                &wm,
                &mut world_store,
                &schema,
                black_box(&data),
                &weights,
                1e-3,
                &mut rng,
            )
            .unwrap();
            black_box(terms.total)
        })
    });
}

criterion_group!(
    benches,
    bench_tape,
    bench_env_steps,
    bench_encode,
    bench_world_model,
    bench_policy,
    bench_ed_step
);
criterion_main!(benches);
