//! The encoder-decoder objective: reconstruction, posterior KL, and the
//! latent clustering terms, assembled on one tape so a single backward
//! pass trains encoder and world model together.

use crate::env::EnvSchema;
use crate::error::{Error, Result};
use crate::infer::{kl_to_prior_on_tape, sample_latent_on_tape, ContextTuple, TaskEncoder};
use crate::nn::{ParameterStore, Tape, Var};
use crate::world::WorldModel;

/// Loss weights, lifted out of the full run configuration.
#[derive(Debug, Clone, Copy)]
pub struct ElboWeights {
    pub beta: f64,
    pub alpha_t: f64,
    pub alpha_r: f64,
    pub alpha_c1: f64,
    pub alpha_c2: f64,
    pub sigma: f64,
}

impl From<&super::TrainConfig> for ElboWeights {
    fn from(c: &super::TrainConfig) -> Self {
        ElboWeights {
            beta: c.beta,
            alpha_t: c.alpha_t,
            alpha_r: c.alpha_r,
            alpha_c1: c.alpha_c1,
            alpha_c2: c.alpha_c2,
            sigma: c.sigma,
        }
    }
}

/// One task's share of an encoder-decoder step: several context windows,
/// the first of which doubles as the reconstruction batch.
#[derive(Debug, Clone)]
pub struct TaskEdData {
    pub windows: Vec<Vec<ContextTuple>>,
}

/// Scalar values of every objective component, for logs and invariants.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct ElboTerms {
    pub total: f64,
    pub nll: f64,
    pub state_mse: f64,
    pub reward_mse: f64,
    /// Raw posterior KL, before the `beta / window` scaling.
    pub kl: f64,
    pub intra: f64,
    pub inter: f64,
}

/// Euclidean distance between two vectors already on the tape.
fn distance(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.sq_norm(d)?;
    tape.sqrt(sq)
}

/// Builds the full objective for a batch of tasks. `noise[i]` is the
/// frozen reparameterization draw for task `i`'s latent sample.
#[allow(clippy::too_many_arguments)]
pub fn elbo_on_tape(
    tape: &mut Tape,
    encoder: &TaskEncoder,
    encoder_store: &ParameterStore,
    wm: &WorldModel,
    world_store: &ParameterStore,
    schema: &EnvSchema,
    data: &[TaskEdData],
    weights: &ElboWeights,
    noise: &[Vec<f64>],
) -> Result<(Var, ElboTerms)> {
    if data.is_empty() {
        return Err(Error::InsufficientData("elbo over zero tasks".into()));
    }
    if noise.len() != data.len() {
        return Err(Error::Shape("one noise draw per task required".into()));
    }
    let (norm_scale, norm_offset) = schema.normalization_affine();
    let n_tasks = data.len() as f64;

    let mut per_task_losses = Vec::with_capacity(data.len());
    let mut state_terms = Vec::new();
    let mut reward_terms = Vec::new();
    let mut kl_terms = Vec::new();
    let mut task_means: Vec<Vec<Var>> = Vec::with_capacity(data.len());

    for (task, eps) in data.iter().zip(noise) {
        if task.windows.is_empty() || task.windows[0].is_empty() {
            return Err(Error::InsufficientData(
                "task without context windows".into(),
            ));
        }
        let window = &task.windows[0];
        let encoded: Vec<Vec<f64>> = window
            .iter()
            .map(|t| t.encode(schema))
            .collect::<Result<_>>()?;
        let (mean, std) = encoder.final_posterior_on_tape(tape, encoder_store, &encoded)?;
        let kl = kl_to_prior_on_tape(tape, mean, std)?;
        let z = sample_latent_on_tape(tape, mean, std, eps)?;

        let mut s_terms = Vec::with_capacity(window.len());
        let mut r_terms = Vec::with_capacity(window.len());
        for t in window {
            let pred = wm.predict_transition_on_tape(tape, world_store, &t.state, &t.action, z)?;
            let pred_norm = tape.affine_vec(pred, &norm_scale, &norm_offset)?;
            let target = tape.input_vec(&schema.normalize_obs(&t.next_state));
            s_terms.push(tape.mse(pred_norm, target)?);

            let r_pred = wm.predict_reward_scaled_on_tape(tape, world_store, &t.state, &t.action, z)?;
            let r_target = tape.input_vec(&[t.reward / schema.reward_scale]);
            r_terms.push(tape.mse(r_pred, r_target)?);
        }
        let s_stack = tape.concat(&s_terms)?;
        let state_mse = tape.mean(s_stack);
        let r_stack = tape.concat(&r_terms)?;
        let reward_mse = tape.mean(r_stack);

        let s_weighted = tape.scale(state_mse, weights.alpha_t);
        let r_weighted = tape.scale(reward_mse, weights.alpha_r);
        let nll = tape.add(s_weighted, r_weighted)?;
        // The window-averaged reconstruction pairs with a per-tuple share
        // of the KL, keeping the two terms on comparable scales across
        // window lengths.
        let kl_scaled = tape.scale(kl, weights.beta / window.len() as f64);
        per_task_losses.push(tape.add(nll, kl_scaled)?);
        state_terms.push(state_mse);
        reward_terms.push(reward_mse);
        kl_terms.push(kl);

        let mut means = Vec::with_capacity(task.windows.len());
        means.push(mean);
        for extra in &task.windows[1..] {
            let encoded: Vec<Vec<f64>> = extra
                .iter()
                .map(|t| t.encode(schema))
                .collect::<Result<_>>()?;
            let (m, _) = encoder.final_posterior_on_tape(tape, encoder_store, &encoded)?;
            means.push(m);
        }
        task_means.push(means);
    }

    let stacked = tape.concat(&per_task_losses)?;
    let mut total = tape.mean(stacked);

    // Pull same-task posteriors towards their centroid.
    let mut intra_terms = Vec::new();
    let mut centroids = Vec::with_capacity(task_means.len());
    for means in &task_means {
        let mut sum = means[0];
        for &m in &means[1..] {
            sum = tape.add(sum, m)?;
        }
        let centroid = tape.scale(sum, 1.0 / means.len() as f64);
        centroids.push(centroid);
        for &m in means {
            let d = distance(tape, m, centroid)?;
            intra_terms.push(tape.scale(d, 1.0 / means.len() as f64));
        }
    }
    let intra_stack = tape.concat(&intra_terms)?;
    let intra = tape.sum(intra_stack);

    // Push distinct-task centroids at least `sigma` apart.
    let mut inter: Option<Var> = None;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            let d = distance(tape, centroids[i], centroids[j])?;
            let neg = tape.neg(d);
            let short = tape.add_const(neg, weights.sigma);
            let clipped = tape.clamp(short, 0.0, weights.sigma);
            inter = Some(match inter {
                None => clipped,
                Some(acc) => tape.add(acc, clipped)?,
            });
        }
    }
    let inter = match inter {
        Some(v) => v,
        None => tape.input(crate::tensor::Tensor::scalar(0.0)),
    };

    let intra_w = tape.scale(intra, weights.alpha_c1);
    let inter_w = tape.scale(inter, weights.alpha_c2);
    total = tape.add(total, intra_w)?;
    total = tape.add(total, inter_w)?;

    let state_mse = state_terms.iter().map(|&v| tape.scalar_value(v)).sum::<f64>() / n_tasks;
    let reward_mse = reward_terms.iter().map(|&v| tape.scalar_value(v)).sum::<f64>() / n_tasks;
    let kl = kl_terms.iter().map(|&v| tape.scalar_value(v)).sum::<f64>() / n_tasks;
    let terms = ElboTerms {
        total: tape.scalar_value(total),
        nll: weights.alpha_t * state_mse + weights.alpha_r * reward_mse,
        state_mse,
        reward_mse,
        kl,
        intra: tape.scalar_value(intra),
        inter: tape.scalar_value(inter),
    };
    Ok((total, terms))
}

/// One gradient step on the joint objective. Both stores are updated;
/// nothing else is touched.
#[allow(clippy::too_many_arguments)]
pub fn ed_step(
    encoder: &TaskEncoder,
    encoder_store: &mut ParameterStore,
    wm: &WorldModel,
    world_store: &mut ParameterStore,
    schema: &EnvSchema,
    data: &[TaskEdData],
    weights: &ElboWeights,
    lr: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<ElboTerms> {
    let noise: Vec<Vec<f64>> = data
        .iter()
        .map(|_| {
            (0..encoder.latent_dim())
                .map(|_| crate::rng::standard_normal(rng))
                .collect()
        })
        .collect();
    let mut tape = Tape::new();
    let (total, terms) = elbo_on_tape(
        &mut tape,
        encoder,
        encoder_store,
        wm,
        world_store,
        schema,
        data,
        weights,
        &noise,
    )?;
    if !terms.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "encoder-decoder objective: {terms:?}"
        )));
    }
    tape.backward(total, &mut [encoder_store, world_store])?;
    encoder_store.adam_step(lr)?;
    world_store.adam_step(lr)?;
    Ok(terms)
}

/// Plain-value twin of the tape cluster terms, used as the oracle in
/// tests and as the metric implementation.
pub fn cluster_losses(means_by_task: &[Vec<Vec<f64>>], sigma: f64) -> (f64, f64) {
    let centroid = |means: &Vec<Vec<f64>>| -> Vec<f64> {
        let dim = means[0].len();
        let mut c = vec![0.0; dim];
        for m in means {
            for (acc, v) in c.iter_mut().zip(m) {
                *acc += v;
            }
        }
        for v in &mut c {
            *v /= means.len() as f64;
        }
        c
    };
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let centroids: Vec<Vec<f64>> = means_by_task.iter().map(centroid).collect();
    let mut intra = 0.0;
    for (means, c) in means_by_task.iter().zip(&centroids) {
        let per: f64 = means.iter().map(|m| dist(m, c)).sum();
        intra += per / means.len() as f64;
    }
    let mut inter = 0.0;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            inter += (sigma - dist(&centroids[i], &centroids[j])).clamp(0.0, sigma);
        }
    }
    (intra, inter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{schema_for, Action, EnvId};
    use crate::nn::finite_diff_check;
    use crate::rng::{derive_rng, rng_from_seed};
    use crate::world::PhysicsTemplate;

    fn setup(seed: u64) -> (TaskEncoder, ParameterStore, WorldModel, ParameterStore) {
        let schema = schema_for(EnvId::Nav2d);
        let mut enc_store = ParameterStore::new("encoder");
        let mut rng = derive_rng(seed, "loss-test");
        let encoder = TaskEncoder::new(&mut enc_store, &schema, 3, 8, &mut rng).unwrap();
        let mut world_store = ParameterStore::new("world");
        let wm = WorldModel::new(
            &mut world_store,
            &schema,
            PhysicsTemplate::for_env(EnvId::Nav2d),
            3,
            &[8],
            &mut rng,
        )
        .unwrap();
        (encoder, enc_store, wm, world_store)
    }

    fn consistent_tuple(s: [f64; 2], a: [f64; 2], reward: f64) -> ContextTuple {
        let dt = crate::env::nav2d::DT;
        let next = [
            (s[0] + a[0] * dt).clamp(-4.0, 4.0),
            (s[1] + a[1] * dt).clamp(-4.0, 4.0),
        ];
        ContextTuple {
            state: s.to_vec(),
            action: Action::Continuous(a.to_vec()),
            reward,
            next_state: next.to_vec(),
        }
    }

    fn sample_data(n_tasks: usize, windows: usize, len: usize, seed: u64) -> Vec<TaskEdData> {
        use rand::Rng;
        let mut rng = rng_from_seed(seed);
        (0..n_tasks)
            .map(|_| TaskEdData {
                windows: (0..windows)
                    .map(|_| {
                        (0..len)
                            .map(|_| {
                                consistent_tuple(
                                    [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
                                    [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                                    rng.random_range(-5.0..0.0),
                                )
                            })
                            .collect()
                    })
                    .collect(),
            })
            .collect()
    }

    fn zero_store(store: &mut ParameterStore) {
        let names: Vec<String> = store.entries().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let shape = store.value(store.id_of(&name).unwrap()).shape();
            store
                .set_value(&name, crate::tensor::Tensor::zeros(shape.0, shape.1))
                .unwrap();
        }
    }

    #[test]
    fn perfect_model_and_quiet_prior_give_zero_objective() {
        let (encoder, mut enc_store, wm, mut world_store) = setup(1);
        let schema = schema_for(EnvId::Nav2d);
        // The analytic transition template reconstructs states exactly;
        // zero rewards with a zeroed reward net make the other half
        // exact too. A zeroed encoder emits the unit prior, so the KL
        // also vanishes. Cluster weights off.
        zero_store(&mut world_store);
        zero_store(&mut enc_store);
        let data: Vec<TaskEdData> = (0..2)
            .map(|i| TaskEdData {
                windows: vec![vec![
                    consistent_tuple([i as f64, 0.5], [0.3, -0.2], 0.0),
                    consistent_tuple([0.1, -1.0], [-0.5, 0.9], 0.0),
                ]],
            })
            .collect();
        let weights = ElboWeights {
            beta: 0.0,
            alpha_t: 1.0,
            alpha_r: 1.0,
            alpha_c1: 0.0,
            alpha_c2: 0.0,
            sigma: 2.0,
        };
        let mut tape = Tape::new();
        let noise = vec![vec![0.0; 3]; 2];
        let (_, terms) = elbo_on_tape(
            &mut tape,
            &encoder,
            &enc_store,
            &wm,
            &world_store,
            &schema,
            &data,
            &weights,
            &noise,
        )
        .unwrap();
        assert_eq!(terms.state_mse, 0.0);
        assert_eq!(terms.reward_mse, 0.0);
        assert_eq!(terms.total, 0.0);
    }

    #[test]
    fn alpha_weights_select_their_terms() {
        let (encoder, enc_store, wm, world_store) = setup(2);
        let schema = schema_for(EnvId::Nav2d);
        let data = sample_data(2, 1, 4, 3);
        let noise = vec![vec![0.1, -0.2, 0.3]; 2];
        let run = |alpha_t: f64, alpha_r: f64| {
            let weights = ElboWeights {
                beta: 0.0,
                alpha_t,
                alpha_r,
                alpha_c1: 0.0,
                alpha_c2: 0.0,
                sigma: 2.0,
            };
            let mut tape = Tape::new();
            let (_, terms) = elbo_on_tape(
                &mut tape, &encoder, &enc_store, &wm, &world_store, &schema, &data, &weights,
                &noise,
            )
            .unwrap();
            terms
        };
        let both = run(1.0, 1.0);
        let reward_only = run(0.0, 1.0);
        assert!((reward_only.total - both.reward_mse).abs() < 1e-12);
        assert!((both.total - (both.state_mse + both.reward_mse)).abs() < 1e-12);
    }

    #[test]
    fn objective_is_the_sum_of_its_reported_terms() {
        let (encoder, enc_store, wm, world_store) = setup(4);
        let schema = schema_for(EnvId::Nav2d);
        let data = sample_data(3, 2, 5, 5);
        let noise = vec![vec![0.3, 0.1, -0.4]; 3];
        let weights = ElboWeights {
            beta: 5.0,
            alpha_t: 1.0,
            alpha_r: 1.0,
            alpha_c1: 0.1,
            alpha_c2: 0.1,
            sigma: 2.0,
        };
        let mut tape = Tape::new();
        let (_, terms) = elbo_on_tape(
            &mut tape, &encoder, &enc_store, &wm, &world_store, &schema, &data, &weights, &noise,
        )
        .unwrap();
        let window_len = 5.0;
        let expected = terms.nll
            + weights.beta * terms.kl / window_len
            + weights.alpha_c1 * terms.intra
            + weights.alpha_c2 * terms.inter;
        assert!(
            (terms.total - expected).abs() < 1e-9,
            "total {} vs reassembled {expected}",
            terms.total
        );
    }

    #[test]
    fn tape_cluster_terms_match_the_brute_force_values() {
        let (encoder, enc_store, wm, world_store) = setup(6);
        let schema = schema_for(EnvId::Nav2d);
        let data = sample_data(3, 3, 4, 7);
        let noise = vec![vec![0.0; 3]; 3];
        let weights = ElboWeights {
            beta: 1.0,
            alpha_t: 1.0,
            alpha_r: 1.0,
            alpha_c1: 0.7,
            alpha_c2: 0.9,
            sigma: 2.0,
        };
        let mut tape = Tape::new();
        let (_, terms) = elbo_on_tape(
            &mut tape, &encoder, &enc_store, &wm, &world_store, &schema, &data, &weights, &noise,
        )
        .unwrap();

        let means_by_task: Vec<Vec<Vec<f64>>> = data
            .iter()
            .map(|task| {
                task.windows
                    .iter()
                    .map(|w| {
                        let encoded: Vec<Vec<f64>> =
                            w.iter().map(|t| t.encode(&schema).unwrap()).collect();
                        encoder
                            .final_posterior(&enc_store, &encoded)
                            .unwrap()
                            .mean
                    })
                    .collect()
            })
            .collect();
        let (intra, inter) = cluster_losses(&means_by_task, weights.sigma);
        assert!((terms.intra - intra).abs() < 1e-10);
        assert!((terms.inter - inter).abs() < 1e-10);
    }

    #[test]
    fn cluster_loss_edge_cases_match_hand_values() {
        // Identical posteriors collapse the pull term.
        let same = vec![vec![vec![0.5, -0.5], vec![0.5, -0.5]]];
        assert_eq!(cluster_losses(&same, 2.0), (0.0, 0.0));
        // Far-apart centroids clear the push term.
        let far = vec![vec![vec![0.0, 0.0]], vec![vec![10.0, 0.0]]];
        assert_eq!(cluster_losses(&far, 2.0).1, 0.0);
        // Coincident centroids pay the full threshold.
        let close = vec![vec![vec![1.0, 1.0]], vec![vec![1.0, 1.0]]];
        assert_eq!(cluster_losses(&close, 2.0).1, 2.0);
    }

    #[test]
    fn gradient_of_full_objective_matches_finite_differences() {
        let (encoder, mut enc_store, wm, mut world_store) = setup(8);
        let schema = schema_for(EnvId::Nav2d);
        let data = sample_data(2, 2, 3, 9);
        let noise = vec![vec![0.2, -0.3, 0.1], vec![-0.1, 0.4, 0.0]];
        let weights = ElboWeights {
            beta: 5.0,
            alpha_t: 1.0,
            alpha_r: 1.0,
            alpha_c1: 0.1,
            alpha_c2: 0.1,
            sigma: 2.0,
        };
        let report = finite_diff_check(
            |tape, stores| {
                elbo_on_tape(
                    tape, &encoder, stores[0], &wm, stores[1], &schema, &data, &weights, &noise,
                )
                .map(|(total, _)| total)
            },
            &mut [&mut enc_store, &mut world_store],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn ed_step_reduces_the_objective_on_a_fixed_batch() {
        let (encoder, mut enc_store, wm, mut world_store) = setup(10);
        let schema = schema_for(EnvId::Nav2d);
        let data = sample_data(3, 2, 6, 11);
        let weights = ElboWeights {
            beta: 1.0,
            alpha_t: 1.0,
            alpha_r: 1.0,
            alpha_c1: 0.1,
            alpha_c2: 0.1,
            sigma: 2.0,
        };
        let mut rng = rng_from_seed(12);
        let first = ed_step(
            &encoder, &mut enc_store, &wm, &mut world_store, &schema, &data, &weights, 3e-3,
            &mut rng,
        )
        .unwrap();
        let mut last = first;
        for _ in 0..30 {
            last = ed_step(
                &encoder, &mut enc_store, &wm, &mut world_store, &schema, &data, &weights, 3e-3,
                &mut rng,
            )
            .unwrap();
        }
        assert!(
            last.total < first.total,
            "objective went {} -> {}",
            first.total,
            last.total
        );
    }
}
