//! Latent-quality and imagination-quality metrics: cluster tightness,
//! held-out reconstruction, and the two speculation errors.

use rand_chacha::ChaCha8Rng;

use crate::env::{highway, EnvId, EnvSchema, TaskSpec};
use crate::error::{Error, Result};
use crate::infer::{ContextTuple, TaskEncoder};
use crate::nn::ParameterStore;
use crate::policy::Transition;
use crate::world::{StatePolicy, WorldModel};

fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Average distance of each task's posterior means to their centroid,
/// reported as mean and variance across tasks.
pub fn intra_cluster_variance(means_by_task: &[Vec<Vec<f64>>]) -> Result<(f64, f64)> {
    if means_by_task.is_empty() {
        return Err(Error::InsufficientData("no tasks to cluster".into()));
    }
    let mut per_task = Vec::with_capacity(means_by_task.len());
    for means in means_by_task {
        if means.len() < 2 {
            return Err(Error::InsufficientData(
                "need >= 2 posterior means per task".into(),
            ));
        }
        let dim = means[0].len();
        let mut centroid = vec![0.0; dim];
        for m in means {
            for (c, v) in centroid.iter_mut().zip(m) {
                *c += v;
            }
        }
        for c in &mut centroid {
            *c /= means.len() as f64;
        }
        let avg = means
            .iter()
            .map(|m| {
                m.iter()
                    .zip(&centroid)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / means.len() as f64;
        per_task.push(avg);
    }
    Ok(mean_var(&per_task))
}

/// Held-out reconstruction error: for each task, condition on the
/// context window's posterior mean, then score every held-out tuple by
/// normalized state error plus scaled reward error. Mean and variance
/// are taken over the individual tuples.
pub fn reconstruction_error(
    encoder: &TaskEncoder,
    encoder_store: &ParameterStore,
    wm: &WorldModel,
    world_store: &ParameterStore,
    schema: &EnvSchema,
    tasks: &[(Vec<ContextTuple>, Vec<ContextTuple>)],
) -> Result<(f64, f64)> {
    let mut errors = Vec::new();
    for (context, held_out) in tasks {
        if context.is_empty() || held_out.is_empty() {
            return Err(Error::InsufficientData(
                "reconstruction needs both a context and held-out tuples".into(),
            ));
        }
        let encoded: Vec<Vec<f64>> = context
            .iter()
            .map(|t| t.encode(schema))
            .collect::<Result<_>>()?;
        let z = encoder.final_posterior(encoder_store, &encoded)?.mean;
        for t in held_out {
            let pred = wm.predict_transition(world_store, &t.state, &t.action, &z)?;
            let pn = schema.normalize_obs(&pred);
            let tn = schema.normalize_obs(&t.next_state);
            let state_mse = pn
                .iter()
                .zip(&tn)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / pn.len() as f64;
            let r_pred = wm.predict_reward(world_store, &t.state, &t.action, &z)?;
            let r_err = (r_pred - t.reward) / schema.reward_scale;
            errors.push(state_mse + r_err * r_err);
        }
    }
    if errors.is_empty() {
        return Err(Error::InsufficientData("no held-out tuples".into()));
    }
    Ok(mean_var(&errors))
}

/// Goal position recovered from post-step positions and their rewards.
///
/// Each reward is the negative distance to the goal, so squaring two
/// consecutive rewards and subtracting cancels `‖g‖²`:
/// `2(s_t − s_{t+1})·g = ‖s_t‖² − ‖s_{t+1}‖² − (r_t² − r_{t+1}²)`.
/// Stacking those rows gives a linear system solved by least squares.
pub fn speculate_nav2d_goal(samples: &[(Vec<f64>, f64)]) -> Result<[f64; 2]> {
    if samples.len() < 3 {
        return Err(Error::InsufficientData(
            "goal recovery needs >= 3 reward samples".into(),
        ));
    }
    let mut ata = [[0.0; 2]; 2];
    let mut atb = [0.0; 2];
    for pair in samples.windows(2) {
        let (s0, r0) = (&pair[0].0, pair[0].1);
        let (s1, r1) = (&pair[1].0, pair[1].1);
        let row = [2.0 * (s0[0] - s1[0]), 2.0 * (s0[1] - s1[1])];
        let sq = |s: &Vec<f64>| s[0] * s[0] + s[1] * s[1];
        let rhs = sq(s0) - sq(s1) - (r0 * r0 - r1 * r1);
        for i in 0..2 {
            atb[i] += row[i] * rhs;
            for j in 0..2 {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    let det = ata[0][0] * ata[1][1] - ata[0][1] * ata[1][0];
    if det.abs() < 1e-9 {
        return Err(Error::Numeric(
            "goal recovery system is singular; trajectory lacks motion in two directions".into(),
        ));
    }
    let gx = (atb[0] * ata[1][1] - atb[1] * ata[0][1]) / det;
    let gy = (atb[1] * ata[0][0] - atb[0] * ata[1][0]) / det;
    Ok([gx, gy])
}

/// Rear-response coefficient recovered from a merging trajectory. Ego
/// and rear accelerations are both measured from the observed speed
/// changes, and their ratio is averaged over steps where the ego
/// actually accelerated.
pub fn speculate_highway_rear_response(trajectory: &[Transition]) -> Result<f64> {
    let dvx_idx = 4 + 4 * highway::REAR_SLOT + 2;
    let mut ratios = Vec::new();
    for t in trajectory {
        let a_ego = (t.next_state[2] - t.state[2]) / highway::DT;
        if a_ego.abs() <= 0.1 {
            continue;
        }
        let v_rear_before = t.state[2] + t.state[dvx_idx];
        let v_rear_after = t.next_state[2] + t.next_state[dvx_idx];
        let a_rear = (v_rear_after - v_rear_before) / highway::DT;
        ratios.push(a_rear / a_ego);
    }
    if ratios.is_empty() {
        return Err(Error::InsufficientData(
            "no steps with measurable ego acceleration".into(),
        ));
    }
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

/// Factor estimates for one trajectory, in schema factor order. Entries
/// are `None` for factors the env's speculator cannot recover.
pub fn speculate_factors(
    schema: &EnvSchema,
    trajectory: &[Transition],
) -> Result<Vec<Option<f64>>> {
    match schema.id {
        EnvId::Nav2d => {
            let samples: Vec<(Vec<f64>, f64)> = trajectory
                .iter()
                .map(|t| (t.next_state.clone(), t.reward))
                .collect();
            let goal = speculate_nav2d_goal(&samples)?;
            Ok(vec![Some(goal[0]), Some(goal[1])])
        }
        EnvId::Highway => {
            let p = speculate_highway_rear_response(trajectory)?;
            // Schema order is traffic_speed then rear_response; only the
            // latter is recoverable from acceleration ratios.
            Ok(vec![None, Some(p)])
        }
        EnvId::CartPole => Err(Error::MissingSpeculator(schema.id.to_string())),
    }
}

/// Speculated-factor error over trajectories: factors are recovered per
/// trajectory, compared against the true values in range-normalized
/// units, and aggregated as mean and variance over trajectories.
/// Trajectories whose motion is too degenerate to speculate from are
/// skipped; at least one must survive.
pub fn sfi_error(
    schema: &EnvSchema,
    trajectories: &[(TaskSpec, Vec<Transition>)],
) -> Result<(f64, f64)> {
    if trajectories.is_empty() {
        return Err(Error::InsufficientData("no trajectories".into()));
    }
    let mut per_traj = Vec::with_capacity(trajectories.len());
    for (task, traj) in trajectories {
        let estimates = match speculate_factors(schema, traj) {
            Ok(e) => e,
            Err(Error::InsufficientData(_)) | Err(Error::Numeric(_)) => continue,
            Err(e) => return Err(e),
        };
        let mut errs = Vec::new();
        for (f, est) in schema.factors.iter().zip(&estimates) {
            if let Some(v) = est {
                let truth = task.factor(&f.name)?;
                errs.push((v - truth).abs() / (f.hi - f.lo));
            }
        }
        if errs.is_empty() {
            return Err(Error::MissingSpeculator(schema.id.to_string()));
        }
        per_traj.push(errs.iter().sum::<f64>() / errs.len() as f64);
    }
    if per_traj.is_empty() {
        return Err(Error::InsufficientData(
            "every trajectory was too degenerate to speculate from".into(),
        ));
    }
    Ok(mean_var(&per_traj))
}

/// Speculated-context error for imaginary tasks: dream a rollout for
/// each latent, re-encode it, and compare the recovered posterior mean
/// against the latent that generated it, on the active dims only. The
/// second element is the spread of the recovered latents themselves,
/// averaged over active dims.
#[allow(clippy::too_many_arguments)]
pub fn sci_error(
    encoder: &TaskEncoder,
    encoder_store: &ParameterStore,
    wm: &WorldModel,
    world_store: &ParameterStore,
    policy: &mut dyn StatePolicy,
    zs: &[Vec<f64>],
    active_dims: &[usize],
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    if zs.is_empty() {
        return Err(Error::InsufficientData("no latents to speculate".into()));
    }
    if active_dims.is_empty() {
        return Err(Error::InsufficientData("no active latent dims".into()));
    }
    let schema = wm.schema();
    let mut errors = Vec::with_capacity(zs.len());
    let mut recovered: Vec<Vec<f64>> = Vec::with_capacity(zs.len());
    for z in zs {
        let s0 = crate::env::sample_initial_state(schema.id, rng);
        let traj = wm.imagine_rollout(
            world_store,
            policy,
            z,
            &s0,
            horizon,
            crate::policy::Provenance::Imagined,
            rng,
        )?;
        let tuples: Vec<Vec<f64>> = traj
            .iter()
            .map(|t| t.context_tuple().encode(schema))
            .collect::<Result<_>>()?;
        let z_hat = encoder.final_posterior(encoder_store, &tuples)?.mean;
        let err = active_dims
            .iter()
            .map(|&d| (z_hat[d] - z[d]).abs())
            .sum::<f64>()
            / active_dims.len() as f64;
        errors.push(err);
        recovered.push(active_dims.iter().map(|&d| z_hat[d]).collect());
    }
    let mean_err = errors.iter().sum::<f64>() / errors.len() as f64;
    let mut var = 0.0;
    for (i, _) in active_dims.iter().enumerate() {
        let column: Vec<f64> = recovered.iter().map(|r| r[i]).collect();
        var += mean_var(&column).1;
    }
    var /= active_dims.len() as f64;
    Ok((mean_err, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_env, nav2d, schema_for, Action, RandomWalkExplorer};
    use crate::policy::Provenance;
    use crate::rng::rng_from_seed;

    #[test]
    fn intra_cluster_matches_hand_computation_and_noise_grows_it() {
        // Two tasks: one with coincident means, one with means 2 apart.
        let tight = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        let spread = vec![vec![0.0, 0.0], vec![2.0, 0.0]];
        let (mean, var) = intra_cluster_variance(&[tight.clone(), spread]).unwrap();
        // Per-task averages are 0 and 1, so mean 0.5, variance 0.25.
        assert!((mean - 0.5).abs() < 1e-12);
        assert!((var - 0.25).abs() < 1e-12);

        let noisy = vec![vec![1.1, 1.0], vec![0.9, 1.0]];
        let (noisier, _) = intra_cluster_variance(&[tight, noisy]).unwrap();
        assert!(noisier > 0.0);
    }

    #[test]
    fn nav2d_goal_recovery_is_exact_on_env_data() {
        let mut rng = rng_from_seed(5);
        for (gx, gy) in [(1.5, 0.5), (-2.0, 2.0), (0.3, 1.1)] {
            let mut env = make_env(&TaskSpec::nav2d(gx, gy), 9).unwrap();
            let schema = schema_for(EnvId::Nav2d);
            let mut explorer = RandomWalkExplorer::new(&schema);
            env.reset();
            let mut samples = Vec::new();
            for _ in 0..40 {
                let action = explorer.act(&mut rng);
                let (state, reward) = env.step(&action).unwrap();
                samples.push((state.observation, reward));
            }
            let goal = speculate_nav2d_goal(&samples).unwrap();
            assert!(
                (goal[0] - gx).abs() < 1e-6 && (goal[1] - gy).abs() < 1e-6,
                "recovered {goal:?} for goal ({gx}, {gy})"
            );
        }
    }

    #[test]
    fn nav2d_goal_recovery_rejects_degenerate_motion() {
        // Straight-line motion along x leaves the y component unconstrained.
        let samples: Vec<(Vec<f64>, f64)> = (0..10)
            .map(|i| {
                let x = 0.1 * i as f64;
                (vec![x, 0.0], nav2d::nav2d_reward(&[x, 0.0], (1.0, 1.0)))
            })
            .collect();
        assert!(speculate_nav2d_goal(&samples).is_err());
    }

    #[test]
    fn highway_rear_response_recovery_matches_task_factor() {
        for p in [-0.8, 0.0, 0.6, 1.0] {
            let spec = TaskSpec::highway(24.0, p);
            let mut env = make_env(&spec, 11).unwrap();
            let mut rng = rng_from_seed(13);
            let schema = schema_for(EnvId::Highway);
            let mut explorer = RandomWalkExplorer::new(&schema);
            let mut traj = Vec::new();
            let mut state = env.reset();
            for _ in 0..120 {
                let action = explorer.act(&mut rng);
                let (next, reward) = env.step(&action).unwrap();
                traj.push(Transition {
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
            let p_hat = speculate_highway_rear_response(&traj).unwrap();
            assert!(
                (p_hat - p).abs() < 1e-9,
                "recovered {p_hat} for rear_response {p}"
            );
        }
    }

    #[test]
    fn cartpole_has_no_speculator() {
        let schema = schema_for(EnvId::CartPole);
        let traj = vec![Transition {
            state: vec![0.0; 4],
            action: Action::Discrete(0),
            reward: 1.0,
            next_state: vec![0.0; 4],
            terminal: false,
            provenance: Provenance::Real,
        }];
        assert!(matches!(
            speculate_factors(&schema, &traj),
            Err(Error::MissingSpeculator(_))
        ));
    }

    #[test]
    fn sfi_error_is_tiny_on_real_nav2d_rollouts() {
        let schema = schema_for(EnvId::Nav2d);
        let mut rng = rng_from_seed(17);
        let mut trajectories = Vec::new();
        for (gx, gy) in [(1.0, 1.0), (-1.0, 0.5)] {
            let spec = TaskSpec::nav2d(gx, gy);
            let mut env = make_env(&spec, 3).unwrap();
            let mut explorer = RandomWalkExplorer::new(&schema);
            let mut state = env.reset();
            let mut traj = Vec::new();
            for _ in 0..40 {
                let action = explorer.act(&mut rng);
                let (next, reward) = env.step(&action).unwrap();
                traj.push(Transition {
                    state: state.observation.clone(),
                    action,
                    reward,
                    next_state: next.observation.clone(),
                    terminal: false,
                    provenance: Provenance::Real,
                });
                state = next;
            }
            trajectories.push((spec, traj));
        }
        let (mean, var) = sfi_error(&schema, &trajectories).unwrap();
        assert!(mean < 1e-6, "mean normalized error {mean}");
        assert!(var < 1e-12);
    }
}
