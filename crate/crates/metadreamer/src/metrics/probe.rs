//! Disentanglement probing: how well latent difference vectors betray
//! which hidden factor changed between two otherwise identical tasks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::env::{make_env_with, schema_for, EnvId, EnvOptions, RandomWalkExplorer, TaskSpec};
use crate::error::{Error, Result};
use crate::infer::{ContextTuple, TaskEncoder};
use crate::nn::ParameterStore;
use crate::rng::derive_rng;

/// Shape of one probing round.
#[derive(Debug, Clone, Copy)]
pub struct ProbeConfig {
    /// Labeled difference vectors produced per factor.
    pub vectors_per_factor: usize,
    /// Task pairs averaged into each difference vector.
    pub pairs_per_vector: usize,
    /// Steps of the random-walk trajectory encoded per task.
    pub rollout_len: usize,
    /// Independent train/test splits of the classifier; the score is
    /// their mean, the spread their standard deviation.
    pub trials: usize,
}

impl ProbeConfig {
    /// Cheap per-iteration setting used to gate imagination.
    pub fn quick(vectors_per_factor: usize, rollout_len: usize) -> Self {
        ProbeConfig {
            vectors_per_factor,
            pairs_per_vector: 1,
            rollout_len,
            trials: 1,
        }
    }

    /// Reporting-grade setting.
    pub fn full(rollout_len: usize) -> Self {
        ProbeConfig {
            vectors_per_factor: 200,
            pairs_per_vector: 4,
            rollout_len,
            trials: 3,
        }
    }
}

/// One trajectory's posterior mean under a task where every factor but
/// `vary` is pinned. Both tasks of a pair replay the same action stream,
/// so the difference vector isolates the varied factor.
fn paired_difference(
    encoder: &TaskEncoder,
    store: &ParameterStore,
    env: EnvId,
    options: EnvOptions,
    vary: usize,
    rollout_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let schema = schema_for(env);
    let mut base: Vec<(String, f64)> = schema
        .factors
        .iter()
        .map(|f| (f.name.clone(), rng.random_range(f.lo..=f.hi)))
        .collect();
    let spec_a = {
        base[vary].1 = {
            let f = &schema.factors[vary];
            rng.random_range(f.lo..=f.hi)
        };
        TaskSpec {
            env,
            factors: base.iter().cloned().collect(),
        }
    };
    let spec_b = {
        base[vary].1 = {
            let f = &schema.factors[vary];
            rng.random_range(f.lo..=f.hi)
        };
        TaskSpec {
            env,
            factors: base.iter().cloned().collect(),
        }
    };

    let env_seed: u64 = rng.random();
    let action_seed: u64 = rng.random();
    let mut means = Vec::with_capacity(2);
    for spec in [&spec_a, &spec_b] {
        let mut e = make_env_with(spec, env_seed, options)?;
        let mut explorer = RandomWalkExplorer::new(&schema);
        let mut act_rng = derive_rng(action_seed, "probe-actions");
        let mut state = e.reset();
        let mut tuples = Vec::with_capacity(rollout_len);
        for _ in 0..rollout_len {
            let action = explorer.act(&mut act_rng);
            let (next, reward) = e.step(&action)?;
            tuples.push(
                ContextTuple {
                    state: state.observation.clone(),
                    action,
                    reward,
                    next_state: next.observation.clone(),
                }
                .encode(&schema)?,
            );
            state = next;
            if state.done {
                state = e.reset();
            }
        }
        means.push(encoder.final_posterior(store, &tuples)?.mean);
    }
    Ok(means[0]
        .iter()
        .zip(&means[1])
        .map(|(a, b)| (a - b).abs())
        .collect())
}

/// Labeled difference vectors for every factor of `env`.
pub fn probe_difference_vectors(
    encoder: &TaskEncoder,
    store: &ParameterStore,
    env: EnvId,
    options: EnvOptions,
    config: &ProbeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let schema = schema_for(env);
    if schema.factors.is_empty() {
        return Err(Error::InsufficientData("env declares no factors".into()));
    }
    if config.vectors_per_factor == 0 || config.pairs_per_vector == 0 {
        return Err(Error::Config("probe sizes must be >= 1".into()));
    }
    let dim = encoder.latent_dim();
    let mut groups = Vec::with_capacity(schema.factors.len());
    for k in 0..schema.factors.len() {
        let mut vectors = Vec::with_capacity(config.vectors_per_factor);
        for _ in 0..config.vectors_per_factor {
            let mut acc = vec![0.0; dim];
            for _ in 0..config.pairs_per_vector {
                let d = paired_difference(
                    encoder,
                    store,
                    env,
                    options,
                    k,
                    config.rollout_len,
                    rng,
                )?;
                for (a, v) in acc.iter_mut().zip(&d) {
                    *a += v;
                }
            }
            for a in &mut acc {
                *a /= config.pairs_per_vector as f64;
            }
            vectors.push(acc);
        }
        groups.push(vectors);
    }
    Ok(groups)
}

/// Multinomial logistic regression on pre-computed difference vectors.
/// `groups[k]` holds the vectors labeled with factor `k`. Returns the
/// held-out accuracy as a percentage, averaged over `trials` splits,
/// with its standard deviation.
pub fn score_difference_vectors(
    groups: &[Vec<Vec<f64>>],
    trials: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let k = groups.len();
    if k < 2 {
        return Err(Error::InsufficientData(
            "need at least two factors to classify".into(),
        ));
    }
    if trials == 0 {
        return Err(Error::Config("at least one trial required".into()));
    }
    let dim = groups
        .first()
        .and_then(|g| g.first())
        .map(|v| v.len())
        .ok_or_else(|| Error::InsufficientData("empty difference-vector group".into()))?;
    let mut labeled: Vec<(usize, &[f64])> = Vec::new();
    for (label, vectors) in groups.iter().enumerate() {
        if vectors.len() < 5 {
            return Err(Error::InsufficientData(format!(
                "factor {label} has {} vectors, need >= 5 for a split",
                vectors.len()
            )));
        }
        for v in vectors {
            if v.len() != dim {
                return Err(Error::Shape("ragged difference vectors".into()));
            }
            labeled.push((label, v));
        }
    }

    let mut accuracies = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(rng);
        let split = (labeled.len() * 4) / 5;
        let (train_idx, test_idx) = order.split_at(split);

        // Weights and biases for K classes over `dim` features; plain
        // full-batch gradient descent on softmax cross-entropy.
        let mut w = vec![vec![0.0; dim]; k];
        let mut b = vec![0.0; k];
        let lr = 0.5;
        for _ in 0..200 {
            let mut gw = vec![vec![0.0; dim]; k];
            let mut gb = vec![0.0; k];
            for &i in train_idx {
                let (label, x) = labeled[i];
                let p = softmax_scores(&w, &b, x);
                for c in 0..k {
                    let err = p[c] - if c == label { 1.0 } else { 0.0 };
                    gb[c] += err;
                    for (g, xv) in gw[c].iter_mut().zip(x) {
                        *g += err * xv;
                    }
                }
            }
            let n = train_idx.len() as f64;
            for c in 0..k {
                b[c] -= lr * gb[c] / n;
                for (wv, g) in w[c].iter_mut().zip(&gw[c]) {
                    *wv -= lr * g / n;
                }
            }
        }

        let mut correct = 0usize;
        for &i in test_idx {
            let (label, x) = labeled[i];
            let p = softmax_scores(&w, &b, x);
            let pred = p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(c, _)| c)
                .unwrap_or(0);
            if pred == label {
                correct += 1;
            }
        }
        accuracies.push(100.0 * correct as f64 / test_idx.len() as f64);
    }

    let mean = accuracies.iter().sum::<f64>() / trials as f64;
    let var = accuracies
        .iter()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / trials as f64;
    Ok((mean, var.sqrt()))
}

fn softmax_scores(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = w
        .iter()
        .zip(b)
        .map(|(row, bias)| row.iter().zip(x).map(|(wv, xv)| wv * xv).sum::<f64>() + bias)
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// End-to-end disentanglement score for a trained encoder on one env.
pub fn disentanglement_score(
    encoder: &TaskEncoder,
    store: &ParameterStore,
    env: EnvId,
    options: EnvOptions,
    config: &ProbeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let groups = probe_difference_vectors(encoder, store, env, options, config, rng)?;
    score_difference_vectors(&groups, config.trials, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    /// Difference vectors where factor `k` lights up dimension `k`.
    fn disentangled_groups(k: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<Vec<f64>>> {
        (0..k)
            .map(|label| {
                (0..n)
                    .map(|_| {
                        let mut v: Vec<f64> =
                            (0..k).map(|_| rng.random_range(0.0..0.05)).collect();
                        v[label] = rng.random_range(0.5..1.5);
                        v
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn separable_vectors_score_one_hundred() {
        let mut rng = rng_from_seed(1);
        let groups = disentangled_groups(3, 60, &mut rng);
        let (score, spread) = score_difference_vectors(&groups, 3, &mut rng).unwrap();
        assert_eq!(score, 100.0);
        assert_eq!(spread, 0.0);
    }

    #[test]
    fn uninformative_vectors_score_near_chance() {
        // The chance floor for K classes is 100/K; averaged over many
        // splits a label-free feature cannot beat it by much.
        let k = 4;
        let mut rng = rng_from_seed(2);
        let mut scores = Vec::new();
        for _ in 0..20 {
            let groups: Vec<Vec<Vec<f64>>> = (0..k)
                .map(|_| {
                    (0..30)
                        .map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect())
                        .collect()
                })
                .collect();
            let (score, _) = score_difference_vectors(&groups, 1, &mut rng).unwrap();
            scores.push(score);
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let chance = 100.0 / k as f64;
        assert!(
            (mean - chance).abs() <= 10.0,
            "mean score {mean} strays from chance {chance}"
        );
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let mut rng = rng_from_seed(3);
        assert!(score_difference_vectors(&[], 1, &mut rng).is_err());
        let one = disentangled_groups(1, 20, &mut rng);
        assert!(score_difference_vectors(&one, 1, &mut rng).is_err());
        let tiny = vec![vec![vec![0.0; 2]; 2]; 2];
        assert!(score_difference_vectors(&tiny, 1, &mut rng).is_err());
    }

    #[test]
    fn probe_vectors_have_expected_shape_and_determinism() {
        use crate::env::schema_for;
        let env = EnvId::Nav2d;
        let schema = schema_for(env);
        let mut store = ParameterStore::new("encoder");
        let mut init = rng_from_seed(4);
        let encoder = TaskEncoder::new(&mut store, &schema, 3, 8, &mut init).unwrap();
        let config = ProbeConfig::quick(2, 12);
        let run = |seed| {
            let mut rng = rng_from_seed(seed);
            probe_difference_vectors(
                &encoder,
                &store,
                env,
                EnvOptions::default(),
                &config,
                &mut rng,
            )
            .unwrap()
        };
        let a = run(7);
        let b = run(7);
        assert_eq!(a.len(), schema.factors.len());
        assert_eq!(a[0].len(), 2);
        assert_eq!(a[0][0].len(), 3);
        assert_eq!(a, b);
        assert!(a
            .iter()
            .flatten()
            .flatten()
            .all(|v| v.is_finite() && *v >= 0.0));
    }
}
