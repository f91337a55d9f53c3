//! Task inference: recurrent encoder from context tuples to a latent
//! task posterior.
//!
//! A context tuple is one interaction `(s, a, r, s')`. The encoder feeds
//! the flattened, normalised tuples through a GRU in time order and maps
//! each hidden state to a diagonal Gaussian over the latent task variable.
//! The posterior after the final tuple is what conditions the world model
//! and the policy; per-step posteriors are exposed for adaptation curves.
//!
//! A product-of-Gaussians encoder (shared MLP per tuple, precision-weighted
//! combination) is included as the order-invariant ablation.

use rand_chacha::ChaCha8Rng;

use crate::env::{Action, EnvSchema};
use crate::error::{Error, Result};
use crate::nn::{GaussianHead, GruCell, GruSpec, Mlp, MlpSpec, ParameterStore, Tape, Var};
use crate::rng::standard_normal;

/// Softplus floor keeping posterior scales strictly positive.
pub const STD_FLOOR: f64 = 1e-3;

/// Diagonal Gaussian over the latent task variable.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LatentPosterior {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentPosterior {
    /// Unit Gaussian prior.
    pub fn prior(dim: usize) -> Self {
        LatentPosterior {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Closed-form KL divergence to the unit Gaussian:
    /// `sum_i 0.5 * (std_i^2 + mean_i^2 - 1 - 2 ln std_i)`.
    pub fn kl_to_prior(&self) -> f64 {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(&m, &s)| 0.5 * (s * s + m * m - 1.0 - 2.0 * s.ln()))
            .sum()
    }

    /// Reparameterised draw `mean + std * eps`.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(&m, &s)| m + s * standard_normal(rng))
            .collect()
    }

    /// Precision-weighted product of two diagonal Gaussians.
    pub fn product(&self, other: &LatentPosterior) -> LatentPosterior {
        let mut mean = Vec::with_capacity(self.dim());
        let mut std = Vec::with_capacity(self.dim());
        for i in 0..self.dim() {
            let p1 = 1.0 / (self.std[i] * self.std[i]);
            let p2 = 1.0 / (other.std[i] * other.std[i]);
            let prec = p1 + p2;
            mean.push((self.mean[i] * p1 + other.mean[i] * p2) / prec);
            std.push((1.0 / prec).sqrt());
        }
        LatentPosterior { mean, std }
    }
}

/// One interaction, the unit of context.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextTuple {
    pub state: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

impl ContextTuple {
    /// Flat encoding `[norm(s), enc(a), r / reward_scale, norm(s')]` used
    /// by both encoder variants. Rewards share the scale used by the
    /// reconstruction loss so no single entry dominates the GRU input.
    pub fn encode(&self, schema: &EnvSchema) -> Result<Vec<f64>> {
        if self.state.len() != schema.obs_dim() || self.next_state.len() != schema.obs_dim() {
            return Err(Error::Shape(format!(
                "context tuple state dims {} / {} vs schema {}",
                self.state.len(),
                self.next_state.len(),
                schema.obs_dim()
            )));
        }
        let mut v = schema.normalize_obs(&self.state);
        v.extend(schema.encode_action(&self.action)?);
        v.push(self.reward / schema.reward_scale);
        v.extend(schema.normalize_obs(&self.next_state));
        Ok(v)
    }
}

/// KL to the unit prior built on the tape from `(mean, std)` nodes, for
/// use inside training losses.
pub fn kl_to_prior_on_tape(tape: &mut Tape, mean: Var, std: Var) -> Result<Var> {
    let dim = tape.value(mean).len() as f64;
    let mean_sq = tape.sq_norm(mean)?;
    let std_sq = tape.sq_norm(std)?;
    let ln_std = tape.ln(std)?;
    let ln_sum = tape.sum(ln_std);
    let a = tape.add(mean_sq, std_sq)?;
    let b = tape.scale(ln_sum, -2.0);
    let c = tape.add(a, b)?;
    let d = tape.add_const(c, -dim);
    Ok(tape.scale(d, 0.5))
}

/// Reparameterised sample on the tape: `mean + std * eps` with `eps` a
/// constant input, so the gradient flows into mean and std.
pub fn sample_latent_on_tape(tape: &mut Tape, mean: Var, std: Var, eps: &[f64]) -> Result<Var> {
    let e = tape.input_vec(eps);
    let scaled = tape.mul(std, e)?;
    tape.add(mean, scaled)
}

/// GRU encoder `q(z | c_1..c_t)`.
#[derive(Debug, Clone)]
pub struct TaskEncoder {
    gru: GruCell,
    head: GaussianHead,
    latent_dim: usize,
    input_dim: usize,
}

impl TaskEncoder {
    pub fn new(
        store: &mut ParameterStore,
        schema: &EnvSchema,
        latent_dim: usize,
        hidden_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let input_dim = schema.context_tuple_dim();
        let gru = GruCell::new(
            store,
            "encoder.gru",
            GruSpec {
                input_dim,
                hidden_dim,
            },
            rng,
        )?;
        let head = GaussianHead::new(
            store,
            "encoder.head",
            hidden_dim,
            latent_dim,
            STD_FLOOR,
            rng,
        )?;
        Ok(TaskEncoder {
            gru,
            head,
            latent_dim,
            input_dim,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn check_tuples(&self, tuples: &[Vec<f64>]) -> Result<()> {
        for t in tuples {
            if t.len() != self.input_dim {
                return Err(Error::Shape(format!(
                    "encoded tuple width {} vs encoder input {}",
                    t.len(),
                    self.input_dim
                )));
            }
        }
        Ok(())
    }

    /// Runs the GRU over encoded tuples and returns the final posterior as
    /// `(mean, std)` tape nodes. Errors on an empty context, since the
    /// prior has no parameters to differentiate.
    pub fn final_posterior_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        tuples: &[Vec<f64>],
    ) -> Result<(Var, Var)> {
        self.check_tuples(tuples)?;
        if tuples.is_empty() {
            return Err(Error::InsufficientData(
                "cannot differentiate through an empty context".into(),
            ));
        }
        let mut h = tape.input(self.gru.initial_hidden());
        for t in tuples {
            let x = tape.input_vec(t);
            h = self.gru.step(tape, store, x, h)?;
        }
        self.head.forward(tape, store, h)
    }

    /// Per-step posteriors in the value domain; index `t` conditions on
    /// tuples `0..=t` only.
    pub fn encode(&self, store: &ParameterStore, tuples: &[Vec<f64>]) -> Result<Vec<LatentPosterior>> {
        self.check_tuples(tuples)?;
        let mut tape = Tape::new();
        let mut h = tape.input(self.gru.initial_hidden());
        let mut out = Vec::with_capacity(tuples.len());
        for t in tuples {
            let x = tape.input_vec(t);
            h = self.gru.step(&mut tape, store, x, h)?;
            let (mean, std) = self.head.forward(&mut tape, store, h)?;
            out.push(LatentPosterior {
                mean: tape.value(mean).data().to_vec(),
                std: tape.value(std).data().to_vec(),
            });
        }
        Ok(out)
    }

    /// Posterior after the whole context; the unit prior when it is empty.
    pub fn final_posterior(
        &self,
        store: &ParameterStore,
        tuples: &[Vec<f64>],
    ) -> Result<LatentPosterior> {
        Ok(self
            .encode(store, tuples)?
            .pop()
            .unwrap_or_else(|| LatentPosterior::prior(self.latent_dim)))
    }
}

/// Order-invariant ablation encoder: a shared MLP maps each tuple to an
/// independent Gaussian factor and the posterior is their product.
#[derive(Debug, Clone)]
pub struct PogEncoder {
    trunk: Mlp,
    head: GaussianHead,
    latent_dim: usize,
}

impl PogEncoder {
    pub fn new(
        store: &mut ParameterStore,
        schema: &EnvSchema,
        latent_dim: usize,
        hidden_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let trunk = Mlp::new(
            store,
            "pog.trunk",
            MlpSpec::new(schema.context_tuple_dim(), &[hidden_dim], hidden_dim),
            rng,
        )?;
        let head = GaussianHead::new(store, "pog.head", hidden_dim, latent_dim, STD_FLOOR, rng)?;
        Ok(PogEncoder {
            trunk,
            head,
            latent_dim,
        })
    }

    /// Gaussian factor for a single tuple.
    pub fn factor(&self, store: &ParameterStore, tuple: &[f64]) -> Result<LatentPosterior> {
        let mut tape = Tape::new();
        let x = tape.input_vec(tuple);
        let f = self.trunk.forward(&mut tape, store, x)?;
        let act = tape.tanh(f);
        let (mean, std) = self.head.forward(&mut tape, store, act)?;
        Ok(LatentPosterior {
            mean: tape.value(mean).data().to_vec(),
            std: tape.value(std).data().to_vec(),
        })
    }

    /// Product of the per-tuple factors. Errors on an empty context.
    pub fn encode(&self, store: &ParameterStore, tuples: &[Vec<f64>]) -> Result<LatentPosterior> {
        let mut acc: Option<LatentPosterior> = None;
        for t in tuples {
            let f = self.factor(store, t)?;
            acc = Some(match acc {
                None => f,
                Some(prev) => prev.product(&f),
            });
        }
        acc.ok_or_else(|| Error::InsufficientData("product of zero Gaussian factors".into()))
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{schema_for, EnvId};
    use crate::rng::{derive_rng, rng_from_seed};

    fn toy_tuples(n: usize, seed: u64) -> (EnvSchema, Vec<Vec<f64>>) {
        use rand::Rng;
        let schema = schema_for(EnvId::Nav2d);
        let mut rng = rng_from_seed(seed);
        let tuples = (0..n)
            .map(|_| {
                let t = ContextTuple {
                    state: vec![rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)],
                    action: Action::Continuous(vec![
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ]),
                    reward: rng.random_range(-8.0..0.0),
                    next_state: vec![rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)],
                };
                t.encode(&schema).unwrap()
            })
            .collect();
        (schema, tuples)
    }

    fn encoder(schema: &EnvSchema, seed: u64) -> (ParameterStore, TaskEncoder) {
        let mut store = ParameterStore::new("encoder");
        let mut rng = derive_rng(seed, "enc-init");
        let enc = TaskEncoder::new(&mut store, schema, 4, 16, &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn empty_context_returns_unit_prior() {
        let (schema, _) = toy_tuples(0, 0);
        let (store, enc) = encoder(&schema, 1);
        let p = enc.final_posterior(&store, &[]).unwrap();
        assert_eq!(p.mean, vec![0.0; 4]);
        assert_eq!(p.std, vec![1.0; 4]);
        assert_eq!(p.kl_to_prior(), 0.0);
    }

    #[test]
    fn posterior_sequence_matches_input_length_and_is_causal() {
        let (schema, tuples) = toy_tuples(6, 2);
        let (store, enc) = encoder(&schema, 3);
        let seq = enc.encode(&store, &tuples).unwrap();
        assert_eq!(seq.len(), 6);
        // Appending tuples must not change earlier posteriors.
        let prefix = enc.encode(&store, &tuples[..3]).unwrap();
        for (a, b) in prefix.iter().zip(&seq[..3]) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn kl_examples() {
        let p = LatentPosterior::prior(4);
        assert_eq!(p.kl_to_prior(), 0.0);
        let q = LatentPosterior {
            mean: vec![1.0, 0.0, 0.0, 0.0],
            std: vec![1.0; 4],
        };
        assert!((q.kl_to_prior() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_reparameterized_and_seeded() {
        let post = LatentPosterior {
            mean: vec![0.3, -0.7],
            std: vec![1e-12, 1e-12],
        };
        let mut rng = rng_from_seed(5);
        let z = post.sample(&mut rng);
        assert!((z[0] - 0.3).abs() < 1e-9 && (z[1] + 0.7).abs() < 1e-9);

        let post = LatentPosterior {
            mean: vec![0.0, 1.0],
            std: vec![0.5, 2.0],
        };
        let mut a = rng_from_seed(7);
        let mut b = rng_from_seed(7);
        assert_eq!(post.sample(&mut a), post.sample(&mut b));
    }

    #[test]
    fn sample_mean_converges_to_posterior_mean() {
        let post = LatentPosterior {
            mean: vec![1.5, -2.0],
            std: vec![0.8, 1.2],
        };
        let mut rng = rng_from_seed(11);
        let n = 100_000;
        let mut acc = vec![0.0; 2];
        for _ in 0..n {
            for (a, z) in acc.iter_mut().zip(post.sample(&mut rng)) {
                *a += z;
            }
        }
        for i in 0..2 {
            let emp = acc[i] / n as f64;
            let tol = 3.0 * post.std[i] / (n as f64).sqrt();
            assert!(
                (emp - post.mean[i]).abs() < tol,
                "dim {i}: {emp} vs {} (tol {tol})",
                post.mean[i]
            );
        }
    }

    #[test]
    fn pog_is_permutation_invariant_and_sharpens() {
        let (schema, mut tuples) = toy_tuples(5, 8);
        let mut store = ParameterStore::new("pog");
        let mut rng = derive_rng(9, "pog-init");
        let enc = PogEncoder::new(&mut store, &schema, 4, 16, &mut rng).unwrap();

        let p1 = enc.encode(&store, &tuples).unwrap();
        tuples.reverse();
        let p2 = enc.encode(&store, &tuples).unwrap();
        for i in 0..4 {
            assert!((p1.mean[i] - p2.mean[i]).abs() < 1e-9);
            assert!((p1.std[i] - p2.std[i]).abs() < 1e-9);
        }

        // Two identical factors: same mean, std shrinks by sqrt(2).
        let f = enc.factor(&store, &tuples[0]).unwrap();
        let prod = f.product(&f);
        for i in 0..4 {
            assert!((prod.mean[i] - f.mean[i]).abs() < 1e-12);
            assert!((prod.std[i] - f.std[i] / 2f64.sqrt()).abs() < 1e-12);
        }

        assert!(enc.encode(&store, &[]).is_err());
    }

    #[test]
    fn gru_encoder_is_order_sensitive() {
        let (schema, mut tuples) = toy_tuples(6, 12);
        let (store, enc) = encoder(&schema, 13);
        let fwd = enc.final_posterior(&store, &tuples).unwrap();
        tuples.reverse();
        let rev = enc.final_posterior(&store, &tuples).unwrap();
        let diff: f64 = fwd
            .mean
            .iter()
            .zip(&rev.mean)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9, "GRU should care about order, diff {diff}");
    }
}
