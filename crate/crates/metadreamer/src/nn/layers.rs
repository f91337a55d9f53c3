//! Layer types: multilayer perceptron, GRU cell, diagonal Gaussian head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

use super::store::{ParamId, ParameterStore};
use super::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
}

/// What happens to the final linear output of an [`Mlp`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum OutputSquash {
    Identity,
    /// `scale * tanh(y)`, bounding every output to `(-scale, scale)`.
    BoundedTanh(f64),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub squash: OutputSquash,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize) -> Self {
        MlpSpec {
            input_dim,
            hidden: hidden.to_vec(),
            output_dim,
            activation: Activation::Tanh,
            squash: OutputSquash::Identity,
        }
    }

    pub fn with_squash(mut self, squash: OutputSquash) -> Self {
        self.squash = squash;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend_from_slice(&self.hidden);
        w.push(self.output_dim);
        w
    }
}

fn uniform_tensor(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::matrix(rows, cols, data).expect("sized by construction")
}

fn add_linear(
    store: &mut ParameterStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ParamId, ParamId)> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let w = store.add(
        &format!("{prefix}.weight"),
        uniform_tensor(fan_out, fan_in, bound, rng),
    )?;
    let b = store.add(
        &format!("{prefix}.bias"),
        uniform_tensor(fan_out, 1, bound, rng),
    )?;
    Ok((w, b))
}

fn linear(tape: &mut Tape, store: &ParameterStore, w: ParamId, b: ParamId, x: Var) -> Result<Var> {
    let wv = tape.param(store, w);
    let bv = tape.param(store, b);
    let wx = tape.matvec(wv, x)?;
    tape.add(wx, bv)
}

/// Fully connected network evaluated on the tape.
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// Registers weights in `store` under `prefix.layerN.{weight,bias}` with
    /// uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialisation.
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        spec: MlpSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let widths = spec.widths();
        let mut layers = Vec::new();
        for l in 0..widths.len() - 1 {
            layers.push(add_linear(
                store,
                &format!("{prefix}.layer{l}"),
                widths[l],
                widths[l + 1],
                rng,
            )?);
        }
        Ok(Mlp { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            h = linear(tape, store, w, b, h)?;
            if l < last {
                h = match self.spec.activation {
                    Activation::Tanh => tape.tanh(h),
                    Activation::Relu => tape.relu(h),
                };
            }
        }
        match self.spec.squash {
            OutputSquash::Identity => Ok(h),
            OutputSquash::BoundedTanh(scale) => {
                let t = tape.tanh(h);
                Ok(tape.scale(t, scale))
            }
        }
    }

    /// Convenience evaluation outside any surrounding graph.
    pub fn eval(&self, store: &ParameterStore, x: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let xv = tape.input_vec(x);
        let y = self.forward(&mut tape, store, xv)?;
        Ok(tape.value(y).data().to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GruSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
}

/// Gated recurrent unit, one step at a time.
///
/// Convention: with update gate `u`, reset gate `r`, candidate `n`,
/// the next hidden state is `(1 - u) * h + u * n`, so `u = 0` carries the
/// old state through unchanged.
#[derive(Debug, Clone)]
pub struct GruCell {
    spec: GruSpec,
    w_reset: (ParamId, ParamId),
    u_reset: ParamId,
    w_update: (ParamId, ParamId),
    u_update: ParamId,
    w_cand: (ParamId, ParamId),
    u_cand: ParamId,
}

impl GruCell {
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        spec: GruSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (i, h) = (spec.input_dim, spec.hidden_dim);
        let bound = 1.0 / (h.max(1) as f64).sqrt();
        let u_reset = store.add(
            &format!("{prefix}.reset.recurrent"),
            uniform_tensor(h, h, bound, rng),
        )?;
        let u_update = store.add(
            &format!("{prefix}.update.recurrent"),
            uniform_tensor(h, h, bound, rng),
        )?;
        let u_cand = store.add(
            &format!("{prefix}.candidate.recurrent"),
            uniform_tensor(h, h, bound, rng),
        )?;
        let w_reset = add_linear(store, &format!("{prefix}.reset"), i, h, rng)?;
        let w_update = add_linear(store, &format!("{prefix}.update"), i, h, rng)?;
        let w_cand = add_linear(store, &format!("{prefix}.candidate"), i, h, rng)?;
        Ok(GruCell {
            spec,
            w_reset,
            u_reset,
            w_update,
            u_update,
            w_cand,
            u_cand,
        })
    }

    pub fn spec(&self) -> GruSpec {
        self.spec
    }

    pub fn initial_hidden(&self) -> Tensor {
        Tensor::zeros(self.spec.hidden_dim, 1)
    }

    pub fn step(&self, tape: &mut Tape, store: &ParameterStore, x: Var, h: Var) -> Result<Var> {
        let gate = |tape: &mut Tape, wx: (ParamId, ParamId), uh: ParamId, h: Var, x: Var| {
            let lin = linear(tape, store, wx.0, wx.1, x)?;
            let u = tape.param(store, uh);
            let rec = tape.matvec(u, h)?;
            tape.add(lin, rec)
        };
        let r_pre = gate(tape, self.w_reset, self.u_reset, h, x)?;
        let r = tape.sigmoid(r_pre);
        let u_pre = gate(tape, self.w_update, self.u_update, h, x)?;
        let u = tape.sigmoid(u_pre);

        let cand_lin = linear(tape, store, self.w_cand.0, self.w_cand.1, x)?;
        let u_cand = tape.param(store, self.u_cand);
        let rec = tape.matvec(u_cand, h)?;
        let gated_rec = tape.mul(r, rec)?;
        let n_pre = tape.add(cand_lin, gated_rec)?;
        let n = tape.tanh(n_pre);

        // h' = (1 - u) * h + u * n
        let one_minus_u = tape.affine(u, -1.0, 1.0);
        let keep = tape.mul(one_minus_u, h)?;
        let write = tape.mul(u, n)?;
        tape.add(keep, write)
    }
}

/// Linear heads producing a diagonal Gaussian `(mean, std)`.
///
/// The standard deviation goes through a softplus and gets `floor` added,
/// so it can never collapse to zero.
#[derive(Debug, Clone)]
pub struct GaussianHead {
    mean: (ParamId, ParamId),
    raw_std: (ParamId, ParamId),
    floor: f64,
}

impl GaussianHead {
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        input_dim: usize,
        output_dim: usize,
        floor: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mean = add_linear(store, &format!("{prefix}.mean"), input_dim, output_dim, rng)?;
        let raw_std = add_linear(store, &format!("{prefix}.std"), input_dim, output_dim, rng)?;
        Ok(GaussianHead {
            mean,
            raw_std,
            floor,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        features: Var,
    ) -> Result<(Var, Var)> {
        let mean = linear(tape, store, self.mean.0, self.mean.1, features)?;
        let raw = linear(tape, store, self.raw_std.0, self.raw_std.1, features)?;
        let sp = tape.softplus(raw);
        let std = tape.add_const(sp, self.floor);
        Ok((mean, std))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn mlp_shapes_and_determinism() {
        let mut store = ParameterStore::new("t");
        let mut rng = rng_from_seed(3);
        let mlp = Mlp::new(&mut store, "net", MlpSpec::new(3, &[8, 8], 2), &mut rng).unwrap();
        let y1 = mlp.eval(&store, &[0.1, -0.2, 0.3]).unwrap();
        let y2 = mlp.eval(&store, &[0.1, -0.2, 0.3]).unwrap();
        assert_eq!(y1.len(), 2);
        assert_eq!(y1, y2);
    }

    #[test]
    fn bounded_squash_respects_bound() {
        let mut store = ParameterStore::new("t");
        let mut rng = rng_from_seed(4);
        let spec = MlpSpec::new(2, &[16], 3).with_squash(OutputSquash::BoundedTanh(3.0));
        let mlp = Mlp::new(&mut store, "net", spec, &mut rng).unwrap();
        let y = mlp.eval(&store, &[100.0, -50.0]).unwrap();
        assert!(y.iter().all(|v| v.abs() < 3.0));
    }

    #[test]
    fn zero_update_gate_preserves_hidden_state() {
        // Force the update gate to 0 by making its weights hugely negative;
        // the hidden state must pass through almost unchanged.
        let mut store = ParameterStore::new("t");
        let mut rng = rng_from_seed(5);
        let gru = GruCell::new(
            &mut store,
            "gru",
            GruSpec {
                input_dim: 2,
                hidden_dim: 4,
            },
            &mut rng,
        )
        .unwrap();
        store
            .set_value("gru.update.bias", Tensor::vector(&[-50.0; 4]))
            .unwrap();
        store
            .set_value("gru.update.weight", Tensor::zeros(4, 2))
            .unwrap();
        store
            .set_value("gru.update.recurrent", Tensor::zeros(4, 4))
            .unwrap();
        let mut tape = Tape::new();
        let x = tape.input_vec(&[0.7, -0.3]);
        let h0 = Tensor::vector(&[0.5, -0.25, 0.1, 0.9]);
        let h = tape.input(h0.clone());
        let h1 = gru.step(&mut tape, &store, x, h).unwrap();
        for (a, b) in tape.value(h1).data().iter().zip(h0.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_head_std_stays_above_floor() {
        let mut store = ParameterStore::new("t");
        let mut rng = rng_from_seed(6);
        let head = GaussianHead::new(&mut store, "head", 3, 2, 1e-3, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.input_vec(&[5.0, -9.0, 2.0]);
        let (_, std) = head.forward(&mut tape, &store, x).unwrap();
        assert!(tape.value(std).data().iter().all(|&s| s >= 1e-3));
    }
}
