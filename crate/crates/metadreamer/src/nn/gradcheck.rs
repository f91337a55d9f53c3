//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::tensor::Tensor;

use super::store::ParameterStore;
use super::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative deviation between analytic and numeric gradient.
    pub max_rel_err: f64,
    /// Parameter entry where the maximum occurred, as `store/name[i]`.
    pub worst: String,
    /// Total scalar coordinates compared.
    pub n_checked: usize,
}

/// Compares the tape gradient of `loss_fn` against central finite
/// differences over every scalar parameter in `stores`.
///
/// `loss_fn` must be a pure function of the store contents: it is invoked
/// `2n + 1` times, so any randomness has to be frozen into captured inputs
/// beforehand. Relative error uses a `1e-6` denominator floor so that
/// near-zero gradients do not report spurious blow-ups.
pub fn finite_diff_check<F>(
    mut loss_fn: F,
    stores: &mut [&mut ParameterStore],
    eps: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[&ParameterStore]) -> Result<Var>,
{
    let eval = |loss_fn: &mut F, stores: &[&mut ParameterStore]| -> Result<f64> {
        let views: Vec<&ParameterStore> = stores.iter().map(|s| &**s).collect();
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, &views)?;
        Ok(tape.scalar_value(loss))
    };

    // Analytic pass.
    for store in stores.iter_mut() {
        store.zero_grads();
    }
    {
        let views: Vec<&ParameterStore> = stores.iter().map(|s| &**s).collect();
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, &views)?;
        drop(views);
        tape.backward(loss, stores)?;
    }
    let analytic: Vec<Vec<Tensor>> = stores
        .iter()
        .map(|s| {
            (0..s.n_tensors())
                .map(|i| {
                    let id = s.id_of_index(i);
                    s.grad(id).clone()
                })
                .collect()
        })
        .collect();

    let mut max_rel_err: f64 = 0.0;
    let mut worst = String::new();
    let mut n_checked = 0;

    for si in 0..stores.len() {
        for ti in 0..stores[si].n_tensors() {
            let n = analytic[si][ti].len();
            for k in 0..n {
                let id = stores[si].id_of_index(ti);
                let w0 = stores[si].value(id).data()[k];
                let h = eps * w0.abs().max(1.0);

                stores[si].nudge(ti, k, w0 + h);
                let up = eval(&mut loss_fn, stores)?;
                stores[si].nudge(ti, k, w0 - h);
                let down = eval(&mut loss_fn, stores)?;
                stores[si].nudge(ti, k, w0);

                let numeric = (up - down) / (2.0 * h);
                let exact = analytic[si][ti].data()[k];
                let denom = numeric.abs().max(exact.abs()).max(1e-6);
                let rel = (numeric - exact).abs() / denom;
                n_checked += 1;
                if rel > max_rel_err {
                    max_rel_err = rel;
                    let id = stores[si].id_of_index(ti);
                    worst = format!(
                        "{}/{}[{k}]",
                        stores[si].label(),
                        stores[si].name_of(id)
                    );
                }
            }
        }
    }

    // Leave the stores with the analytic gradients cleared.
    for store in stores.iter_mut() {
        store.zero_grads();
    }

    Ok(GradCheckReport {
        max_rel_err,
        worst,
        n_checked,
    })
}
