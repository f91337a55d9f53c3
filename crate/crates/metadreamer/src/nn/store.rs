//! Named parameter storage with gradient slots and Adam moments.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

static NEXT_STORE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to one parameter tensor inside one store. Cheap to copy and safe
/// to hold across tapes; it never dangles because stores only grow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId {
    pub(crate) store: u32,
    pub(crate) index: u32,
}

/// A collection of named tensors with one gradient slot and one pair of
/// Adam moments per entry. Encoder, decoder, actor, and critic each get
/// their own store so updates can be applied per phase.
#[derive(Debug)]
pub struct ParameterStore {
    id: u32,
    label: String,
    names: Vec<String>,
    by_name: HashMap<String, usize>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    moment1: Vec<Tensor>,
    moment2: Vec<Tensor>,
    adam_steps: u64,
    fresh_grads: bool,
}

impl ParameterStore {
    pub fn new(label: &str) -> Self {
        ParameterStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            label: label.to_string(),
            names: Vec::new(),
            by_name: HashMap::new(),
            values: Vec::new(),
            grads: Vec::new(),
            moment1: Vec::new(),
            moment2: Vec::new(),
            adam_steps: 0,
            fresh_grads: false,
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub(crate) fn store_id(&self) -> u32 {
        self.id
    }

    /// Registers `tensor` under `name` and returns its handle.
    pub fn add(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::DuplicateParam(format!("{}/{name}", self.label)));
        }
        let index = self.values.len();
        self.by_name.insert(name.to_string(), index);
        self.names.push(name.to_string());
        let (r, c) = tensor.shape();
        self.grads.push(Tensor::zeros(r, c));
        self.moment1.push(Tensor::zeros(r, c));
        self.moment2.push(Tensor::zeros(r, c));
        self.values.push(tensor);
        Ok(ParamId {
            store: self.id,
            index: index as u32,
        })
    }

    pub fn id_of(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .map(|&index| ParamId {
                store: self.id,
                index: index as u32,
            })
            .ok_or_else(|| Error::UnknownParam(format!("{}/{name}", self.label)))
    }

    fn check(&self, id: ParamId) -> usize {
        assert_eq!(
            id.store, self.id,
            "parameter handle used with store `{}` it does not belong to",
            self.label
        );
        id.index as usize
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[self.check(id)]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[self.check(id)]
    }

    pub fn name_of(&self, id: ParamId) -> &str {
        &self.names[self.check(id)]
    }

    pub(crate) fn accumulate_grad(&mut self, index: u32, delta: &Tensor) {
        self.grads[index as usize].add_assign(delta);
    }

    pub(crate) fn mark_fresh(&mut self) {
        self.fresh_grads = true;
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
        self.fresh_grads = false;
    }

    /// One Adam update over every entry, with bias correction. Consumes the
    /// accumulated gradients and zeroes the slots afterwards.
    pub fn adam_step(&mut self, lr: f64) -> Result<()> {
        if !self.fresh_grads {
            return Err(Error::NoGradients(self.label.clone()));
        }
        self.adam_steps += 1;
        let t = self.adam_steps as i32;
        let bias1 = 1.0 - ADAM_BETA1.powi(t);
        let bias2 = 1.0 - ADAM_BETA2.powi(t);
        for i in 0..self.values.len() {
            let g = &self.grads[i];
            if !g.all_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {}/{}",
                    self.label, self.names[i]
                )));
            }
            let m = self.moment1[i].data_mut();
            let v = self.moment2[i].data_mut();
            let w = self.values[i].data_mut();
            for ((wi, (mi, vi)), &gi) in w
                .iter_mut()
                .zip(m.iter_mut().zip(v.iter_mut()))
                .zip(g.data())
            {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *wi -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        self.zero_grads();
        Ok(())
    }

    /// Handle for the entry at insertion position `index`.
    pub fn id_of_index(&self, index: usize) -> ParamId {
        assert!(index < self.values.len());
        ParamId {
            store: self.id,
            index: index as u32,
        }
    }

    /// Sets a single scalar coordinate; finite differencing uses this.
    pub(crate) fn nudge(&mut self, tensor: usize, coord: usize, value: f64) {
        self.values[tensor].data_mut()[coord] = value;
    }

    pub fn n_tensors(&self) -> usize {
        self.values.len()
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    /// Overwrites an existing entry, used when restoring checkpoints.
    pub fn set_value(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let &index = self
            .by_name
            .get(name)
            .ok_or_else(|| Error::UnknownParam(format!("{}/{name}", self.label)))?;
        if !self.values[index].same_shape(&tensor) {
            return Err(Error::Shape(format!(
                "restore of {}/{name}: stored {:?}, incoming {:?}",
                self.label,
                self.values[index].shape(),
                tensor.shape()
            )));
        }
        self.values[index] = tensor;
        Ok(())
    }

    /// Moves every parameter a fraction `tau` towards the matching entry
    /// in `source`: `self = (1 - tau) * self + tau * source`. Both stores
    /// must hold identical names and shapes; `tau = 1` is a hard copy.
    pub fn blend_from(&mut self, source: &ParameterStore, tau: f64) -> Result<()> {
        if self.names != source.names {
            return Err(Error::Shape(format!(
                "blend between stores {} and {} with different entries",
                self.label, source.label
            )));
        }
        for (mine, theirs) in self.values.iter_mut().zip(&source.values) {
            if !mine.same_shape(theirs) {
                return Err(Error::Shape("blend between mismatched shapes".into()));
            }
            for (m, t) in mine.data_mut().iter_mut().zip(theirs.data()) {
                *m = (1.0 - tau) * *m + tau * t;
            }
        }
        Ok(())
    }

    /// Order-insensitive fingerprint of names and exact parameter bits.
    /// Used by tests to prove a phase left a store untouched.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        };
        for (name, value) in self.entries() {
            mix(name.as_bytes());
            for &x in value.data() {
                mix(&x.to_bits().to_le_bytes());
            }
        }
        h
    }
}
