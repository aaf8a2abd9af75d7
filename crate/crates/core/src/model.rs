//! Shared pieces for models trained by replaying a city's transactions:
//! the [`Learner`] interface the meta-trainer drives, input masks, and MLP
//! helpers.

use rand::Rng;
use thiserror::Error;

use crate::geo::{GraphError, TemporalEventGraph, TransactionEvent};
use crate::tensor::{Bound, ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("negative time interval {0} s (events replayed out of order)")]
    NegativeInterval(f64),
    #[error("event at t={event_time} precedes community {community}'s last update at t={last_update}")]
    OutOfOrder {
        community: u32,
        last_update: i64,
        event_time: i64,
    },
    #[error("community {community} was updated at t={last_update}, not strictly before query t={query_time}")]
    Causality {
        community: u32,
        last_update: i64,
        query_time: i64,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("input dimension mismatch: {what} expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
}

/// Feature families hidden from the model. Masked features are zeroed, so
/// shapes never change.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InputMask {
    pub estate: bool,
    pub community: bool,
    /// Historical prices fed into state evolution and instance weighting.
    /// Training labels are never masked.
    pub price: bool,
}

impl InputMask {
    pub const NONE: Self = Self {
        estate: false,
        community: false,
        price: false,
    };

    pub fn estate_attrs(&self, x: &[f64]) -> Vec<f64> {
        if self.estate {
            vec![0.0; x.len()]
        } else {
            x.to_vec()
        }
    }

    pub fn community_attrs(&self, z: &[f64]) -> Vec<f64> {
        if self.community {
            vec![0.0; z.len()]
        } else {
            z.to_vec()
        }
    }

    pub fn observed_price(&self, y: f64) -> f64 {
        if self.price {
            0.0
        } else {
            y
        }
    }
}

/// A replay request: evolve states through `history` without scoring, then
/// score every event of `scored` (appraise first, evolve after).
#[derive(Clone, Copy, Debug)]
pub struct Split<'a> {
    pub graph: &'a TemporalEventGraph,
    pub history: &'a [TransactionEvent],
    pub scored: &'a [TransactionEvent],
    pub mask: InputMask,
}

impl<'a> Split<'a> {
    pub fn new(graph: &'a TemporalEventGraph, scored: &'a [TransactionEvent]) -> Self {
        Self {
            graph,
            history: &[],
            scored,
            mask: InputMask::NONE,
        }
    }

    pub fn with_history(mut self, history: &'a [TransactionEvent]) -> Self {
        self.history = history;
        self
    }

    pub fn with_mask(mut self, mask: InputMask) -> Self {
        self.mask = mask;
        self
    }
}

/// Loss and gradient of one scored transaction.
#[derive(Clone, Debug)]
pub struct InstanceGrad {
    pub abs_error: f64,
    pub grad: ParamStore,
}

/// A price model trainable by the meta-trainer. Losses are mean absolute
/// error over the scored events.
pub trait Learner {
    fn init_params(&self, rng: &mut dyn rand::RngCore) -> ParamStore;

    /// Scored-event predictions (no gradient).
    fn predict(&self, params: &ParamStore, split: &Split) -> Result<Vec<f64>, ModelError>;

    /// Per-scored-event absolute error and gradient.
    fn instance_grads(&self, params: &ParamStore, split: &Split) -> Result<Vec<InstanceGrad>, ModelError>;

    /// Mean absolute error over the scored events and its gradient.
    fn loss_grad(&self, params: &ParamStore, split: &Split) -> Result<(f64, ParamStore), ModelError> {
        let parts = self.instance_grads(params, split)?;
        let mut grad = params.zeros_like();
        let n = parts.len().max(1) as f64;
        let mut loss = 0.0;
        for p in &parts {
            loss += p.abs_error / n;
            grad.add_scaled(1.0 / n, &p.grad)?;
        }
        Ok((loss, grad))
    }

    fn loss(&self, params: &ParamStore, split: &Split) -> Result<f64, ModelError> {
        let preds = self.predict(params, split)?;
        let n = preds.len().max(1) as f64;
        Ok(preds
            .iter()
            .zip(split.scored)
            .map(|(p, e)| (p - e.unit_price).abs() / n)
            .sum())
    }

    /// Prefixes naming parameter groups (used for surgical re-initialization).
    fn groups(&self) -> Vec<&'static str> {
        Vec::new()
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for a `[rows, cols]` weight.
pub(crate) fn init_matrix(rng: &mut dyn rand::RngCore, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (cols.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(vec![rows, cols], data).expect("consistent shape")
}

pub(crate) fn init_bias(rng: &mut dyn rand::RngCore, n: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::vector((0..n).map(|_| rng.random_range(-bound..=bound)).collect())
}

/// Insert `{prefix}.{k}.w` / `{prefix}.{k}.b` for a dense stack with the
/// given layer widths (`dims[0]` is the input width).
pub(crate) fn init_mlp(rng: &mut dyn rand::RngCore, store: &mut ParamStore, prefix: &str, dims: &[usize]) {
    for (k, pair) in dims.windows(2).enumerate() {
        store.insert(format!("{prefix}.{k}.w"), init_matrix(rng, pair[1], pair[0]));
        store.insert(format!("{prefix}.{k}.b"), init_bias(rng, pair[1], pair[0]));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Activation {
    Relu,
    Identity,
}

/// Dense stack `{prefix}.0 .. {prefix}.{layers-1}`, ReLU between layers and
/// `last` on the output.
pub(crate) fn mlp(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    layers: usize,
    input: Var,
    last: Activation,
) -> Result<Var, TensorError> {
    let mut h = input;
    for k in 0..layers {
        let w = p.get(&format!("{prefix}.{k}.w"))?;
        let b = p.get(&format!("{prefix}.{k}.b"))?;
        let z = tape.matvec(w, h)?;
        h = tape.add(z, b)?;
        if k + 1 < layers || last == Activation::Relu {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Replace every array whose name starts with one of `prefixes` by its value
/// in `fresh`.
pub fn reinit_groups(params: &mut ParamStore, fresh: &ParamStore, prefixes: &[&str]) {
    for (name, t) in params.iter_mut() {
        if prefixes.iter().any(|p| name.starts_with(p)) {
            if let Some(f) = fresh.get(name) {
                *t = f.clone();
            }
        }
    }
}
