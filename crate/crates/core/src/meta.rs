//! Meta-training across source cities.
//!
//! Each iteration samples a few source cities, adapts the shared parameters
//! on a support window of each (inner loop), and moves the shared parameters
//! along the instance-weighted query gradient taken at the adapted point
//! (outer loop). The instance weights come from a small network that is
//! itself trained (hyper loop) so that the outer step helps on the target
//! city's training data.

use std::ops::Range;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{TemporalEventGraph, TransactionEvent};
use crate::model::{init_mlp, mlp, Activation, InputMask, InstanceGrad, Learner, ModelError, Split};
use crate::optim::{Adam, Optimizer, Sgd};
use crate::tensor::{ParamStore, Tape, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error("meta-training needs at least one source city")]
    NoSources,
    #[error("target training set is empty")]
    EmptyTarget,
    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { what: &'static str, iteration: usize },
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn build(self, lr: f64) -> Optimizer {
        match self {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(lr)),
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(lr)),
        }
    }
}

/// How the query gradient is carried back through the inner step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterGradient {
    /// Use the query gradient at the adapted point as is.
    FirstOrder,
    /// Apply `(I − αH)` with a finite-difference Hessian-vector product of
    /// the support loss. Meant for tiny models.
    HessianVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    /// Inner-loop SGD rate.
    pub alpha: f64,
    /// Outer-loop rate.
    pub beta: f64,
    /// SGD rate of the target step inside the hyper loop.
    pub gamma1: f64,
    /// Weight-network rate.
    pub gamma2: f64,
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub cities_per_iteration: usize,
    pub support_fraction: f64,
    pub query_batch_cap: usize,
    pub seed: u64,
    /// Learn instance weights. When false every weight is 1 and the hyper
    /// loop is skipped.
    pub reweight: bool,
    pub outer_optimizer: OptimizerKind,
    pub weight_optimizer: OptimizerKind,
    pub outer_gradient: OuterGradient,
    pub wgn_hidden: [usize; 2],
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.01,
            gamma1: 0.1,
            gamma2: 0.1,
            epochs: 100,
            iterations_per_epoch: 10,
            cities_per_iteration: 2,
            support_fraction: 0.5,
            query_batch_cap: 64,
            seed: 0,
            reweight: true,
            outer_optimizer: OptimizerKind::Adam,
            weight_optimizer: OptimizerKind::Sgd,
            outer_gradient: OuterGradient::FirstOrder,
            wgn_hidden: [64, 32],
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        // alpha = 0 is allowed: it turns meta-training into pooled training
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be >= 0");
        }
        for (name, v) in [("beta", self.beta), ("gamma1", self.gamma1), ("gamma2", self.gamma2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be > 0")));
            }
        }
        if !(self.support_fraction > 0.0 && self.support_fraction < 1.0) {
            return bad("support_fraction must lie in (0, 1)");
        }
        if self.cities_per_iteration == 0 {
            return bad("cities_per_iteration must be >= 1");
        }
        if self.query_batch_cap == 0 {
            return bad("query_batch_cap must be >= 1");
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        self.epochs * self.iterations_per_epoch
    }
}

/// One source city as seen by the trainer.
#[derive(Clone, Copy, Debug)]
pub struct SourceCity<'a> {
    pub city_id: u32,
    pub graph: &'a TemporalEventGraph,
    /// Chronological events usable for training.
    pub events: &'a [TransactionEvent],
}

#[derive(Clone, Copy, Debug)]
pub struct TargetData<'a> {
    pub graph: &'a TemporalEventGraph,
    pub train: &'a [TransactionEvent],
}

impl<'a> TargetData<'a> {
    /// Chronological halves used as support and query by the hyper loop.
    pub fn halves(&self) -> (&'a [TransactionEvent], &'a [TransactionEvent]) {
        self.train.split_at(self.train.len() / 2)
    }
}

/// A contiguous window of one city's events, split chronologically. Events
/// before the window are replayed (unscored) to build states.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode<'a> {
    pub city_id: u32,
    pub events: &'a [TransactionEvent],
    pub support: Range<usize>,
    pub query: Range<usize>,
}

impl<'a> Episode<'a> {
    pub fn support_events(&self) -> &'a [TransactionEvent] {
        &self.events[self.support.clone()]
    }

    pub fn query_events(&self) -> &'a [TransactionEvent] {
        &self.events[self.query.clone()]
    }

    pub fn support_split(&self, graph: &'a TemporalEventGraph, mask: InputMask) -> Split<'a> {
        Split::new(graph, self.support_events())
            .with_history(&self.events[..self.support.start])
            .with_mask(mask)
    }

    pub fn query_split(&self, graph: &'a TemporalEventGraph, mask: InputMask) -> Split<'a> {
        Split::new(graph, self.query_events())
            .with_history(&self.events[..self.query.start])
            .with_mask(mask)
    }
}

/// Sample a random window and split it at `support_fraction`. The window is
/// sized so the query part holds `query_batch_cap` events when the city is
/// large enough. `None` for cities with fewer than two events.
pub fn make_episode<'a, R: Rng + ?Sized>(
    city_id: u32,
    events: &'a [TransactionEvent],
    support_fraction: f64,
    query_batch_cap: usize,
    rng: &mut R,
) -> Option<Episode<'a>> {
    let n = events.len();
    if n < 2 {
        return None;
    }
    let want = (query_batch_cap as f64 / (1.0 - support_fraction)).ceil() as usize;
    let w = want.clamp(2, n);
    let start = rng.random_range(0..=n - w);
    let s = ((w as f64 * support_fraction).floor() as usize).clamp(1, w - 1);
    let q_end = (start + w).min(start + s + query_batch_cap);
    Some(Episode {
        city_id,
        events,
        support: start..start + s,
        query: start + s..q_end,
    })
}

/// `θ − α ∇L(support; θ)`; `theta` is left untouched.
pub fn inner_adapt<L: Learner + ?Sized>(
    learner: &L,
    theta: &ParamStore,
    support: &Split,
    alpha: f64,
) -> Result<ParamStore, TrainError> {
    if alpha == 0.0 {
        return Ok(theta.clone());
    }
    let (loss, grad) = learner.loss_grad(theta, support)?;
    if !loss.is_finite() || !grad.is_finite() {
        return Err(ModelError::NonFinite("support loss").into());
    }
    let mut out = theta.clone();
    out.add_scaled(-alpha, &grad)?;
    Ok(out)
}

/// Per-instance query gradients at the adapted point, mapped back through
/// the inner step according to `mode`.
pub fn outer_instance_grads<L: Learner + ?Sized>(
    learner: &L,
    theta: &ParamStore,
    theta_adapted: &ParamStore,
    support: &Split,
    query: &Split,
    alpha: f64,
    mode: OuterGradient,
) -> Result<Vec<InstanceGrad>, TrainError> {
    let mut grads = learner.instance_grads(theta_adapted, query)?;
    if grads.iter().any(|g| !g.abs_error.is_finite() || !g.grad.is_finite()) {
        return Err(ModelError::NonFinite("query gradient").into());
    }
    if mode == OuterGradient::HessianVector && alpha != 0.0 {
        for g in &mut grads {
            let hv = support_hvp(learner, theta, support, &g.grad)?;
            g.grad.add_scaled(-alpha, &hv)?;
        }
    }
    Ok(grads)
}

fn support_hvp<L: Learner + ?Sized>(
    learner: &L,
    theta: &ParamStore,
    support: &Split,
    v: &ParamStore,
) -> Result<ParamStore, TrainError> {
    let norm = v.norm();
    if norm == 0.0 {
        return Ok(v.zeros_like());
    }
    let r = 1e-5 / norm;
    let mut plus = theta.clone();
    plus.add_scaled(r, v)?;
    let mut minus = theta.clone();
    minus.add_scaled(-r, v)?;
    let (_, gp) = learner.loss_grad(&plus, support)?;
    let (_, gm) = learner.loss_grad(&minus, support)?;
    let mut out = gp;
    out.add_scaled(-1.0, &gm)?;
    out.scale(1.0 / (2.0 * r));
    Ok(out)
}

/// Weight-generating network: `[one-hot city ∥ z ∥ x ∥ y] → … → sigmoid`.
#[derive(Clone, Debug, PartialEq)]
pub struct Wgn {
    pub num_cities: usize,
    pub attr_dim: usize,
    pub estate_dim: usize,
    pub hidden: [usize; 2],
    /// Prices enter as `(y − center) / scale`.
    pub price_center: f64,
    pub price_scale: f64,
}

impl Wgn {
    pub fn input_dim(&self) -> usize {
        self.num_cities + self.attr_dim + self.estate_dim + 1
    }

    pub fn init_params(&self, rng: &mut dyn rand::RngCore) -> ParamStore {
        let mut s = ParamStore::new();
        init_mlp(rng, &mut s, "wgn", &[self.input_dim(), self.hidden[0], self.hidden[1], 1]);
        s
    }

    /// Network inputs for `events` of the city at one-hot position `city`.
    /// The network [`meta_train`] builds for `sources`: one-hot over their
    /// positions, price input standardized over their events.
    pub fn for_sources(sources: &[SourceCity], hidden: [usize; 2], mask: InputMask) -> Self {
        let prices: Vec<f64> = sources
            .iter()
            .flat_map(|s| s.events.iter().map(|e| mask.observed_price(e.unit_price)))
            .collect();
        let (price_center, price_sd) = if prices.is_empty() { (0.0, 1.0) } else { mean_sd(&prices) };
        Self {
            num_cities: sources.len(),
            attr_dim: sources.first().map_or(0, |s| s.graph.attr_dim()),
            estate_dim: sources.iter().find_map(|s| s.graph.estate_dim()).unwrap_or(0),
            hidden,
            price_center,
            price_scale: if price_sd > 1e-12 { price_sd } else { 1.0 },
        }
    }

    pub fn inputs(
        &self,
        city: usize,
        graph: &TemporalEventGraph,
        events: &[TransactionEvent],
        mask: InputMask,
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        assert!(city < self.num_cities, "city position {city} outside the one-hot table");
        events
            .iter()
            .map(|e| {
                let mut v = vec![0.0; self.num_cities];
                v[city] = 1.0;
                v.extend(mask.community_attrs(&graph.community(e.community_id)?.attrs));
                v.extend(mask.estate_attrs(&e.estate_attrs));
                v.push((mask.observed_price(e.unit_price) - self.price_center) / self.price_scale);
                Ok(v)
            })
            .collect()
    }

    fn logit<'a>(&self, tape: &mut Tape<'a>, params: &'a ParamStore, input: &[f64]) -> Result<crate::tensor::Var, TensorError> {
        let p = params.bind(tape);
        let x = tape.constant_vec(input.to_vec());
        mlp(tape, &p, "wgn", 3, x, Activation::Identity)
    }

    pub fn weights(&self, params: &ParamStore, inputs: &[Vec<f64>]) -> Result<Vec<f64>, TensorError> {
        inputs
            .iter()
            .map(|x| {
                let mut tape = Tape::new();
                let l = self.logit(&mut tape, params, x)?;
                Ok(crate::tensor::tape::sigmoid(tape.item(l)))
            })
            .collect()
    }

    /// `∂/∂ω Σ_n coeffs[n]·λ_n`.
    pub fn weighted_grad(
        &self,
        params: &ParamStore,
        inputs: &[Vec<f64>],
        coeffs: &[f64],
    ) -> Result<ParamStore, TensorError> {
        let mut total = params.zeros_like();
        for (x, &c) in inputs.iter().zip(coeffs) {
            if c == 0.0 {
                continue;
            }
            let mut tape = Tape::new();
            let l = self.logit(&mut tape, params, x)?;
            let lam = tape.sigmoid(l);
            let root = tape.scale(lam, c);
            total.add_scaled(1.0, &tape.backward(root)?)?;
        }
        Ok(total)
    }
}

/// Weighted mean `G = Σ λ_n g_n / Σ λ_n` of instance gradients. All-zero
/// weights give a zero gradient.
pub fn weighted_mean(grads: &[&ParamStore], lambdas: &[f64]) -> Result<ParamStore, TensorError> {
    let first = grads.first().ok_or(TensorError::Empty { op: "weighted_mean" })?;
    let total: f64 = lambdas.iter().sum();
    let mut out = first.zeros_like();
    if total == 0.0 {
        return Ok(out);
    }
    for (g, &lam) in grads.iter().zip(lambdas) {
        out.add_scaled(lam / total, g)?;
    }
    Ok(out)
}

/// First-order `∂L_tgt/∂λ_n` for the update `θ − β·G` with `G` from
/// [`weighted_mean`]: `−β·⟨g_n − G, g_tgt⟩ / Σλ`.
pub fn weight_gradients(
    grads: &[&ParamStore],
    lambdas: &[f64],
    combined: &ParamStore,
    target_grad: &ParamStore,
    beta: f64,
) -> Result<Vec<f64>, TensorError> {
    let total: f64 = lambdas.iter().sum();
    let base = combined.dot(target_grad)?;
    grads
        .iter()
        .map(|g| Ok(-beta * (g.dot(target_grad)? - base) / total))
        .collect()
}

/// Gradient of the target query loss after one SGD step (rate `gamma1`) on
/// the target support, both halves of the target training set.
pub fn target_gradient<L: Learner + ?Sized>(
    learner: &L,
    theta_next: &ParamStore,
    target: &TargetData,
    gamma1: f64,
) -> Result<Option<ParamStore>, TrainError> {
    let (s, q) = target.halves();
    if s.is_empty() || q.is_empty() {
        return Ok(None);
    }
    let support = Split::new(target.graph, s);
    let adapted = inner_adapt(learner, theta_next, &support, gamma1)?;
    let query = Split::new(target.graph, q).with_history(s);
    let (_, g) = learner.loss_grad(&adapted, &query)?;
    Ok(Some(g))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightLogRow {
    pub iteration: usize,
    pub city_id: u32,
    pub mean_lambda: f64,
    pub sd_lambda: f64,
}

/// Per-iteration view handed to observers.
pub struct IterationReport<'r> {
    pub iteration: usize,
    pub params: &'r ParamStore,
    pub wgn_params: Option<&'r ParamStore>,
    /// `(city_id, λ per query instance)` for each episode of the iteration.
    pub lambdas: &'r [(u32, Vec<f64>)],
    pub query_loss: f64,
}

#[derive(Clone, Debug)]
pub struct MetaOutcome {
    pub params: ParamStore,
    pub wgn: Option<Wgn>,
    pub wgn_params: Option<ParamStore>,
    pub weight_log: Vec<WeightLogRow>,
    pub skipped_episodes: usize,
    pub hyper_skipped: usize,
}

impl MetaOutcome {
    /// Mean λ over all training events of each source city under the final
    /// weight network. Empty without reweighting.
    pub fn city_mean_weights(&self, sources: &[SourceCity], mask: InputMask) -> Result<Vec<(u32, f64)>, TrainError> {
        let (Some(wgn), Some(p)) = (&self.wgn, &self.wgn_params) else {
            return Ok(Vec::new());
        };
        let mut out = Vec::with_capacity(sources.len());
        for (pos, s) in sources.iter().enumerate() {
            let lam = wgn.weights(p, &wgn.inputs(pos, s.graph, s.events, mask)?)?;
            out.push((s.city_id, mean_sd(&lam).0));
        }
        Ok(out)
    }
}

pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

pub fn meta_train<L: Learner + ?Sized>(
    learner: &L,
    init: ParamStore,
    sources: &[SourceCity],
    target: Option<TargetData>,
    config: &TrainerConfig,
    mask: InputMask,
) -> Result<MetaOutcome, TrainError> {
    meta_train_observed(learner, init, sources, target, config, mask, &mut |_| {})
}

/// [`meta_train`] calling `observer` after every iteration.
pub fn meta_train_observed<L: Learner + ?Sized>(
    learner: &L,
    init: ParamStore,
    sources: &[SourceCity],
    target: Option<TargetData>,
    config: &TrainerConfig,
    mask: InputMask,
    observer: &mut dyn FnMut(&IterationReport),
) -> Result<MetaOutcome, TrainError> {
    config.validate()?;
    if sources.is_empty() {
        return Err(TrainError::NoSources);
    }
    if let Some(t) = &target {
        if t.train.is_empty() {
            return Err(TrainError::EmptyTarget);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (wgn, mut omega) = if config.reweight {
        let wgn = Wgn::for_sources(sources, config.wgn_hidden, mask);
        let mut wrng = ChaCha8Rng::seed_from_u64(config.seed);
        wrng.set_stream(1);
        let omega = wgn.init_params(&mut wrng);
        (Some(wgn), Some(omega))
    } else {
        (None, None)
    };

    let mut theta = init;
    let mut outer = config.outer_optimizer.build(config.beta);
    let mut weight_opt = config.weight_optimizer.build(config.gamma2);
    let mut log = Vec::new();
    let mut skipped = 0;
    let mut hyper_skipped = 0;
    let k = config.cities_per_iteration.min(sources.len());

    for iteration in 0..config.total_iterations() {
        let mut picked = index::sample(&mut rng, sources.len(), k).into_vec();
        picked.sort_unstable();

        struct Part {
            pos: usize,
            inputs: Vec<Vec<f64>>,
            lambdas: Vec<f64>,
            grads: Vec<InstanceGrad>,
        }
        let mut parts = Vec::with_capacity(k);
        for &pos in &picked {
            let src = &sources[pos];
            let Some(ep) = make_episode(
                src.city_id,
                src.events,
                config.support_fraction,
                config.query_batch_cap,
                &mut rng,
            ) else {
                log::warn!("city {} has too few events for an episode, skipped", src.city_id);
                skipped += 1;
                continue;
            };
            let support = ep.support_split(src.graph, mask);
            let query = ep.query_split(src.graph, mask);
            let res = inner_adapt(learner, &theta, &support, config.alpha).and_then(|adapted| {
                outer_instance_grads(learner, &theta, &adapted, &support, &query, config.alpha, config.outer_gradient)
            });
            let grads = match res {
                Ok(g) => g,
                Err(TrainError::Model(ModelError::NonFinite(what))) => {
                    log::warn!("episode on city {} aborted: non-finite {what}", src.city_id);
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let (inputs, lambdas) = match (&wgn, &omega) {
                (Some(w), Some(o)) => {
                    let inputs = w.inputs(pos, src.graph, ep.query_events(), mask)?;
                    let lam = w.weights(o, &inputs)?;
                    (inputs, lam)
                }
                _ => (Vec::new(), vec![1.0; grads.len()]),
            };
            parts.push(Part { pos, inputs, lambdas, grads });
        }
        if parts.is_empty() {
            continue;
        }

        let all: Vec<&ParamStore> = parts.iter().flat_map(|p| p.grads.iter().map(|g| &g.grad)).collect();
        let lambdas: Vec<f64> = parts.iter().flat_map(|p| p.lambdas.iter().copied()).collect();
        let outer_grad = weighted_mean(&all, &lambdas)?;
        let query_loss =
            parts.iter().flat_map(|p| p.grads.iter().map(|g| g.abs_error)).sum::<f64>() / all.len() as f64;
        let mut theta_next = theta.clone();
        outer.step(&mut theta_next, &outer_grad)?;
        if !theta_next.is_finite() {
            return Err(TrainError::NonFinite { what: "parameters", iteration });
        }

        if let (Some(w), Some(o), Some(t)) = (&wgn, omega.as_mut(), &target) {
            match target_gradient(learner, &theta_next, t, config.gamma1)? {
                Some(g_tgt) => {
                    let d = weight_gradients(&all, &lambdas, &outer_grad, &g_tgt, config.beta)?;
                    let inputs: Vec<Vec<f64>> = parts.iter().flat_map(|p| p.inputs.iter().cloned()).collect();
                    let grad_omega = w.weighted_grad(o, &inputs, &d)?;
                    weight_opt.step(o, &grad_omega)?;
                }
                None => {
                    log::warn!("target support or query empty, hyper loop skipped");
                    hyper_skipped += 1;
                }
            }
        }
        theta = theta_next;

        let lambdas: Vec<(u32, Vec<f64>)> = parts
            .iter()
            .map(|p| (sources[p.pos].city_id, p.lambdas.clone()))
            .collect();
        for (city_id, lam) in &lambdas {
            let (m, sd) = mean_sd(lam);
            log.push(WeightLogRow { iteration, city_id: *city_id, mean_lambda: m, sd_lambda: sd });
        }
        observer(&IterationReport {
            iteration,
            params: &theta,
            wgn_params: omega.as_ref(),
            lambdas: &lambdas,
            query_loss,
        });
    }
    Ok(MetaOutcome {
        params: theta,
        wgn,
        wgn_params: omega,
        weight_log: log,
        skipped_episodes: skipped,
        hyper_skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub lr: f64,
    pub max_steps: usize,
    /// Chronological tail of the training set held out to pick the step count.
    pub validation_fraction: f64,
    pub optimizer: OptimizerKind,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            max_steps: 300,
            validation_fraction: 0.2,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adapted {
    pub params: ParamStore,
    pub steps: usize,
    /// Validation MAE after 0..=max_steps steps.
    pub validation_curve: Vec<f64>,
}

/// Pick the number of full-batch steps on a held-out tail, then take that
/// many steps on the whole training set from `theta`.
pub fn adapt_to_target<L: Learner + ?Sized>(
    learner: &L,
    theta: &ParamStore,
    graph: &TemporalEventGraph,
    train: &[TransactionEvent],
    config: &AdaptConfig,
) -> Result<Adapted, TrainError> {
    if train.is_empty() || config.max_steps == 0 {
        return Ok(Adapted { params: theta.clone(), steps: 0, validation_curve: Vec::new() });
    }
    let n_val = ((train.len() as f64 * config.validation_fraction).floor() as usize).min(train.len() - 1);
    let (fit, val) = if n_val == 0 { (train, train) } else { train.split_at(train.len() - n_val) };
    let fit_split = Split::new(graph, fit);
    let val_split = if n_val == 0 { Split::new(graph, val) } else { Split::new(graph, val).with_history(fit) };

    let mut p = theta.clone();
    let mut opt = config.optimizer.build(config.lr);
    let mut curve = vec![learner.loss(&p, &val_split)?];
    for _ in 0..config.max_steps {
        let (_, g) = learner.loss_grad(&p, &fit_split)?;
        opt.step(&mut p, &g)?;
        curve.push(learner.loss(&p, &val_split)?);
    }
    let best = curve
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i);

    let full = Split::new(graph, train);
    let mut p = theta.clone();
    let mut opt = config.optimizer.build(config.lr);
    for _ in 0..best {
        let (_, g) = learner.loss_grad(&p, &full)?;
        opt.step(&mut p, &g)?;
    }
    Ok(Adapted { params: p, steps: best, validation_curve: curve })
}

const WEIGHT_LOG_COLUMNS: [&str; 4] = ["iteration", "city_id", "mean_lambda", "sd_lambda"];

/// Write the weight log as CSV. A fingerprint, when given, fills a trailing
/// `fingerprint` column.
pub fn write_weight_log<W: std::io::Write>(
    rows: &[WeightLogRow],
    fingerprint: Option<&str>,
    out: W,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = WEIGHT_LOG_COLUMNS.to_vec();
    header.extend(fingerprint.map(|_| "fingerprint"));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.iteration.to_string(),
            r.city_id.to_string(),
            r.mean_lambda.to_string(),
            r.sd_lambda.to_string(),
        ];
        rec.extend(fingerprint.map(str::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a log written by [`write_weight_log`]; extra columns are ignored.
pub fn read_weight_log<R: std::io::Read>(input: R) -> Result<Vec<WeightLogRow>, csv::Error> {
    #[derive(Deserialize)]
    struct Row {
        iteration: usize,
        city_id: u32,
        mean_lambda: f64,
        sd_lambda: f64,
    }
    csv::Reader::from_reader(input)
        .deserialize::<Row>()
        .map(|r| {
            r.map(|r| WeightLogRow {
                iteration: r.iteration,
                city_id: r.city_id,
                mean_lambda: r.mean_lambda,
                sd_lambda: r.sd_lambda,
            })
        })
        .collect()
}

/// Per-iteration pooled mean and SD over the cities logged in that iteration,
/// treating each city's batch as equally sized.
pub fn summarize_weight_log(rows: &[WeightLogRow]) -> Vec<(usize, f64, f64)> {
    let mut out: Vec<(usize, f64, f64)> = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        let it = rows[i].iteration;
        let group: Vec<&WeightLogRow> = rows[i..].iter().take_while(|r| r.iteration == it).collect();
        i += group.len();
        let k = group.len() as f64;
        let mean = group.iter().map(|r| r.mean_lambda).sum::<f64>() / k;
        let second = group.iter().map(|r| r.sd_lambda * r.sd_lambda + r.mean_lambda * r.mean_lambda).sum::<f64>() / k;
        out.push((it, mean, (second - mean * mean).max(0.0).sqrt()));
    }
    out
}
