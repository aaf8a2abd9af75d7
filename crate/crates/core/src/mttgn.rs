//! Multi-task temporal graph network.
//!
//! Each community carries a state vector that is updated only when a sale
//! happens there: the previous state is decayed by a time gate and fed, with
//! the sale's attributes and price, through a GRU. To appraise a property,
//! the states of the community's spatial neighbors are mixed by a
//! per-dimension attention (softmax across neighbors), and the refreshed
//! embedding goes through a feature-integration MLP whose output layer is
//! generated per community by a hypernetwork on the community attributes.
//!
//! Gradients flow through at most `detach_depth` of each state's most recent
//! evolution steps: a state keeps the inputs of those steps and replays them
//! on the appraisal tape, older history enters as a constant.

use std::collections::VecDeque;

use crate::geo::{TemporalEventGraph, TransactionEvent, SECONDS_PER_DAY};
use crate::model::{init_bias, init_matrix, init_mlp, mlp, Activation, InputMask, InstanceGrad, Learner, ModelError, Split};
use crate::tensor::{Bound, ParamStore, Tape, Tensor, Var};

pub const TIME_FREQ: &str = "tgn.time.freq";
pub const GATE_W: &str = "tgn.gate.w";
pub const ATTN_W1_QUERY: &str = "tgn.attn.w1_query";
pub const ATTN_W1_NEIGHBOR: &str = "tgn.attn.w1_neighbor";
pub const ATTN_W2: &str = "tgn.attn.w2";
pub const AGG_W3: &str = "tgn.agg.w3";
pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

/// Parameter-group prefixes.
pub const GROUP_TGN: &str = "tgn.";
pub const GROUP_HYPER: &str = "hyper.";
pub const GROUP_HEAD: &str = "head.";
pub const GROUP_FI: &str = "fi.";

const GRU_GATES: [&str; 3] = ["r", "u", "n"];

#[derive(Clone, Debug, PartialEq)]
pub struct MttgnConfig {
    pub estate_dim: usize,
    pub attr_dim: usize,
    /// Width of community states and refreshed embeddings.
    pub state_dim: usize,
    /// Number of learnable Fourier frequencies.
    pub time_dim: usize,
    pub hyper_hidden: [usize; 2],
    pub fi_hidden: [usize; 2],
    /// When false the refreshed embedding is identically zero and no state
    /// is kept.
    pub use_tgn: bool,
    /// When false one shared learned output layer replaces the hypernetwork.
    pub hyper_head: bool,
    /// Number of most recent evolution steps per state that gradients flow
    /// through. `usize::MAX` unrolls the full history.
    pub detach_depth: usize,
    /// Query times are divided by this span (seconds).
    pub time_horizon_s: f64,
}

impl MttgnConfig {
    pub fn new(estate_dim: usize, attr_dim: usize, time_horizon_s: f64) -> Self {
        Self {
            estate_dim,
            attr_dim,
            state_dim: 64,
            time_dim: 8,
            hyper_hidden: [16, 8],
            fi_hidden: [64, 16],
            use_tgn: true,
            hyper_head: true,
            detach_depth: 1,
            time_horizon_s,
        }
    }

    pub fn time_features(&self) -> usize {
        2 * self.time_dim + 1
    }

    fn gate_in(&self) -> usize {
        self.time_features() + self.estate_dim + 1 + self.state_dim
    }

    fn gru_in(&self) -> usize {
        self.estate_dim + 1 + self.attr_dim
    }

    fn fi_in(&self) -> usize {
        self.estate_dim + self.attr_dim + self.state_dim + 1
    }
}

/// Inputs of one evolution step, as they were fed (after masking).
#[derive(Clone, Debug, PartialEq)]
struct EvolveStep {
    h_before: Vec<f64>,
    dt: f64,
    x: Vec<f64>,
    y: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CommunityState {
    pub h: Vec<f64>,
    pub last_update_time: i64,
    pub ever_updated: bool,
    steps: VecDeque<EvolveStep>,
}

impl CommunityState {
    /// Zero state stamped at the dataset epoch.
    pub fn initial(state_dim: usize) -> Self {
        Self {
            h: vec![0.0; state_dim],
            last_update_time: 0,
            ever_updated: false,
            steps: VecDeque::new(),
        }
    }
}

/// Mutable per-replay state of every community of one city.
#[derive(Clone, Debug)]
pub struct StateStore {
    states: Vec<CommunityState>,
}

impl StateStore {
    pub fn new(num_communities: usize, state_dim: usize) -> Self {
        Self {
            states: vec![CommunityState::initial(state_dim); num_communities],
        }
    }

    pub fn get(&self, idx: usize) -> &CommunityState {
        &self.states[idx]
    }

    pub fn states(&self) -> &[CommunityState] {
        &self.states
    }
}

/// Time-aware evolution and attention diagnostics from one appraisal.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    /// Neighbor community ids in attention-row order.
    pub neighbors: Vec<u32>,
    /// `[neighbors, state_dim]`, each column sums to one.
    pub weights: Vec<f64>,
    pub refreshed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AppraisalQuery {
    pub estate_attrs: Vec<f64>,
    pub community_id: u32,
    pub time: i64,
}

impl From<&TransactionEvent> for AppraisalQuery {
    fn from(e: &TransactionEvent) -> Self {
        Self {
            estate_attrs: e.estate_attrs.clone(),
            community_id: e.community_id,
            time: e.time,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mttgn {
    pub config: MttgnConfig,
}

impl Mttgn {
    pub fn new(config: MttgnConfig) -> Self {
        Self { config }
    }

    fn gru_name(gate: &str, part: &str) -> String {
        format!("tgn.gru.{gate}.{part}")
    }

    /// Fourier features of an interval: `[days, cos(w_1 days), sin(w_1 days), ...]`.
    fn encode_time(&self, tape: &mut Tape, p: &Bound, dt_secs: f64) -> Result<Var, ModelError> {
        if dt_secs < 0.0 {
            return Err(ModelError::NegativeInterval(dt_secs));
        }
        let days = dt_secs / SECONDS_PER_DAY;
        let w = p.get(TIME_FREQ)?;
        let wd = tape.scale(w, days);
        let c = tape.cos(wd);
        let s = tape.sin(wd);
        let cs = tape.interleave(c, s)?;
        let d = tape.scalar_const(days);
        Ok(tape.concat(&[d, cs])?)
    }

    /// Returns `(new state, gate)`.
    fn evolve_on_tape(
        &self,
        tape: &mut Tape,
        p: &Bound,
        h_prev: Var,
        dt: f64,
        x: Var,
        y: f64,
        z: Var,
    ) -> Result<(Var, Var), ModelError> {
        let phi = self.encode_time(tape, p, dt)?;
        let yv = tape.scalar_const(y);
        let gin = tape.concat(&[phi, x, yv, h_prev])?;
        let pre = tape.matvec(p.get(GATE_W)?, gin)?;
        let pre = tape.relu(pre);
        let pre = tape.neg(pre);
        let gate = tape.exp(pre);
        let h_tilde = tape.mul(gate, h_prev)?;

        let inp = tape.concat(&[x, yv, z])?;
        let mut pre_gates = Vec::with_capacity(3);
        for g in GRU_GATES {
            let ix = tape.matvec(p.get(&Self::gru_name(g, "wx"))?, inp)?;
            let ix = tape.add(ix, p.get(&Self::gru_name(g, "bx"))?)?;
            let hh = tape.matvec(p.get(&Self::gru_name(g, "wh"))?, h_tilde)?;
            let hh = tape.add(hh, p.get(&Self::gru_name(g, "bh"))?)?;
            pre_gates.push((ix, hh));
        }
        let r = tape.add(pre_gates[0].0, pre_gates[0].1)?;
        let r = tape.sigmoid(r);
        let u = tape.add(pre_gates[1].0, pre_gates[1].1)?;
        let u = tape.sigmoid(u);
        let rn = tape.mul(r, pre_gates[2].1)?;
        let n = tape.add(pre_gates[2].0, rn)?;
        let n = tape.tanh(n);
        // (1 - u) * n + u * h  ==  n + u * (h - n)
        let diff = tape.sub(h_tilde, n)?;
        let ud = tape.mul(u, diff)?;
        let h_new = tape.add(n, ud)?;
        Ok((h_new, gate))
    }

    /// Put a state on the tape, replaying its retained steps so gradients can
    /// reach the evolution parameters.
    fn state_on_tape<'a>(
        &self,
        tape: &mut Tape<'a>,
        p: &Bound,
        st: &'a CommunityState,
        z: &[f64],
    ) -> Result<Var, ModelError> {
        let Some(first) = st.steps.front() else {
            return Ok(tape.constant_slice(&st.h));
        };
        let zv = tape.constant_vec(z.to_vec());
        let mut h = tape.constant_slice(&first.h_before);
        for s in &st.steps {
            let xv = tape.constant_slice(&s.x);
            h = self.evolve_on_tape(tape, p, h, s.dt, xv, s.y, zv)?.0;
        }
        Ok(h)
    }

    fn check_causality(
        &self,
        graph: &TemporalEventGraph,
        store: &StateStore,
        ci: usize,
        t: i64,
    ) -> Result<(), ModelError> {
        for &(j, _) in graph.neighbor_indices(ci) {
            let st = &store.states[j];
            if st.ever_updated && st.last_update_time >= t {
                return Err(ModelError::Causality {
                    community: graph.communities()[j].id,
                    last_update: st.last_update_time,
                    query_time: t,
                });
            }
        }
        Ok(())
    }

    /// Dimension-wise attentive aggregation over the neighborhood. Returns the
    /// refreshed embedding and the `[k, d]` attention matrix.
    fn refresh_on_tape<'a>(
        &self,
        tape: &mut Tape<'a>,
        p: &Bound,
        store: &'a StateStore,
        graph: &TemporalEventGraph,
        ci: usize,
        x: Var,
        t: i64,
        mask: InputMask,
        with_grad: bool,
    ) -> Result<(Var, Var), ModelError> {
        let nbrs = graph.neighbor_indices(ci);
        let mut hs = Vec::with_capacity(nbrs.len());
        let mut h_self = None;
        for &(j, _) in nbrs {
            let st = &store.states[j];
            let h = if with_grad {
                let z = mask.community_attrs(&graph.communities()[j].attrs);
                self.state_on_tape(tape, p, st, &z)?
            } else {
                tape.constant_slice(&st.h)
            };
            if j == ci {
                h_self = Some(h);
            }
            hs.push(h);
        }
        let h_i = h_self.expect("every community neighbors itself");
        let q = tape.concat(&[x, h_i])?;
        let aq = tape.matvec(p.get(ATTN_W1_QUERY)?, q)?;
        let w1n = p.get(ATTN_W1_NEIGHBOR)?;
        let w2 = p.get(ATTN_W2)?;
        let eps = graph.epsilon();
        let mut scores = Vec::with_capacity(nbrs.len());
        for (&(j, dist), &h_j) in nbrs.iter().zip(&hs) {
            let st = &store.states[j];
            let phi = self.encode_time(tape, p, (t - st.last_update_time) as f64)?;
            let dv = tape.scalar_const(dist / eps);
            let nin = tape.concat(&[h_j, phi, dv])?;
            let an = tape.matvec(w1n, nin)?;
            let pre = tape.add(aq, an)?;
            let act = tape.tanh(pre);
            scores.push(tape.matvec(w2, act)?);
        }
        let a = tape.stack(&scores)?;
        let w = tape.softmax_rows(a)?;
        let hm = tape.stack(&hs)?;
        let weighted = tape.mul(w, hm)?;
        let agg = tape.sum_rows(weighted)?;
        let out = tape.matvec(p.get(AGG_W3)?, agg)?;
        Ok((tape.relu(out), w))
    }

    fn head_on_tape(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<(Var, Var), ModelError> {
        if self.config.hyper_head {
            let w = mlp(tape, p, "hyper.w", 3, z, Activation::Identity)?;
            let b = mlp(tape, p, "hyper.b", 3, z, Activation::Identity)?;
            Ok((w, b))
        } else {
            Ok((p.get(HEAD_W)?, p.get(HEAD_B)?))
        }
    }

    fn appraise_on_tape<'a>(
        &self,
        tape: &mut Tape<'a>,
        p: &Bound,
        store: &'a StateStore,
        graph: &TemporalEventGraph,
        query: &AppraisalQuery,
        mask: InputMask,
        with_grad: bool,
    ) -> Result<Var, ModelError> {
        let c = &self.config;
        if query.estate_attrs.len() != c.estate_dim {
            return Err(ModelError::Dimension {
                what: "estate attributes",
                expected: c.estate_dim,
                found: query.estate_attrs.len(),
            });
        }
        let ci = graph.index_of(query.community_id)?;
        let x = tape.constant_vec(mask.estate_attrs(&query.estate_attrs));
        let z = tape.constant_vec(mask.community_attrs(&graph.communities()[ci].attrs));
        let h_hat = if c.use_tgn {
            self.check_causality(graph, store, ci, query.time)?;
            self.refresh_on_tape(tape, p, store, graph, ci, x, query.time, mask, with_grad)?
                .0
        } else {
            tape.constant_vec(vec![0.0; c.state_dim])
        };
        let ts = tape.scalar_const(query.time as f64 / c.time_horizon_s);
        let fin = tape.concat(&[x, z, h_hat, ts])?;
        let f = mlp(tape, p, "fi", 2, fin, Activation::Relu)?;
        let (w, b) = self.head_on_tape(tape, p, z)?;
        let wf = tape.dot(w, f)?;
        Ok(tape.add(wf, b)?)
    }

    // ---- public operations ---------------------------------------------

    /// `[dt_days, cos(w_k dt_days), sin(w_k dt_days)...]`.
    pub fn time_encode(&self, params: &ParamStore, dt_secs: f64) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let v = self.encode_time(&mut tape, &p, dt_secs)?;
        Ok(tape.value(v).to_vec())
    }

    /// Apply one transaction to its community's state. Returns the new state
    /// and the time gate that decayed the previous one.
    pub fn evolve_state(
        &self,
        params: &ParamStore,
        event: &TransactionEvent,
        prev: &CommunityState,
        z: &[f64],
        mask: InputMask,
    ) -> Result<(CommunityState, Vec<f64>), ModelError> {
        if event.time < prev.last_update_time {
            return Err(ModelError::OutOfOrder {
                community: event.community_id,
                last_update: prev.last_update_time,
                event_time: event.time,
            });
        }
        let dt = (event.time - prev.last_update_time) as f64;
        let x = mask.estate_attrs(&event.estate_attrs);
        let y = mask.observed_price(event.unit_price);
        let zm = mask.community_attrs(z);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let hv = tape.constant_slice(&prev.h);
        let xv = tape.constant_slice(&x);
        let zv = tape.constant_vec(zm);
        let (h_new, gate) = self.evolve_on_tape(&mut tape, &p, hv, dt, xv, y, zv)?;
        let h = tape.value(h_new).to_vec();
        let gate = tape.value(gate).to_vec();
        let depth = self.config.detach_depth;
        let mut steps = prev.steps.clone();
        if depth > 0 {
            steps.push_back(EvolveStep {
                h_before: prev.h.clone(),
                dt,
                x,
                y,
            });
            while steps.len() > depth {
                steps.pop_front();
            }
        }
        Ok((
            CommunityState {
                h,
                last_update_time: event.time,
                ever_updated: true,
                steps,
            },
            gate,
        ))
    }

    fn evolve_in_store(
        &self,
        params: &ParamStore,
        store: &mut StateStore,
        graph: &TemporalEventGraph,
        event: &TransactionEvent,
        mask: InputMask,
    ) -> Result<(), ModelError> {
        if !self.config.use_tgn {
            return Ok(());
        }
        let ci = graph.index_of(event.community_id)?;
        let z = &graph.communities()[ci].attrs;
        let (next, _) = self.evolve_state(params, event, &store.states[ci], z, mask)?;
        store.states[ci] = next;
        Ok(())
    }

    /// Refreshed embedding of the query community plus attention weights.
    pub fn refresh_embedding(
        &self,
        params: &ParamStore,
        query: &AppraisalQuery,
        store: &StateStore,
        graph: &TemporalEventGraph,
    ) -> Result<AttentionTrace, ModelError> {
        let ci = graph.index_of(query.community_id)?;
        self.check_causality(graph, store, ci, query.time)?;
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let x = tape.constant_vec(query.estate_attrs.clone());
        let (h, w) =
            self.refresh_on_tape(&mut tape, &p, store, graph, ci, x, query.time, InputMask::NONE, false)?;
        Ok(AttentionTrace {
            neighbors: graph
                .neighbor_indices(ci)
                .iter()
                .map(|&(j, _)| graph.communities()[j].id)
                .collect(),
            weights: tape.value(w).to_vec(),
            refreshed: tape.value(h).to_vec(),
        })
    }

    /// Hypernetwork output layer `(W, b)` for a community with attributes `z`.
    pub fn hyper_head(&self, params: &ParamStore, z: &[f64]) -> Result<(Vec<f64>, f64), ModelError> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let zv = tape.constant_vec(z.to_vec());
        let (w, b) = self.head_on_tape(&mut tape, &p, zv)?;
        Ok((tape.value(w).to_vec(), tape.item(b)))
    }

    /// Price estimate from the current states. Every neighbor state that has
    /// been updated must predate the query.
    pub fn appraise(
        &self,
        params: &ParamStore,
        query: &AppraisalQuery,
        store: &StateStore,
        graph: &TemporalEventGraph,
    ) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let y = self.appraise_on_tape(&mut tape, &p, store, graph, query, InputMask::NONE, false)?;
        Ok(tape.item(y))
    }

    /// Gradient of a single appraisal with respect to every parameter.
    pub fn appraise_grad(
        &self,
        params: &ParamStore,
        query: &AppraisalQuery,
        store: &StateStore,
        graph: &TemporalEventGraph,
    ) -> Result<(f64, ParamStore), ModelError> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let y = self.appraise_on_tape(&mut tape, &p, store, graph, query, InputMask::NONE, true)?;
        Ok((tape.item(y), tape.backward(y)?))
    }

    /// Replay `split` chronologically. For each group of simultaneous events,
    /// scored events are visited (with states built strictly from earlier
    /// events) before any of the group is applied to the states.
    fn replay<F>(&self, params: &ParamStore, split: &Split, mut visit: F) -> Result<StateStore, ModelError>
    where
        F: FnMut(&StateStore, usize) -> Result<(), ModelError>,
    {
        let graph = split.graph;
        let mut store = StateStore::new(graph.num_communities(), self.config.state_dim);
        let mut seq: Vec<(&TransactionEvent, Option<usize>)> = split
            .history
            .iter()
            .map(|e| (e, None))
            .chain(split.scored.iter().enumerate().map(|(k, e)| (e, Some(k))))
            .collect();
        seq.sort_by_key(|(e, _)| e.time);
        let mut start = 0;
        while start < seq.len() {
            let t = seq[start].0.time;
            let mut end = start;
            while end < seq.len() && seq[end].0.time == t {
                end += 1;
            }
            for &(_, k) in &seq[start..end] {
                if let Some(k) = k {
                    visit(&store, k)?;
                }
            }
            for &(e, _) in &seq[start..end] {
                self.evolve_in_store(params, &mut store, graph, e, split.mask)?;
            }
            start = end;
        }
        Ok(store)
    }

    /// Mean absolute error of replaying `events` from fresh states, with its
    /// gradient.
    pub fn replay_and_loss(
        &self,
        params: &ParamStore,
        graph: &TemporalEventGraph,
        events: &[TransactionEvent],
    ) -> Result<(f64, ParamStore), ModelError> {
        self.loss_grad(params, &Split::new(graph, events))
    }

    /// Final states after replaying `history` (used for inspection and
    /// latency probes).
    pub fn states_after(
        &self,
        params: &ParamStore,
        graph: &TemporalEventGraph,
        history: &[TransactionEvent],
    ) -> Result<StateStore, ModelError> {
        self.replay(params, &Split::new(graph, &[]).with_history(history), |_, _| Ok(()))
    }

    /// Every time-gate vector produced while replaying `events`.
    pub fn gates_during(
        &self,
        params: &ParamStore,
        graph: &TemporalEventGraph,
        events: &[TransactionEvent],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut store = StateStore::new(graph.num_communities(), self.config.state_dim);
        let mut out = Vec::with_capacity(events.len());
        for e in events {
            let ci = graph.index_of(e.community_id)?;
            let (next, gate) =
                self.evolve_state(params, e, &store.states[ci], &graph.communities()[ci].attrs, InputMask::NONE)?;
            store.states[ci] = next;
            out.push(gate);
        }
        Ok(out)
    }

    /// Attention matrices of every appraisal made while replaying `split`.
    pub fn attention_during(&self, params: &ParamStore, split: &Split) -> Result<Vec<AttentionTrace>, ModelError> {
        let mut out = Vec::with_capacity(split.scored.len());
        self.replay(params, split, |store, k| {
            let q = AppraisalQuery::from(&split.scored[k]);
            out.push(self.refresh_embedding(params, &q, store, split.graph)?);
            Ok(())
        })?;
        Ok(out)
    }
}

impl Learner for Mttgn {
    fn init_params(&self, rng: &mut dyn rand::RngCore) -> ParamStore {
        let c = &self.config;
        let mut s = ParamStore::new();
        if c.use_tgn {
            // periods from one week to two years
            let freqs = (0..c.time_dim)
                .map(|k| {
                    let frac = if c.time_dim > 1 { k as f64 / (c.time_dim - 1) as f64 } else { 0.0 };
                    2.0 * std::f64::consts::PI / (7.0 * (730.0f64 / 7.0).powf(frac))
                })
                .collect();
            s.insert(TIME_FREQ, Tensor::vector(freqs));
            let mut gate = init_matrix(rng, c.state_dim, c.gate_in());
            // raw interval (days) and price inputs are large; start their
            // columns small
            let cols = c.gate_in();
            let price_col = c.time_features() + c.estate_dim;
            for r in 0..c.state_dim {
                gate.data_mut()[r * cols] /= 365.0;
                gate.data_mut()[r * cols + price_col] /= 10.0;
            }
            s.insert(GATE_W, gate);
            for g in GRU_GATES {
                let mut wx = init_matrix(rng, c.state_dim, c.gru_in());
                for r in 0..c.state_dim {
                    wx.data_mut()[r * c.gru_in() + c.estate_dim] /= 10.0;
                }
                s.insert(Self::gru_name(g, "wx"), wx);
                s.insert(Self::gru_name(g, "wh"), init_matrix(rng, c.state_dim, c.state_dim));
                s.insert(Self::gru_name(g, "bx"), init_bias(rng, c.state_dim, c.gru_in()));
                s.insert(Self::gru_name(g, "bh"), init_bias(rng, c.state_dim, c.state_dim));
            }
            let fan_in = c.estate_dim + 2 * c.state_dim + c.time_features() + 1;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let scale = |mut t: Tensor, cols: usize| {
                let f = bound * (cols as f64).sqrt();
                t.data_mut().iter_mut().for_each(|v| *v *= f);
                t
            };
            let qcols = c.estate_dim + c.state_dim;
            let ncols = c.state_dim + c.time_features() + 1;
            s.insert(ATTN_W1_QUERY, scale(init_matrix(rng, c.state_dim, qcols), qcols));
            let mut wn = scale(init_matrix(rng, c.state_dim, ncols), ncols);
            for r in 0..c.state_dim {
                wn.data_mut()[r * ncols + c.state_dim] /= 365.0;
            }
            s.insert(ATTN_W1_NEIGHBOR, wn);
            s.insert(ATTN_W2, init_matrix(rng, c.state_dim, c.state_dim));
            s.insert(AGG_W3, init_matrix(rng, c.state_dim, c.state_dim));
        }
        let fo = c.fi_hidden[1];
        if c.hyper_head {
            init_mlp(rng, &mut s, "hyper.w", &[c.attr_dim, c.hyper_hidden[0], c.hyper_hidden[1], fo]);
            init_mlp(rng, &mut s, "hyper.b", &[c.attr_dim, c.hyper_hidden[0], c.hyper_hidden[1], 1]);
        } else {
            s.insert(HEAD_W, init_bias(rng, fo, fo));
            s.insert(HEAD_B, Tensor::vector(vec![0.0]));
        }
        init_mlp(rng, &mut s, "fi", &[c.fi_in(), c.fi_hidden[0], c.fi_hidden[1]]);
        s
    }

    fn predict(&self, params: &ParamStore, split: &Split) -> Result<Vec<f64>, ModelError> {
        let mut out = vec![0.0; split.scored.len()];
        self.replay(params, split, |store, k| {
            let mut tape = Tape::new();
            let p = params.bind(&mut tape);
            let q = AppraisalQuery::from(&split.scored[k]);
            let y = self.appraise_on_tape(&mut tape, &p, store, split.graph, &q, split.mask, false)?;
            out[k] = tape.item(y);
            Ok(())
        })?;
        Ok(out)
    }

    fn instance_grads(&self, params: &ParamStore, split: &Split) -> Result<Vec<InstanceGrad>, ModelError> {
        let mut out: Vec<Option<InstanceGrad>> = vec![None; split.scored.len()];
        self.replay(params, split, |store, k| {
            let e = &split.scored[k];
            let mut tape = Tape::new();
            let p = params.bind(&mut tape);
            let q = AppraisalQuery::from(e);
            let y_hat = self.appraise_on_tape(&mut tape, &p, store, split.graph, &q, split.mask, true)?;
            let y = tape.scalar_const(e.unit_price);
            let diff = tape.sub(y_hat, y)?;
            let loss = tape.abs(diff);
            out[k] = Some(InstanceGrad {
                abs_error: tape.item(loss),
                grad: tape.backward(loss)?,
            });
            Ok(())
        })?;
        Ok(out.into_iter().map(|g| g.expect("every scored event visited")).collect())
    }

    fn groups(&self) -> Vec<&'static str> {
        vec![GROUP_TGN, GROUP_HYPER, GROUP_HEAD, GROUP_FI]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{Community, LatLon};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy_graph(n: usize, spacing_m: f64) -> TemporalEventGraph {
        let deg = (spacing_m / crate::geo::EARTH_RADIUS_M).to_degrees();
        let cs = (0..n)
            .map(|i| Community {
                id: i as u32,
                location: LatLon::new(30.0 + deg * i as f64, 104.0),
                attrs: vec![0.3 * i as f64 - 0.2, 0.5],
            })
            .collect();
        TemporalEventGraph::build(cs, vec![], 2_000.0).unwrap()
    }

    fn small_model() -> Mttgn {
        let mut c = MttgnConfig::new(3, 2, 730.0 * SECONDS_PER_DAY);
        c.state_dim = 4;
        c.time_dim = 2;
        c.fi_hidden = [5, 3];
        c.hyper_hidden = [3, 2];
        Mttgn::new(c)
    }

    fn ev(cid: u32, day: f64, price: f64) -> TransactionEvent {
        TransactionEvent {
            estate_attrs: vec![0.1 * price, -0.4, 0.7],
            community_id: cid,
            time: (day * SECONDS_PER_DAY) as i64,
            unit_price: price,
        }
    }

    #[test]
    fn time_encoding_at_zero_and_unit_day() {
        let m = Mttgn::new(MttgnConfig::new(3, 2, 1.0));
        let mut p = m.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let zero = m.time_encode(&p, 0.0).unwrap();
        assert_eq!(zero.len(), 17);
        let mut want = vec![0.0];
        for _ in 0..8 {
            want.extend([1.0, 0.0]);
        }
        assert_eq!(zero, want);
        p.insert(TIME_FREQ, Tensor::zeros(&[8]));
        let day = m.time_encode(&p, SECONDS_PER_DAY).unwrap();
        want[0] = 1.0;
        assert_eq!(day, want);
        assert!(matches!(m.time_encode(&p, -1.0), Err(ModelError::NegativeInterval(_))));
    }

    #[test]
    fn zero_gate_weights_keep_previous_state() {
        let m = small_model();
        let mut p = m.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let w = p.get(GATE_W).unwrap().shape().to_vec();
        p.insert(GATE_W, Tensor::zeros(&w));
        let mut prev = CommunityState::initial(4);
        prev.h = vec![0.5, -0.25, 1.0, 2.0];
        prev.last_update_time = 100;
        prev.ever_updated = true;
        let (_, gate) = m.evolve_state(&p, &ev(0, 2.0, 9.0), &prev, &[0.1, 0.2], InputMask::NONE).unwrap();
        assert_eq!(gate, vec![1.0; 4]);
    }

    #[test]
    fn out_of_order_event_is_rejected() {
        let m = small_model();
        let p = m.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let mut prev = CommunityState::initial(4);
        prev.last_update_time = 10 * 86_400;
        let err = m.evolve_state(&p, &ev(0, 2.0, 9.0), &prev, &[0.1, 0.2], InputMask::NONE);
        assert!(matches!(err, Err(ModelError::OutOfOrder { .. })));
    }

    #[test]
    fn lone_community_attends_only_to_itself() {
        let m = small_model();
        let p = m.init_params(&mut ChaCha8Rng::seed_from_u64(2));
        let g = toy_graph(1, 5_000.0);
        let store = m
            .states_after(&p, &g, &[ev(0, 1.0, 9.0), ev(0, 3.0, 11.0)])
            .unwrap();
        let q = AppraisalQuery {
            estate_attrs: vec![0.0, 1.0, 0.0],
            community_id: 0,
            time: 5 * 86_400,
        };
        let tr = m.refresh_embedding(&p, &q, &store, &g).unwrap();
        assert_eq!(tr.weights, vec![1.0; 4]);
        // ReLU(W3 h)
        let w3 = p.get(AGG_W3).unwrap().data();
        let h = &store.get(0).h;
        let want: Vec<f64> = w3
            .chunks(4)
            .map(|row| crate::tensor::dot(row, h).max(0.0))
            .collect();
        assert_eq!(tr.refreshed, want);
    }

    #[test]
    fn identical_neighbors_split_attention_evenly() {
        let m = small_model();
        let p = m.init_params(&mut ChaCha8Rng::seed_from_u64(3));
        // two communities at the same spot, never updated: identical h, t_j, p_ij = 0
        let cs = vec![
            Community { id: 0, location: LatLon::new(30.0, 104.0), attrs: vec![0.0, 0.0] },
            Community { id: 1, location: LatLon::new(30.0, 104.0), attrs: vec![1.0, 0.0] },
        ];
        let g = TemporalEventGraph::build(cs, vec![], 2_000.0).unwrap();
        let store = StateStore::new(2, 4);
        let q = AppraisalQuery { estate_attrs: vec![0.2, 0.1, 0.0], community_id: 0, time: 86_400 };
        let tr = m.refresh_embedding(&p, &q, &store, &g).unwrap();
        assert_eq!(tr.weights, vec![0.5; 8]);
    }

    #[test]
    fn hyper_head_zero_network_and_determinism() {
        let m = small_model();
        let mut p = m.init_params(&mut ChaCha8Rng::seed_from_u64(4));
        let z1 = [0.3, -1.0];
        let z2 = [-0.8, 0.4];
        assert_eq!(m.hyper_head(&p, &z1).unwrap(), m.hyper_head(&p, &z1).unwrap());
        assert_ne!(m.hyper_head(&p, &z1).unwrap().0, m.hyper_head(&p, &z2).unwrap().0);
        let names: Vec<String> = p.names().filter(|n| n.starts_with("hyper.")).map(String::from).collect();
        for n in names {
            let t = p.get_mut(&n).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let (w, b) = m.hyper_head(&p, &z1).unwrap();
        assert!(w.iter().all(|&v| v == 0.0));
        assert_eq!(b, 0.0);
    }

    #[test]
    fn zero_parameters_predict_zero_and_loss_is_price() {
        let m = small_model();
        let mut p = m.init_params(&mut ChaCha8Rng::seed_from_u64(5));
        p.scale(0.0);
        let g = toy_graph(2, 1_000.0);
        let events = vec![ev(0, 1.0, 7.5)];
        let (loss, _) = m.replay_and_loss(&p, &g, &events).unwrap();
        assert_eq!(loss, 7.5);
        let preds = m.predict(&p, &Split::new(&g, &events)).unwrap();
        assert_eq!(preds, vec![0.0]);
    }

    #[test]
    fn head_parameter_shapes_do_not_depend_on_community_count() {
        let m = small_model();
        let p = m.init_params(&mut ChaCha8Rng::seed_from_u64(6));
        let small = toy_graph(2, 1_000.0);
        let large = toy_graph(9, 1_000.0);
        for g in [&small, &large] {
            let evs = vec![ev(1, 1.0, 5.0), ev(0, 2.0, 6.0)];
            let grads = m.instance_grads(&p, &Split::new(g, &evs)).unwrap();
            for gr in grads {
                for (name, t) in gr.grad.iter() {
                    assert_eq!(t.shape(), p.get(name).unwrap().shape());
                }
            }
        }
    }

    #[test]
    fn causality_violation_is_reported() {
        let m = small_model();
        let p = m.init_params(&mut ChaCha8Rng::seed_from_u64(7));
        let g = toy_graph(2, 1_000.0);
        let store = m.states_after(&p, &g, &[ev(1, 3.0, 5.0)]).unwrap();
        let q = AppraisalQuery { estate_attrs: vec![0.0; 3], community_id: 0, time: 3 * 86_400 };
        assert!(matches!(m.appraise(&p, &q, &store, &g), Err(ModelError::Causality { .. })));
    }

    #[test]
    fn simultaneous_events_do_not_see_each_other() {
        let m = small_model();
        let p = m.init_params(&mut ChaCha8Rng::seed_from_u64(8));
        let g = toy_graph(2, 1_000.0);
        let a = vec![ev(0, 1.0, 5.0), ev(1, 2.0, 6.0), ev(0, 2.0, 7.0)];
        let mut b = a.clone();
        b[1].unit_price = 60.0;
        let pa = m.predict(&p, &Split::new(&g, &a)).unwrap();
        let pb = m.predict(&p, &Split::new(&g, &b)).unwrap();
        assert_eq!(pa[2], pb[2]);
    }
}
