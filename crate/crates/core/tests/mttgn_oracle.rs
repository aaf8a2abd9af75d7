//! The network re-derived with plain loops, compared against the tape-based
//! implementation for predictions and gradients.

use metatransfer::geo::{haversine, Community, LatLon, TemporalEventGraph, TransactionEvent, SECONDS_PER_DAY};
use metatransfer::model::{Learner, Split};
use metatransfer::mttgn::{Mttgn, MttgnConfig};
use metatransfer::tensor::{finite_diff_grad, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mat(p: &ParamStore, name: &str) -> (Vec<f64>, usize) {
    let t = p.get(name).unwrap_or_else(|| panic!("missing {name}"));
    let cols = if t.shape().len() == 2 { t.shape()[1] } else { 1 };
    (t.data().to_vec(), cols)
}

fn mv(p: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let (w, cols) = mat(p, name);
    assert_eq!(cols, x.len(), "{name}");
    w.chunks(cols).map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dense(p: &ParamStore, prefix: &str, k: usize, x: &[f64]) -> Vec<f64> {
    add(&mv(p, &format!("{prefix}.{k}.w"), x), p.get(&format!("{prefix}.{k}.b")).unwrap().data())
}

fn phi(p: &ParamStore, dt: f64) -> Vec<f64> {
    let d = dt / SECONDS_PER_DAY;
    let mut out = vec![d];
    for &w in p.get("tgn.time.freq").unwrap().data() {
        out.push((w * d).cos());
        out.push((w * d).sin());
    }
    out
}

#[derive(Clone)]
struct St {
    h: Vec<f64>,
    t: i64,
    touched: bool,
}

fn evolve(p: &ParamStore, s: &St, e: &TransactionEvent, z: &[f64]) -> St {
    let dt = (e.time - s.t) as f64;
    let mut gin = phi(p, dt);
    gin.extend(&e.estate_attrs);
    gin.push(e.unit_price);
    gin.extend(&s.h);
    let gate: Vec<f64> = mv(p, "tgn.gate.w", &gin).iter().map(|v| (-v.max(0.0)).exp()).collect();
    let ht: Vec<f64> = gate.iter().zip(&s.h).map(|(g, h)| g * h).collect();
    let mut inp = e.estate_attrs.clone();
    inp.push(e.unit_price);
    inp.extend(z);
    let part = |g: &str, which: &str, v: &[f64]| {
        add(&mv(p, &format!("tgn.gru.{g}.w{which}"), v), p.get(&format!("tgn.gru.{g}.b{which}")).unwrap().data())
    };
    let r: Vec<f64> = add(&part("r", "x", &inp), &part("r", "h", &ht)).into_iter().map(sigmoid).collect();
    let u: Vec<f64> = add(&part("u", "x", &inp), &part("u", "h", &ht)).into_iter().map(sigmoid).collect();
    let nh = part("n", "h", &ht);
    let nx = part("n", "x", &inp);
    let h = (0..ht.len())
        .map(|i| {
            let n = (nx[i] + r[i] * nh[i]).tanh();
            (1.0 - u[i]) * n + u[i] * ht[i]
        })
        .collect();
    St { h, t: e.time, touched: true }
}

fn appraise(p: &ParamStore, cs: &[Community], eps: f64, horizon: f64, states: &[St], e: &TransactionEvent) -> f64 {
    let i = cs.iter().position(|c| c.id == e.community_id).unwrap();
    let d = states[0].h.len();
    let nbrs: Vec<(usize, f64)> = (0..cs.len())
        .map(|j| (j, if i == j { 0.0 } else { haversine(cs[i].location, cs[j].location) }))
        .filter(|&(_, dist)| dist < eps)
        .collect();
    let mut q = e.estate_attrs.clone();
    q.extend(&states[i].h);
    let aq = mv(p, "tgn.attn.w1_query", &q);
    let scores: Vec<Vec<f64>> = nbrs
        .iter()
        .map(|&(j, dist)| {
            let mut nin = states[j].h.clone();
            nin.extend(phi(p, (e.time - states[j].t) as f64));
            nin.push(dist / eps);
            let act: Vec<f64> = add(&aq, &mv(p, "tgn.attn.w1_neighbor", &nin)).iter().map(|v| v.tanh()).collect();
            mv(p, "tgn.attn.w2", &act)
        })
        .collect();
    let mut agg = vec![0.0; d];
    for k in 0..d {
        let m = scores.iter().map(|s| s[k]).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = scores.iter().map(|s| (s[k] - m).exp()).sum();
        for (s, &(j, _)) in scores.iter().zip(&nbrs) {
            agg[k] += (s[k] - m).exp() / total * states[j].h[k];
        }
    }
    let h_hat = relu(mv(p, "tgn.agg.w3", &agg));
    let mut fin = e.estate_attrs.clone();
    fin.extend(&cs[i].attrs);
    fin.extend(&h_hat);
    fin.push(e.time as f64 / horizon);
    let f = relu(dense(p, "fi", 1, &relu(dense(p, "fi", 0, &fin))));
    let z = &cs[i].attrs;
    let w = dense(p, "hyper.w", 2, &relu(dense(p, "hyper.w", 1, &relu(dense(p, "hyper.w", 0, z)))));
    let b = dense(p, "hyper.b", 2, &relu(dense(p, "hyper.b", 1, &relu(dense(p, "hyper.b", 0, z)))));
    w.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>() + b[0]
}

/// Predictions from replaying `events`: simultaneous events are all
/// appraised before any of them updates a state.
fn oracle_predict(p: &ParamStore, g: &TemporalEventGraph, horizon: f64, events: &[TransactionEvent], d: usize) -> Vec<f64> {
    let cs = g.communities();
    let mut states = vec![St { h: vec![0.0; d], t: 0, touched: false }; cs.len()];
    let mut out = Vec::new();
    let mut k = 0;
    while k < events.len() {
        let mut end = k;
        while end < events.len() && events[end].time == events[k].time {
            end += 1;
        }
        for e in &events[k..end] {
            out.push(appraise(p, cs, g.epsilon(), horizon, &states, e));
        }
        for e in &events[k..end] {
            let i = cs.iter().position(|c| c.id == e.community_id).unwrap();
            states[i] = evolve(p, &states[i], e, &cs[i].attrs);
        }
        k = end;
    }
    assert!(states.iter().any(|s| s.touched));
    out
}

fn fixture() -> (TemporalEventGraph, Vec<TransactionEvent>) {
    let cs = vec![
        Community { id: 4, location: LatLon::new(30.000, 104.000), attrs: vec![0.4, -0.3] },
        Community { id: 7, location: LatLon::new(30.005, 104.002), attrs: vec![-0.6, 0.9] },
        Community { id: 9, location: LatLon::new(30.009, 104.011), attrs: vec![1.1, 0.2] },
    ];
    let day = SECONDS_PER_DAY as i64;
    let mk = |cid: u32, t: i64, x: [f64; 3], y: f64| TransactionEvent {
        estate_attrs: x.to_vec(),
        community_id: cid,
        time: t,
        unit_price: y,
    };
    let events = vec![
        mk(4, 3 * day, [0.5, -1.0, 0.2], 1.3),
        mk(7, 5 * day, [-0.2, 0.4, 1.0], -0.7),
        mk(4, 9 * day + 3600, [0.9, 0.1, -0.5], 0.8),
        mk(9, 9 * day + 3600, [0.0, 0.3, 0.3], 2.1),
        mk(7, 20 * day, [1.2, -0.6, 0.1], -1.5),
        mk(4, 41 * day, [-0.8, 0.7, 0.6], 0.2),
    ];
    let g = TemporalEventGraph::build(cs, vec![], 2_000.0).unwrap();
    (g, events)
}

fn model(detach_depth: usize) -> Mttgn {
    let mut c = MttgnConfig::new(3, 2, 60.0 * SECONDS_PER_DAY);
    c.state_dim = 3;
    c.time_dim = 2;
    c.hyper_hidden = [4, 3];
    c.fi_hidden = [5, 4];
    c.detach_depth = detach_depth;
    Mttgn::new(c)
}

fn perturbed_params(m: &Mttgn) -> ParamStore {
    let mut p = m.init_params(&mut ChaCha8Rng::seed_from_u64(31));
    // push magnitudes up so every nonlinearity is exercised
    p.scale(1.7);
    p
}

#[test]
fn forward_matches_loop_oracle() {
    let m = model(1);
    let p = perturbed_params(&m);
    let (g, events) = fixture();
    // the middle pair of simultaneous events exercises the group rule
    let want = oracle_predict(&p, &g, m.config.time_horizon_s, &events, 3);
    let got = m.predict(&p, &Split::new(&g, &events)).unwrap();
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{got:?} vs {want:?}");
    }
}

#[test]
fn full_unroll_gradient_matches_finite_differences() {
    let m = model(usize::MAX);
    let p = perturbed_params(&m);
    let (g, events) = fixture();
    let split = Split::new(&g, &events);
    let (_, analytic) = m.loss_grad(&p, &split).unwrap();
    let horizon = m.config.time_horizon_s;
    let numeric = finite_diff_grad(
        |q| {
            let preds = oracle_predict(q, &g, horizon, &events, 3);
            preds.iter().zip(&events).map(|(a, e)| (a - e.unit_price).abs()).sum::<f64>() / events.len() as f64
        },
        &p,
        1e-6,
    );
    let a = analytic.flatten();
    let n = numeric.flatten();
    let diff: f64 = a.iter().zip(&n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = n.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    assert!(diff / scale < 1e-3, "relative gradient error {}", diff / scale);
    for (name, t) in numeric.iter() {
        let at = analytic.get(name).unwrap();
        for (x, y) in at.data().iter().zip(t.data()) {
            assert!((x - y).abs() <= 1e-5 + 1e-3 * y.abs(), "{name}: {x} vs {y}");
        }
    }
}

#[test]
fn truncated_unroll_reaches_evolution_parameters() {
    let m = model(1);
    let p = perturbed_params(&m);
    let (g, events) = fixture();
    let (_, grad) = m.loss_grad(&p, &Split::new(&g, &events)).unwrap();
    for name in ["tgn.gate.w", "tgn.gru.n.wx", "tgn.time.freq", "tgn.attn.w2"] {
        assert!(grad.get(name).unwrap().data().iter().any(|&v| v != 0.0), "{name}");
    }
}
