//! Feed-forward price model on `[x ∥ z ∥ t]`, used as the MLP baseline.

use crate::geo::TransactionEvent;
use crate::model::{init_mlp, mlp, Activation, InstanceGrad, Learner, ModelError, Split};
use crate::tensor::{ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct DnnConfig {
    pub estate_dim: usize,
    pub attr_dim: usize,
    pub hidden: [usize; 2],
    pub time_horizon_s: f64,
}

impl DnnConfig {
    pub fn new(estate_dim: usize, attr_dim: usize, time_horizon_s: f64) -> Self {
        Self {
            estate_dim,
            attr_dim,
            hidden: [64, 64],
            time_horizon_s,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dnn {
    pub config: DnnConfig,
}

impl Dnn {
    pub fn new(config: DnnConfig) -> Self {
        Self { config }
    }

    fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        params: &'a ParamStore,
        split: &Split,
        e: &TransactionEvent,
    ) -> Result<Var, ModelError> {
        let c = &self.config;
        if e.estate_attrs.len() != c.estate_dim {
            return Err(ModelError::Dimension {
                what: "estate attributes",
                expected: c.estate_dim,
                found: e.estate_attrs.len(),
            });
        }
        let p = params.bind(tape);
        let z = &split.graph.community(e.community_id)?.attrs;
        let mut input = split.mask.estate_attrs(&e.estate_attrs);
        input.extend(split.mask.community_attrs(z));
        input.push(e.time as f64 / c.time_horizon_s);
        let x = tape.constant_vec(input);
        Ok(mlp(tape, &p, "dnn", 3, x, Activation::Identity)?)
    }
}

impl Learner for Dnn {
    fn init_params(&self, rng: &mut dyn rand::RngCore) -> ParamStore {
        let c = &self.config;
        let mut s = ParamStore::new();
        let dims = [c.estate_dim + c.attr_dim + 1, c.hidden[0], c.hidden[1], 1];
        init_mlp(rng, &mut s, "dnn", &dims);
        s
    }

    fn predict(&self, params: &ParamStore, split: &Split) -> Result<Vec<f64>, ModelError> {
        split
            .scored
            .iter()
            .map(|e| {
                let mut tape = Tape::new();
                let y = self.forward(&mut tape, params, split, e)?;
                Ok(tape.item(y))
            })
            .collect()
    }

    fn instance_grads(&self, params: &ParamStore, split: &Split) -> Result<Vec<InstanceGrad>, ModelError> {
        split
            .scored
            .iter()
            .map(|e| {
                let mut tape = Tape::new();
                let y_hat = self.forward(&mut tape, params, split, e)?;
                let y = tape.scalar_const(e.unit_price);
                let d = tape.sub(y_hat, y)?;
                let loss = tape.abs(d);
                Ok(InstanceGrad {
                    abs_error: tape.item(loss),
                    grad: tape.backward(loss)?,
                })
            })
            .collect()
    }

    fn groups(&self) -> Vec<&'static str> {
        vec!["dnn."]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{Community, LatLon, TemporalEventGraph};
    use crate::tensor::finite_diff_grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gradient_matches_finite_differences() {
        let m = Dnn::new(DnnConfig {
            estate_dim: 2,
            attr_dim: 1,
            hidden: [3, 2],
            time_horizon_s: 100.0,
        });
        let p = m.init_params(&mut ChaCha8Rng::seed_from_u64(3));
        let g = TemporalEventGraph::build(
            vec![Community { id: 1, location: LatLon::new(0.0, 0.0), attrs: vec![0.7] }],
            vec![],
            1_000.0,
        )
        .unwrap();
        let events = vec![
            TransactionEvent { estate_attrs: vec![1.0, -2.0], community_id: 1, time: 10, unit_price: 3.0 },
            TransactionEvent { estate_attrs: vec![0.5, 0.2], community_id: 1, time: 40, unit_price: -1.0 },
        ];
        let split = Split::new(&g, &events);
        let (_, analytic) = m.loss_grad(&p, &split).unwrap();
        let numeric = finite_diff_grad(|q| m.loss(q, &split).unwrap(), &p, 1e-6);
        for (a, n) in analytic.flatten().iter().zip(numeric.flatten()) {
            assert!((a - n).abs() < 1e-6, "{a} vs {n}");
        }
    }
}
