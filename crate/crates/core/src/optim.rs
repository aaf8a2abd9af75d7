//! First-order optimizers over a [`ParamStore`].

use crate::tensor::{ParamStore, TensorError};

/// Plain gradient descent `θ ← θ − lr·g`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self { lr }
    }

    pub fn step(&mut self, params: &mut ParamStore, grad: &ParamStore) -> Result<(), TensorError> {
        params.add_scaled(-self.lr, grad)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Option<ParamStore>,
    v: Option<ParamStore>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: None,
            v: None,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grad: &ParamStore) -> Result<(), TensorError> {
        let m = self.m.get_or_insert_with(|| params.zeros_like());
        let v = self.v.get_or_insert_with(|| params.zeros_like());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let g = grad.get(name).ok_or_else(|| TensorError::MissingParam(name.to_string()))?;
            let mt = m.get_mut(name).ok_or_else(|| TensorError::MissingParam(name.to_string()))?;
            let vt = v.get_mut(name).ok_or_else(|| TensorError::MissingParam(name.to_string()))?;
            if g.len() != p.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (mt.data_mut(), vt.data_mut());
            for i in 0..pd.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gd[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                pd[i] -= self.lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Either optimizer behind one interface.
#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn step(&mut self, params: &mut ParamStore, grad: &ParamStore) -> Result<(), TensorError> {
        match self {
            Optimizer::Sgd(o) => o.step(params, grad),
            Optimizer::Adam(o) => o.step(params, grad),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one(v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::vector(vec![v]));
        p
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // bias-corrected first step is lr * g / (|g| + eps)
        let mut p = one(1.0);
        let mut opt = Adam::new(0.01);
        opt.step(&mut p, &one(-3.0)).unwrap();
        let w = p.get("w").unwrap().item();
        assert!((w - 1.01).abs() < 1e-9);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = one(5.0);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let w = p.get("w").unwrap().item();
            opt.step(&mut p, &one(2.0 * (w - 2.0))).unwrap();
        }
        assert!((p.get("w").unwrap().item() - 2.0).abs() < 1e-2);
    }

    #[test]
    fn sgd_step() {
        let mut p = one(1.0);
        Sgd::new(0.1).step(&mut p, &one(2.0)).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 0.8);
    }
}
