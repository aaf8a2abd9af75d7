use super::ParamStore;

/// Central-difference gradient of `f` at `params`, one coordinate at a time.
pub fn finite_diff_grad<F>(mut f: F, params: &ParamStore, step: f64) -> ParamStore
where
    F: FnMut(&ParamStore) -> f64,
{
    assert!(step > 0.0, "finite difference step must be positive");
    let mut work = params.clone();
    let mut out = params.zeros_like();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let n = params.get(name).map_or(0, |t| t.len());
        for i in 0..n {
            let orig = params.get(name).expect("name from store").data()[i];
            work.get_mut(name).expect("cloned store").data_mut()[i] = orig + step;
            let plus = f(&work);
            work.get_mut(name).expect("cloned store").data_mut()[i] = orig - step;
            let minus = f(&work);
            work.get_mut(name).expect("cloned store").data_mut()[i] = orig;
            out.get_mut(name).expect("zeros_like store").data_mut()[i] =
                (plus - minus) / (2.0 * step);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("p", Tensor::scalar(v));
        p
    }

    #[test]
    fn square_at_three() {
        let g = finite_diff_grad(|p| p.get("p").unwrap().item().powi(2), &single(3.0), 1e-5);
        assert!((g.get("p").unwrap().item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn sine_at_zero() {
        let g = finite_diff_grad(|p| p.get("p").unwrap().item().sin(), &single(0.0), 1e-5);
        assert!((g.get("p").unwrap().item() - 1.0).abs() < 1e-8);
    }
}
