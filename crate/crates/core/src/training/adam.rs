use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

/// Moment estimates for every parameter of a set, in registration order.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    /// Zeroed moments with `β1 = 0.9`, `β2 = 0.98`, `eps = 1e-9`.
    pub fn new(params: &ParamSet) -> Self {
        Self::with_hyper(params, 0.9, 0.98, 1e-9)
    }

    pub fn with_hyper(params: &ParamSet, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value().shape().to_vec())).collect();
        Self {
            beta1,
            beta2,
            eps,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, index: usize) -> &Tensor {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &Tensor {
        &self.v[index]
    }
}

/// One bias-corrected Adam update with the gradients held by `params`.
///
/// Non-finite gradients abort before anything is modified.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::usage("optimizer state built for a different parameter set"));
    }
    if let Some(p) = params.iter().find(|p| !p.grad().all_finite()) {
        return Err(Error::NonFinite(format!("gradient of {}", p.name())));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let ids: Vec<_> = params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let grad = params.grad(id).data().to_vec();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let value = params.value_mut(id).data_mut();
        for j in 0..grad.len() {
            let g = grad[j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            value[j] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut params = ParamSet::new();
        let id = params.add("w", Tensor::full(vec![2], 1.0)).unwrap();
        params.grad_mut(id).data_mut()[1] = f64::NAN;
        let mut st = AdamState::new(&params);
        assert!(matches!(adam_step(&mut params, &mut st, 0.1), Err(Error::NonFinite(_))));
        assert_eq!(params.value(id).data(), &[1.0, 1.0]);
        assert_eq!(st.steps(), 0);
    }
}
