//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use super::params::ParamSet;
use super::tensor::Tensor;
use super::DiffError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer state: per-parameter moments plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first_moment: BTreeMap<String, Tensor>,
    second_moment: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. Decay is decoupled: applied directly to the weights before
    /// the moment-based step. Parameters without a gradient entry are left
    /// untouched entirely (no decay either), so absent and explicit-zero
    /// gradients behave differently only in the decay term.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<(), DiffError> {
        for (name, grad) in grads {
            if !grad.is_finite() {
                return Err(DiffError::NonFiniteGrad { name: name.clone() });
            }
            match params.get(name) {
                None => {
                    return Err(DiffError::UnknownParam { name: name.clone() });
                }
                Some(p) if p.shape() != grad.shape() => {
                    return Err(DiffError::ShapeMismatch {
                        node: format!("adam \"{name}\""),
                        msg: format!("param {:?} vs grad {:?}", p.shape(), grad.shape()),
                    });
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let t = self.step;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t as i32);
        let bc2 = 1.0 - c.beta2.powi(t as i32);
        for (name, grad) in grads {
            let p = params.get_mut(name).expect("validated above");
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let decay = 1.0 - c.learning_rate * c.weight_decay;
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *pv *= decay;
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![value]));
        p
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params() {
        let mut params = single_param(0.5);
        let mut state = AdamState::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::vector(vec![0.0]));
        state.step(&mut params, &grads).unwrap();
        assert_eq!(params.get("w").unwrap().data()[0], 0.5);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_grad_applies_pure_decay() {
        let mut params = single_param(1.0);
        let mut state = AdamState::new(AdamConfig::default()); // lr 1e-3, wd 1e-4
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::vector(vec![0.0]));
        state.step(&mut params, &grads).unwrap();
        assert_eq!(params.get("w").unwrap().data()[0], 1.0 - 1e-7);
    }

    #[test]
    fn constant_gradient_descends_monotonically() {
        // Scalar simulation: g = 1 for 1000 steps must strictly decrease.
        let mut params = single_param(0.0);
        let mut state = AdamState::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::vector(vec![1.0]));
        let mut prev = params.get("w").unwrap().data()[0];
        for _ in 0..1000 {
            state.step(&mut params, &grads).unwrap();
            let cur = params.get("w").unwrap().data()[0];
            assert!(cur < prev, "expected monotone decrease, {cur} !< {prev}");
            prev = cur;
        }
    }

    #[test]
    fn non_finite_grad_names_parameter() {
        let mut params = single_param(0.0);
        let mut state = AdamState::new(AdamConfig::default());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), {
            let mut t = Tensor::vector(vec![0.0]);
            t.data_mut()[0] = f64::NAN;
            t
        });
        let err = state.step(&mut params, &grads).unwrap_err();
        assert!(err.to_string().contains('w'), "got: {err}");
        assert_eq!(state.step_count(), 0);
    }
}
