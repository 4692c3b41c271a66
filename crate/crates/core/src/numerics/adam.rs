use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Scalar> AdamConfig<T> {
    pub fn new(learning_rate: T) -> Self {
        Self {
            learning_rate,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            epsilon: T::lit(1e-8),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (zero, one) = (T::zero(), T::one());
        if !(self.beta1 > zero && self.beta1 < one) {
            return Err(Error::config("beta1", "must lie in (0, 1)"));
        }
        if !(self.beta2 > zero && self.beta2 < one) {
            return Err(Error::config("beta2", "must lie in (0, 1)"));
        }
        if !(self.epsilon > zero) {
            return Err(Error::config("epsilon", "must be positive"));
        }
        if !(self.learning_rate > zero) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        Ok(())
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step_count: u64,
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub config: AdamConfig<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize, config: AdamConfig<T>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            step_count: 0,
            first_moment: vec![T::zero(); len],
            second_moment: vec![T::zero(); len],
            config,
        })
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<T: Scalar>(
    name: &str,
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::dim(format!(
            "adam: parameter `{name}` has {} values, gradient {}, state {}",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of parameter `{name}`")));
    }
    let c = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = T::one() - c.beta1.powi(t);
    let bc2 = T::one() - c.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        let m = c.beta1 * state.first_moment[i] + (T::one() - c.beta1) * g;
        let v = c.beta2 * state.second_moment[i] + (T::one() - c.beta2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        params[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
    }
    Ok(())
}
