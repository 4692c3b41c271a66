//! Dense tensors, reverse-mode differentiation, Adam and gradient checking.

mod adam;
mod attention;
mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use attention::{multihead_self_attention, AttentionOutput};
pub use gradcheck::{
    analytic_gradients, grad_check, grad_check_many, max_relative_error, numeric_gradients,
    FD_STEP,
};
pub use param::{Module, Param, ParamId, ParamKind};
pub use tape::{BatchNormState, Mode, Padding, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;
use crate::scalar::Scalar;

/// Adds the gradients recorded on `tape` into each parameter's gradient slot.
pub fn accumulate_grads<T: Scalar, M: Module<T> + ?Sized>(module: &mut M, tape: &Tape<T>) -> Result<()> {
    let mut res = Ok(());
    module.visit_params_mut(&mut |p| {
        if res.is_ok() {
            if let Some(g) = tape.param_grad(p.id()) {
                res = p.tensor.accumulate_grad(g);
            }
        }
    });
    res
}

/// Binds every `Weight` parameter of `module` and returns the l2 penalty node.
pub fn l2_penalty<T: Scalar, M: Module<T> + ?Sized>(tape: &mut Tape<T>, module: &M) -> Result<Var> {
    let mut weights = Vec::new();
    module.visit_params(&mut |p| {
        if p.kind() == ParamKind::Weight {
            weights.push(p);
        }
    });
    let vars = weights
        .into_iter()
        .map(|p| tape.param(p))
        .collect::<Result<Vec<_>>>()?;
    tape.sum_squares(&vars)
}
