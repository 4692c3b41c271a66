use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub struct AttentionOutput {
    /// `[B, T, d]`
    pub output: Var,
    /// Attention probabilities `[B * heads, T, T]`; each row sums to one.
    pub probs: Var,
}

/// Scaled dot-product self-attention over `tokens[B, T, d]` with `heads`
/// heads of width `d / heads`, built from tape primitives.
pub fn multihead_self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    tokens: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    heads: usize,
) -> Result<AttentionOutput> {
    let shape = tape.shape(tokens).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim(format!("attention expects [B,T,d], got {shape:?}")));
    }
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "{heads} heads do not divide model width {d}"
        )));
    }
    for (name, w) in [("wq", wq), ("wk", wk), ("wv", wv)] {
        if tape.shape(w) != [d, d] {
            return Err(Error::dim(format!(
                "{name} has shape {:?}, expected [{d}, {d}]",
                tape.shape(w)
            )));
        }
    }
    let dh = d / heads;
    let flat = tape.reshape(tokens, &[b * t, d])?;

    // [B*T, d] -> [B*heads, T, dh]
    let split = |tape: &mut Tape<T>, w: Var| -> Result<Var> {
        let p = tape.matmul(flat, w)?;
        let p = tape.reshape(p, &[b, t, heads, dh])?;
        let p = tape.permute(p, &[0, 2, 1, 3])?;
        tape.reshape(p, &[b * heads, t, dh])
    };
    let q = split(tape, wq)?;
    let k = split(tape, wk)?;
    let v = split(tape, wv)?;

    let kt = tape.permute(k, &[0, 2, 1])?;
    let scores = tape.bmm(q, kt)?;
    let scores = tape.scale(scores, T::one() / T::lit(dh as f64).sqrt())?;
    let probs = tape.softmax(scores)?;
    let ctx = tape.bmm(probs, v)?;
    let ctx = tape.reshape(ctx, &[b, heads, t, dh])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let output = tape.reshape(ctx, &[b, t, d])?;
    Ok(AttentionOutput { output, probs })
}
