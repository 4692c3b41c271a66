//! Central-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const FD_STEP: f64 = 1e-4;

fn eval<T, F>(f: &F, points: &[Tensor<T>], with_grad: bool) -> Result<(Tape<T>, Vec<Var>, Var)>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = points
        .iter()
        .map(|p| {
            let mut t = p.clone();
            t.set_requires_grad(with_grad);
            tape.leaf(t)
        })
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Graph("grad_check needs a scalar-valued function".into()));
    }
    Ok((tape, vars, out))
}

/// Gradients of `f` at `points` from the reverse pass, one vector per point.
pub fn analytic_gradients<T, F>(f: &F, points: &[Tensor<T>]) -> Result<Vec<Vec<f64>>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, out) = eval(f, points, true)?;
    tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(points)
        .map(|(&v, p)| match tape.grad(v) {
            Some(g) => g.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; p.len()],
        })
        .collect())
}

/// Central differences with step `FD_STEP`, one vector per point.
pub fn numeric_gradients<T, F>(f: &F, points: &[Tensor<T>]) -> Result<Vec<Vec<f64>>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let value = |pts: &[Tensor<T>]| -> Result<f64> {
        let (tape, _, out) = eval(f, pts, false)?;
        Ok(tape.value(out).item().as_f64())
    };
    let mut pts = points.to_vec();
    let mut result = Vec::with_capacity(points.len());
    for i in 0..points.len() {
        let mut g = Vec::with_capacity(points[i].len());
        for j in 0..points[i].len() {
            let orig = pts[i].data()[j];
            pts[i].data_mut()[j] = orig + T::lit(FD_STEP);
            let plus = value(&pts)?;
            pts[i].data_mut()[j] = orig - T::lit(FD_STEP);
            let minus = value(&pts)?;
            pts[i].data_mut()[j] = orig;
            g.push((plus - minus) / (2.0 * FD_STEP));
        }
        result.push(g);
    }
    Ok(result)
}

/// Max over coordinates of `|a - n| / max(1e-8, |a| + |n|)`.
pub fn max_relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    analytic
        .iter()
        .flatten()
        .zip(numeric.iter().flatten())
        .map(|(&a, &n)| (a - n).abs() / f64::max(1e-8, a.abs() + n.abs()))
        .fold(0.0, f64::max)
}

/// Checks the gradient of scalar `f` with respect to every tensor in `points`.
pub fn grad_check_many<T, F>(f: F, points: &[Tensor<T>]) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let a = analytic_gradients(&f, points)?;
    let n = numeric_gradients(&f, points)?;
    Ok(max_relative_error(&a, &n))
}

pub fn grad_check<T, F>(f: F, point: &Tensor<T>) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    grad_check_many(|tape: &mut Tape<T>, v: &[Var]| f(tape, v[0]), std::slice::from_ref(point))
}
