//! Finite-difference gradient checks for every differentiable op and for the
//! composed network loss.

use rand::Rng as _;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::model::Model;
use crate::numerics::{
    analytic_gradients, max_relative_error, multihead_self_attention, numeric_gradients,
    BatchNormState, Mode, Module, Padding, Tape, Tensor, Var, FD_STEP,
};
use crate::rng::{self, Rng};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_relative_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error < GRADCHECK_TOLERANCE
    }
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct OpCase {
    name: &'static str,
    points: Vec<Tensor<f64>>,
    f: OpFn,
}

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// Reduces `y` to a scalar with fixed random weights so that no coordinate of
/// the gradient is zero by symmetry.
fn weighted(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = random(&mut rng::from_seed(seed), &shape);
    let w = tape.constant(w)?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn op_cases(rng: &mut Rng) -> Vec<OpCase> {
    let mut cases = Vec::new();
    let mut case = |name: &'static str, shapes: &[&[usize]], f: OpFn, rng: &mut Rng| {
        let points = shapes.iter().map(|s| random(rng, s)).collect();
        cases.push(OpCase { name, points, f });
    };
    case("add", &[&[2, 3], &[2, 3]], Box::new(|t, v| {
        let y = t.add(v[0], v[1])?;
        weighted(t, y, 1)
    }), rng);
    case("mul", &[&[2, 3], &[2, 3]], Box::new(|t, v| {
        let y = t.mul(v[0], v[1])?;
        weighted(t, y, 2)
    }), rng);
    case("scale", &[&[4]], Box::new(|t, v| {
        let y = t.scale(v[0], -1.7)?;
        weighted(t, y, 3)
    }), rng);
    case("sum", &[&[3, 2]], Box::new(|t, v| {
        let y = t.mul(v[0], v[0])?;
        t.sum(y)
    }), rng);
    case("gelu", &[&[2, 5]], Box::new(|t, v| {
        let y = t.gelu(v[0])?;
        weighted(t, y, 4)
    }), rng);
    case("reshape", &[&[2, 6]], Box::new(|t, v| {
        let y = t.reshape(v[0], &[3, 4])?;
        weighted(t, y, 5)
    }), rng);
    case("permute", &[&[2, 3, 4]], Box::new(|t, v| {
        let y = t.permute(v[0], &[2, 0, 1])?;
        weighted(t, y, 6)
    }), rng);
    case("select", &[&[2, 3, 4]], Box::new(|t, v| {
        let y = t.select(v[0], 1, 2)?;
        weighted(t, y, 7)
    }), rng);
    case("stack", &[&[2, 3], &[2, 3]], Box::new(|t, v| {
        let y = t.stack(&[v[0], v[1]], 1)?;
        weighted(t, y, 8)
    }), rng);
    case("conv1d_same", &[&[2, 3, 6], &[4, 3, 3], &[4]], Box::new(|t, v| {
        let y = t.conv1d(v[0], v[1], v[2], Padding::Same)?;
        weighted(t, y, 9)
    }), rng);
    case("conv1d_valid", &[&[2, 3, 6], &[4, 3, 3], &[4]], Box::new(|t, v| {
        let y = t.conv1d(v[0], v[1], v[2], Padding::Valid)?;
        weighted(t, y, 10)
    }), rng);
    case("batchnorm1d", &[&[3, 2, 4], &[2], &[2]], Box::new(|t, v| {
        let mut state = BatchNormState::new(2);
        let y = t.batchnorm1d(v[0], v[1], v[2], Mode::Train, &mut state)?;
        weighted(t, y, 11)
    }), rng);
    case("maxpool1d", &[&[2, 3, 7]], Box::new(|t, v| {
        let y = t.maxpool1d(v[0], 2, 2)?;
        weighted(t, y, 12)
    }), rng);
    case("adaptive_avg_pool", &[&[2, 3, 5]], Box::new(|t, v| {
        let y = t.adaptive_avg_pool(v[0])?;
        weighted(t, y, 13)
    }), rng);
    case("linear", &[&[3, 4], &[4, 2], &[2]], Box::new(|t, v| {
        let y = t.linear(v[0], v[1], v[2])?;
        weighted(t, y, 14)
    }), rng);
    case("matmul", &[&[3, 4], &[4, 2]], Box::new(|t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted(t, y, 15)
    }), rng);
    case("bmm", &[&[2, 3, 4], &[2, 4, 2]], Box::new(|t, v| {
        let y = t.bmm(v[0], v[1])?;
        weighted(t, y, 16)
    }), rng);
    case("softmax", &[&[3, 4]], Box::new(|t, v| {
        let y = t.softmax(v[0])?;
        weighted(t, y, 17)
    }), rng);
    case("softmax_cross_entropy", &[&[4, 3]], Box::new(|t, v| {
        t.softmax_cross_entropy(v[0], &[0, 2, 1, 2])
    }), rng);
    case("mse", &[&[2, 3], &[2, 3]], Box::new(|t, v| t.mse(v[0], v[1])), rng);
    case("sum_squares", &[&[3], &[2, 2]], Box::new(|t, v| t.sum_squares(&[v[0], v[1]])), rng);
    case("multihead_self_attention", &[&[2, 3, 4], &[4, 4], &[4, 4], &[4, 4]], Box::new(|t, v| {
        let out = multihead_self_attention(t, v[0], v[1], v[2], v[3], 2)?;
        weighted(t, out.output, 18)
    }), rng);
    cases
}

/// Names of the ops covered by [`check_ops`], in report order.
pub fn op_names() -> Vec<&'static str> {
    op_cases(&mut rng::from_seed(0)).iter().map(|c| c.name).collect()
}

/// Checks every differentiable op. If `fault` names an op, its analytic
/// gradient is deliberately corrupted so the harness can be seen to fail.
pub fn check_ops(seed: u64, fault: Option<&str>) -> Result<Vec<CheckResult>> {
    let mut rng = rng::stream(seed, "gradcheck");
    op_cases(&mut rng)
        .into_iter()
        .map(|case| {
            let mut analytic = analytic_gradients(&case.f, &case.points)?;
            if fault == Some(case.name) {
                for v in analytic.iter_mut().flatten() {
                    *v = *v * 1.5 + 1e-3;
                }
            }
            let numeric = numeric_gradients(&case.f, &case.points)?;
            Ok(CheckResult {
                name: case.name.to_string(),
                max_relative_error: max_relative_error(&analytic, &numeric),
            })
        })
        .collect()
}

/// Checks `d total / d p` for every parameter of the network on a random
/// batch of size `batch`, one result per parameter tensor.
pub fn check_model(config: &ModelConfig, batch: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut model = Model::<f64>::new(config)?;
    let mut rng = rng::stream(seed, "gradcheck.model");
    let x = random(&mut rng, &[batch, config.d_in, config.seq_len]);
    let labels: Vec<usize> = (0..batch).map(|i| i % config.n_classes).collect();

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let (_, vars) = model.loss_vars(&mut tape, xv, &labels, Mode::Train, 1.0)?;
    tape.backward(vars.total)?;
    let mut analytic = Vec::new();
    model.visit_params(&mut |p| {
        let g = tape
            .param_grad(p.id())
            .map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec);
        analytic.push((p.name().to_string(), g));
    });

    let mut results = Vec::with_capacity(analytic.len());
    for (index, (name, a)) in analytic.into_iter().enumerate() {
        let mut numeric = Vec::with_capacity(a.len());
        for j in 0..a.len() {
            let eval_at = |delta: f64| -> Result<f64> {
                let mut probe = model.clone();
                let mut seen = 0;
                probe.visit_params_mut(&mut |p| {
                    if seen == index {
                        p.tensor.data_mut()[j] += delta;
                    }
                    seen += 1;
                });
                Ok(probe.loss(&x, &labels, Mode::Train)?.total)
            };
            let plus = eval_at(FD_STEP)?;
            let minus = eval_at(-FD_STEP)?;
            numeric.push((plus - minus) / (2.0 * FD_STEP));
        }
        results.push(CheckResult {
            name,
            max_relative_error: max_relative_error(&[a], &[numeric]),
        });
    }
    Ok(results)
}
