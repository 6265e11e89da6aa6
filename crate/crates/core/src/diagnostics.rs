//! Finite-difference gradient suite over every tape primitive and the
//! full toy-scale model with its loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::gradcheck::{check, STEP};
use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{make_pair, sample_shape, PerturbationSpec, ShapeFamily, ShapeSpec};
use crate::error::Result;
use crate::network::{init_params, Model, ModelConfig, ParamVars};
use crate::training::{label, taped_loss, LossConfig};

/// Tolerance on the norm-wise relative error.
pub const SUITE_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientCase {
    pub name: String,
    /// Largest relative error over the inputs of the case.
    pub max_relative_error: f64,
    pub inputs: usize,
}

impl GradientCase {
    pub fn passed(&self) -> bool {
        self.max_relative_error < SUITE_TOLERANCE
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sized")
}

/// Scalar summary `mean_squared_norm(x) + u^T x v` with fixed `u`, `v`.
fn project(tape: &mut Tape, x: Var) -> Result<Var> {
    let [r, c] = tape.shape(x);
    let u: Vec<f64> = (0..r).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
    let v: Vec<f64> = (0..c).map(|i| ((i * 53 % 13) as f64 - 6.0) / 9.0).collect();
    let u = tape.constant(Tensor::new(1, r, u)?);
    let v = tape.constant(Tensor::new(c, 1, v)?);
    let xv = tape.matmul(x, v)?;
    let lin = tape.matmul(u, xv)?;
    let sq = tape.mean_squared_norm(x)?;
    tape.add(sq, lin)
}

type Builder = fn(&mut Tape, &[Var]) -> Result<Var>;

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, Builder)> {
    let mut r = |a, b| random(rng, a, b);
    vec![
        ("matmul", vec![r(4, 3), r(3, 5)], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y)
        }),
        ("bias_add", vec![r(4, 3), r(1, 3)], |t, v| {
            let y = t.bias_add(v[0], v[1])?;
            project(t, y)
        }),
        ("add", vec![r(3, 4), r(3, 4)], |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y)
        }),
        ("sub", vec![r(3, 4), r(3, 4)], |t, v| {
            let y = t.sub(v[0], v[1])?;
            project(t, y)
        }),
        ("relu", vec![r(5, 4)], |t, v| {
            let y = t.relu(v[0]);
            project(t, y)
        }),
        ("sigmoid", vec![r(5, 4)], |t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y)
        }),
        ("tanh", vec![r(5, 4)], |t, v| {
            let y = t.tanh(v[0]);
            project(t, y)
        }),
        ("scale", vec![r(3, 3)], |t, v| {
            let y = t.scale(v[0], -1.7);
            project(t, y)
        }),
        ("concat", vec![r(4, 2), r(4, 3)], |t, v| {
            let y = t.concat(&[v[0], v[1]])?;
            project(t, y)
        }),
        ("sum", vec![r(3, 4)], |t, v| {
            let y = t.sum(v[0]);
            let y2 = t.mean_squared_norm(y)?;
            t.add(y, y2)
        }),
        ("mean_squared_norm", vec![r(4, 3)], |t, v| t.mean_squared_norm(v[0])),
        ("normalize_rows", vec![r(4, 3)], |t, v| {
            let y = t.normalize_rows(v[0])?;
            project(t, y)
        }),
        ("slice_cols", vec![r(3, 6)], |t, v| {
            let y = t.slice_cols(v[0], 1, 4)?;
            project(t, y)
        }),
        ("gather_rows", vec![r(4, 3)], |t, v| {
            let y = t.gather_rows(v[0], &[2, 0, 2, 3, 1, 2])?;
            project(t, y)
        }),
        ("max_pool_set", vec![r(6, 4)], |t, v| {
            let y = t.max_pool_set(v[0])?;
            project(t, y)
        }),
        ("segment_max_pool", vec![r(7, 3)], |t, v| {
            let y = t.segment_max_pool(v[0], &[0, 2, 2, 5, 7], true)?;
            project(t, y)
        }),
    ]
}

/// Every primitive on random inputs, then the toy model with its loss
/// with respect to all parameters on a 32-point pair.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradientCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, inputs, f) in primitive_cases(&mut rng) {
        let report = check(f, &inputs, STEP)?;
        out.push(GradientCase {
            name: name.into(),
            max_relative_error: report.iter().map(|r| r.relative_error).fold(0.0, f64::max),
            inputs: inputs.len(),
        });
    }
    out.push(full_model_case(seed)?);
    Ok(out)
}

/// Model plus combined loss on the toy configuration.
pub fn full_model_case(seed: u64) -> Result<GradientCase> {
    let config = ModelConfig::toy();
    let mut params = init_params(&config, seed)?;
    // Zero biases put the zero-displacement center rows exactly on the ReLU
    // kink, where central differences are meaningless.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in params.tensors_mut() {
        if t.rows() == 1 {
            t.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
        }
    }
    let model = Model::new(config, params.clone())?;
    let shape = ShapeSpec::new(ShapeFamily::Box { size: [1.0, 0.7, 0.4] }, 32);
    let pair = make_pair(&sample_shape(&shape, seed), &PerturbationSpec::modelnet(), seed + 1);
    let prep = model.prepare(&pair.template, &pair.source)?;
    let gt = label(&pair);
    let loss = LossConfig { beta: 2.0 };
    let inputs: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
    let report = check(
        |tape, vars| {
            let pv = ParamVars::from_vars(&params, vars)?;
            let y = model.forward_prepared_on_tape(tape, &pv, &prep)?;
            Ok(taped_loss(tape, y, &gt, &loss)?.total)
        },
        &inputs,
        STEP,
    )?;
    Ok(GradientCase {
        name: "toy_model_loss".into(),
        max_relative_error: report.iter().map(|r| r.relative_error).fold(0.0, f64::max),
        inputs: inputs.len(),
    })
}
