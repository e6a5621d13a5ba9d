//! Finite-difference cases shared by the gradient tests and the acceptance
//! run.

use bst::model::{bind, forward, Batch, BlockVars, ModelKind, ModelParams, Readout};
use bst::tensor::gradcheck::GradCheck;
use bst::tensor::{Mode, Tape, Var};
use rand::rngs::mock::StepRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

pub const TOL: f64 = 1e-3;
pub const INSTANCES: u64 = 5;

/// LeakyReLU kinks sit close enough to some pre-activations inside a full
/// model that the primitive step straddles them; the smaller step does not.
pub const MODEL_STEP: f64 = 1e-5;

type OpFn = Box<dyn for<'p> Fn(&mut Tape<'p, f64>, &[Var]) -> bst::Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<(&'static str, Vec<usize>)>,
    f: OpFn,
}

fn case(
    name: &'static str,
    shapes: &[(&'static str, &[usize])],
    f: impl for<'p> Fn(&mut Tape<'p, f64>, &[Var]) -> bst::Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|(n, s)| (*n, s.to_vec())).collect(),
        f: Box::new(f),
    }
}

/// Every differentiable primitive, each with a representative shape.
pub fn op_cases() -> Vec<OpCase> {
    let softmax_mask = [true, true, false, true, false, true, true, true, true, false, false, true];
    vec![
        case("matmul", &[("a", &[3, 4]), ("b", &[4, 5])], |t, v| t.matmul(v[0], v[1])),
        case("batch_matmul", &[("a", &[2, 3, 4]), ("b", &[2, 4, 2])], |t, v| t.batch_matmul(v[0], v[1], false)),
        case("batch_matmul_t", &[("a", &[2, 3, 4]), ("b", &[2, 5, 4])], |t, v| t.batch_matmul(v[0], v[1], true)),
        case("add", &[("a", &[3, 4]), ("b", &[3, 4])], |t, v| t.add(v[0], v[1])),
        case("add_bias", &[("x", &[2, 3, 4]), ("b", &[4])], |t, v| t.add_bias(v[0], v[1])),
        case("scale", &[("x", &[3, 4])], |t, v| Ok(t.scale(v[0], 0.37))),
        case("mul_const", &[("x", &[6])], |t, v| t.mul_const(v[0], vec![1.5, -0.5, 0.0, 2.0, 0.25, -1.0])),
        case("mask_rows", &[("x", &[3, 4])], |t, v| t.mask_rows(v[0], &[true, false, true])),
        case("masked_softmax", &[("x", &[3, 4])], move |t, v| t.masked_softmax(v[0], &softmax_mask)),
        case("layer_norm", &[("x", &[4, 5]), ("g", &[5]), ("b", &[5])], |t, v| t.layer_norm(v[0], v[1], v[2])),
        case("leaky_relu", &[("x", &[4, 6])], |t, v| t.leaky_relu(v[0], 0.01)),
        case("leaky_relu_0.3", &[("x", &[4, 6])], |t, v| t.leaky_relu(v[0], 0.3)),
        case("sigmoid", &[("x", &[3, 4])], |t, v| Ok(t.sigmoid(v[0]))),
        case("dropout", &[("x", &[5, 6])], |t, v| {
            // a fixed mask: the rng is re-seeded on every evaluation
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            t.dropout(v[0], 0.3, Mode::Train, &mut rng)
        }),
        case("concat", &[("a", &[3, 2]), ("b", &[3, 4])], |t, v| t.concat(&[v[0], v[1]])),
        case("reshape", &[("x", &[3, 4])], |t, v| t.reshape(v[0], &[2, 6])),
        case("transpose", &[("x", &[2, 3, 4])], |t, v| t.transpose(v[0], 0, 2)),
        case("sum", &[("x", &[3, 4])], |t, v| Ok(t.sum(v[0]))),
        case("gather_rows", &[("table", &[5, 3])], |t, v| t.gather_rows(v[0], &[0, 3, 3, 1, 4], "t")),
        case("bag_mean", &[("table", &[5, 3])], |t, v| t.bag_mean(v[0], &[vec![1, 2, 2], vec![], vec![4]], "t")),
        case("binary_cross_entropy", &[("x", &[6])], |t, v| {
            let p = t.sigmoid(v[0]);
            t.binary_cross_entropy(p, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0])
        }),
    ]
}

/// Random inputs in [-2, 2], nudged away from 0 so LeakyReLU's kink is
/// never straddled.
fn inputs(shapes: &[(&'static str, Vec<usize>)], seed: u64) -> ModelParams<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::default();
    for (name, shape) in shapes {
        let mut t = uniform(shape, &mut rng);
        for v in t.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        p.insert(*name, t);
    }
    p
}

/// Random fixed weights turn any output into a scalar with a non-trivial
/// gradient.
pub fn weighted_sum(tape: &mut Tape<'_, f64>, x: Var, seed: u64) -> bst::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xface);
    let n = tape.value(x).len();
    let w = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y = tape.mul_const(x, w)?;
    Ok(tape.sum(y))
}

pub fn op_error(case: &OpCase, seed: u64) -> f64 {
    let params = inputs(&case.shapes, seed);
    let names: Vec<&'static str> = case.shapes.iter().map(|(n, _)| *n).collect();
    GradCheck { seed, ..GradCheck::default() }
        .run(&params, |tape: &mut Tape<'_, f64>, p: &ModelParams<f64>| {
            let vars: Vec<Var> = names.iter().map(|n| tape.param(n, p.get(n).unwrap())).collect();
            let out = (case.f)(tape, &vars)?;
            weighted_sum(tape, out, seed)
        })
        .unwrap()
        .max_rel_err
}

/// Cross-entropy of a whole model on a random batch, dropout off.
pub fn model_error(kind: ModelKind, readout: Readout, seed: u64) -> f64 {
    let config = bst::model::BstConfig { readout, ..tiny_config() };
    let schema = tiny_schema();
    let params = f64_params(kind, &config, &schema, seed);
    let examples = random_examples(6, seed, &schema, config.sequence_length);
    let batch = Batch::new(&examples).unwrap();
    let labels = batch.labels_as::<f64>();
    GradCheck { seed, step: MODEL_STEP, ..GradCheck::default() }
        .run(&params, |tape: &mut Tape<'_, f64>, p: &ModelParams<f64>| {
            let vars = bind(tape, p, &schema)?;
            let mut rng = StepRng::new(0, 0);
            let out = forward(kind, tape, &vars, &batch, &config, Mode::Eval, &mut rng)?;
            tape.binary_cross_entropy(out, &labels)
        })
        .unwrap()
        .max_rel_err
}

/// One transformer block over embedded random sequences.
pub fn block_error(seed: u64) -> f64 {
    let config = tiny_config();
    let schema = tiny_schema();
    let params = f64_params(ModelKind::Bst, &config, &schema, seed);
    let examples = random_examples(3, seed, &schema, config.sequence_length);
    let batch = Batch::new(&examples).unwrap();
    GradCheck { seed, step: MODEL_STEP, ..GradCheck::default() }
        .run(&params, |tape: &mut Tape<'_, f64>, p: &ModelParams<f64>| {
            let vars = bind(tape, p, &schema)?;
            let e = bst::model::embed_sequence(tape, &vars, &batch, &config)?;
            let block = BlockVars::resolve(&vars, 0)?;
            let mut rng = StepRng::new(0, 0);
            let f = bst::model::transformer_block(tape, e, &batch.mask, &block, &config, Mode::Eval, &mut rng)?;
            let f = tape.mask_rows(f, &batch.mask)?;
            weighted_sum(tape, f, seed)
        })
        .unwrap()
        .max_rel_err
}
