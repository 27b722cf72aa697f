//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data::TrainingInstance;
use crate::error::{Error, Result};
use crate::logic::Polarity::{Neg, Pos};
use crate::model::Model;
use crate::params::ParamId;
use crate::params::ParamStore;
use crate::rng::{self, Purpose};
use crate::tape::{Primitive, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst element.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

/// Denominator floor for [`relative_error`], per unit of loss magnitude. A
/// central difference on a loss `L` carries rounding noise of a few
/// `ulp(L) / epsilon`, about `1e-11 * |L|` at `epsilon = 1e-5`, so a relative
/// error of 1e-4 can only be resolved for derivatives well above
/// `1e-7 * |L|`; below the floor the comparison is effectively absolute.
pub const DERIVATIVE_FLOOR: f64 = 1e-6;

/// Relative error used throughout:
/// `|a - c| / max(|a|, |c|, DERIVATIVE_FLOOR * max(|loss|, 1))`.
pub fn relative_error(analytic: f64, numeric: f64, loss: f64) -> f64 {
    let floor = DERIVATIVE_FLOOR * loss.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the backward gradient of `build`'s scalar output against central
/// differences for every trainable parameter element in `store`.
pub fn finite_difference_check<F>(store: &ParamStore<f64>, build: F, epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::contract(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, s)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    let base = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let again = eval(store)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::contract(format!(
            "graph builder is not deterministic: {base} then {again}"
        )));
    }

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        checked: 0,
    };
    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        let len = store.value(id).len();
        for i in 0..len {
            let analytic = grads.param(id).map_or(0.0, |g| g.data()[i]);
            let original = store.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = original + epsilon;
            let plus = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = original - epsilon;
            let minus = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = relative_error(analytic, numeric, base);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), i));
                report.worst_values = (analytic, numeric);
            }
        }
    }
    Ok(report)
}

/// Users and items in [`probe_batch`].
pub const PROBE_USERS: usize = 3;
pub const PROBE_ITEMS: usize = 7;

/// Two instances with histories of length 3 and 2.
pub fn probe_batch() -> Vec<TrainingInstance> {
    vec![
        TrainingInstance {
            user: 0,
            history: vec![(1, Pos), (2, Neg), (3, Pos)],
            positive_target: 4,
            negative_sample: 5,
        },
        TrainingInstance {
            user: 2,
            history: vec![(6, Neg), (1, Pos)],
            positive_target: 0,
            negative_sample: 3,
        },
    ]
}

/// A freshly initialised model moved to a point where finite differences are
/// informative. At the stock 0.01 embedding scale with zero biases, most
/// pre-activations sit within one step of a ReLU kink and many derivatives
/// are below the difference quotient's rounding noise; embeddings are scaled
/// up 50x and biases drawn from U(-0.5, 0.5).
pub fn probe_model(config: ModelConfig, seed: u64) -> Result<Model<f64>> {
    let mut model = Model::new(config, PROBE_USERS, PROBE_ITEMS)?;
    let mut rng = rng::stream(seed, Purpose::Init, 1, 0);
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let name = model.params().get(id).name.clone();
        let data = model.params_mut().value_mut(id).data_mut();
        if name.ends_with("_emb") {
            data.iter_mut().for_each(|x| *x *= 50.0);
        } else if name.ends_with(".b") {
            data.iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
        }
    }
    Ok(model)
}

/// Checks the gradient of the total training loss over `batch`.
pub fn check_loss(model: &Model<f64>, batch: &[TrainingInstance], epsilon: f64) -> Result<GradCheckReport> {
    let refs: Vec<&TrainingInstance> = batch.iter().collect();
    finite_difference_check(
        model.params(),
        |tape, store| {
            let probe = Model::from_params(
                model.config().clone(),
                model.num_users(),
                model.num_items(),
                store.clone(),
            )?;
            Ok(probe.loss(tape, &refs)?.total)
        },
        epsilon,
    )
}

/// Which primitive a property case exercises; extra structural primitives
/// used by the model are included alongside the named set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GradCase {
    Named(Primitive),
    Sub,
    AddBias,
    BatchedMatMul(bool),
    GatherRows,
    StackRows,
    Heads,
    ScalarAdd,
    /// Cosine with norm clamping, away from the clamp.
    CosineClamped,
}

impl GradCase {
    pub fn all() -> Vec<GradCase> {
        let mut v: Vec<GradCase> = [
            Primitive::MatMul,
            Primitive::Add,
            Primitive::ElementwiseMul,
            Primitive::Concat,
            Primitive::Relu,
            Primitive::Tanh,
            Primitive::Sigmoid,
            Primitive::SoftmaxRows,
            Primitive::Mean,
            Primitive::Sum,
            Primitive::L2Norm,
            Primitive::CosineSimilarity,
            Primitive::ScalarMul(-1.7),
            Primitive::Log,
        ]
        .into_iter()
        .map(GradCase::Named)
        .collect();
        v.extend([
            GradCase::Sub,
            GradCase::AddBias,
            GradCase::BatchedMatMul(false),
            GradCase::BatchedMatMul(true),
            GradCase::GatherRows,
            GradCase::StackRows,
            GradCase::Heads,
            GradCase::ScalarAdd,
            GradCase::CosineClamped,
        ]);
        v
    }

    /// Adjusts requested `[a, b, c]` dimensions to ones the case handles well.
    pub fn dims(self, [a, b, c]: [usize; 3]) -> [usize; 3] {
        match self {
            // keep the heads and batched cases small
            GradCase::Heads | GradCase::BatchedMatMul(_) => [a.min(6), b.min(8), c.min(6)],
            // cosine of 1-element rows is piecewise constant
            GradCase::Named(Primitive::CosineSimilarity) | GradCase::CosineClamped => [a, b.max(2), c],
            _ => [a, b, c],
        }
    }
}

fn kink_safe(rng: &mut ChaCha8Rng, n: usize, positive: bool) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-2.0..2.0);
            if v.abs() >= 1e-3 {
                break if positive { v.abs() + 0.1 } else { v };
            }
        })
        .collect()
}

/// Draws inputs for `case` away from ReLU kinks, registers them as parameters
/// and checks the scalar `sum(weights * op(inputs))`, which gives every output
/// element its own weight.
pub fn check_primitive(case: GradCase, dims: [usize; 3], seed: u64, epsilon: f64) -> Result<GradCheckReport> {
    let [a, b, c] = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positive = matches!(case, GradCase::Named(Primitive::Log));
    let mut store = ParamStore::new();
    let mut add = |store: &mut ParamStore<f64>, name: &str, shape: Vec<usize>| -> ParamId {
        let n = shape.iter().product();
        let data = kink_safe(&mut rng, n, positive);
        store
            .add(name, Tensor::new(shape, data).expect("shape matches data"), true)
            .expect("fresh name")
    };
    let heads = 2;
    let inputs: Vec<ParamId> = match case {
        GradCase::Named(Primitive::MatMul) => vec![add(&mut store, "x", vec![a, b]), add(&mut store, "y", vec![b, c])],
        GradCase::Named(Primitive::Concat) => vec![add(&mut store, "x", vec![a, b]), add(&mut store, "y", vec![a, c])],
        GradCase::Named(k) if k.arity() == 2 => {
            vec![add(&mut store, "x", vec![a, b]), add(&mut store, "y", vec![a, b])]
        }
        GradCase::Named(_) | GradCase::ScalarAdd => vec![add(&mut store, "x", vec![a, b])],
        GradCase::Sub | GradCase::CosineClamped => {
            vec![add(&mut store, "x", vec![a, b]), add(&mut store, "y", vec![a, b])]
        }
        GradCase::AddBias => vec![add(&mut store, "x", vec![a, b]), add(&mut store, "bias", vec![b])],
        GradCase::BatchedMatMul(false) => {
            vec![add(&mut store, "x", vec![a, b, c]), add(&mut store, "y", vec![a, c, b])]
        }
        GradCase::BatchedMatMul(true) => vec![add(&mut store, "x", vec![a, b, c]), add(&mut store, "y", vec![a, b, c])],
        GradCase::GatherRows => vec![add(&mut store, "x", vec![a, b])],
        GradCase::StackRows => vec![add(&mut store, "x", vec![a, b]), add(&mut store, "y", vec![c, b])],
        GradCase::Heads => vec![add(&mut store, "x", vec![a * c, heads * b])],
    };
    let gather: Vec<usize> = (0..a + 2).map(|i| (i * 7 + 1) % a).collect();
    let build = |tape: &mut Tape<f64>, s: &ParamStore<f64>| -> Result<Var> {
        let vars: Vec<Var> = inputs.iter().map(|&id| tape.param(s, id)).collect::<Result<_>>()?;
        let out = match case {
            GradCase::Named(k) => tape.apply(k, &vars)?,
            GradCase::Sub => tape.sub(vars[0], vars[1])?,
            GradCase::AddBias => tape.add_bias(vars[0], vars[1])?,
            GradCase::BatchedMatMul(tb) => tape.batched_matmul(vars[0], vars[1], tb)?,
            GradCase::GatherRows => tape.gather_rows(vars[0], &gather)?,
            GradCase::StackRows => tape.stack_rows(&vars)?,
            GradCase::Heads => {
                let split = tape.split_heads(vars[0], heads, c)?;
                let sq = tape.mul(split, split)?;
                tape.merge_heads(sq, heads, c)?
            }
            GradCase::ScalarAdd => tape.scalar_add(vars[0], 0.25)?,
            GradCase::CosineClamped => tape.cosine_rows_clamped(vars[0], vars[1], 1e-8)?,
        };
        let shape = tape.value(out).shape().to_vec();
        let n: usize = shape.iter().product();
        let weights: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.61).sin() + 1.3).collect();
        let w = tape.constant(Tensor::new(shape, weights)?)?;
        let weighted = tape.mul(out, w)?;
        tape.sum(weighted)
    };
    finite_difference_check(&store, build, epsilon)
}
