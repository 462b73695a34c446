//! Central-difference verification of tape gradients.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{EntityId, FeatureKind, FeatureValue, FieldId, Instance, ItemId, RelationId, UserId};
use crate::model::{Example, FieldSpec, ModelConfig, ModelError, ModelParams, ModelVariant};
use crate::pathfinder::{Path, PathSet, PathToken, SourceGraph};
use crate::tensor::{ParamRole, ParamStore, Tape, TensorError, Var};
use crate::train::init_store;

/// Denominator floor of the relative error. Central differences of an
/// O(1) loss at step 1e-5 carry about 1e-11 of rounding noise, so gradients
/// much below 1e-6 cannot be resolved to a small relative error; they are
/// compared on an absolute scale instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Analytic and numeric gradient at the element with the largest error.
    pub worst: (f64, f64),
    pub checked: usize,
    pub kinks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub kinks: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares analytic gradients of `f` against central differences with the
/// given `step`, element by element over every parameter in `store`.
///
/// `f` builds a fresh tape from the current parameter values and returns it
/// with its scalar loss. An element is treated as sitting on a kink, and
/// excluded, when perturbing it by `±step` changes the sign pattern of any
/// ReLU input on the tape.
pub fn grad_check<F, E>(store: &mut ParamStore, mut f: F, step: f64, tolerance: f64) -> Result<GradCheckReport, E>
where
    F: FnMut(&ParamStore) -> Result<(Tape, Var), E>,
    E: From<TensorError>,
{
    store.zero_grads();
    let (tape, loss) = f(store)?;
    tape.backward(loss, store)?;
    let base_pattern: Vec<i8> = tape.relu_pattern().to_vec();
    drop(tape);
    let analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.grad.data().to_vec()).collect();
    store.zero_grads();

    let mut report = GradCheckReport {
        params: Vec::with_capacity(store.len()),
        max_rel_error: 0.0,
        kinks: 0,
        tolerance,
        passed: true,
    };
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (id, grads) in ids.into_iter().zip(analytic) {
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            max_rel_error: 0.0,
            worst: (0.0, 0.0),
            checked: 0,
            kinks: 0,
        };
        for (k, &g) in grads.iter().enumerate() {
            let original = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = original + step;
            let (plus, plus_kink) = probe(&mut f, store, &base_pattern)?;
            store.get_mut(id).value.data_mut()[k] = original - step;
            let (minus, minus_kink) = probe(&mut f, store, &base_pattern)?;
            store.get_mut(id).value.data_mut()[k] = original;
            if plus_kink || minus_kink {
                check.kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(g, numeric);
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst = (g, numeric);
            }
            check.checked += 1;
        }
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.kinks += check.kinks;
        report.params.push(check);
    }
    report.passed = report.max_rel_error <= tolerance;
    Ok(report)
}

fn probe<F, E>(f: &mut F, store: &ParamStore, base: &[i8]) -> Result<(f64, bool), E>
where
    F: FnMut(&ParamStore) -> Result<(Tape, Var), E>,
{
    let (tape, loss) = f(store)?;
    Ok((tape.value(loss).data()[0], tape.relu_pattern() != base))
}


/// A tiny randomized model and minibatch for checking whole-network gradients:
/// `d = 2`, `H = 2`, MLP 4/3/2, two instances with two paths per graph.
#[derive(Debug, Clone)]
pub struct MicroProblem {
    pub params: ModelParams,
    pub instances: Vec<Instance>,
    pub paths: Vec<PathSet>,
}

pub fn micro_config() -> ModelConfig {
    ModelConfig {
        embedding_dim: 2,
        hidden: 2,
        mlp_hidden: [4, 3, 2],
        user_fields: vec![
            FieldSpec { kind: FeatureKind::Sparse, vocab_size: 3 },
            FieldSpec { kind: FeatureKind::Numerical, vocab_size: 0 },
        ],
        item_fields: vec![
            FieldSpec { kind: FeatureKind::Sparse, vocab_size: 4 },
            FieldSpec { kind: FeatureKind::Numerical, vocab_size: 0 },
        ],
        n_items: 6,
        n_entities: 4,
        n_relations: 2,
    }
}

/// Uniform init range for the micro problem; wide enough that every
/// nonlinearity leaves its linear regime.
pub const MICRO_INIT_RANGE: f64 = 0.8;

pub fn micro_problem(seed: u64) -> MicroProblem {
    let mut params = ModelParams::new(micro_config()).expect("micro config is valid");
    init_store(&mut params.store, seed, MICRO_INIT_RANGE);
    // biases start at zero in training; give them values here so their
    // gradients are exercised away from the origin too
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d_6963_726f);
    for p in params.store.iter_mut() {
        if p.role == ParamRole::Bias {
            for v in p.value.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
    let item = |rng: &mut ChaCha8Rng| ItemId(rng.random_range(0..6));
    let mut instances = Vec::new();
    let mut paths = Vec::new();
    for (u, label) in [(0u32, true), (1u32, false)] {
        let target = item(&mut rng);
        let behaviors: Vec<ItemId> = (0..3).map(|_| item(&mut rng)).collect();
        instances.push(Instance {
            user: UserId(u),
            target,
            timestamp: u64::from(u),
            behaviors,
            label,
            user_profile: vec![
                FeatureValue::sparse(FieldId(0), rng.random_range(0..3)),
                FeatureValue::numerical(FieldId(1), rng.random_range(0.5..1.5)),
            ],
            target_profile: vec![
                FeatureValue::sparse(FieldId(0), rng.random_range(0..4)),
                FeatureValue::numerical(FieldId(1), rng.random_range(0.5..1.5)),
            ],
        });
        let mut set = PathSet::default();
        for hops in [1usize, 2] {
            let mut cf = vec![PathToken::Item(item(&mut rng))];
            let mut kg = vec![PathToken::Item(item(&mut rng))];
            for h in 0..hops {
                cf.push(PathToken::Score(rng.random_range(0.1..1.0)));
                cf.push(PathToken::Item(item(&mut rng)));
                kg.push(PathToken::Relation(RelationId(rng.random_range(0..2))));
                kg.push(if h + 1 == hops {
                    PathToken::Item(target)
                } else {
                    PathToken::Entity(EntityId(rng.random_range(0..4)))
                });
            }
            set.cf.push(Path { tokens: cf, source: SourceGraph::Cf, hops });
            set.kg.push(Path { tokens: kg, source: SourceGraph::Kg, hops });
        }
        paths.push(set);
    }
    MicroProblem { params, instances, paths }
}

/// Checks the minibatch loss gradient of `variant` on `problem`.
pub fn check_model(
    problem: &mut MicroProblem,
    variant: ModelVariant,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, ModelError> {
    let MicroProblem { params, instances, paths } = problem;
    let mut store = core::mem::take(&mut params.store);
    let report = {
        let examples: Vec<Example<'_>> =
            instances.iter().zip(paths.iter()).map(|(instance, paths)| Example { instance, paths }).collect();
        let shell = &*params;
        grad_check(
            &mut store,
            |s: &ParamStore| {
                let mut model = shell.clone();
                model.store = s.clone();
                let mut tape = Tape::new();
                let loss = model.loss(&mut tape, &examples, variant)?;
                Ok((tape, loss))
            },
            step,
            tolerance,
        )
    };
    params.store = store;
    report
}
