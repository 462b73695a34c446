mod support;

use std::collections::BTreeMap;

use mtbrn_core::data::{EntityId, Instance, ItemId, RelationId};
use mtbrn_core::eval::{auc, path_validity_analysis};
use mtbrn_core::gradcheck::{micro_problem, MicroProblem};
use mtbrn_core::model::{Example, ModelParams, ModelVariant, PathEncoder};
use mtbrn_core::pathfinder::{Path, PathSet, PathToken, SourceGraph};
use mtbrn_core::synth::{generate_world, mean_probability_by, SyntheticWorldConfig};
use mtbrn_core::tensor::{Tape, Tensor, Var};
use mtbrn_core::train::{train, AdagradState, TrainConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use support::rng;

const CASES: u32 = 128;
const TOL: f64 = 1e-12;

fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.5..1.5)).collect()).unwrap()
}

fn examples(p: &MicroProblem) -> Vec<Example<'_>> {
    p.instances.iter().zip(&p.paths).map(|(instance, paths)| Example { instance, paths }).collect()
}

fn predictions(params: &ModelParams, instances: &[Instance], paths: &[PathSet], v: ModelVariant) -> Vec<u64> {
    let ex: Vec<Example<'_>> = instances.iter().zip(paths).map(|(instance, paths)| Example { instance, paths }).collect();
    params.predict_batch(&ex, v).unwrap().into_iter().map(f64::to_bits).collect()
}

/// A random but valid path over the micro vocabulary ending at `target`.
fn random_path(r: &mut ChaCha8Rng, source: SourceGraph, target: ItemId) -> Path {
    let hops = r.random_range(1..=3);
    let mut tokens = vec![PathToken::Item(ItemId(r.random_range(0..6)))];
    for h in 0..hops {
        match source {
            SourceGraph::Cf => {
                tokens.push(PathToken::Score(r.random_range(0.05..1.0)));
                tokens.push(PathToken::Item(if h + 1 == hops { target } else { ItemId(r.random_range(0..6)) }));
            }
            SourceGraph::Kg => {
                tokens.push(PathToken::Relation(RelationId(r.random_range(0..2))));
                tokens.push(if h + 1 == hops { PathToken::Item(target) } else { PathToken::Entity(EntityId(r.random_range(0..4))) });
            }
        }
    }
    Path { tokens, source, hops }
}

fn copy_forward_to_backward(params: &mut ModelParams, prefix: &str) {
    let names: Vec<String> = params
        .store
        .iter()
        .map(|(_, p)| p.name.clone())
        .filter(|n| n.starts_with(&format!("{prefix}.forward.")))
        .collect();
    assert!(!names.is_empty());
    for name in names {
        let src = params.store.find(&name).unwrap();
        let dst = params.store.find(&name.replacen(".forward.", ".backward.", 1)).unwrap();
        let value = params.store.get(src).value.clone();
        params.store.get_mut(dst).value = value;
    }
}

fn distinct_scores(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut grid: Vec<u32> = (0..(4 * n as u32)).collect();
    grid.shuffle(r);
    grid[..n].iter().map(|&g| f64::from(g) / 7.0).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    // ---------------------------------------------------------- model

    #[test]
    fn attention_weights_are_distributions(seed in any::<u64>()) {
        let p = micro_problem(seed);
        let mut r = rng(seed);
        let n_seg = r.random_range(1..=4);
        let n = r.random_range(1..=9);
        let segs: Vec<usize> = (0..n).map(|_| r.random_range(0..n_seg)).collect();
        let mut tape = Tape::without_grad();
        let h = tape.constant(random_matrix(&mut r, n, p.params.config.path_dim())).unwrap();
        let xv = tape.constant(random_matrix(&mut r, n_seg, p.params.config.item_dim())).unwrap();
        let (pooled, weights) = p.params.activate_paths(&mut tape, Some(h), &segs, xv, p.params.attn_cf).unwrap();
        let w = tape.value(weights.unwrap()).data().to_vec();
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        let mut sums = vec![0.0; n_seg];
        for (&s, &x) in segs.iter().zip(&w) {
            sums[s] += x;
        }
        let pooled = tape.value(pooled).clone();
        for (s, &sum) in sums.iter().enumerate() {
            if segs.contains(&s) {
                prop_assert!((sum - 1.0).abs() <= TOL);
            } else {
                prop_assert!(pooled.row(s).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn pooling_ignores_path_order(seed in any::<u64>()) {
        let p = micro_problem(seed);
        let mut r = rng(seed);
        let n_seg = r.random_range(1..=3);
        let n = r.random_range(1..=8);
        let segs: Vec<usize> = (0..n).map(|_| r.random_range(0..n_seg)).collect();
        let h = random_matrix(&mut r, n, p.params.config.path_dim());
        let xv = random_matrix(&mut r, n_seg, p.params.config.item_dim());
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let pool = |rows: &[usize]| {
            let mut tape = Tape::without_grad();
            let hv = tape.constant(h.clone()).unwrap();
            let hv = tape.gather_rows(hv, rows.to_vec()).unwrap();
            let xv = tape.constant(xv.clone()).unwrap();
            let s: Vec<usize> = rows.iter().map(|&k| segs[k]).collect();
            let (pooled, _) = p.params.activate_paths(&mut tape, Some(hv), &s, xv, p.params.attn_kg).unwrap();
            tape.value(pooled).data().to_vec()
        };
        let identity: Vec<usize> = (0..n).collect();
        for (a, b) in pool(&identity).iter().zip(pool(&perm)) {
            prop_assert!((a - b).abs() <= TOL);
        }
    }

    #[test]
    fn fusion_rows_are_pairwise_products(seed in any::<u64>(), k in 1usize..7) {
        let p = micro_problem(seed);
        let mut r = rng(seed);
        let h = random_matrix(&mut r, k, p.params.config.path_dim());
        let mut tape = Tape::without_grad();
        let hv = tape.constant(h.clone()).unwrap();
        let fused = p.params.fuse_paths(&mut tape, hv).unwrap();
        if k < 2 {
            prop_assert!(fused.is_none_or(|f| tape.value(f).shape()[0] == 0));
            return Ok(());
        }
        let f = tape.value(fused.unwrap()).clone();
        prop_assert_eq!(f.shape()[0], k * (k - 1) / 2);
        let mut row = 0;
        for i in 0..k {
            for j in i + 1..k {
                for (c, &v) in f.row(row).iter().enumerate() {
                    prop_assert_eq!(v.to_bits(), (h.get(i, c) * h.get(j, c)).to_bits());
                    prop_assert_eq!(v.to_bits(), (h.get(j, c) * h.get(i, c)).to_bits());
                }
                row += 1;
            }
        }
    }

    #[test]
    fn reversed_sequence_swaps_halves(seed in any::<u64>(), len in 1usize..6) {
        let mut p = micro_problem(seed);
        copy_forward_to_backward(&mut p.params, "encoder_kg");
        let mut r = rng(seed);
        let d = p.params.config.embedding_dim;
        let steps: Vec<Tensor> = (0..len).map(|_| random_matrix(&mut r, 2, d)).collect();
        let encode = |order: Vec<&Tensor>| {
            let mut tape = Tape::without_grad();
            let vars: Vec<Var> = order.into_iter().map(|t| tape.constant(t.clone()).unwrap()).collect();
            let h = p.params.encode_path(&mut tape, PathEncoder::Kg, &vars).unwrap();
            tape.value(h).clone()
        };
        let a = encode(steps.iter().collect());
        let b = encode(steps.iter().rev().collect());
        let hdim = p.params.config.hidden;
        for row in 0..2 {
            prop_assert_eq!(&a.row(row)[..hdim], &b.row(row)[hdim..]);
            prop_assert_eq!(&a.row(row)[hdim..], &b.row(row)[..hdim]);
        }
    }

    #[test]
    fn single_graph_variants_ignore_the_other_graph(seed in any::<u64>()) {
        let p = micro_problem(seed);
        let mut r = rng(seed ^ 1);
        let mut changed = p.paths.clone();
        for (set, inst) in changed.iter_mut().zip(&p.instances) {
            let n = r.random_range(0..=3);
            set.kg = (0..n).map(|_| random_path(&mut r, SourceGraph::Kg, inst.target)).collect();
        }
        prop_assert_eq!(
            predictions(&p.params, &p.instances, &p.paths, ModelVariant::CfOnly),
            predictions(&p.params, &p.instances, &changed, ModelVariant::CfOnly)
        );
        let mut changed = p.paths.clone();
        for (set, inst) in changed.iter_mut().zip(&p.instances) {
            let n = r.random_range(0..=3);
            set.cf = (0..n).map(|_| random_path(&mut r, SourceGraph::Cf, inst.target)).collect();
        }
        prop_assert_eq!(
            predictions(&p.params, &p.instances, &p.paths, ModelVariant::KgOnly),
            predictions(&p.params, &p.instances, &changed, ModelVariant::KgOnly)
        );
    }

    #[test]
    fn predictions_are_probabilities(seed in any::<u64>()) {
        let p = micro_problem(seed);
        for v in ModelVariant::ALL {
            for x in p.params.predict_batch(&examples(&p), v).unwrap() {
                prop_assert!(x > 0.0 && x < 1.0);
            }
        }
    }

    // ---------------------------------------------------------- train

    #[test]
    fn training_is_reproducible_and_finite(seed in any::<u64>(), variant in 0usize..6) {
        let config = TrainConfig {
            batch_size: 1,
            epochs: 3,
            seed,
            variant: ModelVariant::ALL[variant],
            ..TrainConfig::default()
        };
        let run = || {
            let mut p = micro_problem(seed);
            let (instances, paths) = (p.instances.clone(), p.paths.clone());
            let ex: Vec<Example<'_>> = instances.iter().zip(&paths).map(|(instance, paths)| Example { instance, paths }).collect();
            let log = train(&mut p.params, &ex, &config).unwrap();
            let values: Vec<u64> = p.params.store.iter().flat_map(|(_, x)| x.value.data().to_vec()).map(f64::to_bits).collect();
            let losses: Vec<u64> = log.iter().map(|l| l.mean_loss.to_bits()).collect();
            (values, losses)
        };
        let (a, la) = run();
        let (b, lb) = run();
        prop_assert_eq!(&la, &lb);
        prop_assert_eq!(la.len(), 4);
        prop_assert_eq!(&a, &b);
        prop_assert!(a.iter().all(|&bits| f64::from_bits(bits).is_finite()));
    }

    #[test]
    fn adagrad_accumulators_never_decrease(seed in any::<u64>(), steps in 1usize..6) {
        let mut p = micro_problem(seed);
        let mut state = AdagradState::new(&p.params.store, 0.05, 1e-8);
        let ex_instances = p.instances.clone();
        let ex_paths = p.paths.clone();
        let ex: Vec<Example<'_>> = ex_instances.iter().zip(&ex_paths).map(|(instance, paths)| Example { instance, paths }).collect();
        for _ in 0..steps {
            let before = state.accumulators.clone();
            let mut tape = Tape::new();
            let loss = p.params.loss(&mut tape, &ex, ModelVariant::Full).unwrap();
            tape.backward(loss, &mut p.params.store).unwrap();
            drop(tape);
            state.step(&mut p.params.store).unwrap();
            for (old, new) in before.iter().zip(&state.accumulators) {
                for (o, n) in old.iter().zip(new) {
                    prop_assert!(n >= o);
                }
            }
            prop_assert!(p.params.store.iter().all(|(_, x)| x.value.is_finite() && x.grad.data().iter().all(|&g| g == 0.0)));
        }
    }

    // ----------------------------------------------------------- eval

    #[test]
    fn auc_ignores_strictly_monotone_transforms(seed in any::<u64>(), n in 2usize..60) {
        let mut r = rng(seed);
        let mut scores: Vec<(f64, bool)> = (0..n).map(|_| (f64::from(r.random_range(0..10u32)), r.random_bool(0.5))).collect();
        scores[0].1 = true;
        scores[1].1 = false;
        let base = auc(&scores).unwrap();
        let transforms: [fn(f64) -> f64; 3] = [|x| x * x * x + 2.0 * x - 5.0, |x| (x / 3.0).exp(), |x| -1.0 / (x + 1.0)];
        for f in transforms {
            let moved: Vec<(f64, bool)> = scores.iter().map(|&(s, l)| (f(s), l)).collect();
            prop_assert_eq!(auc(&moved).unwrap(), base);
        }
    }

    #[test]
    fn flipping_labels_complements_auc(seed in any::<u64>(), n in 2usize..60) {
        let mut r = rng(seed);
        let xs = distinct_scores(&mut r, n);
        let mut scores: Vec<(f64, bool)> = xs.into_iter().map(|s| (s, r.random_bool(0.5))).collect();
        scores[0].1 = true;
        scores[1].1 = false;
        let flipped: Vec<(f64, bool)> = scores.iter().map(|&(s, l)| (s, !l)).collect();
        prop_assert!((auc(&scores).unwrap() + auc(&flipped).unwrap() - 1.0).abs() <= TOL);
    }

    #[test]
    fn buckets_partition_the_dataset(seed in any::<u64>(), n in 1usize..40) {
        let mut r = rng(seed);
        let p = micro_problem(seed);
        let template = &p.instances[0];
        let instances: Vec<Instance> = (0..n).map(|_| Instance { label: r.random_bool(0.4), ..template.clone() }).collect();
        let sets: Vec<PathSet> = (0..n)
            .map(|_| PathSet {
                cf: (0..r.random_range(0..4)).map(|_| random_path(&mut r, SourceGraph::Cf, template.target)).collect(),
                kg: (0..r.random_range(0..4)).map(|_| random_path(&mut r, SourceGraph::Kg, template.target)).collect(),
            })
            .collect();
        let report = path_validity_analysis(&instances, &sets).unwrap();
        let clicks = instances.iter().filter(|i| i.label).count();
        for g in [&report.cf, &report.kg] {
            for buckets in [&g.by_count, &g.by_length] {
                prop_assert_eq!(buckets.iter().map(|b| b.instances).sum::<usize>(), n);
                prop_assert_eq!(buckets.iter().map(|b| b.clicks).sum::<usize>(), clicks);
                prop_assert!(buckets.windows(2).all(|w| w[0].key < w[1].key));
                prop_assert!(buckets.iter().all(|b| b.instances > 0 && b.click_rate == b.clicks as f64 / b.instances as f64));
            }
        }
    }
}

// ------------------------------------------------------------------ synth

fn small_world(seed: u64) -> SyntheticWorldConfig {
    SyntheticWorldConfig { n_users: 12, n_items: 40, impressions_per_user: 10, seed, ..SyntheticWorldConfig::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn same_seed_same_world(seed in any::<u64>()) {
        prop_assert_eq!(generate_world(&small_world(seed)).unwrap(), generate_world(&small_world(seed)).unwrap());
    }

    #[test]
    fn click_probabilities_are_open_unit(seed in any::<u64>()) {
        let w = generate_world(&small_world(seed)).unwrap();
        prop_assert_eq!(w.ground_truth.impressions.len(), w.interactions.len());
        for t in &w.ground_truth.impressions {
            prop_assert!(t.probability > 0.0 && t.probability < 1.0);
        }
    }
}

#[test]
fn default_world_rewards_more_paths() {
    let w = generate_world(&SyntheticWorldConfig::default()).unwrap();
    let instances = mtbrn_core::data::build_instances(&w.interactions, w.config.max_behaviors);
    let truth = &w.ground_truth;
    let lookup: BTreeMap<(u32, u64), (usize, usize)> =
        truth.impressions.iter().map(|t| ((t.user.0, t.timestamp), (t.kg_count, t.cf_count))).collect();
    let counts: Vec<(usize, usize)> = instances.iter().map(|i| lookup[&(i.user.0, i.timestamp)]).collect();
    for (name, pick) in [("kg", 0usize), ("cf", 1)] {
        let by = mean_probability_by(truth, &instances, |k| {
            let c = if pick == 0 { counts[k].0 } else { counts[k].1 };
            c.min(3)
        })
        .unwrap();
        let means: Vec<f64> = by.values().copied().collect();
        assert!(means.len() >= 2, "{name}: {by:?}");
        assert!(means.windows(2).all(|w| w[0] < w[1]), "{name} means not increasing: {by:?}");
    }
}
