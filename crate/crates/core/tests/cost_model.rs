mod common;

use common::{build, random_graph, random_removals, removal_refs, totals_ref, L};
use coprune::cost_model::{
    regularized_importance, regularizer_values, total_flops, total_params, CostError, RegularizerTable,
};
use coprune::planner::apply_plan;
use coprune::{
    fixtures, layer_costs, predict_reduction, regularizer, score_graph, synth, ImportanceConfig, PlanConfig,
    PruningPlan, SpatialConvention,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn plan(graph: &coprune::ModelGraph, removals: &[(&str, &[usize])]) -> PruningPlan {
    PruningPlan::from_removals(graph, PlanConfig::default(), removals).unwrap()
}

#[test]
fn vgg16_conv4_2_unit_deltas() {
    let g = fixtures::load("vgg16_imagenet").unwrap();
    let costs = layer_costs(&g, SpatialConvention::Output);
    let u = costs.unit("conv4_2").unwrap();
    assert_eq!(u.delta_s, 3 * 3 * 512 + 3 * 3 * 512);
    assert_eq!(u.delta_s, 9216);
    assert_eq!(u.delta_c, 2 * 28 * 28 * 9 * 512 * 2);
    assert_eq!(u.delta_c, 14_450_688);
    assert_eq!(u.s, 2 * 3 * 3 * 512 * 512);
}

#[test]
fn vgg16_single_filter_versus_filter_pair() {
    let g = fixtures::load("vgg16_imagenet").unwrap();
    for convention in [SpatialConvention::Output, SpatialConvention::Input] {
        let a = predict_reduction(&g, &plan(&g, &[("conv4_2", &[0])]), convention).unwrap();
        let b = predict_reduction(&g, &plan(&g, &[("conv3_2", &[5, 9])]), convention).unwrap();
        assert_eq!((a.params, a.flops), (9216, 14_450_688));
        assert_eq!((b.params, b.flops), (9216, 57_802_752));
        assert_eq!(a.params, b.params);
        assert_eq!(b.flops, 4 * a.flops);
    }
}

#[test]
fn fc_chain_touched_weights() {
    let g = build(1, 2, &[L::new("a", "fc", 1, 2, 3).to(&["b"]), L::new("b", "fc", 1, 3, 4)]);
    let costs = layer_costs(&g, SpatialConvention::Output);
    assert_eq!(costs.unit("a").unwrap().s, 18);
    // Last layer: no successor term.
    assert_eq!(costs.unit("b").unwrap().s, 12);
}

#[test]
fn totals_count_each_layer_once() {
    for name in fixtures::NAMES {
        let g = fixtures::load(name).unwrap();
        let costs = layer_costs(&g, SpatialConvention::Output);
        assert_eq!((costs.total_params, costs.total_flops), totals_ref(&g), "{name}");
        assert_eq!(costs.layers.iter().map(|l| l.params).sum::<u64>(), costs.total_params);
        assert!(costs.units.iter().all(|u| u.s > 0 && u.c > 0 && u.delta_s > 0));
    }
}

#[test]
fn empty_plan_reduces_nothing() {
    let g = fixtures::load("resnet32_cifar").unwrap();
    let r = predict_reduction(&g, &plan(&g, &[]), SpatialConvention::Output).unwrap();
    assert_eq!((r.params, r.flops, r.prr, r.frr), (0, 0, 0.0, 0.0));
}

#[test]
fn regularizer_examples() {
    let e = std::f64::consts::E;
    let r = regularizer_values(&[e * e, e], &[10.0, 10.0], 1.0, 0.0).unwrap();
    assert!(r[0].abs() < 1e-12 && (r[1] - 0.5).abs() < 1e-12, "{r:?}");

    let g = fixtures::load("vgg16_cifar").unwrap();
    let costs = layer_costs(&g, SpatialConvention::Output);
    let zero = regularizer(&costs, 0.0, 0.0).unwrap();
    assert!(zero.values.iter().all(|(_, v)| *v == 0.0));

    let reg = regularizer(&costs, 2.0, 3.0).unwrap();
    let argmax_c = costs.units.iter().max_by_key(|u| u.c).unwrap();
    let argmax_s = costs.units.iter().max_by_key(|u| u.s).unwrap();
    let only_beta = regularizer(&costs, 1.0, 0.0).unwrap();
    let only_gamma = regularizer(&costs, 0.0, 1.0).unwrap();
    assert_eq!(only_beta.get(&argmax_c.unit), Some(0.0));
    assert_eq!(only_gamma.get(&argmax_s.unit), Some(0.0));
    for (_, v) in &reg.values {
        assert!((0.0..=5.0).contains(v));
    }
}

#[test]
fn regularizer_rejects_tiny_costs() {
    // The error names the first unit whose C or S is below 2.
    let err = regularizer_values(&[4.0, 1.0], &[4.0, 4.0], 1.0, 1.0).unwrap_err();
    assert_eq!(err, (1, 1.0));
    let err = regularizer_values(&[4.0, 4.0], &[4.0, 0.5], 1.0, 1.0).unwrap_err();
    assert_eq!(err, (1, 0.5));
    let g = fixtures::load("vgg16_cifar").unwrap();
    let costs = layer_costs(&g, SpatialConvention::Output);
    assert!(matches!(regularizer(&costs, -1.0, 0.0), Err(CostError::Weights { .. })));
}

#[test]
fn regularized_importance_shifts_by_unit_reg() {
    let g = fixtures::load("resnet32_cifar").unwrap();
    let w = synth::random_weights(&g, 3);
    let imp = score_graph(&g, &w, &ImportanceConfig::default()).unwrap();
    let costs = layer_costs(&g, SpatialConvention::Output);

    let zero = regularized_importance(&imp, &regularizer(&costs, 0.0, 0.0).unwrap()).unwrap();
    for u in &zero.units {
        assert_eq!(u.reimp, u.imp);
    }
    let reg = regularizer(&costs, 1.0, 2.0).unwrap();
    let shifted = regularized_importance(&imp, &reg).unwrap();
    for u in &shifted.units {
        let r = reg.get(&u.unit).unwrap();
        for (a, b) in u.imp.iter().zip(&u.reimp) {
            assert_eq!(*b, a + r);
        }
        for i in 0..u.width() {
            for j in 0..u.width() {
                if u.imp[i] < u.imp[j] {
                    assert!(u.reimp[i] <= u.reimp[j]);
                }
            }
        }
    }
    let missing = RegularizerTable {
        beta: 0.0,
        gamma: 0.0,
        values: Vec::new(),
    };
    assert!(matches!(regularized_importance(&imp, &missing), Err(CostError::LayerMismatch(_))));
}

fn costs() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((2.0f64..1e9, 2.0f64..1e9), 1..12)
}

proptest! {
    #[test]
    fn regularizer_in_range_and_zero_at_max(cs in costs(), beta in 0.0f64..5.0, gamma in 0.0f64..5.0) {
        let (c, s): (Vec<f64>, Vec<f64>) = cs.into_iter().unzip();
        let r = regularizer_values(&c, &s, beta, gamma).unwrap();
        for v in &r {
            prop_assert!(*v >= -1e-12 && *v <= beta + gamma + 1e-12);
        }
        let imax = (0..c.len()).max_by(|&a, &b| c[a].total_cmp(&c[b])).unwrap();
        let beta_only = regularizer_values(&c, &s, beta, 0.0).unwrap();
        prop_assert!(beta_only[imax].abs() < 1e-12);
    }

    #[test]
    fn regularizer_monotone_in_beta(cs in costs(), beta in 0.0f64..5.0, extra in 0.0f64..5.0, gamma in 0.0f64..5.0) {
        let (c, s): (Vec<f64>, Vec<f64>) = cs.into_iter().unzip();
        let lo = regularizer_values(&c, &s, beta, gamma).unwrap();
        let hi = regularizer_values(&c, &s, beta + extra, gamma).unwrap();
        for (a, b) in lo.iter().zip(&hi) {
            prop_assert!(b >= a);
        }
    }

    #[test]
    fn regularizer_is_log_base_invariant(cs in costs(), beta in 0.0f64..5.0, gamma in 0.0f64..5.0) {
        let (c, s): (Vec<f64>, Vec<f64>) = cs.into_iter().unzip();
        let r = regularizer_values(&c, &s, beta, gamma).unwrap();
        let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
        for log in [f64::log2, f64::log10] {
            let (mc, ms) = (log(max(&c)), log(max(&s)));
            for i in 0..c.len() {
                let v = beta * (1.0 - log(c[i]) / mc) + gamma * (1.0 - log(s[i]) / ms);
                prop_assert!((v - r[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn predicted_reduction_matches_recount(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng);
        let removals = random_removals(&g, &mut rng);
        let p = PruningPlan::from_removals(&g, PlanConfig::default(), &removal_refs(&removals)).unwrap();
        let w = synth::random_weights(&g, seed);
        let (pruned, pw) = apply_plan(&g, &w, &p).unwrap();
        let (p0, f0) = totals_ref(&g);
        let (p1, f1) = totals_ref(&pruned);
        prop_assert_eq!(p.predicted.params, p0 - p1);
        prop_assert_eq!(p.predicted.flops, f0 - f1);
        prop_assert_eq!(pw.param_count(), p1);
        prop_assert_eq!(total_params(&pruned), p1);
        prop_assert_eq!(total_flops(&pruned, SpatialConvention::Output), f1);
    }
}
