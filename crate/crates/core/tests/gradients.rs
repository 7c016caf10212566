mod common;

use hgseg::gradcheck::{grad_check, grad_check_against, GradCheckConfig};
use hgseg::graph::{CwnDirection, GraphConfig, RelationGrouping};
use hgseg::model::loss_and_grad;

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let gc = GradCheckConfig::default();
    for seed in 0..20 {
        let (m, inst) = common::random_model_and_instance(seed, 8, GraphConfig::default());
        let r = grad_check(&m.config, &m.params, &inst, &gc).unwrap();
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {:#?}", r.tensors);
    }
}

#[test]
fn split_relations_and_both_directions() {
    let graph = GraphConfig {
        grouping: RelationGrouping::Split,
        cwn_direction: CwnDirection::Both,
        ..GraphConfig::default()
    };
    for seed in 100..105 {
        let (m, inst) = common::random_model_and_instance(seed, 8, graph);
        let r = grad_check(&m.config, &m.params, &inst, &GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {}", r.max_rel_error);
    }
}

#[test]
fn corrupted_weight_gradient_is_detected() {
    let (m, inst) = common::random_model_and_instance(3, 8, GraphConfig::default());
    let (_, mut g) = loss_and_grad(&m.config, &m.params, &inst).unwrap();
    g.layers[0].relations[2].weight.mapv_inplace(|v| v * 1.1 + 0.01);
    let r = grad_check_against(&m.config, &m.params, &inst, &g, &GradCheckConfig::default()).unwrap();
    assert!(r.max_rel_error > 1e-2);
}

#[test]
fn zero_parameters_are_finite() {
    let (m, inst) = common::random_model_and_instance(5, 8, GraphConfig::default());
    let zero = m.params.zeros_like();
    let r = grad_check(&m.config, &zero, &inst, &GradCheckConfig::default()).unwrap();
    assert!(r.max_rel_error.is_finite());
}
