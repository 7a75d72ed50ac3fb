mod common;

use chansparse::connectivity::{
    densify, full_mask, full_masks, sparsify_arch, ArchSpec, InputDims, LayerSpec, TransformSpec,
};
use chansparse::convnet::{arch_cost, cost_report, CostKind, Network};
use chansparse::rng;
use common::{enumerate_cost, test_archs};
use proptest::prelude::*;

fn check_against_enumeration(
    arch: &ArchSpec,
    masks: &[chansparse::connectivity::ConnectivityMask],
) {
    let report = arch_cost(arch, masks).unwrap();
    let oracle = enumerate_cost(arch, masks);
    assert_eq!(report.layers.len(), oracle.len());
    for (l, &(p, m)) in report.layers.iter().zip(&oracle) {
        assert_eq!((l.params, l.madds), (p, m), "layer {}", l.layer);
    }
    let classifier = oracle.last().unwrap().0;
    let all_params: u64 = oracle.iter().map(|c| c.0).sum();
    assert_eq!(report.total_params, all_params - classifier);
    assert_eq!(report.classifier_params, classifier);
    assert_eq!(report.total_madds, oracle.iter().map(|c| c.1).sum::<u64>());
    assert_eq!(
        report.total_params,
        report
            .layers
            .iter()
            .filter(|l| l.kind != CostKind::Classifier)
            .map(|l| l.params)
            .sum::<u64>()
    );
}

#[test]
fn every_suite_arch_matches_enumeration() {
    for arch in test_archs() {
        check_against_enumeration(&arch, &full_masks(&arch).unwrap());
        for (k, alpha) in [0.05, 0.3, 0.7].into_iter().enumerate() {
            let (a, masks) = sparsify_arch(&arch, alpha, k as u64).unwrap();
            check_against_enumeration(&a, &masks);
            let t = TransformSpec::depth_multiplier(alpha);
            let (a, masks) = t.realize(&arch).unwrap();
            check_against_enumeration(&a, &masks);
            let (a, masks) = TransformSpec::hybrid(0.5, alpha, 9).realize(&arch).unwrap();
            check_against_enumeration(&a, &masks);
        }
    }
}

#[test]
fn network_report_equals_arch_report() {
    for arch in test_archs() {
        let net = Network::<f32>::from_transform(&arch, &TransformSpec::sparse_random(0.3, 4), 1)
            .unwrap();
        assert_eq!(
            cost_report(&net),
            arch_cost(net.arch(), &net.masks()).unwrap()
        );
    }
}

fn single_layer(c_in: usize, c_out: usize) -> ArchSpec {
    ArchSpec {
        input: InputDims {
            channels: c_in,
            height: 8,
            width: 8,
        },
        classes: 2,
        layers: vec![
            LayerSpec::conv(c_out, 3, false),
            LayerSpec::Flatten,
            LayerSpec::Fc { out: 2 },
            LayerSpec::SoftmaxXent,
        ],
    }
}

#[test]
fn ten_to_twenty_examples() {
    let arch = single_layer(10, 20);
    let dense = arch_cost(&arch, &[full_mask(10, 20).unwrap()]).unwrap();
    assert_eq!(dense.layers[0].weights, 1800);

    let (a, m) = TransformSpec::depth_multiplier(0.5).realize(&arch).unwrap();
    // The image channels are fixed, so emulate an interior layer: 5 -> 10.
    let interior = single_layer(5, 10);
    assert_eq!(a.layers[0], LayerSpec::conv(10, 3, false));
    assert_eq!(arch_cost(&a, &m).unwrap().layers[0].weights, 900);
    let c = arch_cost(&interior, &[full_mask(5, 10).unwrap()]).unwrap();
    assert_eq!(c.layers[0].weights, 450);
    assert_eq!(4 * c.layers[0].weights, dense.layers[0].weights);

    let (a, m) = TransformSpec::sparse_random(0.5, 2).realize(&arch).unwrap();
    let sparse = arch_cost(&a, &m).unwrap();
    assert_eq!(2 * sparse.layers[0].madds, dense.layers[0].madds);
}

/// Sparse madds are the density-weighted dense madds, layer by layer.
#[test]
fn madds_scale_with_density() {
    for arch in test_archs() {
        let dense = arch_cost(&arch, &full_masks(&arch).unwrap()).unwrap();
        let (a, masks) = sparsify_arch(&arch, 0.2, 5).unwrap();
        let sparse = arch_cost(&a, &masks).unwrap();
        let convs = sparse.layers.iter().filter(|l| l.kind == CostKind::Conv);
        for (l, m) in convs.zip(&masks) {
            let d = dense.layers.iter().find(|x| x.layer == l.layer).unwrap();
            assert_eq!(l.madds * m.capacity() as u64, d.madds * m.count() as u64);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn densify_never_lowers_cost(alpha in 0.02f64..0.9, add in 0usize..400, seed in any::<u64>()) {
        let arch = common::arch_3_2();
        let (a, masks) = sparsify_arch(&arch, alpha, seed).unwrap();
        let before = arch_cost(&a, &masks).unwrap();
        let mut r = rng::from_seed(seed);
        let grown: Vec<_> = masks.iter().map(|m| densify(m, add, &mut r)).collect();
        let after = arch_cost(&a, &grown).unwrap();
        prop_assert!(after.total_params >= before.total_params);
        prop_assert!(after.total_madds >= before.total_madds);
        let added: usize = grown.iter().zip(&masks).map(|(g, m)| g.count() - m.count()).sum();
        prop_assert_eq!(added == 0, after.total_madds == before.total_madds);
        prop_assert_eq!(added == 0, after.total_params == before.total_params);
    }
}
