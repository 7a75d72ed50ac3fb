mod common;

use chansparse::connectivity::{ArchSpec, InputDims, LayerSpec, TransformSpec};
use chansparse::convnet::{cost_report, Network};
use chansparse::equivalence::{
    class_size_from_sizes, equivalence_class_size, permute_network, verify_equivalence,
    PermutationSet,
};
use chansparse::rng::{self, Stream};
use chansparse::training::{evaluate, synth_dataset, train, SynthSpec, TrainConfig};
use common::{arch_3_2, test_archs};
use num_bigint::BigUint;

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

fn transforms() -> Vec<TransformSpec> {
    vec![
        TransformSpec::dense(),
        TransformSpec::sparse_random(0.3, 5),
        TransformSpec::hybrid(0.75, 0.5, 6),
    ]
}

#[test]
fn identity_permutation_is_bit_identical() {
    for arch in test_archs() {
        let net = Network::<f32>::from_transform(&arch, &TransformSpec::sparse_random(0.4, 1), 2)
            .unwrap();
        let p = PermutationSet::identity(&arch.hidden_conv_sizes());
        let twin = permute_network(&net, &p).unwrap();
        assert_eq!(twin.masks(), net.masks());
        assert_eq!(twin.state_blocks(), net.state_blocks());
    }
}

#[test]
fn inverse_restores_the_network() {
    let mut r = rng::from_seed(3);
    for arch in test_archs() {
        for t in transforms() {
            let net = Network::<f32>::from_transform(&arch, &t, 4).unwrap();
            let sizes = net.arch().hidden_conv_sizes();
            let p = PermutationSet::random(&sizes, &mut r);
            let back = permute_network(&permute_network(&net, &p).unwrap(), &p.inverse()).unwrap();
            assert_eq!(back.masks(), net.masks());
            assert_eq!(back.state_blocks(), net.state_blocks());
        }
    }
}

#[test]
fn permuted_twins_agree_in_f32_and_f64() {
    let mut r = rng::from_seed(5);
    for arch in test_archs().into_iter().skip(1) {
        for t in transforms() {
            let net = Network::<f32>::from_transform(&arch, &t, 6).unwrap();
            let wide = net.cast::<f64>();
            let sizes = net.arch().hidden_conv_sizes();
            for k in 0..20 {
                let p = PermutationSet::random(&sizes, &mut r);
                let twin = permute_network(&net, &p).unwrap();
                let rep = verify_equivalence(&net, &twin, 5, 4, 1e-5, k).unwrap();
                assert!(rep.pass, "{:?}: {}", t.kind, rep.max_abs_diff);
                let twin64 = permute_network(&wide, &p).unwrap();
                let rep = verify_equivalence(&wide, &twin64, 2, 4, 1e-10, k).unwrap();
                assert!(rep.pass, "f64 {:?}: {}", t.kind, rep.max_abs_diff);
            }
        }
    }
}

#[test]
fn self_comparison_is_exact_and_perturbation_is_caught() {
    let net = Network::<f32>::from_transform(&arch_3_2(), &TransformSpec::dense(), 7).unwrap();
    let rep = verify_equivalence(&net, &net, 3, 4, 1e-5, 0).unwrap();
    assert_eq!(rep.max_abs_diff, 0.0);
    assert!(rep.pass);

    let mut other = net.clone();
    for layer in other.conv_layers_mut().take(1) {
        layer.weight.value[0] += 0.1;
    }
    let rep = verify_equivalence(&net, &other, 3, 4, 1e-5, 0).unwrap();
    assert!(!rep.pass);
    assert!(rep.max_abs_diff > 0.0);
}

#[test]
fn permutation_preserves_cost_and_sum_multisets() {
    let mut r = rng::from_seed(8);
    for arch in test_archs() {
        let net = Network::<f32>::from_transform(&arch, &TransformSpec::sparse_random(0.2, 9), 1)
            .unwrap();
        let p = PermutationSet::random(&arch.hidden_conv_sizes(), &mut r);
        let twin = permute_network(&net, &p).unwrap();
        assert_eq!(cost_report(&twin), cost_report(&net));
        for (a, b) in net.masks().iter().zip(&twin.masks()) {
            assert_eq!(sorted(a.row_sums()), sorted(b.row_sums()));
            assert_eq!(sorted(a.col_sums()), sorted(b.col_sums()));
        }
    }
}

#[test]
fn size_mismatch_is_rejected() {
    let net = Network::<f32>::from_transform(&arch_3_2(), &TransformSpec::dense(), 1).unwrap();
    let p = PermutationSet::identity(&[3]);
    assert!(permute_network(&net, &p).is_err());
    let p = PermutationSet::identity(&[2, 3]);
    assert!(permute_network(&net, &p).is_err());
    assert!(PermutationSet::new(vec![vec![0, 0, 1]]).is_err());
}

/// At α = 0.1 a random nontrivial permutation essentially never maps the
/// masks onto themselves.
#[test]
fn sparse_masks_are_not_permutation_invariant() {
    let arch = ArchSpec::mnist();
    let net =
        Network::<f32>::from_transform(&arch, &TransformSpec::sparse_random(0.1, 3), 1).unwrap();
    let sizes = arch.hidden_conv_sizes();
    let mut r = rng::stream(11, Stream::Verify);
    let mut same = 0;
    let mut tried = 0;
    while tried < 100 {
        let p = PermutationSet::random(&sizes, &mut r);
        if p.is_identity() {
            continue;
        }
        tried += 1;
        let masks =
            chansparse::equivalence::permute_masks(arch.input.channels, &net.masks(), &p).unwrap();
        same += usize::from(masks == net.masks());
    }
    assert!(same <= 1, "{same} of 100 permutations fixed the masks");
}

#[test]
fn class_sizes() {
    assert_eq!(equivalence_class_size(&arch_3_2()), BigUint::from(12u32));
    assert_eq!(class_size_from_sizes(&[1]), BigUint::from(1u32));

    let two_conv = ArchSpec {
        input: InputDims {
            channels: 1,
            height: 28,
            width: 28,
        },
        classes: 10,
        layers: vec![
            LayerSpec::conv(32, 3, true),
            LayerSpec::MaxPool,
            LayerSpec::conv(64, 3, true),
            LayerSpec::Flatten,
            LayerSpec::Fc { out: 10 },
            LayerSpec::SoftmaxXent,
        ],
    };
    let size = equivalence_class_size(&two_conv);
    let ln = libm::lgamma(33.0) + libm::lgamma(65.0);
    let digits = (ln / std::f64::consts::LN_10).floor() as usize + 1;
    assert_eq!(size.to_string().len(), digits);
    // 32! = 263130836933693530167218012160000000
    let f32_ = "263130836933693530167218012160000000"
        .parse::<BigUint>()
        .unwrap();
    assert_eq!(class_size_from_sizes(&[32]), f32_);
    assert_eq!(size % &f32_, BigUint::from(0u32));
}

#[test]
fn accuracy_survives_permutation_after_training() {
    let spec = SynthSpec {
        height: 6,
        width: 6,
        classes: 3,
        train: 300,
        test: 150,
        ..SynthSpec::default()
    };
    let (tr, te) = synth_dataset(&spec, 2).unwrap();
    let mut net = Network::<f32>::from_transform(&arch_3_2(), &TransformSpec::dense(), 3).unwrap();
    let cfg = TrainConfig {
        batch_size: 16,
        epochs: 2,
        ..TrainConfig::default()
    };
    train(&mut net, &tr, &te, &cfg, None, &mut |_| {}).unwrap();
    let mut r = rng::from_seed(4);
    for _ in 0..5 {
        let p = PermutationSet::random(&[3, 2], &mut r);
        let twin = permute_network(&net, &p).unwrap();
        assert!(verify_equivalence(&net, &twin, 5, 8, 1e-5, 1).unwrap().pass);
        assert_eq!(evaluate(&twin, &te).unwrap(), evaluate(&net, &te).unwrap());
    }
}
