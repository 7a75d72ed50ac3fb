mod common;

use chansparse::connectivity::{
    full_masks, validate_aliveness, ArchSpec, InputDims, LayerSpec, TransformSpec,
};
use chansparse::convnet::{KernelPath, Layer, Network, NewConnectionInit};
use chansparse::rng::{self, Stream};
use chansparse::training::{
    apply_densification, evaluate, sgd_step, synth_dataset, target_density, train, Dataset,
    DensifySchedule, Growth, SynthSpec, TrainConfig,
};
use common::tiny_arch;
use proptest::prelude::*;
use rand::Rng;

fn small_synth() -> (Dataset, Dataset) {
    let spec = SynthSpec {
        channels: 2,
        height: 6,
        width: 6,
        classes: 3,
        train: 1600,
        test: 200,
        noise: 0.4,
    };
    synth_dataset(&spec, 5).unwrap()
}

fn param_values<T: chansparse::tensor::Scalar>(net: &mut Network<T>) -> Vec<Vec<T>> {
    net.params_mut()
        .into_iter()
        .map(|p| p.value.to_vec())
        .collect()
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let (tr, _) = small_synth();
    let mut net =
        Network::<f32>::from_transform(&tiny_arch(true), &TransformSpec::dense(), 1).unwrap();
    let before = param_values(&mut net);
    let (x, y) = tr.batch::<f32>(&(0..16).collect::<Vec<_>>());
    for step in 0..3 {
        sgd_step(&mut net, &x, &y, 0.0, 0.9, step).unwrap();
    }
    assert_eq!(param_values(&mut net), before);
}

/// First step from rest is `w − lr·g`; the second folds in momentum,
/// `w − lr·(μ·g₁ + g₂)`.
#[test]
fn update_rule_by_hand() {
    let (tr, _) = small_synth();
    let mut net =
        Network::<f64>::from_transform(&tiny_arch(false), &TransformSpec::dense(), 2).unwrap();
    let (lr, mu) = (0.1, 0.9);
    let (x1, y1) = tr.batch::<f64>(&(0..8).collect::<Vec<_>>());
    let (x2, y2) = tr.batch::<f64>(&(8..16).collect::<Vec<_>>());

    let w0 = param_values(&mut net);
    let mut probe = net.clone();
    probe.loss_and_grad(&x1, &y1).unwrap();
    let g1: Vec<Vec<f64>> = probe
        .params_mut()
        .into_iter()
        .map(|p| p.grad.to_vec())
        .collect();
    sgd_step(&mut net, &x1, &y1, lr, mu, 0).unwrap();
    let w1 = param_values(&mut net);
    for ((a, b), g) in w0.iter().zip(&w1).zip(&g1) {
        for ((a, b), g) in a.iter().zip(b).zip(g) {
            assert_eq!(*b, a - lr * g);
        }
    }

    let mut probe = net.clone();
    probe.loss_and_grad(&x2, &y2).unwrap();
    let g2: Vec<Vec<f64>> = probe
        .params_mut()
        .into_iter()
        .map(|p| p.grad.to_vec())
        .collect();
    sgd_step(&mut net, &x2, &y2, lr, mu, 1).unwrap();
    let w2 = param_values(&mut net);
    for (((a, b), g), h) in w1.iter().zip(&w2).zip(&g1).zip(&g2) {
        for (((a, b), g), h) in a.iter().zip(b).zip(g).zip(h) {
            assert_eq!(*b, a - lr * (mu * g + h));
        }
    }
}

/// One input pixel feeding two logits, small enough to differentiate by hand.
#[test]
fn one_pixel_model_step() {
    let arch = ArchSpec {
        input: InputDims {
            channels: 1,
            height: 1,
            width: 1,
        },
        classes: 2,
        layers: vec![
            LayerSpec::Flatten,
            LayerSpec::Fc { out: 2 },
            LayerSpec::SoftmaxXent,
        ],
    };
    let mut net = Network::<f64>::new(&arch, vec![], 0).unwrap();
    for layer in net.layers_mut() {
        if let Layer::Fc(fc) = layer {
            fc.weight.value = vec![0.5, -0.5];
            fc.bias.value = vec![0.0, 0.0];
        }
    }
    let x = chansparse::tensor::Tensor4::from_vec([1, 1, 1, 1], vec![2.0]).unwrap();
    // logits (1, −1); p0 = 1/(1+e^{−2}); dL/dz0 = p0 − 1, dL/dz1 = 1 − p0.
    let p0 = 1.0 / (1.0 + (-2.0f64).exp());
    let loss = sgd_step(&mut net, &x, &[0], 0.1, 0.0, 0).unwrap();
    assert!((loss - (-p0.ln())).abs() < 1e-12);
    let Layer::Fc(fc) = &net.layers()[1] else {
        panic!()
    };
    let want = [0.5 - 0.1 * 2.0 * (p0 - 1.0), -0.5 - 0.1 * 2.0 * (1.0 - p0)];
    for (w, e) in fc.weight.value.iter().zip(want) {
        assert!((w - e).abs() < 1e-15);
    }
}

#[test]
fn reruns_give_identical_traces() {
    let (tr, te) = small_synth();
    let cfg = TrainConfig {
        batch_size: 16,
        eval_every: 1,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let mut net = Network::<f32>::from_transform(
            &tiny_arch(true),
            &TransformSpec::sparse_random(0.5, 9),
            9,
        )
        .unwrap();
        let rec = train(&mut net, &tr, &te.take(20), &cfg, None, &mut |_| {}).unwrap();
        (rec.points, net.state_blocks())
    };
    let (a, wa) = run();
    let (b, wb) = run();
    assert_eq!(a.len(), 100);
    assert_eq!(a, b);
    assert_eq!(wa, wb);
}

/// Dense kernels and channel-sparse kernels over a full mask, started from
/// the same weights and fed the same batches.
#[test]
fn dense_and_full_sparse_train_alike() {
    let (tr, te) = small_synth();
    let arch = tiny_arch(true);
    let cfg = TrainConfig {
        batch_size: 16,
        epochs: 2,
        eval_every: 1,
        ..TrainConfig::default()
    };
    let mut dense = Network::<f32>::new(&arch, full_masks(&arch).unwrap(), 4).unwrap();
    let mut sparse = dense.clone();
    dense.set_kernel_path(KernelPath::Dense);
    sparse.set_kernel_path(KernelPath::Sparse);
    let a = train(&mut dense, &tr, &te.take(10), &cfg, None, &mut |_| {}).unwrap();
    let b = train(&mut sparse, &tr, &te.take(10), &cfg, None, &mut |_| {}).unwrap();
    assert_eq!(a.points.len(), 200);
    let worst = a
        .points
        .iter()
        .zip(&b.points)
        .map(|(p, q)| (p.train_loss - q.train_loss).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-5, "loss traces differ by {worst}");
}

/// Compact storage never materializes inactive connections, whatever the
/// optimizer does.
#[test]
fn sparsity_structure_survives_training() {
    let (tr, te) = small_synth();
    let t = TransformSpec::sparse_random(0.3, 2);
    let mut net = Network::<f32>::from_transform(&tiny_arch(true), &t, 2).unwrap();
    let masks = net.masks();
    let cfg = TrainConfig {
        batch_size: 32,
        ..TrainConfig::default()
    };
    train(&mut net, &tr, &te, &cfg, None, &mut |_| {}).unwrap();
    assert_eq!(net.masks(), masks);
    for (layer, m) in net.conv_layers().zip(&masks) {
        assert_eq!(layer.weight.value.len(), m.count() * layer.kernel_len());
        let k = layer.dense_kernels();
        for o in 0..m.n_out() {
            for i in 0..m.n_in() {
                if !m.get(o, i) {
                    assert!(k.kernel(o, i).iter().all(|&v| v == 0.0));
                }
            }
        }
    }
}

#[test]
fn densification_keeps_old_weights_bit_exact() {
    let arch = ArchSpec::mnist();
    let mut net =
        Network::<f32>::from_transform(&arch, &TransformSpec::sparse_random(0.01, 1), 1).unwrap();
    // Give the velocities non-zero content.
    let mut r = rng::from_seed(3);
    for layer in net.conv_layers_mut() {
        for v in &mut layer.weight.velocity {
            *v = r.random_range(-1.0..1.0);
        }
    }
    let schedule = DensifySchedule::new(0.01, 10).unwrap();
    let mut grow = rng::stream(1, Stream::Densify);
    for step in 0..90 {
        let before: Vec<_> = net.conv_layers().cloned().collect();
        let changed = apply_densification(
            &mut net,
            &schedule,
            step,
            NewConnectionInit::Fresh,
            &mut grow,
        )
        .unwrap();
        if step < 10 {
            assert!(!changed);
        }
        for (old, new) in before.iter().zip(net.conv_layers()) {
            assert!(old.mask().is_subset_of(new.mask()));
            for o in 0..old.n_out() {
                for (s, &i) in old.slots()[o].iter().enumerate() {
                    let ns = new.slots()[o].iter().position(|&j| j == i).unwrap();
                    let kk = old.kernel_len();
                    let (a, b) = (
                        old.row_range(o).start / kk + s,
                        new.row_range(o).start / kk + ns,
                    );
                    assert_eq!(old.kernel(o, s), new.kernel(o, ns));
                    assert_eq!(
                        old.weight.velocity[a * kk..(a + 1) * kk],
                        new.weight.velocity[b * kk..(b + 1) * kk]
                    );
                }
            }
        }
        assert_eq!(
            validate_aliveness(net.arch(), &net.masks()).unwrap(),
            Ok(())
        );
    }
    // 0.01 · 2^7 ≥ 1 after seven doublings.
    assert_eq!(schedule.doublings_to_full(), 7);
    assert!(net.masks().iter().all(|m| m.is_full()));
    let snapshot = net.state_blocks();
    let changed = apply_densification(
        &mut net,
        &schedule,
        1000,
        NewConnectionInit::Fresh,
        &mut grow,
    )
    .unwrap();
    assert!(!changed);
    assert_eq!(net.state_blocks(), snapshot);
}

#[test]
fn zero_init_adds_silent_connections() {
    let arch = tiny_arch(false);
    let mut net =
        Network::<f64>::from_transform(&arch, &TransformSpec::sparse_random(0.2, 1), 1).unwrap();
    let x = common::random_tensor([3, 2, 6, 6], 4);
    let before = net.infer(&x).unwrap();
    let schedule = DensifySchedule::new(0.2, 1).unwrap();
    let mut r = rng::from_seed(0);
    assert!(apply_densification(&mut net, &schedule, 5, NewConnectionInit::Zero, &mut r).unwrap());
    assert_eq!(net.infer(&x).unwrap(), before);
}

#[test]
fn schedule_examples() {
    let s = DensifySchedule::new(0.01, 10_000).unwrap();
    assert_eq!(target_density(&s, 0), 0.01);
    assert_eq!(target_density(&s, 9_999), 0.01);
    assert_eq!(target_density(&s, 10_000), 0.02);
    assert_eq!(target_density(&s, 70_000), 1.0);
    let full = DensifySchedule::new(1.0, 5).unwrap();
    assert!((0..100).all(|k| target_density(&full, k * 7) == 1.0));
    let flat = DensifySchedule {
        growth: Growth::None,
        ..s
    };
    assert_eq!(target_density(&flat, 1_000_000), 0.01);
}

proptest! {
    #[test]
    fn density_is_a_monotone_step_function(d0 in 0.0005f64..1.0, period in 1u64..500) {
        let s = DensifySchedule::new(d0, period).unwrap();
        let full_at = s.doublings_to_full() as u64 * period;
        let mut prev = 0.0;
        for step in (0..full_at + 2 * period).step_by((period / 3).max(1) as usize) {
            let d = target_density(&s, step);
            prop_assert!(d >= prev);
            if d != prev && step > 0 {
                prop_assert!(target_density(&s, step - step % period) == d);
            }
            prev = d;
        }
        prop_assert_eq!(target_density(&s, full_at), 1.0);
        prop_assert_eq!(s.doublings_to_full(), (1.0 / d0).log2().ceil().max(0.0) as u32);
    }
}

#[test]
fn perfect_predictor_scores_one() {
    let k = 4;
    let arch = ArchSpec {
        input: InputDims {
            channels: 1,
            height: 1,
            width: k,
        },
        classes: k,
        layers: vec![
            LayerSpec::Flatten,
            LayerSpec::Fc { out: k },
            LayerSpec::SoftmaxXent,
        ],
    };
    let mut net = Network::<f32>::new(&arch, vec![], 0).unwrap();
    for layer in net.layers_mut() {
        if let Layer::Fc(fc) = layer {
            fc.weight.value = (0..k * k)
                .map(|i| if i % (k + 1) == 0 { 1.0 } else { 0.0 })
                .collect();
            fc.bias.value = vec![0.0; k];
        }
    }
    let n = 40;
    let data = Dataset {
        images: (0..n)
            .flat_map(|e| (0..k).map(move |j| (j == e % k) as u8 as f32))
            .collect(),
        labels: (0..n).map(|e| e % k).collect(),
        channels: 1,
        height: 1,
        width: k,
        classes: k,
    };
    assert_eq!(evaluate(&net, &data).unwrap(), 1.0);
}

/// Predictions that ignore the labels score about 1/10 on a balanced
/// 10-class set.
#[test]
fn label_blind_predictor_scores_chance() {
    let arch = ArchSpec {
        input: InputDims {
            channels: 1,
            height: 4,
            width: 4,
        },
        classes: 10,
        layers: vec![
            LayerSpec::conv(4, 3, false),
            LayerSpec::Flatten,
            LayerSpec::Fc { out: 10 },
            LayerSpec::SoftmaxXent,
        ],
    };
    let net = Network::<f32>::from_transform(&arch, &TransformSpec::dense(), 5).unwrap();
    let mut r = rng::from_seed(6);
    let n = 10_000;
    let data = Dataset {
        images: (0..n * 16).map(|_| r.random::<f32>()).collect(),
        labels: (0..n).map(|i| i % 10).collect(),
        channels: 1,
        height: 4,
        width: 4,
        classes: 10,
    };
    let acc = evaluate(&net, &data).unwrap();
    assert!((acc - 0.1).abs() <= 0.02, "{acc}");
}

#[test]
fn synth_is_deterministic_and_in_range() {
    let spec = SynthSpec::default();
    let a = synth_dataset(&spec, 4).unwrap();
    assert_eq!(a, synth_dataset(&spec, 4).unwrap());
    assert_ne!(a.0.images, synth_dataset(&spec, 5).unwrap().0.images);
    assert_eq!((a.0.len(), a.1.len()), (spec.train, spec.test));
    assert!(a.0.images.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn non_finite_loss_aborts_with_norms() {
    let (tr, _) = small_synth();
    let mut net =
        Network::<f32>::from_transform(&tiny_arch(false), &TransformSpec::dense(), 1).unwrap();
    for layer in net.conv_layers_mut() {
        layer.weight.value.iter_mut().for_each(|w| *w = f32::MAX);
    }
    let (x, y) = tr.batch::<f32>(&[0, 1, 2, 3]);
    match sgd_step(&mut net, &x, &y, 0.1, 0.9, 7) {
        Err(chansparse::Error::NonFiniteLoss { step, diagnostics }) => {
            assert_eq!(step, 7);
            assert!(diagnostics.contains("layer0="));
        }
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
}
