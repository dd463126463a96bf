use fluidnn_core::model::{backward, forward_train, holdings, init_params, NetView, ParamSet, ParamUnit, SubnetId};
use fluidnn_core::ops;
use fluidnn_core::oracle::{self, gradient_suite};
use fluidnn_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn every_kernel_matches_finite_differences() {
    let results = gradient_suite(20, 0xC0FFEE);
    assert_eq!(results.len(), 100);
    for r in &results {
        assert!(
            r.max_rel_err <= 1e-5,
            "{} instance {}: relative error {:.3e}",
            r.kernel,
            r.instance,
            r.max_rel_err
        );
    }
}

#[test]
fn conv_forward_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let x = Tensor::<f32>::from_fn(&[1, 2, 5, 5], |_| rng.gen_range(-1.0..1.0));
        let w = Tensor::<f32>::from_fn(&[3, 2, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::<f32>::from_fn(&[3], |_| rng.gen_range(-1.0..1.0));
        let got = ops::conv2d_forward(&x, &w, &b).unwrap();
        let want = oracle::direct_conv2d(&x.cast(), &w.cast(), &b.cast());
        assert_eq!(got.shape(), want.shape());
        for (g, e) in got.data().iter().zip(want.data()) {
            assert!((f64::from(*g) - e).abs() <= 1e-6, "{g} vs {e}");
        }
    }
}

#[test]
fn sliced_conv_equals_conv_of_sliced_tensors() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Tensor::<f64>::from_fn(&[2, 6, 4, 4], |_| rng.gen_range(-1.0..1.0));
    let w = Tensor::<f64>::from_fn(&[5, 6, 3, 3], |_| rng.gen_range(-1.0..1.0));
    let b = Tensor::<f64>::from_fn(&[5], |_| rng.gen_range(-1.0..1.0));
    let (o, c) = (1..4, 2..5);
    let xs = Tensor::from_fn(&[2, 3, 4, 4], |i| {
        let (s, rest) = (i / 48, i % 48);
        x.data()[s * 96 + (c.start + rest / 16) * 16 + rest % 16]
    });
    let ws = Tensor::from_fn(&[3, 3, 3, 3], |i| {
        let (oo, rest) = (i / 27, i % 27);
        w.data()[(o.start + oo) * 54 + (c.start + rest / 9) * 9 + rest % 9]
    });
    let bs = Tensor::new(vec![3], b.data()[o.clone()].to_vec()).unwrap();
    let got = ops::conv2d_forward_sliced(&xs, &w, &b, o, c).unwrap();
    let want = oracle::direct_conv2d(&xs, &ws, &bs);
    for (g, e) in got.data().iter().zip(want.data()) {
        assert!((g - e).abs() < 1e-12);
    }
}

#[test]
fn maxpool_matches_window_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let (h, w) = (rng.gen_range(2..9), rng.gen_range(2..9));
        let x = Tensor::<f64>::from_fn(&[2, 3, h, w], |_| rng.gen_range(-5.0..5.0));
        let (y, _) = ops::maxpool2(&x).unwrap();
        assert_eq!(y, oracle::window_scan_maxpool(&x));
    }
}

#[test]
fn relu_sum_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = Tensor::<f64>::from_fn(&[4, 3, 5, 5], |_| rng.gen_range(-3.0..3.0));
    let pos = ops::relu(&x).unwrap();
    let neg = ops::relu(&x.map(|v| -v)).unwrap();
    for ((a, b), v) in pos.data().iter().zip(neg.data()).zip(x.data()) {
        assert_eq!(a + b, v.abs());
    }
}

// Directional derivative of the network loss along a random direction over
// the spec's holdings, against an f64 reference network.
#[test]
fn network_gradient_matches_reference_difference() {
    let params = init_params(21);
    let x = oracle::random_images(4, 22);
    let x64 = x.cast::<f64>();
    let y = [3u8, 1, 4, 1];
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for id in SubnetId::ALL {
        let spec = id.spec();
        let view = NetView::of_spec(&params.weights, &spec);
        let cache = forward_train(&view, &x).unwrap();
        let (loss, dlogits) = ops::softmax_xent(&cache.logits, &y).unwrap();
        let mut grads = ParamSet::zeros();
        backward(&view, &spec, &cache, &dlogits, &mut grads).unwrap();

        let held = holdings(&spec);
        for unit in ParamUnit::all() {
            if !held.contains(&unit) {
                assert!(grads.unit_values(unit).iter().all(|&g| g == 0.0), "{id}: {unit:?} touched");
            }
        }

        let mut dir = ParamSet::zeros();
        for &unit in &held {
            dir.map_unit(unit, |_| rng.gen_range(-1.0f32..1.0));
        }
        let analytic: f64 = held
            .iter()
            .flat_map(|&u| grads.unit_values(u).into_iter().zip(dir.unit_values(u)))
            .map(|(g, d)| f64::from(g) * f64::from(d))
            .sum();

        let slot = spec.fc_bias_slot.index();
        let base = oracle::RefWeights::of(&params.weights, slot);
        let step = oracle::RefWeights::of(&dir, slot);
        let loss_at = |t: f64| {
            let w = base.shifted(&step, t);
            oracle::reference_xent(&oracle::reference_logits(&w, spec.channels(), &x64), &y)
        };
        assert!((loss_at(0.0) - f64::from(loss)).abs() < 1e-5, "{id}: reference loss differs");
        // Small enough that no ReLU or pooling kink falls inside the probe.
        let eps = 1e-7;
        let numeric = (loss_at(eps) - loss_at(-eps)) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        assert!(rel < 1e-5, "{id}: analytic {analytic}, numeric {numeric}");
    }
}
