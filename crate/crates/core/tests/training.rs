//! Training behaviour on real MNIST. Skipped with a note when the data set is absent.

use std::path::PathBuf;

use fluidnn_core::data::{load_mnist, Dataset, Split};
use fluidnn_core::model::{extract_dense, forward, freeze_mask, init_params, FluidParams, FreezePolicy, NetView, SubnetId};
use fluidnn_core::optim::Hyper;
use fluidnn_core::train::{evaluate, evaluate_view, train_one_step};

fn mnist() -> Option<(Dataset, Dataset)> {
    let dir = std::env::var_os("FLUIDNN_MNIST")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    match (load_mnist(&dir, Split::Train), load_mnist(&dir, Split::Test)) {
        (Ok(train), Ok(test)) => Some((train, test)),
        (Err(e), _) | (_, Err(e)) => {
            eprintln!("skipping: MNIST unavailable at {} ({e})", dir.display());
            None
        }
    }
}

fn one_epoch(params: &mut FluidParams, id: SubnetId, policy: FreezePolicy, train: &Dataset) -> f64 {
    let spec = id.spec();
    let mask = freeze_mask(&spec, policy, 0);
    let stats = train_one_step(params, &spec, &mask, train, &Hyper::default(), 7).unwrap();
    stats.final_loss.unwrap()
}

#[test]
fn mnist_files_have_the_expected_shape() {
    let Some((train, test)) = mnist() else { return };
    assert_eq!((train.len(), test.len()), (60_000, 10_000));
    assert_eq!(train.images.shape(), &[60_000, 1, 28, 28]);
    assert!(test.images.data().iter().all(|p| (0.0..=1.0).contains(p)));
    assert!(train.labels.iter().chain(&test.labels).all(|&l| l < 10));
    for digit in 0..10u8 {
        assert!(test.labels.iter().filter(|&&l| l == digit).count() > 800);
    }
}

#[test]
fn short_training_learns_and_honours_freezing() {
    let Some((train, test)) = mnist() else { return };
    let train = train.take(6_000).unwrap();
    let test = test.take(2_000).unwrap();
    let mut p = init_params(0);
    let chance_loss = 10f64.ln();

    let loss = one_epoch(&mut p, SubnetId::W25, FreezePolicy::FreezeInherited, &train);
    assert!(loss < chance_loss, "W25 mean loss {loss}");
    let w25 = evaluate(&p, &SubnetId::W25.spec(), &test).unwrap();
    assert!(w25 > 0.5, "W25 accuracy {w25}");

    // Growing to W50 with inherited units frozen leaves W25 exactly as it was.
    let x = test.batch(0, 200).unwrap().0;
    let before = forward(&p, &SubnetId::W25.spec(), &x).unwrap();
    let snapshot = p.weights.clone();
    let mask = freeze_mask(&SubnetId::W50.spec(), FreezePolicy::FreezeInherited, 0);
    one_epoch(&mut p, SubnetId::W50, FreezePolicy::FreezeInherited, &train);
    for (unit, trainable) in mask.units() {
        let same = p.weights.unit_values(unit) == snapshot.unit_values(unit);
        assert_eq!(same, !trainable, "{unit:?} trainable={trainable}");
    }
    assert_eq!(forward(&p, &SubnetId::W25.spec(), &x).unwrap(), before);

    // Retraining the upper half never touches the lower models.
    let w50 = forward(&p, &SubnetId::W50.spec(), &x).unwrap();
    let u50_before = evaluate(&p, &SubnetId::U50.spec(), &test).unwrap();
    let loss = one_epoch(&mut p, SubnetId::U50, FreezePolicy::FreezeInherited, &train);
    assert!(loss < chance_loss, "U50 mean loss {loss}");
    assert_eq!(forward(&p, &SubnetId::W50.spec(), &x).unwrap(), w50);
    assert!(evaluate(&p, &SubnetId::U50.spec(), &test).unwrap() > u50_before);
}

#[test]
fn evaluation_is_independent_of_batching() {
    let Some((train, test)) = mnist() else { return };
    let mut p = init_params(3);
    one_epoch(&mut p, SubnetId::W50, FreezePolicy::Joint, &train.take(3_000).unwrap());
    let test = test.take(1_000).unwrap();
    for id in SubnetId::ALL {
        let spec = id.spec();
        let reference = evaluate(&p, &spec, &test).unwrap();
        for batch in [1, 7, 1_000] {
            let view = NetView::of_spec(&p.weights, &spec);
            assert_eq!(evaluate_view(&view, &test, batch).unwrap(), reference, "{id} batch {batch}");
        }
        let dense = extract_dense(&p, &spec);
        assert_eq!(evaluate_view(&dense.view(), &test, 250).unwrap(), reference, "{id} dense");
    }
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let Some((train, _)) = mnist() else { return };
    let train = train.take(500).unwrap();
    let mut p = init_params(4);
    let before = p.weights.clone();
    let hyper = Hyper { learning_rate: 0.0, ..Hyper::default() };
    for id in SubnetId::ALL {
        let spec = id.spec();
        let mask = freeze_mask(&spec, FreezePolicy::Joint, 0);
        train_one_step(&mut p, &spec, &mask, &train, &hyper, 1).unwrap();
    }
    assert_eq!(p.weights, before);
}
