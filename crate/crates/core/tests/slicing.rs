use std::collections::BTreeSet;

use fluidnn_core::data::{decode_checkpoint, encode_checkpoint, load_checkpoint, model_hash, save_checkpoint};
use fluidnn_core::model::partition::split_forward;
use fluidnn_core::model::{
    dense_forward, extract_dense, forward, holdings, init_params, FluidParams, ParamUnit, SubnetId,
};
use fluidnn_core::oracle::{perturb_outside, random_images};

fn params() -> FluidParams {
    init_params(0x5EED)
}

#[test]
fn sliced_forward_is_bit_identical_to_extracted_network() {
    let p = params();
    for id in SubnetId::ALL {
        let spec = id.spec();
        let net = extract_dense(&p, &spec);
        for k in 0..100 {
            let x = random_images(1 + k % 3, k as u64);
            let sliced = forward(&p, &spec, &x).unwrap();
            let dense = dense_forward(&net, &x).unwrap();
            let bits = |t: &fluidnn_core::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&sliced), bits(&dense), "{id} input {k}");
        }
    }
}

#[test]
fn outputs_ignore_everything_outside_holdings() {
    let x = random_images(8, 2);
    for id in SubnetId::ALL {
        let spec = id.spec();
        let p = params();
        let before = forward(&p, &spec, &x).unwrap();
        let mut q = p.clone();
        perturb_outside(&mut q, &holdings(&spec), 3 + id.index() as u64);
        assert_ne!(p.weights, q.weights);
        let after = forward(&q, &spec, &x).unwrap();
        assert_eq!(before.data(), after.data(), "{id}");
    }
}

// The upper models must not read any lower-group weight, and W50 must not
// read the upper groups.
#[test]
fn upper_and_lower_models_are_disjoint() {
    let x = random_images(8, 4);
    let p = params();
    let lower: BTreeSet<ParamUnit> = holdings(&SubnetId::W50.spec());
    for id in [SubnetId::U25, SubnetId::U50] {
        let upper = holdings(&id.spec());
        assert!(upper.is_disjoint(&lower), "{id} overlaps W50");
        let mut q = p.clone();
        perturb_outside(&mut q, &upper, 5);
        assert_eq!(forward(&p, &id.spec(), &x).unwrap(), forward(&q, &id.spec(), &x).unwrap());
    }
}

#[test]
fn perturbing_a_held_unit_changes_the_output() {
    let x = random_images(4, 6);
    let p = params();
    for id in SubnetId::ALL {
        let spec = id.spec();
        let before = forward(&p, &spec, &x).unwrap();
        let mut q = p.clone();
        q.weights.map_unit(ParamUnit::FcBias(id), |v| v + 1.0);
        assert_ne!(before, forward(&q, &spec, &x).unwrap(), "{id}");
    }
}

#[test]
fn w50_is_a_truncation_of_w100() {
    let p = params();
    let small = extract_dense(&p, &SubnetId::W50.spec());
    let full = extract_dense(&p, &SubnetId::W100.spec());
    for l in 0..3 {
        let (o, i) = (small.conv_w[l].dim(0), small.conv_w[l].dim(1));
        let full_in = full.conv_w[l].dim(1);
        for oc in 0..o {
            for ic in 0..i {
                assert_eq!(
                    small.conv_w[l].data()[(oc * i + ic) * 9..][..9],
                    full.conv_w[l].data()[(oc * full_in + ic) * 9..][..9]
                );
            }
        }
        assert_eq!(small.conv_b[l].data(), &full.conv_b[l].data()[..o]);
    }
    let (cs, cf) = (small.fc_w.dim(1), full.fc_w.dim(1));
    for r in 0..10 {
        assert_eq!(small.fc_w.data()[r * cs..][..cs], full.fc_w.data()[r * cf..][..cs]);
    }
}

#[test]
fn dense_write_back_round_trips() {
    let p = params();
    let x = random_images(4, 7);
    for id in SubnetId::ALL {
        let spec = id.spec();
        let net = extract_dense(&p, &spec);
        let mut q = init_params(99);
        net.write_into(&mut q).unwrap();
        assert_eq!(forward(&p, &spec, &x).unwrap(), forward(&q, &spec, &x).unwrap());
    }
}

#[test]
fn split_halves_match_local_w100() {
    let p = params();
    let x = random_images(32, 8);
    let local = forward(&p, &SubnetId::W100.spec(), &x).unwrap();
    let split = split_forward(&p, &x).unwrap();
    for (a, b) in local.data().iter().zip(split.data()) {
        assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
    }
}

#[test]
fn checkpoint_file_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a.fldn");
    let second = dir.path().join("b.fldn");
    let p = params();
    save_checkpoint(&p, &first).unwrap();
    let q = load_checkpoint(&first).unwrap();
    save_checkpoint(&q, &second).unwrap();
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
    assert_eq!(model_hash(&p), model_hash(&q));
    assert_eq!(std::fs::metadata(&first).unwrap().len(), 32 + 4 * 6300 + 8);
}

mod fuzz {
    use super::*;
    use fluidnn_core::data::{parse_idx_images, parse_idx_labels};
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn idx_parsers_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = parse_idx_images(&bytes);
            let _ = parse_idx_labels(&bytes);
        }

        #[test]
        fn idx_headers_with_short_payloads_are_rejected(
            n in 1u32..5, rows in 1u32..5, cols in 1u32..5, missing in 1usize..8
        ) {
            let mut bytes = 0x0803u32.to_be_bytes().to_vec();
            for d in [n, rows, cols] {
                bytes.extend_from_slice(&d.to_be_bytes());
            }
            let len = (n * rows * cols) as usize;
            bytes.resize(16 + len.saturating_sub(missing), 7);
            prop_assert!(parse_idx_images(&bytes).is_err());
            bytes.resize(16 + len, 7);
            let t = parse_idx_images(&bytes).unwrap();
            prop_assert_eq!(t.shape(), &[n as usize, 1, rows as usize, cols as usize][..]);
        }

        #[test]
        fn checkpoint_decoder_never_panics(
            flips in proptest::collection::btree_map(0usize..25_240, any::<u8>(), 1..4),
            cut in proptest::option::of(0usize..25_240)
        ) {
            let mut bytes = encode_checkpoint(&init_params(1));
            for (at, v) in flips {
                bytes[at] ^= v | 1;
            }
            if let Some(c) = cut {
                bytes.truncate(c);
            }
            prop_assert!(decode_checkpoint(&bytes).is_err());
        }
    }
}
