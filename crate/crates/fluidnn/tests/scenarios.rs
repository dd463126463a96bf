mod common;

use std::time::Duration;

use proptest::prelude::*;

use fluidnn::bench::{bench, Availability};
use fluidnn::metrics::{claimed_spec, expected_window_accuracy, Trace};
use fluidnn::{from_json_lines, parse_scenario, to_csv, to_json_lines, Harness, SocketSettings, Transport, WINDOW_MS};
use fluidnn_core::model::{FluidParams, SubnetId};
use fluidnn_core::Tensor;
use fluidnn_runtime::emulated::{Action, EmuConfig};
use fluidnn_runtime::failover::{Phase, Policy};
use fluidnn_runtime::ha::{predict, IMAGE_FLOATS};
use fluidnn_runtime::Mode;

use common::fixture;

fn emulated() -> Transport {
    Transport::Emulated(EmuConfig::default())
}

fn offline<'a>(params: &'a FluidParams, images: &'a [f32]) -> impl FnMut(SubnetId, usize, usize) -> Vec<u8> + 'a {
    move |spec, first, count| {
        let x = Tensor::new(
            vec![count, 1, 28, 28],
            images[first * IMAGE_FLOATS..(first + count) * IMAGE_FLOATS].to_vec(),
        )
        .unwrap();
        predict(params, spec, &x).unwrap()
    }
}

fn check_report_invariants(trace: &Trace, report: &fluidnn::MetricsReport) {
    assert!(report.counts.conserved(), "{:?}", report.counts);
    for w in &report.windows {
        assert!(w.throughput_ips >= 0.0);
        match w.accuracy {
            Some(a) => assert!((0.0..=1.0).contains(&a) && w.throughput_ips > 0.0),
            None => assert_eq!(w.throughput_ips, 0.0),
        }
    }
    for a in &trace.answers {
        let s = trace.state_at(a.at_ms).unwrap();
        assert_ne!(s.phase, Phase::Halted, "answer at {} ms after halting", a.at_ms);
    }
}

#[test]
fn emulated_runs_are_deterministic() {
    let f = fixture(1500, 1);
    let script = parse_scenario("400 kill worker\n900 restore worker\n1500 set_mode HT\n").unwrap();
    let mut h = Harness::new(f.params.clone(), f.test.clone());
    let a = h.run_scenario(&script, Policy::Fluid, Mode::Ha, &emulated()).unwrap();
    let mut fresh = Harness::new(f.params.clone(), f.test.clone());
    let b = fresh.run_scenario(&script, Policy::Fluid, Mode::Ha, &emulated()).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.trace, b.trace);
    assert_eq!(to_json_lines(&a.report), to_json_lines(&b.report));
}

#[test]
fn static_throughput_is_zero_after_a_kill() {
    let f = fixture(3000, 2);
    let mut h = Harness::new(f.params.clone(), f.test.clone());
    for dev in ["worker", "master"] {
        let script = parse_scenario(&format!("1000 kill {dev}")).unwrap();
        let run = h.run_scenario(&script, Policy::Static, Mode::Ha, &emulated()).unwrap();
        check_report_invariants(&run.trace, &run.report);
        let halted = run.trace.timeline.iter().find(|(_, s)| s.phase == Phase::Halted).unwrap().0;
        assert!(halted > 1000.0 && halted < 1500.0, "{dev}: halted at {halted}");
        let after: Vec<_> = run.report.windows.iter().filter(|w| w.window_start_ms as f64 >= halted).collect();
        assert!(!after.is_empty());
        assert!(after.iter().all(|w| w.throughput_ips == 0.0 && w.accuracy.is_none() && w.state == "HALTED"));
        assert!(run.report.windows[0].throughput_ips > 0.0);
        assert!(run.report.counts.failed > 0);
    }
}

#[test]
fn fluid_master_loss_serves_the_upper_half() {
    let f = fixture(4000, 3);
    let mut h = Harness::new(f.params.clone(), f.test.clone());
    let script = parse_scenario("500 kill master").unwrap();
    let run = h.run_scenario(&script, Policy::Fluid, Mode::Ha, &emulated()).unwrap();
    check_report_invariants(&run.trace, &run.report);
    assert_eq!(run.report.counts.failed, 0);
    let wo = run.report.state(Phase::WorkerOnly).unwrap();
    assert_eq!(wo.specs, vec!["U50"]);
    assert!(wo.steady_ips.unwrap() > 0.0);

    // Offline U50 accuracy on exactly the images answered while worker-only.
    let images = f.test.images.data();
    let mut u50 = offline(&f.params, images);
    let (mut n, mut correct) = (0, 0);
    for a in run.trace.answers.iter().filter(|a| run.trace.state_at(a.at_ms).unwrap().phase == Phase::WorkerOnly) {
        let p = u50(SubnetId::U50, a.first, a.count);
        correct += p.iter().zip(&f.test.labels[a.first..a.first + a.count]).filter(|(x, y)| x == y).count();
        n += a.count;
    }
    assert_eq!(wo.images, n);
    assert!((wo.accuracy.unwrap() - correct as f64 / n as f64).abs() < 1e-12);

    let expected = expected_window_accuracy(&run.trace, &f.test.labels, WINDOW_MS, offline(&f.params, images));
    for (w, e) in run.report.windows.iter().zip(&expected) {
        assert_eq!(w.accuracy.is_some(), e.is_some());
        if let (Some(a), Some(e)) = (w.accuracy, e) {
            assert!((a - e).abs() <= 0.01, "window {}: {a} vs {e}", w.window_start_ms);
        }
    }
}

#[test]
fn reports_round_trip() {
    let f = fixture(2000, 4);
    let mut h = Harness::new(f.params.clone(), f.test.clone());
    let script = parse_scenario("300 kill worker\n800 restore worker").unwrap();
    let run = h.run_scenario(&script, Policy::Dynamic, Mode::Ha, &emulated()).unwrap();
    assert!(!run.report.events.is_empty());
    assert_eq!(from_json_lines(&to_json_lines(&run.report)).unwrap(), run.report);
    let csv = to_csv(&run.report);
    assert_eq!(csv.lines().count(), run.report.windows.len() + 1);
    assert!(csv.starts_with("window_start_ms,throughput_ips,accuracy,state,specs\n"));
}

#[test]
fn socket_transport_fails_over_and_attributes_answers() {
    let f = fixture(3000, 5);
    let mut h = Harness::new(f.params.clone(), f.test.clone());
    let script = parse_scenario("rate 2000\nduration_ms 20000\n400 kill worker\n").unwrap();
    let transport = Transport::Socket(SocketSettings {
        heartbeat: Duration::from_millis(50),
        ..SocketSettings::default()
    });
    let run = h.run_scenario(&script, Policy::Fluid, Mode::Ha, &transport).unwrap();
    check_report_invariants(&run.trace, &run.report);
    assert_eq!(run.report.counts.completed, 3000);
    let mo = run.report.state(Phase::MasterOnly).unwrap();
    assert_eq!(mo.specs, vec!["W50"]);
    let mut predictions = offline(&f.params, f.test.images.data());
    for a in &run.trace.answers {
        assert_eq!(a.labels, predictions(a.spec, a.first, a.count));
    }
    let agree = run
        .trace
        .answers
        .iter()
        .filter(|a| claimed_spec(&run.trace, a.at_ms, a.device) == Some(a.spec))
        .count();
    assert!(agree + 2 >= run.trace.answers.len(), "{agree} of {}", run.trace.answers.len());
    let transition = run.report.events.iter().find(|e| e.contains("transition") && e.contains("MASTER_ONLY"));
    let t: u64 = transition.unwrap().split(' ').next().unwrap().parse().unwrap();
    assert!((400..=400 + 150 + 50 + 30).contains(&t), "detected at {t} ms");
}

#[test]
fn bench_matrix_shape() {
    let f = fixture(1280, 6);
    let mut h = Harness::new(f.params.clone(), f.test.clone());
    let rows = bench(&mut h, &EmuConfig::default(), None).unwrap();
    assert_eq!(rows.len(), 9);
    let row = |p: Policy, a: Availability| rows.iter().find(|r| r.policy == p && r.availability == a).unwrap();
    for a in [Availability::MasterOnly, Availability::WorkerOnly] {
        let r = row(Policy::Static, a);
        assert_eq!((r.throughput_ips, r.served_after_failure, r.final_state), (0.0, 0, Phase::Halted));
    }
    assert_eq!(row(Policy::Dynamic, Availability::MasterOnly).specs, vec!["W50"]);
    assert_eq!(row(Policy::Dynamic, Availability::WorkerOnly).throughput_ips, 0.0);
    assert_eq!(row(Policy::Fluid, Availability::WorkerOnly).specs, vec!["U50"]);
    assert_eq!(row(Policy::Fluid, Availability::Both).mode, Mode::Ht);
    assert!(row(Policy::Fluid, Availability::Both).throughput_ips > 2.0 * row(Policy::Static, Availability::Both).throughput_ips);
    assert!(rows.iter().all(|r| r.completed + r.failed == 1280));
}

fn arb_script() -> impl Strategy<Value = String> {
    let action = prop_oneof![
        Just("kill master"),
        Just("kill worker"),
        Just("restore master"),
        Just("restore worker"),
        Just("set_mode HA"),
        Just("set_mode HT"),
    ];
    (proptest::collection::vec((0u64..3000, action), 0..6), 20usize..200, prop::option::of(500.0f64..5000.0)).prop_map(
        |(mut evs, batch, rate)| {
            evs.sort_by_key(|e| e.0);
            let mut s = format!("duration_ms 8000\nbatch {batch}\n");
            if let Some(r) = rate {
                s.push_str(&format!("rate {r}\n"));
            }
            for (t, a) in evs {
                s.push_str(&format!("{t} {a}\n"));
            }
            s
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn random_scripts_conserve_images(text in arb_script(), p in 0usize..3, ht in any::<bool>()) {
        let f = fixture(900, 7);
        let policy = Policy::ALL[p];
        let mode = if ht && policy == Policy::Fluid { Mode::Ht } else { Mode::Ha };
        let script = parse_scenario(&text).unwrap();
        prop_assert_eq!(&parse_scenario(&script.to_string()).unwrap(), &script);
        let mut h = Harness::new(f.params.clone(), f.test.clone());
        let run = h.run_scenario(&script, policy, mode, &emulated()).unwrap();
        check_report_invariants(&run.trace, &run.report);
        prop_assert_eq!(run.report.counts.submitted, run.trace.submitted);
        prop_assert_eq!(from_json_lines(&to_json_lines(&run.report)).unwrap(), run.report);
        if policy == Policy::Static && script.events.iter().any(|e| matches!(e.action, Action::Kill(_))) {
            let first_kill = script.events.iter().find(|e| matches!(e.action, Action::Kill(_))).unwrap().t_ms as f64;
            // Only results already on the wire may still arrive.
            let late = run.trace.answers.iter().filter(|a| a.at_ms > first_kill + 50.0).count();
            prop_assert_eq!(late, 0);
        }
    }
}
