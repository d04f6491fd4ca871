//! Full runs through the harness: setup, measurement, accounting and the
//! results CSV.

use sdiiot_core::harness::{
    read_results_csv, result_rows, run_replication, run_scenario, sweep, write_results_csv, Mode, RunOptions, Scenario,
    Summary, SweepKind, RESULTS_HEADER,
};
use sdiiot_core::netsim::BackgroundKind;
use sdiiot_core::FlowClass;

fn short(duration_s: f64) -> Scenario {
    Scenario {
        duration_s,
        replications: 1,
        seed: 11,
        ..Scenario::default()
    }
}

fn csv_of(s: &Scenario) -> Vec<u8> {
    let mut buf = Vec::new();
    write_results_csv(&result_rows(&run_scenario(s).unwrap()), &mut buf).unwrap();
    buf
}

#[test]
fn zero_duration_reports_zeros() {
    let r = run_replication(&short(0.0), 0, &RunOptions::default()).unwrap();
    for st in &r.stats {
        assert_eq!((st.sent, st.delivered, st.dropped), (0, 0, 0));
        assert_eq!(st.mean_us, 0.0);
        assert_eq!(st.success_rate, 0.0);
    }
}

#[test]
fn unloaded_run_delivers_everything() {
    let r = run_replication(&short(1.0), 0, &RunOptions::default()).unwrap();
    assert_eq!(r.observations_at_start, 72);
    assert_eq!(r.observations_expected, 72);
    let coap = r.stats_for(FlowClass::CoapPv);
    // per site, 10 ms slots: motors at offsets 0..50 ms every 50 ms (the
    // one at 50 ms fits 19 publishes into the second), pressure at 60..110
    // ms every 500 ms, temperature at 120..170 ms every second
    assert_eq!(coap.sent, 4 * ((5 * 20 + 19) + 6 * 2 + 6));
    assert_eq!(coap.success_rate, 1.0);
    let ws = r.stats_for(FlowClass::WsReading);
    assert_eq!(ws.sent, coap.sent);
    assert_eq!(ws.delivered, ws.sent);
    assert_eq!(r.stats_for(FlowClass::Control).delivered, 4);
    assert_eq!(r.stats_for(FlowClass::Background).sent, 0);
    assert!(r.is_conserved());
    assert_eq!(r.readings_checked, ws.delivered);
    assert_eq!(r.reading_violations, 0);
    assert_eq!(r.gateway.frames + r.gateway.duplicates + r.gateway.adapter_drops, r.gateway.notifications);
}

#[test]
fn unloaded_coap_latency_matches_path() {
    let r = run_replication(&short(1.0), 0, &RunOptions::default()).unwrap();
    let coap = r.stats_for(FlowClass::CoapPv);
    // device -> switch -> gateway: two 0.1 ms hops, one 10 us forwarding
    // step, and well under a microsecond on the wire per hop
    let floor = 2.0 * 100.0 + 10.0;
    assert!(coap.p50_us >= floor && coap.p50_us < floor + 5.0, "p50 {}", coap.p50_us);
}

#[test]
fn same_seed_same_csv() {
    let mut s = short(0.5);
    s.background.n_flows = 5;
    assert_eq!(csv_of(&s), csv_of(&s));
}

#[test]
fn replications_are_independent_of_count() {
    let mut s = short(0.5);
    s.background.n_flows = 5;
    s.replications = 2;
    let two = run_scenario(&s).unwrap();
    let alone = run_replication(&s, 1, &RunOptions::default()).unwrap();
    assert_eq!(result_rows(&two[1..]), result_rows(std::slice::from_ref(&alone)));
    assert_ne!(two[0].seed, two[1].seed);
}

#[test]
fn wan_is_slower() {
    let controlled = run_replication(&short(1.0), 0, &RunOptions::default()).unwrap();
    let wan = run_replication(&short(1.0).with_mode(Mode::Wan), 0, &RunOptions::default()).unwrap();
    for c in [FlowClass::CoapPv, FlowClass::WsReading, FlowClass::Control] {
        assert!(wan.stats_for(c).mean_us > controlled.stats_for(c).mean_us, "{c:?}");
    }
    assert!(wan.is_conserved());
}

#[test]
fn security_overhead_costs_wire_time_only() {
    let plain = run_replication(&short(0.5), 0, &RunOptions::default()).unwrap();
    let mut s = short(0.5);
    s.secure = true;
    let secure = run_replication(&s, 0, &RunOptions::default()).unwrap();
    let (a, b) = (plain.stats_for(FlowClass::CoapPv), secure.stats_for(FlowClass::CoapPv));
    assert_eq!(a.sent, b.sent);
    // 29 extra bytes on two 1 Gb/s hops
    let extra = b.mean_us - a.mean_us;
    assert!(extra > 0.0 && extra < 1.0, "extra {extra}");
}

#[test]
fn trace_is_recorded_on_request() {
    let r = run_replication(&short(0.1), 0, &RunOptions { trace: true }).unwrap();
    assert!(!r.trace.is_empty());
    let quiet = run_replication(&short(0.1), 0, &RunOptions::default()).unwrap();
    assert!(quiet.trace.is_empty());
}

#[test]
fn qos_protects_sensor_traffic_under_load() {
    let mut s = short(0.5);
    s.background.n_flows = 20;
    let reports = sweep(&s, &[20], &[Mode::Qos, Mode::NoQos]).unwrap();
    let (qos, no_qos) = (&reports[0], &reports[1]);
    assert_eq!(qos.mode, Mode::Qos);
    assert_eq!(qos.stats_for(FlowClass::CoapPv).success_rate, 1.0);
    assert!(qos.stats_for(FlowClass::Background).dropped > 0);
    assert!(no_qos.stats_for(FlowClass::CoapPv).mean_us > 2.0 * qos.stats_for(FlowClass::CoapPv).mean_us);
    assert!(reports.iter().all(|r| r.is_conserved()));
}

#[test]
fn csv_roundtrip_and_summary() {
    let mut s = short(0.3);
    s.background.kind = BackgroundKind::TcpLike;
    let rows = result_rows(&sweep(&s, &[0, 10], &Mode::ALL).unwrap());
    assert_eq!(rows.len(), 2 * 3 * 4);
    let mut buf = Vec::new();
    write_results_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().next().unwrap(), RESULTS_HEADER.join(","));
    let back = read_results_csv(buf.as_slice()).unwrap();
    assert_eq!(back.len(), rows.len());
    let summary = Summary::from_rows(&back).unwrap();
    assert_eq!(summary.levels(), vec![0, 10]);
    assert_eq!(summary.modes(), vec![Mode::Qos, Mode::NoQos, Mode::Wan]);
    let checks = sdiiot_core::harness::check(&summary, SweepKind::Tcp);
    assert_eq!(checks.len(), 5);
    assert!(summary.render().contains("WS_READING"));
}

#[test]
fn invalid_scenarios_are_rejected() {
    let mut s = short(1.0);
    s.qos_enabled = true;
    s.baseline_wan = true;
    assert!(run_scenario(&s).is_err());
    assert!(Scenario::from_json(r#"{"v":1,"sites":0}"#).is_err());
    assert!(Scenario::from_json(r#"{"v":1,"bogus":1}"#).is_err());
}
