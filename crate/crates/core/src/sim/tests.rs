use super::*;
use crate::policy::{parse_query, parse_schema, Query, StreamSchema};

const COUNTER: &str = r#"
name: counter
attributes:
  - name: x
    aggregates: [sum, count, avg]
    options:
      - kind: aggregate
        min_population: 2
"#;

fn counter() -> StreamSchema {
    parse_schema(COUNTER).unwrap()
}

fn public_counter() -> StreamSchema {
    parse_schema(&COUNTER.replace("kind: aggregate\n        min_population: 2", "kind: public")).unwrap()
}

fn sum_query(schema: &StreamSchema) -> Query {
    let text = r#"
name: total
schema: counter
select:
  - attribute: x
    function: sum
window: 10s
max_population: 100000
"#;
    parse_query(text, schema).unwrap()
}

fn fixed(producers: usize, values: &[f64]) -> SimConfig {
    SimConfig {
        producers,
        values: Some(values.to_vec()),
        windows: 4,
        ..SimConfig::default()
    }
}

fn sums(report: &SimReport) -> Vec<Option<f64>> {
    report
        .windows
        .iter()
        .map(|w| w.outcomes[0].fields.first().and_then(|f| f.stats.sum))
        .collect()
}

#[test]
fn single_producer_sums_its_values() {
    let schema = public_counter();
    let values: Vec<f64> = (1..=10).map(f64::from).collect();
    let report = run_scenario(&fixed(1, &values), &schema, &[sum_query(&schema)]).unwrap();
    assert_eq!(report.windows.len(), 4);
    assert_eq!(report.plans[0].protocol, None);
    for w in &report.windows {
        assert!(w.succeeded(), "{:?}", w.outcomes[0].status);
        assert!(w.shadow_equal());
        assert_eq!(w.members, 1);
    }
    assert_eq!(sums(&report), vec![Some(55.0); 4]);
}

#[test]
fn secure_aggregation_over_each_protocol() {
    let schema = counter();
    for protocol in [ProtocolChoice::Clique, ProtocolChoice::Dream, ProtocolChoice::Zeph] {
        let cfg = SimConfig {
            protocol,
            ..fixed(12, &[1.0, 2.0, 3.0])
        };
        let report = run_scenario(&cfg, &schema, &[sum_query(&schema)]).unwrap();
        assert_eq!(report.plans[0].controllers, 12);
        assert!(report.plans[0].protocol.is_some());
        assert_eq!(report.succeeded(), 4, "{protocol:?}");
        assert!(report.all_shadow_equal());
        assert_eq!(sums(&report), vec![Some(72.0); 4], "{protocol:?}");
    }
}

#[test]
fn shared_controllers_hold_several_streams() {
    let schema = counter();
    let cfg = SimConfig {
        controllers: 4,
        ..fixed(10, &[2.0])
    };
    let report = run_scenario(&cfg, &schema, &[sum_query(&schema)]).unwrap();
    assert_eq!(report.plans[0].controllers, 4);
    assert_eq!(sums(&report), vec![Some(20.0); 4]);
}

#[test]
fn controller_dropout_is_tolerated() {
    let schema = counter();
    let cfg = SimConfig {
        dropout: 0.1,
        fault_tolerance: 0.3,
        windows: 10,
        ..fixed(30, &[1.0, 1.0])
    };
    let report = run_scenario(&cfg, &schema, &[sum_query(&schema)]).unwrap();
    assert_eq!(report.succeeded(), 10);
    assert!(report.all_shadow_equal());
    let dropped: usize = report.windows.iter().map(|w| 30 - w.members).sum();
    assert!(dropped > 0, "some controller should have dropped");
    for w in &report.windows {
        let o = &w.outcomes[0];
        assert_eq!(o.fields[0].stats.sum, Some(2.0 * o.streams as f64));
    }
}

#[test]
fn dropout_beyond_tolerance_fails_the_window() {
    let schema = counter();
    let cfg = SimConfig {
        dropout: 0.5,
        fault_tolerance: 0.05,
        ..fixed(20, &[1.0])
    };
    let report = run_scenario(&cfg, &schema, &[sum_query(&schema)]).unwrap();
    assert!(report
        .windows
        .iter()
        .all(|w| matches!(w.outcomes[0].status, PlanStatus::Quorum { .. })));

    let cfg = SimConfig { dropout: 1.0, ..cfg };
    let report = run_scenario(&cfg, &schema, &[sum_query(&schema)]).unwrap();
    assert!(report.windows.iter().all(|w| w.outcomes[0].status == PlanStatus::NoMembers));
}

#[test]
fn lost_tokens_are_recovered_by_retries() {
    let schema = counter();
    let mut cfg = SimConfig {
        fault_tolerance: 0.5,
        windows: 12,
        ..fixed(16, &[3.0])
    };
    cfg.transport.drop_prob = 0.03;
    let report = run_scenario(&cfg, &schema, &[sum_query(&schema)]).unwrap();
    assert!(report.all_shadow_equal());
    assert!(report.succeeded() >= 6, "{}", report.succeeded());
    for w in report.windows.iter().filter(|w| w.succeeded()) {
        let o = &w.outcomes[0];
        assert_eq!(o.fields[0].stats.sum, Some(3.0 * o.streams as f64));
    }
}

#[test]
fn runs_are_deterministic() {
    let schema = counter();
    let q = [sum_query(&schema)];
    let cfg = SimConfig {
        producers: 15,
        windows: 3,
        dropout: 0.1,
        fault_tolerance: 0.3,
        seed: 7,
        ..SimConfig::default()
    };
    let a = run_scenario(&cfg, &schema, &q).unwrap();
    let b = run_scenario(&cfg, &schema, &q).unwrap();
    let par = run_scenario(&SimConfig { parallel: true, ..cfg.clone() }, &schema, &q).unwrap();
    let other = run_scenario(&SimConfig { seed: 8, ..cfg.clone() }, &schema, &q).unwrap();
    assert_eq!(a.fingerprint(), b.fingerprint());
    assert_eq!(a.fingerprint(), par.fingerprint());
    assert_ne!(a.fingerprint(), other.fingerprint());
}

#[test]
fn message_and_byte_counters_add_up() {
    let schema = counter();
    let mut cfg = SimConfig {
        producers: 12,
        windows: 3,
        ..SimConfig::default()
    };
    cfg.transport.drop_prob = 0.02;
    let report = run_scenario(&cfg, &schema, &[sum_query(&schema)]).unwrap();
    let totals = report.summary().totals;
    let sent: u64 = report.links.values().map(|l| l.sent).sum();
    assert_eq!(totals.messages, sent);
    for l in report.links.values() {
        assert_eq!(l.sent, l.received + l.dropped);
    }
    let p = &report.links[LinkClass::ProducerToServer.name()];
    assert_eq!(p.dropped, 0);
    assert_eq!(totals.bytes_producer, p.bytes_sent);
    assert_eq!(totals.bytes_server, report.links[LinkClass::ServerToController.name()].bytes_sent);
    assert_eq!(totals.bytes_controller, report.links[LinkClass::ControllerToServer.name()].bytes_sent);
    assert!(totals.prf_calls > 0);
}

#[test]
fn producer_events_cost_eight_bytes_per_element() {
    let schema = counter();
    let cfg = fixed(3, &[1.0, 2.0]);
    let report = run_scenario(&cfg, &schema, &[sum_query(&schema)]).unwrap();
    // two values plus the border event per producer and window
    let per_window = 3 * 3 * event_payload_bytes(schema.event_width()) as u64;
    for w in &report.windows {
        assert_eq!(w.counters.bytes_producer, per_window);
    }
    assert_eq!(report.bandwidth.producer_event_bytes, 16 + 8 * 2);
}

#[test]
fn offline_producers_are_left_out() {
    let schema = counter();
    let cfg = SimConfig {
        producer_dropout: 0.2,
        fault_tolerance: 0.5,
        windows: 6,
        ..fixed(20, &[5.0])
    };
    let report = run_scenario(&cfg, &schema, &[sum_query(&schema)]).unwrap();
    assert!(report.windows.iter().any(|w| w.members < 20));
    for w in &report.windows {
        assert!(w.succeeded());
        assert_eq!(w.outcomes[0].fields[0].stats.sum, Some(5.0 * w.members as f64));
    }
}

#[test]
fn csv_has_one_row_per_window() {
    let schema = counter();
    let report = run_scenario(&fixed(2, &[1.0]), &schema, &[sum_query(&schema)]).unwrap();
    let mut out = Vec::new();
    report.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], CSV_COLUMNS.join(","));
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("0,ok,2,"));
}

#[test]
fn presets_run_end_to_end() {
    for name in PRESET_NAMES {
        let mut s = scenario_presets(name).unwrap();
        s.config.producers = 60;
        s.config.windows = 2;
        s.config.event_rate_hz = 1.0;
        let report = run_preset(&s).unwrap();
        assert_eq!(report.succeeded(), 2, "{name}");
        assert!(report.all_shadow_equal(), "{name}");
    }
}

#[test]
fn noised_plans_match_the_noised_shadow() {
    let mut s = scenario_presets("web_analytics").unwrap();
    s.config.producers = 60;
    s.config.windows = 2;
    let report = run_preset(&s).unwrap();
    assert!(report.plans[0].dp_sigma.is_some());
    assert_eq!(report.succeeded(), 2);
    assert!(report.all_shadow_equal());
}

#[test]
fn invalid_configs_are_rejected() {
    let schema = counter();
    let q = [sum_query(&schema)];
    let mut cfg = SimConfig::default();
    cfg.transport.latency_max_ms = 2_000.0;
    assert!(matches!(run_scenario(&cfg, &schema, &q), Err(SimError::InvalidConfig(_))));
    let cfg = SimConfig {
        dropout: 1.5,
        ..SimConfig::default()
    };
    assert!(matches!(run_scenario(&cfg, &schema, &q), Err(SimError::InvalidConfig(_))));
}
