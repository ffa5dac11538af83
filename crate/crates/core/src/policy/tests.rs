use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::ids::{PartyId, StreamId};
use crate::secure_agg::IdentityRegistry;
use crate::token::ElementDirective;

const MEDICAL: &str = r#"
name: medical_sensor
metadata:
  - name: region
    type: string
attributes:
  - name: heart_rate
    aggregates: [sum, count, avg, var]
    options:
      - kind: aggregate
        min_population: 100
        min_window: 1h
      - kind: dp-aggregate
        epsilon: 1.0
        min_population: 50
      - kind: stream-aggregate
        min_window: 10min
      - kind: private
  - name: heart_rate_variability
    aggregates: [avg]
    options:
      - kind: aggregate
        min_population: 10
      - kind: private
"#;

fn medical() -> StreamSchema {
    parse_schema(MEDICAL).unwrap()
}

fn public_key(i: u64) -> [u8; 32] {
    let mut pk = [0u8; 32];
    pk[..8].copy_from_slice(&i.to_be_bytes());
    pk
}

fn owner(i: u64) -> PartyId {
    PartyId::from_public_key(&public_key(i))
}

fn annotation(i: u64, region: &str, age: i64, hr: OptionKind) -> StreamAnnotation {
    StreamAnnotation {
        stream_id: StreamId::new(format!("s{i:05}")),
        schema: "medical_sensor".into(),
        owner: owner(i),
        selected: BTreeMap::from([("heart_rate".into(), hr)]),
        metadata: BTreeMap::from([
            ("region".into(), MetadataValue::String(region.into())),
        ])
        .into_iter()
        .chain(std::iter::once(("age".into(), MetadataValue::Int(age))))
        .collect(),
    }
}

/// Medical schema plus an `age` metadata attribute.
fn medical_with_age() -> StreamSchema {
    let mut s = medical();
    s.metadata.push(MetadataAttribute {
        name: "age".into(),
        ty: MetadataType::Int,
    });
    s
}

fn registry_for(anns: &[StreamAnnotation]) -> IdentityRegistry {
    // test owners are owner(i) for i below 2000
    let mut reg = IdentityRegistry::new();
    let owners: std::collections::BTreeSet<_> = anns.iter().map(|a| a.owner).collect();
    for i in 0..2000 {
        if owners.contains(&owner(i)) {
            reg.register(public_key(i));
        }
    }
    reg
}

fn hourly_avg(dp: Option<f64>, cap: u64) -> Query {
    Query {
        name: "senior_hr".into(),
        schema: "medical_sensor".into(),
        select: vec![Selection {
            attribute: "heart_rate".into(),
            function: AggregateFunction::Avg,
            bucket_width: None,
        }],
        filter: vec![
            Predicate::eq("region", MetadataValue::String("California".into())),
            Predicate::range("age", 65.0, 120.0),
        ],
        window: 3_600_000,
        max_population: cap,
        dp: dp.map(|epsilon| DpRequest { epsilon }),
        scope: Scope::Population,
    }
}

#[test]
fn medical_schema_parses() {
    let s = medical();
    assert_eq!(s.attributes.len(), 2);
    assert_eq!(s.metadata.len(), 1);
    assert_eq!(s.attributes[0].encoding(), crate::encoding::EncodingSpec::variance());
    assert_eq!(s.attributes[1].encoding(), crate::encoding::EncodingSpec::sum_count());
    assert_eq!(s.event_width(), 5);
    assert_eq!(s.attributes[0].option(OptionKind::Aggregate).unwrap().min_window, 3_600_000);
    assert_eq!(s.attributes[0].option(OptionKind::StreamAggregate).unwrap().min_window, 600_000);
}

#[test]
fn schema_errors() {
    let bad_option = MEDICAL.replace("kind: stream-aggregate", "kind: sometimes");
    assert!(matches!(parse_schema(&bad_option), Err(PolicyError::Parse(_))));
    let no_budget = MEDICAL.replace("        epsilon: 1.0\n", "");
    assert!(matches!(parse_schema(&no_budget), Err(PolicyError::InvalidSchema(_))));
    let dup = MEDICAL.replace("name: heart_rate_variability", "name: heart_rate");
    assert!(matches!(parse_schema(&dup), Err(PolicyError::InvalidSchema(_))));
    assert!(matches!(
        parse_schema("name: x\nattributes: []\n"),
        Err(PolicyError::InvalidSchema(_))
    ));
    let hist_without_encoding = "name: x\nattributes:\n  - name: a\n    aggregates: [median]\n    options: [{kind: aggregate}]\n";
    assert!(matches!(parse_schema(hist_without_encoding), Err(PolicyError::InvalidSchema(_))));
}

#[test]
fn private_only_attribute_is_valid_but_never_planned() {
    let text = "name: x\nattributes:\n  - name: a\n    aggregates: [sum]\n    options: [{kind: private}]\n";
    let schema = parse_schema(text).unwrap();
    let anns: Vec<_> = (0..5)
        .map(|i| StreamAnnotation {
            stream_id: StreamId::new(format!("p{i}")),
            schema: "x".into(),
            owner: owner(i),
            selected: BTreeMap::from([("a".into(), OptionKind::Private)]),
            metadata: BTreeMap::new(),
        })
        .collect();
    let q = Query {
        name: "q".into(),
        schema: "x".into(),
        select: vec![Selection {
            attribute: "a".into(),
            function: AggregateFunction::Sum,
            bucket_width: None,
        }],
        filter: vec![],
        window: 1000,
        max_population: 10,
        dp: None,
        scope: Scope::Population,
    };
    let err = QueryPlanner::default().plan_query(&q, &schema, &anns, 0).unwrap_err();
    assert!(matches!(err, PolicyError::Rejected(Refusal::Private { .. })));
}

#[test]
fn query_yaml_parses() {
    let schema = medical_with_age();
    let text = r#"
name: senior_hr
schema: medical_sensor
select:
  - attribute: heart_rate
    function: avg
where:
  - attribute: region
    eq: California
  - attribute: age
    range: [65, 120]
window: 1h
max_population: 1000
"#;
    let q = parse_query(text, &schema).unwrap();
    assert_eq!(q, hourly_avg(None, 1000));
    let bad = text.replace("window: 1h", "window: 0");
    assert!(parse_query(&bad, &schema).is_err());
    let bad = text.replace("function: avg", "function: median");
    assert!(parse_query(&bad, &schema).is_err());
}

fn population_fixture() -> Vec<StreamAnnotation> {
    // 1200 streams; 800 are seniors in California
    (0..1200)
        .map(|i| {
            let (region, age) = match i % 3 {
                0 | 1 => ("California", 65 + (i % 30) as i64),
                _ => ("Oregon", 70),
            };
            annotation(i, region, age, OptionKind::Aggregate)
        })
        .collect()
}

#[test]
fn population_plan_with_eight_hundred_members() {
    let schema = medical_with_age();
    let anns = population_fixture();
    let planner = QueryPlanner::default();
    let plans = planner.plan_query(&hourly_avg(None, 1000), &schema, &anns, 0).unwrap();
    assert_eq!(plans.len(), 1);
    let plan = &plans[0];
    assert_eq!(plan.population(), 800);
    assert_eq!(plan.window, 3_600_000);
    assert_eq!(
        plan.chain,
        vec![
            Operation::WindowAggregate { window: 3_600_000 },
            Operation::CrossStreamAggregate
        ]
    );
    // avg releases sum and count; sum of squares and the other attribute stay withheld
    use ElementDirective::*;
    assert_eq!(plan.directives, vec![Release, Withhold, Release, Withhold, Withhold]);
    assert_eq!(plan.compute_id(), plan.id);
    assert_eq!(plan.fault_tolerance, 80);

    // every controller accepts
    let reg = registry_for(&anns);
    for a in anns.iter().filter(|a| plan.stream_ids().any(|s| *s == a.stream_id)) {
        let mut c = ControllerPolicy::new(a.owner, PlannerConfig::default());
        c.annotate(a.clone());
        assert_eq!(c.verify_plan(plan, &schema, &reg), Verdict::Accept);
    }
}

#[test]
fn cap_selects_by_stream_hash() {
    let schema = medical_with_age();
    let anns = population_fixture();
    let planner = QueryPlanner::default();
    let plan = &planner.plan_query(&hourly_avg(None, 500), &schema, &anns, 0).unwrap()[0];
    assert_eq!(plan.population(), 500);
    let mut eligible: Vec<_> = anns.iter().filter(|a| a.metadata["region"] == MetadataValue::String("California".into())).collect();
    eligible.sort_by_key(|a| a.stream_id.digest());
    let mut expected: Vec<_> = eligible[..500].iter().map(|a| a.stream_id.clone()).collect();
    expected.sort();
    assert_eq!(plan.stream_ids().cloned().collect::<Vec<_>>(), expected);
}

#[test]
fn small_population_is_rejected_and_refused() {
    let mut schema = medical_with_age();
    schema.attributes[0].options[0].min_population = 5;
    let anns: Vec<_> = (0..3).map(|i| annotation(i, "California", 70, OptionKind::Aggregate)).collect();
    let q = hourly_avg(None, 1000);
    let err = QueryPlanner::default().plan_query(&q, &schema, &anns, 0).unwrap_err();
    assert_eq!(
        err,
        PolicyError::Rejected(Refusal::MinPopulation {
            required: 5,
            population: 3
        })
    );
    // a manager forcing the plan anyway is refused by the controllers
    let planner = QueryPlanner::default();
    let refs: Vec<_> = anns.iter().collect();
    let forced = planner.build_plan(&q, &schema, &refs, 1, 0);
    let reg = registry_for(&anns);
    let mut c = ControllerPolicy::new(anns[0].owner, PlannerConfig::default());
    c.annotate(anns[0].clone());
    assert_eq!(
        c.verify_plan(&forced, &schema, &reg),
        Verdict::Refuse(Refusal::MinPopulation {
            required: 5,
            population: 3
        })
    );
}

#[test]
fn private_streams_are_excluded() {
    let schema = medical_with_age();
    let mut anns: Vec<_> = (0..150).map(|i| annotation(i, "California", 70, OptionKind::Aggregate)).collect();
    anns.extend((150..160).map(|i| annotation(i, "California", 70, OptionKind::Private)));
    let plan = &QueryPlanner::default().plan_query(&hourly_avg(None, 1000), &schema, &anns, 0).unwrap()[0];
    assert_eq!(plan.population(), 150);
    let all_private: Vec<_> = (0..10).map(|i| annotation(i, "California", 70, OptionKind::Private)).collect();
    assert!(matches!(
        QueryPlanner::default().plan_query(&hourly_avg(None, 1000), &schema, &all_private, 0),
        Err(PolicyError::Rejected(Refusal::Private { .. }))
    ));
}

#[test]
fn window_below_min_window_rejects() {
    let schema = medical_with_age();
    let anns: Vec<_> = (0..150).map(|i| annotation(i, "California", 70, OptionKind::Aggregate)).collect();
    let mut q = hourly_avg(None, 1000);
    q.window = 60_000;
    assert!(matches!(
        QueryPlanner::default().plan_query(&q, &schema, &anns, 0),
        Err(PolicyError::Rejected(Refusal::MinWindow { .. }))
    ));
}

#[test]
fn no_match_rejects() {
    let schema = medical_with_age();
    let anns: Vec<_> = (0..10).map(|i| annotation(i, "Oregon", 70, OptionKind::Aggregate)).collect();
    assert_eq!(
        QueryPlanner::default().plan_query(&hourly_avg(None, 1000), &schema, &anns, 0),
        Err(PolicyError::Rejected(Refusal::NoMatchingStreams))
    );
}

#[test]
fn reservation_lifecycle() {
    let schema = medical_with_age();
    let anns: Vec<_> = (0..150).map(|i| annotation(i, "California", 70, OptionKind::Aggregate)).collect();
    let planner = QueryPlanner::default();
    let q = hourly_avg(None, 1000);
    let plan = planner.plan_query(&q, &schema, &anns, 0).unwrap().remove(0);
    assert!(matches!(
        planner.plan_query(&q, &schema, &anns, 0),
        Err(PolicyError::Rejected(Refusal::Reserved { .. }))
    ));
    planner.release_reservation(plan.id).unwrap();
    assert!(planner.plan_query(&q, &schema, &anns, 0).is_ok());
    // double release is a no-op, unknown ids are errors
    planner.release_reservation(plan.id).unwrap();
    assert!(matches!(
        planner.release_reservation(PlanId([7; 32])),
        Err(PolicyError::UnknownPlan(_))
    ));
}

#[test]
fn reservations_expire_after_max_lifetime() {
    let schema = medical_with_age();
    let anns: Vec<_> = (0..150).map(|i| annotation(i, "California", 70, OptionKind::Aggregate)).collect();
    let planner = QueryPlanner::new(PlannerConfig {
        max_lifetime_ms: Some(1000),
        ..Default::default()
    });
    let q = hourly_avg(None, 1000);
    planner.plan_query(&q, &schema, &anns, 0).unwrap();
    assert!(planner.plan_query(&q, &schema, &anns, 999).is_err());
    assert!(planner.plan_query(&q, &schema, &anns, 1000).is_ok());
}

#[test]
fn dp_plans_share_budget() {
    let schema = medical_with_age();
    let anns: Vec<_> = (0..60).map(|i| annotation(i, "California", 70, OptionKind::DpAggregate)).collect();
    let planner = QueryPlanner::default();
    let q = hourly_avg(Some(0.4), 1000);
    let a = planner.plan_query(&q, &schema, &anns, 0).unwrap().remove(0);
    let dp = a.dp.as_ref().unwrap();
    assert!((dp.sigma - (2.0 * (1.25f64 / 1e-6).ln()).sqrt() / 0.4).abs() < 1e-9);
    assert_eq!(dp.honest_fraction, 0.5);
    planner.plan_query(&q, &schema, &anns, 0).unwrap();
    // 0.8 used of 1.0
    assert!(matches!(
        planner.plan_query(&q, &schema, &anns, 0),
        Err(PolicyError::Rejected(Refusal::Budget { .. }))
    ));
    // a non-noised query cannot use dp-aggregate streams at all
    assert!(matches!(
        planner.plan_query(&hourly_avg(None, 1000), &schema, &anns, 0),
        Err(PolicyError::Rejected(_))
    ));
    planner.release_reservation(a.id).unwrap();
    assert!(planner.plan_query(&q, &schema, &anns, 0).is_ok());
}

#[test]
fn controller_accepts_dp_plan_with_budget() {
    let schema = medical_with_age();
    let anns: Vec<_> = (0..60).map(|i| annotation(i, "California", 70, OptionKind::DpAggregate)).collect();
    let reg = registry_for(&anns);
    let planner = QueryPlanner::default();
    let mut c = ControllerPolicy::new(anns[0].owner, PlannerConfig::default());
    c.annotate(anns[0].clone());
    for _ in 0..2 {
        let plan = planner.plan_query(&hourly_avg(Some(0.5), 1000), &schema, &anns, 0).unwrap().remove(0);
        assert_eq!(c.accept(&plan, &schema, &reg), Verdict::Accept);
    }
    // planner refuses a third; a forced plan is refused by the controller
    let q = hourly_avg(Some(0.5), 1000);
    let refs: Vec<_> = anns.iter().collect();
    let forced = planner.build_plan(&q, &schema, &refs, 99, 0);
    assert!(matches!(c.verify_plan(&forced, &schema, &reg), Verdict::Refuse(Refusal::Budget { .. })));
}

#[test]
fn controller_refuses_tampering() {
    let schema = medical_with_age();
    let anns: Vec<_> = (0..150).map(|i| annotation(i, "California", 70, OptionKind::Aggregate)).collect();
    let reg = registry_for(&anns);
    let plan = QueryPlanner::default().plan_query(&hourly_avg(None, 1000), &schema, &anns, 0).unwrap().remove(0);
    let mut c = ControllerPolicy::new(anns[0].owner, PlannerConfig::default());
    c.annotate(anns[0].clone());

    let mut t = plan.clone();
    t.directives[1] = ElementDirective::Release;
    t.id = t.compute_id();
    assert!(matches!(c.verify_plan(&t, &schema, &reg), Verdict::Refuse(Refusal::PlanMismatch(_))));

    let mut t = plan.clone();
    t.window = 1;
    assert!(matches!(c.verify_plan(&t, &schema, &reg), Verdict::Refuse(Refusal::PlanMismatch(_))));

    let stranger = StreamAnnotation {
        owner: owner(9999),
        ..annotation(9999, "California", 70, OptionKind::Aggregate)
    };
    let mut with_stranger: Vec<_> = anns.clone();
    with_stranger.push(stranger.clone());
    let refs: Vec<_> = with_stranger.iter().collect();
    let t = QueryPlanner::default().build_plan(&hourly_avg(None, 1000), &schema, &refs, 1, 0);
    assert_eq!(
        c.verify_plan(&t, &schema, &reg),
        Verdict::Refuse(Refusal::UnknownIdentity(stranger.owner))
    );
}

#[test]
fn per_stream_scope_yields_single_member_plans() {
    let schema = medical_with_age();
    let anns: Vec<_> = (0..4).map(|i| annotation(i, "California", 70, OptionKind::StreamAggregate)).collect();
    let mut q = hourly_avg(None, 10);
    q.scope = Scope::PerStream;
    let plans = QueryPlanner::default().plan_query(&q, &schema, &anns, 0).unwrap();
    assert_eq!(plans.len(), 4);
    for p in &plans {
        assert_eq!(p.population(), 1);
        assert_eq!(p.chain, vec![Operation::WindowAggregate { window: 3_600_000 }]);
    }
    // stream-aggregate streams never join population plans
    assert!(QueryPlanner::default().plan_query(&hourly_avg(None, 10), &schema, &anns, 0).is_err());
}

#[test]
fn histogram_buckets_respect_max_resolution() {
    let text = r#"
name: fitness
attributes:
  - name: altitude
    aggregates: [histogram, median]
    encoding: {kind: histogram, domain_min: 0, domain_max: 100, bin_width: 1}
    options:
      - kind: aggregate
        max_resolution: 5
"#;
    let schema = parse_schema(text).unwrap();
    let anns: Vec<_> = (0..3)
        .map(|i| StreamAnnotation {
            stream_id: StreamId::new(format!("f{i}")),
            schema: "fitness".into(),
            owner: owner(i),
            selected: BTreeMap::from([("altitude".into(), OptionKind::Aggregate)]),
            metadata: BTreeMap::new(),
        })
        .collect();
    let mut q = Query {
        name: "alt".into(),
        schema: "fitness".into(),
        select: vec![Selection {
            attribute: "altitude".into(),
            function: AggregateFunction::Histogram,
            bucket_width: Some(5.0),
        }],
        filter: vec![],
        window: 10_000,
        max_population: 10,
        dp: None,
        scope: Scope::Population,
    };
    let plan = QueryPlanner::default().plan_query(&q, &schema, &anns, 0).unwrap().remove(0);
    assert_eq!(plan.outputs[0].slot_len, 20);
    assert_eq!(plan.outputs[0].spec.width(), 20);
    assert!(matches!(plan.directives[4], ElementDirective::Merge(0)));
    assert!(matches!(plan.directives[5], ElementDirective::Merge(1)));
    q.select[0].bucket_width = Some(2.0);
    assert!(matches!(
        QueryPlanner::default().plan_query(&q, &schema, &anns, 0),
        Err(PolicyError::Rejected(Refusal::MaxResolution { .. }))
    ));
    q.select[0].bucket_width = Some(3.0);
    assert!(matches!(
        QueryPlanner::default().plan_query(&q, &schema, &anns, 0),
        Err(PolicyError::InvalidQuery(_))
    ));
}

#[test]
fn concurrent_queries_get_one_reservation() {
    let schema = Arc::new(medical_with_age());
    let anns: Arc<Vec<_>> = Arc::new((0..150).map(|i| annotation(i, "California", 70, OptionKind::Aggregate)).collect());
    let planner = Arc::new(QueryPlanner::default());
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let (s, a, p) = (schema.clone(), anns.clone(), planner.clone());
            std::thread::spawn(move || p.plan_query(&hourly_avg(None, 1000), &s, &a, 0).is_ok())
        })
        .collect();
    let wins = handles.into_iter().map(|h| h.join().unwrap()).filter(|ok| *ok).count();
    assert_eq!(wins, 1);
    assert_eq!(planner.active_plans().len(), 1);
}

#[test]
fn annotation_yaml_round_trip() {
    let schema = medical_with_age();
    let a = annotation(3, "California", 70, OptionKind::DpAggregate);
    let text = serde_yaml::to_string(&a).unwrap();
    assert_eq!(parse_annotation(&text, &schema).unwrap(), a);
    let mut bad = a.clone();
    bad.selected.insert("heart_rate_variability".into(), OptionKind::DpAggregate);
    assert!(bad.validate(&schema).is_err());
}

// Randomized agreement between planner and controllers.

#[derive(Clone, Debug)]
struct Fixture {
    min_pop: [u64; 2],
    min_window: [u64; 2],
    budget: f64,
    streams: Vec<(u8, [u8; 2], u8)>,
    queries: Vec<QuerySeed>,
}

/// Attribute, function, window, population cap, epsilon, per-stream, filtered.
type QuerySeed = (u8, u8, u64, u64, Option<f64>, bool, bool);

fn fixture() -> impl Strategy<Value = Fixture> {
    (
        [0u64..8, 0u64..8],
        [0u64..3, 0u64..3],
        0.5f64..2.0,
        prop::collection::vec((0u8..4, [0u8..5, 0u8..5], 0u8..3), 1..25),
        prop::collection::vec(
            (0u8..2, 0u8..4, 1u64..4, 1u64..30, prop::option::of(0.2f64..1.0), any::<bool>(), any::<bool>()),
            1..6,
        ),
    )
        .prop_map(|(min_pop, min_window, budget, streams, queries)| Fixture {
            min_pop,
            min_window,
            budget,
            streams,
            queries,
        })
}

const KINDS: [OptionKind; 5] = [
    OptionKind::Private,
    OptionKind::Public,
    OptionKind::StreamAggregate,
    OptionKind::Aggregate,
    OptionKind::DpAggregate,
];

fn random_schema(f: &Fixture) -> StreamSchema {
    let attr = |name: &str, i: usize| StreamAttribute {
        name: name.into(),
        aggregates: vec![AggregateFunction::Sum, AggregateFunction::Avg],
        encoding: None,
        options: KINDS
            .iter()
            .map(|k| PrivacyOption {
                kind: *k,
                min_population: f.min_pop[i],
                min_window: f.min_window[i] * 1000,
                epsilon: (*k == OptionKind::DpAggregate).then_some(f.budget),
                sensitivity: 1.0,
                max_resolution: None,
            })
            .collect(),
    };
    StreamSchema {
        name: "r".into(),
        metadata: vec![MetadataAttribute {
            name: "group".into(),
            ty: MetadataType::Int,
        }],
        attributes: vec![attr("a", 0), attr("b", 1)],
    }
}

fn random_annotations(f: &Fixture) -> Vec<StreamAnnotation> {
    f.streams
        .iter()
        .enumerate()
        .map(|(i, (group, opts, ctl))| StreamAnnotation {
            stream_id: StreamId::new(format!("r{i:03}")),
            schema: "r".into(),
            owner: owner(*ctl as u64),
            selected: BTreeMap::from([
                ("a".into(), KINDS[opts[0] as usize]),
                ("b".into(), KINDS[opts[1] as usize]),
            ]),
            metadata: BTreeMap::from([("group".into(), MetadataValue::Int(*group as i64))]),
        })
        .collect()
}

fn random_query(q: &(u8, u8, u64, u64, Option<f64>, bool, bool), i: usize) -> Query {
    let (attr, group, window, cap, dp, per_stream, both) = q;
    let mut select = vec![Selection {
        attribute: ["a", "b"][*attr as usize].into(),
        function: AggregateFunction::Sum,
        bucket_width: None,
    }];
    if *both {
        select.push(Selection {
            attribute: ["b", "a"][*attr as usize].into(),
            function: AggregateFunction::Avg,
            bucket_width: None,
        });
    }
    let per_stream = *per_stream && dp.is_none();
    Query {
        name: format!("q{i}"),
        schema: "r".into(),
        select,
        filter: if *group < 4 {
            vec![Predicate::eq("group", MetadataValue::Int(*group as i64))]
        } else {
            vec![]
        },
        window: window * 1000,
        max_population: *cap,
        dp: dp.map(|epsilon| DpRequest { epsilon }),
        scope: if per_stream { Scope::PerStream } else { Scope::Population },
    }
}

/// Exclusivity and budget, derived from the active plan list alone.
fn invariants_hold(plans: &[TransformationPlan], schema: &StreamSchema, anns: &[StreamAnnotation]) -> bool {
    let mut exclusive: BTreeMap<(StreamId, String), usize> = BTreeMap::new();
    let mut noised: BTreeMap<(StreamId, String), f64> = BTreeMap::new();
    for p in plans {
        for s in p.stream_ids() {
            for sel in &p.selections {
                let key = (s.clone(), sel.attribute.clone());
                match &p.dp {
                    None => *exclusive.entry(key).or_default() += 1,
                    Some(dp) => *noised.entry(key).or_default() += dp.epsilon,
                }
            }
        }
    }
    let exclusive_ok = exclusive
        .iter()
        .all(|(k, n)| *n == 1 && !noised.contains_key(k));
    let budget_ok = noised.iter().all(|((s, attr), eps)| {
        let ann = anns.iter().find(|a| a.stream_id == *s).unwrap();
        match ann.selected_option(schema, attr) {
            Some(o) if o.kind == OptionKind::DpAggregate => *eps <= o.epsilon.unwrap() + 1e-9,
            _ => true,
        }
    });
    exclusive_ok && budget_ok
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn planner_and_controllers_agree(f in fixture()) {
        prop_assert!(check_agreement(&f).is_ok());
    }
}

/// Runs the fixture's queries in order. Every emitted plan must be accepted
/// by every involved controller; every rejected query's naive plan must be
/// refused by at least one of them. Returns the number of plans emitted.
pub(crate) fn check_agreement_fixture(
    schema: &StreamSchema,
    anns: &[StreamAnnotation],
    queries: &[Query],
    release_every: usize,
) -> Result<usize, String> {
    let reg = registry_for(anns);
    let planner = QueryPlanner::default();
    let mut controllers: BTreeMap<PartyId, ControllerPolicy> = BTreeMap::new();
    for a in anns {
        controllers
            .entry(a.owner)
            .or_insert_with(|| ControllerPolicy::new(a.owner, PlannerConfig::default()))
            .annotate(a.clone());
    }
    let mut emitted = 0;
    for (i, q) in queries.iter().enumerate() {
        match planner.plan_query(q, schema, anns, 0) {
            Ok(plans) => {
                for plan in &plans {
                    for owner in &plan.required_controllers {
                        let v = controllers.get_mut(owner).unwrap().accept(plan, schema, &reg);
                        if !v.is_accept() {
                            return Err(format!("query {i}: controller refused emitted plan: {v:?}"));
                        }
                    }
                }
                emitted += plans.len();
            }
            Err(PolicyError::Rejected(_)) => {
                let matching: Vec<&StreamAnnotation> = {
                    let mut m: Vec<_> = anns.iter().filter(|a| q.filter.iter().all(|p| p.matches(a))).collect();
                    m.sort_by_key(|a| a.stream_id.digest());
                    m.truncate(q.max_population as usize);
                    m
                };
                let naive: Vec<TransformationPlan> = match q.scope {
                    Scope::Population if !matching.is_empty() => vec![planner.build_plan(q, schema, &matching, 10_000 + i as u64, 0)],
                    Scope::Population => vec![],
                    Scope::PerStream => matching
                        .iter()
                        .map(|a| planner.build_plan(q, schema, &[*a], 10_000 + i as u64, 0))
                        .collect(),
                };
                for plan in naive {
                    let refused = plan
                        .required_controllers
                        .iter()
                        .any(|o| !controllers[o].verify_plan(&plan, schema, &reg).is_accept());
                    if !refused {
                        return Err(format!("query {i}: rejected but naive plan accepted by all"));
                    }
                }
            }
            Err(e) => return Err(format!("query {i}: {e}")),
        }
        if !invariants_hold(&planner.active_plans(), schema, anns) {
            return Err(format!("query {i}: invariant violated"));
        }
        if release_every > 0 && i % release_every == release_every - 1 {
            if let Some(p) = planner.active_plans().first() {
                planner.release_reservation(p.id).unwrap();
                for owner in &p.required_controllers {
                    controllers.get_mut(owner).unwrap().release(p.id).unwrap();
                }
            }
        }
    }
    Ok(emitted)
}

fn check_agreement(f: &Fixture) -> Result<usize, String> {
    let schema = random_schema(f);
    let anns = random_annotations(f);
    let queries: Vec<_> = f.queries.iter().enumerate().map(|(i, q)| random_query(q, i)).collect();
    check_agreement_fixture(&schema, &anns, &queries, 2)
}
