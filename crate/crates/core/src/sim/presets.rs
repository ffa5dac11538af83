//! Fixture scenarios: fitness tracking, web analytics, car maintenance.

use serde::{Deserialize, Serialize};

use super::{SimConfig, SimError};
use crate::encoding::EncodingSpec;
use crate::policy::{
    AggregateFunction as F, DpRequest, OptionKind, PrivacyOption, Query, Scope, Selection, StreamAttribute,
    StreamSchema,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub schema: StreamSchema,
    pub queries: Vec<Query>,
    pub config: SimConfig,
}

pub const PRESET_NAMES: [&str; 3] = ["fitness", "web_analytics", "car_maintenance"];

pub fn scenario_presets(name: &str) -> Result<Scenario, SimError> {
    let (schema, queries) = match name {
        "fitness" => fitness(),
        "web_analytics" | "web" => web_analytics(),
        "car_maintenance" | "car" => car_maintenance(),
        other => return Err(SimError::UnknownPreset(other.into())),
    };
    Ok(Scenario {
        name: schema.name.clone(),
        schema,
        queries,
        config: SimConfig {
            producers: 300,
            windows: 20,
            ..SimConfig::default()
        },
    })
}

fn option(kind: OptionKind, min_population: u64) -> PrivacyOption {
    PrivacyOption {
        min_population,
        ..PrivacyOption::new(kind)
    }
}

fn standard_options() -> Vec<PrivacyOption> {
    vec![
        option(OptionKind::Aggregate, 10),
        option(OptionKind::StreamAggregate, 0),
        option(OptionKind::Private, 0),
    ]
}

fn attribute(name: &str, encoding: EncodingSpec, aggregates: &[F]) -> StreamAttribute {
    StreamAttribute {
        name: name.into(),
        aggregates: aggregates.to_vec(),
        encoding: Some(encoding),
        options: standard_options(),
    }
}

fn numeric(name: &str, encoding: EncodingSpec) -> StreamAttribute {
    let aggregates: &[F] = match encoding.width() {
        1 => &[F::Sum],
        2 => &[F::Sum, F::Count, F::Avg],
        _ => &[F::Sum, F::Count, F::Avg, F::Var],
    };
    attribute(name, encoding, aggregates)
}

fn threshold(name: &str, t: f64) -> StreamAttribute {
    attribute(name, EncodingSpec::predicate_threshold(t), &[F::ThresholdSum])
}

fn binned(name: &str, encoding: EncodingSpec) -> StreamAttribute {
    attribute(name, encoding, &[F::Histogram, F::Median, F::Min, F::Max, F::Mode, F::Count])
}

fn select(attribute: &str, function: F, bucket_width: Option<f64>) -> Selection {
    Selection {
        attribute: attribute.into(),
        function,
        bucket_width,
    }
}

fn query(name: &str, schema: &StreamSchema, select: Vec<Selection>) -> Query {
    Query {
        name: name.into(),
        schema: schema.name.clone(),
        select,
        filter: vec![],
        window: 10_000,
        max_population: 100_000,
        dp: None,
        scope: Scope::Population,
    }
}

/// 18 attributes in 683 elements; altitude may only be released in 5 m
/// buckets.
fn fitness() -> (StreamSchema, Vec<Query>) {
    let mut altitude = binned("altitude", EncodingSpec::histogram(0.0, 500.0, 1.0));
    altitude.options[0].max_resolution = Some(5.0);
    let schema = StreamSchema {
        name: "fitness".into(),
        metadata: vec![],
        attributes: vec![
            numeric("heart_rate", EncodingSpec::variance()),
            altitude,
            numeric("speed", EncodingSpec::variance()),
            numeric("cadence", EncodingSpec::variance()),
            numeric("power", EncodingSpec::variance()),
            numeric("distance", EncodingSpec::sum_count()),
            numeric("calories", EncodingSpec::sum()),
            numeric("steps", EncodingSpec::sum()),
            binned("temperature", EncodingSpec::histogram(-40.0, 81.0, 1.0)),
            numeric("elevation_gain", EncodingSpec::sum()),
            binned("hr_zone", EncodingSpec::one_hot(1, 5)),
            binned("activity_type", EncodingSpec::one_hot(0, 9)),
            numeric("respiration", EncodingSpec::sum_count()),
            binned("spo2", EncodingSpec::histogram(80.0, 100.0, 1.0)),
            threshold("stress", 50.0),
            numeric("sleep_score", EncodingSpec::sum_count()),
            numeric("vo2max", EncodingSpec::sum_count()),
            numeric("battery", EncodingSpec::sum_count()),
        ],
    };
    let q = query(
        "altitude_heart_rate",
        &schema,
        vec![
            select("heart_rate", F::Avg, None),
            select("altitude", F::Histogram, Some(5.0)),
        ],
    );
    (schema, vec![q])
}

/// 24 attributes in 956 elements; the page and revenue aggregates are only
/// released with differential privacy.
fn web_analytics() -> (StreamSchema, Vec<Query>) {
    let dp_only = |mut a: StreamAttribute| {
        a.options = vec![
            PrivacyOption {
                epsilon: Some(5.0),
                sensitivity: 1.0,
                ..option(OptionKind::DpAggregate, 50)
            },
            option(OptionKind::Private, 0),
        ];
        a
    };
    let mut attributes = vec![
        dp_only(binned("page", EncodingSpec::one_hot(0, 499))),
        binned("referrer", EncodingSpec::one_hot(0, 99)),
        binned("country", EncodingSpec::one_hot(0, 199)),
        binned("browser", EncodingSpec::one_hot(0, 19)),
        binned("os", EncodingSpec::one_hot(0, 9)),
        binned("device", EncodingSpec::one_hot(0, 4)),
        binned("load_time_ms", EncodingSpec::histogram(0.0, 1000.0, 10.0)),
    ];
    for name in ["clicks", "time_on_page", "bounces", "conversions"] {
        attributes.push(numeric(name, EncodingSpec::sum_count()));
    }
    attributes.push(dp_only(numeric("revenue", EncodingSpec::sum())));
    for name in [
        "errors",
        "js_errors",
        "ad_impressions",
        "ad_clicks",
        "form_submits",
        "searches",
        "downloads",
        "video_plays",
        "shares",
        "logins",
        "cart_adds",
        "purchases",
    ] {
        attributes.push(numeric(name, EncodingSpec::sum()));
    }
    let schema = StreamSchema {
        name: "web_analytics".into(),
        metadata: vec![],
        attributes,
    };
    let mut q = query(
        "page_views_revenue",
        &schema,
        vec![select("page", F::Histogram, None), select("revenue", F::Sum, None)],
    );
    q.dp = Some(DpRequest { epsilon: 1.0 });
    (schema, vec![q])
}

/// 23 attributes in 169 elements; per-vehicle speed histograms next to
/// fleet-wide aggregates.
fn car_maintenance() -> (StreamSchema, Vec<Query>) {
    let mut attributes = vec![
        binned("speed", EncodingSpec::histogram(0.0, 200.0, 5.0)),
        binned("rpm", EncodingSpec::histogram(0.0, 8000.0, 250.0)),
        binned("engine_temp", EncodingSpec::histogram(40.0, 140.0, 2.0)),
        binned("fuel_level", EncodingSpec::histogram(0.0, 100.0, 10.0)),
        binned("gear", EncodingSpec::one_hot(0, 7)),
    ];
    for name in [
        "oil_pressure",
        "tire_pressure_fl",
        "tire_pressure_fr",
        "tire_pressure_rl",
        "tire_pressure_rr",
        "battery_voltage",
        "coolant_level",
        "throttle",
        "brake_pressure",
        "fuel_rate",
        "odometer_delta",
    ] {
        attributes.push(numeric(name, EncodingSpec::sum_count()));
    }
    for name in [
        "error_codes",
        "hard_brakes",
        "hard_accels",
        "trips",
        "idle_time",
        "distance",
        "maintenance_alerts",
    ] {
        attributes.push(numeric(name, EncodingSpec::sum()));
    }
    let schema = StreamSchema {
        name: "car_maintenance".into(),
        metadata: vec![],
        attributes,
    };
    let mut per_vehicle = query("vehicle_speed_histogram", &schema, vec![select("speed", F::Histogram, None)]);
    per_vehicle.scope = Scope::PerStream;
    let fleet = query(
        "fleet_engine_health",
        &schema,
        vec![
            select("fuel_rate", F::Avg, None),
            select("engine_temp", F::Median, None),
        ],
    );
    (schema, vec![per_vehicle, fleet])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_widths_and_attribute_counts() {
        for (name, attrs, width) in [("fitness", 18, 683), ("web_analytics", 24, 956), ("car_maintenance", 23, 169)] {
            let s = scenario_presets(name).unwrap();
            s.schema.validate().unwrap();
            assert_eq!(s.schema.attributes.len(), attrs, "{name}");
            assert_eq!(s.schema.event_width(), width, "{name}");
            for q in &s.queries {
                q.validate(&s.schema).unwrap();
            }
        }
        assert!(matches!(scenario_presets("nope"), Err(SimError::UnknownPreset(_))));
    }
}
