//! Structured queries: filter, window aggregate, population aggregate and
//! optional noise.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::schema::{MetadataValue, StreamAnnotation, StreamSchema};
use super::{duration_ms, PolicyError};
use crate::encoding::{ElementRole, EncodingKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateFunction {
    Sum,
    Count,
    Avg,
    Var,
    Histogram,
    Median,
    Min,
    Max,
    Mode,
    /// Sums above and below the encoding's threshold.
    ThresholdSum,
}

impl fmt::Display for AggregateFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

impl AggregateFunction {
    /// Computed from bin counts.
    pub fn needs_bins(self) -> bool {
        use AggregateFunction::*;
        matches!(self, Histogram | Median | Min | Max | Mode)
    }

    pub fn supported_by(self, kind: &EncodingKind) -> bool {
        use AggregateFunction::*;
        use EncodingKind as K;
        let binned = matches!(kind, K::Histogram { .. } | K::OneHot { .. });
        match self {
            Sum => matches!(kind, K::Sum | K::SumCount | K::Variance),
            Count => matches!(kind, K::SumCount | K::Variance) || binned,
            Avg => matches!(kind, K::SumCount | K::Variance),
            Var => matches!(kind, K::Variance),
            ThresholdSum => matches!(kind, K::PredicateThreshold { .. }),
            _ => binned,
        }
    }

    /// Whether the function reads an element with this role. Binned
    /// functions read every bin.
    pub fn reads(self, role: ElementRole) -> bool {
        use AggregateFunction::*;
        match (self, role) {
            (_, ElementRole::Bin(_)) => self.needs_bins() || self == Count,
            (Sum, r) => r == ElementRole::Sum,
            (Count, r) => r == ElementRole::Count,
            (Avg, r) => matches!(r, ElementRole::Sum | ElementRole::Count),
            (Var, r) => matches!(r, ElementRole::Sum | ElementRole::Count | ElementRole::SumSquares),
            (ThresholdSum, r) => matches!(r, ElementRole::Above | ElementRole::Below),
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Selection {
    pub attribute: String,
    pub function: AggregateFunction,
    /// Histogram bucket width; defaults to the encoding's bin width.
    #[serde(default)]
    pub bucket_width: Option<f64>,
}

/// Metadata predicate: equality or inclusive numeric range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Predicate {
    pub attribute: String,
    #[serde(default)]
    pub eq: Option<MetadataValue>,
    #[serde(default)]
    pub range: Option<(f64, f64)>,
}

impl Predicate {
    pub fn eq(attribute: &str, value: MetadataValue) -> Self {
        Predicate {
            attribute: attribute.into(),
            eq: Some(value),
            range: None,
        }
    }

    pub fn range(attribute: &str, lo: f64, hi: f64) -> Self {
        Predicate {
            attribute: attribute.into(),
            eq: None,
            range: Some((lo, hi)),
        }
    }

    pub fn matches(&self, annotation: &StreamAnnotation) -> bool {
        let Some(v) = annotation.metadata.get(&self.attribute) else {
            return false;
        };
        match (&self.eq, self.range) {
            (Some(want), None) => match (want.as_f64(), v.as_f64()) {
                (Some(a), Some(b)) => a == b,
                _ => want == v,
            },
            (None, Some((lo, hi))) => v.as_f64().is_some_and(|x| lo <= x && x <= hi),
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpRequest {
    pub epsilon: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// One output across all member streams.
    #[default]
    Population,
    /// One output per member stream.
    PerStream,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Query {
    pub name: String,
    pub schema: String,
    pub select: Vec<Selection>,
    #[serde(default, rename = "where")]
    pub filter: Vec<Predicate>,
    /// Window size in milliseconds.
    #[serde(with = "duration_ms")]
    pub window: u64,
    pub max_population: u64,
    #[serde(default)]
    pub dp: Option<DpRequest>,
    #[serde(default)]
    pub scope: Scope,
}

impl Query {
    pub fn validate(&self, schema: &StreamSchema) -> Result<(), PolicyError> {
        let invalid = |msg: String| Err(PolicyError::InvalidQuery(msg));
        if self.schema != schema.name {
            return invalid(format!("query targets schema `{}`, not `{}`", self.schema, schema.name));
        }
        if self.window == 0 {
            return invalid("window must be positive".into());
        }
        if self.max_population == 0 {
            return invalid("max_population must be at least 1".into());
        }
        if self.select.is_empty() {
            return invalid("nothing selected".into());
        }
        if let Some(dp) = &self.dp {
            if !(dp.epsilon > 0.0 && dp.epsilon.is_finite()) {
                return invalid(format!("dp epsilon must be positive, got {}", dp.epsilon));
            }
            if self.scope == Scope::PerStream {
                return invalid("noise applies to population queries only".into());
            }
        }
        let mut seen = HashSet::new();
        for s in &self.select {
            let Some(attr) = schema.attribute(&s.attribute) else {
                return invalid(format!("unknown attribute `{}`", s.attribute));
            };
            if !seen.insert(s.attribute.as_str()) {
                return invalid(format!("attribute `{}` selected twice", s.attribute));
            }
            if !attr.aggregates.contains(&s.function) {
                return invalid(format!("`{}` does not support {}", s.attribute, s.function));
            }
            if let Some(w) = s.bucket_width {
                if !s.function.needs_bins() {
                    return invalid(format!("bucket_width given for {}", s.function));
                }
                let spec = attr.encoding();
                let base = match spec.kind {
                    EncodingKind::Histogram { bin_width, .. } => bin_width,
                    _ => 1.0,
                };
                let factor = w / base;
                if !(factor >= 1.0 && (factor - factor.round()).abs() < 1e-9 && spec.width() % factor.round() as usize == 0) {
                    return invalid(format!("bucket width {w} is not a whole multiple of {base} dividing the domain"));
                }
            }
        }
        for p in &self.filter {
            if schema.metadata_attribute(&p.attribute).is_none() {
                return invalid(format!("unknown metadata `{}`", p.attribute));
            }
            if p.eq.is_some() == p.range.is_some() {
                return invalid(format!("predicate on `{}` needs exactly one of eq, range", p.attribute));
            }
        }
        Ok(())
    }

    /// Bucket width of a binned selection.
    pub(crate) fn bucket_factor(sel: &Selection, schema: &StreamSchema) -> usize {
        let Some(w) = sel.bucket_width else { return 1 };
        let base = match schema.attribute(&sel.attribute).map(|a| a.encoding().kind) {
            Some(EncodingKind::Histogram { bin_width, .. }) => bin_width,
            _ => 1.0,
        };
        (w / base).round().max(1.0) as usize
    }

    pub fn effective_bucket_width(sel: &Selection, schema: &StreamSchema) -> Option<f64> {
        let kind = schema.attribute(&sel.attribute)?.encoding().kind;
        let base = match kind {
            EncodingKind::Histogram { bin_width, .. } => bin_width,
            EncodingKind::OneHot { .. } => 1.0,
            _ => return None,
        };
        Some(base * Self::bucket_factor(sel, schema) as f64)
    }
}

pub fn parse_query(text: &str, schema: &StreamSchema) -> Result<Query, PolicyError> {
    let q: Query = serde_yaml::from_str(text).map_err(|e| PolicyError::Parse(e.to_string()))?;
    q.validate(schema)?;
    Ok(q)
}
