//! Stream schemas with privacy options, and per-stream annotations.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{duration_ms, AggregateFunction, PolicyError};
use crate::encoding::EncodingSpec;
use crate::ids::{PartyId, StreamId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptionKind {
    /// No transformation may touch the attribute.
    Private,
    /// Raw access; every transformation complies.
    Public,
    /// Window aggregates of a single stream.
    StreamAggregate,
    /// Aggregates across a population of streams.
    Aggregate,
    /// Noised population aggregates under an epsilon budget.
    DpAggregate,
}

impl fmt::Display for OptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptionKind::Private => "private",
            OptionKind::Public => "public",
            OptionKind::StreamAggregate => "stream-aggregate",
            OptionKind::Aggregate => "aggregate",
            OptionKind::DpAggregate => "dp-aggregate",
        })
    }
}

/// A privacy option together with its constraints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyOption {
    pub kind: OptionKind,
    #[serde(default)]
    pub min_population: u64,
    /// Smallest allowed window, in milliseconds.
    #[serde(default, with = "duration_ms")]
    pub min_window: u64,
    /// Total epsilon available to concurrently running noised plans.
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// L2 sensitivity of one stream's window contribution, in value units.
    #[serde(default = "default_sensitivity")]
    pub sensitivity: f64,
    /// Finest bucket width a histogram query may use.
    #[serde(default)]
    pub max_resolution: Option<f64>,
}

fn default_sensitivity() -> f64 {
    1.0
}

impl PrivacyOption {
    pub fn new(kind: OptionKind) -> Self {
        PrivacyOption {
            kind,
            min_population: 0,
            min_window: 0,
            epsilon: None,
            sensitivity: 1.0,
            max_resolution: None,
        }
    }

    /// Population a plan must reach; at least two for cross-stream options.
    pub fn required_population(&self) -> u64 {
        match self.kind {
            OptionKind::Aggregate | OptionKind::DpAggregate => self.min_population.max(2),
            _ => self.min_population,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetadataType {
    String,
    Int,
    Float,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetadataAttribute {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: MetadataType,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamAttribute {
    pub name: String,
    pub aggregates: Vec<AggregateFunction>,
    /// Derived from `aggregates` when absent.
    #[serde(default)]
    pub encoding: Option<EncodingSpec>,
    pub options: Vec<PrivacyOption>,
}

impl StreamAttribute {
    /// The encoding used for this attribute.
    pub fn encoding(&self) -> EncodingSpec {
        self.encoding
            .clone()
            .unwrap_or_else(|| derive_encoding(&self.aggregates).expect("validated schema"))
    }

    pub fn option(&self, kind: OptionKind) -> Option<&PrivacyOption> {
        self.options.iter().find(|o| o.kind == kind)
    }
}

/// Smallest moment encoding that supports every listed function.
fn derive_encoding(aggregates: &[AggregateFunction]) -> Option<EncodingSpec> {
    use AggregateFunction::*;
    if aggregates.iter().any(|a| a.needs_bins() || *a == ThresholdSum) {
        return None;
    }
    Some(if aggregates.contains(&Var) {
        EncodingSpec::variance()
    } else if aggregates.iter().any(|a| matches!(a, Avg | Count)) {
        EncodingSpec::sum_count()
    } else {
        EncodingSpec::sum()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSchema {
    pub name: String,
    #[serde(default)]
    pub metadata: Vec<MetadataAttribute>,
    pub attributes: Vec<StreamAttribute>,
}

impl StreamSchema {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let invalid = |msg: String| Err(PolicyError::InvalidSchema(msg));
        if self.attributes.is_empty() {
            return invalid("schema declares no stream attributes".into());
        }
        let mut names = HashSet::new();
        for m in &self.metadata {
            if !names.insert(m.name.as_str()) {
                return invalid(format!("duplicate attribute `{}`", m.name));
            }
        }
        for a in &self.attributes {
            if !names.insert(a.name.as_str()) {
                return invalid(format!("duplicate attribute `{}`", a.name));
            }
            if a.options.is_empty() {
                return invalid(format!("attribute `{}` names no privacy option", a.name));
            }
            if a.aggregates.is_empty() {
                return invalid(format!("attribute `{}` supports no aggregate", a.name));
            }
            let mut kinds = HashSet::new();
            for o in &a.options {
                if !kinds.insert(o.kind) {
                    return invalid(format!("attribute `{}` repeats option {}", a.name, o.kind));
                }
                if o.kind == OptionKind::DpAggregate && !o.epsilon.is_some_and(|e| e > 0.0) {
                    return invalid(format!("dp-aggregate option of `{}` needs a positive epsilon", a.name));
                }
                if !(o.sensitivity > 0.0 && o.sensitivity.is_finite()) {
                    return invalid(format!("attribute `{}`: sensitivity must be positive", a.name));
                }
            }
            let spec = match &a.encoding {
                Some(s) => s.clone(),
                None => derive_encoding(&a.aggregates).ok_or_else(|| {
                    PolicyError::InvalidSchema(format!(
                        "attribute `{}` needs an explicit binned or threshold encoding",
                        a.name
                    ))
                })?,
            };
            spec.validate()
                .map_err(|e| PolicyError::InvalidSchema(format!("attribute `{}`: {e}", a.name)))?;
            for f in &a.aggregates {
                if !f.supported_by(&spec.kind) {
                    return invalid(format!("attribute `{}`: {f} is not computable from its encoding", a.name));
                }
            }
        }
        Ok(())
    }

    pub fn attribute(&self, name: &str) -> Option<&StreamAttribute> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub fn metadata_attribute(&self, name: &str) -> Option<&MetadataAttribute> {
        self.metadata.iter().find(|a| a.name == name)
    }

    /// Element offset of each attribute in an event, in declaration order.
    pub fn offsets(&self) -> Vec<(usize, usize)> {
        let mut at = 0;
        self.attributes
            .iter()
            .map(|a| {
                let w = a.encoding().width();
                let r = (at, w);
                at += w;
                r
            })
            .collect()
    }

    /// Total encoded width of one event.
    pub fn event_width(&self) -> usize {
        self.attributes.iter().map(|a| a.encoding().width()).sum()
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }
}

pub fn parse_schema(text: &str) -> Result<StreamSchema, PolicyError> {
    let schema: StreamSchema = serde_yaml::from_str(text).map_err(|e| PolicyError::Parse(e.to_string()))?;
    schema.validate()?;
    Ok(schema)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetadataValue {
    Int(i64),
    Float(f64),
    String(String),
}

impl MetadataValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            MetadataValue::Int(i) => Some(*i as f64),
            MetadataValue::Float(f) => Some(*f),
            MetadataValue::String(_) => None,
        }
    }

    fn matches_type(&self, ty: MetadataType) -> bool {
        matches!(
            (self, ty),
            (MetadataValue::String(_), MetadataType::String)
                | (MetadataValue::Int(_), MetadataType::Int)
                | (MetadataValue::Int(_) | MetadataValue::Float(_), MetadataType::Float)
        )
    }
}

impl fmt::Display for MetadataValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetadataValue::Int(i) => write!(f, "{i}"),
            MetadataValue::Float(x) => write!(f, "{x}"),
            MetadataValue::String(s) => f.write_str(s),
        }
    }
}

/// The owner's choices for one stream, shared with the server.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamAnnotation {
    pub stream_id: StreamId,
    pub schema: String,
    pub owner: PartyId,
    /// Selected option per stream attribute; missing attributes are private.
    pub selected: BTreeMap<String, OptionKind>,
    pub metadata: BTreeMap<String, MetadataValue>,
}

impl StreamAnnotation {
    pub fn selected_option<'a>(&self, schema: &'a StreamSchema, attribute: &str) -> Option<&'a PrivacyOption> {
        let kind = self.selected.get(attribute)?;
        schema.attribute(attribute)?.option(*kind)
    }

    pub fn validate(&self, schema: &StreamSchema) -> Result<(), PolicyError> {
        let invalid = |msg: String| Err(PolicyError::InvalidAnnotation(self.stream_id.clone(), msg));
        if self.schema != schema.name {
            return invalid(format!("schema `{}` expected, got `{}`", schema.name, self.schema));
        }
        for (attr, kind) in &self.selected {
            match schema.attribute(attr) {
                None => return invalid(format!("unknown attribute `{attr}`")),
                Some(a) if a.option(*kind).is_none() => {
                    return invalid(format!("option {kind} is not offered for `{attr}`"));
                }
                _ => {}
            }
        }
        for m in &schema.metadata {
            match self.metadata.get(&m.name) {
                None => return invalid(format!("missing metadata `{}`", m.name)),
                Some(v) if !v.matches_type(m.ty) => {
                    return invalid(format!("metadata `{}` has the wrong type", m.name));
                }
                _ => {}
            }
        }
        if let Some(extra) = self.metadata.keys().find(|k| schema.metadata_attribute(k).is_none()) {
            return invalid(format!("unknown metadata `{extra}`"));
        }
        Ok(())
    }
}

pub fn parse_annotation(text: &str, schema: &StreamSchema) -> Result<StreamAnnotation, PolicyError> {
    let a: StreamAnnotation = serde_yaml::from_str(text).map_err(|e| PolicyError::Parse(e.to_string()))?;
    a.validate(schema)?;
    Ok(a)
}
