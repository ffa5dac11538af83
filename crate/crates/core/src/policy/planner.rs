//! Three-pass query planning with a reservation ledger.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::query::{DpRequest, Predicate, Query, Scope, Selection};
use super::schema::{OptionKind, StreamAnnotation, StreamSchema};
use super::{PolicyError, Refusal};
use crate::encoding::EncodingSpec;
use crate::ids::{PartyId, StreamId};
use crate::token::ElementDirective;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct PlanId(pub [u8; 32]);

impl fmt::Display for PlanId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for PlanId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PlanId({})", &hex::encode(self.0)[..12])
    }
}

impl Serialize for PlanId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PlanId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        Ok(PlanId(bytes.try_into().map_err(|_| serde::de::Error::custom("plan id must be 32 bytes"))?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    /// Failure probability of the Gaussian mechanism.
    pub dp_delta: f64,
    /// Colluding fraction of controllers; noise is calibrated for the rest.
    pub alpha: f64,
    /// Fraction of members whose dropout a plan tolerates.
    pub fault_tolerance: f64,
    /// Reservations older than this are released automatically.
    pub max_lifetime_ms: Option<u64>,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            dp_delta: 1e-6,
            alpha: 0.5,
            fault_tolerance: 0.1,
            max_lifetime_ms: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanMember {
    pub stream: StreamId,
    pub owner: PartyId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Operation {
    WindowAggregate { window: u64 },
    CrossStreamAggregate,
    DpNoise { epsilon: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub epsilon: f64,
    pub delta: f64,
    pub sensitivity: f64,
    /// Standard deviation of the summed noise, in value units.
    pub sigma: f64,
    pub honest_fraction: f64,
}

/// Gaussian mechanism: `sigma = sensitivity * sqrt(2 ln(1.25 / delta)) / epsilon`.
pub fn gaussian_sigma(epsilon: f64, delta: f64, sensitivity: f64) -> f64 {
    sensitivity * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon
}

/// Where one selection lands in the token's output slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputField {
    pub attribute: String,
    pub function: super::AggregateFunction,
    /// Encoding of the released slots, coarsened for merged buckets.
    pub spec: EncodingSpec,
    pub slot_start: usize,
    pub slot_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformationPlan {
    pub id: PlanId,
    pub seq: u64,
    pub query: String,
    pub schema: String,
    pub scope: Scope,
    pub selections: Vec<Selection>,
    pub filter: Vec<Predicate>,
    pub max_population: u64,
    pub window: u64,
    /// Sorted by stream id.
    pub members: Vec<PlanMember>,
    /// Sorted and deduplicated owners of the members.
    pub required_controllers: Vec<PartyId>,
    /// One directive per element of the event encoding.
    pub directives: Vec<ElementDirective>,
    pub outputs: Vec<OutputField>,
    pub chain: Vec<Operation>,
    pub dp: Option<DpConfig>,
    pub fault_tolerance: u64,
    pub created_at: u64,
}

impl TransformationPlan {
    /// SHA-256 of the canonical JSON encoding with a zero id.
    pub fn compute_id(&self) -> PlanId {
        let mut copy = self.clone();
        copy.id = PlanId::default();
        let json = serde_json::to_vec(&copy).expect("plan serializes");
        PlanId(Sha256::digest(json).into())
    }

    pub fn as_query(&self) -> Query {
        Query {
            name: self.query.clone(),
            schema: self.schema.clone(),
            select: self.selections.clone(),
            filter: self.filter.clone(),
            window: self.window,
            max_population: self.max_population,
            dp: self.dp.as_ref().map(|d| DpRequest { epsilon: d.epsilon }),
            scope: self.scope,
        }
    }

    pub fn population(&self) -> u64 {
        self.members.len() as u64
    }

    pub fn stream_ids(&self) -> impl Iterator<Item = &StreamId> {
        self.members.iter().map(|m| &m.stream)
    }
}

/// Element directives releasing exactly what the selections read, and the
/// output field of each selection.
pub fn build_layout(schema: &StreamSchema, selections: &[Selection]) -> (Vec<ElementDirective>, Vec<OutputField>) {
    let mut directives = Vec::with_capacity(schema.event_width());
    let mut outputs = Vec::new();
    let mut slot = 0;
    let mut group = 0u32;
    for attr in &schema.attributes {
        let spec = attr.encoding();
        let roles = spec.roles();
        let Some(sel) = selections.iter().find(|s| s.attribute == attr.name) else {
            directives.extend(std::iter::repeat_n(ElementDirective::Withhold, roles.len()));
            slot += roles.len();
            continue;
        };
        let factor = Query::bucket_factor(sel, schema);
        let (out_spec, slots) = if sel.function.needs_bins() && factor > 1 {
            for chunk in 0..roles.len().div_ceil(factor) {
                let n = factor.min(roles.len() - chunk * factor);
                directives.extend(std::iter::repeat_n(ElementDirective::Merge(group), n));
                group += 1;
            }
            (spec.coarsen(factor).expect("validated factor"), roles.len().div_ceil(factor))
        } else {
            directives.extend(roles.iter().map(|r| {
                if sel.function.reads(*r) {
                    ElementDirective::Release
                } else {
                    ElementDirective::Withhold
                }
            }));
            (spec.clone(), roles.len())
        };
        outputs.push(OutputField {
            attribute: attr.name.clone(),
            function: sel.function,
            spec: out_spec,
            slot_start: slot,
            slot_len: slots,
        });
        slot += slots;
    }
    (directives, outputs)
}

pub(crate) fn expected_chain(query: &Query, population: u64) -> Vec<Operation> {
    let mut chain = vec![Operation::WindowAggregate { window: query.window }];
    if query.scope == Scope::Population && population > 1 {
        chain.push(Operation::CrossStreamAggregate);
    }
    if let Some(dp) = &query.dp {
        chain.push(Operation::DpNoise { epsilon: dp.epsilon });
    }
    chain
}

/// Largest sensitivity declared by the noised options of the selections.
pub(crate) fn dp_sensitivity(schema: &StreamSchema, query: &Query) -> f64 {
    query
        .select
        .iter()
        .filter_map(|s| schema.attribute(&s.attribute)?.option(OptionKind::DpAggregate))
        .map(|o| o.sensitivity)
        .fold(1.0, f64::max)
}

/// Population-independent compliance of one stream, plus the population
/// constraint when `population` is given.
pub(crate) fn check_stream(
    ann: &StreamAnnotation,
    schema: &StreamSchema,
    query: &Query,
    population: Option<u64>,
) -> Result<(), Refusal> {
    for sel in &query.select {
        let attribute = sel.attribute.clone();
        let Some(opt) = ann.selected_option(schema, &sel.attribute) else {
            return Err(Refusal::Private { attribute });
        };
        let allowed = match opt.kind {
            OptionKind::Private => return Err(Refusal::Private { attribute }),
            OptionKind::Public => true,
            OptionKind::StreamAggregate => query.scope == Scope::PerStream && query.dp.is_none(),
            OptionKind::Aggregate => query.scope == Scope::Population && query.dp.is_none(),
            OptionKind::DpAggregate => query.scope == Scope::Population && query.dp.is_some(),
        };
        if !allowed {
            return Err(Refusal::OptionMismatch {
                attribute,
                option: opt.kind,
            });
        }
        if query.window < opt.min_window {
            return Err(Refusal::MinWindow {
                attribute,
                required: opt.min_window,
                requested: query.window,
            });
        }
        if let (Some(allowed), true) = (opt.max_resolution, sel.function.needs_bins()) {
            let requested = Query::effective_bucket_width(sel, schema).unwrap_or(0.0);
            if requested + 1e-9 < allowed {
                return Err(Refusal::MaxResolution {
                    attribute,
                    allowed,
                    requested,
                });
            }
        }
    }
    if let Some(p) = population {
        let required = required_population(ann, schema, query);
        if p < required {
            return Err(Refusal::MinPopulation { required, population: p });
        }
    }
    Ok(())
}

pub(crate) fn required_population(ann: &StreamAnnotation, schema: &StreamSchema, query: &Query) -> u64 {
    query
        .select
        .iter()
        .filter_map(|s| ann.selected_option(schema, &s.attribute))
        .map(|o| o.required_population())
        .max()
        .unwrap_or(0)
}

type Key = (StreamId, String);

/// Exclusive and budgeted reservations of stream attributes. Used by the
/// planner and, independently, by each controller.
#[derive(Debug, Default)]
pub(crate) struct Ledger {
    exclusive: HashMap<Key, PlanId>,
    dp: HashMap<Key, Vec<(PlanId, f64)>>,
    active: HashMap<PlanId, TransformationPlan>,
    released: HashSet<PlanId>,
}

impl Ledger {
    pub fn check_available(
        &self,
        ann: &StreamAnnotation,
        schema: &StreamSchema,
        query: &Query,
        plan: Option<PlanId>,
    ) -> Result<(), Refusal> {
        for sel in &query.select {
            let key = (ann.stream_id.clone(), sel.attribute.clone());
            let other = |id: &PlanId| Some(*id) != plan;
            let reserved = Refusal::Reserved {
                stream: ann.stream_id.clone(),
                attribute: sel.attribute.clone(),
            };
            if self.exclusive.get(&key).is_some_and(other) {
                return Err(reserved);
            }
            let dp_entries = self.dp.get(&key).map(Vec::as_slice).unwrap_or(&[]);
            match &query.dp {
                None if dp_entries.iter().any(|(id, _)| other(id)) => return Err(reserved),
                None => {}
                Some(req) => {
                    let Some(opt) = ann.selected_option(schema, &sel.attribute) else {
                        continue;
                    };
                    if opt.kind != OptionKind::DpAggregate {
                        continue;
                    }
                    let budget = opt.epsilon.unwrap_or(0.0);
                    let used: f64 = dp_entries.iter().filter(|(id, _)| other(id)).map(|(_, e)| e).sum();
                    if used + req.epsilon > budget + 1e-12 {
                        return Err(Refusal::Budget {
                            attribute: sel.attribute.clone(),
                            remaining: (budget - used).max(0.0),
                            requested: req.epsilon,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Records the plan's reservations for the given streams.
    pub fn reserve<'a>(&mut self, plan: &TransformationPlan, streams: impl Iterator<Item = &'a StreamId>) {
        if self.active.contains_key(&plan.id) {
            return;
        }
        for s in streams {
            for sel in &plan.selections {
                let key = (s.clone(), sel.attribute.clone());
                match &plan.dp {
                    None => {
                        self.exclusive.insert(key, plan.id);
                    }
                    Some(dp) => self.dp.entry(key).or_default().push((plan.id, dp.epsilon)),
                }
            }
        }
        self.released.remove(&plan.id);
        self.active.insert(plan.id, plan.clone());
    }

    pub fn release(&mut self, id: PlanId) -> Result<(), PolicyError> {
        if self.active.remove(&id).is_none() {
            return if self.released.contains(&id) {
                Ok(())
            } else {
                Err(PolicyError::UnknownPlan(id.to_string()))
            };
        }
        self.exclusive.retain(|_, p| *p != id);
        for entries in self.dp.values_mut() {
            entries.retain(|(p, _)| *p != id);
        }
        self.dp.retain(|_, e| !e.is_empty());
        self.released.insert(id);
        Ok(())
    }

    pub fn expire(&mut self, now: u64, lifetime: Option<u64>) {
        let Some(lifetime) = lifetime else { return };
        let stale: Vec<PlanId> = self
            .active
            .values()
            .filter(|p| p.created_at.saturating_add(lifetime) <= now)
            .map(|p| p.id)
            .collect();
        for id in stale {
            let _ = self.release(id);
        }
    }

    pub fn is_active(&self, id: &PlanId) -> bool {
        self.active.contains_key(id)
    }

    pub fn active(&self) -> Vec<TransformationPlan> {
        let mut v: Vec<_> = self.active.values().cloned().collect();
        v.sort_by_key(|p| p.seq);
        v
    }
}

/// The policy manager's planner. Planning and reservation form one
/// serialized decision point.
#[derive(Debug, Default)]
pub struct QueryPlanner {
    config: PlannerConfig,
    state: Mutex<(Ledger, u64)>,
}

impl QueryPlanner {
    pub fn new(config: PlannerConfig) -> Self {
        QueryPlanner {
            config,
            state: Mutex::default(),
        }
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.config
    }

    /// Filters `annotations` by metadata, then by option compliance and
    /// reservations, then by population constraints, and reserves the
    /// survivors. Population queries yield one plan; per-stream queries one
    /// plan per surviving stream.
    pub fn plan_query(
        &self,
        query: &Query,
        schema: &StreamSchema,
        annotations: &[StreamAnnotation],
        now: u64,
    ) -> Result<Vec<TransformationPlan>, PolicyError> {
        schema.validate()?;
        query.validate(schema)?;
        let mut guard = self.state.lock().unwrap();
        let (ledger, seq) = &mut *guard;
        ledger.expire(now, self.config.max_lifetime_ms);

        let matching: Vec<&StreamAnnotation> = annotations
            .iter()
            .filter(|a| a.validate(schema).is_ok() && query.filter.iter().all(|p| p.matches(a)))
            .collect();
        let mut reason = Refusal::NoMatchingStreams;

        let mut stage_reason = None;
        let mut survivors: Vec<&StreamAnnotation> = matching
            .into_iter()
            .filter(|a| {
                match check_stream(a, schema, query, None).and_then(|_| ledger.check_available(a, schema, query, None)) {
                    Ok(()) => true,
                    Err(r) => {
                        stage_reason.get_or_insert(r);
                        false
                    }
                }
            })
            .collect();
        if let Some(r) = stage_reason {
            reason = r;
        }

        survivors.sort_by_key(|a| a.stream_id.digest());
        survivors.truncate(query.max_population as usize);
        let per_plan_population = |n: usize| match query.scope {
            Scope::Population => n as u64,
            Scope::PerStream => 1,
        };
        loop {
            let p = per_plan_population(survivors.len());
            let before = survivors.len();
            let mut dropped = None;
            survivors.retain(|a| match check_stream(a, schema, query, Some(p)) {
                Ok(()) => true,
                Err(r) => {
                    dropped.get_or_insert(r);
                    false
                }
            });
            if let Some(r) = dropped {
                reason = r;
            }
            if survivors.len() == before {
                break;
            }
        }
        if survivors.is_empty() {
            return Err(PolicyError::Rejected(reason));
        }

        let groups: Vec<Vec<&StreamAnnotation>> = match query.scope {
            Scope::Population => vec![survivors],
            Scope::PerStream => survivors.into_iter().map(|a| vec![a]).collect(),
        };
        let mut plans = Vec::with_capacity(groups.len());
        for group in groups {
            *seq += 1;
            let plan = self.build_plan(query, schema, &group, *seq, now);
            ledger.reserve(&plan, plan.stream_ids());
            plans.push(plan);
        }
        Ok(plans)
    }

    /// Assembles a plan over exactly `members`, without any checks.
    pub fn build_plan(
        &self,
        query: &Query,
        schema: &StreamSchema,
        annotations: &[&StreamAnnotation],
        seq: u64,
        now: u64,
    ) -> TransformationPlan {
        let mut members: Vec<PlanMember> = annotations
            .iter()
            .map(|a| PlanMember {
                stream: a.stream_id.clone(),
                owner: a.owner,
            })
            .collect();
        members.sort_by(|a, b| a.stream.cmp(&b.stream));
        let mut required_controllers: Vec<PartyId> = members.iter().map(|m| m.owner).collect();
        required_controllers.sort();
        required_controllers.dedup();
        let population = members.len() as u64;
        let (directives, outputs) = build_layout(schema, &query.select);
        let dp = query.dp.as_ref().map(|d| {
            let sensitivity = dp_sensitivity(schema, query);
            DpConfig {
                epsilon: d.epsilon,
                delta: self.config.dp_delta,
                sensitivity,
                sigma: gaussian_sigma(d.epsilon, self.config.dp_delta, sensitivity),
                honest_fraction: 1.0 - self.config.alpha,
            }
        });
        // dropouts beyond this would break some member's population constraint
        let fault_tolerance = match query.scope {
            Scope::PerStream => 0,
            Scope::Population => {
                let required = annotations
                    .iter()
                    .map(|a| required_population(a, schema, query))
                    .max()
                    .unwrap_or(0)
                    .max(1);
                let slack = population.saturating_sub(required);
                ((population as f64 * self.config.fault_tolerance).floor() as u64).min(slack)
            }
        };
        let mut plan = TransformationPlan {
            id: PlanId::default(),
            seq,
            query: query.name.clone(),
            schema: schema.name.clone(),
            scope: query.scope,
            selections: query.select.clone(),
            filter: query.filter.clone(),
            max_population: query.max_population,
            window: query.window,
            members,
            required_controllers,
            directives,
            outputs,
            chain: expected_chain(query, population),
            dp,
            fault_tolerance,
            created_at: now,
        };
        plan.id = plan.compute_id();
        plan
    }

    pub fn release_reservation(&self, id: PlanId) -> Result<(), PolicyError> {
        self.state.lock().unwrap().0.release(id)
    }

    /// Currently reserved plans, oldest first.
    pub fn active_plans(&self) -> Vec<TransformationPlan> {
        self.state.lock().unwrap().0.active()
    }

    pub fn is_active(&self, id: &PlanId) -> bool {
        self.state.lock().unwrap().0.is_active(id)
    }
}
