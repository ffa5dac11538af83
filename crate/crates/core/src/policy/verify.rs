//! Controller-side re-derivation of the planner's compliance checks.

use std::collections::BTreeMap;

use super::planner::{build_layout, check_stream, dp_sensitivity, expected_chain, gaussian_sigma, Ledger};
use super::{PlanId, PlannerConfig, PolicyError, Refusal, Scope, StreamAnnotation, StreamSchema, TransformationPlan};
use crate::ids::{PartyId, StreamId};
use crate::secure_agg::IdentityRegistry;

#[derive(Clone, Debug, PartialEq)]
pub enum Verdict {
    Accept,
    Refuse(Refusal),
}

impl Verdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, Verdict::Accept)
    }
}

/// A privacy controller's policy state: the annotations of the streams it
/// owns and its own record of the plans it has agreed to.
#[derive(Debug)]
pub struct ControllerPolicy {
    owner: PartyId,
    config: PlannerConfig,
    annotations: BTreeMap<StreamId, StreamAnnotation>,
    ledger: Ledger,
}

impl ControllerPolicy {
    /// `config` holds the controller's own noise requirements.
    pub fn new(owner: PartyId, config: PlannerConfig) -> Self {
        ControllerPolicy {
            owner,
            config,
            annotations: BTreeMap::new(),
            ledger: Ledger::default(),
        }
    }

    pub fn owner(&self) -> PartyId {
        self.owner
    }

    pub fn annotate(&mut self, annotation: StreamAnnotation) {
        self.annotations.insert(annotation.stream_id.clone(), annotation);
    }

    pub fn annotations(&self) -> impl Iterator<Item = &StreamAnnotation> {
        self.annotations.values()
    }

    fn structure(&self, plan: &TransformationPlan, schema: &StreamSchema, registry: &IdentityRegistry) -> Result<(), Refusal> {
        let mismatch = |what: &str| Err(Refusal::PlanMismatch(what.into()));
        if plan.compute_id() != plan.id {
            return mismatch("id");
        }
        if plan.schema != schema.name {
            return mismatch("schema");
        }
        if let Some(m) = plan.members.iter().find(|m| !registry.contains(&m.owner)) {
            return Err(Refusal::UnknownIdentity(m.owner));
        }
        if plan.members.is_empty() || plan.members.windows(2).any(|w| w[0].stream >= w[1].stream) {
            return mismatch("member list");
        }
        let mut owners: Vec<PartyId> = plan.members.iter().map(|m| m.owner).collect();
        owners.sort();
        owners.dedup();
        if owners != plan.required_controllers {
            return mismatch("required controllers");
        }
        let query = plan.as_query();
        if query.validate(schema).is_err() {
            return mismatch("query");
        }
        if plan.population() > plan.max_population {
            return mismatch("population cap");
        }
        if plan.scope == Scope::PerStream && plan.population() != 1 {
            return mismatch("per-stream plan with several members");
        }
        let (directives, outputs) = build_layout(schema, &plan.selections);
        if directives != plan.directives || outputs != plan.outputs {
            return mismatch("element directives");
        }
        if expected_chain(&query, plan.population()) != plan.chain {
            return mismatch("operation chain");
        }
        if let Some(dp) = &plan.dp {
            if dp.delta > self.config.dp_delta || dp.honest_fraction > 1.0 - self.config.alpha + 1e-12 {
                return mismatch("noise parameters");
            }
            let required = gaussian_sigma(dp.epsilon, dp.delta, dp_sensitivity(schema, &query));
            if dp.sigma + 1e-9 < required {
                return Err(Refusal::InsufficientNoise {
                    required,
                    offered: dp.sigma,
                });
            }
        }
        Ok(())
    }

    /// Checks the plan against this controller's annotations and records.
    pub fn verify_plan(&self, plan: &TransformationPlan, schema: &StreamSchema, registry: &IdentityRegistry) -> Verdict {
        match self.check(plan, schema, registry) {
            Ok(()) => Verdict::Accept,
            Err(r) => Verdict::Refuse(r),
        }
    }

    fn check(&self, plan: &TransformationPlan, schema: &StreamSchema, registry: &IdentityRegistry) -> Result<(), Refusal> {
        self.structure(plan, schema, registry)?;
        let query = plan.as_query();
        let population = match plan.scope {
            Scope::Population => plan.population(),
            Scope::PerStream => 1,
        };
        for m in plan.members.iter().filter(|m| m.owner == self.owner) {
            let ann = self
                .annotations
                .get(&m.stream)
                .ok_or_else(|| Refusal::UnknownStream(m.stream.clone()))?;
            if ann.owner != m.owner || ann.validate(schema).is_err() {
                return Err(Refusal::PlanMismatch(format!("annotation of {}", m.stream)));
            }
            if !plan.filter.iter().all(|p| p.matches(ann)) {
                return Err(Refusal::PlanMismatch(format!("{} does not match the filter", m.stream)));
            }
            check_stream(ann, schema, &query, Some(population))?;
            self.ledger.check_available(ann, schema, &query, Some(plan.id))?;
        }
        Ok(())
    }

    /// Verifies and, on acceptance, records the plan's reservations of this
    /// controller's streams.
    pub fn accept(&mut self, plan: &TransformationPlan, schema: &StreamSchema, registry: &IdentityRegistry) -> Verdict {
        let verdict = self.verify_plan(plan, schema, registry);
        if verdict.is_accept() {
            let own: Vec<StreamId> = plan
                .members
                .iter()
                .filter(|m| m.owner == self.owner)
                .map(|m| m.stream.clone())
                .collect();
            self.ledger.reserve(plan, own.iter());
        }
        verdict
    }

    pub fn release(&mut self, id: PlanId) -> Result<(), PolicyError> {
        self.ledger.release(id)
    }
}
