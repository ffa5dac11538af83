//! Differentially private tokens: controllers add shares of divisible
//! Gaussian noise to their tokens instead of to the data.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Mutex;

use super::{TokenError, TransformationToken};
use crate::ring_crypto::{Modulus, RingElement};

const EPS_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMechanism {
    #[default]
    Gaussian,
}

/// Per-party share of a Gaussian noise target.
///
/// Each party samples with `sigma_target / sqrt(honest_fraction * party_count)`
/// so that the honest parties' shares alone sum to noise of std
/// `sigma_target`. `sigma_target` is in the attribute's real units; samples
/// are multiplied by `scale` and rounded like the data encoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(default)]
    pub mechanism: NoiseMechanism,
    pub sigma_target: f64,
    pub honest_fraction: f64,
    pub party_count: u64,
    #[serde(default = "one")]
    pub scale: u64,
}

fn one() -> u64 {
    1
}

impl NoiseSpec {
    pub fn gaussian(sigma_target: f64, honest_fraction: f64, party_count: u64, scale: u64) -> Self {
        NoiseSpec {
            mechanism: NoiseMechanism::Gaussian,
            sigma_target,
            honest_fraction,
            party_count,
            scale,
        }
    }

    pub fn validate(&self) -> Result<(), TokenError> {
        if !(self.sigma_target >= 0.0 && self.sigma_target.is_finite()) {
            return Err(TokenError::InvalidNoise("sigma_target must be finite and >= 0".into()));
        }
        if !(self.honest_fraction > 0.0 && self.honest_fraction <= 1.0) {
            return Err(TokenError::InvalidNoise("honest_fraction must lie in (0, 1]".into()));
        }
        if self.party_count == 0 || self.scale == 0 {
            return Err(TokenError::InvalidNoise("party_count and scale must be positive".into()));
        }
        Ok(())
    }

    pub fn per_party_sigma(&self) -> f64 {
        self.sigma_target / (self.honest_fraction * self.party_count as f64).sqrt()
    }

    /// One fixed-point noise share, as a ring element.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, m: Modulus) -> Result<RingElement, TokenError> {
        self.validate()?;
        let sigma = self.per_party_sigma() * self.scale as f64;
        if sigma == 0.0 {
            return Ok(RingElement(0));
        }
        let normal = Normal::new(0.0, sigma).map_err(|e| TokenError::InvalidNoise(e.to_string()))?;
        Ok(m.from_i64(normal.sample(rng).round() as i64))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon_total: f64,
    pub epsilon_spent: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon_total: f64) -> Self {
        PrivacyBudget {
            epsilon_total,
            epsilon_spent: 0.0,
        }
    }

    pub fn remaining(&self) -> f64 {
        (self.epsilon_total - self.epsilon_spent).max(0.0)
    }

    pub fn allows(&self, cost: f64) -> bool {
        self.epsilon_spent + cost <= self.epsilon_total + EPS_SLACK
    }

    /// Charges `cost` under linear composition, or leaves the budget
    /// untouched and returns false.
    pub fn try_charge(&mut self, cost: f64) -> bool {
        if self.allows(cost) {
            self.epsilon_spent = (self.epsilon_spent + cost).min(self.epsilon_total);
            true
        } else {
            false
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum NoiseOutcome {
    Noised(TransformationToken),
    Suppressed,
}

/// Adds one noise share per released element and charges the budget, or
/// suppresses the token when the budget cannot cover `epsilon_cost`.
pub fn add_dp_noise<R: Rng + ?Sized>(
    token: &TransformationToken,
    spec: &NoiseSpec,
    budget: &mut PrivacyBudget,
    epsilon_cost: f64,
    modulus: Modulus,
    rng: &mut R,
) -> Result<NoiseOutcome, TokenError> {
    if epsilon_cost.is_nan() || epsilon_cost <= 0.0 {
        return Err(TokenError::NonPositiveCost(epsilon_cost));
    }
    if token.noised {
        return Err(TokenError::AlreadyNoised);
    }
    spec.validate()?;
    if !budget.try_charge(epsilon_cost) {
        return Ok(NoiseOutcome::Suppressed);
    }
    let mut out = token.clone();
    for e in out.elements.iter_mut().flatten() {
        *e = modulus.add(*e, spec.sample(rng, modulus)?);
    }
    out.noised = true;
    Ok(NoiseOutcome::Noised(out))
}

/// Shared budget store with atomic charge-or-refuse semantics.
#[derive(Debug, Default)]
pub struct BudgetLedger {
    budgets: Mutex<HashMap<String, PrivacyBudget>>,
}

impl BudgetLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a budget unless one exists for `key` already.
    pub fn register(&self, key: &str, epsilon_total: f64) {
        self.budgets
            .lock()
            .unwrap()
            .entry(key.to_owned())
            .or_insert_with(|| PrivacyBudget::new(epsilon_total));
    }

    pub fn try_charge(&self, key: &str, cost: f64) -> bool {
        match self.budgets.lock().unwrap().get_mut(key) {
            Some(b) => b.try_charge(cost),
            None => false,
        }
    }

    pub fn get(&self, key: &str) -> Option<PrivacyBudget> {
        self.budgets.lock().unwrap().get(key).copied()
    }
}
