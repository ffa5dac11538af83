//! Client-side encodings that make statistics additively aggregatable, and
//! the decoders that turn aggregated vectors back into statistics.
//!
//! Real inputs are scaled by a per-attribute fixed-point factor and rounded
//! before encoding. Histogram and one-hot encodings bin the raw value.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ring_crypto::{Modulus, RingElement};

pub const DEFAULT_SCALE: u64 = 100;

fn default_scale() -> u64 {
    DEFAULT_SCALE
}

#[derive(Debug, Error, PartialEq)]
pub enum EncodingError {
    #[error("value {value} outside domain [{min}, {max})")]
    OutOfDomain { value: f64, min: f64, max: f64 },

    #[error("invalid encoding spec: {0}")]
    InvalidSpec(String),

    #[error("aggregate has {got} elements, encoding expects {expected}")]
    WidthMismatch { expected: usize, got: usize },

    #[error("worst-case sum {worst} exceeds M/2 = {half}")]
    OverflowBudget { worst: u128, half: u64 },

    #[error("value {0} does not fit the fixed-point range")]
    NotRepresentable(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncodingKind {
    Sum,
    SumCount,
    Variance,
    Histogram {
        domain_min: f64,
        domain_max: f64,
        bin_width: f64,
    },
    /// Categorical integer domain `domain_min..=domain_max`.
    OneHot { domain_min: i64, domain_max: i64 },
    PredicateThreshold { threshold: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodingSpec {
    #[serde(flatten)]
    pub kind: EncodingKind,
    #[serde(default = "default_scale")]
    pub scale: u64,
}

/// What an encoded element accumulates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ElementRole {
    Sum,
    Count,
    SumSquares,
    Bin(usize),
    Above,
    Below,
}

impl ElementRole {
    /// Roles whose aggregate can never be negative.
    fn non_negative(self) -> bool {
        matches!(self, ElementRole::Count | ElementRole::SumSquares | ElementRole::Bin(_))
    }
}

impl EncodingSpec {
    pub fn new(kind: EncodingKind) -> Self {
        EncodingSpec {
            kind,
            scale: DEFAULT_SCALE,
        }
    }

    pub fn with_scale(mut self, scale: u64) -> Self {
        self.scale = scale;
        self
    }

    pub fn sum() -> Self {
        Self::new(EncodingKind::Sum)
    }

    pub fn sum_count() -> Self {
        Self::new(EncodingKind::SumCount)
    }

    pub fn variance() -> Self {
        Self::new(EncodingKind::Variance)
    }

    pub fn histogram(domain_min: f64, domain_max: f64, bin_width: f64) -> Self {
        Self::new(EncodingKind::Histogram {
            domain_min,
            domain_max,
            bin_width,
        })
    }

    pub fn one_hot(domain_min: i64, domain_max: i64) -> Self {
        Self::new(EncodingKind::OneHot {
            domain_min,
            domain_max,
        })
    }

    pub fn predicate_threshold(threshold: f64) -> Self {
        Self::new(EncodingKind::PredicateThreshold { threshold })
    }

    pub fn validate(&self) -> Result<(), EncodingError> {
        if self.scale == 0 {
            return Err(EncodingError::InvalidSpec("scale must be positive".into()));
        }
        match self.kind {
            EncodingKind::Histogram {
                domain_min,
                domain_max,
                bin_width,
            } => {
                if !(bin_width > 0.0 && bin_width.is_finite()) {
                    return Err(EncodingError::InvalidSpec("bin_width must be positive".into()));
                }
                if domain_max.partial_cmp(&domain_min) != Some(std::cmp::Ordering::Greater) {
                    return Err(EncodingError::InvalidSpec("histogram domain is empty".into()));
                }
            }
            EncodingKind::OneHot {
                domain_min,
                domain_max,
            } if domain_max < domain_min => {
                return Err(EncodingError::InvalidSpec("one-hot domain is empty".into()));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        match self.kind {
            EncodingKind::Sum => 1,
            EncodingKind::SumCount => 2,
            EncodingKind::Variance => 3,
            EncodingKind::Histogram {
                domain_min,
                domain_max,
                bin_width,
            } => (((domain_max - domain_min) / bin_width).ceil() as usize).max(1),
            EncodingKind::OneHot {
                domain_min,
                domain_max,
            } => (domain_max - domain_min + 1) as usize,
            EncodingKind::PredicateThreshold { .. } => 2,
        }
    }

    pub fn roles(&self) -> Vec<ElementRole> {
        match self.kind {
            EncodingKind::Sum => vec![ElementRole::Sum],
            EncodingKind::SumCount => vec![ElementRole::Sum, ElementRole::Count],
            EncodingKind::Variance => vec![ElementRole::Sum, ElementRole::SumSquares, ElementRole::Count],
            EncodingKind::Histogram { .. } | EncodingKind::OneHot { .. } => {
                (0..self.width()).map(ElementRole::Bin).collect()
            }
            EncodingKind::PredicateThreshold { .. } => vec![ElementRole::Above, ElementRole::Below],
        }
    }

    pub fn is_binned(&self) -> bool {
        matches!(self.kind, EncodingKind::Histogram { .. } | EncodingKind::OneHot { .. })
    }

    /// Midpoint of each bin, in raw units.
    pub fn bin_midpoints(&self) -> Vec<f64> {
        match self.kind {
            EncodingKind::Histogram {
                domain_min,
                bin_width,
                ..
            } => (0..self.width())
                .map(|i| domain_min + (i as f64 + 0.5) * bin_width)
                .collect(),
            EncodingKind::OneHot { domain_min, .. } => {
                (0..self.width()).map(|i| (domain_min + i as i64) as f64).collect()
            }
            _ => Vec::new(),
        }
    }

    /// The histogram obtained by merging `factor` consecutive bins.
    pub fn coarsen(&self, factor: usize) -> Result<EncodingSpec, EncodingError> {
        if factor == 0 {
            return Err(EncodingError::InvalidSpec("merge factor must be positive".into()));
        }
        let kind = match self.kind {
            EncodingKind::Histogram {
                domain_min,
                bin_width,
                ..
            } => {
                let bins = self.width().div_ceil(factor);
                let bw = bin_width * factor as f64;
                EncodingKind::Histogram {
                    domain_min,
                    domain_max: domain_min + bins as f64 * bw,
                    bin_width: bw,
                }
            }
            EncodingKind::OneHot { domain_min, .. } => {
                let bins = self.width().div_ceil(factor);
                EncodingKind::Histogram {
                    domain_min: domain_min as f64 - 0.5,
                    domain_max: domain_min as f64 - 0.5 + (bins * factor) as f64,
                    bin_width: factor as f64,
                }
            }
            _ => return Err(EncodingError::InvalidSpec("only binned encodings can be coarsened".into())),
        };
        Ok(EncodingSpec {
            kind,
            scale: self.scale,
        })
    }

    fn fixed(&self, x: f64) -> Result<i64, EncodingError> {
        let v = (x * self.scale as f64).round();
        if !v.is_finite() || v.abs() >= i64::MAX as f64 {
            return Err(EncodingError::NotRepresentable(x));
        }
        Ok(v as i64)
    }

    fn bin_of(&self, x: f64) -> Result<usize, EncodingError> {
        match self.kind {
            EncodingKind::Histogram {
                domain_min,
                domain_max,
                bin_width,
            } => {
                if !(x >= domain_min && x < domain_max) {
                    return Err(EncodingError::OutOfDomain {
                        value: x,
                        min: domain_min,
                        max: domain_max,
                    });
                }
                Ok((((x - domain_min) / bin_width).floor() as usize).min(self.width() - 1))
            }
            EncodingKind::OneHot {
                domain_min,
                domain_max,
            } => {
                let v = x.round();
                if x.fract() != 0.0 || v < domain_min as f64 || v > domain_max as f64 {
                    return Err(EncodingError::OutOfDomain {
                        value: x,
                        min: domain_min as f64,
                        max: domain_max as f64 + 1.0,
                    });
                }
                Ok((v as i64 - domain_min) as usize)
            }
            _ => unreachable!("bin_of on unbinned encoding"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedVector {
    pub elements: Vec<RingElement>,
}

impl EncodedVector {
    pub fn width(&self) -> usize {
        self.elements.len()
    }
}

pub fn encode(value: f64, spec: &EncodingSpec, modulus: Modulus) -> Result<EncodedVector, EncodingError> {
    spec.validate()?;
    let ring = |v: i64| modulus.from_i64(v);
    let elements = match spec.kind {
        EncodingKind::Sum => vec![ring(spec.fixed(value)?)],
        EncodingKind::SumCount => vec![ring(spec.fixed(value)?), RingElement(1)],
        EncodingKind::Variance => {
            let x = spec.fixed(value)?;
            let sq = (x as i128) * (x as i128);
            if sq > i64::MAX as i128 {
                return Err(EncodingError::NotRepresentable(value));
            }
            vec![ring(x), ring(sq as i64), RingElement(1)]
        }
        EncodingKind::Histogram { .. } | EncodingKind::OneHot { .. } => {
            let mut v = vec![RingElement(0); spec.width()];
            v[spec.bin_of(value)?] = RingElement(1);
            v
        }
        EncodingKind::PredicateThreshold { threshold } => {
            let x = ring(spec.fixed(value)?);
            if value >= threshold {
                vec![x, RingElement(0)]
            } else {
                vec![RingElement(0), x]
            }
        }
    };
    Ok(EncodedVector { elements })
}

/// The all-zero vector; adding it leaves every aggregate unchanged.
pub fn encode_neutral(spec: &EncodingSpec) -> EncodedVector {
    EncodedVector {
        elements: vec![RingElement(0); spec.width()],
    }
}

/// Rejects configurations whose worst-case window sums can wrap past `M/2`.
pub fn check_overflow_budget(
    spec: &EncodingSpec,
    max_magnitude: f64,
    max_events: u64,
    modulus: Modulus,
) -> Result<(), EncodingError> {
    let mag = (max_magnitude.abs() * spec.scale as f64).ceil() as u128;
    let per_event = match spec.kind {
        EncodingKind::Sum | EncodingKind::SumCount | EncodingKind::PredicateThreshold { .. } => mag.max(1),
        EncodingKind::Variance => mag.saturating_mul(mag).max(1),
        EncodingKind::Histogram { .. } | EncodingKind::OneHot { .. } => 1,
    };
    let worst = per_event.saturating_mul(max_events as u128);
    let half = modulus.half();
    if worst >= half as u128 {
        return Err(EncodingError::OverflowBudget { worst, half });
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct HistogramStats {
    pub bins: Vec<u64>,
    pub midpoints: Vec<f64>,
}

impl HistogramStats {
    pub fn total(&self) -> u64 {
        self.bins.iter().fold(0u64, |a, b| a.saturating_add(*b))
    }

    /// Nearest-rank percentile, reported as a bin midpoint.
    pub fn percentile(&self, p: f64) -> Option<f64> {
        let n = self.total();
        if n == 0 || !(0.0..=100.0).contains(&p) {
            return None;
        }
        let rank = ((p / 100.0 * n as f64).ceil() as u64).max(1);
        let mut cum = 0;
        for (count, mid) in self.bins.iter().zip(&self.midpoints) {
            cum = count.saturating_add(cum);
            if cum >= rank {
                return Some(*mid);
            }
        }
        None
    }

    pub fn min(&self) -> Option<f64> {
        self.bins.iter().position(|c| *c > 0).map(|i| self.midpoints[i])
    }

    pub fn max(&self) -> Option<f64> {
        self.bins.iter().rposition(|c| *c > 0).map(|i| self.midpoints[i])
    }

    /// Most populated bin; ties go to the lower bin.
    pub fn mode(&self) -> Option<f64> {
        let (i, c) = self
            .bins
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
        (*c > 0).then(|| self.midpoints[i])
    }

    /// Up to `k` non-empty bins as (midpoint, count), most populated first.
    pub fn top_k(&self, k: usize) -> Vec<(f64, u64)> {
        let mut v: Vec<(usize, u64)> = self
            .bins
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, c)| *c > 0)
            .collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v.into_iter().take(k).map(|(i, c)| (self.midpoints[i], c)).collect()
    }
}

/// Statistics recovered from an aggregate. Fields the encoding (or the
/// released subset of its elements) cannot support are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DecodedStats {
    pub count: Option<u64>,
    pub sum: Option<f64>,
    pub mean: Option<f64>,
    pub variance: Option<f64>,
    pub histogram: Option<HistogramStats>,
    pub median: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub mode: Option<f64>,
    pub range: Option<f64>,
    pub above_threshold_sum: Option<f64>,
    pub below_threshold_sum: Option<f64>,
    /// A non-negative element exceeded `M/2`, so the sum likely wrapped.
    pub overflow_warning: bool,
}

pub fn decode_stats(
    aggregate: &[RingElement],
    spec: &EncodingSpec,
    modulus: Modulus,
) -> Result<DecodedStats, EncodingError> {
    let released: Vec<Option<RingElement>> = aggregate.iter().copied().map(Some).collect();
    decode_released(&released, spec, modulus)
}

/// Decodes an aggregate in which some elements may have been withheld.
pub fn decode_released(
    aggregate: &[Option<RingElement>],
    spec: &EncodingSpec,
    modulus: Modulus,
) -> Result<DecodedStats, EncodingError> {
    spec.validate()?;
    if aggregate.len() != spec.width() {
        return Err(EncodingError::WidthMismatch {
            expected: spec.width(),
            got: aggregate.len(),
        });
    }
    let mut out = DecodedStats::default();
    let roles = spec.roles();
    for (role, v) in roles.iter().zip(aggregate) {
        if let Some(v) = v {
            if role.non_negative() && v.0 > modulus.max_value() / 2 {
                out.overflow_warning = true;
            }
        }
    }
    let signed = |v: RingElement| modulus.to_i128(v);
    let scale = spec.scale as f64;

    let get = |role: ElementRole| {
        roles
            .iter()
            .position(|r| *r == role)
            .and_then(|i| aggregate[i])
    };

    match spec.kind {
        EncodingKind::Sum | EncodingKind::SumCount | EncodingKind::Variance => {
            let s1 = get(ElementRole::Sum).map(signed);
            let n = get(ElementRole::Count).map(|c| c.0);
            let s2 = get(ElementRole::SumSquares).map(signed);
            out.sum = s1.map(|s| s as f64 / scale);
            out.count = n;
            if let (Some(s1), Some(n)) = (s1, n) {
                if n > 0 {
                    out.mean = Some(s1 as f64 / n as f64 / scale);
                    if let Some(s2) = s2 {
                        // E(x^2) - E(x)^2 scaled by n^2 to stay in integers
                        let num = (n as i128) * s2 - s1 * s1;
                        let var = num as f64 / ((n as f64) * (n as f64)) / (scale * scale);
                        out.variance = Some(var.max(0.0));
                    }
                }
            }
        }
        EncodingKind::Histogram { .. } | EncodingKind::OneHot { .. } => {
            if aggregate.iter().all(Option::is_some) {
                // noised counts can fall below zero; clamp them
                let h = HistogramStats {
                    bins: aggregate.iter().map(|v| signed(v.unwrap()).max(0) as u64).collect(),
                    midpoints: spec.bin_midpoints(),
                };
                out.count = Some(h.total());
                out.median = h.percentile(50.0);
                out.min = h.min();
                out.max = h.max();
                out.mode = h.mode();
                out.range = match (out.min, out.max) {
                    (Some(a), Some(b)) => Some(b - a),
                    _ => None,
                };
                out.histogram = Some(h);
            }
        }
        EncodingKind::PredicateThreshold { .. } => {
            out.above_threshold_sum = get(ElementRole::Above).map(|v| signed(v) as f64 / scale);
            out.below_threshold_sum = get(ElementRole::Below).map(|v| signed(v) as f64 / scale);
        }
    }
    Ok(out)
}

/// Element-wise modular sum of encodings.
pub fn aggregate<'a, I>(vectors: I, width: usize, modulus: Modulus) -> Vec<RingElement>
where
    I: IntoIterator<Item = &'a EncodedVector>,
{
    let mut acc = vec![RingElement(0); width];
    for v in vectors {
        modulus.add_assign_vec(&mut acc, &v.elements);
    }
    acc
}
