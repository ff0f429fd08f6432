//! Time-decaying trust scores for asserted identity attributes.
//!
//! A single source contributes `w * 2^(-dt / half_life)`, optionally scaled
//! by an unavailability penalty; multiple sources combine by noisy-or,
//! `1 - prod(1 - s_i)`, so an extra source never lowers confidence. Service
//! providers gate access on per-attribute thresholds.

use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("re-certification time {last_recert} is after now {now}")]
    NegativeAge { last_recert: u64, now: u64 },
    #[error("half-life must be positive")]
    BadHalfLife,
    #[error("weight {0} outside (0, 1]")]
    BadWeight(f64),
    #[error("score {0} outside [0, 1]")]
    BadScore(f64),
    #[error("cannot aggregate an empty score list")]
    EmptyAggregate,
    #[error("no sources given for attribute {0:?}")]
    NoSources(String),
    #[error("attribute {0:?} is not covered by the service policy")]
    NotInPolicy(String),
}

/// Kinds of data owner, ranked by how authoritative they usually are.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceClass {
    Government,
    CreditBureau,
    Delivery,
    Social,
    Other,
}

/// Base weight per source class, each in (0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SourceWeightTable {
    weights: BTreeMap<SourceClass, f64>,
}

impl Default for SourceWeightTable {
    fn default() -> Self {
        let mut weights = BTreeMap::new();
        weights.insert(SourceClass::Government, 0.95);
        weights.insert(SourceClass::CreditBureau, 0.85);
        weights.insert(SourceClass::Delivery, 0.70);
        weights.insert(SourceClass::Social, 0.50);
        weights.insert(SourceClass::Other, 0.30);
        SourceWeightTable { weights }
    }
}

impl SourceWeightTable {
    pub fn set(&mut self, class: SourceClass, weight: f64) -> Result<(), Error> {
        if !(weight > 0.0 && weight <= 1.0) {
            return Err(Error::BadWeight(weight));
        }
        self.weights.insert(class, weight);
        Ok(())
    }

    pub fn weight(&self, class: SourceClass) -> f64 {
        *self.weights.get(&class).expect("table covers every class")
    }
}

/// A confidence value in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, serde::Serialize, serde::Deserialize)]
pub struct TrustScore(f64);

impl TrustScore {
    pub fn new(value: f64) -> Result<Self, Error> {
        if !(0.0..=1.0).contains(&value) || value.is_nan() {
            return Err(Error::BadScore(value));
        }
        Ok(TrustScore(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Decay and penalty knobs, configurable per deployment.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrustParams {
    /// Seconds for a score to halve. Default 180 days.
    pub half_life_seconds: f64,
    /// Factor applied when the source was unreachable.
    pub unavailability_penalty: f64,
    /// Factor applied to scores computed from provider-stored documents.
    pub staleness_factor: f64,
}

impl Default for TrustParams {
    fn default() -> Self {
        TrustParams {
            half_life_seconds: 180.0 * 86_400.0,
            unavailability_penalty: 0.5,
            staleness_factor: 0.9,
        }
    }
}

/// One source consulted for one attribute.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SourceObservation {
    pub owner_id: String,
    pub class: SourceClass,
    pub last_recert: u64,
    pub available: bool,
}

/// The assertion an identity provider hands to a service provider.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttributeAssertion {
    pub attribute_name: String,
    pub asserted_value: String,
    pub score: TrustScore,
    pub contributing_sources: Vec<SourceObservation>,
    pub issued_at: u64,
}

/// Per-attribute thresholds set by a service provider.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct ServicePolicy {
    pub claims: BTreeMap<String, ClaimRequirement>,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClaimRequirement {
    pub threshold: f64,
    pub mandatory: bool,
}

impl ServicePolicy {
    pub fn require(&mut self, attribute: &str, threshold: f64, mandatory: bool) -> Result<(), Error> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::BadScore(threshold));
        }
        self.claims.insert(attribute.to_string(), ClaimRequirement { threshold, mandatory });
        Ok(())
    }
}

/// Score contributed by a single source: base weight decayed by the time
/// since the last re-certification, with a penalty when unavailable.
pub fn single_source_score(
    weight: f64,
    last_recert: u64,
    now: u64,
    params: &TrustParams,
    available: bool,
) -> Result<TrustScore, Error> {
    if !(weight > 0.0 && weight <= 1.0) {
        return Err(Error::BadWeight(weight));
    }
    if params.half_life_seconds <= 0.0 {
        return Err(Error::BadHalfLife);
    }
    if now < last_recert {
        return Err(Error::NegativeAge { last_recert, now });
    }
    let age = (now - last_recert) as f64;
    let decay = (2.0f64).powf(-age / params.half_life_seconds);
    let penalty = if available { 1.0 } else { params.unavailability_penalty };
    TrustScore::new(weight * decay * penalty)
}

/// Noisy-or combination. Commutative, and never below the best input.
pub fn aggregate(scores: &[TrustScore]) -> Result<TrustScore, Error> {
    if scores.is_empty() {
        return Err(Error::EmptyAggregate);
    }
    let miss: f64 = scores.iter().map(|s| 1.0 - s.value()).product();
    TrustScore::new(1.0 - miss)
}

/// Compute the assertion for one attribute from every consulted source and
/// decide whether it clears the policy threshold.
pub fn assert_attribute(
    name: &str,
    value: &str,
    sources: &[SourceObservation],
    table: &SourceWeightTable,
    params: &TrustParams,
    now: u64,
    policy: &ServicePolicy,
) -> Result<(AttributeAssertion, bool), Error> {
    if sources.is_empty() {
        return Err(Error::NoSources(name.to_string()));
    }
    let requirement = policy.claims.get(name).ok_or_else(|| Error::NotInPolicy(name.to_string()))?;
    let mut scores = Vec::with_capacity(sources.len());
    for source in sources {
        scores.push(single_source_score(
            table.weight(source.class),
            source.last_recert,
            now,
            params,
            source.available,
        )?);
    }
    let score = aggregate(&scores)?;
    let granted = score.value() >= requirement.threshold;
    Ok((
        AttributeAssertion {
            attribute_name: name.to_string(),
            asserted_value: value.to_string(),
            score,
            contributing_sources: sources.to_vec(),
            issued_at: now,
        },
        granted,
    ))
}

/// A candidate source set recommended to reach a threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSet {
    /// Indices into the caller's catalog, ascending.
    pub indices: Vec<usize>,
    pub score: f64,
}

/// All minimal source subsets whose aggregate meets `threshold`, ordered by
/// subset size then descending score (ties by index order). Minimal means no
/// proper subset of the set also meets the threshold. Empty when even the
/// full catalog falls short.
pub fn recommend_sources(
    threshold: f64,
    catalog: &[(String, SourceClass, u64)],
    table: &SourceWeightTable,
    params: &TrustParams,
    now: u64,
) -> Result<Vec<SourceSet>, Error> {
    let mut singles = Vec::with_capacity(catalog.len());
    for (_, class, last_recert) in catalog {
        singles.push(single_source_score(table.weight(*class), *last_recert, now, params, true)?.value());
    }
    // Size-ascending search; any qualifying set containing an already
    // accepted set is non-minimal and skipped.
    let mut accepted: Vec<SourceSet> = Vec::new();
    for size in 1..=catalog.len() {
        let mut found_at_size: Vec<SourceSet> = Vec::new();
        for combo in combinations(catalog.len(), size) {
            if accepted.iter().any(|prior| prior.indices.iter().all(|i| combo.contains(i))) {
                continue;
            }
            let miss: f64 = combo.iter().map(|&i| 1.0 - singles[i]).product();
            let score = 1.0 - miss;
            if score >= threshold {
                found_at_size.push(SourceSet { indices: combo, score });
            }
        }
        found_at_size.sort_by(|a, b| {
            b.score.partial_cmp(&a.score).expect("scores are finite").then(a.indices.cmp(&b.indices))
        });
        accepted.extend(found_at_size);
    }
    Ok(accepted)
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(k);
    fn walk(start: usize, n: usize, k: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if current.len() == k {
            out.push(current.clone());
            return;
        }
        for i in start..n {
            current.push(i);
            walk(i + 1, n, k, current, out);
            current.pop();
        }
    }
    walk(0, n, k, &mut current, &mut out);
    out
}
