//! Clustered observations, treatment patterns, counterfactual weights and propensities.

pub(crate) mod law;
mod pattern;
mod propensity;
mod sample;
mod weight;

pub use pattern::{enumerate_patterns, TreatmentPattern, DEFAULT_PATTERN_CAP};
pub(crate) use pattern::{bit_of, check_cap};
pub use propensity::{eval_propensity, PropensityModel};
pub use sample::{ClusterSample, Dataset};
pub use weight::{
    eval_weight, sparse_support, CounterfactualWeight, Intervention, PatternEntry, Selector, UnitProbability,
};
