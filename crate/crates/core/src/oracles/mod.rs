//! Reward oracles: an exactly enumerable tabular landscape, a biased proxy
//! wrapper, and a toy weight-sharing supernet.

mod proxy;
mod supernet;
mod tabular;

use num_bigint::BigUint;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archspace::{ArchitectureVector, SearchSpaceSpec};

pub use proxy::{ProxyBiasSpec, ProxyOracle};
pub use supernet::{DatasetSpec, SupernetError, ToySupernet, ToySupernetSpec};
pub use tabular::{
    enumerate_optimum, Enumeration, Interaction, TabularOracle, TabularOracleSpec,
    ENUMERATION_LIMIT,
};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("oracle failed on sample {index}: {message}")]
    Evaluation { index: usize, message: String },
    #[error("search space has {size} architectures, above the enumeration limit of {limit}")]
    TooLarge { size: BigUint, limit: u64 },
    #[error("oracle configuration: {0}")]
    Config(String),
}

impl OracleError {
    /// Index of the failing sample, for evaluation failures.
    pub fn sample_index(&self) -> Option<usize> {
        match self {
            OracleError::Evaluation { index, .. } => Some(*index),
            _ => None,
        }
    }
}

/// Reward source for a batch of architectures. Rewards lie in `[0, 1]` and
/// are returned in input order.
pub trait Oracle: Send {
    fn evaluate_batch(
        &mut self,
        archs: &[ArchitectureVector],
        step: u64,
    ) -> Result<Vec<f64>, OracleError>;
}

/// An oracle whose reward depends only on `(arch, step)`.
pub trait PureOracle: Sync + Send {
    fn evaluate(&self, arch: &ArchitectureVector, step: u64) -> f64;
}

impl<P: PureOracle> Oracle for P {
    fn evaluate_batch(
        &mut self,
        archs: &[ArchitectureVector],
        step: u64,
    ) -> Result<Vec<f64>, OracleError> {
        let this = &*self;
        Ok(archs.par_iter().map(|a| this.evaluate(a, step)).collect())
    }
}

/// Serializable oracle selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleConfig {
    Tabular(TabularOracleSpec),
    Proxy {
        base: TabularOracleSpec,
        #[serde(flatten)]
        bias: ProxyBiasSpec,
    },
    Supernet(ToySupernetSpec),
}

impl OracleConfig {
    /// Instantiates the oracle for `space`.
    pub fn build(&self, space: &SearchSpaceSpec) -> Result<Box<dyn Oracle>, OracleError> {
        Ok(match self {
            OracleConfig::Tabular(spec) => Box::new(TabularOracle::generate(spec, space)?),
            OracleConfig::Proxy { base, bias } => Box::new(ProxyOracle::new(
                TabularOracle::generate(base, space)?,
                bias.clone(),
            )?),
            OracleConfig::Supernet(spec) => Box::new(
                ToySupernet::new(spec.clone(), space)
                    .map_err(|e| OracleError::Config(e.to_string()))?,
            ),
        })
    }

    /// The pure tabular landscape underlying this oracle, if any.
    pub fn base_tabular(&self, space: &SearchSpaceSpec) -> Result<Option<TabularOracle>, OracleError> {
        match self {
            OracleConfig::Tabular(spec) | OracleConfig::Proxy { base: spec, .. } => {
                TabularOracle::generate(spec, space).map(Some)
            }
            OracleConfig::Supernet(_) => Ok(None),
        }
    }

    /// True when rewards are a deterministic function of `(arch, step)`.
    pub fn is_pure(&self) -> bool {
        !matches!(self, OracleConfig::Supernet(_))
    }
}
