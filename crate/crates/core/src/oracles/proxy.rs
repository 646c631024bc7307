use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{OracleError, PureOracle, TabularOracle};
use crate::archspace::ArchitectureVector;

/// Truncated-training bias model: early in the search, densely skipped
/// architectures score higher than they deserve, plus evaluation noise. Both
/// effects decay as `exp(-step / decay)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProxyBiasSpec {
    pub beta0: f64,
    pub decay: f64,
    pub sigma0: f64,
    pub noise_seed: u64,
}

impl Default for ProxyBiasSpec {
    fn default() -> Self {
        Self {
            beta0: 0.3,
            decay: 200.0,
            sigma0: 0.1,
            noise_seed: 0,
        }
    }
}

impl ProxyBiasSpec {
    pub fn bias_at(&self, step: u64) -> f64 {
        self.beta0 * (-(step as f64) / self.decay).exp()
    }

    pub fn noise_at(&self, step: u64) -> f64 {
        self.sigma0 * (-(step as f64) / self.decay).exp()
    }
}

#[derive(Debug, Clone)]
pub struct ProxyOracle<B = TabularOracle> {
    base: B,
    spec: ProxyBiasSpec,
}

impl<B: PureOracle> ProxyOracle<B> {
    pub fn new(base: B, spec: ProxyBiasSpec) -> Result<Self, OracleError> {
        if !(spec.beta0 >= 0.0 && spec.sigma0 >= 0.0 && spec.decay > 0.0) {
            return Err(OracleError::Config(
                "proxy bias needs beta0 >= 0, sigma0 >= 0 and decay > 0".into(),
            ));
        }
        Ok(Self { base, spec })
    }

    pub fn base(&self) -> &B {
        &self.base
    }

    pub fn spec(&self) -> &ProxyBiasSpec {
        &self.spec
    }

    /// Standard normal draw keyed by `(noise_seed, arch, step)`.
    pub fn noise_draw(&self, arch: &ArchitectureVector, step: u64) -> f64 {
        let mut hasher = Sha256::new();
        hasher.update(self.spec.noise_seed.to_le_bytes());
        hasher.update(step.to_le_bytes());
        hasher.update(arch.encoding());
        let seed: [u8; 32] = hasher.finalize().into();
        StandardNormal.sample(&mut ChaCha8Rng::from_seed(seed))
    }

    /// Reward before clamping to `[0, 1]`.
    pub fn unclamped(&self, arch: &ArchitectureVector, step: u64) -> f64 {
        let base = self.base.evaluate(arch, step);
        let bias = self.spec.bias_at(step) * (arch.skips.density() - 0.5);
        let sigma = self.spec.noise_at(step);
        let noise = if sigma > 0.0 {
            sigma * self.noise_draw(arch, step)
        } else {
            0.0
        };
        base + bias + noise
    }
}

impl<B: PureOracle> PureOracle for ProxyOracle<B> {
    fn evaluate(&self, arch: &ArchitectureVector, step: u64) -> f64 {
        self.unclamped(arch, step).clamp(0.0, 1.0)
    }
}
