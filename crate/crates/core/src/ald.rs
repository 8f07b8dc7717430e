//! Asymmetric Laplace distribution (ALD).
//!
//! Parameterized by location `mu`, scale `sigma` and asymmetry `kappa`:
//!
//! ```text
//! p(y) = 1 / (sigma (kappa + 1/kappa)) * exp(-(y - mu)/sigma * s * kappa^s),   s = sgn(y - mu)
//! ```
//!
//! For `kappa > 1` the left tail (y < mu) is the heavy one, so the mean sits
//! below the location: `E[y] = mu + sigma (1/kappa - kappa)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TcaError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AldParams {
    pub mu: f64,
    pub sigma: f64,
    pub kappa: f64,
}

impl AldParams {
    pub fn new(mu: f64, sigma: f64, kappa: f64) -> Result<Self> {
        if !mu.is_finite() {
            return Err(TcaError::InvalidInput(format!("location must be finite, got {mu}")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(TcaError::InvalidInput(format!("scale must be positive, got {sigma}")));
        }
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(TcaError::InvalidInput(format!("asymmetry must be positive, got {kappa}")));
        }
        Ok(Self { mu, sigma, kappa })
    }

    /// Log-density at `y`. `sgn(0)` is taken as +1.
    pub fn log_pdf(&self, y: f64) -> Result<f64> {
        if !y.is_finite() {
            return Err(TcaError::InvalidInput(format!("observation must be finite, got {y}")));
        }
        Ok(log_pdf_unchecked(self.mu, self.sigma, self.kappa, y))
    }

    pub fn pdf(&self, y: f64) -> Result<f64> {
        self.log_pdf(y).map(f64::exp)
    }

    pub fn mean(&self) -> f64 {
        self.mu + self.sigma * (1.0 / self.kappa - self.kappa)
    }

    pub fn variance(&self) -> f64 {
        let k2 = self.kappa * self.kappa;
        self.sigma * self.sigma * (1.0 + k2 * k2) / k2
    }

    /// `n` i.i.d. draws, reproducible for a given seed.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample_with(&mut rng)).collect()
    }

    /// One draw via the two-exponential mixture: the right branch (scale
    /// `sigma/kappa`) carries mass `1/(1+kappa^2)`, the left branch (scale
    /// `sigma*kappa`) the rest.
    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let right_mass = 1.0 / (1.0 + self.kappa * self.kappa);
        let u: f64 = rng.random();
        let e: f64 = rng.sample(Exp1);
        if u < right_mass {
            self.mu + self.sigma * e / self.kappa
        } else {
            self.mu - self.sigma * self.kappa * e
        }
    }
}

/// Log-density without validation; the likelihood hot path calls this.
#[inline]
pub fn log_pdf_unchecked(mu: f64, sigma: f64, kappa: f64, y: f64) -> f64 {
    let d = y - mu;
    let rate = if d >= 0.0 { kappa } else { -1.0 / kappa };
    -(sigma * (kappa + 1.0 / kappa)).ln() - d / sigma * rate
}

/// Asymmetry from the skew ratio `r = kappa - 1/kappa`, i.e. the positive
/// root of `kappa^2 - r kappa - 1 = 0`.
pub fn kappa_from_r(r: f64) -> Result<f64> {
    if !(r >= 0.0) || !r.is_finite() {
        return Err(TcaError::InvalidInput(format!("skew ratio must be >= 0, got {r}")));
    }
    Ok(0.5 * (r + (4.0 + r * r).sqrt()))
}
