//! Elementary variational machinery: softplus parameterization of standard
//! deviations, reparameterized sampling and the closed-form Gaussian KL.
//!
//! Everything here is 64-bit regardless of the tensor storage type; `rho` for
//! a tiny `sigma` is large and negative and loses too much in 32 bits.

use crate::error::{Error, Result};

/// Stable `ln(1 + e^x)` via `max(x, 0) + ln(1 + e^(-|x|))`.
#[inline]
pub fn softplus_unchecked(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic sigmoid, the derivative of softplus.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let e = (-x.abs()).exp();
    if x >= 0.0 {
        1.0 / (1.0 + e)
    } else {
        e / (1.0 + e)
    }
}

/// `ln(e^sigma - 1)` for `sigma > 0`, without the checks of [`inverse_softplus`].
#[inline]
pub fn inverse_softplus_unchecked(sigma: f64) -> f64 {
    if sigma > 20.0 {
        // ln(e^s - 1) = s + ln(1 - e^-s)
        sigma + (-(-sigma).exp()).ln_1p()
    } else {
        sigma.exp_m1().ln()
    }
}

pub fn softplus(rho: f64) -> Result<f64> {
    if !rho.is_finite() {
        return Err(Error::invalid(format!("softplus of non-finite input {rho}")));
    }
    Ok(softplus_unchecked(rho))
}

pub fn inverse_softplus(sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!(
            "inverse_softplus requires a finite sigma > 0, got {sigma}"
        )));
    }
    Ok(inverse_softplus_unchecked(sigma))
}

/// One Bayesian scalar's trainable `(mu, rho)`; `sigma = softplus(rho)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariationalGaussian {
    mu: f64,
    rho: f64,
}

impl VariationalGaussian {
    pub fn new(mu: f64, rho: f64) -> Result<Self> {
        if !mu.is_finite() || !rho.is_finite() {
            return Err(Error::invalid(format!(
                "variational parameters must be finite, got mu={mu} rho={rho}"
            )));
        }
        Ok(Self { mu, rho })
    }

    /// Builds the pair from a mean and a positive standard deviation.
    pub fn from_mean_sigma(mu: f64, sigma: f64) -> Result<Self> {
        Self::new(mu, inverse_softplus(sigma)?)
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn sigma(&self) -> f64 {
        softplus_unchecked(self.rho)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPrior {
    mean: f64,
    sigma: f64,
}

impl GaussianPrior {
    pub fn new(mean: f64, sigma: f64) -> Result<Self> {
        if !mean.is_finite() || !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::invalid(format!(
                "prior needs finite mean and sigma > 0, got mean={mean} sigma={sigma}"
            )));
        }
        Ok(Self { mean, sigma })
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// A standard-normal variate used by the reparameterization trick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseDraw {
    pub epsilon: f64,
}

impl NoiseDraw {
    pub const ZERO: NoiseDraw = NoiseDraw { epsilon: 0.0 };

    pub fn new(epsilon: f64) -> Self {
        Self { epsilon }
    }
}

/// `mu + softplus(rho) * epsilon`.
#[inline]
pub fn sample_weight(vg: &VariationalGaussian, noise: NoiseDraw) -> f64 {
    vg.mu + vg.sigma() * noise.epsilon
}

/// `KL(q || p)` between two univariate Gaussians, in closed form.
pub fn kl_gaussian(q: &VariationalGaussian, p: &GaussianPrior) -> f64 {
    kl_terms(q.mu, q.sigma(), p.mean, p.sigma)
}

#[inline]
pub(crate) fn kl_terms(mu_q: f64, sigma_q: f64, mean_p: f64, sigma_p: f64) -> f64 {
    let d = mu_q - mean_p;
    (sigma_p / sigma_q).ln() + (sigma_q * sigma_q + d * d) / (2.0 * sigma_p * sigma_p) - 0.5
}

/// Partial derivatives of `kl_gaussian` with respect to `(mu, rho)`.
#[inline]
pub(crate) fn kl_grad(mu_q: f64, rho_q: f64, mean_p: f64, sigma_p: f64) -> (f64, f64) {
    let sigma_q = softplus_unchecked(rho_q);
    let var_p = sigma_p * sigma_p;
    let d_mu = (mu_q - mean_p) / var_p;
    let d_sigma = -1.0 / sigma_q + sigma_q / var_p;
    (d_mu, d_sigma * sigmoid(rho_q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseSource;
    use proptest::prelude::*;

    const SOFTPLUS_ONE: f64 = 1.313_261_687_518_222_8;
    // ln(e^0.05 - 1), 50-digit mpmath.
    const INV_SOFTPLUS_005: f64 = -2.970_628_109_057_377;

    #[test]
    fn softplus_examples() {
        assert_eq!(softplus(0.0).unwrap(), std::f64::consts::LN_2);
        assert!((softplus(30.0).unwrap() - 30.0).abs() < 1e-12);
        assert!((softplus(1.0).unwrap() - SOFTPLUS_ONE).abs() < 1e-15);
        assert!((softplus(700.0).unwrap() - 700.0).abs() < 1e-9);
        let tiny = softplus(-700.0).unwrap();
        assert!(tiny > 0.0 && tiny < 1e-300);
        assert!(softplus(f64::NAN).is_err());
        assert!(softplus(f64::INFINITY).is_err());
    }

    #[test]
    fn inverse_softplus_examples() {
        assert_eq!(inverse_softplus(std::f64::consts::LN_2).unwrap(), 0.0);
        assert!((inverse_softplus(0.05).unwrap() - INV_SOFTPLUS_005).abs() < 1e-14);
        assert!((inverse_softplus(SOFTPLUS_ONE).unwrap() - 1.0).abs() < 1e-10);
        assert!(inverse_softplus(0.0).is_err());
        assert!(inverse_softplus(-1.0).is_err());
    }

    #[test]
    fn sample_weight_examples() {
        let vg = VariationalGaussian::new(0.3, 5.0).unwrap();
        assert_eq!(sample_weight(&vg, NoiseDraw::ZERO), 0.3);
        let vg = VariationalGaussian::new(0.0, 0.0).unwrap();
        assert_eq!(sample_weight(&vg, NoiseDraw::new(1.0)), std::f64::consts::LN_2);
        let vg = VariationalGaussian::new(1.0, INV_SOFTPLUS_005).unwrap();
        assert!((sample_weight(&vg, NoiseDraw::new(-2.0)) - 0.9).abs() < 1e-9);
        assert!(VariationalGaussian::new(f64::NAN, 0.0).is_err());
        assert!(GaussianPrior::new(0.0, 0.0).is_err());
    }

    #[test]
    fn kl_examples() {
        let unit = VariationalGaussian::from_mean_sigma(0.0, 1.0).unwrap();
        let p0 = GaussianPrior::new(0.0, 1.0).unwrap();
        assert!(kl_gaussian(&unit, &p0).abs() < 1e-12);
        let p1 = GaussianPrior::new(1.0, 1.0).unwrap();
        assert!((kl_gaussian(&unit, &p1) - 0.5).abs() < 1e-12);
        let wide = VariationalGaussian::from_mean_sigma(0.0, 2.0).unwrap();
        assert!((kl_gaussian(&wide, &p0) - 0.806_852_819_440_054_7).abs() < 1e-12);
    }

    #[test]
    fn sampled_moments_match() {
        let vg = VariationalGaussian::new(0.7, -1.3).unwrap();
        let mut src = NoiseSource::new(17);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let w = sample_weight(&vg, src.draw());
            s += w;
            s2 += w * w;
        }
        let mean = s / n as f64;
        let std = (s2 / n as f64 - mean * mean).sqrt();
        assert!(((mean - vg.mu()) / vg.mu()).abs() < 5e-3);
        assert!(((std - vg.sigma()) / vg.sigma()).abs() < 5e-3);
    }

    #[test]
    fn kl_gradient_matches_central_differences() {
        let (m, s) = (0.4, 0.9);
        let f = |mu: f64, rho: f64| kl_terms(mu, softplus_unchecked(rho), m, s);
        let (mu, rho) = (0.1, -1.7);
        let (gm, gr) = kl_grad(mu, rho, m, s);
        let h = 1e-6;
        let nm = (f(mu + h, rho) - f(mu - h, rho)) / (2.0 * h);
        let nr = (f(mu, rho + h) - f(mu, rho - h)) / (2.0 * h);
        assert!((gm - nm).abs() < 1e-8);
        assert!((gr - nr).abs() < 1e-8);
    }

    proptest! {
        #[test]
        fn softplus_is_positive_and_increasing(a in -700.0f64..700.0, b in -700.0f64..700.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(softplus_unchecked(lo) > 0.0);
            if hi - lo > 1e-9 {
                prop_assert!(softplus_unchecked(lo) < softplus_unchecked(hi));
            }
        }

        #[test]
        fn softplus_round_trip(log_s in (1e-6f64).ln()..(50.0f64).ln()) {
            let s = log_s.exp();
            let back = softplus_unchecked(inverse_softplus(s).unwrap());
            prop_assert!(((back - s) / s).abs() < 1e-10);
        }

        #[test]
        fn kl_is_nonnegative(mu in -5.0f64..5.0, rho in -8.0f64..4.0, m in -5.0f64..5.0, sp in 0.01f64..5.0) {
            let q = VariationalGaussian::new(mu, rho).unwrap();
            let p = GaussianPrior::new(m, sp).unwrap();
            prop_assert!(kl_gaussian(&q, &p) >= -1e-12);
        }
    }
}
