use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::{PairedDataset, Split};

/// `Y = X + N(0, noise_std^2)` with `X ~ U(-1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Toy1dSpec {
    pub noise_std: f64,
}

impl Default for Toy1dSpec {
    fn default() -> Self {
        Self { noise_std: 0.25 }
    }
}

impl Toy1dSpec {
    pub fn validate(&self) -> Result<()> {
        if self.noise_std > 0.0 && self.noise_std.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "noise_std must be positive, got {}",
                self.noise_std
            )))
        }
    }
}

pub fn toy1d_generate<R: Rng + ?Sized>(
    spec: &Toy1dSpec,
    n: usize,
    split: Split,
    rng: &mut R,
) -> Result<PairedDataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let prior = Uniform::new_inclusive(-1.0, 1.0).expect("valid bounds");
    let noise = Normal::new(0.0, spec.noise_std).expect("positive std");
    let mut x = Array2::zeros((n, 1));
    let mut y = Array2::zeros((n, 1));
    for i in 0..n {
        let xi: f64 = prior.sample(rng);
        x[[i, 0]] = xi;
        y[[i, 0]] = xi + noise.sample(rng);
    }
    PairedDataset::new(x, y, split)
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Posterior density of `x` given `y_hat`: `N(y_hat, noise_std^2)` truncated to `[-1, 1]`.
pub fn toy1d_posterior_pdf(spec: &Toy1dSpec, x: f64, y_hat: f64) -> f64 {
    if !(-1.0..=1.0).contains(&x) {
        return 0.0;
    }
    let s = spec.noise_std;
    let mass = std_normal_cdf((1.0 - y_hat) / s) - std_normal_cdf((-1.0 - y_hat) / s);
    std_normal_pdf((x - y_hat) / s) / (s * mass)
}

/// Closed-form mean and standard deviation of the truncated-normal posterior.
pub fn toy1d_posterior_moments(spec: &Toy1dSpec, y_hat: f64) -> (f64, f64) {
    let s = spec.noise_std;
    let a = (-1.0 - y_hat) / s;
    let b = (1.0 - y_hat) / s;
    let z = std_normal_cdf(b) - std_normal_cdf(a);
    let (pa, pb) = (std_normal_pdf(a), std_normal_pdf(b));
    let shift = (pa - pb) / z;
    let mean = y_hat + s * shift;
    let var = s * s * (1.0 + (a * pa - b * pb) / z - shift * shift);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn outside_support_is_zero() {
        assert_eq!(toy1d_posterior_pdf(&Toy1dSpec::default(), 1.5, 0.0), 0.0);
    }

    #[test]
    fn symmetric_at_zero() {
        let spec = Toy1dSpec::default();
        for x in [0.1, 0.5, 0.9] {
            let l = toy1d_posterior_pdf(&spec, -x, 0.0);
            let r = toy1d_posterior_pdf(&spec, x, 0.0);
            assert!((l - r).abs() < 1e-15);
        }
        assert!(toy1d_posterior_moments(&spec, 0.0).0.abs() < 1e-15);
    }

    #[test]
    fn seeded_generation_reproducible() {
        let spec = Toy1dSpec::default();
        let a = toy1d_generate(&spec, 5, Split::Train, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = toy1d_generate(&spec, 5, Split::Train, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert!(toy1d_generate(&spec, 0, Split::Train, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
    }
}
