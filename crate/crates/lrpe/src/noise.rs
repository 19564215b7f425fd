//! Measurement noise models applied in the sinogram domain.
//!
//! Per-entry draws come from a counter-based generator keyed on
//! (seed, entry index), so evaluation order cannot change the result.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::image::Sinogram;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseKind {
    /// Additive white Gaussian noise with sigma = level * mean(|b|).
    GaussianPercent,
    /// Photon-counting noise: b -> -ln(max(Poisson(I0 * exp(-b)), 1) / I0)
    /// with I0 = level incident photons.
    PoissonPhotons,
    /// Fraction `level` of entries replaced, half by the sinogram maximum
    /// and half by zero.
    SaltPepper,
}

impl NoiseKind {
    pub fn name(&self) -> &'static str {
        match self {
            NoiseKind::GaussianPercent => "gaussian_percent",
            NoiseKind::PoissonPhotons => "poisson_photons",
            NoiseKind::SaltPepper => "salt_pepper",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian_percent" => Ok(NoiseKind::GaussianPercent),
            "poisson_photons" => Ok(NoiseKind::PoissonPhotons),
            "salt_pepper" => Ok(NoiseKind::SaltPepper),
            other => Err(Error::Config(format!("unknown noise kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Percent fraction p, photon count I0, or corrupted fraction.
    pub level: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.level > 0.0) {
            return Err(Error::Parameter("noise level must be positive".into()));
        }
        if self.kind == NoiseKind::SaltPepper && self.level >= 1.0 {
            return Err(Error::Parameter("salt_pepper level must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

fn entry_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn add_noise(s: &Sinogram, spec: &NoiseSpec) -> Result<Sinogram> {
    spec.validate()?;
    s.validate()?;
    let mut out = s.clone();
    match spec.kind {
        NoiseKind::GaussianPercent => {
            let mean_abs = s.data.iter().map(|v| v.abs()).sum::<f64>() / s.data.len().max(1) as f64;
            let sigma = spec.level * mean_abs;
            for (i, v) in out.data.iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(&mut entry_rng(spec.seed, i));
                *v += sigma * z;
            }
        }
        NoiseKind::PoissonPhotons => {
            let i0 = spec.level;
            for (i, v) in out.data.iter_mut().enumerate() {
                let lambda = i0 * (-*v).exp();
                let draw = if lambda > 0.0 {
                    Poisson::new(lambda)
                        .map_err(|e| Error::Parameter(format!("poisson rate: {e}")))?
                        .sample(&mut entry_rng(spec.seed, i))
                } else {
                    0.0
                };
                // Clamp at one photon so the log stays finite.
                *v = -(draw.max(1.0) / i0).ln();
            }
        }
        NoiseKind::SaltPepper => {
            let n = s.data.len();
            let count = (spec.level * n as f64).round() as usize;
            let max = s.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            // Partial Fisher-Yates picks `count` distinct entries.
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let mut idx: Vec<usize> = (0..n).collect();
            for i in 0..count.min(n) {
                let j = rng.gen_range(i..n);
                idx.swap(i, j);
            }
            for (k, &i) in idx.iter().take(count).enumerate() {
                out.data[i] = if k < count.div_ceil(2) { max } else { 0.0 };
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_sinogram(n: usize) -> Sinogram {
        Sinogram::from_data(1, n, (0..n).map(|i| 0.5 + i as f64 / n as f64).collect()).unwrap()
    }

    #[test]
    fn zero_level_rejected() {
        let s = ramp_sinogram(8);
        let spec = NoiseSpec { kind: NoiseKind::GaussianPercent, level: 0.0, seed: 1 };
        assert!(add_noise(&s, &spec).is_err());
    }

    #[test]
    fn vanishing_gaussian_noise() {
        let s = ramp_sinogram(64);
        let spec = NoiseSpec { kind: NoiseKind::GaussianPercent, level: 1e-12, seed: 3 };
        let out = add_noise(&s, &spec).unwrap();
        for (a, b) in s.data.iter().zip(&out.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let s = ramp_sinogram(32);
        let spec = NoiseSpec { kind: NoiseKind::GaussianPercent, level: 0.05, seed: 9 };
        let a = add_noise(&s, &spec).unwrap();
        let b = add_noise(&s, &spec).unwrap();
        assert_eq!(a.data, b.data);
        let c = add_noise(&s, &NoiseSpec { seed: 10, ..spec }).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn salt_pepper_exact_count() {
        let s = ramp_sinogram(1000);
        let spec = NoiseSpec { kind: NoiseKind::SaltPepper, level: 0.1, seed: 5 };
        let out = add_noise(&s, &spec).unwrap();
        let changed = s.data.iter().zip(&out.data).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 100);
        let max = s.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let salt = out.data.iter().filter(|&&v| v == max).count();
        let pepper = out.data.iter().filter(|&&v| v == 0.0).count();
        assert!(salt >= 50 && pepper >= 50);
    }

    #[test]
    fn salt_pepper_level_bounds() {
        let s = ramp_sinogram(16);
        let spec = NoiseSpec { kind: NoiseKind::SaltPepper, level: 1.0, seed: 0 };
        assert!(add_noise(&s, &spec).is_err());
    }

    #[test]
    fn poisson_output_finite_even_at_zero_photons() {
        // Huge attenuation drives the rate to ~0; the one-photon clamp keeps
        // the log finite.
        let s = Sinogram::from_data(1, 4, vec![80.0, 90.0, 100.0, 120.0]).unwrap();
        let spec = NoiseSpec { kind: NoiseKind::PoissonPhotons, level: 100.0, seed: 2 };
        let out = add_noise(&s, &spec).unwrap();
        assert!(out.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn poisson_high_photon_count_small_perturbation() {
        // Variance oracle: with I0 = 1e9 and moderate b the relative
        // perturbation of the log-transformed count stays below 1e-3.
        let s = ramp_sinogram(64);
        for trial in 0..100 {
            let spec = NoiseSpec { kind: NoiseKind::PoissonPhotons, level: 1e9, seed: trial };
            let out = add_noise(&s, &spec).unwrap();
            for (a, b) in s.data.iter().zip(&out.data) {
                assert!((a - b).abs() / a.abs() < 1e-3, "trial {trial}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn gaussian_empirical_std_matches_sigma() {
        let n = 120_000;
        let s = Sinogram::from_data(1, n, vec![2.0; n]).unwrap();
        let spec = NoiseSpec { kind: NoiseKind::GaussianPercent, level: 0.05, seed: 11 };
        let out = add_noise(&s, &spec).unwrap();
        let sigma = 0.05 * 2.0;
        let var: f64 =
            s.data.iter().zip(&out.data).map(|(a, b)| (b - a) * (b - a)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        assert!((std - sigma).abs() / sigma < 0.05, "std {std} vs sigma {sigma}");
    }
}
