//! Numerical contraction certificates for the LRPE iteration map.
//!
//! Empirical fidelity:  gamma = 1 - eta (1 + mu) + eta eps1,
//! contractive iff eps1 < 1 + mu (strict).
//! Learned fidelity:    gamma = 1 - eta (1 + mu) + eta (eps1 + L eps2),
//! contractive iff eps1 + L eps2 < 1 + mu (strict).
//! Both require the step bound eta < 1 / (L + 1) for the formulas to hold,
//! with L and mu the extreme eigenvalues of A^T A.
//!
//! eps1 / eps2 are local Lipschitz estimates of the residual branches,
//! maximized over a sample of inputs; the certificate records the sample
//! count and is an empirical certificate, not a formal bound.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::equilibrium::{lrpe_step, FidelityMode, LrpeConfig, LrpeSystem};
use crate::error::{Error, Result};
use crate::image::{norm2, ChannelImage, Image, Sinogram};
use crate::nn::{jacobian_spectral_norm, NetworkWeights};
use crate::system::{spectral_bounds, SystemMatrix};

#[derive(Debug, Clone)]
pub struct ContractivityCertificate {
    /// lambda_max(A^T A).
    pub lambda_max: f64,
    /// lambda_min(A^T A), 0 for rank-deficient systems.
    pub lambda_min: f64,
    /// Lipschitz estimate of the image-domain residual branch (eps1).
    pub eps_reg: f64,
    /// Lipschitz estimate of the sinogram-domain residual branch (eps2);
    /// only meaningful for learned fidelity.
    pub eps_fid: Option<f64>,
    pub step_size: f64,
    pub gamma: f64,
    pub fidelity: FidelityMode,
    /// eta < 1 / (lambda_max + 1).
    pub step_bound_ok: bool,
    /// gamma < 1 (strict; the boundary gamma = 1 is not contractive).
    pub contractive: bool,
    pub sample_count: usize,
    /// False when spectral estimation failed to converge; estimates are
    /// still reported.
    pub verified: bool,
    /// Per-sample (eps1, eps2) estimates backing the maxima.
    pub eps_samples: Vec<(f64, Option<f64>)>,
}

impl ContractivityCertificate {
    /// Assemble a certificate from already-known constants, applying the
    /// theorem formula for the given fidelity mode.
    pub fn from_parts(
        lambda_max: f64,
        lambda_min: f64,
        eps_reg: f64,
        eps_fid: Option<f64>,
        step_size: f64,
        fidelity: FidelityMode,
    ) -> Self {
        let eta = step_size;
        let gamma = match fidelity {
            FidelityMode::Empirical => 1.0 - eta * (1.0 + lambda_min) + eta * eps_reg,
            FidelityMode::Learned => {
                let e2 = eps_fid.unwrap_or(0.0);
                1.0 - eta * (1.0 + lambda_min) + eta * (eps_reg + lambda_max * e2)
            }
        };
        ContractivityCertificate {
            lambda_max,
            lambda_min,
            eps_reg,
            eps_fid,
            step_size,
            gamma,
            fidelity,
            step_bound_ok: eta < 1.0 / (lambda_max + 1.0),
            contractive: gamma < 1.0,
            sample_count: 0,
            verified: true,
            eps_samples: Vec::new(),
        }
    }

    /// Flat key-value report.
    pub fn report(&self) -> String {
        let mut out = String::new();
        let theorem = match self.fidelity {
            FidelityMode::Empirical => "empirical_fidelity",
            FidelityMode::Learned => "learned_fidelity",
        };
        out.push_str(&format!("theorem = {theorem}\n"));
        out.push_str(&format!("lambda_max = {:.17e}\n", self.lambda_max));
        out.push_str(&format!("lambda_min = {:.17e}\n", self.lambda_min));
        out.push_str(&format!("eps_reg = {:.17e}\n", self.eps_reg));
        match self.eps_fid {
            Some(e) => out.push_str(&format!("eps_fid = {e:.17e}\n")),
            None => out.push_str("eps_fid = none\n"),
        }
        out.push_str(&format!("step_size = {:.17e}\n", self.step_size));
        out.push_str(&format!("gamma = {:.17e}\n", self.gamma));
        out.push_str(&format!("step_bound_ok = {}\n", self.step_bound_ok));
        out.push_str(&format!("contractive = {}\n", self.contractive));
        out.push_str(&format!("sample_count = {}\n", self.sample_count));
        out.push_str(&format!("verified = {}\n", self.verified));
        out
    }

    /// CSV of the per-sample epsilon estimates: `sample,eps_reg,eps_fid`.
    pub fn samples_csv(&self) -> String {
        let mut out = String::from("sample,eps_reg,eps_fid\n");
        for (i, (e1, e2)) in self.eps_samples.iter().enumerate() {
            match e2 {
                Some(e2) => out.push_str(&format!("{i},{e1:.17e},{e2:.17e}\n")),
                None => out.push_str(&format!("{i},{e1:.17e},\n")),
            }
        }
        out
    }
}

/// One input point at which the branch Lipschitz constants are probed.
#[derive(Debug, Clone)]
pub struct CertifySample {
    pub state: ChannelImage,
    pub prior: Image,
    pub measurement: Sinogram,
}

/// Estimate the certificate constants: L and mu from power iteration on
/// A^T A, eps1 (and eps2 in learned mode) as the maximum branch Jacobian
/// spectral norm over the samples.
pub fn certify(
    a: &SystemMatrix,
    w: &NetworkWeights,
    cfg: &LrpeConfig,
    samples: &[CertifySample],
    iters: usize,
    seed: u64,
) -> Result<ContractivityCertificate> {
    if samples.is_empty() {
        return Err(Error::Parameter("certify requires a nonempty sample set".into()));
    }
    cfg.validate()?;
    w.validate()?;
    let bounds = spectral_bounds(a, iters, seed)?;

    let n_p = cfg.state_channels;
    let mut eps_reg = 0.0f64;
    let mut eps_fid = 0.0f64;
    let mut eps_samples = Vec::with_capacity(samples.len());
    let mut verified = bounds.converged;
    for (i, sample) in samples.iter().enumerate() {
        let (h, wd) = (sample.state.height, sample.state.width);
        let mut reg_in = ChannelImage::zeros(n_p + 1, h, wd);
        reg_in.data[..n_p * h * wd].copy_from_slice(&sample.state.data);
        if cfg.use_prior {
            reg_in.channel_mut(n_p).copy_from_slice(&sample.prior.data);
        }
        let e1 = jacobian_spectral_norm(&w.image_net, &reg_in, iters, seed.wrapping_add(i as u64))?;
        eps_reg = eps_reg.max(e1);

        let e2 = match cfg.fidelity {
            FidelityMode::Empirical => None,
            FidelityMode::Learned => {
                let (views, bins) = (sample.measurement.num_views, sample.measurement.num_bins);
                let mut fid_in = ChannelImage::zeros(n_p + 1, views, bins);
                for c in 0..n_p {
                    let mut row = vec![0.0; a.rows];
                    a.apply(sample.state.channel(c), &mut row);
                    fid_in.channel_mut(c).copy_from_slice(&row);
                }
                fid_in.channel_mut(n_p).copy_from_slice(&sample.measurement.data);
                let e2 = jacobian_spectral_norm(
                    &w.sino_net,
                    &fid_in,
                    iters,
                    seed.wrapping_add(1000 + i as u64),
                )?;
                eps_fid = eps_fid.max(e2);
                Some(e2)
            }
        };
        if !e1.is_finite() || e2.map_or(false, |e| !e.is_finite()) {
            verified = false;
        }
        eps_samples.push((e1, e2));
    }

    let eps_fid_out = match cfg.fidelity {
        FidelityMode::Empirical => None,
        FidelityMode::Learned => Some(eps_fid),
    };
    let mut cert = ContractivityCertificate::from_parts(
        bounds.lambda_max,
        bounds.lambda_min,
        eps_reg,
        eps_fid_out,
        cfg.step_size,
        cfg.fidelity,
    );
    cert.sample_count = samples.len();
    cert.verified = verified;
    cert.eps_samples = eps_samples;
    Ok(cert)
}

/// Maximum observed ratio ||f(u') - f(u)|| / ||u' - u|| over random pairs
/// at several magnitudes, refined by a difference-quotient power iteration
/// from the steepest pair found. A lower estimate of the true Lipschitz
/// constant of the stage map.
pub fn measure_contraction(
    system: &LrpeSystem,
    w: &NetworkWeights,
    cfg: &LrpeConfig,
    b: &Sinogram,
    prior: &Image,
    pairs: usize,
    seed: u64,
) -> Result<f64> {
    if pairs < 1 {
        return Err(Error::Parameter("measure_contraction requires pairs >= 1".into()));
    }
    cfg.validate()?;
    let n = system.fine_size();
    let n_p = cfg.state_channels;
    let plane = n * n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let f = |u: &ChannelImage| lrpe_step(system, u, b, prior, w, cfg);

    let scales = [1.0, 0.1, 10.0];
    let mut best_ratio = 0.0f64;
    let mut best_pair: Option<(ChannelImage, ChannelImage)> = None;
    for p in 0..pairs {
        let scale = scales[p % scales.len()];
        // Base state: either around zero or around the replicated prior.
        let mut base = ChannelImage::zeros(n_p, n, n);
        if p % 2 == 1 && cfg.use_prior {
            for c in 0..n_p {
                base.channel_mut(c).copy_from_slice(&prior.data);
            }
        }
        for v in base.data.iter_mut() {
            *v += scale * rng.gen_range(-1.0..1.0);
        }
        let delta_scale = scale * 10f64.powi(-(((p / scales.len()) % 4) as i32));
        let mut delta = ChannelImage::zeros(n_p, n, n);
        for v in delta.data.iter_mut() {
            *v = delta_scale * rng.gen_range(-1.0..1.0);
        }
        let dn = norm2(&delta.data);
        if dn == 0.0 {
            // Degenerate pair: skip.
            continue;
        }
        let mut other = base.clone();
        for (o, d) in other.data.iter_mut().zip(&delta.data) {
            *o += d;
        }
        let fa = f(&base)?;
        let fb = f(&other)?;
        let mut diff2 = 0.0;
        for (a, c) in fa.data.iter().zip(&fb.data) {
            diff2 += (a - c) * (a - c);
        }
        let ratio = diff2.sqrt() / dn;
        if ratio > best_ratio {
            best_ratio = ratio;
            best_pair = Some((base, delta));
        }
    }

    // Power-iteration refinement of the steepest direction via central
    // difference quotients of the stage map; exact for affine maps.
    if let Some((base, mut dir)) = best_pair {
        let h = 1e-6 * (1.0 + norm2(&base.data));
        for _ in 0..80 {
            let dn = norm2(&dir.data);
            if dn == 0.0 {
                break;
            }
            let mut up = base.clone();
            let mut dnwn = base.clone();
            for i in 0..n_p * plane {
                let step = h * dir.data[i] / dn;
                up.data[i] += step;
                dnwn.data[i] -= step;
            }
            let fu = f(&up)?;
            let fd = f(&dnwn)?;
            let mut g = ChannelImage::zeros(n_p, n, n);
            let mut gnorm2 = 0.0;
            for i in 0..n_p * plane {
                let v = (fu.data[i] - fd.data[i]) / (2.0 * h);
                g.data[i] = v;
                gnorm2 += v * v;
            }
            let ratio = gnorm2.sqrt();
            if !ratio.is_finite() {
                break;
            }
            best_ratio = best_ratio.max(ratio);
            dir = g;
        }
    }

    Ok(best_ratio)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_formula_empirical() {
        // mu = 0, eps1 = 0.5, eta = 0.1: gamma = 1 - 0.1 + 0.05 = 0.95.
        let c = ContractivityCertificate::from_parts(
            2.0,
            0.0,
            0.5,
            None,
            0.1,
            FidelityMode::Empirical,
        );
        assert!((c.gamma - 0.95).abs() < 1e-12);
        assert!(c.contractive);
    }

    #[test]
    fn gamma_formula_single_pixel() {
        // L = mu = 1, eta = 0.1, eps1 = 0: gamma = 1 - 0.1 * 2 = 0.8.
        let c = ContractivityCertificate::from_parts(
            1.0,
            1.0,
            0.0,
            None,
            0.1,
            FidelityMode::Empirical,
        );
        assert!((c.gamma - 0.8).abs() < 1e-12);
        assert!(c.contractive);
        assert!(c.step_bound_ok);
    }

    #[test]
    fn boundary_gamma_not_contractive() {
        // eps1 + L eps2 = 1 + mu exactly: gamma = 1, excluded by the strict
        // inequality.
        let l = 2.0;
        let mu = 0.5;
        let eps1 = 0.5;
        let eps2 = (1.0 + mu - eps1) / l;
        let c = ContractivityCertificate::from_parts(
            l,
            mu,
            eps1,
            Some(eps2),
            0.05,
            FidelityMode::Learned,
        );
        assert!((c.gamma - 1.0).abs() < 1e-12);
        assert!(!c.contractive);
    }

    #[test]
    fn gamma_monotone_in_epsilons() {
        let base = ContractivityCertificate::from_parts(
            3.0,
            0.2,
            0.3,
            Some(0.1),
            0.05,
            FidelityMode::Learned,
        );
        let bigger_e1 = ContractivityCertificate::from_parts(
            3.0,
            0.2,
            0.4,
            Some(0.1),
            0.05,
            FidelityMode::Learned,
        );
        let bigger_e2 = ContractivityCertificate::from_parts(
            3.0,
            0.2,
            0.3,
            Some(0.2),
            0.05,
            FidelityMode::Learned,
        );
        assert!(bigger_e1.gamma > base.gamma);
        assert!(bigger_e2.gamma > base.gamma);
    }

    #[test]
    fn report_round_trips_key_values() {
        let c = ContractivityCertificate::from_parts(
            1.5,
            0.0,
            0.25,
            Some(0.05),
            0.1,
            FidelityMode::Learned,
        );
        let report = c.report();
        assert!(report.contains("theorem = learned_fidelity"));
        assert!(report.contains("contractive ="));
        for line in report.lines() {
            assert!(line.contains(" = "), "malformed line: {line}");
        }
    }
}
