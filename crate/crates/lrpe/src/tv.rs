//! Total-variation reconstruction via the Chambolle-Pock primal-dual scheme,
//! and the coarse-grid prior reconstructor built on top of it.
//!
//! Solves min_u 1/2 ||Au - b||^2 + lambda ||grad u||_1 with isotropic TV,
//! forward differences and Neumann boundaries.

use crate::error::{Error, Result};
use crate::geometry::GeometryConfig;
use crate::image::{norm2, Image, Sinogram};
use crate::system::{spectral_bounds, SystemMatrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TvParams {
    /// Balance weight of the TV term.
    pub lambda: f64,
    /// Primal step size.
    pub tau: f64,
    /// Dual step size.
    pub sigma: f64,
    pub iters: usize,
}

impl TvParams {
    /// Step sizes satisfying tau * sigma * ||K||^2 = 0.9 for the stacked
    /// operator K = (A, grad), given lambda_max(A^T A).
    pub fn balanced(lambda: f64, iters: usize, lambda_max: f64) -> Self {
        let norm_k2 = lambda_max + 8.0;
        let step = (0.9 / norm_k2).sqrt();
        TvParams { lambda, tau: step, sigma: step, iters }
    }

    fn validate(&self, norm_k2: f64) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Parameter("tv lambda must be positive".into()));
        }
        if !(self.tau > 0.0 && self.sigma > 0.0) {
            return Err(Error::Parameter("tv step sizes must be positive".into()));
        }
        if self.tau * self.sigma * norm_k2 > 1.0 + 1e-9 {
            return Err(Error::Parameter(format!(
                "tv step sizes violate tau*sigma*||K||^2 <= 1 (got {})",
                self.tau * self.sigma * norm_k2
            )));
        }
        Ok(())
    }
}

/// Forward differences with Neumann boundary: out channels (d/dx, d/dy).
fn gradient(u: &[f64], n: usize, gx: &mut [f64], gy: &mut [f64]) {
    for r in 0..n {
        for c in 0..n {
            let i = r * n + c;
            gx[i] = if c + 1 < n { u[i + 1] - u[i] } else { 0.0 };
            gy[i] = if r + 1 < n { u[i + n] - u[i] } else { 0.0 };
        }
    }
}

/// Adjoint of `gradient` (negative divergence): <grad u, z> = <u, grad^T z>.
fn gradient_transpose(gx: &[f64], gy: &[f64], n: usize, out: &mut [f64]) {
    out.fill(0.0);
    for r in 0..n {
        for c in 0..n {
            let i = r * n + c;
            if c + 1 < n {
                out[i] -= gx[i];
                out[i + 1] += gx[i];
            }
            if r + 1 < n {
                out[i] -= gy[i];
                out[i + n] += gy[i];
            }
        }
    }
}

/// Chambolle-Pock iterations; returns the final iterate and the per-iteration
/// primal residual ||u_{k+1} - u_k||.
pub fn tv_reconstruct(s: &Sinogram, a: &SystemMatrix, p: &TvParams) -> Result<(Image, Vec<f64>)> {
    if s.num_views * s.num_bins != a.rows {
        return Err(Error::DimensionMismatch(format!(
            "sinogram {}x{} does not match matrix rows {}",
            s.num_views, s.num_bins, a.rows
        )));
    }
    let bounds = spectral_bounds(a, 300, 0x7f3a)?;
    p.validate(bounds.lambda_max + 8.0)?;

    let n = a.grid_size;
    let m = a.cols;
    let mut u = vec![0.0f64; m];
    let mut u_bar = vec![0.0f64; m];
    let mut y = vec![0.0f64; a.rows];
    let mut zx = vec![0.0f64; m];
    let mut zy = vec![0.0f64; m];
    let mut gx = vec![0.0f64; m];
    let mut gy = vec![0.0f64; m];
    let mut au = vec![0.0f64; a.rows];
    let mut aty = vec![0.0f64; m];
    let mut div = vec![0.0f64; m];
    let mut trace = Vec::with_capacity(p.iters);

    for _ in 0..p.iters {
        // Dual ascent on the data term: prox of sigma * (1/2 ||. - b||^2)*.
        a.apply(&u_bar, &mut au);
        for ((yi, &aui), &bi) in y.iter_mut().zip(&au).zip(&s.data) {
            *yi = (*yi + p.sigma * (aui - bi)) / (1.0 + p.sigma);
        }
        // Dual ascent on TV: project onto the lambda ball, pixelwise.
        gradient(&u_bar, n, &mut gx, &mut gy);
        for i in 0..m {
            let px = zx[i] + p.sigma * gx[i];
            let py = zy[i] + p.sigma * gy[i];
            let mag = (px * px + py * py).sqrt();
            let scale = if mag > p.lambda { p.lambda / mag } else { 1.0 };
            zx[i] = px * scale;
            zy[i] = py * scale;
        }
        // Primal descent with over-relaxation theta = 1.
        a.apply_transpose(&y, &mut aty);
        gradient_transpose(&zx, &zy, n, &mut div);
        let mut delta2 = 0.0;
        for i in 0..m {
            let new = u[i] - p.tau * (aty[i] + div[i]);
            u_bar[i] = 2.0 * new - u[i];
            delta2 += (new - u[i]) * (new - u[i]);
            u[i] = new;
        }
        trace.push(delta2.sqrt());
    }
    Ok((Image { side: n, pixel_pitch: a.pixel_pitch, data: u }, trace))
}

/// Produces the low-resolution image fed to the prior channel. Implementors
/// may be classical solvers or learned reconstructors.
pub trait PriorReconstructor {
    fn reconstruct_coarse(
        &self,
        b: &Sinogram,
        geom: &GeometryConfig,
        a_coarse: &SystemMatrix,
    ) -> Result<Image>;

    fn name(&self) -> &'static str;
}

/// TV solve of the coarse system; the coarse problem has far fewer unknowns
/// than measurements, so a modest iteration budget suffices.
#[derive(Debug, Clone, Copy)]
pub struct TvPrior {
    pub lambda: f64,
    pub iters: usize,
}

impl Default for TvPrior {
    fn default() -> Self {
        TvPrior { lambda: 1e-3, iters: 300 }
    }
}

impl PriorReconstructor for TvPrior {
    fn reconstruct_coarse(
        &self,
        b: &Sinogram,
        _geom: &GeometryConfig,
        a_coarse: &SystemMatrix,
    ) -> Result<Image> {
        let bounds = spectral_bounds(a_coarse, 300, 0x7f3a)?;
        let params = TvParams::balanced(self.lambda, self.iters, bounds.lambda_max);
        let (img, _) = tv_reconstruct(b, a_coarse, &params)?;
        Ok(img)
    }

    fn name(&self) -> &'static str {
        "tv"
    }
}

/// Norm of the primal residual trace tail, used by callers that want a
/// convergence sanity check.
pub fn trace_tail_mean(trace: &[f64], tail: usize) -> f64 {
    if trace.is_empty() {
        return 0.0;
    }
    let k = trace.len().saturating_sub(tail);
    let t = &trace[k..];
    norm2(t) / (t.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GridLevel;
    use crate::system::build_system_matrix;

    #[test]
    fn gradient_adjoint_identity() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let n = 7;
        let u: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let zx: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let zy: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut gx = vec![0.0; n * n];
        let mut gy = vec![0.0; n * n];
        gradient(&u, n, &mut gx, &mut gy);
        let mut gt = vec![0.0; n * n];
        gradient_transpose(&zx, &zy, n, &mut gt);
        let lhs: f64 = gx.iter().zip(&zx).chain(gy.iter().zip(&zy)).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.iter().zip(&gt).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12 * (lhs.abs() + rhs.abs()).max(1.0));
    }

    #[test]
    fn zero_data_huge_lambda_gives_zero() {
        let g = GeometryConfig::parallel(8, 4, 6, 12, 1.0);
        let a = build_system_matrix(&g, GridLevel::Fine).unwrap();
        let s = Sinogram::zeros(6, 12);
        let bounds = spectral_bounds(&a, 200, 1).unwrap();
        let p = TvParams::balanced(100.0, 60, bounds.lambda_max);
        let (img, _) = tv_reconstruct(&s, &a, &p).unwrap();
        let max = img.data.iter().cloned().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-6, "max {max}");
    }

    #[test]
    fn single_pixel_least_squares_limit() {
        // 1-pixel system with a = 1, b = 5, lambda -> 0: u -> 5.
        let g = GeometryConfig::parallel(1, 1, 1, 1, std::f64::consts::FRAC_1_SQRT_2)
            .with_detector_spacing(1.0);
        let a = build_system_matrix(&g, GridLevel::Fine).unwrap();
        let s = Sinogram::from_data(1, 1, vec![5.0]).unwrap();
        let p = TvParams::balanced(1e-10, 4000, 1.0);
        let (img, _) = tv_reconstruct(&s, &a, &p).unwrap();
        assert!((img.data[0] - 5.0).abs() < 1e-6, "u = {}", img.data[0]);
    }

    #[test]
    fn step_size_invariant_enforced() {
        let g = GeometryConfig::parallel(8, 4, 6, 12, 1.0);
        let a = build_system_matrix(&g, GridLevel::Fine).unwrap();
        let s = Sinogram::zeros(6, 12);
        let p = TvParams { lambda: 1.0, tau: 10.0, sigma: 10.0, iters: 10 };
        assert!(tv_reconstruct(&s, &a, &p).is_err());
    }
}
