//! Sparse system matrix: exact ray/pixel intersection lengths, forward and
//! back projection, and power-iteration spectral bounds of A^T A.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{GeometryConfig, GridLevel};
use crate::image::{dot, norm2, Image, Sinogram};

/// Sparse ray/pixel intersection operator in CSR form.
///
/// Row r corresponds to ray (view = r / num_bins, bin = r % num_bins);
/// column j to pixel j in row-major grid order. Values are intersection
/// lengths in mm.
#[derive(Debug, Clone)]
pub struct SystemMatrix {
    pub rows: usize,
    pub cols: usize,
    pub grid_size: usize,
    pub pixel_pitch: f64,
    /// Detector bins per view; `rows = num_views * num_bins`.
    pub num_bins: usize,
    pub row_offsets: Vec<u64>,
    pub col_indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SystemMatrix {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> (&[u32], &[f64]) {
        let lo = self.row_offsets[r] as usize;
        let hi = self.row_offsets[r + 1] as usize;
        (&self.col_indices[lo..hi], &self.values[lo..hi])
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        self.row(r).1.iter().sum()
    }

    /// y = A x. Slices must have length `cols` and `rows`.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            let mut acc = 0.0;
            for (&c, &v) in cols.iter().zip(vals) {
                acc += v * x[c as usize];
            }
            y[r] = acc;
        }
    }

    /// out = A^T s. Slices must have length `rows` and `cols`.
    pub fn apply_transpose(&self, s: &[f64], out: &mut [f64]) {
        debug_assert_eq!(s.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.fill(0.0);
        for r in 0..self.rows {
            let sv = s[r];
            if sv == 0.0 {
                continue;
            }
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                out[c as usize] += v * sv;
            }
        }
    }

    /// Exact sparse matrix-vector product b = A u.
    pub fn forward_project(&self, u: &Image) -> Result<Sinogram> {
        if u.side * u.side != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "image side {} does not match matrix cols {}",
                u.side, self.cols
            )));
        }
        let mut s = Sinogram::zeros(self.rows / self.num_bins, self.num_bins);
        self.apply(&u.data, &mut s.data);
        Ok(s)
    }

    /// Exact transpose product u = A^T s.
    pub fn back_project(&self, s: &Sinogram) -> Result<Image> {
        if s.num_views * s.num_bins != self.rows {
            return Err(Error::DimensionMismatch(format!(
                "sinogram {}x{} does not match matrix rows {}",
                s.num_views, s.num_bins, self.rows
            )));
        }
        let mut u = Image::zeros(self.grid_size, self.pixel_pitch);
        self.apply_transpose(&s.data, &mut u.data);
        Ok(u)
    }

    pub fn num_views(&self) -> usize {
        self.rows / self.num_bins
    }

    fn with_layout(
        geom: &GeometryConfig,
        grid_size: usize,
        pixel_pitch: f64,
        rows_entries: Vec<Vec<(u32, f64)>>,
    ) -> Self {
        let rows = rows_entries.len();
        let cols = grid_size * grid_size;
        let nnz: usize = rows_entries.iter().map(Vec::len).sum();
        let mut row_offsets = Vec::with_capacity(rows + 1);
        let mut col_indices = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        row_offsets.push(0u64);
        for entries in rows_entries {
            for (c, v) in entries {
                col_indices.push(c);
                values.push(v);
            }
            row_offsets.push(col_indices.len() as u64);
        }
        SystemMatrix {
            rows,
            cols,
            grid_size,
            pixel_pitch,
            row_offsets,
            col_indices,
            values,
            num_bins: geom.num_bins,
        }
    }
}

/// Incremental (Siddon-style) traversal of one ray across an n x n grid of
/// pitch `pitch` centered on the origin. Returns (column index, length in mm)
/// pairs sorted by column.
pub fn trace_ray(n: usize, pitch: f64, p0: (f64, f64), p1: (f64, f64)) -> Vec<(u32, f64)> {
    let half = 0.5 * n as f64 * pitch;
    let dx = p1.0 - p0.0;
    let dy = p1.1 - p0.1;
    let len = (dx * dx + dy * dy).sqrt();
    if len == 0.0 {
        return Vec::new();
    }

    // Parametric interval [a_min, a_max] clipped to the grid box.
    let mut a_min = 0.0f64;
    let mut a_max = 1.0f64;
    for (p, d) in [(p0.0, dx), (p0.1, dy)] {
        if d.abs() > 1e-14 * len {
            let a1 = (-half - p) / d;
            let a2 = (half - p) / d;
            a_min = a_min.max(a1.min(a2));
            a_max = a_max.min(a1.max(a2));
        } else if p < -half || p > half {
            return Vec::new();
        }
    }
    if a_min >= a_max {
        return Vec::new();
    }

    // All plane crossings inside the interval, for both axes.
    let mut events = Vec::with_capacity(2 * n + 4);
    events.push(a_min);
    events.push(a_max);
    for (p, d) in [(p0.0, dx), (p0.1, dy)] {
        if d.abs() > 1e-14 * len {
            for i in 0..=n {
                let plane = -half + i as f64 * pitch;
                let a = (plane - p) / d;
                if a > a_min && a < a_max {
                    events.push(a);
                }
            }
        }
    }
    events.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let inv_pitch = 1.0 / pitch;
    let mut entries: Vec<(u32, f64)> = Vec::with_capacity(events.len());
    for w in events.windows(2) {
        let (a, b) = (w[0], w[1]);
        let seg = (b - a) * len;
        if seg <= 1e-14 {
            continue;
        }
        let mid = 0.5 * (a + b);
        let x = p0.0 + mid * dx;
        let y = p0.1 + mid * dy;
        let c = (((x + half) * inv_pitch).floor() as isize).clamp(0, n as isize - 1) as usize;
        let r = (((y + half) * inv_pitch).floor() as isize).clamp(0, n as isize - 1) as usize;
        entries.push(((r * n + c) as u32, seg));
    }
    entries.sort_by_key(|e| e.0);
    // Merge duplicate pixels produced by degenerate crossings.
    let mut merged: Vec<(u32, f64)> = Vec::with_capacity(entries.len());
    for (c, v) in entries {
        match merged.last_mut() {
            Some(last) if last.0 == c => last.1 += v,
            _ => merged.push((c, v)),
        }
    }
    merged
}

/// Build the system matrix for the requested grid. The coarse grid reuses
/// the identical source/detector positions; only the pixel pitch changes.
pub fn build_system_matrix(geom: &GeometryConfig, level: GridLevel) -> Result<SystemMatrix> {
    geom.validate()?;
    let n = geom.grid_size(level);
    let pitch = geom.pixel_pitch(level);
    if !(pitch > 0.0) {
        return Err(Error::Geometry("zero-area pixels".into()));
    }
    let rows = geom.num_views * geom.num_bins;
    let entries: Vec<Vec<(u32, f64)>> = (0..rows)
        .into_par_iter()
        .map(|r| {
            let (p0, p1) = geom.ray_endpoints(r / geom.num_bins, r % geom.num_bins);
            trace_ray(n, pitch, p0, p1)
        })
        .collect();
    let m = SystemMatrix::with_layout(geom, n, pitch, entries);
    if m.nnz() == 0 {
        return Err(Error::Geometry("every ray misses the image grid".into()));
    }
    Ok(m)
}

/// Spectral bounds of A^T A from power iteration.
#[derive(Debug, Clone, Copy)]
pub struct SpectralBounds {
    /// Estimate of lambda_max(A^T A).
    pub lambda_max: f64,
    /// Estimate of lambda_min(A^T A); reported as exactly 0 when the shifted
    /// estimate falls below 1e-8 * lambda_max (rank-deficient system).
    pub lambda_min: f64,
    /// Final Rayleigh-quotient residuals of the two iterations.
    pub residual_max: f64,
    pub residual_min: f64,
    /// False when either iteration hit the iteration cap before its residual
    /// dropped below tolerance; estimates are still the best seen.
    pub converged: bool,
}

/// Power iteration for lambda_max(A^T A), then a shifted iteration
/// (v -> L v - A^T A v) for lambda_min.
pub fn spectral_bounds(a: &SystemMatrix, iters: usize, seed: u64) -> Result<SpectralBounds> {
    if iters < 1 {
        return Err(Error::Parameter("spectral_bounds requires iters >= 1".into()));
    }
    let normal_op = |v: &[f64], scratch: &mut [f64], out: &mut [f64]| {
        a.apply(v, scratch);
        a.apply_transpose(scratch, out);
    };
    let mut scratch = vec![0.0; a.rows];

    let (l, res_l, conv_l) = power_iterate(a.cols, iters, seed, |v, out| {
        normal_op(v, &mut scratch, out)
    });

    let (shifted, res_m, conv_m) = power_iterate(a.cols, iters, seed.wrapping_add(1), |v, out| {
        normal_op(v, &mut scratch, out);
        for (o, vi) in out.iter_mut().zip(v) {
            *o = l * vi - *o;
        }
    });
    let mut mu = (l - shifted).max(0.0);
    if mu < 1e-8 * l {
        mu = 0.0;
    }

    Ok(SpectralBounds {
        lambda_max: l,
        lambda_min: mu,
        residual_max: res_l,
        residual_min: res_m,
        converged: conv_l && conv_m,
    })
}

/// Returns (largest eigenvalue estimate, final residual, converged) of the
/// symmetric positive semidefinite operator `op`.
fn power_iterate(
    dim: usize,
    iters: usize,
    seed: u64,
    mut op: impl FnMut(&[f64], &mut [f64]),
) -> (f64, f64, bool) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let nv = norm2(&v);
    for x in v.iter_mut() {
        *x /= nv;
    }
    let mut w = vec![0.0; dim];
    let mut lambda = 0.0;
    let mut residual = f64::INFINITY;
    let tol = 1e-13;
    for _ in 0..iters {
        op(&v, &mut w);
        lambda = dot(&v, &w);
        let mut res2 = 0.0;
        for (wi, vi) in w.iter().zip(&v) {
            let d = wi - lambda * vi;
            res2 += d * d;
        }
        residual = res2.sqrt();
        let nw = norm2(&w);
        if nw == 0.0 {
            // Operator annihilated the iterate: eigenvalue 0 along v.
            return (lambda.max(0.0), residual, true);
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / nw;
        }
        if residual <= tol * lambda.abs().max(1e-300) {
            return (lambda.max(0.0), residual, true);
        }
    }
    (lambda.max(0.0), residual, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GeometryConfig;

    fn unit_pixel_geom() -> GeometryConfig {
        // 1x1 grid with 1 mm pitch: fov_radius = sqrt(2)/2.
        GeometryConfig::parallel(1, 1, 1, 1, std::f64::consts::FRAC_1_SQRT_2)
            .with_detector_spacing(1.0)
    }

    #[test]
    fn unit_pixel_chord_is_one() {
        let a = build_system_matrix(&unit_pixel_geom(), GridLevel::Fine).unwrap();
        assert_eq!(a.rows, 1);
        assert_eq!(a.cols, 1);
        let (cols, vals) = a.row(0);
        assert_eq!(cols, &[0]);
        assert!((vals[0] - 1.0).abs() < 1e-12, "a00 = {}", vals[0]);
    }

    #[test]
    fn two_by_two_vertical_ray() {
        // Bin 0 at offset -0.5 runs vertically through the left column.
        let g = GeometryConfig::parallel(2, 1, 1, 2, std::f64::consts::SQRT_2)
            .with_detector_spacing(1.0);
        let a = build_system_matrix(&g, GridLevel::Fine).unwrap();
        let (cols, vals) = a.row(0);
        assert_eq!(cols, &[0, 2]);
        for v in vals {
            assert!((v - 1.0).abs() < 1e-12, "length = {v}");
        }
    }

    #[test]
    fn forward_zero_and_scaling() {
        let a = build_system_matrix(&unit_pixel_geom(), GridLevel::Fine).unwrap();
        let zero = Image::zeros(1, 1.0);
        assert_eq!(a.forward_project(&zero).unwrap().data, vec![0.0]);
        let u = Image::from_data(1, 1.0, vec![2.0]).unwrap();
        let s = a.forward_project(&u).unwrap();
        assert!((s.data[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn back_project_trivial() {
        let a = build_system_matrix(&unit_pixel_geom(), GridLevel::Fine).unwrap();
        let s = Sinogram::from_data(1, 1, vec![3.0]).unwrap();
        let u = a.back_project(&s).unwrap();
        assert!((u.data[0] - 3.0).abs() < 1e-12);
        let z = Sinogram::zeros(1, 1);
        assert_eq!(a.back_project(&z).unwrap().data, vec![0.0]);
    }

    #[test]
    fn forward_rejects_wrong_side() {
        let a = build_system_matrix(&unit_pixel_geom(), GridLevel::Fine).unwrap();
        let u = Image::zeros(2, 1.0);
        assert!(a.forward_project(&u).is_err());
    }

    #[test]
    fn spectral_bounds_unit_system() {
        let a = build_system_matrix(&unit_pixel_geom(), GridLevel::Fine).unwrap();
        let b = spectral_bounds(&a, 100, 7).unwrap();
        assert!((b.lambda_max - 1.0).abs() < 1e-10);
        assert!((b.lambda_min - 1.0).abs() < 1e-10);
        assert!(b.converged);
    }

    #[test]
    fn ray_missing_grid_is_empty() {
        let hits = trace_ray(2, 1.0, (-5.0, 10.0), (5.0, 10.0));
        assert!(hits.is_empty());
    }

    #[test]
    fn detector_entirely_off_grid_errors() {
        let g = GeometryConfig::parallel(2, 1, 1, 2, std::f64::consts::SQRT_2)
            .with_detector_spacing(1.0)
            .with_angles(0.0, 180.0, 180.0);
        let mut g = g;
        g.detector_spacing = 100.0; // both bins miss the 2 mm grid
        let err = build_system_matrix(&g, GridLevel::Fine);
        assert!(err.is_err());
    }
}
