//! Scan geometry: view angles, detector layout, ray endpoints.
//!
//! The reconstruction grid is a square of `fine_size` (or `coarse_size`)
//! pixels inscribed in the field-of-view circle of radius `fov_radius`, so
//! every ray chord through the grid is bounded by the FOV chord. The coarse
//! grid shares the field of view and the full ray set; only the pixel pitch
//! changes.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Beam {
    Parallel,
    Fan,
}

/// Which pixel grid a system matrix is built on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridLevel {
    Fine,
    Coarse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometryConfig {
    /// Fine grid pixels per side (N).
    pub fine_size: usize,
    /// Coarse grid pixels per side (n); must divide `fine_size`.
    pub coarse_size: usize,
    pub num_views: usize,
    pub num_bins: usize,
    /// First view angle, degrees.
    pub angle_start: f64,
    /// Upper end of the angular interval, degrees.
    pub angle_end: f64,
    /// Angular increment between views, degrees.
    pub angle_step: f64,
    pub beam: Beam,
    /// Source-to-rotation-center distance, mm (fan beam only).
    pub source_radius: f64,
    /// Detector cell spacing, mm, measured on the line through the center.
    pub detector_spacing: f64,
    /// Field-of-view radius, mm. The image square is inscribed in this circle.
    pub fov_radius: f64,
}

impl GeometryConfig {
    /// Parallel-beam scan with `num_views` evenly spread over [0, 180) degrees
    /// and a detector spanning the FOV diameter.
    pub fn parallel(
        fine_size: usize,
        coarse_size: usize,
        num_views: usize,
        num_bins: usize,
        fov_radius: f64,
    ) -> Self {
        GeometryConfig {
            fine_size,
            coarse_size,
            num_views,
            num_bins,
            angle_start: 0.0,
            angle_end: 180.0,
            angle_step: 180.0 / num_views.max(1) as f64,
            beam: Beam::Parallel,
            source_radius: 0.0,
            detector_spacing: 2.0 * fov_radius / num_bins.max(1) as f64,
            fov_radius,
        }
    }

    /// Limited-angle parallel scan: views at `angle_step`-degree increments
    /// covering [0, range_deg).
    pub fn limited_angle(
        fine_size: usize,
        coarse_size: usize,
        range_deg: f64,
        angle_step: f64,
        num_bins: usize,
        fov_radius: f64,
    ) -> Self {
        let num_views = (range_deg / angle_step).round().max(1.0) as usize;
        GeometryConfig {
            fine_size,
            coarse_size,
            num_views,
            num_bins,
            angle_start: 0.0,
            angle_end: range_deg,
            angle_step,
            beam: Beam::Parallel,
            source_radius: 0.0,
            detector_spacing: 2.0 * fov_radius / num_bins.max(1) as f64,
            fov_radius,
        }
    }

    /// Fan-beam scan over the full circle with a flat detector through the
    /// rotation center, sized so the fan covers the FOV.
    pub fn fan(
        fine_size: usize,
        coarse_size: usize,
        num_views: usize,
        num_bins: usize,
        fov_radius: f64,
        source_radius: f64,
    ) -> Self {
        // Offset (on the detector line) of the ray tangent to the FOV circle.
        let t_max = fov_radius * source_radius
            / (source_radius * source_radius - fov_radius * fov_radius).max(1e-12).sqrt();
        GeometryConfig {
            fine_size,
            coarse_size,
            num_views,
            num_bins,
            angle_start: 0.0,
            angle_end: 360.0,
            angle_step: 360.0 / num_views.max(1) as f64,
            beam: Beam::Fan,
            source_radius,
            detector_spacing: 2.02 * t_max / num_bins.max(1) as f64,
            fov_radius,
        }
    }

    pub fn with_detector_spacing(mut self, spacing: f64) -> Self {
        self.detector_spacing = spacing;
        self
    }

    pub fn with_angles(mut self, start: f64, end: f64, step: f64) -> Self {
        self.angle_start = start;
        self.angle_end = end;
        self.angle_step = step;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Geometry(m));
        if self.coarse_size < 1 || self.fine_size < self.coarse_size {
            return err(format!(
                "require fine_size >= coarse_size >= 1, got {} / {}",
                self.fine_size, self.coarse_size
            ));
        }
        if self.fine_size % self.coarse_size != 0 {
            return err(format!(
                "coarse_size {} must divide fine_size {}",
                self.coarse_size, self.fine_size
            ));
        }
        if self.num_views < 1 {
            return err("num_views must be >= 1".into());
        }
        if self.num_bins < 1 {
            return err("num_bins must be >= 1".into());
        }
        if !(self.angle_end > self.angle_start) {
            return err(format!(
                "angle_end {} must exceed angle_start {}",
                self.angle_end, self.angle_start
            ));
        }
        if !(self.angle_step > 0.0) {
            return err("angle_step must be positive".into());
        }
        if !(self.fov_radius > 0.0) {
            return err("fov_radius must be positive (zero-area pixels)".into());
        }
        if !(self.detector_spacing > 0.0) {
            return err("detector_spacing must be positive".into());
        }
        if self.beam == Beam::Fan && !(self.source_radius > self.fov_radius) {
            return err(format!(
                "fan beam requires source_radius {} > fov_radius {}",
                self.source_radius, self.fov_radius
            ));
        }
        Ok(())
    }

    /// Pixel pitch of the requested grid, mm. The image square is inscribed
    /// in the FOV circle: side = sqrt(2) * fov_radius.
    pub fn pixel_pitch(&self, level: GridLevel) -> f64 {
        let n = self.grid_size(level) as f64;
        std::f64::consts::SQRT_2 * self.fov_radius / n
    }

    pub fn grid_size(&self, level: GridLevel) -> usize {
        match level {
            GridLevel::Fine => self.fine_size,
            GridLevel::Coarse => self.coarse_size,
        }
    }

    /// Half side length of the image square, mm.
    pub fn half_side(&self) -> f64 {
        self.fov_radius / std::f64::consts::SQRT_2
    }

    /// Angle of view `v` in radians.
    pub fn view_angle(&self, v: usize) -> f64 {
        (self.angle_start + v as f64 * self.angle_step).to_radians()
    }

    /// Signed detector offset of bin `b`, mm; bins are symmetric about the
    /// ray through the rotation center.
    pub fn bin_offset(&self, b: usize) -> f64 {
        (b as f64 - (self.num_bins as f64 - 1.0) / 2.0) * self.detector_spacing
    }

    /// Endpoints of ray (view, bin), both outside the image square.
    ///
    /// Parallel beam: rays at view angle theta travel along
    /// d = (-sin theta, cos theta); the detector axis is e = (cos theta,
    /// sin theta). Fan beam: the source sits at -source_radius * d and rays
    /// pass through the detector point t_b * e on the line through the
    /// center.
    pub fn ray_endpoints(&self, view: usize, bin: usize) -> ((f64, f64), (f64, f64)) {
        let theta = self.view_angle(view);
        let (sin_t, cos_t) = theta.sin_cos();
        let dir = (-sin_t, cos_t);
        let axis = (cos_t, sin_t);
        let t = self.bin_offset(bin);
        match self.beam {
            Beam::Parallel => {
                let reach = 2.0 * self.fov_radius + t.abs();
                let c = (t * axis.0, t * axis.1);
                ((c.0 - reach * dir.0, c.1 - reach * dir.1), (c.0 + reach * dir.0, c.1 + reach * dir.1))
            }
            Beam::Fan => {
                let src = (-self.source_radius * dir.0, -self.source_radius * dir.1);
                let det = (t * axis.0, t * axis.1);
                let dx = det.0 - src.0;
                let dy = det.1 - src.1;
                let len = (dx * dx + dy * dy).sqrt();
                let reach = self.source_radius + 2.0 * self.fov_radius;
                let scale = reach / len;
                (src, (src.0 + dx * scale, src.1 + dy * scale))
            }
        }
    }

    /// Chord length of the FOV circle cut by ray (view, bin); the upper bound
    /// for any system-matrix row sum of this geometry.
    pub fn fov_chord(&self, view: usize, bin: usize) -> f64 {
        let ((x0, y0), (x1, y1)) = self.ray_endpoints(view, bin);
        // Distance from the origin to the ray line.
        let dx = x1 - x0;
        let dy = y1 - y0;
        let len = (dx * dx + dy * dy).sqrt();
        if len == 0.0 {
            return 0.0;
        }
        let dist = (x0 * y1 - x1 * y0).abs() / len;
        let r = self.fov_radius;
        if dist >= r {
            0.0
        } else {
            2.0 * (r * r - dist * dist).sqrt()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_defaults_validate() {
        let g = GeometryConfig::parallel(32, 8, 30, 48, 1.5);
        g.validate().unwrap();
        assert!((g.angle_step - 6.0).abs() < 1e-12);
    }

    #[test]
    fn coarse_must_divide_fine() {
        let g = GeometryConfig::parallel(32, 7, 30, 48, 1.5);
        assert!(g.validate().is_err());
    }

    #[test]
    fn fan_requires_source_outside_fov() {
        let mut g = GeometryConfig::fan(16, 4, 20, 24, 2.0, 6.0);
        g.validate().unwrap();
        g.source_radius = 1.0;
        assert!(g.validate().is_err());
    }

    #[test]
    fn vertical_ray_at_zero_degrees() {
        // At theta = 0 rays run along +y; bin offsets move along +x.
        let g = GeometryConfig::parallel(2, 1, 1, 2, std::f64::consts::SQRT_2)
            .with_detector_spacing(1.0);
        let ((x0, _), (x1, _)) = g.ray_endpoints(0, 0);
        assert!((x0 + 0.5).abs() < 1e-12);
        assert!((x1 + 0.5).abs() < 1e-12);
    }

    #[test]
    fn limited_angle_view_count() {
        let g = GeometryConfig::limited_angle(32, 8, 90.0, 2.0, 48, 1.5);
        assert_eq!(g.num_views, 45);
        let last = g.view_angle(g.num_views - 1).to_degrees();
        assert!(last < 90.0);
    }

    #[test]
    fn fov_chord_center_ray() {
        let g = GeometryConfig::parallel(4, 2, 2, 5, 2.0);
        // Center bin passes through the origin: chord = diameter.
        let chord = g.fov_chord(0, 2);
        assert!((chord - 4.0).abs() < 1e-12);
    }
}
