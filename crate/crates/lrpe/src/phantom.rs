//! Synthetic ellipse phantoms used as ground truth.
//!
//! Phantom coordinates live in [-1, 1]^2 independent of pixel pitch; a pixel
//! takes the summed intensity of every ellipse containing its center,
//! clamped to [0, 1].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct Ellipse {
    pub center_x: f64,
    pub center_y: f64,
    pub semi_a: f64,
    pub semi_b: f64,
    /// Rotation in degrees, counterclockwise.
    pub rotation: f64,
    /// Additive intensity (may be negative; the raster is clamped).
    pub intensity: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (sin_r, cos_r) = self.rotation.to_radians().sin_cos();
        let dx = x - self.center_x;
        let dy = y - self.center_y;
        let u = dx * cos_r + dy * sin_r;
        let v = -dx * sin_r + dy * cos_r;
        (u / self.semi_a).powi(2) + (v / self.semi_b).powi(2) <= 1.0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EllipsePhantomSpec {
    pub ellipses: Vec<Ellipse>,
}

impl EllipsePhantomSpec {
    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.ellipses.iter().enumerate() {
            if !(e.semi_a > 0.0 && e.semi_b > 0.0) {
                return Err(Error::Parameter(format!("ellipse {i}: semi-axes must be positive")));
            }
        }
        Ok(())
    }

    pub fn value_at(&self, x: f64, y: f64) -> f64 {
        let sum: f64 = self
            .ellipses
            .iter()
            .filter(|e| e.contains(x, y))
            .map(|e| e.intensity)
            .sum();
        sum.clamp(0.0, 1.0)
    }

    /// Flat key-value text serialization: one `ellipse = cx,cy,a,b,rot,val`
    /// line per ellipse.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for e in &self.ellipses {
            out.push_str(&format!(
                "ellipse = {},{},{},{},{},{}\n",
                e.center_x, e.center_y, e.semi_a, e.semi_b, e.rotation, e.intensity
            ));
        }
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut ellipses = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected key = value", lineno + 1)))?;
            if key.trim() != "ellipse" {
                return Err(Error::Format(format!("line {}: unknown key {}", lineno + 1, key.trim())));
            }
            let fields: Vec<f64> = value
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
            if fields.len() != 6 {
                return Err(Error::Format(format!(
                    "line {}: ellipse needs 6 fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            ellipses.push(Ellipse {
                center_x: fields[0],
                center_y: fields[1],
                semi_a: fields[2],
                semi_b: fields[3],
                rotation: fields[4],
                intensity: fields[5],
            });
        }
        let spec = EllipsePhantomSpec { ellipses };
        spec.validate()?;
        Ok(spec)
    }
}

/// Rasterize by point membership of pixel centers; deterministic.
pub fn rasterize_phantom(spec: &EllipsePhantomSpec, side: usize, pixel_pitch: f64) -> Result<Image> {
    if side < 1 {
        return Err(Error::Parameter("side must be >= 1".into()));
    }
    spec.validate()?;
    let mut img = Image::zeros(side, pixel_pitch);
    let step = 2.0 / side as f64;
    for r in 0..side {
        let y = -1.0 + (r as f64 + 0.5) * step;
        for c in 0..side {
            let x = -1.0 + (c as f64 + 0.5) * step;
            *img.at_mut(r, c) = spec.value_at(x, y);
        }
    }
    Ok(img)
}

/// The standard ten-ellipse head phantom (modified contrast variant, values
/// already in [0, 1]).
pub fn shepp_logan_spec() -> EllipsePhantomSpec {
    let rows: [(f64, f64, f64, f64, f64, f64); 10] = [
        // (intensity, a, b, x0, y0, rotation)
        (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
        (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
        (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
        (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
        (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
        (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
        (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
        (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
        (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
        (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
    ];
    EllipsePhantomSpec {
        ellipses: rows
            .iter()
            .map(|&(intensity, a, b, x0, y0, rot)| Ellipse {
                center_x: x0,
                center_y: y0,
                semi_a: a,
                semi_b: b,
                rotation: rot,
                intensity,
            })
            .collect(),
    }
}

/// Random head-like phantom: one background disk plus `k_ellipses - 1`
/// random inclusions (some negative). Deterministic per seed; values in
/// [0, 1] by the raster clamp.
pub fn random_phantom_spec(seed: u64, k_ellipses: usize) -> Result<EllipsePhantomSpec> {
    if k_ellipses < 1 {
        return Err(Error::Parameter("k_ellipses must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ellipses = Vec::with_capacity(k_ellipses);
    ellipses.push(Ellipse {
        center_x: rng.gen_range(-0.08..0.08),
        center_y: rng.gen_range(-0.08..0.08),
        semi_a: rng.gen_range(0.65..0.9),
        semi_b: rng.gen_range(0.65..0.9),
        rotation: rng.gen_range(0.0..180.0),
        intensity: rng.gen_range(0.3..0.5),
    });
    for _ in 1..k_ellipses {
        ellipses.push(Ellipse {
            center_x: rng.gen_range(-0.55..0.55),
            center_y: rng.gen_range(-0.55..0.55),
            semi_a: rng.gen_range(0.08..0.4),
            semi_b: rng.gen_range(0.08..0.4),
            rotation: rng.gen_range(0.0..180.0),
            intensity: rng.gen_range(-0.25..0.55),
        });
    }
    Ok(EllipsePhantomSpec { ellipses })
}

pub fn random_phantom(seed: u64, side: usize, k_ellipses: usize, pixel_pitch: f64) -> Result<Image> {
    rasterize_phantom(&random_phantom_spec(seed, k_ellipses)?, side, pixel_pitch)
}
