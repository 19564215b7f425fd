//! Dense image / sinogram containers.
//!
//! Images are square attenuation maps stored row-major with row 0 at the
//! bottom of the field of view (y increasing with row index). Sinograms are
//! stored view-major: entry `(v, b)` lives at `v * num_bins + b`.

use crate::error::{Error, Result};

/// Square 2-D attenuation map.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub side: usize,
    /// Physical pixel size in mm.
    pub pixel_pitch: f64,
    /// Row-major, length `side * side`.
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(side: usize, pixel_pitch: f64) -> Self {
        Image { side, pixel_pitch, data: vec![0.0; side * side] }
    }

    pub fn from_data(side: usize, pixel_pitch: f64, data: Vec<f64>) -> Result<Self> {
        let img = Image { side, pixel_pitch, data };
        img.validate()?;
        Ok(img)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.side * self.side {
            return Err(Error::DimensionMismatch(format!(
                "image data length {} != side^2 = {}",
                self.data.len(),
                self.side * self.side
            )));
        }
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("image data".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.side + col]
    }

    #[inline]
    pub fn at_mut(&mut self, row: usize, col: usize) -> &mut f64 {
        &mut self.data[row * self.side + col]
    }
}

/// Projection measurements, one row of detector bins per view.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    pub num_views: usize,
    pub num_bins: usize,
    /// View-major, length `num_views * num_bins`.
    pub data: Vec<f64>,
}

impl Sinogram {
    pub fn zeros(num_views: usize, num_bins: usize) -> Self {
        Sinogram { num_views, num_bins, data: vec![0.0; num_views * num_bins] }
    }

    pub fn from_data(num_views: usize, num_bins: usize, data: Vec<f64>) -> Result<Self> {
        let s = Sinogram { num_views, num_bins, data };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.num_views * self.num_bins {
            return Err(Error::DimensionMismatch(format!(
                "sinogram data length {} != views*bins = {}",
                self.data.len(),
                self.num_views * self.num_bins
            )));
        }
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("sinogram data".into()));
        }
        Ok(())
    }

    pub fn view(&self, v: usize) -> &[f64] {
        &self.data[v * self.num_bins..(v + 1) * self.num_bins]
    }
}

/// Multi-channel raster used by the networks: `channels` planes of `h x w`.
///
/// Used both for image-domain stacks (h = w = N) and sinogram-domain stacks
/// (h = num_views, w = num_bins).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel-major, each channel row-major; length `channels * h * w`.
    pub data: Vec<f64>,
}

impl ChannelImage {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ChannelImage { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Stack single-channel planes; all planes must share the given shape.
    pub fn from_planes(height: usize, width: usize, planes: &[&[f64]]) -> Result<Self> {
        let n = height * width;
        let mut data = Vec::with_capacity(planes.len() * n);
        for (i, p) in planes.iter().enumerate() {
            if p.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "plane {i} has length {} != {n}",
                    p.len()
                )));
            }
            data.extend_from_slice(p);
        }
        Ok(ChannelImage { channels: planes.len(), height, width, data })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rejects_bad_length() {
        assert!(Image::from_data(2, 1.0, vec![0.0; 3]).is_err());
    }

    #[test]
    fn image_rejects_non_finite() {
        assert!(Image::from_data(1, 1.0, vec![f64::NAN]).is_err());
    }

    #[test]
    fn channel_slices_are_disjoint() {
        let mut c = ChannelImage::zeros(2, 2, 2);
        c.channel_mut(1)[0] = 5.0;
        assert_eq!(c.channel(0), &[0.0; 4]);
        assert_eq!(c.channel(1)[0], 5.0);
    }
}
