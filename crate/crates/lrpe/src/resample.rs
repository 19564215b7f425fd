//! Resolution coupling between the fine and coarse grids.
//!
//! `downsample` is the block-mean operator D: R^{N^2} -> R^{n^2};
//! `upsample_adjoint` is its exact transpose D^T (replication scaled by
//! 1/block^2), so <Du, v> = <u, D^T v> holds to machine precision.

use crate::error::{Error, Result};
use crate::geometry::{GeometryConfig, GridLevel};
use crate::image::Image;

fn block_factor(geom: &GeometryConfig, fine_side: usize, coarse_side: usize) -> Result<usize> {
    if fine_side != geom.fine_size || coarse_side != geom.coarse_size {
        return Err(Error::DimensionMismatch(format!(
            "image sides {fine_side}/{coarse_side} do not match geometry {}/{}",
            geom.fine_size, geom.coarse_size
        )));
    }
    if coarse_side == 0 || fine_side % coarse_side != 0 {
        return Err(Error::Geometry(format!(
            "fine size {fine_side} not divisible by coarse size {coarse_side}"
        )));
    }
    Ok(fine_side / coarse_side)
}

/// Block mean over (N/n) x (N/n) blocks; preserves constant images.
pub fn downsample(u: &Image, geom: &GeometryConfig) -> Result<Image> {
    let block = block_factor(geom, u.side, geom.coarse_size)?;
    let n = geom.coarse_size;
    let inv = 1.0 / (block * block) as f64;
    let mut out = Image::zeros(n, geom.pixel_pitch(GridLevel::Coarse));
    for r in 0..n {
        for c in 0..n {
            let mut acc = 0.0;
            for br in 0..block {
                for bc in 0..block {
                    acc += u.at(r * block + br, c * block + bc);
                }
            }
            *out.at_mut(r, c) = acc * inv;
        }
    }
    Ok(out)
}

/// Exact adjoint of `downsample`: each coarse value replicated into its
/// block, scaled by 1/block^2.
pub fn upsample_adjoint(u_l: &Image, geom: &GeometryConfig) -> Result<Image> {
    let block = block_factor(geom, geom.fine_size, u_l.side)?;
    let n = u_l.side;
    let inv = 1.0 / (block * block) as f64;
    let mut out = Image::zeros(geom.fine_size, geom.pixel_pitch(GridLevel::Fine));
    for r in 0..n {
        for c in 0..n {
            let v = u_l.at(r, c) * inv;
            for br in 0..block {
                for bc in 0..block {
                    *out.at_mut(r * block + br, c * block + bc) = v;
                }
            }
        }
    }
    Ok(out)
}
