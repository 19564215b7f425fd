//! 3x3 stride-1 SAME-padded convolutions with hand-written forward,
//! input-gradient and weight-gradient passes.
//!
//! Every pass reduces to "accumulate a scaled, shifted copy of one plane
//! into another", which keeps the inner loops contiguous and lets the
//! compiler vectorize them.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::ChannelImage;

pub const KERNEL_SIZE: usize = 3;

/// One convolution layer: kernel [out_ch][in_ch][3][3] and per-output bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub out_ch: usize,
    pub in_ch: usize,
    /// Length out_ch * in_ch * 9, laid out ((o * in_ch + i) * 3 + kr) * 3 + kc.
    pub kernel: Vec<f64>,
    /// Length out_ch.
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(out_ch: usize, in_ch: usize) -> Self {
        ConvLayer {
            out_ch,
            in_ch,
            kernel: vec![0.0; out_ch * in_ch * KERNEL_SIZE * KERNEL_SIZE],
            bias: vec![0.0; out_ch],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.len() != self.out_ch * self.in_ch * 9 || self.bias.len() != self.out_ch {
            return Err(Error::DimensionMismatch("conv layer buffer sizes".into()));
        }
        if !self.kernel.iter().chain(&self.bias).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("conv layer weights".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn tap(&self, o: usize, i: usize, kr: usize, kc: usize) -> f64 {
        self.kernel[((o * self.in_ch + i) * KERNEL_SIZE + kr) * KERNEL_SIZE + kc]
    }

    #[inline]
    pub fn tap_mut(&mut self, o: usize, i: usize, kr: usize, kc: usize) -> &mut f64 {
        &mut self.kernel[((o * self.in_ch + i) * KERNEL_SIZE + kr) * KERNEL_SIZE + kc]
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }
}

/// dst += k * shift(src by (dr, dc)), zero outside the plane.
#[inline]
fn add_scaled_shifted(dst: &mut [f64], src: &[f64], k: f64, h: usize, w: usize, dr: isize, dc: isize) {
    let r_lo = (-dr).max(0) as usize;
    let r_hi = (h as isize - dr.max(0)) as usize;
    let c_lo = (-dc).max(0) as usize;
    let c_hi = (w as isize - dc.max(0)) as usize;
    if c_lo >= c_hi {
        return;
    }
    for r in r_lo..r_hi {
        let sr = (r as isize + dr) as usize * w;
        let dst_row = &mut dst[r * w + c_lo..r * w + c_hi];
        let src_row = &src[(sr as isize + c_lo as isize + dc) as usize
            ..(sr as isize + c_hi as isize + dc) as usize];
        for (d, s) in dst_row.iter_mut().zip(src_row) {
            *d += k * *s;
        }
    }
}

/// sum over the plane of g[r][c] * x[r + dr][c + dc], zero outside.
#[inline]
fn dot_shifted(g: &[f64], x: &[f64], h: usize, w: usize, dr: isize, dc: isize) -> f64 {
    let r_lo = (-dr).max(0) as usize;
    let r_hi = (h as isize - dr.max(0)) as usize;
    let c_lo = (-dc).max(0) as usize;
    let c_hi = (w as isize - dc.max(0)) as usize;
    if c_lo >= c_hi {
        return 0.0;
    }
    let mut acc = 0.0;
    for r in r_lo..r_hi {
        let sr = (r as isize + dr) as usize * w;
        let g_row = &g[r * w + c_lo..r * w + c_hi];
        let x_row =
            &x[(sr as isize + c_lo as isize + dc) as usize..(sr as isize + c_hi as isize + dc) as usize];
        for (a, b) in g_row.iter().zip(x_row) {
            acc += a * b;
        }
    }
    acc
}

fn conv_apply(layer: &ConvLayer, x: &ChannelImage, with_bias: bool) -> ChannelImage {
    debug_assert_eq!(x.channels, layer.in_ch);
    let (h, w) = (x.height, x.width);
    let mut out = ChannelImage::zeros(layer.out_ch, h, w);
    let plane = h * w;
    out.data
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(o, dst)| {
            if with_bias {
                dst.fill(layer.bias[o]);
            }
            for i in 0..layer.in_ch {
                let src = x.channel(i);
                for kr in 0..KERNEL_SIZE {
                    for kc in 0..KERNEL_SIZE {
                        let k = layer.tap(o, i, kr, kc);
                        if k != 0.0 {
                            add_scaled_shifted(dst, src, k, h, w, kr as isize - 1, kc as isize - 1);
                        }
                    }
                }
            }
        });
    out
}

/// y[o] = bias[o] + sum_i k[o][i] * x[i] (SAME padding).
pub fn conv_forward(layer: &ConvLayer, x: &ChannelImage) -> ChannelImage {
    conv_apply(layer, x, true)
}

/// Bias-free application: the Jacobian-vector product of the layer.
pub fn conv_jvp(layer: &ConvLayer, dx: &ChannelImage) -> ChannelImage {
    conv_apply(layer, dx, false)
}

/// Gradient with respect to the layer input (transposed convolution of the
/// upstream gradient).
pub fn conv_input_grad(layer: &ConvLayer, g: &ChannelImage) -> ChannelImage {
    debug_assert_eq!(g.channels, layer.out_ch);
    let (h, w) = (g.height, g.width);
    let plane = h * w;
    let mut out = ChannelImage::zeros(layer.in_ch, h, w);
    out.data
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(i, dst)| {
            for o in 0..layer.out_ch {
                let src = g.channel(o);
                for kr in 0..KERNEL_SIZE {
                    for kc in 0..KERNEL_SIZE {
                        let k = layer.tap(o, i, kr, kc);
                        if k != 0.0 {
                            // Flipped taps: contribution of x[p] to y[p - tap].
                            add_scaled_shifted(dst, src, k, h, w, 1 - kr as isize, 1 - kc as isize);
                        }
                    }
                }
            }
        });
    out
}

/// Per-layer parameter gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvGrad {
    pub fn zeros_like(layer: &ConvLayer) -> Self {
        ConvGrad { kernel: vec![0.0; layer.kernel.len()], bias: vec![0.0; layer.bias.len()] }
    }

    pub fn add_assign(&mut self, other: &ConvGrad) {
        for (a, b) in self.kernel.iter_mut().zip(&other.kernel) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

/// Gradients of the loss with respect to kernel taps and biases, given the
/// layer input `x` and upstream gradient `g` at the layer output.
pub fn conv_weight_grad(layer: &ConvLayer, x: &ChannelImage, g: &ChannelImage) -> ConvGrad {
    debug_assert_eq!(x.channels, layer.in_ch);
    debug_assert_eq!(g.channels, layer.out_ch);
    let (h, w) = (x.height, x.width);
    let mut grad = ConvGrad::zeros_like(layer);
    let per_out = layer.in_ch * KERNEL_SIZE * KERNEL_SIZE;
    grad.kernel
        .par_chunks_mut(per_out)
        .zip(grad.bias.par_iter_mut())
        .enumerate()
        .for_each(|(o, (kchunk, bias))| {
            let gp = g.channel(o);
            *bias = gp.iter().sum();
            for i in 0..layer.in_ch {
                let xp = x.channel(i);
                for kr in 0..KERNEL_SIZE {
                    for kc in 0..KERNEL_SIZE {
                        kchunk[(i * KERNEL_SIZE + kr) * KERNEL_SIZE + kc] =
                            dot_shifted(gp, xp, h, w, kr as isize - 1, kc as isize - 1);
                    }
                }
            }
        });
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer_1x1_center(k: f64, bias: f64) -> ConvLayer {
        let mut l = ConvLayer::zeros(1, 1);
        *l.tap_mut(0, 0, 1, 1) = k;
        l.bias[0] = bias;
        l
    }

    #[test]
    fn center_tap_scales() {
        let l = layer_1x1_center(2.0, 0.5);
        let x = ChannelImage::from_planes(2, 2, &[&[1.0, 2.0, 3.0, 4.0]]).unwrap();
        let y = conv_forward(&l, &x);
        assert_eq!(y.data, vec![2.5, 4.5, 6.5, 8.5]);
    }

    #[test]
    fn shifted_tap_uses_zero_padding() {
        // Tap (0, 1) reads the pixel one row above (dr = -1).
        let mut l = ConvLayer::zeros(1, 1);
        *l.tap_mut(0, 0, 0, 1) = 1.0;
        let x = ChannelImage::from_planes(2, 2, &[&[1.0, 2.0, 3.0, 4.0]]).unwrap();
        let y = conv_forward(&l, &x);
        assert_eq!(y.data, vec![0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn input_grad_is_adjoint_of_jvp() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let mut l = ConvLayer::zeros(3, 2);
        for v in l.kernel.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let h = 5;
        let w = 4;
        let mut x = ChannelImage::zeros(2, h, w);
        let mut g = ChannelImage::zeros(3, h, w);
        for v in x.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        for v in g.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let jx = conv_jvp(&l, &x);
        let jtg = conv_input_grad(&l, &g);
        let lhs: f64 = jx.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&jtg.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12 * (lhs.abs() + rhs.abs()).max(1.0));
    }

    #[test]
    fn weight_grad_matches_finite_difference() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut l = ConvLayer::zeros(2, 2);
        for v in l.kernel.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let mut x = ChannelImage::zeros(2, 3, 3);
        let mut g = ChannelImage::zeros(2, 3, 3);
        for v in x.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        for v in g.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let grad = conv_weight_grad(&l, &x, &g);
        // loss = <conv(x), g>; compare dloss/dk against central differences.
        let h = 1e-6;
        for idx in [0usize, 7, 17, 35] {
            let mut lp = l.clone();
            lp.kernel[idx] += h;
            let mut lm = l.clone();
            lm.kernel[idx] -= h;
            let fp: f64 = conv_forward(&lp, &x).data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
            let fm: f64 = conv_forward(&lm, &x).data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - grad.kernel[idx]).abs() < 1e-6, "tap {idx}: {fd} vs {}", grad.kernel[idx]);
        }
    }
}
