//! Three-layer residual blocks with an identity skip on the state channels,
//! their exact reverse-mode gradients, and power-iteration estimates of the
//! residual branch's Jacobian spectral norm.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{norm2, ChannelImage};
use crate::nn::activation::{activation, activation_deriv};
use crate::nn::conv::{
    conv_forward, conv_input_grad, conv_jvp, conv_weight_grad, ConvGrad, ConvLayer,
};

/// Hidden width of the canonical blocks (channel chain c_in -> 32 -> 32 -> c_out).
pub const HIDDEN_CHANNELS: usize = 32;

/// Weights of one residual block: out = skip + K3 phi(K2 phi(K1 x)).
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlockWeights {
    pub layers: [ConvLayer; 3],
}

impl ResidualBlockWeights {
    pub fn zeros(c_in: usize, hidden: usize, c_out: usize) -> Self {
        ResidualBlockWeights {
            layers: [
                ConvLayer::zeros(hidden, c_in),
                ConvLayer::zeros(hidden, hidden),
                ConvLayer::zeros(c_out, hidden),
            ],
        }
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.layers[2].out_ch
    }

    pub fn validate(&self) -> Result<()> {
        for l in &self.layers {
            l.validate()?;
        }
        if self.layers[0].out_ch != self.layers[1].in_ch
            || self.layers[1].out_ch != self.layers[2].in_ch
        {
            return Err(Error::DimensionMismatch("residual block channel chain".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn scale_kernels(&mut self, factor: f64) {
        for l in self.layers.iter_mut() {
            for v in l.kernel.iter_mut() {
                *v *= factor;
            }
        }
    }
}

fn map_activation(x: &ChannelImage) -> ChannelImage {
    let mut out = x.clone();
    for v in out.data.iter_mut() {
        *v = activation(*v);
    }
    out
}

fn mul_deriv_inplace(g: &mut ChannelImage, z: &ChannelImage) {
    for (gv, zv) in g.data.iter_mut().zip(&z.data) {
        *gv *= activation_deriv(*zv);
    }
}

/// Pre-activation and activation values recorded during a forward pass,
/// enough to replay gradients without recomputing the convolutions.
#[derive(Debug, Clone)]
pub struct BlockTape {
    pub z1: ChannelImage,
    pub a1: ChannelImage,
    pub z2: ChannelImage,
    pub a2: ChannelImage,
}

fn check_block_shapes(w: &ResidualBlockWeights, x: &ChannelImage, skip: &ChannelImage) -> Result<()> {
    w.validate()?;
    if x.channels != w.in_channels() {
        return Err(Error::DimensionMismatch(format!(
            "block input has {} channels, expected {}",
            x.channels,
            w.in_channels()
        )));
    }
    if skip.channels != w.out_channels() || skip.height != x.height || skip.width != x.width {
        return Err(Error::DimensionMismatch(format!(
            "block skip is {}x{}x{}, expected {}x{}x{}",
            skip.channels,
            skip.height,
            skip.width,
            w.out_channels(),
            x.height,
            x.width
        )));
    }
    Ok(())
}

/// out = skip + K3 phi(K2 phi(K1 x)).
pub fn block_forward(
    w: &ResidualBlockWeights,
    x: &ChannelImage,
    skip: &ChannelImage,
) -> Result<ChannelImage> {
    let (out, _) = block_forward_tape(w, x, skip)?;
    Ok(out)
}

/// Forward pass that also returns the tape needed by [`block_backward`].
pub fn block_forward_tape(
    w: &ResidualBlockWeights,
    x: &ChannelImage,
    skip: &ChannelImage,
) -> Result<(ChannelImage, BlockTape)> {
    check_block_shapes(w, x, skip)?;
    let z1 = conv_forward(&w.layers[0], x);
    let a1 = map_activation(&z1);
    let z2 = conv_forward(&w.layers[1], &a1);
    let a2 = map_activation(&z2);
    let z3 = conv_forward(&w.layers[2], &a2);
    let mut out = skip.clone();
    for (o, b) in out.data.iter_mut().zip(&z3.data) {
        *o += b;
    }
    Ok((out, BlockTape { z1, a1, z2, a2 }))
}

/// Output of the residual branch only (no skip), with tape.
pub fn branch_forward_tape(w: &ResidualBlockWeights, x: &ChannelImage) -> Result<(ChannelImage, BlockTape)> {
    let zero_skip = ChannelImage::zeros(w.out_channels(), x.height, x.width);
    block_forward_tape(w, x, &zero_skip)
}

/// Per-layer parameter gradients of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads {
    pub layers: [ConvGrad; 3],
}

impl BlockGrads {
    pub fn zeros_like(w: &ResidualBlockWeights) -> Self {
        BlockGrads {
            layers: [
                ConvGrad::zeros_like(&w.layers[0]),
                ConvGrad::zeros_like(&w.layers[1]),
                ConvGrad::zeros_like(&w.layers[2]),
            ],
        }
    }

    pub fn add_assign(&mut self, other: &BlockGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
    }
}

/// Exact reverse-mode gradients of `block_forward`.
///
/// Returns (weight gradients, gradient w.r.t. x, gradient w.r.t. skip); the
/// skip gradient equals the upstream gradient bit-exactly.
pub fn block_backward(
    w: &ResidualBlockWeights,
    x: &ChannelImage,
    tape: &BlockTape,
    upstream: &ChannelImage,
) -> Result<(BlockGrads, ChannelImage, ChannelImage)> {
    if upstream.channels != w.out_channels()
        || upstream.height != x.height
        || upstream.width != x.width
    {
        return Err(Error::DimensionMismatch("block upstream gradient shape".into()));
    }
    let grad_skip = upstream.clone();

    let g3 = upstream;
    let grad_l3 = conv_weight_grad(&w.layers[2], &tape.a2, g3);
    let mut g2 = conv_input_grad(&w.layers[2], g3);
    mul_deriv_inplace(&mut g2, &tape.z2);
    let grad_l2 = conv_weight_grad(&w.layers[1], &tape.a1, &g2);
    let mut g1 = conv_input_grad(&w.layers[1], &g2);
    mul_deriv_inplace(&mut g1, &tape.z1);
    let grad_l1 = conv_weight_grad(&w.layers[0], x, &g1);
    let grad_x = conv_input_grad(&w.layers[0], &g1);

    Ok((BlockGrads { layers: [grad_l1, grad_l2, grad_l3] }, grad_x, grad_skip))
}

/// Jacobian-vector product of the residual branch at the tape point.
pub fn branch_jvp(w: &ResidualBlockWeights, tape: &BlockTape, dx: &ChannelImage) -> ChannelImage {
    let mut d1 = conv_jvp(&w.layers[0], dx);
    mul_deriv_inplace(&mut d1, &tape.z1);
    let mut d2 = conv_jvp(&w.layers[1], &d1);
    mul_deriv_inplace(&mut d2, &tape.z2);
    conv_jvp(&w.layers[2], &d2)
}

/// Vector-Jacobian product of the residual branch at the tape point
/// (gradient w.r.t. the full block input).
pub fn branch_vjp(w: &ResidualBlockWeights, tape: &BlockTape, g: &ChannelImage) -> ChannelImage {
    let mut g2 = conv_input_grad(&w.layers[2], g);
    mul_deriv_inplace(&mut g2, &tape.z2);
    let mut g1 = conv_input_grad(&w.layers[1], &g2);
    mul_deriv_inplace(&mut g1, &tape.z1);
    conv_input_grad(&w.layers[0], &g1)
}

/// Largest singular value of the residual branch's Jacobian with respect to
/// the state channels (the first `out_channels` input channels), estimated
/// by power iteration on J^T J at the point `x`.
///
/// The returned estimate is non-decreasing in `iters`.
pub fn jacobian_spectral_norm(
    w: &ResidualBlockWeights,
    x: &ChannelImage,
    iters: usize,
    seed: u64,
) -> Result<f64> {
    if iters < 1 {
        return Err(Error::Parameter("jacobian_spectral_norm requires iters >= 1".into()));
    }
    w.validate()?;
    let state_ch = w.out_channels();
    if x.channels < state_ch || x.channels != w.in_channels() {
        return Err(Error::DimensionMismatch(format!(
            "spectral norm input has {} channels, block expects {}",
            x.channels,
            w.in_channels()
        )));
    }
    let (_, tape) = branch_forward_tape(w, x)?;

    let (h, wd) = (x.height, x.width);
    let plane = h * wd;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = ChannelImage::zeros(x.channels, h, wd);
    for c in 0..state_ch {
        for val in v.channel_mut(c).iter_mut() {
            *val = rng.gen_range(-1.0..1.0);
        }
    }
    let nv = norm2(&v.data[..state_ch * plane]);
    if nv == 0.0 {
        return Ok(0.0);
    }
    for val in v.data[..state_ch * plane].iter_mut() {
        *val /= nv;
    }

    let mut sigma = 0.0;
    for _ in 0..iters {
        let ju = branch_jvp(w, &tape, &v);
        if !ju.all_finite() {
            return Err(Error::NonFinite("jacobian power iteration".into()));
        }
        sigma = norm2(&ju.data);
        if sigma == 0.0 {
            return Ok(0.0);
        }
        let jt = branch_vjp(w, &tape, &ju);
        // Restrict to the state channels; conditioning channels are held fixed.
        let norm = norm2(&jt.data[..state_ch * plane]);
        if norm == 0.0 {
            return Ok(sigma);
        }
        v.data[state_ch * plane..].fill(0.0);
        for (dst, src) in v.data[..state_ch * plane]
            .iter_mut()
            .zip(&jt.data[..state_ch * plane])
        {
            *dst = src / norm;
        }
    }
    Ok(sigma)
}

/// Operator norm of one convolution layer on h x w planes (power iteration
/// alternating the layer and its transpose).
pub fn conv_operator_norm(layer: &ConvLayer, h: usize, w: usize, iters: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = ChannelImage::zeros(layer.in_ch, h, w);
    for val in v.data.iter_mut() {
        *val = rng.gen_range(-1.0..1.0);
    }
    let nv = norm2(&v.data);
    if nv == 0.0 {
        return 0.0;
    }
    for val in v.data.iter_mut() {
        *val /= nv;
    }
    let mut sigma = 0.0;
    for _ in 0..iters {
        let ju = conv_jvp(layer, &v);
        sigma = norm2(&ju.data);
        if sigma == 0.0 {
            return 0.0;
        }
        let jt = conv_input_grad(layer, &ju);
        let n = norm2(&jt.data);
        if n == 0.0 {
            return sigma;
        }
        for (dst, src) in v.data.iter_mut().zip(&jt.data) {
            *dst = src / n;
        }
    }
    sigma
}

/// Rescale the block's kernels so the product bound
/// 0.25 * sigma(K1) sigma(K2) sigma(K3) equals `target_eps`; since
/// |phi'| <= 1/2 everywhere this certifies a global Lipschitz bound of the
/// residual branch. Returns the certified bound (= target when nonzero).
pub fn normalize_branch_lipschitz(
    w: &mut ResidualBlockWeights,
    target_eps: f64,
    h: usize,
    wd: usize,
    iters: usize,
    seed: u64,
) -> Result<f64> {
    if target_eps < 0.0 {
        return Err(Error::Parameter("target epsilon must be nonnegative".into()));
    }
    if target_eps == 0.0 {
        w.scale_kernels(0.0);
        return Ok(0.0);
    }
    let sig: Vec<f64> = w
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| conv_operator_norm(l, h, wd, iters, seed.wrapping_add(i as u64)))
        .collect();
    let bound = 0.25 * sig[0] * sig[1] * sig[2];
    if bound == 0.0 {
        return Ok(0.0);
    }
    let factor = (target_eps / bound).cbrt();
    w.scale_kernels(factor);
    Ok(target_eps)
}

/// Certified global Lipschitz bound of the residual branch from per-layer
/// operator norms and the activation derivative bound.
pub fn branch_lipschitz_bound(w: &ResidualBlockWeights, h: usize, wd: usize, iters: usize, seed: u64) -> f64 {
    let s0 = conv_operator_norm(&w.layers[0], h, wd, iters, seed);
    let s1 = conv_operator_norm(&w.layers[1], h, wd, iters, seed.wrapping_add(1));
    let s2 = conv_operator_norm(&w.layers[2], h, wd, iters, seed.wrapping_add(2));
    0.25 * s0 * s1 * s2
}

/// Full parameter set: the image-domain block (regularization gradient,
/// conditioned on the lifted prior) and the sinogram-domain block (data
/// fidelity gradient, conditioned on the measurement).
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    pub image_net: ResidualBlockWeights,
    pub sino_net: ResidualBlockWeights,
    /// State channel count N_p carried through the iteration.
    pub state_channels: usize,
}

impl NetworkWeights {
    /// Zero-initialized canonical architecture (n_p + 1 -> 32 -> 32 -> n_p).
    pub fn zeros(n_p: usize) -> Self {
        NetworkWeights {
            image_net: ResidualBlockWeights::zeros(n_p + 1, HIDDEN_CHANNELS, n_p),
            sino_net: ResidualBlockWeights::zeros(n_p + 1, HIDDEN_CHANNELS, n_p),
            state_channels: n_p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.image_net.validate()?;
        self.sino_net.validate()?;
        for net in [&self.image_net, &self.sino_net] {
            if net.in_channels() != self.state_channels + 1
                || net.out_channels() != self.state_channels
            {
                return Err(Error::DimensionMismatch(format!(
                    "network channel chain {} -> .. -> {} does not match n_p = {}",
                    net.in_channels(),
                    net.out_channels(),
                    self.state_channels
                )));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.image_net.param_count() + self.sino_net.param_count()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for net in [&self.image_net, &self.sino_net] {
            for l in &net.layers {
                out.extend_from_slice(&l.kernel);
                out.extend_from_slice(&l.bias);
            }
        }
        out
    }

    pub fn assign_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch("flat parameter vector length".into()));
        }
        let mut pos = 0;
        for net in [&mut self.image_net, &mut self.sino_net] {
            for l in net.layers.iter_mut() {
                let klen = l.kernel.len();
                l.kernel.copy_from_slice(&flat[pos..pos + klen]);
                pos += klen;
                let blen = l.bias.len();
                l.bias.copy_from_slice(&flat[pos..pos + blen]);
                pos += blen;
            }
        }
        Ok(())
    }
}

/// Parameter gradients matching [`NetworkWeights::to_flat`] ordering.
#[derive(Debug, Clone)]
pub struct NetworkGrads {
    pub image_net: BlockGrads,
    pub sino_net: BlockGrads,
}

impl NetworkGrads {
    pub fn zeros_like(w: &NetworkWeights) -> Self {
        NetworkGrads {
            image_net: BlockGrads::zeros_like(&w.image_net),
            sino_net: BlockGrads::zeros_like(&w.sino_net),
        }
    }

    pub fn add_assign(&mut self, other: &NetworkGrads) {
        self.image_net.add_assign(&other.image_net);
        self.sino_net.add_assign(&other.sino_net);
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for net in [&self.image_net, &self.sino_net] {
            for l in &net.layers {
                out.extend_from_slice(&l.kernel);
                out.extend_from_slice(&l.bias);
            }
        }
        out
    }
}

/// Xavier (uniform) initialization with zero biases; fan counts include the
/// 3x3 spatial extent. Deterministic per seed.
pub fn xavier_init(seed: u64, n_p: usize) -> Result<NetworkWeights> {
    if n_p < 1 {
        return Err(Error::Parameter("n_p must be >= 1".into()));
    }
    let mut w = NetworkWeights::zeros(n_p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for net in [&mut w.image_net, &mut w.sino_net] {
        for l in net.layers.iter_mut() {
            let fan_in = (l.in_ch * 9) as f64;
            let fan_out = (l.out_ch * 9) as f64;
            let bound = (6.0 / (fan_in + fan_out)).sqrt();
            for v in l.kernel.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
            // Biases stay zero.
        }
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_channel_image(c: usize, h: usize, w: usize, seed: u64) -> ChannelImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = ChannelImage::zeros(c, h, w);
        for v in x.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        x
    }

    #[test]
    fn zero_weights_are_exact_identity() {
        let w = ResidualBlockWeights::zeros(3, 4, 2);
        let x = rand_channel_image(3, 4, 4, 1);
        let skip = rand_channel_image(2, 4, 4, 2);
        let out = block_forward(&w, &x, &skip).unwrap();
        assert_eq!(out.data, skip.data);
    }

    #[test]
    fn scalar_chain_matches_hand_composition() {
        // 1x1 spatial input: only the center taps act, so the block reduces
        // to out = skip + k3 * phi(k2 * phi(k1 * x + b1) + b2) + b3.
        let mut w = ResidualBlockWeights::zeros(1, 1, 1);
        *w.layers[0].tap_mut(0, 0, 1, 1) = 1.3;
        w.layers[0].bias[0] = 0.2;
        *w.layers[1].tap_mut(0, 0, 1, 1) = -0.7;
        w.layers[1].bias[0] = 0.1;
        *w.layers[2].tap_mut(0, 0, 1, 1) = 2.1;
        w.layers[2].bias[0] = -0.05;
        let x = ChannelImage::from_planes(1, 1, &[&[0.9]]).unwrap();
        let skip = ChannelImage::from_planes(1, 1, &[&[0.4]]).unwrap();
        let out = block_forward(&w, &x, &skip).unwrap();
        let expected = 0.4 + 2.1 * activation(-0.7 * activation(1.3 * 0.9 + 0.2) + 0.1) - 0.05;
        assert!((out.data[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn grad_skip_equals_upstream_bit_exact() {
        let w = xavier_init(5, 2).unwrap();
        let x = rand_channel_image(3, 4, 4, 3);
        let skip = rand_channel_image(2, 4, 4, 4);
        let upstream = rand_channel_image(2, 4, 4, 5);
        let (_, tape) = block_forward_tape(&w.image_net, &x, &skip).unwrap();
        let (_, _, grad_skip) = block_backward(&w.image_net, &x, &tape, &upstream).unwrap();
        assert_eq!(grad_skip.data, upstream.data);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let w = xavier_init(6, 2).unwrap();
        let x = rand_channel_image(3, 4, 4, 6);
        let skip = ChannelImage::zeros(2, 4, 4);
        let upstream = ChannelImage::zeros(2, 4, 4);
        let (_, tape) = block_forward_tape(&w.image_net, &x, &skip).unwrap();
        let (grads, grad_x, _) = block_backward(&w.image_net, &x, &tape, &upstream).unwrap();
        assert!(grad_x.data.iter().all(|&v| v == 0.0));
        for l in &grads.layers {
            assert!(l.kernel.iter().all(|&v| v == 0.0));
            assert!(l.bias.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn translation_equivariance_in_the_interior() {
        // Shifting the input one pixel right shifts the output one pixel
        // right, away from the borders (receptive field margin 3).
        let mut w = xavier_init(9, 1).unwrap();
        w.image_net.layers[0].bias.fill(0.0);
        let net = &w.image_net;
        let h = 12;
        let wd = 12;
        let base = rand_channel_image(2, h, wd, 10);
        let mut shifted = ChannelImage::zeros(2, h, wd);
        for c in 0..2 {
            for r in 0..h {
                for col in 1..wd {
                    shifted.channel_mut(c)[r * wd + col] = base.channel(c)[r * wd + col - 1];
                }
            }
        }
        let skip0 = ChannelImage::zeros(1, h, wd);
        let out_base = block_forward(net, &base, &skip0).unwrap();
        let out_shifted = block_forward(net, &shifted, &skip0).unwrap();
        for r in 4..h - 4 {
            for col in 4..wd - 4 {
                let a = out_base.channel(0)[r * wd + col - 1];
                let b = out_shifted.channel(0)[r * wd + col];
                assert!((a - b).abs() < 1e-12, "({r},{col}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn xavier_biases_zero_and_deterministic() {
        let a = xavier_init(11, 5).unwrap();
        let b = xavier_init(11, 5).unwrap();
        assert_eq!(a, b);
        for net in [&a.image_net, &a.sino_net] {
            for l in &net.layers {
                assert!(l.bias.iter().all(|&v| v == 0.0));
            }
        }
        let c = xavier_init(12, 5).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn xavier_variance_matches_uniform_law() {
        // Var of U(-a, a) with a = sqrt(6 / (fan_in + fan_out)) is
        // 2 / (fan_in + fan_out).
        let w = xavier_init(100, 5).unwrap();
        let l = &w.image_net.layers[1]; // 32 -> 32: 9216 draws
        let n = l.kernel.len() as f64;
        let mean: f64 = l.kernel.iter().sum::<f64>() / n;
        let var: f64 = l.kernel.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expected = 2.0 / ((l.in_ch * 9 + l.out_ch * 9) as f64);
        assert!(
            (var - expected).abs() / expected < 0.1,
            "var {var} vs expected {expected}"
        );
    }

    #[test]
    fn spectral_norm_zero_weights_is_zero() {
        let w = ResidualBlockWeights::zeros(2, 3, 1);
        let x = rand_channel_image(2, 3, 3, 1);
        assert_eq!(jacobian_spectral_norm(&w, &x, 5, 1).unwrap(), 0.0);
    }

    #[test]
    fn flat_round_trip() {
        let w = xavier_init(21, 3).unwrap();
        let flat = w.to_flat();
        let mut w2 = NetworkWeights::zeros(3);
        w2.assign_from_flat(&flat).unwrap();
        assert_eq!(w, w2);
    }

    #[test]
    fn normalize_hits_target_bound() {
        let mut w = xavier_init(31, 2).unwrap();
        let target = 0.25;
        normalize_branch_lipschitz(&mut w.image_net, target, 8, 8, 60, 5).unwrap();
        let achieved = branch_lipschitz_bound(&w.image_net, 8, 8, 60, 5);
        assert!((achieved - target).abs() < 1e-6, "achieved {achieved}");
    }
}
