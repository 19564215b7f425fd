//! The weight-shared unrolled iteration
//!
//!   u^{k+1} = u^k - eta (A^T s^k + t^k),
//!
//! where t^k = u^k + N_R(u^k, prior) is the learned regularization gradient
//! (identity skip on the state) and s^k is the data-fidelity gradient:
//! A u^k - b in empirical mode, or (A u^k - b) + N_S(A u^k, b) in learned
//! mode. The state is carried as `state_channels` image planes; the
//! reconstruction is the first plane. Training backpropagates through all K
//! stages with a single shared parameter set.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{GeometryConfig, GridLevel};
use crate::image::{norm2, ChannelImage, Image, Sinogram};
use crate::metrics::psnr;
use crate::nn::{
    block_backward, block_forward_tape, BlockTape, NetworkGrads, NetworkWeights,
};
use crate::resample::upsample_adjoint;
use crate::system::{build_system_matrix, SystemMatrix};
use crate::tv::PriorReconstructor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FidelityMode {
    /// s = A u - b (Theorem-1 regime; exact least-squares gradient).
    Empirical,
    /// s = (A u - b) + N_S(A u, b); reduces to empirical when N_S vanishes.
    Learned,
}

impl FidelityMode {
    pub fn name(&self) -> &'static str {
        match self {
            FidelityMode::Empirical => "empirical",
            FidelityMode::Learned => "learned",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "empirical" => Ok(FidelityMode::Empirical),
            "learned" => Ok(FidelityMode::Learned),
            other => Err(Error::Config(format!("unknown fidelity mode {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrpeConfig {
    /// Number of stages K.
    pub stages: usize,
    /// Gradient step size eta.
    pub step_size: f64,
    /// State channel count N_p.
    pub state_channels: usize,
    pub fidelity: FidelityMode,
    /// Off = the plain unrolled gradient-descent ablation: the prior channel
    /// is fed as zeros.
    pub use_prior: bool,
    /// Early-stop threshold on the stage residual; 0 runs all K stages.
    pub tolerance: f64,
}

impl LrpeConfig {
    pub fn new(stages: usize, step_size: f64, state_channels: usize) -> Self {
        LrpeConfig {
            stages,
            step_size,
            state_channels,
            fidelity: FidelityMode::Learned,
            use_prior: true,
            tolerance: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages < 1 {
            return Err(Error::Parameter("stages must be >= 1".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::Parameter("step_size must be positive".into()));
        }
        if self.state_channels < 1 {
            return Err(Error::Parameter("state_channels must be >= 1".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::Parameter("tolerance must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_init: f64,
    /// Adam first-moment coefficient (the paper-style beta).
    pub beta1: f64,
    /// Adam second-moment coefficient.
    pub beta2: f64,
    pub grad_clip_norm: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr_init: 1e-4,
            beta1: 0.99,
            beta2: 0.999,
            grad_clip_norm: 1.0,
            batch_size: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr_init = 0 is allowed: it exercises the optimizer as a no-op.
        if !(self.lr_init >= 0.0) {
            return Err(Error::Parameter("lr_init must be nonnegative".into()));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::Parameter("grad_clip_norm must be positive".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Parameter("batch_size must be >= 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Parameter(format!("{name} must lie in [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Per-stage diagnostics collected during inference.
#[derive(Debug, Clone, Default)]
pub struct IterationTrace {
    /// ||u^{k+1} - u^k|| over all state channels, one entry per stage run.
    pub residuals: Vec<f64>,
    /// Per-stage PSNR of the first channel, when ground truth was supplied.
    pub psnr: Option<Vec<f64>>,
}

/// Geometry plus the fine and coarse system matrices.
#[derive(Debug, Clone)]
pub struct LrpeSystem {
    pub geom: GeometryConfig,
    pub fine: SystemMatrix,
    pub coarse: SystemMatrix,
}

impl LrpeSystem {
    pub fn build(geom: GeometryConfig) -> Result<Self> {
        let fine = build_system_matrix(&geom, GridLevel::Fine)?;
        let coarse = build_system_matrix(&geom, GridLevel::Coarse)?;
        Ok(LrpeSystem { geom, fine, coarse })
    }

    pub fn fine_size(&self) -> usize {
        self.geom.fine_size
    }

    /// Coarse reconstruction of the measurement lifted to the fine grid via
    /// the adjoint of the block-mean downsampler.
    pub fn lift_prior(&self, b: &Sinogram, rec: &dyn PriorReconstructor) -> Result<Image> {
        let coarse = rec.reconstruct_coarse(b, &self.geom, &self.coarse)?;
        upsample_adjoint(&coarse, &self.geom)
    }
}

fn check_step_shapes(
    system: &LrpeSystem,
    state: &ChannelImage,
    b: &Sinogram,
    prior: &Image,
    w: &NetworkWeights,
    cfg: &LrpeConfig,
) -> Result<()> {
    cfg.validate()?;
    w.validate()?;
    let n = system.fine_size();
    if w.state_channels != cfg.state_channels {
        return Err(Error::DimensionMismatch(format!(
            "weights carry {} state channels, config says {}",
            w.state_channels, cfg.state_channels
        )));
    }
    if state.channels != cfg.state_channels || state.height != n || state.width != n {
        return Err(Error::DimensionMismatch(format!(
            "state {}x{}x{} does not match n_p={} side={}",
            state.channels, state.height, state.width, cfg.state_channels, n
        )));
    }
    if prior.side != n {
        return Err(Error::DimensionMismatch(format!(
            "prior side {} != fine size {n}",
            prior.side
        )));
    }
    if b.num_views * b.num_bins != system.fine.rows {
        return Err(Error::DimensionMismatch(format!(
            "sinogram {}x{} does not match system rows {}",
            b.num_views, b.num_bins, system.fine.rows
        )));
    }
    Ok(())
}

/// Everything recorded by one forward stage that the backward pass needs.
struct StageTape {
    reg_in: ChannelImage,
    reg_tape: BlockTape,
    fid_in: Option<ChannelImage>,
    fid_tape: Option<BlockTape>,
}

fn forward_stage(
    system: &LrpeSystem,
    state: &ChannelImage,
    b: &Sinogram,
    prior: &Image,
    w: &NetworkWeights,
    cfg: &LrpeConfig,
    with_tape: bool,
) -> Result<(ChannelImage, Option<StageTape>)> {
    let n = system.fine_size();
    let n_p = cfg.state_channels;
    let eta = cfg.step_size;
    let (views, bins) = (system.fine.num_views(), system.fine.num_bins);

    // Regularization branch input: state channels plus the prior channel.
    let mut reg_in = ChannelImage::zeros(n_p + 1, n, n);
    reg_in.data[..n_p * n * n].copy_from_slice(&state.data);
    if cfg.use_prior {
        reg_in.channel_mut(n_p).copy_from_slice(&prior.data);
    }
    let (t, reg_tape) = block_forward_tape(&w.image_net, &reg_in, state)?;

    // Project every state channel.
    let mut projected = ChannelImage::zeros(n_p, views, bins);
    for c in 0..n_p {
        let mut row = vec![0.0; system.fine.rows];
        system.fine.apply(state.channel(c), &mut row);
        projected.channel_mut(c).copy_from_slice(&row);
    }

    // Data-fidelity branch. The identity part is the least-squares residual
    // A u - b; the learned branch adds N_S on top of it.
    let mut residual_skip = projected.clone();
    for c in 0..n_p {
        for (r, &bv) in residual_skip.channel_mut(c).iter_mut().zip(&b.data) {
            *r -= bv;
        }
    }
    let (s, fid_in, fid_tape) = match cfg.fidelity {
        FidelityMode::Empirical => (residual_skip, None, None),
        FidelityMode::Learned => {
            let mut fid_in = ChannelImage::zeros(n_p + 1, views, bins);
            fid_in.data[..n_p * views * bins].copy_from_slice(&projected.data);
            fid_in.channel_mut(n_p).copy_from_slice(&b.data);
            let (s, tape) = block_forward_tape(&w.sino_net, &fid_in, &residual_skip)?;
            (s, Some(fid_in), Some(tape))
        }
    };

    // u - eta (A^T s + t).
    let mut next = ChannelImage::zeros(n_p, n, n);
    let mut backprojected = vec![0.0; system.fine.cols];
    for c in 0..n_p {
        system.fine.apply_transpose(s.channel(c), &mut backprojected);
        let dst = next.channel_mut(c);
        let src_state = state.channel(c);
        let src_t = t.channel(c);
        for i in 0..dst.len() {
            dst[i] = src_state[i] - eta * (backprojected[i] + src_t[i]);
        }
    }
    if !next.all_finite() {
        return Err(Error::NonFinite("lrpe stage output".into()));
    }
    let tape = with_tape.then(|| StageTape { reg_in, reg_tape, fid_in, fid_tape });
    Ok((next, tape))
}

/// One LRPE update. The prior image is ignored (zeroed) when
/// `cfg.use_prior` is off.
pub fn lrpe_step(
    system: &LrpeSystem,
    state: &ChannelImage,
    b: &Sinogram,
    prior: &Image,
    w: &NetworkWeights,
    cfg: &LrpeConfig,
) -> Result<ChannelImage> {
    check_step_shapes(system, state, b, prior, w, cfg)?;
    let (next, _) = forward_stage(system, state, b, prior, w, cfg, false)?;
    Ok(next)
}

/// Run the fixed-point iteration from an arbitrary initial state; returns
/// the final state and the residual/PSNR trace. Used by inference (zero
/// initial state) and by convergence experiments that compare starts.
pub fn lrpe_iterate(
    system: &LrpeSystem,
    state0: ChannelImage,
    b: &Sinogram,
    prior: &Image,
    w: &NetworkWeights,
    cfg: &LrpeConfig,
    ground_truth: Option<&Image>,
) -> Result<(ChannelImage, IterationTrace)> {
    check_step_shapes(system, &state0, b, prior, w, cfg)?;
    let mut trace = IterationTrace {
        residuals: Vec::with_capacity(cfg.stages),
        psnr: ground_truth.map(|_| Vec::with_capacity(cfg.stages)),
    };
    let mut state = state0;
    let mut best_state = state.clone();
    let mut best_residual = f64::INFINITY;
    let mut first_residual = 0.0f64;
    for stage in 0..cfg.stages {
        let next = match forward_stage(system, &state, b, prior, w, cfg, false) {
            Ok((next, _)) => next,
            Err(Error::NonFinite(_)) => {
                return Err(Error::Divergence { stage, trace });
            }
            Err(e) => return Err(e),
        };
        let mut r2 = 0.0;
        for (a, bv) in next.data.iter().zip(&state.data) {
            r2 += (a - bv) * (a - bv);
        }
        let residual = r2.sqrt();
        trace.residuals.push(residual);
        if let (Some(psnrs), Some(gt)) = (trace.psnr.as_mut(), ground_truth) {
            let recon = first_channel_image(&next, system);
            psnrs.push(psnr(&recon, gt, 1.0)?);
        }
        if stage == 0 {
            first_residual = residual;
        } else if residual > 1e6 * first_residual.max(1e-300) {
            return Err(Error::Divergence { stage, trace });
        }
        if residual <= best_residual {
            best_residual = residual;
            best_state = next.clone();
        }
        state = next;
        if cfg.tolerance > 0.0 && residual < cfg.tolerance {
            // Early stop: hand back the best state seen so far.
            return Ok((best_state, trace));
        }
    }
    if cfg.tolerance > 0.0 {
        return Ok((best_state, trace));
    }
    Ok((state, trace))
}

fn first_channel_image(state: &ChannelImage, system: &LrpeSystem) -> Image {
    Image {
        side: state.height,
        pixel_pitch: system.fine.pixel_pitch,
        data: state.channel(0).to_vec(),
    }
}

/// Full inference: build the low-resolution prior from the measurement,
/// lift it, and iterate from the zero state. Returns the first state
/// channel as the reconstruction.
pub fn lrpe_infer(
    system: &LrpeSystem,
    b: &Sinogram,
    w: &NetworkWeights,
    cfg: &LrpeConfig,
    prior_rec: &dyn PriorReconstructor,
    ground_truth: Option<&Image>,
) -> Result<(Image, IterationTrace)> {
    cfg.validate()?;
    let n = system.fine_size();
    let prior = if cfg.use_prior {
        system.lift_prior(b, prior_rec)?
    } else {
        Image::zeros(n, system.fine.pixel_pitch)
    };
    let state0 = ChannelImage::zeros(cfg.state_channels, n, n);
    let (state, trace) = lrpe_iterate(system, state0, b, &prior, w, cfg, ground_truth)?;
    Ok((first_channel_image(&state, system), trace))
}

/// One training example: ground truth, its (possibly noisy) measurement and
/// the pre-computed lifted prior. The prior is treated as a constant during
/// differentiation.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub target: Image,
    pub measurement: Sinogram,
    pub prior: Image,
}

/// Build training samples, computing the lifted prior per measurement (or a
/// zero prior when the config disables it).
pub fn prepare_samples(
    system: &LrpeSystem,
    cfg: &LrpeConfig,
    prior_rec: &dyn PriorReconstructor,
    pairs: &[(Image, Sinogram)],
) -> Result<Vec<TrainSample>> {
    pairs
        .iter()
        .map(|(target, b)| {
            let prior = if cfg.use_prior {
                system.lift_prior(b, prior_rec)?
            } else {
                Image::zeros(system.fine_size(), system.fine.pixel_pitch)
            };
            Ok(TrainSample { target: target.clone(), measurement: b.clone(), prior })
        })
        .collect()
}

/// Mean-squared-error training loss of one sample and its gradient with
/// respect to the shared weights, backpropagated through all K stages.
pub fn loss_and_grad(
    system: &LrpeSystem,
    sample: &TrainSample,
    w: &NetworkWeights,
    cfg: &LrpeConfig,
) -> Result<(f64, NetworkGrads)> {
    let n = system.fine_size();
    let n_p = cfg.state_channels;
    let state0 = ChannelImage::zeros(n_p, n, n);
    check_step_shapes(system, &state0, &sample.measurement, &sample.prior, w, cfg)?;

    let mut tapes = Vec::with_capacity(cfg.stages);
    let mut state = state0;
    for _ in 0..cfg.stages {
        let (next, tape) =
            forward_stage(system, &state, &sample.measurement, &sample.prior, w, cfg, true)?;
        tapes.push(tape.expect("tape requested"));
        state = next;
    }

    // loss = mean((u_K[0] - target)^2) over pixels.
    let plane = n * n;
    let recon = state.channel(0);
    let mut loss = 0.0;
    let mut grad_state = ChannelImage::zeros(n_p, n, n);
    {
        let g0 = grad_state.channel_mut(0);
        for i in 0..plane {
            let d = recon[i] - sample.target.data[i];
            loss += d * d;
            g0[i] = 2.0 * d / plane as f64;
        }
        loss /= plane as f64;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }

    let mut grads = NetworkGrads::zeros_like(w);
    let eta = cfg.step_size;
    let (views, bins) = (system.fine.num_views(), system.fine.num_bins);
    for tape in tapes.iter().rev() {
        // next = state - eta (A^T s + t)
        let mut grad_prev = grad_state.clone();

        // Path through A^T s.
        let mut grad_s = ChannelImage::zeros(n_p, views, bins);
        {
            let mut row = vec![0.0; system.fine.rows];
            for c in 0..n_p {
                // d(next)/d(s_c) = -eta A^T  =>  vjp: -eta A grad_state_c
                system.fine.apply(grad_state.channel(c), &mut row);
                let dst = grad_s.channel_mut(c);
                for (d, &r) in dst.iter_mut().zip(&row) {
                    *d = -eta * r;
                }
            }
        }
        // Through the fidelity branch to the projections.
        let grad_projected = match cfg.fidelity {
            FidelityMode::Empirical => grad_s,
            FidelityMode::Learned => {
                let fid_in = tape.fid_in.as_ref().expect("learned tape");
                let fid_tape = tape.fid_tape.as_ref().expect("learned tape");
                let (fid_grads, grad_fid_in, grad_skip) =
                    block_backward(&w.sino_net, fid_in, fid_tape, &grad_s)?;
                grads.sino_net.add_assign(&fid_grads);
                // skip = A u - b contributes identity in A u; the branch input
                // also carries the projections in its first n_p channels.
                let mut g = grad_skip;
                let sino_plane = views * bins;
                for (dst, src) in g.data.iter_mut().zip(&grad_fid_in.data[..n_p * sino_plane]) {
                    *dst += src;
                }
                g
            }
        };
        // Back through A into the state.
        {
            let mut col = vec![0.0; system.fine.cols];
            for c in 0..n_p {
                system.fine.apply_transpose(grad_projected.channel(c), &mut col);
                let dst = grad_prev.channel_mut(c);
                for (d, &v) in dst.iter_mut().zip(&col) {
                    *d += v;
                }
            }
        }

        // Path through t = state + N_R(state, prior).
        let mut grad_t = grad_state.clone();
        for v in grad_t.data.iter_mut() {
            *v *= -eta;
        }
        let (reg_grads, grad_reg_in, grad_skip) =
            block_backward(&w.image_net, &tape.reg_in, &tape.reg_tape, &grad_t)?;
        grads.image_net.add_assign(&reg_grads);
        for (dst, src) in grad_prev
            .data
            .iter_mut()
            .zip(grad_skip.data.iter().zip(&grad_reg_in.data[..n_p * plane]))
        {
            *dst += src.0 + src.1;
        }

        grad_state = grad_prev;
    }

    Ok((loss, grads))
}

/// Outcome of a training run. `completed` is false when a non-finite loss
/// aborted the run; the weights are then the last finite checkpoint.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: NetworkWeights,
    /// Mean per-sample loss of each epoch.
    pub loss_trace: Vec<f64>,
    pub completed: bool,
}

/// Adam with cosine-annealed learning rate and global gradient-norm
/// clipping; deterministic per seed.
pub fn lrpe_train(
    system: &LrpeSystem,
    samples: &[TrainSample],
    w0: &NetworkWeights,
    cfg: &LrpeConfig,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::Parameter("training requires a nonempty dataset".into()));
    }
    cfg.validate()?;
    tcfg.validate()?;
    w0.validate()?;

    let mut weights = w0.clone();
    let mut params = weights.to_flat();
    let mut m = vec![0.0f64; params.len()];
    let mut v = vec![0.0f64; params.len()];
    let mut step = 0u64;
    let eps = 1e-8;
    let mut loss_trace = Vec::with_capacity(tcfg.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();

    for epoch in 0..tcfg.epochs {
        let lr = tcfg.lr_init
            * 0.5
            * (1.0 + (std::f64::consts::PI * epoch as f64 / tcfg.epochs.max(1) as f64).cos());
        let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(tcfg.batch_size) {
            let mut grad_flat = vec![0.0f64; params.len()];
            let mut batch_loss = 0.0;
            for &idx in batch {
                let (loss, grads) = match loss_and_grad(system, &samples[idx], &weights, cfg) {
                    Ok(r) => r,
                    Err(Error::NonFinite(_)) => {
                        return Ok(TrainOutcome { weights, loss_trace, completed: false });
                    }
                    Err(e) => return Err(e),
                };
                batch_loss += loss;
                for (g, s) in grad_flat.iter_mut().zip(grads.to_flat()) {
                    *g += s;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            batch_loss *= scale;
            epoch_loss += batch_loss * batch.len() as f64;
            if !batch_loss.is_finite() {
                return Ok(TrainOutcome { weights, loss_trace, completed: false });
            }
            for g in grad_flat.iter_mut() {
                *g *= scale;
            }
            // Global gradient-norm clipping.
            let gnorm = norm2(&grad_flat);
            if !gnorm.is_finite() {
                return Ok(TrainOutcome { weights, loss_trace, completed: false });
            }
            if gnorm > tcfg.grad_clip_norm {
                let s = tcfg.grad_clip_norm / gnorm;
                for g in grad_flat.iter_mut() {
                    *g *= s;
                }
            }
            // Adam update.
            step += 1;
            let bc1 = 1.0 - tcfg.beta1.powi(step as i32);
            let bc2 = 1.0 - tcfg.beta2.powi(step as i32);
            for i in 0..params.len() {
                let g = grad_flat[i];
                m[i] = tcfg.beta1 * m[i] + (1.0 - tcfg.beta1) * g;
                v[i] = tcfg.beta2 * v[i] + (1.0 - tcfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            weights.assign_from_flat(&params)?;
        }
        loss_trace.push(epoch_loss / samples.len() as f64);
    }

    Ok(TrainOutcome { weights, loss_trace, completed: true })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::xavier_init;

    fn single_pixel_system() -> LrpeSystem {
        let g = GeometryConfig::parallel(1, 1, 1, 1, std::f64::consts::FRAC_1_SQRT_2)
            .with_detector_spacing(1.0);
        LrpeSystem::build(g).unwrap()
    }

    #[test]
    fn scalar_gradient_descent_step() {
        // Zero weights, eta = 0.1, a = 1, b = 5, u0 = 0:
        // u1 = 0 - 0.1 * ((0 - 5) + (0 + 0)) = 0.5 per state channel.
        let sys = single_pixel_system();
        let w = NetworkWeights::zeros(2);
        let cfg = LrpeConfig {
            fidelity: FidelityMode::Empirical,
            ..LrpeConfig::new(1, 0.1, 2)
        };
        let b = Sinogram::from_data(1, 1, vec![5.0]).unwrap();
        let prior = Image::zeros(1, 1.0);
        let state = ChannelImage::zeros(2, 1, 1);
        let next = lrpe_step(&sys, &state, &b, &prior, &w, &cfg).unwrap();
        for c in 0..2 {
            assert!((next.channel(c)[0] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_weight_fixed_point_is_tikhonov() {
        // With zero networks the map is u -> u - eta((a^2 + 1) u - a b);
        // its fixed point is u* = a b / (a^2 + 1) = 2.5 for a = 1, b = 5.
        let sys = single_pixel_system();
        let w = NetworkWeights::zeros(1);
        let cfg = LrpeConfig {
            fidelity: FidelityMode::Empirical,
            ..LrpeConfig::new(400, 0.1, 1)
        };
        let b = Sinogram::from_data(1, 1, vec![5.0]).unwrap();
        let prior = Image::zeros(1, 1.0);
        let state0 = ChannelImage::zeros(1, 1, 1);
        let (state, trace) = lrpe_iterate(&sys, state0, &b, &prior, &w, &cfg, None).unwrap();
        assert!((state.channel(0)[0] - 2.5).abs() < 1e-10);
        // Contraction factor |1 - eta (1 + lambda)| = 0.8 per stage.
        let r = &trace.residuals;
        for k in 1..20 {
            assert!((r[k] / r[k - 1] - 0.8).abs() < 1e-9, "ratio {}", r[k] / r[k - 1]);
        }
    }

    #[test]
    fn learned_equals_empirical_when_branch_vanishes() {
        let sys = single_pixel_system();
        let w = NetworkWeights::zeros(3);
        let b = Sinogram::from_data(1, 1, vec![2.0]).unwrap();
        let prior = Image::from_data(1, 1.0, vec![0.3]).unwrap();
        let mut state = ChannelImage::zeros(3, 1, 1);
        state.data.copy_from_slice(&[0.4, -0.2, 1.1]);
        let mut cfg = LrpeConfig::new(1, 0.1, 3);
        cfg.fidelity = FidelityMode::Learned;
        let learned = lrpe_step(&sys, &state, &b, &prior, &w, &cfg).unwrap();
        cfg.fidelity = FidelityMode::Empirical;
        let empirical = lrpe_step(&sys, &state, &b, &prior, &w, &cfg).unwrap();
        assert_eq!(learned.data, empirical.data);
    }

    #[test]
    fn prior_flag_off_equals_zero_prior() {
        let g = GeometryConfig::parallel(4, 2, 3, 6, 1.0);
        let sys = LrpeSystem::build(g).unwrap();
        let w = xavier_init(3, 2).unwrap();
        let b = Sinogram::from_data(3, 6, (0..18).map(|i| i as f64 * 0.1).collect()).unwrap();
        let zero_prior = Image::zeros(4, sys.fine.pixel_pitch);
        let mut state = ChannelImage::zeros(2, 4, 4);
        for (i, v) in state.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.23).sin();
        }
        let mut cfg = LrpeConfig::new(1, 0.05, 2);
        cfg.use_prior = true;
        let on = lrpe_step(&sys, &state, &b, &zero_prior, &w, &cfg).unwrap();
        cfg.use_prior = false;
        let nonzero_prior = Image::from_data(4, sys.fine.pixel_pitch, vec![0.7; 16]).unwrap();
        let off = lrpe_step(&sys, &state, &b, &nonzero_prior, &w, &cfg).unwrap();
        assert_eq!(on.data, off.data);
    }

    #[test]
    fn infer_one_stage_equals_single_step() {
        let g = GeometryConfig::parallel(4, 2, 3, 6, 1.0);
        let sys = LrpeSystem::build(g).unwrap();
        let w = xavier_init(8, 2).unwrap();
        let b = Sinogram::from_data(3, 6, (0..18).map(|i| (i as f64 * 0.31).cos()).collect())
            .unwrap();
        let mut cfg = LrpeConfig::new(1, 0.05, 2);
        cfg.use_prior = false;
        let prior = Image::zeros(4, sys.fine.pixel_pitch);
        let state0 = ChannelImage::zeros(2, 4, 4);
        let step = lrpe_step(&sys, &state0, &b, &prior, &w, &cfg).unwrap();
        let (recon, trace) = lrpe_iterate(&sys, state0, &b, &prior, &w, &cfg, None).unwrap();
        assert_eq!(recon.data, step.data);
        assert_eq!(trace.residuals.len(), 1);
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let g = GeometryConfig::parallel(4, 2, 3, 6, 1.0);
        let sys = LrpeSystem::build(g).unwrap();
        let w0 = xavier_init(4, 2).unwrap();
        let mut cfg = LrpeConfig::new(2, 0.05, 2);
        cfg.use_prior = false;
        let target = Image::from_data(4, sys.fine.pixel_pitch, vec![0.5; 16]).unwrap();
        let b = sys.fine.forward_project(&target).unwrap();
        let samples = vec![TrainSample {
            target,
            measurement: b,
            prior: Image::zeros(4, sys.fine.pixel_pitch),
        }];
        let tcfg = TrainConfig { epochs: 3, lr_init: 0.0, ..TrainConfig::default() };
        let out = lrpe_train(&sys, &samples, &w0, &cfg, &tcfg).unwrap();
        assert!(out.completed);
        assert_eq!(out.weights.to_flat(), w0.to_flat());
    }

    #[test]
    fn stage_count_zero_rejected() {
        let cfg = LrpeConfig::new(0, 0.1, 2);
        assert!(cfg.validate().is_err());
    }
}
