//! End-to-end experiment orchestration: phantom -> project -> noise ->
//! {FBP, TV, GRAD, LRPE} -> metrics, plus all file artifacts.
//!
//! Every randomized stage derives its stream from the config seed, so a
//! rerun of the same config reproduces every artifact byte for byte
//! (runtimes are reported as 0 unless timing is enabled).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::certify::{certify, CertifySample};
use crate::equilibrium::{
    lrpe_infer, lrpe_train, prepare_samples, FidelityMode, LrpeConfig, LrpeSystem, TrainConfig,
    TrainOutcome,
};
use crate::error::{Error, Result};
use crate::fbp::fbp;
use crate::geometry::{Beam, GeometryConfig, GridLevel};
use crate::image::{ChannelImage, Image, Sinogram};
use crate::io;
use crate::metrics::{psnr, ssim, SsimParams};
use crate::noise::{add_noise, NoiseKind, NoiseSpec};
use crate::phantom::random_phantom;
use crate::system::spectral_bounds;
use crate::tv::{tv_reconstruct, TvParams, TvPrior};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanMode {
    SparseView,
    LimitedAngle,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub geom: GeometryConfig,
    pub scan_mode: ScanMode,
    pub noise: Option<NoiseSpec>,
    pub lrpe: LrpeConfig,
    pub train: TrainConfig,
    /// Master seed; phantom and noise streams derive from it.
    pub seed: u64,
    /// Held-out evaluation phantoms.
    pub eval_count: usize,
    pub eval_ellipses: usize,
    /// Training set size for the `train` pipeline.
    pub train_samples: usize,
    pub prior_lambda: f64,
    pub prior_iters: usize,
    pub tv_lambda: f64,
    pub tv_iters: usize,
    /// Report wall-clock runtimes; off by default so metric files are
    /// byte-reproducible.
    pub timing: bool,
    pub output_dir: PathBuf,
    pub lrpe_checkpoint: Option<PathBuf>,
    pub grad_checkpoint: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            geom: GeometryConfig::parallel(32, 8, 30, 48, 1.5),
            scan_mode: ScanMode::SparseView,
            noise: None,
            lrpe: LrpeConfig::new(10, 0.1, 5),
            train: TrainConfig::default(),
            seed: 1,
            eval_count: 5,
            eval_ellipses: 5,
            train_samples: 12,
            prior_lambda: 2e-3,
            prior_iters: 300,
            tv_lambda: 3e-3,
            tv_iters: 400,
            timing: false,
            output_dir: PathBuf::from("out"),
            lrpe_checkpoint: None,
            grad_checkpoint: None,
        }
    }
}

impl ExperimentConfig {
    /// Build from flat key-value pairs (config file plus --set overrides).
    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let parse_err = |k: &str, e: String| Error::Config(format!("{k}: {e}"));
        macro_rules! get {
            ($key:expr, $target:expr, $ty:ty) => {
                if let Some(v) = map.get($key) {
                    $target = v.parse::<$ty>().map_err(|e| parse_err($key, e.to_string()))?;
                }
            };
        }

        let mut fine = cfg.geom.fine_size;
        let mut coarse = cfg.geom.coarse_size;
        let mut bins = cfg.geom.num_bins;
        let mut fov = cfg.geom.fov_radius;
        get!("geom.fine_size", fine, usize);
        get!("geom.coarse_size", coarse, usize);
        get!("geom.num_bins", bins, usize);
        get!("geom.fov_radius", fov, f64);

        let mode = map.get("mode.kind").map(String::as_str).unwrap_or("sparse_view");
        match mode {
            "sparse_view" => {
                let mut views = 30usize;
                get!("mode.views", views, usize);
                cfg.geom = GeometryConfig::parallel(fine, coarse, views, bins, fov);
                cfg.scan_mode = ScanMode::SparseView;
            }
            "limited_angle" => {
                let mut range = 90.0f64;
                let mut step = 2.0f64;
                get!("mode.range_deg", range, f64);
                get!("mode.step_deg", step, f64);
                cfg.geom = GeometryConfig::limited_angle(fine, coarse, range, step, bins, fov);
                cfg.scan_mode = ScanMode::LimitedAngle;
            }
            other => return Err(Error::Config(format!("unknown mode.kind {other}"))),
        }
        if let Some(beam) = map.get("geom.beam") {
            match beam.as_str() {
                "parallel" => cfg.geom.beam = Beam::Parallel,
                "fan" => {
                    let mut src = 3.0 * fov;
                    get!("geom.source_radius", src, f64);
                    cfg.geom.beam = Beam::Fan;
                    cfg.geom.source_radius = src;
                }
                other => return Err(Error::Config(format!("unknown beam {other}"))),
            }
        }
        if let Some(v) = map.get("geom.detector_spacing") {
            cfg.geom.detector_spacing =
                v.parse().map_err(|e: std::num::ParseFloatError| parse_err("geom.detector_spacing", e.to_string()))?;
        }
        cfg.geom.validate()?;

        get!("seed", cfg.seed, u64);
        if let Some(kind) = map.get("noise.kind") {
            if kind != "none" {
                let mut level = 0.05f64;
                let mut nseed = cfg.seed.wrapping_add(0x5eed);
                get!("noise.level", level, f64);
                get!("noise.seed", nseed, u64);
                let spec = NoiseSpec { kind: NoiseKind::parse(kind)?, level, seed: nseed };
                spec.validate()?;
                cfg.noise = Some(spec);
            }
        }

        get!("lrpe.stages", cfg.lrpe.stages, usize);
        get!("lrpe.step_size", cfg.lrpe.step_size, f64);
        get!("lrpe.state_channels", cfg.lrpe.state_channels, usize);
        get!("lrpe.tolerance", cfg.lrpe.tolerance, f64);
        if let Some(v) = map.get("lrpe.fidelity") {
            cfg.lrpe.fidelity = FidelityMode::parse(v)?;
        }
        get!("lrpe.use_prior", cfg.lrpe.use_prior, bool);
        cfg.lrpe.validate()?;

        get!("train.epochs", cfg.train.epochs, usize);
        get!("train.lr_init", cfg.train.lr_init, f64);
        get!("train.beta1", cfg.train.beta1, f64);
        get!("train.beta2", cfg.train.beta2, f64);
        get!("train.grad_clip_norm", cfg.train.grad_clip_norm, f64);
        get!("train.batch_size", cfg.train.batch_size, usize);
        get!("train.seed", cfg.train.seed, u64);
        cfg.train.validate()?;

        get!("eval.count", cfg.eval_count, usize);
        get!("eval.ellipses", cfg.eval_ellipses, usize);
        get!("train.samples", cfg.train_samples, usize);
        get!("prior.lambda", cfg.prior_lambda, f64);
        get!("prior.iters", cfg.prior_iters, usize);
        get!("tv.lambda", cfg.tv_lambda, f64);
        get!("tv.iters", cfg.tv_iters, usize);
        get!("timing", cfg.timing, bool);

        if let Some(v) = map.get("paths.output_dir") {
            cfg.output_dir = PathBuf::from(v);
        }
        cfg.lrpe_checkpoint = map.get("paths.lrpe_checkpoint").map(PathBuf::from);
        cfg.grad_checkpoint = map.get("paths.grad_checkpoint").map(PathBuf::from);
        Ok(cfg)
    }

    pub fn prior(&self) -> TvPrior {
        TvPrior { lambda: self.prior_lambda, iters: self.prior_iters }
    }

    /// Deterministic phantom seed streams: evaluation and training sets are
    /// disjoint.
    pub fn eval_phantom_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(900_000 + i as u64)
    }

    pub fn train_phantom_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
    }

    fn noise_for_sample(&self, base: &NoiseSpec, i: u64) -> NoiseSpec {
        NoiseSpec { seed: base.seed.wrapping_add(i), ..*base }
    }

    /// Phantom, clean sinogram and (possibly) noisy sinogram for one
    /// evaluation index.
    pub fn eval_case(&self, system: &LrpeSystem, i: usize) -> Result<(Image, Sinogram)> {
        let n = self.geom.fine_size;
        let pitch = self.geom.pixel_pitch(GridLevel::Fine);
        let phantom = random_phantom(self.eval_phantom_seed(i), n, self.eval_ellipses, pitch)?;
        let clean = system.fine.forward_project(&phantom)?;
        let measured = match &self.noise {
            Some(spec) => add_noise(&clean, &self.noise_for_sample(spec, i as u64))?,
            None => clean,
        };
        Ok((phantom, measured))
    }

    /// Generate the training set (ground truth, measurement) pairs.
    pub fn train_pairs(&self, system: &LrpeSystem) -> Result<Vec<(Image, Sinogram)>> {
        let n = self.geom.fine_size;
        let pitch = self.geom.pixel_pitch(GridLevel::Fine);
        (0..self.train_samples)
            .map(|i| {
                let phantom =
                    random_phantom(self.train_phantom_seed(i), n, self.eval_ellipses, pitch)?;
                let clean = system.fine.forward_project(&phantom)?;
                let measured = match &self.noise {
                    Some(spec) => {
                        add_noise(&clean, &self.noise_for_sample(spec, 10_000 + i as u64))?
                    }
                    None => clean,
                };
                Ok((phantom, measured))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub runtime_s: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("method,psnr_db,ssim,runtime_s\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.3}\n",
            r.method, r.psnr_db, r.ssim, r.runtime_s
        ));
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty metrics csv".into()))?;
    if header != "method,psnr_db,ssim,runtime_s" {
        return Err(Error::Format(format!("unexpected metrics header {header}")));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(Error::Format(format!("bad metrics row {l}")));
            }
            Ok(MetricsRow {
                method: f[0].to_string(),
                psnr_db: f[1].parse().map_err(|e| Error::Format(format!("psnr: {e}")))?,
                ssim: f[2].parse().map_err(|e| Error::Format(format!("ssim: {e}")))?,
                runtime_s: f[3].parse().map_err(|e| Error::Format(format!("runtime: {e}")))?,
            })
        })
        .collect()
}

#[derive(Debug)]
pub struct ExperimentOutput {
    pub metrics: Vec<MetricsRow>,
    pub skipped: Vec<String>,
    pub output_dir: PathBuf,
}

struct MethodEval {
    psnr_sum: f64,
    ssim_sum: f64,
    runtime: f64,
    count: usize,
    first_recon: Option<Image>,
}

impl MethodEval {
    fn new() -> Self {
        MethodEval { psnr_sum: 0.0, ssim_sum: 0.0, runtime: 0.0, count: 0, first_recon: None }
    }

    fn add(&mut self, recon: Image, gt: &Image, elapsed: f64) -> Result<()> {
        self.psnr_sum += psnr(&recon, gt, 1.0)?;
        self.ssim_sum += ssim(&recon, gt, &SsimParams::default())?;
        self.runtime += elapsed;
        if self.first_recon.is_none() {
            self.first_recon = Some(recon);
        }
        self.count += 1;
        Ok(())
    }

    fn row(&self, method: &str, timing: bool) -> MetricsRow {
        MetricsRow {
            method: method.to_string(),
            psnr_db: self.psnr_sum / self.count.max(1) as f64,
            ssim: self.ssim_sum / self.count.max(1) as f64,
            runtime_s: if timing { self.runtime } else { 0.0 },
        }
    }
}

/// Run the full comparison pipeline and write all artifacts under the
/// config's output directory. Learned methods without a checkpoint are
/// skipped and listed in the output.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.geom.validate()?;
    if cfg.eval_count < 1 {
        return Err(Error::Config("eval.count must be >= 1".into()));
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    let system = LrpeSystem::build(cfg.geom.clone())?;
    let prior_rec = cfg.prior();

    let cases: Vec<(Image, Sinogram)> = (0..cfg.eval_count)
        .map(|i| cfg.eval_case(&system, i))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut skipped = Vec::new();

    // FBP baseline.
    let mut eval = MethodEval::new();
    for (gt, b) in &cases {
        let start = Instant::now();
        let recon = fbp(b, &cfg.geom)?;
        eval.add(recon, gt, start.elapsed().as_secs_f64())?;
    }
    write_recon_artifacts(&cfg.output_dir, "fbp", eval.first_recon.as_ref().unwrap())?;
    rows.push(eval.row("fbp", cfg.timing));

    // TV baseline.
    let bounds = spectral_bounds(&system.fine, 300, cfg.seed)?;
    let tv_params = TvParams::balanced(cfg.tv_lambda, cfg.tv_iters, bounds.lambda_max);
    let mut eval = MethodEval::new();
    for (gt, b) in &cases {
        let start = Instant::now();
        let (recon, _) = tv_reconstruct(b, &system.fine, &tv_params)?;
        eval.add(recon, gt, start.elapsed().as_secs_f64())?;
    }
    write_recon_artifacts(&cfg.output_dir, "tv", eval.first_recon.as_ref().unwrap())?;
    rows.push(eval.row("tv", cfg.timing));

    // Learned methods.
    for (method, ckpt, use_prior) in [
        ("grad", cfg.grad_checkpoint.as_ref(), false),
        ("lrpe", cfg.lrpe_checkpoint.as_ref(), true),
    ] {
        let Some(path) = ckpt else {
            skipped.push(method.to_string());
            continue;
        };
        if !path.exists() {
            skipped.push(method.to_string());
            continue;
        }
        let (w, meta) = io::read_checkpoint(path)?;
        if meta.geometry_hash != io::geometry_hash(&cfg.geom) {
            return Err(Error::Config(format!(
                "{method} checkpoint was trained on a different geometry"
            )));
        }
        let mut lrpe_cfg = cfg.lrpe;
        lrpe_cfg.use_prior = use_prior;
        lrpe_cfg.state_channels = meta.state_channels;
        let mut eval = MethodEval::new();
        let mut first_trace = None;
        for (gt, b) in &cases {
            let start = Instant::now();
            let (recon, trace) = lrpe_infer(&system, b, &w, &lrpe_cfg, &prior_rec, Some(gt))?;
            eval.add(recon, gt, start.elapsed().as_secs_f64())?;
            if first_trace.is_none() {
                first_trace = Some(trace);
            }
        }
        write_recon_artifacts(&cfg.output_dir, method, eval.first_recon.as_ref().unwrap())?;
        if let Some(trace) = first_trace {
            let mut csv = String::from("stage,residual,psnr_db\n");
            for (k, r) in trace.residuals.iter().enumerate() {
                let p = trace
                    .psnr
                    .as_ref()
                    .map(|v| format!("{:.6}", v[k]))
                    .unwrap_or_default();
                csv.push_str(&format!("{k},{r:.9e},{p}\n"));
            }
            std::fs::write(cfg.output_dir.join(format!("{method}_trace.csv")), csv)?;
        }
        // Empirical certificate at states representative of inference.
        if method == "lrpe" {
            let cert_samples = certificate_samples(&system, &lrpe_cfg, &prior_rec, &cases)?;
            let cert = certify(&system.fine, &w, &lrpe_cfg, &cert_samples, 60, cfg.seed)?;
            std::fs::write(cfg.output_dir.join("certificate.txt"), cert.report())?;
            std::fs::write(cfg.output_dir.join("certificate_samples.csv"), cert.samples_csv())?;
        }
        rows.push(eval.row(method, cfg.timing));
    }

    let gt0 = &cases[0].0;
    write_recon_artifacts(&cfg.output_dir, "ground_truth", gt0)?;
    std::fs::write(cfg.output_dir.join("metrics.csv"), metrics_csv(&rows))?;
    std::fs::write(cfg.output_dir.join("metadata.txt"), experiment_metadata(cfg, &skipped))?;

    Ok(ExperimentOutput { metrics: rows, skipped, output_dir: cfg.output_dir.clone() })
}

fn certificate_samples(
    system: &LrpeSystem,
    cfg: &LrpeConfig,
    prior_rec: &TvPrior,
    cases: &[(Image, Sinogram)],
) -> Result<Vec<CertifySample>> {
    let n = system.fine_size();
    let (gt, b) = &cases[0];
    let prior = if cfg.use_prior {
        system.lift_prior(b, prior_rec)?
    } else {
        Image::zeros(n, system.fine.pixel_pitch)
    };
    let zero = ChannelImage::zeros(cfg.state_channels, n, n);
    let mut gt_state = ChannelImage::zeros(cfg.state_channels, n, n);
    for c in 0..cfg.state_channels {
        gt_state.channel_mut(c).copy_from_slice(&gt.data);
    }
    Ok(vec![
        CertifySample { state: zero, prior: prior.clone(), measurement: b.clone() },
        CertifySample { state: gt_state, prior, measurement: b.clone() },
    ])
}

fn write_recon_artifacts(dir: &Path, method: &str, img: &Image) -> Result<()> {
    io::write_image(&dir.join(format!("{method}.lrim")), img)?;
    io::write_pgm(&dir.join(format!("{method}.pgm")), img)?;
    Ok(())
}

fn experiment_metadata(cfg: &ExperimentConfig, skipped: &[String]) -> String {
    let mut out = String::new();
    out.push_str(&format!("geometry_hash = {}\n", io::geometry_hash(&cfg.geom)));
    out.push_str(&format!(
        "scan_mode = {}\n",
        match cfg.scan_mode {
            ScanMode::SparseView => "sparse_view",
            ScanMode::LimitedAngle => "limited_angle",
        }
    ));
    out.push_str("psnr_peak = 1.0\n");
    out.push_str("ssim_window = 11\n");
    out.push_str("ssim_sigma = 1.5\n");
    match &cfg.noise {
        Some(n) => {
            out.push_str(&format!("noise.kind = {}\n", n.kind.name()));
            out.push_str(&format!("noise.level = {}\n", n.level));
            out.push_str(&format!("noise.seed = {}\n", n.seed));
            if n.kind == NoiseKind::GaussianPercent {
                out.push_str("noise.sigma_reference = mean_abs_sinogram\n");
            }
        }
        None => out.push_str("noise.kind = none\n"),
    }
    out.push_str(&format!("seed = {}\n", cfg.seed));
    out.push_str(&format!("eval.count = {}\n", cfg.eval_count));
    out.push_str(&format!("reconstruction_channel = first\n"));
    out.push_str(&format!("skipped = {}\n", skipped.join(";")));
    out
}

/// Training pipeline used by the `train` subcommand: generates the dataset,
/// runs the optimizer and writes the checkpoint plus the loss trace.
pub fn run_training(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<TrainOutcome> {
    let system = LrpeSystem::build(cfg.geom.clone())?;
    let pairs = cfg.train_pairs(&system)?;
    let prior_rec = cfg.prior();
    let samples = prepare_samples(&system, &cfg.lrpe, &prior_rec, &pairs)?;
    let w0 = crate::nn::xavier_init(cfg.train.seed, cfg.lrpe.state_channels)?;
    let outcome = lrpe_train(&system, &samples, &w0, &cfg.lrpe, &cfg.train)?;
    if let Some(dir) = checkpoint.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let meta = io::CheckpointMeta {
        stages: cfg.lrpe.stages,
        step_size: cfg.lrpe.step_size,
        state_channels: cfg.lrpe.state_channels,
        fidelity: cfg.lrpe.fidelity.name().to_string(),
        use_prior: cfg.lrpe.use_prior,
        seed: cfg.train.seed,
        geometry_hash: io::geometry_hash(&cfg.geom),
    };
    io::write_checkpoint(checkpoint, &outcome.weights, &meta)?;
    let mut trace = String::from("epoch,loss\n");
    for (i, l) in outcome.loss_trace.iter().enumerate() {
        trace.push_str(&format!("{i},{l:.9e}\n"));
    }
    let trace_path = checkpoint.with_extension("loss.csv");
    std::fs::write(trace_path, trace)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parses_and_overrides() {
        let text = "mode.kind = limited_angle\nmode.range_deg = 90\nmode.step_deg = 3\n\
                    geom.fine_size = 16\ngeom.coarse_size = 4\nnoise.kind = gaussian_percent\n\
                    noise.level = 0.05\nlrpe.stages = 4\n";
        let map = io::parse_kv(text).unwrap();
        let cfg = ExperimentConfig::from_kv(&map).unwrap();
        assert_eq!(cfg.scan_mode, ScanMode::LimitedAngle);
        assert_eq!(cfg.geom.num_views, 30);
        assert_eq!(cfg.geom.fine_size, 16);
        assert_eq!(cfg.lrpe.stages, 4);
        assert!(cfg.noise.is_some());
    }

    #[test]
    fn metrics_csv_round_trip() {
        let rows = vec![
            MetricsRow { method: "fbp".into(), psnr_db: 21.5, ssim: 0.48, runtime_s: 0.0 },
            MetricsRow { method: "tv".into(), psnr_db: 27.03, ssim: 0.8548, runtime_s: 0.0 },
        ];
        let csv = metrics_csv(&rows);
        let back = parse_metrics_csv(&csv).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].method, "fbp");
        assert!((back[1].psnr_db - 27.03).abs() < 1e-9);
    }

    #[test]
    fn unknown_noise_kind_rejected() {
        let map = io::parse_kv("noise.kind = speckle\n").unwrap();
        assert!(ExperimentConfig::from_kv(&map).is_err());
    }
}
