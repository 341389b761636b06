//! Blur-fitted INRs trained under adversarial weight perturbation.
//!
//! Each training step perturbs the current weights `φ` by a `Δφ` that makes
//! the render less similar to its target, takes the optimizer step using
//! gradients at `φ + Δφ`, and applies that step to the unperturbed `φ`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{evaluate_with_gradient, Graph, ParamVars, ParamVector, Var};
use crate::error::{Error, Result};
use crate::imaging::{gaussian_blur, Image, Ssim, BLUR_KERNEL, BLUR_SIGMA_RANGE};
use crate::inr::{init_finer, render, render_on_graph, CoordinateGrid, INRSpec, INRWeights};
use crate::optim::{cosine_warm_restart, Adam, AdamConfig};
use crate::seed::mix_seed;

const BLUR_STREAM: u64 = 0xB1;
const INIT_STREAM: u64 = 0x1A;

/// Weight-perturbation settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AWPConfig {
    /// Perturbation radius relative to `‖φ‖`.
    pub gamma: f64,
    pub epsilon: f64,
    /// Step size of the single proxy step.
    pub proxy_lr: f64,
}

impl Default for AWPConfig {
    fn default() -> Self {
        Self {
            gamma: 0.01,
            epsilon: 1e-12,
            proxy_lr: 1e-4,
        }
    }
}

impl AWPConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !(self.epsilon > 0.0) || !(self.proxy_lr >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid AWP config {self:?}")));
        }
        Ok(())
    }
}

/// Loss weights and schedule of the image fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustFitConfig {
    pub steps: usize,
    pub lr: f64,
    /// Period of the cosine warm restarts.
    pub restart_period: usize,
    pub mse_weight: f64,
    pub ssim_weight: f64,
    pub l1_weight: f64,
    pub blur_kernel: usize,
    /// Fixed blur; `None` draws one per image from the seed.
    pub blur_sigma: Option<f64>,
}

impl Default for RobustFitConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-4,
            restart_period: 100,
            mse_weight: 0.85,
            ssim_weight: 0.25,
            l1_weight: 0.25,
            blur_kernel: BLUR_KERNEL,
            blur_sigma: None,
        }
    }
}

impl RobustFitConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.mse_weight, self.ssim_weight, self.l1_weight];
        if self.steps == 0 || weights.iter().any(|w| !(*w >= 0.0)) || !(self.lr >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid fit config {self:?}")));
        }
        if let Some(s) = self.blur_sigma {
            if !(s > 0.0) {
                return Err(Error::InvalidArgument(format!("blur sigma must be > 0, got {s}")));
            }
        }
        Ok(())
    }

    /// The blur applied for `seed`: the fixed value or a draw from `(10, 20)`.
    pub fn sigma_for(&self, seed: u64) -> f64 {
        self.blur_sigma.unwrap_or_else(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, BLUR_STREAM));
            let (lo, hi) = BLUR_SIGMA_RANGE;
            lo + (hi - lo) * rng.random::<f64>()
        })
    }
}

/// Records `α1·MSE + α2·(1 − SSIM) + α3·L1` between `out` and `target`.
fn image_loss(
    g: &mut Graph,
    out: Var,
    target: Var,
    ssim: &Ssim,
    fit: &RobustFitConfig,
) -> Result<Var> {
    let r = g.sub(out, target)?;
    let sq = g.square(r);
    let mse = g.mean(sq);
    let ab = g.abs(r);
    let l1 = g.mean(ab);
    let s = ssim.on_graph(g, out, target)?;
    let dissim = g.scale(s, -1.0);
    let dissim = g.add_scalar(dissim, 1.0);
    let a = g.scale(mse, fit.mse_weight);
    let b = g.scale(dissim, fit.ssim_weight);
    let c = g.scale(l1, fit.l1_weight);
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

/// Target image and cached SSIM window for one fit.
struct FitTarget<'a> {
    spec: INRSpec,
    grid: CoordinateGrid,
    target: &'a Image,
    ssim: Ssim,
}

impl<'a> FitTarget<'a> {
    fn new(spec: INRSpec, target: &'a Image) -> Result<Self> {
        Ok(Self {
            spec,
            grid: CoordinateGrid::new(target.height(), target.width())?,
            target,
            ssim: Ssim::new(target.height(), target.width())?,
        })
    }

    fn loss(&self, params: &ParamVector, fit: &RobustFitConfig) -> Result<(f64, ParamVector)> {
        let target = self.target.to_tensor();
        let report = evaluate_with_gradient(params, |g: &mut Graph, v: &ParamVars| {
            let out = render_on_graph(g, &self.spec, v, &self.grid)?;
            let t = g.constant(target.clone());
            image_loss(g, out, t, &self.ssim, fit)
        })?;
        Ok((report.loss_value, report.gradient))
    }

    fn dissimilarity(&self, params: &ParamVector) -> Result<ParamVector> {
        let target = self.target.to_tensor();
        let report = evaluate_with_gradient(params, |g: &mut Graph, v: &ParamVars| {
            let out = render_on_graph(g, &self.spec, v, &self.grid)?;
            let t = g.constant(target.clone());
            let s = self.ssim.on_graph(g, out, t)?;
            let d = g.scale(s, -1.0);
            Ok(g.add_scalar(d, 1.0))
        })?;
        Ok(report.gradient)
    }
}

/// Adversarial perturbation `Δφ` for `phi` fitting `target`.
///
/// One fresh-state optimizer step on a copy of `φ` raises the SSIM
/// dissimilarity; the displacement is rescaled to `γ‖φ‖/(‖Δ‖ + ε)·Δ`.
pub fn compute_awp(phi: &INRWeights, grid: &CoordinateGrid, target: &Image, cfg: &AWPConfig) -> Result<ParamVector> {
    cfg.validate()?;
    if grid.height() != target.height() || grid.width() != target.width() {
        return Err(Error::shape("compute_awp", "grid does not match target"));
    }
    let ctx = FitTarget::new(*phi.spec(), target)?;
    awp_step(&ctx, phi.params(), cfg)
}

fn awp_step(ctx: &FitTarget, phi: &ParamVector, cfg: &AWPConfig) -> Result<ParamVector> {
    let phi_norm = phi.norm();
    if phi_norm == 0.0 {
        return Err(Error::DegenerateAnchor);
    }
    let grad = ctx.dissimilarity(phi)?;
    // ascend: feed the negated gradient to a descent step
    let ascent = grad.scaled(-1.0);
    let mut proxy_opt = Adam::new(AdamConfig::default(), phi.len());
    let lrs = vec![cfg.proxy_lr; phi.layout().num_layers()];
    let raw = proxy_opt.update(phi, &ascent, &lrs)?;
    let scale = cfg.gamma * phi_norm / (raw.norm() + cfg.epsilon);
    Ok(raw.scaled(scale))
}

/// Fits `init` to `target`. With `awp`, every step uses gradients taken at
/// the perturbed weights; without it this is plain fitting.
pub fn fit_inr(
    init: &INRWeights,
    target: &Image,
    fit: &RobustFitConfig,
    awp: Option<&AWPConfig>,
) -> Result<INRWeights> {
    fit.validate()?;
    if let Some(a) = awp {
        a.validate()?;
    }
    let ctx = FitTarget::new(*init.spec(), target)?;
    let mut phi = init.params().clone();
    let mut opt = Adam::new(AdamConfig::default(), phi.len());
    let layers = phi.layout().num_layers();
    let diverged = |step| move |e: Error| if e.is_numerical() { Error::Diverged { step } } else { e };
    for step in 0..fit.steps {
        let probe = match awp {
            Some(cfg) => {
                let delta = awp_step(&ctx, &phi, cfg).map_err(diverged(step))?;
                phi.add(&delta)?
            }
            None => phi.clone(),
        };
        let (loss, grad) = ctx.loss(&probe, fit).map_err(diverged(step))?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        let lr = cosine_warm_restart(fit.lr, step, fit.restart_period);
        let update = opt.update(&probe, &grad, &vec![lr; layers])?;
        // the step lands on the anchor, not on the perturbed probe
        phi = phi.add(&update)?;
        if step % 100 == 0 {
            log::debug!("fit step {step}: loss {loss:.6}");
        }
    }
    if !phi.is_finite() {
        return Err(Error::Diverged { step: fit.steps });
    }
    init.with_params(phi)
}

/// Result of a robust fit with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct RobustFit {
    pub weights: INRWeights,
    pub blurred: Image,
    pub record: FitRecord,
}

/// Sidecar metadata stored next to fitted weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub source_hash: String,
    pub blur_sigma: f64,
    pub seed: u64,
    pub final_psnr: f64,
    pub robust: bool,
}

/// SHA-256 over the dimensions and 8-bit quantized pixels.
pub fn source_hash(img: &Image) -> String {
    let mut h = Sha256::new();
    h.update((img.height() as u32).to_le_bytes());
    h.update((img.width() as u32).to_le_bytes());
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    h.update(&bytes);
    hex::encode(h.finalize())
}

/// Blurs `x` and fits a freshly initialized INR to it, with AWP when `awp` is given.
pub fn fit_blurred(
    x: &Image,
    spec: &INRSpec,
    fit: &RobustFitConfig,
    awp: Option<&AWPConfig>,
    seed: u64,
) -> Result<RobustFit> {
    fit_blurred_at(x, spec, fit, awp, seed, (x.height(), x.width()))
}

/// As [`fit_blurred`], but the blurred image is resampled to `size` before
/// fitting. The blur itself is applied at the source resolution.
pub fn fit_blurred_at(
    x: &Image,
    spec: &INRSpec,
    fit: &RobustFitConfig,
    awp: Option<&AWPConfig>,
    seed: u64,
    size: (usize, usize),
) -> Result<RobustFit> {
    fit.validate()?;
    let sigma = fit.sigma_for(seed);
    let blurred = gaussian_blur(x, fit.blur_kernel, sigma)?.resized(size.0, size.1)?;
    let init = init_finer(spec, mix_seed(seed, INIT_STREAM))?;
    let weights = fit_inr(&init, &blurred, fit, awp)?;
    let grid = CoordinateGrid::new(size.0, size.1)?;
    let final_psnr = render(&weights, &grid)?.clamped().psnr(&blurred)?;
    Ok(RobustFit {
        record: FitRecord {
            source_hash: source_hash(x),
            blur_sigma: sigma,
            seed,
            final_psnr,
            robust: awp.is_some(),
        },
        weights,
        blurred,
    })
}

/// Robust INR for the unblurred image `x`.
pub fn train_robust_inr(
    x: &Image,
    spec: &INRSpec,
    fit: &RobustFitConfig,
    awp: &AWPConfig,
    seed: u64,
) -> Result<INRWeights> {
    Ok(fit_blurred(x, spec, fit, Some(awp), seed)?.weights)
}

/// Loss of the image fit at `params`, forward only.
pub fn fit_loss(weights: &INRWeights, target: &Image, fit: &RobustFitConfig) -> Result<f64> {
    let ctx = FitTarget::new(*weights.spec(), target)?;
    Ok(ctx.loss(weights.params(), fit)?.0)
}
