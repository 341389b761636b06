//! Text-to-image inversion: optimize INR weights until the encoder's
//! embedding of the render matches a target embedding.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::alignment::{build_local_pairs, project_text, solve_procrustes};
use crate::autodiff::{Graph, ParamVars, Var};
use crate::dataset::{blend_target_at, retrieve_init, DatasetStore};
use crate::encoder::{cosine_distance_on_graph, EncoderHandle, Embedding};
use crate::error::{Error, Result};
use crate::imaging::{AugmentParams, AugmentationConfig, Image};
use crate::inr::{render, render_on_graph, CoordinateGrid, INRSpec, INRWeights};
use crate::optim::{clip_layer_norms, Adam, AdamConfig};
use crate::seed::mix_seed;

/// Every hyperparameter of one inversion run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub steps: usize,
    /// Peak per-layer learning rate.
    pub base_lr: f64,
    /// Gaussian center layer of each phase.
    pub schedule_centers: Vec<usize>,
    /// Steps per phase.
    pub schedule_period: usize,
    /// Gaussian width in layer-index units.
    pub schedule_sigma: f64,
    /// Per-layer gradient-norm cap of each phase.
    pub clip_thresholds: Vec<f64>,
    pub beta: f64,
    pub blend_k: usize,
    /// Softmax temperature over the neighbors' similarities.
    pub blend_temperature: f64,
    /// Treat the linear head as one more scheduled layer instead of
    /// training it at the base rate.
    pub schedule_head: bool,
    pub procrustes_p: usize,
    pub weight_decay: f64,
    /// Augmentation ranges and count; the seed is replaced every step.
    pub augment: AugmentationConfig,
    /// Side of the square grid the INR is rendered on.
    pub resolution: usize,
    pub seed: u64,
    pub use_awp_init: bool,
    pub use_procrustes: bool,
    pub use_freq_schedule: bool,
    pub use_blend: bool,
    /// Retrieve the initialization by the projected embedding (otherwise by the raw one).
    pub retrieve_by_projected: bool,
    pub prompt_suffix: String,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            base_lr: 2e-4,
            schedule_centers: vec![0, 1, 2],
            schedule_period: 70,
            schedule_sigma: 1.0,
            clip_thresholds: vec![1.0, 0.5, 0.2],
            beta: 0.5,
            blend_k: 8,
            blend_temperature: 1.0,
            schedule_head: true,
            procrustes_p: 256,
            weight_decay: 1e-4,
            augment: AugmentationConfig::default(),
            resolution: 64,
            seed: 0,
            use_awp_init: true,
            use_procrustes: true,
            use_freq_schedule: true,
            use_blend: true,
            retrieve_by_projected: true,
            prompt_suffix: String::new(),
        }
    }
}

impl InversionConfig {
    /// Settings sized for a 16-entry store and a single CPU.
    pub fn desk() -> Self {
        Self {
            procrustes_p: 16,
            augment: AugmentationConfig {
                count: 8,
                ..AugmentationConfig::default()
            },
            resolution: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.schedule_centers.is_empty() || self.schedule_centers.len() != self.clip_thresholds.len() {
            return bad(format!(
                "{} schedule centers but {} clip thresholds",
                self.schedule_centers.len(),
                self.clip_thresholds.len()
            ));
        }
        if !(self.base_lr > 0.0) || self.clip_thresholds.iter().any(|c| !(*c > 0.0)) {
            return bad("learning rate and clip thresholds must be positive".into());
        }
        if self.schedule_period == 0 || !(self.schedule_sigma > 0.0) {
            return bad("schedule period and sigma must be positive".into());
        }
        if !(self.beta >= 0.0) || !(self.weight_decay >= 0.0) || self.resolution == 0 {
            return bad("beta, weight decay and resolution must be non-negative / nonzero".into());
        }
        if !(self.blend_temperature > 0.0) {
            return bad("blend temperature must be positive".into());
        }
        if self.blend_k == 0 || self.procrustes_p == 0 {
            return bad("blend_k and procrustes_p must be >= 1".into());
        }
        self.augment.validate()
    }
}

/// Schedule position at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleState {
    pub phase: usize,
    pub center: usize,
    /// One rate per sine layer.
    pub rates: Vec<f64>,
    pub clip: f64,
}

impl ScheduleState {
    /// Rates for every parameter block: the sine layers, then the linear head.
    pub fn block_rates(&self, cfg: &InversionConfig) -> Vec<f64> {
        let mut r = self.rates.clone();
        if !cfg.schedule_head {
            r.push(cfg.base_lr);
        }
        r
    }
}

/// Gaussian rates `lr_l = base · exp(−(l − c)²/2σ²)` for `num_layers` sine layers.
pub fn schedule_rates(step: usize, cfg: &InversionConfig, num_layers: usize) -> ScheduleState {
    let phase = (step / cfg.schedule_period).min(cfg.schedule_centers.len() - 1);
    let center = cfg.schedule_centers[phase];
    let rates = (0..num_layers)
        .map(|l| {
            if cfg.use_freq_schedule {
                let d = l as f64 - center as f64;
                cfg.base_lr * (-d * d / (2.0 * cfg.schedule_sigma * cfg.schedule_sigma)).exp()
            } else {
                cfg.base_lr
            }
        })
        .collect();
    ScheduleState {
        phase,
        center,
        rates,
        clip: cfg.clip_thresholds[phase],
    }
}

/// Records `e*_i`: the render of `vars`, `aug.count` augmentations of it, each
/// embedded, averaged in index order and projected back to the unit sphere.
pub fn augmented_embedding_on_graph(
    g: &mut Graph,
    spec: &INRSpec,
    vars: &ParamVars,
    grid: &CoordinateGrid,
    h: &EncoderHandle,
    aug: &AugmentationConfig,
) -> Result<Var> {
    aug.validate()?;
    let (hh, ww) = (grid.height(), grid.width());
    let img = render_on_graph(g, spec, vars, grid)?;
    let mut rows = Vec::with_capacity(aug.count);
    for i in 0..aug.count {
        let x = AugmentParams::sample(aug, i).on_graph(g, img, hh, ww)?;
        rows.push(h.image_on_graph(g, x, hh, ww)?);
    }
    let stacked = g.concat_rows(&rows)?;
    let mean = g.mean_rows(stacked);
    Ok(g.normalize_rows(mean))
}

/// Forward-only `e*_i` of `phi` rendered on `grid`.
pub fn augmented_embedding(
    phi: &INRWeights,
    grid: &CoordinateGrid,
    h: &EncoderHandle,
    aug: &AugmentationConfig,
) -> Result<Embedding> {
    let mut g = Graph::new();
    let vars = ParamVars::register(&mut g, phi.params(), false);
    let e = augmented_embedding_on_graph(&mut g, phi.spec(), &vars, grid, h, aug)?;
    g.check_finite()?;
    Embedding::new(g.value(e).data().to_vec())
}

/// `cos_dist(e_i, e_t2i) + β · cos_dist(e_i, e_img)`.
pub fn total_loss(e_i: &Embedding, e_t2i: &Embedding, e_img: &Embedding, beta: f64) -> f64 {
    (1.0 - e_i.dot(e_t2i)) + beta * (1.0 - e_i.dot(e_img))
}

/// One row of the loss trace, evaluated before the update of `step`.
/// The last row (`step = T`) is the final state, scored with the same
/// augmentation draw as row 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub alignment: f64,
    /// Distance to the anchor embedding, 0 without one.
    pub blend: f64,
    pub total: f64,
    pub center: usize,
    /// Largest per-layer gradient norm after clipping; 0 on the final row.
    pub clipped_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn initial(&self) -> Option<&TraceRow> {
        self.rows.first()
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    /// Tab-separated table with a header line.
    pub fn to_table(&self) -> String {
        let mut out = String::from("step\talignment\tblend\ttotal\tcenter\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{:.8}\t{:.8}\t{:.8}\t{}",
                r.step, r.alignment, r.blend, r.total, r.center
            );
        }
        out
    }
}

/// Output of [`invert_to_embedding`].
#[derive(Clone, Debug, PartialEq)]
pub struct Inversion {
    pub weights: INRWeights,
    pub trace: LossTrace,
}

/// Second target pulling the embedding with its own weight.
#[derive(Clone, Copy, Debug)]
pub struct Anchor<'a> {
    pub embedding: &'a Embedding,
    pub weight: f64,
}

struct StepEval {
    alignment: f64,
    blend: f64,
    total: f64,
    grad: Option<crate::autodiff::ParamVector>,
}

fn evaluate_step(
    phi: &INRWeights,
    grid: &CoordinateGrid,
    h: &EncoderHandle,
    aug: &AugmentationConfig,
    target: &Embedding,
    anchor: Option<Anchor>,
    with_grad: bool,
) -> Result<StepEval> {
    let mut g = Graph::new();
    let vars = ParamVars::register(&mut g, phi.params(), with_grad);
    let e = augmented_embedding_on_graph(&mut g, phi.spec(), &vars, grid, h, aug)?;
    let t = g.constant(target.to_tensor());
    let align = cosine_distance_on_graph(&mut g, e, t)?;
    let (total, blend) = match anchor {
        Some(a) => {
            let at = g.constant(a.embedding.to_tensor());
            let b = cosine_distance_on_graph(&mut g, e, at)?;
            let wb = g.scale(b, a.weight);
            (g.add(align, wb)?, Some(b))
        }
        None => (align, None),
    };
    g.check_finite()?;
    let grad = if with_grad {
        let grads = g.backward(total)?;
        Some(vars.collect(&grads, phi.params()))
    } else {
        None
    };
    Ok(StepEval {
        alignment: g.scalar(align),
        blend: blend.map_or(0.0, |b| g.scalar(b)),
        total: g.scalar(total),
        grad,
    })
}

/// Optimizes `init` so the augmented embedding of its render approaches
/// `target`, optionally pulled toward `anchor`.
pub fn invert_to_embedding(
    target: &Embedding,
    init: &INRWeights,
    h: &EncoderHandle,
    cfg: &InversionConfig,
    anchor: Option<Anchor>,
) -> Result<Inversion> {
    cfg.validate()?;
    if target.dim() != h.embed_dim() || anchor.is_some_and(|a| a.embedding.dim() != h.embed_dim()) {
        return Err(Error::shape("inversion", "target dimension differs from the encoder"));
    }
    if anchor.is_some_and(|a| !(a.weight >= 0.0)) {
        return Err(Error::InvalidArgument("anchor weight must be >= 0".into()));
    }
    let grid = CoordinateGrid::square(cfg.resolution)?;
    let layers = init.params().layout().num_layers();
    let scheduled = if cfg.schedule_head { layers } else { init.spec().hidden_layers };
    let mut phi = init.clone();
    let mut opt = Adam::new(AdamConfig::with_weight_decay(cfg.weight_decay), phi.params().len());
    let mut trace = LossTrace::default();
    let diverged = |step: usize, last: &INRWeights| Error::InversionDiverged {
        step,
        last_good: Box::new(last.clone()),
    };
    for step in 0..=cfg.steps {
        let sched = schedule_rates(step, cfg, scheduled);
        let last = step == cfg.steps;
        // the final state is scored with the step-0 draw so first and last rows pair up
        let draw = if last { 0 } else { step as u64 };
        let aug = cfg.augment.with_seed(mix_seed(cfg.seed, draw));
        let eval = match evaluate_step(&phi, &grid, h, &aug, target, anchor, !last) {
            Ok(e) if e.total.is_finite() => e,
            Ok(_) => return Err(diverged(step, &phi)),
            Err(e) if e.is_numerical() => return Err(diverged(step, &phi)),
            Err(e) => return Err(e),
        };
        let mut row = TraceRow {
            step,
            alignment: eval.alignment,
            blend: eval.blend,
            total: eval.total,
            center: sched.center,
            clipped_norm: 0.0,
        };
        if let Some(mut grad) = eval.grad {
            clip_layer_norms(&mut grad, sched.clip);
            row.clipped_norm = (0..layers).map(|l| grad.layer_norm(l)).fold(0.0, f64::max);
            let mut params = phi.params().clone();
            opt.step(&mut params, &grad, &sched.block_rates(cfg))?;
            if !params.is_finite() {
                return Err(diverged(step, &phi));
            }
            phi = phi.with_params(params)?;
        }
        if step % 50 == 0 || last {
            log::debug!("inversion step {step}: total {:.6} (center {})", row.total, row.center);
        }
        trace.rows.push(row);
    }
    Ok(Inversion { weights: phi, trace })
}

/// Everything produced by one text-to-image run.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub weights: INRWeights,
    pub trace: LossTrace,
    pub init_weights: INRWeights,
    pub init_entry: u64,
    pub text_embedding: Embedding,
    pub target: Embedding,
    pub blend_target: Option<Embedding>,
    /// Working grid side the weights were optimized on.
    pub resolution: usize,
}

impl Generation {
    /// The output as the encoder sees it.
    pub fn image(&self, h: &EncoderHandle) -> Result<Image> {
        encoder_view(&self.weights, self.resolution, h)
    }

    /// The retrieved initialization as the encoder sees it.
    pub fn init_image(&self, h: &EncoderHandle) -> Result<Image> {
        encoder_view(&self.init_weights, self.resolution, h)
    }
}

/// Render on the `resolution` working grid, clamped to `[0, 1]` and
/// resampled to the encoder's input size the way the optimization saw it.
pub fn encoder_view(phi: &INRWeights, resolution: usize, h: &EncoderHandle) -> Result<Image> {
    let r = h.image_resolution();
    render(phi, &CoordinateGrid::square(resolution)?)?.clamped().resized(r, r)
}

/// The full pipeline for a prompt: embed, project, retrieve, blend, optimize.
pub fn invert(prompt: &str, store: &DatasetStore, h: &EncoderHandle, cfg: &InversionConfig) -> Result<Generation> {
    let text = format!("{prompt}{}", cfg.prompt_suffix);
    let e_t = h.embed_text(&text)?;
    invert_text_embedding(&e_t, store, h, cfg)
}

/// [`invert`] from an already computed text embedding.
pub fn invert_text_embedding(
    e_t: &Embedding,
    store: &DatasetStore,
    h: &EncoderHandle,
    cfg: &InversionConfig,
) -> Result<Generation> {
    cfg.validate()?;
    store.check_encoder(h)?;
    let e_t2i = if cfg.use_procrustes {
        let pairs = build_local_pairs(e_t, store, cfg.procrustes_p)?;
        project_text(e_t, &solve_procrustes(&pairs)?)?
    } else {
        e_t.clone()
    };
    let entry = retrieve_init(if cfg.retrieve_by_projected { &e_t2i } else { e_t }, store)?;
    let init = if cfg.use_awp_init {
        entry.robust_weights()?
    } else {
        entry.plain_weights()?
    }
    .clone();
    let e_img = if cfg.use_blend {
        Some(blend_target_at(e_t, store, cfg.blend_k, cfg.blend_temperature)?)
    } else {
        None
    };
    let anchor = e_img.as_ref().map(|e| Anchor {
        embedding: e,
        weight: cfg.beta,
    });
    let out = invert_to_embedding(&e_t2i, &init, h, cfg, anchor)?;
    Ok(Generation {
        weights: out.weights,
        trace: out.trace,
        init_weights: init,
        init_entry: entry.id,
        text_embedding: e_t.clone(),
        target: e_t2i,
        blend_target: e_img,
        resolution: cfg.resolution,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{evaluate_with_gradient, finite_difference_gradient, max_relative_error};
    use crate::fixtures::fixtures_at;
    use crate::inr::init_finer;
    use proptest::prelude::*;

    fn tiny_cfg(steps: usize) -> InversionConfig {
        InversionConfig {
            steps,
            augment: AugmentationConfig {
                count: 2,
                ..AugmentationConfig::default()
            },
            resolution: 16,
            ..InversionConfig::default()
        }
    }

    fn tiny_inr(seed: u64) -> INRWeights {
        init_finer(&INRSpec::with_size(3, 8), seed).unwrap()
    }

    #[test]
    fn schedule_examples() {
        let cfg = InversionConfig::default();
        let s0 = schedule_rates(0, &cfg, 6);
        assert_eq!((s0.phase, s0.center, s0.clip), (0, 0, 1.0));
        assert_eq!(s0.rates[0], cfg.base_lr);
        let s1 = schedule_rates(70, &cfg, 6);
        assert_eq!((s1.phase, s1.center, s1.clip), (1, 1, 0.5));
        assert_eq!(s1.rates[0], s1.rates[2]);
        assert_eq!(schedule_rates(69, &cfg, 6).center, 0);
        assert_eq!(schedule_rates(140, &cfg, 6).center, 2);
        assert_eq!(schedule_rates(350, &cfg, 6).center, 2);
        let flat = InversionConfig {
            use_freq_schedule: false,
            ..cfg
        };
        assert!(schedule_rates(100, &flat, 6).rates.iter().all(|&r| r == flat.base_lr));
    }

    #[test]
    fn total_loss_examples() {
        let e = Embedding::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(total_loss(&e, &e, &e, 0.5), 0.0);
        let t = Embedding::new(vec![0.6, 0.8, 0.0]).unwrap();
        let b = Embedding::new(vec![0.0, 0.0, 1.0]).unwrap();
        assert_eq!(total_loss(&e, &t, &b, 0.0), 1.0 - 0.6);
        let y = Embedding::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(total_loss(&e, &y, &b, 0.5), 1.5);
    }

    #[test]
    fn identity_augmentation_matches_plain_embedding() {
        let h = EncoderHandle::toy();
        let phi = tiny_inr(1);
        let grid = CoordinateGrid::square(16).unwrap();
        let e = augmented_embedding(&phi, &grid, &h, &AugmentationConfig::identity(1)).unwrap();
        let direct = h.embed_image(&render(&phi, &grid).unwrap()).unwrap();
        for (a, b) in e.values().iter().zip(direct.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn augmented_embedding_gradient_matches_finite_differences() {
        let h = EncoderHandle::toy();
        let phi = init_finer(&INRSpec::with_size(5, 8), 2).unwrap();
        let grid = CoordinateGrid::square(16).unwrap();
        let aug = AugmentationConfig {
            count: 3,
            seed: 5,
            ..AugmentationConfig::default()
        };
        let target = h.embed_text("a red disc on a blue background").unwrap();
        let loss = |g: &mut Graph, v: &ParamVars| {
            let e = augmented_embedding_on_graph(g, phi.spec(), v, &grid, &h, &aug)?;
            let t = g.constant(target.to_tensor());
            cosine_distance_on_graph(g, e, t)
        };
        let analytic = evaluate_with_gradient(phi.params(), loss).unwrap();
        let fd = finite_difference_gradient(phi.params(), 1e-6, loss).unwrap();
        let err = max_relative_error(analytic.gradient.values(), fd.values(), 1e-3);
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn zero_steps_keep_the_initialization() {
        let h = EncoderHandle::toy();
        let phi = tiny_inr(3);
        let t = h.embed_text("anything").unwrap();
        let out = invert_to_embedding(&t, &phi, &h, &tiny_cfg(0), None).unwrap();
        assert_eq!(out.weights, phi);
        assert_eq!(out.trace.rows.len(), 1);
    }

    #[test]
    fn inversion_is_deterministic_and_clips() {
        let h = EncoderHandle::toy();
        let phi = tiny_inr(4);
        let t = h.embed_text("a blue sky over a green field").unwrap();
        let cfg = InversionConfig {
            schedule_period: 3,
            ..tiny_cfg(8)
        };
        let a = invert_to_embedding(&t, &phi, &h, &cfg, None).unwrap();
        let b = invert_to_embedding(&t, &phi, &h, &cfg, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trace.rows.len(), 9);
        for r in &a.trace.rows[..8] {
            let cap = cfg.clip_thresholds[schedule_rates(r.step, &cfg, 4).phase];
            assert!(r.clipped_norm <= cap, "{} > {cap}", r.clipped_norm);
        }
    }

    #[test]
    fn zero_weight_anchor_matches_single_target() {
        let h = EncoderHandle::toy();
        let phi = tiny_inr(5);
        let t = h.embed_text("a yellow disc").unwrap();
        let other = h.embed_text("a black square").unwrap();
        let cfg = tiny_cfg(4);
        let a = invert_to_embedding(&t, &phi, &h, &cfg, None).unwrap();
        let b = invert_to_embedding(
            &t,
            &phi,
            &h,
            &cfg,
            Some(Anchor {
                embedding: &other,
                weight: 0.0,
            }),
        )
        .unwrap();
        assert_eq!(a.weights, b.weights);
        let totals = |x: &Inversion| x.trace.rows.iter().map(|r| r.total).collect::<Vec<_>>();
        assert_eq!(totals(&a), totals(&b));
    }

    #[test]
    fn own_render_is_a_near_fixed_point() {
        let h = EncoderHandle::toy();
        let phi = crate::robust_init::fit_blurred(
            &fixtures_at(16)[0].image,
            &INRSpec::with_size(3, 8),
            &crate::robust_init::RobustFitConfig {
                steps: 50,
                lr: 1e-3,
                blur_kernel: 31,
                blur_sigma: Some(4.0),
                ..Default::default()
            },
            None,
            1,
        )
        .unwrap()
        .weights;
        let cfg = tiny_cfg(10);
        let grid = CoordinateGrid::square(16).unwrap();
        let target = h.embed_image(&render(&phi, &grid).unwrap()).unwrap();
        let out = invert_to_embedding(&target, &phi, &h, &cfg, None).unwrap();
        let first = out.trace.initial().unwrap().total;
        assert!(first < 0.05, "{first}");
        let worst = out.trace.rows.iter().map(|r| r.total).fold(0.0, f64::max);
        assert!(worst < first + 0.05, "{first} -> {worst}");
    }

    #[test]
    fn trace_table_has_header_and_rows() {
        let trace = LossTrace {
            rows: vec![TraceRow {
                step: 0,
                alignment: 0.5,
                blend: 0.25,
                total: 0.625,
                center: 0,
                clipped_norm: 0.1,
            }],
        };
        let table = trace.to_table();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], "step\talignment\tblend\ttotal\tcenter");
        assert_eq!(lines[1].split('\t').count(), 5);
    }

    #[test]
    fn config_validation() {
        let mut cfg = InversionConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.clip_thresholds.pop();
        assert!(cfg.validate().is_err());
        let cfg = InversionConfig {
            base_lr: 0.0,
            ..InversionConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn schedule_invariants(
            step in 0usize..1000,
            period in 1usize..100,
            sigma in 0.2f64..3.0,
            centers in proptest::collection::vec(0usize..6, 1..4),
        ) {
            let cfg = InversionConfig {
                schedule_period: period,
                schedule_sigma: sigma,
                clip_thresholds: vec![1.0; centers.len()],
                schedule_centers: centers.clone(),
                ..InversionConfig::default()
            };
            let s = schedule_rates(step, &cfg, 6);
            prop_assert_eq!(s.phase, (step / period).min(centers.len() - 1));
            prop_assert_eq!(s.rates[s.center], cfg.base_lr);
            for a in 0..6usize {
                for b in 0..6usize {
                    let (da, db) = (a.abs_diff(s.center), b.abs_diff(s.center));
                    if da < db {
                        prop_assert!(s.rates[a] > s.rates[b]);
                    } else if da == db {
                        prop_assert_eq!(s.rates[a], s.rates[b]);
                    }
                }
            }
        }

        #[test]
        fn augmented_embedding_is_unit(seed in any::<u64>()) {
            let h = EncoderHandle::toy();
            let phi = tiny_inr(seed);
            let grid = CoordinateGrid::square(12).unwrap();
            let aug = AugmentationConfig { count: 2, seed, ..AugmentationConfig::default() };
            let e = augmented_embedding(&phi, &grid, &h, &aug).unwrap();
            prop_assert!((e.norm() - 1.0).abs() < 1e-6);
        }
    }
}
