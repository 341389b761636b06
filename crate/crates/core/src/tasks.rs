//! Reconstruction, prompt-driven editing and style transfer on top of
//! [`invert_to_embedding`].

use serde::{Deserialize, Serialize};

use crate::alignment::{build_local_pairs, project_text, solve_procrustes};
use crate::dataset::{DatasetStore, PrepareConfig};
use crate::encoder::{EncoderHandle, Embedding};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::inr::{init_finer, INRWeights};
use crate::inversion::{encoder_view, invert_to_embedding, Anchor, InversionConfig, LossTrace};
use crate::robust_init::{fit_blurred_at, fit_inr, RobustFitConfig};
use crate::seed::mix_seed;

pub const STYLE_CONTENT_WEIGHT: f64 = 0.5;
pub const EDIT_CONTENT_WEIGHT: f64 = 0.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Reconstruct,
    Edit,
    Style,
}

/// Settings of the image fits that produce a task's starting INR.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskFitConfig {
    pub prepare: PrepareConfig,
    /// Steps of the unblurred fit that follows the robust one (edit) or
    /// replaces it (style).
    pub refine_steps: usize,
    pub refine_lr: f64,
}

impl Default for TaskFitConfig {
    fn default() -> Self {
        Self {
            prepare: PrepareConfig::default(),
            refine_steps: 500,
            refine_lr: 1e-4,
        }
    }
}

impl TaskFitConfig {
    pub fn desk() -> Self {
        Self {
            prepare: PrepareConfig::desk(),
            refine_steps: 300,
            refine_lr: 1e-3,
        }
    }

    fn refine(&self) -> RobustFitConfig {
        RobustFitConfig {
            steps: self.refine_steps,
            lr: self.refine_lr,
            ..self.prepare.fit
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskRequest {
    pub kind: TaskKind,
    pub content_image: Option<Image>,
    pub style_image: Option<Image>,
    pub prompt: Option<String>,
    pub content_weight: f64,
    pub config: InversionConfig,
    pub fit: TaskFitConfig,
}

impl TaskRequest {
    /// A request with the kind's default content weight and no inputs.
    pub fn new(kind: TaskKind, config: InversionConfig, fit: TaskFitConfig) -> Self {
        Self {
            kind,
            content_image: None,
            style_image: None,
            prompt: None,
            content_weight: match kind {
                TaskKind::Style => STYLE_CONTENT_WEIGHT,
                _ => EDIT_CONTENT_WEIGHT,
            },
            config,
            fit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let need = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{:?} needs {what}", self.kind).to_lowercase()))
            }
        };
        need(self.content_image.is_some(), "a content image")?;
        match self.kind {
            TaskKind::Reconstruct => Ok(()),
            TaskKind::Edit => need(self.prompt.as_deref().is_some_and(|p| !p.is_empty()), "a prompt"),
            TaskKind::Style => need(self.style_image.is_some(), "a style image"),
        }?;
        if !(self.content_weight >= 0.0) {
            return Err(Error::InvalidArgument("content weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Result of any task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskOutput {
    pub image: Image,
    pub weights: INRWeights,
    pub init_weights: INRWeights,
    pub trace: LossTrace,
}

fn output(
    h: &EncoderHandle,
    cfg: &InversionConfig,
    init: INRWeights,
    weights: INRWeights,
    trace: LossTrace,
) -> Result<TaskOutput> {
    Ok(TaskOutput {
        image: encoder_view(&weights, cfg.resolution, h)?,
        weights,
        init_weights: init,
        trace,
    })
}

fn robust_start(img: &Image, fit: &TaskFitConfig, seed: u64) -> Result<INRWeights> {
    let p = &fit.prepare;
    Ok(fit_blurred_at(img, &p.spec, &p.fit, Some(&p.awp), seed, (p.resolution, p.resolution))?.weights)
}

/// Fits the blurred image robustly, then inverts toward the embedding of the
/// sharp image. The output is at the encoder's resolution.
pub fn reconstruct(img: &Image, h: &EncoderHandle, cfg: &InversionConfig, fit: &TaskFitConfig) -> Result<TaskOutput> {
    let init = robust_start(img, fit, cfg.seed)?;
    let target = h.embed_image(img)?;
    let out = invert_to_embedding(&target, &init, h, cfg, None)?;
    output(h, cfg, init, out.weights, out.trace)
}

/// Starting INR for editing: robust blurred fit, then an unblurred refinement.
pub fn edit_start(img: &Image, fit: &TaskFitConfig, seed: u64) -> Result<INRWeights> {
    let robust = robust_start(img, fit, seed)?;
    let sharp = img.resized(fit.prepare.resolution, fit.prepare.resolution)?;
    if fit.refine_steps == 0 {
        return Ok(robust);
    }
    fit_inr(&robust, &sharp, &fit.refine(), None)
}

/// Edits `img` toward an explicit target embedding, optionally anchored to
/// the image's own embedding at `content_weight`.
pub fn edit_to_embedding(
    img: &Image,
    target: &Embedding,
    h: &EncoderHandle,
    cfg: &InversionConfig,
    fit: &TaskFitConfig,
    content_weight: f64,
) -> Result<TaskOutput> {
    let init = edit_start(img, fit, cfg.seed)?;
    let content = h.embed_image(img)?;
    let anchor = (content_weight > 0.0).then_some(Anchor {
        embedding: &content,
        weight: content_weight,
    });
    let out = invert_to_embedding(target, &init, h, cfg, anchor)?;
    output(h, cfg, init, out.weights, out.trace)
}

/// Edits `img` toward `prompt`. With a store and `use_procrustes`, the
/// prompt embedding is first projected toward the image side.
pub fn edit(
    img: &Image,
    prompt: &str,
    h: &EncoderHandle,
    store: Option<&DatasetStore>,
    cfg: &InversionConfig,
    fit: &TaskFitConfig,
    content_weight: f64,
) -> Result<TaskOutput> {
    let e_t = h.embed_text(&format!("{prompt}{}", cfg.prompt_suffix))?;
    let target = match store {
        Some(s) if cfg.use_procrustes => {
            s.check_encoder(h)?;
            let pairs = build_local_pairs(&e_t, s, cfg.procrustes_p)?;
            project_text(&e_t, &solve_procrustes(&pairs)?)?
        }
        _ => e_t,
    };
    edit_to_embedding(img, &target, h, cfg, fit, content_weight)
}

/// Starting INR for style transfer: a plain fit to the unblurred content.
pub fn style_start(content: &Image, fit: &TaskFitConfig, seed: u64) -> Result<INRWeights> {
    let p = &fit.prepare;
    let sharp = content.resized(p.resolution, p.resolution)?;
    let init = init_finer(&p.spec, mix_seed(seed, 0x57))?;
    fit_inr(&init, &sharp, &RobustFitConfig { steps: p.fit.steps, ..fit.refine() }, None)
}

/// Pulls the content image's INR toward the style embedding while holding
/// it near the content embedding at `content_weight`.
pub fn style_transfer(
    content: &Image,
    style: &Image,
    h: &EncoderHandle,
    cfg: &InversionConfig,
    fit: &TaskFitConfig,
    content_weight: f64,
) -> Result<TaskOutput> {
    let init = style_start(content, fit, cfg.seed)?;
    let e_style = h.embed_image(style)?;
    let e_content = h.embed_image(content)?;
    let anchor = Anchor {
        embedding: &e_content,
        weight: content_weight,
    };
    let out = invert_to_embedding(&e_style, &init, h, cfg, Some(anchor))?;
    output(h, cfg, init, out.weights, out.trace)
}

/// Dispatches a validated request.
pub fn run_task(req: &TaskRequest, h: &EncoderHandle, store: Option<&DatasetStore>) -> Result<TaskOutput> {
    req.validate()?;
    let content = req.content_image.as_ref().expect("validated");
    match req.kind {
        TaskKind::Reconstruct => reconstruct(content, h, &req.config, &req.fit),
        TaskKind::Edit => edit(
            content,
            req.prompt.as_deref().expect("validated"),
            h,
            store,
            &req.config,
            &req.fit,
            req.content_weight,
        ),
        TaskKind::Style => style_transfer(
            content,
            req.style_image.as_ref().expect("validated"),
            h,
            &req.config,
            &req.fit,
            req.content_weight,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::fixtures_at;
    use crate::imaging::AugmentationConfig;
    use crate::inr::INRSpec;
    use crate::robust_init::AWPConfig;

    fn tiny() -> (InversionConfig, TaskFitConfig) {
        let cfg = InversionConfig {
            steps: 3,
            augment: AugmentationConfig {
                count: 2,
                ..AugmentationConfig::default()
            },
            resolution: 16,
            ..InversionConfig::default()
        };
        let fit = TaskFitConfig {
            prepare: PrepareConfig {
                spec: INRSpec::with_size(2, 8),
                fit: RobustFitConfig {
                    steps: 5,
                    lr: 1e-3,
                    blur_kernel: 31,
                    blur_sigma: Some(4.0),
                    ..RobustFitConfig::default()
                },
                awp: AWPConfig::default(),
                resolution: 16,
                keep_plain: false,
            },
            refine_steps: 5,
            refine_lr: 1e-3,
        };
        (cfg, fit)
    }

    #[test]
    fn request_validation() {
        let (cfg, fit) = tiny();
        let mut r = TaskRequest::new(TaskKind::Edit, cfg, fit);
        assert_eq!(r.content_weight, 0.0);
        assert!(r.validate().is_err());
        r.content_image = Some(Image::filled(4, 4, [0.5; 3]));
        assert!(r.validate().is_err());
        r.prompt = Some("a red disc".into());
        assert!(r.validate().is_ok());
        let s = TaskRequest::new(TaskKind::Style, r.config.clone(), r.fit.clone());
        assert_eq!(s.content_weight, 0.5);
    }

    #[test]
    fn zero_step_reconstruction_is_the_blurred_fit() {
        let h = EncoderHandle::toy();
        let (mut cfg, fit) = tiny();
        cfg.steps = 0;
        let img = &fixtures_at(16)[0].image;
        let out = reconstruct(img, &h, &cfg, &fit).unwrap();
        assert_eq!(out.weights, out.init_weights);
        let blurred = robust_start(img, &fit, cfg.seed).unwrap();
        assert_eq!(out.weights, blurred);
        assert_eq!(out.image.height(), h.image_resolution());
    }

    #[test]
    fn zero_step_style_reproduces_content_fit() {
        let h = EncoderHandle::toy();
        let (mut cfg, fit) = tiny();
        cfg.steps = 0;
        let f = fixtures_at(16);
        let out = style_transfer(&f[0].image, &f[1].image, &h, &cfg, &fit, 0.5).unwrap();
        assert_eq!(out.weights, style_start(&f[0].image, &fit, cfg.seed).unwrap());
    }

    #[test]
    fn degenerate_style_loss_is_one_and_a_half_single_target() {
        let h = EncoderHandle::toy();
        let (cfg, fit) = tiny();
        let img = &fixtures_at(16)[2].image;
        let both = style_transfer(img, img, &h, &cfg, &fit, 0.5).unwrap();
        let row = &both.trace.rows[0];
        assert!((row.total - 1.5 * row.alignment).abs() < 1e-12);
        assert_eq!(row.alignment, row.blend);
    }

    #[test]
    fn tasks_are_deterministic() {
        let h = EncoderHandle::toy();
        let (cfg, fit) = tiny();
        let img = &fixtures_at(16)[3].image;
        let a = edit(img, "a blue square", &h, None, &cfg, &fit, 0.0).unwrap();
        let b = edit(img, "a blue square", &h, None, &cfg, &fit, 0.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn run_task_rejects_missing_inputs() {
        let h = EncoderHandle::toy();
        let (cfg, fit) = tiny();
        let r = TaskRequest::new(TaskKind::Reconstruct, cfg, fit);
        assert!(matches!(run_task(&r, &h, None), Err(Error::InvalidArgument(_))));
    }
}
