use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, RowMap, Tensor, Var};
use crate::error::{Error, Result};
use crate::imaging::warp::affine_map;
use crate::imaging::Image;
use crate::seed::mix_seed;

/// Randomized color shift, scaling and shearing.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentationConfig {
    /// Number of variations averaged per step.
    pub count: usize,
    /// Additive per-channel shift drawn from `[-color_shift, color_shift]`.
    pub color_shift: f64,
    /// Isotropic scale drawn from this interval.
    pub scale_range: (f64, f64),
    /// Horizontal shear drawn from `[-shear, shear]`.
    pub shear: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            count: 32,
            color_shift: 0.1,
            scale_range: (0.8, 1.2),
            shear: 0.15,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// No-op augmentation: every variation equals the input.
    pub fn identity(count: usize) -> Self {
        Self {
            count,
            color_shift: 0.0,
            scale_range: (1.0, 1.0),
            shear: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidArgument("augmentation count must be >= 1".into()));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::InvalidArgument(format!("invalid scale interval [{lo}, {hi}]")));
        }
        if self.color_shift < 0.0 || self.shear < 0.0 {
            return Err(Error::InvalidArgument("augmentation ranges must be non-negative".into()));
        }
        Ok(())
    }

    /// Same ranges, different stream.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Parameters drawn for one augmentation index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub color_shift: [f64; 3],
    pub scale: f64,
    pub shear: f64,
}

impl AugmentParams {
    pub fn sample(cfg: &AugmentationConfig, index: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, index as u64));
        let mut symmetric = |r: f64| r * (2.0 * rng.random::<f64>() - 1.0);
        let color_shift = [
            symmetric(cfg.color_shift),
            symmetric(cfg.color_shift),
            symmetric(cfg.color_shift),
        ];
        let shear = symmetric(cfg.shear);
        let (lo, hi) = cfg.scale_range;
        let scale = lo + (hi - lo) * rng.random::<f64>();
        Self {
            color_shift,
            scale,
            shear,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.scale == 1.0 && self.shear == 0.0 && self.color_shift == [0.0; 3]
    }

    pub fn warp(&self, height: usize, width: usize) -> Arc<RowMap> {
        Arc::new(affine_map(height, width, self.scale, self.shear))
    }

    /// Records the augmentation of a `(h·w)×3` node.
    pub fn on_graph(&self, g: &mut Graph, img: Var, height: usize, width: usize) -> Result<Var> {
        if self.is_identity() {
            return Ok(img);
        }
        let warped = g.row_map(img, self.warp(height, width))?;
        let shift = g.constant(Tensor::row_vector(self.color_shift.to_vec()));
        g.add_row(warped, shift)
    }
}

/// Deterministic augmentation `index` of `img` under `cfg`.
pub fn augment(img: &Image, cfg: &AugmentationConfig, index: usize) -> Result<Image> {
    cfg.validate()?;
    if index >= cfg.count {
        return Err(Error::InvalidArgument(format!(
            "augmentation index {index} out of range 0..{}",
            cfg.count
        )));
    }
    let params = AugmentParams::sample(cfg, index);
    let mut g = Graph::new();
    let x = g.constant(img.to_tensor());
    let y = params.on_graph(&mut g, x, img.height(), img.width())?;
    Image::from_tensor(img.height(), img.width(), g.value(y).clone())
}
