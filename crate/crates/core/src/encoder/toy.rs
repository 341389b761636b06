//! Built-in deterministic encoder.
//!
//! Image tower: `8×8` patches of the centered image, a fixed random linear map
//! with phase offsets, `sin`, mean over patches, a linear map to `d`, normalize.
//! Text tower: lowercase character trigrams hashed into 2048 buckets, a linear
//! map to `d`, normalize.
//!
//! The text map is a seeded random matrix corrected by a least-squares term so
//! that every fixture caption lands exactly on a rotated and shifted copy of
//! its fixture image's embedding. The rotation and shift play the role of the
//! gap between the two towers.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Tensor, Var};
use crate::encoder::container::TensorContainer;
use crate::error::{Error, Result};
use crate::fixtures::fixtures;
use crate::imaging::Image;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyConfig {
    pub seed: u64,
    pub embed_dim: usize,
    pub hidden: usize,
    pub resolution: usize,
    pub patch: usize,
    pub buckets: usize,
    /// Standard deviation of the patch map entries.
    pub patch_scale: f64,
    /// Standard deviation of the random part of the text map.
    pub text_scale: f64,
    /// Size of the skew generator of the text-side rotation.
    pub gap_rotation: f64,
    /// Norm of the constant text-side shift.
    pub gap_offset: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0x70E,
            embed_dim: 64,
            hidden: 128,
            resolution: 64,
            patch: 8,
            buckets: 2048,
            patch_scale: 0.24,
            text_scale: 0.05,
            gap_rotation: 0.05,
            gap_offset: 0.35,
        }
    }
}

pub(crate) const PATCH_WEIGHT: &str = "toy.patch.weight";
pub(crate) const PATCH_BIAS: &str = "toy.patch.bias";
pub(crate) const PROJ_WEIGHT: &str = "toy.proj.weight";
pub(crate) const PROJ_BIAS: &str = "toy.proj.bias";
pub(crate) const TEXT_WEIGHT: &str = "toy.text.weight";

#[derive(Clone, Debug)]
pub struct ToyEncoder {
    resolution: usize,
    patch: usize,
    patch_weight: Arc<Tensor>,
    patch_bias: Arc<Tensor>,
    proj_weight: Arc<Tensor>,
    proj_bias: Arc<Tensor>,
    text_weight: Arc<Tensor>,
    patch_index: Arc<Vec<usize>>,
}

fn round_f32(t: Tensor) -> Tensor {
    let (r, c) = t.shape();
    Tensor::new(r, c, t.data().iter().map(|&v| v as f32 as f64).collect()).expect("shape")
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sd: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    round_f32(Tensor::new(rows, cols, data).expect("shape"))
}

/// Flat `(h·w)×3` positions of each patch, row-major within the patch, channels last.
fn patch_index(resolution: usize, patch: usize) -> Vec<usize> {
    let per_side = resolution / patch;
    let mut out = Vec::with_capacity(resolution * resolution * 3);
    for py in 0..per_side {
        for px in 0..per_side {
            for ky in 0..patch {
                for kx in 0..patch {
                    let pixel = (py * patch + ky) * resolution + px * patch + kx;
                    out.extend((0..3).map(|c| pixel * 3 + c));
                }
            }
        }
    }
    out
}

const FNV_OFFSET: u32 = 0x811C_9DC5;
const FNV_PRIME: u32 = 0x0100_0193;

fn fnv1a(bytes: &[u8]) -> u32 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u32).wrapping_mul(FNV_PRIME))
}

/// Bucketed counts of the lowercase character trigrams of `" " + text + " "`.
pub fn trigram_counts(text: &str, buckets: usize) -> Vec<f64> {
    let padded: Vec<char> = format!(" {} ", text.to_lowercase()).chars().collect();
    let mut counts = vec![0.0; buckets];
    for w in padded.windows(3) {
        let gram: String = w.iter().collect();
        counts[fnv1a(gram.as_bytes()) as usize % buckets] += 1.0;
    }
    counts
}

impl ToyEncoder {
    /// Deterministically generates the encoder described by `cfg`.
    pub fn build(cfg: &ToyConfig) -> Result<Self> {
        if cfg.patch == 0 || cfg.resolution % cfg.patch != 0 {
            return Err(Error::InvalidArgument(format!(
                "toy resolution {} is not a multiple of patch {}",
                cfg.resolution, cfg.patch
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let patch_dim = 3 * cfg.patch * cfg.patch;
        let patch_weight = gaussian(&mut rng, cfg.hidden, patch_dim, cfg.patch_scale);
        let phases = (0..cfg.hidden)
            .map(|_| rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))
            .collect();
        let patch_bias = round_f32(Tensor::row_vector(phases));
        let proj_weight = gaussian(&mut rng, cfg.embed_dim, cfg.hidden, 1.0 / (cfg.hidden as f64).sqrt());

        let mut enc = Self::from_parts(
            cfg.resolution,
            cfg.patch,
            patch_weight,
            patch_bias,
            proj_weight,
            Tensor::zeros(1, cfg.embed_dim),
            Tensor::zeros(cfg.embed_dim, cfg.buckets),
        )?;

        // center features on the fixture set
        let fixtures = fixtures();
        let mut mean = vec![0.0; cfg.hidden];
        for f in &fixtures {
            let h = enc.pooled_features(&f.image)?;
            mean.iter_mut().zip(&h).for_each(|(m, v)| *m += v / fixtures.len() as f64);
        }
        let w2 = &enc.proj_weight;
        let bias: Vec<f64> = (0..cfg.embed_dim)
            .map(|r| -w2.row(r).iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        enc.proj_bias = Arc::new(round_f32(Tensor::row_vector(bias)));

        // text-side targets: rotated and shifted image embeddings
        let d = cfg.embed_dim;
        let skew = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let skew = (&skew - skew.transpose()) * (cfg.gap_rotation / 2.0);
        let eye = DMatrix::<f64>::identity(d, d);
        let rotation = (&eye - &skew)
            .try_inverse()
            .ok_or_else(|| Error::InvalidArgument("degenerate toy rotation".into()))?
            * (&eye + &skew);
        let shift = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let shift = shift.normalize() * cfg.gap_offset;

        let k = fixtures.len();
        let mut targets = DMatrix::<f64>::zeros(d, k);
        let mut counts = DMatrix::<f64>::zeros(k, cfg.buckets);
        for (i, f) in fixtures.iter().enumerate() {
            let u = DVector::from_vec(enc.embed(&f.image)?);
            let t = (&rotation * u + &shift).normalize();
            targets.set_column(i, &t);
            for (j, c) in trigram_counts(&f.caption, cfg.buckets).into_iter().enumerate() {
                counts[(i, j)] = c;
            }
        }
        let random = gaussian(&mut rng, d, cfg.buckets, cfg.text_scale);
        let random = DMatrix::from_row_slice(d, cfg.buckets, random.data());
        let gram = &counts * counts.transpose();
        let gram_inv = gram
            .try_inverse()
            .ok_or_else(|| Error::InvalidArgument("fixture captions have dependent trigram counts".into()))?;
        let correction = (&targets - &random * counts.transpose()) * gram_inv * &counts;
        let text = random + correction;
        let data: Vec<f64> = (0..d).flat_map(|r| (0..cfg.buckets).map(move |c| (r, c))).map(|(r, c)| text[(r, c)]).collect();
        enc.text_weight = Arc::new(round_f32(Tensor::new(d, cfg.buckets, data)?));
        Ok(enc)
    }

    fn from_parts(
        resolution: usize,
        patch: usize,
        patch_weight: Tensor,
        patch_bias: Tensor,
        proj_weight: Tensor,
        proj_bias: Tensor,
        text_weight: Tensor,
    ) -> Result<Self> {
        let hidden = patch_weight.rows();
        let d = proj_weight.rows();
        let ok = patch_weight.cols() == 3 * patch * patch
            && patch_bias.shape() == (1, hidden)
            && proj_weight.cols() == hidden
            && proj_bias.shape() == (1, d)
            && text_weight.rows() == d;
        if !ok || patch == 0 || resolution % patch != 0 {
            return Err(Error::shape("toy_encoder", "inconsistent toy tensor shapes"));
        }
        Ok(Self {
            resolution,
            patch,
            patch_weight: Arc::new(patch_weight),
            patch_bias: Arc::new(patch_bias),
            proj_weight: Arc::new(proj_weight),
            proj_bias: Arc::new(proj_bias),
            text_weight: Arc::new(text_weight),
            patch_index: Arc::new(patch_index(resolution, patch)),
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn embed_dim(&self) -> usize {
        self.proj_weight.rows()
    }

    pub fn buckets(&self) -> usize {
        self.text_weight.cols()
    }

    pub fn to_container(&self) -> Result<TensorContainer> {
        let mut c = TensorContainer::new();
        c.insert_matrix(PATCH_WEIGHT, &self.patch_weight)?;
        c.insert_vector(PATCH_BIAS, self.patch_bias.data())?;
        c.insert_matrix(PROJ_WEIGHT, &self.proj_weight)?;
        c.insert_vector(PROJ_BIAS, self.proj_bias.data())?;
        c.insert_matrix(TEXT_WEIGHT, &self.text_weight)?;
        Ok(c)
    }

    pub fn from_container(c: &TensorContainer, resolution: usize, patch: usize, embed_dim: usize) -> Result<Self> {
        let pw = c.get(PATCH_WEIGHT)?;
        let hidden = pw.shape.first().copied().unwrap_or(0);
        let pw = c.expect(PATCH_WEIGHT, &[hidden, 3 * patch * patch])?;
        let pb = c.expect(PATCH_BIAS, &[hidden])?;
        let proj = c.expect(PROJ_WEIGHT, &[embed_dim, hidden])?;
        let proj_b = c.expect(PROJ_BIAS, &[embed_dim])?;
        let text = c.get(TEXT_WEIGHT)?;
        let buckets = text.shape.get(1).copied().unwrap_or(0);
        let text = c.expect(TEXT_WEIGHT, &[embed_dim, buckets])?;
        Self::from_parts(
            resolution,
            patch,
            pw.to_matrix(),
            pb.to_matrix(),
            proj.to_matrix(),
            proj_b.to_matrix(),
            text.to_matrix(),
        )
    }

    /// Mean patch features `(1×hidden)` of an image node already at encoder resolution.
    fn pooled_on_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let centered = g.add_scalar(x, -0.5);
        let per_side = self.resolution / self.patch;
        let patches = g.gather(
            centered,
            self.patch_index.clone(),
            per_side * per_side,
            3 * self.patch * self.patch,
        )?;
        let w = g.constant_shared(self.patch_weight.clone());
        let b = g.constant_shared(self.patch_bias.clone());
        let pre = g.linear(patches, w, Some(b))?;
        let act = g.sin(pre);
        Ok(g.mean_rows(act))
    }

    /// Unit embedding `(1×d)` of an image node at encoder resolution.
    pub(crate) fn image_on_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let pooled = self.pooled_on_graph(g, x)?;
        let w = g.constant_shared(self.proj_weight.clone());
        let b = g.constant_shared(self.proj_bias.clone());
        let e = g.linear(pooled, w, Some(b))?;
        Ok(g.normalize_rows(e))
    }

    fn at_resolution(&self, img: &Image) -> Result<Tensor> {
        if img.height() == self.resolution && img.width() == self.resolution {
            return Ok(img.to_tensor());
        }
        let map = crate::imaging::warp::resize_map(img.height(), img.width(), self.resolution, self.resolution);
        map.apply(&img.to_tensor())
    }

    fn pooled_features(&self, img: &Image) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.constant(self.at_resolution(img)?);
        let p = self.pooled_on_graph(&mut g, x)?;
        Ok(g.value(p).data().to_vec())
    }

    fn embed(&self, img: &Image) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.constant(self.at_resolution(img)?);
        let e = self.image_on_graph(&mut g, x)?;
        g.check_finite()?;
        Ok(g.value(e).data().to_vec())
    }

    /// Unnormalized text projection.
    pub(crate) fn text_raw(&self, text: &str) -> Vec<f64> {
        let counts = trigram_counts(text, self.buckets());
        let w = &self.text_weight;
        (0..w.rows())
            .map(|r| w.row(r).iter().zip(&counts).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Spectral norms of the two image-side linear maps.
    pub fn image_operator_norms(&self) -> (f64, f64) {
        let norm = |t: &Tensor| {
            let m = DMatrix::from_row_slice(t.rows(), t.cols(), t.data());
            m.singular_values().max()
        };
        (norm(&self.patch_weight), norm(&self.proj_weight))
    }
}
