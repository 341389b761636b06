//! Image tower of a CLIP-style vision transformer loaded from a container.
//!
//! Tensor names follow the common `visual.*` checkpoint naming: `conv1`,
//! `class_embedding`, `positional_embedding`, `ln_pre`,
//! `transformer.resblocks.{i}.{ln_1, attn, ln_2, mlp}`, `ln_post`, `proj`.
//! Blocks are pre-norm with QuickGELU MLPs; the class token is projected.

use std::sync::Arc;

use crate::autodiff::{Graph, Tensor, Var};
use crate::encoder::container::TensorContainer;
use crate::encoder::manifest::EncoderManifest;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
struct Norm {
    gamma: Arc<Tensor>,
    beta: Arc<Tensor>,
}

#[derive(Clone, Debug)]
struct Block {
    ln_1: Norm,
    in_proj_weight: Arc<Tensor>,
    in_proj_bias: Arc<Tensor>,
    out_proj_weight: Arc<Tensor>,
    out_proj_bias: Arc<Tensor>,
    ln_2: Norm,
    fc_weight: Arc<Tensor>,
    fc_bias: Arc<Tensor>,
    proj_weight: Arc<Tensor>,
    proj_bias: Arc<Tensor>,
}

#[derive(Clone, Debug)]
pub struct VitEncoder {
    resolution: usize,
    patch: usize,
    width: usize,
    heads: usize,
    embed_dim: usize,
    mean: Option<Arc<Tensor>>,
    inv_std: Option<Arc<Tensor>>,
    conv: Arc<Tensor>,
    class_embedding: Arc<Tensor>,
    positional: Arc<Tensor>,
    ln_pre: Norm,
    blocks: Vec<Block>,
    ln_post: Norm,
    /// `embed_dim × width`, the transpose of the stored projection.
    proj_t: Arc<Tensor>,
    patch_index: Arc<Vec<usize>>,
    class_index: Arc<Vec<usize>>,
}

/// Flat `(h·w)×3` positions of each patch in `(channel, row, col)` order.
fn conv_patch_index(resolution: usize, patch: usize) -> Vec<usize> {
    let per_side = resolution / patch;
    let mut out = Vec::with_capacity(resolution * resolution * 3);
    for py in 0..per_side {
        for px in 0..per_side {
            for c in 0..3 {
                for ky in 0..patch {
                    for kx in 0..patch {
                        let pixel = (py * patch + ky) * resolution + px * patch + kx;
                        out.push(pixel * 3 + c);
                    }
                }
            }
        }
    }
    out
}

fn shared(c: &TensorContainer, name: &str, shape: &[usize]) -> Result<Arc<Tensor>> {
    Ok(Arc::new(c.expect(name, shape)?.to_matrix()))
}

fn norm(c: &TensorContainer, prefix: &str, width: usize) -> Result<Norm> {
    Ok(Norm {
        gamma: shared(c, &format!("{prefix}.weight"), &[width])?,
        beta: shared(c, &format!("{prefix}.bias"), &[width])?,
    })
}

impl VitEncoder {
    pub fn from_container(c: &TensorContainer, m: &EncoderManifest) -> Result<Self> {
        let (res, patch) = (m.image_resolution, m.patch_size);
        if patch == 0 || res % patch != 0 || m.heads == 0 || m.depth == 0 {
            return Err(Error::format(
                "encoder manifest",
                format!("unsupported geometry: resolution {res}, patch {patch}, depth {}, heads {}", m.depth, m.heads),
            ));
        }
        let conv = c.get("visual.conv1.weight")?;
        let width = conv.shape.first().copied().unwrap_or(0);
        if width == 0 || width % m.heads != 0 {
            return Err(Error::format("encoder manifest", format!("width {width} not divisible by {} heads", m.heads)));
        }
        let conv = c.expect("visual.conv1.weight", &[width, 3, patch, patch])?;
        let conv = Arc::new(Tensor::new(width, 3 * patch * patch, conv.data.iter().map(|&v| v as f64).collect())?);
        let tokens = (res / patch) * (res / patch) + 1;
        let mut blocks = Vec::with_capacity(m.depth);
        for i in 0..m.depth {
            let p = format!("visual.transformer.resblocks.{i}");
            blocks.push(Block {
                ln_1: norm(c, &format!("{p}.ln_1"), width)?,
                in_proj_weight: shared(c, &format!("{p}.attn.in_proj_weight"), &[3 * width, width])?,
                in_proj_bias: shared(c, &format!("{p}.attn.in_proj_bias"), &[3 * width])?,
                out_proj_weight: shared(c, &format!("{p}.attn.out_proj.weight"), &[width, width])?,
                out_proj_bias: shared(c, &format!("{p}.attn.out_proj.bias"), &[width])?,
                ln_2: norm(c, &format!("{p}.ln_2"), width)?,
                fc_weight: shared(c, &format!("{p}.mlp.c_fc.weight"), &[4 * width, width])?,
                fc_bias: shared(c, &format!("{p}.mlp.c_fc.bias"), &[4 * width])?,
                proj_weight: shared(c, &format!("{p}.mlp.c_proj.weight"), &[width, 4 * width])?,
                proj_bias: shared(c, &format!("{p}.mlp.c_proj.bias"), &[width])?,
            });
        }
        let proj = c.expect("visual.proj", &[width, m.embed_dim])?.to_matrix();
        let inv_std = m
            .image_std
            .map(|s| {
                if s.iter().any(|v| !(*v > 0.0)) {
                    return Err(Error::format("encoder manifest", "image_std must be positive"));
                }
                Ok(Arc::new(Tensor::row_vector(s.iter().map(|v| 1.0 / v).collect())))
            })
            .transpose()?;
        Ok(Self {
            resolution: res,
            patch,
            width,
            heads: m.heads,
            embed_dim: m.embed_dim,
            mean: m.image_mean.map(|v| Arc::new(Tensor::row_vector(v.iter().map(|x| -x).collect()))),
            inv_std,
            conv,
            class_embedding: shared(c, "visual.class_embedding", &[width])?,
            positional: shared(c, "visual.positional_embedding", &[tokens, width])?,
            ln_pre: norm(c, "visual.ln_pre", width)?,
            blocks,
            ln_post: norm(c, "visual.ln_post", width)?,
            proj_t: Arc::new(proj.transpose()),
            patch_index: Arc::new(conv_patch_index(res, patch)),
            class_index: Arc::new((0..width).collect()),
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn layer_norm(&self, g: &mut Graph, x: Var, n: &Norm) -> Result<Var> {
        let gamma = g.constant_shared(n.gamma.clone());
        let beta = g.constant_shared(n.beta.clone());
        g.layer_norm(x, gamma, beta, LN_EPS)
    }

    fn attention(&self, g: &mut Graph, x: Var, b: &Block) -> Result<Var> {
        let w = self.width;
        let dh = w / self.heads;
        let in_w = g.constant_shared(b.in_proj_weight.clone());
        let in_b = g.constant_shared(b.in_proj_bias.clone());
        let qkv = g.linear(x, in_w, Some(in_b))?;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = g.slice_cols(qkv, h * dh, dh)?;
            let k = g.slice_cols(qkv, w + h * dh, dh)?;
            let v = g.slice_cols(qkv, 2 * w + h * dh, dh)?;
            let scores = g.matmul_nt(q, k)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = g.softmax_rows(scores);
            heads.push(g.matmul(attn, v)?);
        }
        let merged = g.concat_cols(&heads)?;
        let out_w = g.constant_shared(b.out_proj_weight.clone());
        let out_b = g.constant_shared(b.out_proj_bias.clone());
        g.linear(merged, out_w, Some(out_b))
    }

    fn mlp(&self, g: &mut Graph, x: Var, b: &Block) -> Result<Var> {
        let fc_w = g.constant_shared(b.fc_weight.clone());
        let fc_b = g.constant_shared(b.fc_bias.clone());
        let hidden = g.linear(x, fc_w, Some(fc_b))?;
        let act = g.quick_gelu(hidden);
        let pw = g.constant_shared(b.proj_weight.clone());
        let pb = g.constant_shared(b.proj_bias.clone());
        g.linear(act, pw, Some(pb))
    }

    /// Unit embedding `(1×d)` of an image node at encoder resolution.
    pub(crate) fn image_on_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut x = x;
        if let Some(m) = &self.mean {
            let m = g.constant_shared(m.clone());
            x = g.add_row(x, m)?;
        }
        if let Some(s) = &self.inv_std {
            let s = g.constant_shared(s.clone());
            x = g.mul_row(x, s)?;
        }
        let per_side = self.resolution / self.patch;
        let patches = g.gather(x, self.patch_index.clone(), per_side * per_side, 3 * self.patch * self.patch)?;
        let conv = g.constant_shared(self.conv.clone());
        let tokens = g.linear(patches, conv, None)?;
        let cls = g.constant_shared(self.class_embedding.clone());
        let seq = g.concat_rows(&[cls, tokens])?;
        let pos = g.constant_shared(self.positional.clone());
        let seq = g.add(seq, pos)?;
        let mut h = self.layer_norm(g, seq, &self.ln_pre)?;
        for b in &self.blocks {
            let n1 = self.layer_norm(g, h, &b.ln_1)?;
            let a = self.attention(g, n1, b)?;
            h = g.add(h, a)?;
            let n2 = self.layer_norm(g, h, &b.ln_2)?;
            let f = self.mlp(g, n2, b)?;
            h = g.add(h, f)?;
        }
        let cls = g.gather(h, self.class_index.clone(), 1, self.width)?;
        let cls = self.layer_norm(g, cls, &self.ln_post)?;
        let proj = g.constant_shared(self.proj_t.clone());
        let e = g.linear(cls, proj, None)?;
        Ok(g.normalize_rows(e))
    }
}
