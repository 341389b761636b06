//! Structural similarity with an 11×11 Gaussian window (σ = 1.5) over valid
//! window positions, averaged over windows and channels.

use std::sync::Arc;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::imaging::filter::{gaussian_kernel, SeparableFilter};
use crate::imaging::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Precomputed SSIM window for one image size.
#[derive(Clone, Debug)]
pub struct Ssim {
    height: usize,
    width: usize,
    filter: Arc<SeparableFilter>,
}

impl Ssim {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height < SSIM_WINDOW || width < SSIM_WINDOW {
            return Err(Error::InvalidArgument(format!(
                "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {height}x{width}"
            )));
        }
        let kernel = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
        Ok(Self {
            height,
            width,
            filter: Arc::new(SeparableFilter::valid(height, width, &kernel)),
        })
    }

    fn filter(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.row_map(x, self.filter.horizontal.clone())?;
        g.row_map(h, self.filter.vertical.clone())
    }

    /// Records SSIM between two `(h·w)×3` nodes and returns the scalar node.
    pub fn on_graph(&self, g: &mut Graph, a: Var, b: Var) -> Result<Var> {
        let expected = (self.height * self.width, 3);
        if g.shape(a) != expected || g.shape(b) != expected {
            return Err(Error::shape(
                "ssim",
                format!("inputs {:?}/{:?}, window built for {expected:?}", g.shape(a), g.shape(b)),
            ));
        }
        let mu_a = self.filter(g, a)?;
        let mu_b = self.filter(g, b)?;
        let aa = g.square(a);
        let bb = g.square(b);
        let ab = g.mul(a, b)?;
        let e_aa = self.filter(g, aa)?;
        let e_bb = self.filter(g, bb)?;
        let e_ab = self.filter(g, ab)?;

        let mu_a2 = g.square(mu_a);
        let mu_b2 = g.square(mu_b);
        let mu_ab = g.mul(mu_a, mu_b)?;
        let var_a = g.sub(e_aa, mu_a2)?;
        let var_b = g.sub(e_bb, mu_b2)?;
        let cov = g.sub(e_ab, mu_ab)?;

        let l_num = g.scale(mu_ab, 2.0);
        let l_num = g.add_scalar(l_num, SSIM_C1);
        let c_num = g.scale(cov, 2.0);
        let c_num = g.add_scalar(c_num, SSIM_C2);
        let l_den = g.add(mu_a2, mu_b2)?;
        let l_den = g.add_scalar(l_den, SSIM_C1);
        let c_den = g.add(var_a, var_b)?;
        let c_den = g.add_scalar(c_den, SSIM_C2);

        let num = g.mul(l_num, c_num)?;
        let den = g.mul(l_den, c_den)?;
        let map = g.div(num, den)?;
        Ok(g.mean(map))
    }

    pub fn value(&self, a: &Image, b: &Image) -> Result<f64> {
        if a.height() != self.height || a.width() != self.width || !a.same_shape(b) {
            return Err(Error::shape("ssim", "image shapes differ"));
        }
        let mut g = Graph::new();
        let va = g.constant(a.to_tensor());
        let vb = g.constant(b.to_tensor());
        let s = self.on_graph(&mut g, va, vb)?;
        Ok(g.scalar(s))
    }
}

/// SSIM between two equally sized images.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::shape(
            "ssim",
            format!("{}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width()),
        ));
    }
    Ssim::new(a.height(), a.width())?.value(a, b)
}
