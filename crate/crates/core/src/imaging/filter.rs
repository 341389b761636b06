//! Separable Gaussian filtering.
//!
//! Filters are built as [`RowMap`]s over the pixel rows of a `(h·w)×3`
//! tensor, so the same construction serves plain blurring and the
//! differentiable SSIM window.

use std::sync::Arc;

use crate::autodiff::RowMap;
use crate::error::{Error, Result};
use crate::imaging::Image;

/// Normalized 1-D Gaussian kernel of odd length `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Mirror an index into `0..n`, repeating the edge sample (half-sample symmetric).
///
/// With a symmetric kernel this padding preserves the image mean exactly.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - 1 - m) as usize
    } else {
        m as usize
    }
}

/// Horizontal and vertical passes with reflection padding (output size = input size).
pub(crate) fn reflect_filter_maps(height: usize, width: usize, kernel: &[f64]) -> (RowMap, RowMap) {
    let half = (kernel.len() / 2) as isize;
    let horizontal = (0..height * width).map(|p| {
        let (y, x) = (p / width, p % width);
        let mut taps: Vec<(usize, f64)> = Vec::with_capacity(kernel.len());
        for (k, &w) in kernel.iter().enumerate() {
            let sx = reflect_index(x as isize + k as isize - half, width);
            push_tap(&mut taps, y * width + sx, w);
        }
        taps
    });
    let horizontal = RowMap::from_taps(height * width, horizontal.collect::<Vec<_>>());
    let vertical = (0..height * width).map(|p| {
        let (y, x) = (p / width, p % width);
        let mut taps: Vec<(usize, f64)> = Vec::with_capacity(kernel.len());
        for (k, &w) in kernel.iter().enumerate() {
            let sy = reflect_index(y as isize + k as isize - half, height);
            push_tap(&mut taps, sy * width + x, w);
        }
        taps
    });
    let vertical = RowMap::from_taps(height * width, vertical.collect::<Vec<_>>());
    (horizontal, vertical)
}

fn push_tap(taps: &mut Vec<(usize, f64)>, index: usize, w: f64) {
    match taps.iter_mut().find(|(j, _)| *j == index) {
        Some((_, acc)) => *acc += w,
        None => taps.push((index, w)),
    }
}

/// Horizontal and vertical passes over valid windows only.
/// Output is `(h − k + 1) × (w − k + 1)`.
pub(crate) fn valid_filter_maps(height: usize, width: usize, kernel: &[f64]) -> (RowMap, RowMap) {
    let k = kernel.len();
    let ow = width + 1 - k;
    let oh = height + 1 - k;
    let horizontal: Vec<Vec<(usize, f64)>> = (0..height * ow)
        .map(|p| {
            let (y, x) = (p / ow, p % ow);
            kernel
                .iter()
                .enumerate()
                .map(|(i, &w)| (y * width + x + i, w))
                .collect()
        })
        .collect();
    let vertical: Vec<Vec<(usize, f64)>> = (0..oh * ow)
        .map(|p| {
            let (y, x) = (p / ow, p % ow);
            kernel
                .iter()
                .enumerate()
                .map(|(i, &w)| ((y + i) * ow + x, w))
                .collect()
        })
        .collect();
    (
        RowMap::from_taps(height * width, horizontal),
        RowMap::from_taps(height * ow, vertical),
    )
}

/// Separable Gaussian blur with reflection padding, applied per channel.
pub fn gaussian_blur(img: &Image, kernel_size: usize, sigma: f64) -> Result<Image> {
    if kernel_size == 0 || kernel_size % 2 == 0 {
        return Err(Error::InvalidArgument(format!("kernel size must be odd, got {kernel_size}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
    }
    let limit = 2 * img.height().min(img.width());
    if kernel_size > limit {
        return Err(Error::InvalidArgument(format!(
            "kernel size {kernel_size} exceeds twice the smaller image side ({limit})"
        )));
    }
    let kernel = gaussian_kernel(kernel_size, sigma);
    let (h, v) = reflect_filter_maps(img.height(), img.width(), &kernel);
    let out = v.apply(&h.apply(&img.to_tensor())?)?;
    Image::from_tensor(img.height(), img.width(), out)
}

/// Shared maps for a fixed-size separable filter.
#[derive(Clone, Debug)]
pub struct SeparableFilter {
    pub(crate) horizontal: Arc<RowMap>,
    pub(crate) vertical: Arc<RowMap>,
}

impl SeparableFilter {
    pub(crate) fn valid(height: usize, width: usize, kernel: &[f64]) -> Self {
        let (h, v) = valid_filter_maps(height, width, kernel);
        Self {
            horizontal: Arc::new(h),
            vertical: Arc::new(v),
        }
    }
}
