use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// RGB image with values nominally in `[0, 1]`, row-major, channels last.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::shape(
                "image",
                format!("{height}x{width}x3 needs {} values, got {}", height * width * CHANNELS, data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("image contains non-finite values".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self { height, width, data }
    }

    /// Reinterprets a `(h·w)×3` tensor as an image.
    pub fn from_tensor(height: usize, width: usize, t: Tensor) -> Result<Self> {
        if t.shape() != (height * width, CHANNELS) {
            return Err(Error::shape("image", format!("tensor {:?} for {height}x{width}", t.shape())));
        }
        Self::new(height, width, t.into_data())
    }

    /// `(h·w)×3` tensor view used by differentiable code.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.height * self.width, CHANNELS, self.data.clone()).expect("consistent")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * CHANNELS + c] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for px in self.data.chunks(CHANNELS) {
            for c in 0..CHANNELS {
                m[c] += px[c];
            }
        }
        m.map(|v| v / self.pixels() as f64)
    }

    /// Rec. 601 luma per pixel.
    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .chunks(CHANNELS)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    pub fn clamped(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn mse(&self, other: &Image) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::shape("mse", "image shapes differ"));
        }
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(s / self.data.len() as f64)
    }

    /// Bilinear resize with half-pixel centers; a copy when the size is unchanged.
    pub fn resized(&self, height: usize, width: usize) -> Result<Image> {
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("cannot resize to an empty image".into()));
        }
        let map = crate::imaging::warp::resize_map(self.height, self.width, height, width);
        Image::from_tensor(height, width, map.apply(&self.to_tensor())?)
    }

    /// Peak signal-to-noise ratio in dB for a peak value of 1.
    pub fn psnr(&self, other: &Image) -> Result<f64> {
        let mse = self.mse(other)?;
        Ok(-10.0 * mse.log10())
    }
}
