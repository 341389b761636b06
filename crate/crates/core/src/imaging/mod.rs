//! Image-space utilities: blur, SSIM, differentiable augmentations,
//! radial power spectra and PNG I/O.

mod augment;
mod filter;
mod image;
mod png;
mod spectrum;
mod ssim;
pub mod warp;

pub use self::image::{Image, CHANNELS};
pub use augment::{augment, AugmentParams, AugmentationConfig};
pub use filter::{gaussian_blur, gaussian_kernel};
pub use png::{load_png, save_png};
pub use spectrum::{
    high_band_energy, high_band_fraction, low_band_fraction, radial_power_spectrum, spectral_centroid,
};
pub use ssim::{ssim, Ssim};

/// Kernel size used when blurring targets for robust fitting.
pub const BLUR_KERNEL: usize = 101;
/// Blur sigma used when a deterministic value is needed.
pub const BLUR_SIGMA_MID: f64 = 15.0;
/// Interval from which per-image blur sigmas are drawn.
pub const BLUR_SIGMA_RANGE: (f64, f64) = (10.0, 20.0);
