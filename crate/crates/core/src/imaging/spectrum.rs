use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::imaging::Image;

/// Radially binned power spectrum of the image luminance.
///
/// Band `b` holds `|F(u, v)|²` for all frequencies with `b ≤ √(u² + v²) < b + 1`,
/// frequencies measured in cycles per image. Band 0 is the DC term alone.
/// Bands cover the full square so they sum to the total spectral energy.
pub fn radial_power_spectrum(img: &Image) -> Result<Vec<f64>> {
    if img.height() != img.width() {
        return Err(Error::InvalidArgument(format!(
            "radial spectrum needs a square image, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    let n = img.height();
    let power = power_spectrum(&img.luminance(), n);
    let max_radius = (n / 2) as f64 * std::f64::consts::SQRT_2;
    let mut bands = vec![0.0; max_radius.floor() as usize + 1];
    for v in 0..n {
        for u in 0..n {
            let r = (signed_freq(u, n).powi(2) + signed_freq(v, n).powi(2)).sqrt();
            bands[r.floor() as usize] += power[v * n + u];
        }
    }
    Ok(bands)
}

/// `|DFT|²` of an `n×n` real field.
pub(crate) fn power_spectrum(values: &[f64], n: usize) -> Vec<f64> {
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut buf: Vec<Complex<f64>> = values.iter().map(|&v| Complex::new(v, 0.0)).collect();
    for row in buf.chunks_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for x in 0..n {
        for y in 0..n {
            col[y] = buf[y * n + x];
        }
        fft.process(&mut col);
        for y in 0..n {
            buf[y * n + x] = col[y];
        }
    }
    buf.iter().map(|c| c.norm_sqr()).collect()
}

fn signed_freq(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Fraction of non-DC energy in the top third of the bands.
pub fn high_band_fraction(bands: &[f64]) -> f64 {
    let ac: f64 = bands.iter().skip(1).sum();
    if ac == 0.0 {
        return 0.0;
    }
    let start = (2 * bands.len()).div_ceil(3);
    bands[start..].iter().sum::<f64>() / ac
}

/// Energy in the top third of the bands.
pub fn high_band_energy(bands: &[f64]) -> f64 {
    let start = (2 * bands.len()).div_ceil(3);
    bands[start..].iter().sum()
}

/// Fraction of all energy (DC included) in bands strictly below radius `n/4`.
pub fn low_band_fraction(bands: &[f64], n: usize) -> f64 {
    let total: f64 = bands.iter().sum();
    if total == 0.0 {
        return 1.0;
    }
    bands[..(n / 4).min(bands.len())].iter().sum::<f64>() / total
}

/// Energy-weighted mean band index over non-DC bands.
pub fn spectral_centroid(bands: &[f64]) -> f64 {
    let ac: f64 = bands.iter().skip(1).sum();
    if ac == 0.0 {
        return 0.0;
    }
    bands
        .iter()
        .enumerate()
        .skip(1)
        .map(|(b, e)| b as f64 * e)
        .sum::<f64>()
        / ac
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::imaging::gaussian_blur;

    #[test]
    fn constant_image_is_all_dc() {
        let bands = radial_power_spectrum(&Image::filled(32, 32, [0.3, 0.6, 0.2])).unwrap();
        assert!(bands[0] > 0.0);
        assert!(bands[1..].iter().all(|&e| e < 1e-18 * bands[0]));
    }

    #[test]
    fn bands_sum_to_parseval_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = Image::new(32, 32, (0..32 * 32 * 3).map(|_| rng.random()).collect()).unwrap();
        let bands = radial_power_spectrum(&img).unwrap();
        let lum = img.luminance();
        // Parseval: Σ|F|² = N² Σ|x|²
        let spatial: f64 = lum.iter().map(|v| v * v).sum::<f64>() * (32.0 * 32.0);
        let total: f64 = bands.iter().sum();
        assert!(((total - spatial) / spatial).abs() < 1e-6);
    }

    #[test]
    fn horizontal_sinusoid_lands_in_its_band() {
        let n = 64;
        for f in [3usize, 7, 20] {
            let img = Image::from_fn(n, n, |_, x| {
                let v = 0.5 + 0.4 * (2.0 * std::f64::consts::PI * f as f64 * x as f64 / n as f64).sin();
                [v, v, v]
            });
            let bands = radial_power_spectrum(&img).unwrap();
            let ac: f64 = bands[1..].iter().sum();
            assert!(bands[f] / ac >= 0.95, "f={f}: {}", bands[f] / ac);
        }
    }

    #[test]
    fn non_square_rejected() {
        assert!(radial_power_spectrum(&Image::filled(8, 9, [0.0; 3])).is_err());
    }

    #[test]
    fn blur_reduces_high_band_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..3 {
            let img = Image::new(64, 64, (0..64 * 64 * 3).map(|_| rng.random()).collect()).unwrap();
            let before = high_band_energy(&radial_power_spectrum(&img).unwrap());
            let blurred = gaussian_blur(&img, 101, 15.0).unwrap();
            let after = high_band_energy(&radial_power_spectrum(&blurred).unwrap());
            assert!(after < before);
        }
    }
}
