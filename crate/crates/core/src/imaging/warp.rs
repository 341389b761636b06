//! Bilinear resampling expressed as sparse row maps over pixels.

use crate::autodiff::RowMap;

/// Reflect a continuous coordinate into `[0, n − 1]` about the edge pixel centers.
fn reflect_coord(v: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let last = (n - 1) as f64;
    let period = 2.0 * last;
    let mut m = v.rem_euclid(period);
    if m > last {
        m = period - m;
    }
    m
}

fn axis_taps(v: f64, n: usize) -> [(usize, f64); 2] {
    let v = reflect_coord(v, n);
    let i0 = v.floor();
    let frac = v - i0;
    let i0 = i0 as usize;
    if frac == 0.0 || i0 + 1 >= n {
        [(i0.min(n - 1), 1.0), (0, 0.0)]
    } else {
        [(i0, 1.0 - frac), (i0 + 1, frac)]
    }
}

/// Bilinear sample map: output pixel `(y, x)` reads source position `src(y, x) = (sy, sx)`.
pub(crate) fn sample_map(
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    src: impl Fn(usize, usize) -> (f64, f64),
) -> RowMap {
    let rows: Vec<Vec<(usize, f64)>> = (0..out_h * out_w)
        .map(|p| {
            let (y, x) = (p / out_w, p % out_w);
            let (sy, sx) = src(y, x);
            let ty = axis_taps(sy, in_h);
            let tx = axis_taps(sx, in_w);
            let mut taps = Vec::with_capacity(4);
            for &(iy, wy) in &ty {
                if wy == 0.0 {
                    continue;
                }
                for &(ix, wx) in &tx {
                    if wx == 0.0 {
                        continue;
                    }
                    taps.push((iy * in_w + ix, wy * wx));
                }
            }
            taps
        })
        .collect();
    RowMap::from_taps(in_h * in_w, rows)
}

/// Bilinear resize with half-pixel centers; the identity when sizes agree.
pub fn resize_map(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> RowMap {
    let sy = in_h as f64 / out_h as f64;
    let sx = in_w as f64 / out_w as f64;
    sample_map(in_h, in_w, out_h, out_w, |y, x| {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (in_h - 1) as f64);
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (in_w - 1) as f64);
        (fy, fx)
    })
}

/// Affine warp about the image center: isotropic `scale` and horizontal `shear`.
/// Out-of-range samples are reflected back into the image.
pub fn affine_map(h: usize, w: usize, scale: f64, shear: f64) -> RowMap {
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    sample_map(h, w, h, w, |y, x| {
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        (cy + dy / scale, cx + (dx + shear * dy) / scale)
    })
}
