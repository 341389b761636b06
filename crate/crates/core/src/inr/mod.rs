//! FINER coordinate networks: `(y, x) ∈ [−1, 1]² → RGB`.
//!
//! A network with `hidden_layers` sine layers has `hidden_layers + 1` parameter
//! blocks; the last one is a plain affine output layer. Layer indices used by
//! the learning-rate schedule refer to these blocks in order.

mod io;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, LayerShape, ParamLayout, ParamVars, ParamVector, Tensor, Var};
use crate::error::{Error, Result};
use crate::imaging::Image;

pub use io::{decode_weights, encode_weights, load_weights, save_weights};

/// Architecture of a FINER network.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct INRSpec {
    pub in_features: usize,
    pub out_features: usize,
    /// Number of sine layers.
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub first_omega: f64,
    pub hidden_omega: f64,
}

impl Default for INRSpec {
    fn default() -> Self {
        Self {
            in_features: 2,
            out_features: 3,
            hidden_layers: 5,
            hidden_width: 256,
            first_omega: 25.0,
            hidden_omega: 25.0,
        }
    }
}

impl INRSpec {
    /// A default-frequency network of the given depth and width.
    pub fn with_size(hidden_layers: usize, hidden_width: usize) -> Self {
        Self {
            hidden_layers,
            hidden_width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_features == 0 || self.out_features == 0 || self.hidden_layers == 0 || self.hidden_width == 0 {
            return Err(Error::InvalidArgument(format!("INR sizes must be >= 1: {self:?}")));
        }
        if !(self.first_omega > 0.0 && self.hidden_omega > 0.0) {
            return Err(Error::InvalidArgument(format!("INR omegas must be > 0: {self:?}")));
        }
        Ok(())
    }

    /// Parameter blocks: sine layers then the output layer.
    pub fn num_layers(&self) -> usize {
        self.hidden_layers + 1
    }

    pub fn layout(&self) -> ParamLayout {
        let mut layers = Vec::with_capacity(self.num_layers());
        let mut fan_in = self.in_features;
        for _ in 0..self.hidden_layers {
            layers.push(LayerShape::new(self.hidden_width, fan_in, true));
            fan_in = self.hidden_width;
        }
        layers.push(LayerShape::new(self.out_features, fan_in, true));
        ParamLayout::new(layers)
    }

    /// Frequency factor of sine layer `l`.
    pub fn omega(&self, l: usize) -> f64 {
        if l == 0 {
            self.first_omega
        } else {
            self.hidden_omega
        }
    }
}

/// FINER parameters `φ` together with their architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct INRWeights {
    spec: INRSpec,
    params: ParamVector,
}

impl INRWeights {
    pub fn new(spec: INRSpec, params: ParamVector) -> Result<Self> {
        spec.validate()?;
        if **params.layout() != spec.layout() {
            return Err(Error::shape("inr_weights", "parameter layout does not match spec"));
        }
        if !params.is_finite() {
            return Err(Error::InvalidArgument("INR weights contain non-finite values".into()));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &INRSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn into_params(self) -> ParamVector {
        self.params
    }

    /// Replaces the parameters, keeping the spec.
    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        Self::new(self.spec, params)
    }

    /// Rounds every parameter to `f32`, the on-disk precision.
    pub fn round_to_f32(&mut self) {
        self.params.round_to_f32();
    }
}

/// Pixel-center coordinates normalized to `[−1, 1]` per axis, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateGrid {
    height: usize,
    width: usize,
    coords: Arc<Tensor>,
}

fn axis(n: usize, i: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

impl CoordinateGrid {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("coordinate grid must be nonempty".into()));
        }
        let mut data = Vec::with_capacity(height * width * 2);
        for y in 0..height {
            for x in 0..width {
                data.push(axis(height, y));
                data.push(axis(width, x));
            }
        }
        Ok(Self {
            height,
            width,
            coords: Arc::new(Tensor::new(height * width, 2, data)?),
        })
    }

    pub fn square(n: usize) -> Result<Self> {
        Self::new(n, n)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(h·w)×2` matrix of `(i, j)` coordinates.
    pub fn coords(&self) -> &Arc<Tensor> {
        &self.coords
    }
}

/// One FINER layer on a single activation vector: `sin(ω·(|u|+1)·u)`, `u = Wz + b`.
pub fn finer_layer(z: &[f64], w: &Tensor, b: &[f64], omega: f64) -> Result<Vec<f64>> {
    if w.cols() != z.len() || w.rows() != b.len() {
        return Err(Error::shape(
            "finer_layer",
            format!("W {}x{}, z {}, b {}", w.rows(), w.cols(), z.len(), b.len()),
        ));
    }
    Ok((0..w.rows())
        .map(|r| {
            let u = w.row(r).iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + b[r];
            (omega * (u.abs() + 1.0) * u).sin()
        })
        .collect())
}

/// Bias bounds `k_l = 0.1·l` for sine layers `l = 1..=hidden_layers`.
pub fn default_bias_bounds(hidden_layers: usize) -> Vec<f64> {
    (1..=hidden_layers).map(|l| DEFAULT_BIAS_STEP * l as f64).collect()
}

/// Per-layer increment of the default bias bound.
pub const DEFAULT_BIAS_STEP: f64 = 0.1;

/// [`init_finer_with_bounds`] with [`default_bias_bounds`].
pub fn init_finer(spec: &INRSpec, seed: u64) -> Result<INRWeights> {
    init_finer_with_bounds(spec, seed, &default_bias_bounds(spec.hidden_layers))
}

/// Seeded FINER initialization.
///
/// First-layer weights are uniform in `±1/in`, later weights in
/// `±√(6/fan_in)/ω`. Sine-layer `l` biases are uniform in `±bounds[l]`;
/// the output bias starts at zero.
pub fn init_finer_with_bounds(spec: &INRSpec, seed: u64, bounds: &[f64]) -> Result<INRWeights> {
    spec.validate()?;
    if bounds.len() != spec.hidden_layers {
        return Err(Error::InvalidArgument(format!(
            "{} bias bounds for {} sine layers",
            bounds.len(),
            spec.hidden_layers
        )));
    }
    if bounds.iter().any(|k| !(*k >= 0.0)) || bounds.windows(2).any(|p| p[1] < p[0]) {
        return Err(Error::InvalidArgument(format!(
            "bias bounds must be non-negative and nondecreasing: {bounds:?}"
        )));
    }
    let layout = Arc::new(spec.layout());
    let mut params = ParamVector::zeros(layout.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (l, shape) in layout.layers().iter().enumerate() {
        let limit = if l == 0 {
            1.0 / shape.cols as f64
        } else {
            (6.0 / shape.cols as f64).sqrt() / spec.hidden_omega
        };
        for v in &mut params.values_mut()[layout.weight_range(l)] {
            *v = rng.random_range(-limit..=limit);
        }
        let k = bounds.get(l).copied().unwrap_or(0.0);
        if let Some(range) = layout.bias_range(l) {
            for v in &mut params.values_mut()[range] {
                *v = if k > 0.0 { rng.random_range(-k..=k) } else { 0.0 };
            }
        }
    }
    INRWeights::new(*spec, params)
}

/// Records the network on `g` and returns the `(h·w)×out` output node.
pub fn render_on_graph(g: &mut Graph, spec: &INRSpec, vars: &ParamVars, grid: &CoordinateGrid) -> Result<Var> {
    if vars.weights.len() != spec.num_layers() {
        return Err(Error::shape("render", "parameter blocks do not match spec"));
    }
    let mut z = g.constant_shared(grid.coords().clone());
    for l in 0..spec.hidden_layers {
        let u = g.linear(z, vars.weights[l], vars.biases[l])?;
        z = g.finer(u, spec.omega(l));
    }
    let last = spec.hidden_layers;
    g.linear(z, vars.weights[last], vars.biases[last])
}

/// Renders the network on `grid`. Values are not clamped.
pub fn render(weights: &INRWeights, grid: &CoordinateGrid) -> Result<Image> {
    if weights.spec.out_features != 3 {
        return Err(Error::InvalidArgument("render needs 3 output features".into()));
    }
    let mut g = Graph::new();
    let vars = ParamVars::register(&mut g, &weights.params, false);
    let out = render_on_graph(&mut g, &weights.spec, &vars, grid)?;
    g.check_finite()?;
    Image::from_tensor(grid.height(), grid.width(), g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::autodiff::{evaluate_with_gradient, finite_difference_gradient, max_relative_error};

    fn small() -> INRSpec {
        INRSpec {
            hidden_layers: 3,
            hidden_width: 6,
            first_omega: 3.0,
            hidden_omega: 2.0,
            ..INRSpec::default()
        }
    }

    #[test]
    fn zero_input_gives_zero() {
        let w = Tensor::new(2, 3, vec![0.3, -0.1, 0.7, 0.2, 0.5, -0.4]).unwrap();
        assert_eq!(finer_layer(&[0.0; 3], &w, &[0.0; 2], 25.0).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn scalar_layer_values() {
        let w = Tensor::scalar(1.0);
        let pos = finer_layer(&[0.5], &w, &[0.0], 1.0).unwrap()[0];
        let neg = finer_layer(&[-0.5], &w, &[0.0], 1.0).unwrap()[0];
        assert!((pos - 0.75f64.sin()).abs() < 1e-15);
        assert!((pos - 0.681639).abs() < 1e-6);
        assert_eq!(neg, -pos);
    }

    #[test]
    fn layer_dimension_mismatch() {
        let w = Tensor::zeros(2, 3);
        assert!(finer_layer(&[0.0; 2], &w, &[0.0; 2], 1.0).is_err());
        assert!(finer_layer(&[0.0; 3], &w, &[0.0; 3], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn layer_matches_formula(
            seed in any::<u64>(),
            rows in 1usize..6,
            cols in 1usize..6,
            omega in 0.1f64..40.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z: Vec<f64> = (0..cols).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..rows).map(|_| rng.random_range(-2.0..2.0)).collect();
            let wd: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w = Tensor::new(rows, cols, wd.clone()).unwrap();
            let got = finer_layer(&z, &w, &b, omega).unwrap();
            for r in 0..rows {
                let mut pre = b[r];
                for c in 0..cols {
                    pre += wd[r * cols + c] * z[c];
                }
                let alpha = pre.abs() + 1.0;
                let want = (omega * alpha * pre).sin();
                prop_assert!((got[r] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grid_corners_and_order() {
        let grid = CoordinateGrid::new(3, 5).unwrap();
        let c = grid.coords();
        assert_eq!(c.shape(), (15, 2));
        assert_eq!(c.row(0), &[-1.0, -1.0]);
        assert_eq!(c.row(4), &[-1.0, 1.0]);
        assert_eq!(c.row(14), &[1.0, 1.0]);
        assert_eq!(c.row(7), &[0.0, 0.0]);
        assert!(CoordinateGrid::new(0, 4).is_err());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let spec = small();
        let a = init_finer(&spec, 5).unwrap();
        assert_eq!(a, init_finer(&spec, 5).unwrap());
        assert_ne!(a, init_finer(&spec, 6).unwrap());
        let layout = spec.layout();
        let p = a.params().values();
        assert!(p[layout.weight_range(0)].iter().all(|v| v.abs() <= 0.5));
        let hidden = (6.0f64 / 6.0).sqrt() / 2.0;
        assert!(p[layout.weight_range(2)].iter().all(|v| v.abs() <= hidden));
        for l in 0..3 {
            let range = layout.bias_range(l).unwrap();
            assert!(p[range].iter().all(|v| v.abs() <= DEFAULT_BIAS_STEP * (l + 1) as f64));
        }
        assert!(p[layout.bias_range(3).unwrap()].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_bounds_give_zero_biases() {
        let spec = small();
        let w = init_finer_with_bounds(&spec, 1, &[0.0; 3]).unwrap();
        let layout = spec.layout();
        for l in 0..spec.num_layers() {
            assert!(w.params().values()[layout.bias_range(l).unwrap()].iter().all(|&v| v == 0.0));
        }
        assert!(init_finer_with_bounds(&spec, 1, &[2.0, 1.0, 3.0]).is_err());
        assert!(init_finer_with_bounds(&spec, 1, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn fresh_init_is_mostly_low_frequency() {
        let w = init_finer(&INRSpec::default(), 0).unwrap();
        let img = render(&w, &CoordinateGrid::square(64).unwrap()).unwrap();
        let bands = crate::imaging::radial_power_spectrum(&img).unwrap();
        let low = crate::imaging::low_band_fraction(&bands, 64);
        assert!(low > 0.5, "{low}");
    }

    #[test]
    fn constant_network_renders_its_bias() {
        let spec = small();
        let layout = Arc::new(spec.layout());
        let mut params = ParamVector::zeros(layout.clone());
        params.values_mut()[layout.bias_range(3).unwrap()].copy_from_slice(&[0.2, 0.4, 0.6]);
        let img = render(&INRWeights::new(spec, params).unwrap(), &CoordinateGrid::new(4, 7).unwrap()).unwrap();
        for y in 0..4 {
            for x in 0..7 {
                assert_eq!([img.get(y, x, 0), img.get(y, x, 1), img.get(y, x, 2)], [0.2, 0.4, 0.6]);
            }
        }
    }

    #[test]
    fn render_is_bitwise_deterministic() {
        let w = init_finer(&small(), 3).unwrap();
        let grid = CoordinateGrid::square(9).unwrap();
        let (a, b) = (render(&w, &grid).unwrap(), render(&w, &grid).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn graph_render_matches_per_pixel_layers() {
        let spec = small();
        let w = init_finer(&spec, 11).unwrap();
        let grid = CoordinateGrid::new(5, 4).unwrap();
        let img = render(&w, &grid).unwrap();
        let blocks = w.params().to_blocks();
        for p in 0..grid.len() {
            let mut z = grid.coords().row(p).to_vec();
            for (l, (wt, b)) in blocks.iter().take(spec.hidden_layers).enumerate() {
                z = finer_layer(&z, wt, b.as_ref().unwrap().data(), spec.omega(l)).unwrap();
            }
            let (wt, b) = &blocks[spec.hidden_layers];
            for c in 0..3 {
                let v: f64 = wt.row(c).iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() + b.as_ref().unwrap().data()[c];
                assert!((img.get(p / 4, p % 4, c) - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn render_gradient_matches_finite_differences() {
        let spec = small();
        let grid = CoordinateGrid::square(6).unwrap();
        for seed in 0..3 {
            let w = init_finer_with_bounds(&spec, seed, &[0.5, 0.5, 1.0]).unwrap();
            let loss = |g: &mut Graph, v: &ParamVars| {
                let out = render_on_graph(g, &spec, v, &grid)?;
                let sq = g.square(out);
                Ok(g.mean(sq))
            };
            let analytic = evaluate_with_gradient(w.params(), loss).unwrap();
            let fd = finite_difference_gradient(w.params(), 1e-6, loss).unwrap();
            let err = max_relative_error(analytic.gradient.values(), fd.values(), 1e-6);
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn rejects_mismatched_layout() {
        let spec = small();
        let other = INRSpec {
            hidden_width: 7,
            ..spec
        };
        let params = ParamVector::zeros(Arc::new(other.layout()));
        assert!(INRWeights::new(spec, params).is_err());
    }
}
