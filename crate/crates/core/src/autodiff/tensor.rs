use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`. Scalars are `1×1`, vectors are `1×n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    /// A `1×n` row vector.
    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Scalar value of a `1×1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Tensor {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Sparse linear map acting on tensor rows: `out[i, :] = Σ_j w_ij · in[j, :]`.
///
/// Bilinear warps, resizes and separable filters are all expressed this way so
/// their adjoint comes for free.
#[derive(Clone, Debug, PartialEq)]
pub struct RowMap {
    in_rows: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<f64>,
}

impl RowMap {
    /// Builds the map from one tap list per output row.
    pub fn from_taps(in_rows: usize, taps: impl IntoIterator<Item = Vec<(usize, f64)>>) -> Self {
        let mut offsets = vec![0];
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        for row in taps {
            for (j, w) in row {
                debug_assert!(j < in_rows);
                indices.push(j);
                weights.push(w);
            }
            offsets.push(indices.len());
        }
        Self {
            in_rows,
            offsets,
            indices,
            weights,
        }
    }

    pub fn in_rows(&self) -> usize {
        self.in_rows
    }

    pub fn out_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn taps(&self, row: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.offsets[row]..self.offsets[row + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.weights[span].iter().copied())
    }

    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        if input.rows() != self.in_rows {
            return Err(Error::shape(
                "row_map",
                format!("map expects {} rows, input has {}", self.in_rows, input.rows()),
            ));
        }
        let cols = input.cols();
        let mut out = Tensor::zeros(self.out_rows(), cols);
        for i in 0..self.out_rows() {
            let dst = &mut out.data[i * cols..(i + 1) * cols];
            for (j, w) in self.taps(i) {
                let src = &input.data[j * cols..(j + 1) * cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        Ok(out)
    }

    pub(crate) fn apply_transpose(&self, grad: &Tensor) -> Tensor {
        let cols = grad.cols();
        let mut out = Tensor::zeros(self.in_rows, cols);
        for i in 0..self.out_rows() {
            let src = &grad.data[i * cols..(i + 1) * cols];
            for (j, w) in self.taps(i) {
                let dst = &mut out.data[j * cols..(j + 1) * cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }

    /// Composition `self ∘ inner`: applying the result equals applying `inner` then `self`.
    pub fn compose(&self, inner: &RowMap) -> Result<RowMap> {
        if self.in_rows != inner.out_rows() {
            return Err(Error::shape(
                "row_map",
                format!("cannot compose {} -> {}", inner.out_rows(), self.in_rows),
            ));
        }
        let mut acc = vec![0.0; inner.in_rows];
        let mut seen = vec![false; inner.in_rows];
        let mut touched = Vec::new();
        let mut rows = Vec::with_capacity(self.out_rows());
        for i in 0..self.out_rows() {
            for (k, w) in self.taps(i) {
                for (j, v) in inner.taps(k) {
                    if !seen[j] {
                        seen[j] = true;
                        touched.push(j);
                    }
                    acc[j] += w * v;
                }
            }
            touched.sort_unstable();
            rows.push(touched.iter().map(|&j| (j, acc[j])).collect::<Vec<_>>());
            for &j in &touched {
                acc[j] = 0.0;
                seen[j] = false;
            }
            touched.clear();
        }
        Ok(RowMap::from_taps(inner.in_rows, rows))
    }
}

/// `c = a · b` (or with transposes expressed through strides), accumulating when `accumulate`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: strides describe matrices fully contained in the given slices, checked by
    // the callers' shape validation.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_is_checked() {
        assert!(Tensor::new(2, 3, vec![0.0; 5]).is_err());
        assert!(Tensor::new(2, 3, vec![0.0; 6]).is_ok());
    }

    #[test]
    fn row_map_adjoint() {
        let map = RowMap::from_taps(3, vec![vec![(0, 0.5), (2, 2.0)], vec![(1, -1.0)]]);
        let x = Tensor::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = Tensor::new(2, 2, vec![0.3, -0.7, 1.1, 0.2]).unwrap();
        let mx = map.apply(&x).unwrap();
        let mty = map.apply_transpose(&y);
        let lhs: f64 = mx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(mty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn compose_matches_sequential_application() {
        let inner = RowMap::from_taps(3, vec![vec![(0, 1.0), (1, 1.0)], vec![(2, 0.25)]]);
        let outer = RowMap::from_taps(2, vec![vec![(0, 2.0), (1, 4.0)], vec![(1, 1.0)]]);
        let x = Tensor::new(3, 1, vec![1.0, 2.0, 8.0]).unwrap();
        let seq = outer.apply(&inner.apply(&x).unwrap()).unwrap();
        let fused = outer.compose(&inner).unwrap().apply(&x).unwrap();
        assert_eq!(seq, fused);
    }

    #[test]
    fn gemm_transposed_strides() {
        // a: 2x3, b stored as 2x3 and used transposed -> 2x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, (3, 1), &b, (1, 3), &mut c, false);
        assert_eq!(c, [4.0, 2.0, 10.0, 5.0]);
    }
}
