use std::sync::Arc;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Shape of one parameter block: a `rows×cols` weight matrix plus an optional bias of length `rows`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub rows: usize,
    pub cols: usize,
    pub has_bias: bool,
}

impl LayerShape {
    pub fn new(rows: usize, cols: usize, has_bias: bool) -> Self {
        Self {
            rows,
            cols,
            has_bias,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn len(&self) -> usize {
        self.weight_len() + if self.has_bias { self.rows } else { 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered layer descriptors mapping flat offsets to `(W_i, b_i)` blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    layers: Vec<LayerShape>,
    offsets: Vec<usize>,
}

impl ParamLayout {
    pub fn new(layers: Vec<LayerShape>) -> Self {
        let mut offsets = Vec::with_capacity(layers.len() + 1);
        let mut at = 0;
        offsets.push(0);
        for layer in &layers {
            at += layer.len();
            offsets.push(at);
        }
        Self { layers, offsets }
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn total_len(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    /// Flat range covering layer `i` (weights followed by bias).
    pub fn layer_range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn weight_range(&self, i: usize) -> std::ops::Range<usize> {
        let start = self.offsets[i];
        start..start + self.layers[i].weight_len()
    }

    pub fn bias_range(&self, i: usize) -> Option<std::ops::Range<usize>> {
        let layer = self.layers[i];
        layer.has_bias.then(|| {
            let start = self.offsets[i] + layer.weight_len();
            start..start + layer.rows
        })
    }
}

/// Flat parameter storage with an immutable layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    layout: Arc<ParamLayout>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let values = vec![0.0; layout.total_len()];
        Self { layout, values }
    }

    pub fn from_values(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::shape(
                "param_vector",
                format!("layout needs {} values, got {}", layout.total_len(), values.len()),
            ));
        }
        Ok(Self { layout, values })
    }

    /// Assembles a vector from per-layer `(weight, bias)` tensors.
    pub fn from_blocks(layout: Arc<ParamLayout>, blocks: &[(Tensor, Option<Tensor>)]) -> Result<Self> {
        if blocks.len() != layout.num_layers() {
            return Err(Error::shape(
                "param_vector",
                format!("{} blocks for {} layers", blocks.len(), layout.num_layers()),
            ));
        }
        let mut values = Vec::with_capacity(layout.total_len());
        for (shape, (w, b)) in layout.layers().iter().zip(blocks) {
            if w.shape() != (shape.rows, shape.cols) {
                return Err(Error::shape(
                    "param_vector",
                    format!("weight {:?} vs layout {}x{}", w.shape(), shape.rows, shape.cols),
                ));
            }
            values.extend_from_slice(w.data());
            match (shape.has_bias, b) {
                (true, Some(b)) if b.len() == shape.rows => values.extend_from_slice(b.data()),
                (false, None) => {}
                _ => return Err(Error::shape("param_vector", "bias does not match layout")),
            }
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn weight(&self, layer: usize) -> Tensor {
        let shape = self.layout.layers()[layer];
        let data = self.values[self.layout.weight_range(layer)].to_vec();
        Tensor::new(shape.rows, shape.cols, data).expect("layout consistent")
    }

    pub fn bias(&self, layer: usize) -> Option<Tensor> {
        self.layout
            .bias_range(layer)
            .map(|r| Tensor::row_vector(self.values[r].to_vec()))
    }

    /// Splits back into per-layer blocks; inverse of [`ParamVector::from_blocks`].
    pub fn to_blocks(&self) -> Vec<(Tensor, Option<Tensor>)> {
        (0..self.layout.num_layers())
            .map(|i| (self.weight(i), self.bias(i)))
            .collect()
    }

    pub fn layer_values(&self, layer: usize) -> &[f64] {
        &self.values[self.layout.layer_range(layer)]
    }

    pub fn layer_values_mut(&mut self, layer: usize) -> &mut [f64] {
        let range = self.layout.layer_range(layer);
        &mut self.values[range]
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn layer_norm(&self, layer: usize) -> f64 {
        self.layer_values(layer)
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_layout(&self, other: &ParamVector) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::shape("param_vector", "layouts differ"));
        }
        Ok(())
    }

    /// `self + other`, same layout required.
    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_layout(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        Ok(ParamVector {
            layout: self.layout.clone(),
            values,
        })
    }

    /// `self - other`, same layout required.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_layout(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(ParamVector {
            layout: self.layout.clone(),
            values,
        })
    }

    pub fn scaled(&self, factor: f64) -> ParamVector {
        ParamVector {
            layout: self.layout.clone(),
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    /// Rounds every value to the nearest `f32`, the precision used on disk.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            *v = *v as f32 as f64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layout() -> Arc<ParamLayout> {
        Arc::new(ParamLayout::new(vec![
            LayerShape::new(3, 2, true),
            LayerShape::new(2, 3, true),
            LayerShape::new(1, 2, false),
        ]))
    }

    #[test]
    fn total_length_is_sum_of_blocks() {
        let layout = layout();
        assert_eq!(layout.total_len(), 9 + 8 + 2);
        assert_eq!(layout.bias_range(0), Some(6..9));
        assert_eq!(layout.bias_range(2), None);
        assert_eq!(layout.layer_range(2), 17..19);
    }

    #[test]
    fn wrong_length_rejected() {
        assert!(ParamVector::from_values(layout(), vec![0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn blocks_round_trip(values in proptest::collection::vec(-10.0f64..10.0, 19)) {
            let p = ParamVector::from_values(layout(), values).unwrap();
            let back = ParamVector::from_blocks(layout(), &p.to_blocks()).unwrap();
            prop_assert_eq!(p, back);
        }
    }
}
