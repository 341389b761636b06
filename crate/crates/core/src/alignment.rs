//! Orthogonal Procrustes alignment between text and image embeddings.

use nalgebra::{DMatrix, DVector};

use crate::dataset::{nearest_by_text, DatasetStore};
use crate::encoder::Embedding;
use crate::error::{Error, Result};

/// Column-paired text and image embeddings, each `d × k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedEmbeddings {
    text: DMatrix<f64>,
    image: DMatrix<f64>,
}

impl PairedEmbeddings {
    pub fn new(text: DMatrix<f64>, image: DMatrix<f64>) -> Result<Self> {
        if text.shape() != image.shape() {
            return Err(Error::shape(
                "paired embeddings",
                format!("text {:?} vs image {:?}", text.shape(), image.shape()),
            ));
        }
        if text.ncols() == 0 || text.nrows() == 0 {
            return Err(Error::InvalidArgument("paired embeddings need d >= 1 and k >= 1".into()));
        }
        if text.iter().chain(image.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("paired embeddings contain non-finite values".into()));
        }
        for m in [&text, &image] {
            for c in m.column_iter() {
                if (c.norm() - 1.0).abs() > 1e-6 {
                    return Err(Error::InvalidArgument(format!("column norm {} is not 1", c.norm())));
                }
            }
        }
        Ok(Self { text, image })
    }

    pub fn from_embeddings(text: &[Embedding], image: &[Embedding]) -> Result<Self> {
        let to_matrix = |es: &[Embedding]| -> Result<DMatrix<f64>> {
            let d = es.first().map_or(0, Embedding::dim);
            if es.iter().any(|e| e.dim() != d) {
                return Err(Error::shape("paired embeddings", "embeddings differ in dimension"));
            }
            Ok(DMatrix::from_iterator(d, es.len(), es.iter().flat_map(|e| e.values().iter().copied())))
        };
        Self::new(to_matrix(text)?, to_matrix(image)?)
    }

    pub fn text(&self) -> &DMatrix<f64> {
        &self.text
    }

    pub fn image(&self) -> &DMatrix<f64> {
        &self.image
    }

    pub fn len(&self) -> usize {
        self.text.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `‖R·E_T − E_I‖_F`.
    pub fn residual(&self, r: &DMatrix<f64>) -> f64 {
        (r * &self.text - &self.image).norm()
    }
}

/// Orthogonal `d × d` map.
#[derive(Clone, Debug, PartialEq)]
pub struct OrthogonalMap {
    r: DMatrix<f64>,
}

impl OrthogonalMap {
    pub fn identity(d: usize) -> Self {
        Self { r: DMatrix::identity(d, d) }
    }

    /// Accepts `r` when `‖RᵀR − I‖_F < 1e-8`.
    pub fn new(r: DMatrix<f64>) -> Result<Self> {
        if !r.is_square() {
            return Err(Error::shape("orthogonal map", format!("{:?} is not square", r.shape())));
        }
        let err = orthogonality_error(&r);
        if !(err < 1e-8) {
            return Err(Error::InvalidArgument(format!("matrix is not orthogonal (error {err:.3e})")));
        }
        Ok(Self { r })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn dim(&self) -> usize {
        self.r.nrows()
    }

    pub fn transpose(&self) -> Self {
        Self { r: self.r.transpose() }
    }
}

/// `‖RᵀR − I‖_F`.
pub fn orthogonality_error(r: &DMatrix<f64>) -> f64 {
    (r.transpose() * r - DMatrix::identity(r.ncols(), r.ncols())).norm()
}

/// `R = U Vᵀ` from the SVD `U Σ Vᵀ = E_I E_Tᵀ`; minimizes `‖R E_T − E_I‖_F`
/// over the full orthogonal group (reflections allowed).
pub fn solve_procrustes(pairs: &PairedEmbeddings) -> Result<OrthogonalMap> {
    let m = &pairs.image * pairs.text.transpose();
    let svd = m.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::InvalidArgument("SVD did not converge".into())),
    };
    let r = u * v_t;
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("Procrustes solution is not finite".into()));
    }
    Ok(OrthogonalMap { r })
}

/// `e_t2i = R e_t`.
pub fn project_text(e_t: &Embedding, map: &OrthogonalMap) -> Result<Embedding> {
    if e_t.dim() != map.dim() {
        return Err(Error::shape(
            "project_text",
            format!("embedding dim {} vs map dim {}", e_t.dim(), map.dim()),
        ));
    }
    let v = &map.r * DVector::from_column_slice(e_t.values());
    Embedding::from_unit(v.as_slice().to_vec())
}

/// Text/image pairs of the `p` entries whose captions are nearest to `e_t`,
/// ordered by similarity with ties broken by ascending id.
pub fn build_local_pairs(e_t: &Embedding, store: &DatasetStore, p: usize) -> Result<PairedEmbeddings> {
    if p == 0 {
        return Err(Error::InvalidArgument("p must be >= 1".into()));
    }
    let idx = nearest_by_text(e_t, store, p)?;
    let entries = store.entries();
    let text: Vec<Embedding> = idx.iter().map(|&i| entries[i].text_embedding.clone()).collect();
    let image: Vec<Embedding> = idx.iter().map(|&i| entries[i].image_embedding.clone()).collect();
    PairedEmbeddings::from_embeddings(&text, &image)
}
