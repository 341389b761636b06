//! Frozen image/text encoders and the similarity measures built on them.

mod container;
mod manifest;
mod toy;
mod vit;

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, RowMap, Tensor, Var};
use crate::error::{Error, Result};
use crate::imaging::warp::resize_map;
use crate::imaging::{load_png, Image};

pub use container::{NamedTensor, TensorContainer};
pub use manifest::{Architecture, EncoderManifest};
pub use toy::{trigram_counts, ToyConfig, ToyEncoder};
pub use vit::VitEncoder;

/// Tolerance of the manifest self-test, per coordinate.
pub const FIXTURE_TOLERANCE: f64 = 1e-3;

/// Unit-norm vector in the shared embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `values` onto the unit sphere.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let n = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::InvalidArgument("cannot normalize a zero or non-finite embedding".into()));
        }
        Ok(Self(values.into_iter().map(|v| v / n).collect()))
    }

    /// Wraps values that are already unit norm (within 1e-6).
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        let n = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !((n - 1.0).abs() <= 1e-6) {
            return Err(Error::InvalidArgument(format!("embedding norm {n} is not 1")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `1×d` row tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::row_vector(self.0.clone())
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }
}

/// `1 − a·b`.
pub fn cosine_distance(a: &Embedding, b: &Embedding) -> f64 {
    1.0 - a.dot(b)
}

/// Records `1 − a·b` for two `1×d` nodes.
pub fn cosine_distance_on_graph(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let prod = g.mul(a, b)?;
    let dot = g.sum(prod);
    let neg = g.scale(dot, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

#[derive(Clone, Debug)]
enum Tower {
    Toy(ToyEncoder),
    Vit(VitEncoder),
}

/// A loaded, immutable encoder.
#[derive(Clone, Debug)]
pub struct EncoderHandle {
    tower: Tower,
    fingerprint: String,
    resize_cache: Arc<Mutex<HashMap<(usize, usize), Arc<RowMap>>>>,
}

fn fingerprint_of(c: &TensorContainer) -> Result<String> {
    Ok(hex::encode(Sha256::digest(c.encode()?)))
}

impl EncoderHandle {
    fn with_tower(tower: Tower, fingerprint: String) -> Self {
        Self {
            tower,
            fingerprint,
            resize_cache: Arc::new(Mutex::new(HashMap::new())),
        }
    }

    /// The built-in toy encoder with its default configuration.
    pub fn toy() -> Self {
        static TOY: OnceLock<EncoderHandle> = OnceLock::new();
        TOY.get_or_init(|| Self::toy_with(&ToyConfig::default()).expect("default toy encoder builds"))
            .clone()
    }

    pub fn toy_with(cfg: &ToyConfig) -> Result<Self> {
        let enc = ToyEncoder::build(cfg)?;
        let fingerprint = fingerprint_of(&enc.to_container()?)?;
        Ok(Self::with_tower(Tower::Toy(enc), fingerprint))
    }

    pub fn kind(&self) -> Architecture {
        match self.tower {
            Tower::Toy(_) => Architecture::Toy,
            Tower::Vit(_) => Architecture::Vit,
        }
    }

    pub fn image_resolution(&self) -> usize {
        match &self.tower {
            Tower::Toy(t) => t.resolution(),
            Tower::Vit(v) => v.resolution(),
        }
    }

    pub fn embed_dim(&self) -> usize {
        match &self.tower {
            Tower::Toy(t) => t.embed_dim(),
            Tower::Vit(v) => v.embed_dim(),
        }
    }

    /// SHA-256 (hex) of the encoder's tensor container.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn has_text_tower(&self) -> bool {
        matches!(self.tower, Tower::Toy(_))
    }

    fn resize(&self, h: usize, w: usize) -> Arc<RowMap> {
        let r = self.image_resolution();
        let mut cache = self.resize_cache.lock().expect("resize cache poisoned");
        cache
            .entry((h, w))
            .or_insert_with(|| Arc::new(resize_map(h, w, r, r)))
            .clone()
    }

    /// Records the image tower on an `(h·w)×3` node, resizing bilinearly to the
    /// encoder resolution. Returns the unit `1×d` embedding node.
    pub fn image_on_graph(&self, g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
        if g.shape(x) != (h * w, 3) {
            return Err(Error::shape("embed_image", format!("node {:?} is not a {h}x{w} image", g.shape(x))));
        }
        let r = self.image_resolution();
        let x = if (h, w) == (r, r) { x } else { g.row_map(x, self.resize(h, w))? };
        match &self.tower {
            Tower::Toy(t) => t.image_on_graph(g, x),
            Tower::Vit(v) => v.image_on_graph(g, x),
        }
    }

    pub fn embed_image(&self, img: &Image) -> Result<Embedding> {
        let mut g = Graph::new();
        let x = g.constant(img.to_tensor());
        let e = self.image_on_graph(&mut g, x, img.height(), img.width())?;
        g.check_finite()?;
        Embedding::new(g.value(e).data().to_vec())
    }

    pub fn embed_text(&self, text: &str) -> Result<Embedding> {
        if text.is_empty() {
            return Err(Error::InvalidArgument("text must be nonempty".into()));
        }
        match &self.tower {
            Tower::Toy(t) => Embedding::new(t.text_raw(text)),
            Tower::Vit(_) => Err(Error::NoTextTower),
        }
    }

    pub fn to_container(&self) -> Result<TensorContainer> {
        match &self.tower {
            Tower::Toy(t) => t.to_container(),
            Tower::Vit(_) => Err(Error::InvalidArgument("external encoders are not re-exported".into())),
        }
    }

    /// Manifest describing this encoder, without container or fixture paths.
    pub fn manifest(&self) -> EncoderManifest {
        EncoderManifest {
            kind: self.kind(),
            embed_dim: self.embed_dim(),
            image_resolution: self.image_resolution(),
            patch_size: match &self.tower {
                Tower::Toy(_) => ToyConfig::default().patch,
                Tower::Vit(_) => 0,
            },
            depth: 0,
            heads: 0,
            container: None,
            fixture_image: None,
            fixture_embedding: None,
            image_mean: None,
            image_std: None,
        }
    }

    /// Writes the toy encoder as container + manifest + self-test fixture into `dir`.
    pub fn export_toy(&self, dir: impl AsRef<Path>, fixture: &Image) -> Result<std::path::PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.to_container()?.save(dir.join("encoder.ntc"))?;
        crate::imaging::save_png(fixture, dir.join("fixture.png"))?;
        // embed the quantized file, which is what the loader will read
        let stored = load_png(dir.join("fixture.png"))?;
        let mut m = self.manifest();
        m.container = Some("encoder.ntc".into());
        m.fixture_image = Some("fixture.png".into());
        m.fixture_embedding = Some(self.embed_image(&stored)?.into_values());
        let path = dir.join("encoder.manifest");
        m.save(&path)?;
        Ok(path)
    }
}

/// `100 · max(0, θ_I(img)·θ_T(text))`.
pub fn clipsim(h: &EncoderHandle, img: &Image, text: &str) -> Result<f64> {
    Ok(clipsim_embeddings(&h.embed_image(img)?, &h.embed_text(text)?))
}

pub fn clipsim_embeddings(image: &Embedding, text: &Embedding) -> f64 {
    100.0 * image.dot(text).max(0.0)
}

/// Builds a handle from a container and its manifest, then runs the manifest
/// self-test when it declares a fixture. External encoders must declare one.
pub fn load_encoder(container: &TensorContainer, manifest: &EncoderManifest) -> Result<EncoderHandle> {
    let tower = match manifest.kind {
        Architecture::Toy => Tower::Toy(ToyEncoder::from_container(
            container,
            manifest.image_resolution,
            manifest.patch_size,
            manifest.embed_dim,
        )?),
        Architecture::Vit => Tower::Vit(VitEncoder::from_container(container, manifest)?),
    };
    let handle = EncoderHandle::with_tower(tower, fingerprint_of(container)?);
    match (&manifest.fixture_image, &manifest.fixture_embedding) {
        (Some(path), Some(expected)) => check_fixture(&handle, &load_png(path)?, expected)?,
        (None, None) if manifest.kind == Architecture::Toy => {}
        _ => {
            return Err(Error::format(
                "encoder manifest",
                "fixture_image and fixture_embedding are required together",
            ))
        }
    }
    Ok(handle)
}

/// Loads `manifest_path` and the container it names (default `encoder.ntc` beside it).
pub fn load_encoder_files(manifest_path: impl AsRef<Path>) -> Result<EncoderHandle> {
    let manifest_path = manifest_path.as_ref();
    let manifest = EncoderManifest::load(manifest_path)?;
    let container_path = manifest.container.clone().unwrap_or_else(|| {
        manifest_path
            .parent()
            .unwrap_or(Path::new("."))
            .join("encoder.ntc")
    });
    load_encoder(&TensorContainer::load(container_path)?, &manifest)
}

/// Compares the embedding of `image` against `expected`, coordinate by coordinate.
pub fn check_fixture(handle: &EncoderHandle, image: &Image, expected: &[f64]) -> Result<()> {
    if expected.len() != handle.embed_dim() {
        return Err(Error::format(
            "encoder manifest",
            format!("fixture embedding has {} values, encoder dim is {}", expected.len(), handle.embed_dim()),
        ));
    }
    let got = handle.embed_image(image)?;
    for (index, (a, b)) in got.values().iter().zip(expected).enumerate() {
        let error = (a - b).abs();
        if !(error < FIXTURE_TOLERANCE) {
            return Err(Error::FixtureMismatch {
                index,
                error,
                tolerance: FIXTURE_TOLERANCE,
            });
        }
    }
    Ok(())
}
