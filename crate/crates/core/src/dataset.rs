//! The offline store of `{image embedding, INR weights, text embedding}`
//! triples, its on-disk layout, and the retrieval queries run against it.
//!
//! On disk a store is a directory:
//!
//! * `store.json`: `format`, `version`, `embed_dim`, `encoder_fingerprint`,
//!   `entry_count` and optional per-entry records (`id`, `source_hash`,
//!   `weights`, `plain_weights`, `fit`). Without `entries`, ids run `0..n`
//!   and no weights are attached.
//! * `embeddings.bin`: f32 little-endian, the `n×d` text matrix then the
//!   `n×d` image matrix, row per entry.
//! * `captions.bin`: per entry a u32 little-endian byte length and UTF-8 bytes.
//! * `weights/NNNNN.inrw`: one INR weights file per entry.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bytes::{put_f32s, put_u32, to_u32, Reader};
use crate::encoder::{EncoderHandle, Embedding};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::inr::{decode_weights, encode_weights, render, CoordinateGrid, INRSpec, INRWeights};
use crate::robust_init::{fit_blurred_at, AWPConfig, FitRecord, RobustFitConfig};

pub const STORE_FORMAT: &str = "inrinv-store";
pub const STORE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "store.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const CAPTIONS_FILE: &str = "captions.bin";
pub const WEIGHTS_DIR: &str = "weights";

/// One stored triple.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub id: u64,
    pub caption: String,
    pub source_hash: String,
    pub image_embedding: Embedding,
    pub text_embedding: Embedding,
    /// Robust (AWP) fit of the blurred source.
    pub weights: Option<INRWeights>,
    /// Plain fit of the same blurred source, kept for ablations.
    pub plain_weights: Option<INRWeights>,
    pub fit: Option<FitRecord>,
}

impl DatasetEntry {
    pub fn robust_weights(&self) -> Result<&INRWeights> {
        self.weights
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("entry {} has no INR weights", self.id)))
    }

    pub fn plain_weights(&self) -> Result<&INRWeights> {
        self.plain_weights
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("entry {} has no plain INR weights", self.id)))
    }
}

/// Ordered entries sharing one embedding dimension and encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStore {
    embed_dim: usize,
    fingerprint: String,
    entries: Vec<DatasetEntry>,
}

impl DatasetStore {
    pub fn new(embed_dim: usize, fingerprint: impl Into<String>) -> Self {
        Self {
            embed_dim,
            fingerprint: fingerprint.into(),
            entries: Vec::new(),
        }
    }

    /// Empty store bound to `h`.
    pub fn for_encoder(h: &EncoderHandle) -> Self {
        Self::new(h.embed_dim(), h.fingerprint())
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn entries(&self) -> &[DatasetEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&DatasetEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Appends `entry` under the next free id and returns that id.
    pub fn push(&mut self, mut entry: DatasetEntry) -> Result<u64> {
        let id = self.entries.last().map_or(0, |e| e.id + 1);
        entry.id = id;
        self.insert(entry)?;
        Ok(id)
    }

    /// Appends `entry` keeping its id, which must exceed every stored id.
    pub fn insert(&mut self, entry: DatasetEntry) -> Result<()> {
        if entry.image_embedding.dim() != self.embed_dim || entry.text_embedding.dim() != self.embed_dim {
            return Err(Error::shape(
                "dataset entry",
                format!("embedding dim differs from store dim {}", self.embed_dim),
            ));
        }
        if self.entries.last().is_some_and(|e| e.id >= entry.id) {
            return Err(Error::InvalidArgument(format!("entry id {} is not increasing", entry.id)));
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Fails when the store was built with a different encoder.
    pub fn check_encoder(&self, h: &EncoderHandle) -> Result<()> {
        if self.fingerprint != h.fingerprint() {
            return Err(Error::FingerprintMismatch {
                store: self.fingerprint.clone(),
                active: h.fingerprint().to_string(),
            });
        }
        if self.embed_dim != h.embed_dim() {
            return Err(Error::shape(
                "dataset store",
                format!("store dim {} vs encoder dim {}", self.embed_dim, h.embed_dim()),
            ));
        }
        Ok(())
    }

    /// SHA-256 (hex) over the manifest, embeddings and captions as saved.
    pub fn content_fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.manifest()).map_err(json_error)?);
        h.update(self.embedding_bytes()?);
        h.update(self.caption_bytes()?);
        Ok(hex::encode(h.finalize()))
    }

    fn manifest(&self) -> StoreManifest {
        StoreManifest {
            format: STORE_FORMAT.into(),
            version: STORE_VERSION,
            embed_dim: self.embed_dim,
            encoder_fingerprint: self.fingerprint.clone(),
            entry_count: self.entries.len(),
            entries: Some(
                self.entries
                    .iter()
                    .map(|e| EntryRecord {
                        id: e.id,
                        source_hash: e.source_hash.clone(),
                        weights: e.weights.as_ref().map(|_| weights_path(e.id, false)),
                        plain_weights: e.plain_weights.as_ref().map(|_| weights_path(e.id, true)),
                        fit: e.fit.clone(),
                    })
                    .collect(),
            ),
        }
    }

    fn embedding_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(8 * self.embed_dim * self.entries.len());
        for e in &self.entries {
            put_f32s(&mut out, e.text_embedding.values().iter().map(|&v| v as f32));
        }
        for e in &self.entries {
            put_f32s(&mut out, e.image_embedding.values().iter().map(|&v| v as f32));
        }
        Ok(out)
    }

    fn caption_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for e in &self.entries {
            put_u32(&mut out, to_u32(e.caption.len(), "caption length")?);
            out.extend_from_slice(e.caption.as_bytes());
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StoreManifest {
    format: String,
    version: u32,
    embed_dim: usize,
    encoder_fingerprint: String,
    entry_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    entries: Option<Vec<EntryRecord>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EntryRecord {
    id: u64,
    #[serde(default)]
    source_hash: String,
    #[serde(default)]
    weights: Option<String>,
    #[serde(default)]
    plain_weights: Option<String>,
    #[serde(default)]
    fit: Option<FitRecord>,
}

fn json_error(e: serde_json::Error) -> Error {
    Error::format("store manifest", e.to_string())
}

fn weights_path(id: u64, plain: bool) -> String {
    if plain {
        format!("{WEIGHTS_DIR}/{id:05}.plain.inrw")
    } else {
        format!("{WEIGHTS_DIR}/{id:05}.inrw")
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes `store` into directory `dir`, creating it if needed.
pub fn save_store(store: &DatasetStore, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join(WEIGHTS_DIR)).map_err(|e| Error::io(dir, e))?;
    for e in &store.entries {
        for (w, plain) in [(&e.weights, false), (&e.plain_weights, true)] {
            if let Some(w) = w {
                write_atomic(&dir.join(weights_path(e.id, plain)), &encode_weights(w)?)?;
            }
        }
    }
    write_atomic(&dir.join(EMBEDDINGS_FILE), &store.embedding_bytes()?)?;
    write_atomic(&dir.join(CAPTIONS_FILE), &store.caption_bytes()?)?;
    let manifest = serde_json::to_vec_pretty(&store.manifest()).map_err(json_error)?;
    write_atomic(&dir.join(MANIFEST_FILE), &manifest)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads `embeddings.bin`: `(text, image)` rows for `n` entries of dimension `d`.
pub fn read_embeddings(path: impl AsRef<Path>, n: usize, d: usize) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let mut r = Reader::new(&bytes, "embeddings file");
    let rows = |r: &mut Reader| -> Result<Vec<Vec<f64>>> {
        (0..n)
            .map(|_| Ok(r.f32s(d)?.into_iter().map(f64::from).collect()))
            .collect()
    };
    let text = rows(&mut r)?;
    let image = rows(&mut r)?;
    r.finish()?;
    Ok((text, image))
}

/// Reads `captions.bin` holding exactly `n` captions.
pub fn read_captions(path: impl AsRef<Path>, n: usize) -> Result<Vec<String>> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let mut r = Reader::new(&bytes, "captions file");
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u32()? as usize;
        let raw = r.take(len)?;
        out.push(
            String::from_utf8(raw.to_vec()).map_err(|e| Error::format("captions file", e.to_string()))?,
        );
    }
    r.finish()?;
    Ok(out)
}

/// Loads the store in directory `dir` without checking its encoder.
pub fn load_store(dir: impl AsRef<Path>) -> Result<DatasetStore> {
    let dir = dir.as_ref();
    let manifest: StoreManifest = serde_json::from_slice(&read(&dir.join(MANIFEST_FILE))?).map_err(json_error)?;
    if manifest.format != STORE_FORMAT || manifest.version != STORE_VERSION {
        return Err(Error::format(
            "store manifest",
            format!("unsupported format {} v{}", manifest.format, manifest.version),
        ));
    }
    let (n, d) = (manifest.entry_count, manifest.embed_dim);
    let (text, image) = read_embeddings(dir.join(EMBEDDINGS_FILE), n, d)?;
    let captions = read_captions(dir.join(CAPTIONS_FILE), n)?;
    let records = match manifest.entries {
        Some(r) if r.len() == n => r,
        Some(r) => {
            return Err(Error::format(
                "store manifest",
                format!("{} entry records for entry_count {n}", r.len()),
            ))
        }
        None => (0..n as u64)
            .map(|id| EntryRecord {
                id,
                source_hash: String::new(),
                weights: None,
                plain_weights: None,
                fit: None,
            })
            .collect(),
    };
    let load_weights = |p: &Option<String>| -> Result<Option<INRWeights>> {
        p.as_ref().map(|p| decode_weights(&read(&dir.join(p))?)).transpose()
    };
    let mut store = DatasetStore::new(d, manifest.encoder_fingerprint);
    for (((rec, t), i), caption) in records.into_iter().zip(text).zip(image).zip(captions) {
        store.insert(DatasetEntry {
            id: rec.id,
            caption,
            source_hash: rec.source_hash,
            image_embedding: Embedding::from_unit(i)?,
            text_embedding: Embedding::from_unit(t)?,
            weights: load_weights(&rec.weights)?,
            plain_weights: load_weights(&rec.plain_weights)?,
            fit: rec.fit,
        })?;
    }
    Ok(store)
}

/// Loads a store and checks it against the active encoder. With
/// `allow_mismatch` a fingerprint mismatch is logged instead of returned.
pub fn load_store_for(dir: impl AsRef<Path>, h: &EncoderHandle, allow_mismatch: bool) -> Result<DatasetStore> {
    let store = load_store(dir)?;
    match store.check_encoder(h) {
        Err(e @ Error::FingerprintMismatch { .. }) if allow_mismatch => {
            log::warn!("{e}; continuing as requested");
            Ok(store)
        }
        other => other.map(|_| store),
    }
}

/// Settings for building store entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareConfig {
    pub spec: INRSpec,
    pub fit: RobustFitConfig,
    pub awp: AWPConfig,
    /// Side of the square grid the INR is fitted and rendered on.
    pub resolution: usize,
    /// Also fit a plain (non-AWP) INR from the same initialization.
    pub keep_plain: bool,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            spec: INRSpec::default(),
            fit: RobustFitConfig::default(),
            awp: AWPConfig::default(),
            resolution: 64,
            keep_plain: true,
        }
    }
}

impl PrepareConfig {
    /// Small network, short fits and a 32-pixel grid; suited to a single CPU.
    pub fn desk() -> Self {
        Self {
            spec: INRSpec::with_size(5, 32),
            fit: RobustFitConfig {
                steps: 300,
                lr: 1e-3,
                ..RobustFitConfig::default()
            },
            resolution: 32,
            ..Self::default()
        }
    }
}

/// Rounds to f32 so the entry survives storage bitwise.
fn storable(e: &Embedding) -> Result<Embedding> {
    Embedding::from_unit(e.values().iter().map(|&v| v as f32 as f64).collect())
}

/// Fits a robust INR to the blurred image, embeds its render and the caption.
/// The returned entry has id 0; [`DatasetStore::push`] assigns the real one.
pub fn prepare_entry(
    image: &Image,
    caption: &str,
    h: &EncoderHandle,
    cfg: &PrepareConfig,
    seed: u64,
) -> Result<DatasetEntry> {
    let text = h.embed_text(caption)?;
    prepare_entry_with_text(image, caption, text, h, cfg, seed)
}

/// As [`prepare_entry`] with a precomputed text embedding.
pub fn prepare_entry_with_text(
    image: &Image,
    caption: &str,
    text: Embedding,
    h: &EncoderHandle,
    cfg: &PrepareConfig,
    seed: u64,
) -> Result<DatasetEntry> {
    let size = (cfg.resolution, cfg.resolution);
    let robust = fit_blurred_at(image, &cfg.spec, &cfg.fit, Some(&cfg.awp), seed, size)?;
    let mut weights = robust.weights;
    weights.round_to_f32();
    let plain_weights = if cfg.keep_plain {
        let mut w = fit_blurred_at(image, &cfg.spec, &cfg.fit, None, seed, size)?.weights;
        w.round_to_f32();
        Some(w)
    } else {
        None
    };
    let grid = CoordinateGrid::new(size.0, size.1)?;
    let image_embedding = h.embed_image(&render(&weights, &grid)?)?;
    Ok(DatasetEntry {
        id: 0,
        caption: caption.to_string(),
        source_hash: robust.record.source_hash.clone(),
        image_embedding: storable(&image_embedding)?,
        text_embedding: storable(&text)?,
        weights: Some(weights),
        plain_weights,
        fit: Some(robust.record),
    })
}

/// Entry indices ranked by `score` descending, ties by ascending id; the first `count`.
fn ranked(store: &DatasetStore, count: usize, score: impl Fn(&DatasetEntry) -> f64) -> Result<Vec<(usize, f64)>> {
    if store.is_empty() {
        return Err(Error::EmptyStore);
    }
    if count > store.len() {
        return Err(Error::StoreTooSmall {
            requested: count,
            available: store.len(),
        });
    }
    let mut scored: Vec<(usize, f64)> = store.entries.iter().enumerate().map(|(i, e)| (i, score(e))).collect();
    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then(store.entries[a.0].id.cmp(&store.entries[b.0].id))
    });
    scored.truncate(count);
    Ok(scored)
}

fn check_dim(store: &DatasetStore, e: &Embedding) -> Result<()> {
    if e.dim() != store.embed_dim {
        return Err(Error::shape(
            "retrieval",
            format!("query dim {} vs store dim {}", e.dim(), store.embed_dim),
        ));
    }
    Ok(())
}

/// Indices of the `count` entries whose text embeddings are most similar to `e`.
pub fn nearest_by_text(e: &Embedding, store: &DatasetStore, count: usize) -> Result<Vec<usize>> {
    check_dim(store, e)?;
    Ok(ranked(store, count, |x| x.text_embedding.dot(e))?.into_iter().map(|(i, _)| i).collect())
}

/// The entry whose text embedding is most similar to `e_target`.
pub fn retrieve_init<'a>(e_target: &Embedding, store: &'a DatasetStore) -> Result<&'a DatasetEntry> {
    let i = nearest_by_text(e_target, store, 1)?[0];
    Ok(&store.entries[i])
}

/// The `k` image embeddings most similar to `e_t` and their softmax weights
/// over the raw similarities, in ranking order.
pub fn blend_weights(e_t: &Embedding, store: &DatasetStore, k: usize) -> Result<Vec<(usize, f64)>> {
    blend_weights_at(e_t, store, k, 1.0)
}

/// [`blend_weights`] with the similarities divided by `temperature`.
pub fn blend_weights_at(e_t: &Embedding, store: &DatasetStore, k: usize, temperature: f64) -> Result<Vec<(usize, f64)>> {
    check_dim(store, e_t)?;
    if k == 0 {
        return Err(Error::InvalidArgument("blend k must be >= 1".into()));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!("blend temperature {temperature} must be positive")));
    }
    let top = ranked(store, k, |x| x.image_embedding.dot(e_t))?;
    let max = top[0].1;
    let exps: Vec<f64> = top.iter().map(|(_, s)| ((s - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(top.iter().zip(exps).map(|(&(i, _), x)| (i, x / total)).collect())
}

/// Softmax-weighted mix of the `k` nearest image embeddings, renormalized.
pub fn blend_target(e_t: &Embedding, store: &DatasetStore, k: usize) -> Result<Embedding> {
    blend_target_at(e_t, store, k, 1.0)
}

/// [`blend_target`] at a given softmax temperature.
pub fn blend_target_at(e_t: &Embedding, store: &DatasetStore, k: usize, temperature: f64) -> Result<Embedding> {
    let weights = blend_weights_at(e_t, store, k, temperature)?;
    let mut out = vec![0.0; store.embed_dim];
    for (i, w) in weights {
        for (o, v) in out.iter_mut().zip(store.entries[i].image_embedding.values()) {
            *o += w * v;
        }
    }
    Embedding::new(out)
}

/// Path of a store directory's manifest, for callers that only hold the directory.
pub fn manifest_path(dir: impl AsRef<Path>) -> PathBuf {
    dir.as_ref().join(MANIFEST_FILE)
}
