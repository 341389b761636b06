//! Encoder manifests: the architecture and self-test fixture of a container.

use std::path::{Path, PathBuf};

use crate::config::{parse_list, KeyValues};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    Toy,
    Vit,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Toy => "toy",
            Architecture::Vit => "vit",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderManifest {
    pub kind: Architecture,
    pub embed_dim: usize,
    pub image_resolution: usize,
    pub patch_size: usize,
    /// Transformer blocks; 0 for the toy architecture.
    pub depth: usize,
    pub heads: usize,
    /// Tensor container path; relative paths resolve against the manifest directory.
    pub container: Option<PathBuf>,
    pub fixture_image: Option<PathBuf>,
    pub fixture_embedding: Option<Vec<f64>>,
    /// Per-channel input normalization applied after resizing.
    pub image_mean: Option<[f64; 3]>,
    pub image_std: Option<[f64; 3]>,
}

fn triple(kv: &KeyValues, key: &str) -> Result<Option<[f64; 3]>> {
    kv.list::<f64>(key)?
        .map(|v| {
            <[f64; 3]>::try_from(v)
                .map_err(|_| Error::format("encoder manifest", format!("`{key}` needs 3 values")))
        })
        .transpose()
}

impl EncoderManifest {
    /// Reads a manifest; relative paths inside it resolve against `base`.
    pub fn from_key_values(kv: &KeyValues, base: &Path) -> Result<Self> {
        let kind = match kv.require("kind")? {
            "toy" => Architecture::Toy,
            "vit" | "external" => Architecture::Vit,
            other => return Err(Error::format("encoder manifest", format!("unknown kind `{other}`"))),
        };
        let req = |key: &str| -> Result<usize> {
            kv.parsed::<usize>(key)?
                .ok_or_else(|| Error::format("encoder manifest", format!("missing key `{key}`")))
        };
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let fixture_embedding = match kv.get("fixture_embedding") {
            None => None,
            Some(v) => Some(match parse_list::<f64>("fixture_embedding", v) {
                Ok(values) if !values.is_empty() => values,
                _ => {
                    let path = resolve(v);
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    let joined = text.split_whitespace().collect::<Vec<_>>().join(",");
                    parse_list::<f64>("fixture_embedding", &joined.replace(",,", ","))?
                }
            }),
        };
        Ok(Self {
            kind,
            embed_dim: req("embed_dim")?,
            image_resolution: req("image_resolution")?,
            patch_size: req("patch_size")?,
            depth: kv.parsed_or("depth", 0)?,
            heads: kv.parsed_or("heads", 0)?,
            container: kv.get("container").map(resolve),
            fixture_image: kv.get("fixture_image").map(resolve),
            fixture_embedding,
            image_mean: triple(kv, "image_mean")?,
            image_std: triple(kv, "image_std")?,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_key_values(&KeyValues::load(path)?, base)
    }

    /// Key/value form; paths are written as given.
    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("kind", self.kind.as_str());
        kv.set("embed_dim", self.embed_dim);
        kv.set("image_resolution", self.image_resolution);
        kv.set("patch_size", self.patch_size);
        kv.set("depth", self.depth);
        kv.set("heads", self.heads);
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",");
        if let Some(p) = &self.container {
            kv.set("container", p.display());
        }
        if let Some(p) = &self.fixture_image {
            kv.set("fixture_image", p.display());
        }
        if let Some(e) = &self.fixture_embedding {
            kv.set("fixture_embedding", join(e));
        }
        if let Some(m) = &self.image_mean {
            kv.set("image_mean", join(m));
        }
        if let Some(s) = &self.image_std {
            kv.set("image_std", join(s));
        }
        kv
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_key_values().render()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inline_fixture_and_relative_paths() {
        let kv = KeyValues::parse(
            "kind = vit\nembed_dim = 4\nimage_resolution = 32\npatch_size = 8\ndepth = 2\nheads = 2\n\
             container = enc.ntc\nfixture_image = fix.png\nfixture_embedding = 0.5, -0.5, 0.5, -0.5\n\
             image_mean = 0.1,0.2,0.3",
        )
        .unwrap();
        let m = EncoderManifest::from_key_values(&kv, Path::new("/data")).unwrap();
        assert_eq!(m.kind, Architecture::Vit);
        assert_eq!(m.container.as_deref(), Some(Path::new("/data/enc.ntc")));
        assert_eq!(m.fixture_embedding, Some(vec![0.5, -0.5, 0.5, -0.5]));
        assert_eq!(m.image_mean, Some([0.1, 0.2, 0.3]));
        assert_eq!(m.image_std, None);
    }

    #[test]
    fn fixture_embedding_from_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("emb.txt"), "0.25 0.75\n-1e-3\n").unwrap();
        let kv = KeyValues::parse(
            "kind = toy\nembed_dim = 3\nimage_resolution = 64\npatch_size = 8\nfixture_embedding = emb.txt",
        )
        .unwrap();
        let m = EncoderManifest::from_key_values(&kv, dir.path()).unwrap();
        assert_eq!(m.fixture_embedding, Some(vec![0.25, 0.75, -1e-3]));
    }

    #[test]
    fn missing_and_unknown_keys() {
        let kv = KeyValues::parse("kind = toy\nembed_dim = 3").unwrap();
        assert!(EncoderManifest::from_key_values(&kv, Path::new(".")).is_err());
        let kv = KeyValues::parse("kind = resnet\nembed_dim = 3\nimage_resolution = 1\npatch_size = 1").unwrap();
        assert!(EncoderManifest::from_key_values(&kv, Path::new(".")).is_err());
    }

    #[test]
    fn round_trip_through_key_values() {
        let m = EncoderManifest {
            kind: Architecture::Toy,
            embed_dim: 64,
            image_resolution: 64,
            patch_size: 8,
            depth: 0,
            heads: 0,
            container: Some(PathBuf::from("/abs/toy.ntc")),
            fixture_image: None,
            fixture_embedding: Some(vec![0.1, -0.2, 1.0 / 3.0]),
            image_mean: None,
            image_std: None,
        };
        let back = EncoderManifest::from_key_values(&m.to_key_values(), Path::new("/")).unwrap();
        assert_eq!(back, m);
    }
}
