use std::fs;
use std::path::{Path, PathBuf};

use inrinv_core::tasks::TaskKind;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::failure::{io, Failure};

/// What was run, with every input a replay needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Invocation {
    Fixtures {
        out: PathBuf,
        size: usize,
    },
    PrepareDataset {
        corpus: PathBuf,
        out: PathBuf,
        text_embeddings: Option<PathBuf>,
    },
    Generate {
        prompt: String,
        store: PathBuf,
        out: PathBuf,
        text_embeddings: Option<PathBuf>,
    },
    Task {
        task: TaskKind,
        content: PathBuf,
        style: Option<PathBuf>,
        prompt: Option<String>,
        store: Option<PathBuf>,
        out: PathBuf,
    },
    Ablate {
        prompts: PathBuf,
        store: PathBuf,
        out: PathBuf,
    },
}

impl Invocation {
    pub fn command(&self) -> &'static str {
        match self {
            Invocation::Fixtures { .. } => "fixtures",
            Invocation::PrepareDataset { .. } => "prepare-dataset",
            Invocation::Generate { .. } => "generate",
            Invocation::Task { task, .. } => match task {
                TaskKind::Reconstruct => "reconstruct",
                TaskKind::Edit => "edit",
                TaskKind::Style => "style",
            },
            Invocation::Ablate { .. } => "ablate",
        }
    }

    pub fn out(&self) -> &Path {
        match self {
            Invocation::Fixtures { out, .. }
            | Invocation::PrepareDataset { out, .. }
            | Invocation::Generate { out, .. }
            | Invocation::Task { out, .. }
            | Invocation::Ablate { out, .. } => out,
        }
    }

    fn out_mut(&mut self) -> &mut PathBuf {
        match self {
            Invocation::Fixtures { out, .. }
            | Invocation::PrepareDataset { out, .. }
            | Invocation::Generate { out, .. }
            | Invocation::Task { out, .. }
            | Invocation::Ablate { out, .. } => out,
        }
    }

    /// Directory outputs hold their manifest; file outputs sit next to it.
    fn writes_directory(&self) -> bool {
        matches!(self, Invocation::Fixtures { .. } | Invocation::PrepareDataset { .. })
    }

    pub fn manifest_path(&self) -> PathBuf {
        if self.writes_directory() {
            self.out().join("run.json")
        } else {
            sibling(self.out(), "run.json")
        }
    }

    /// The same invocation writing under `dir` with the original output name.
    pub fn redirected(&self, dir: &Path) -> Self {
        let mut inv = self.clone();
        let name = self.out().file_name().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out"));
        *inv.out_mut() = dir.join(name);
        inv
    }
}

/// `out.png` → `out.<suffix>`.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.{suffix}"))
}

/// Provenance written next to every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub invocation: Invocation,
    pub config: RunConfig,
    pub seed: u64,
    /// `toy` or the encoder manifest path.
    pub encoder: String,
    pub encoder_fingerprint: String,
    pub allow_mismatch: bool,
    pub store_fingerprint: Option<String>,
    pub duration_secs: f64,
    pub outputs: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<(), Failure> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(path, text.as_bytes())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io(path, e))
}
