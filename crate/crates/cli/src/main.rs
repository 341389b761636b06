//! `inrinv`: store preparation, text-to-image inversion, downstream tasks,
//! ablations and manifest replay.

mod commands;
mod config;
mod failure;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use inrinv_core::config::KeyValues;
use inrinv_core::tasks::TaskKind;

use commands::{absolute, execute, Context};
use config::{preset_of, Preset, RunConfig};
use failure::Failure;
use manifest::{Invocation, RunManifest};

#[derive(Parser, Debug)]
#[command(name = "inrinv", version, about = "Decoder-free image synthesis by inverting an image/text encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// `toy` or the path of an encoder manifest.
    #[arg(long, default_value = "toy")]
    encoder: String,
    /// `key = value` settings file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single override, e.g. `--set inversion.beta=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Starting settings before the config file is applied [default: desk].
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    /// Accept a store built with a different encoder.
    #[arg(long)]
    allow_mismatch: bool,
}

#[derive(Args, Debug, Clone)]
struct Steps {
    /// Inversion steps.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the built-in fixture corpus (image.png + image.txt pairs).
    Fixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Fit robust INRs to a corpus and save the retrieval store.
    PrepareDataset {
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Store whose captions and text embeddings replace the text tower.
        #[arg(long)]
        text_embeddings: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Synthesize an image for a prompt.
    Generate {
        prompt: String,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        steps: Steps,
        /// Appended to the prompt before embedding.
        #[arg(long)]
        suffix: Option<String>,
        #[arg(long)]
        no_awp: bool,
        #[arg(long)]
        no_procrustes: bool,
        #[arg(long)]
        no_freq_schedule: bool,
        #[arg(long)]
        no_blend: bool,
        #[arg(long)]
        text_embeddings: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Re-synthesize an image from its own embedding.
    Reconstruct {
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        steps: Steps,
        #[command(flatten)]
        common: Common,
    },
    /// Steer an image towards a prompt.
    Edit {
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Store for aligning the prompt embedding.
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        content_weight: Option<f64>,
        #[command(flatten)]
        steps: Steps,
        #[command(flatten)]
        common: Common,
    },
    /// Move a content image towards a style image's embedding.
    Style {
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        style: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        content_weight: Option<f64>,
        #[command(flatten)]
        steps: Steps,
        #[command(flatten)]
        common: Common,
    },
    /// Run the full model and four ablated variants over a prompt list.
    Ablate {
        /// One prompt per line.
        prompts: PathBuf,
        #[arg(long)]
        store: PathBuf,
        /// Tab-separated results table.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        steps: Steps,
        #[command(flatten)]
        common: Common,
    },
    /// Re-run the command recorded in a run manifest.
    Replay {
        manifest: PathBuf,
        /// Write outputs here instead of their recorded location.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn parse_set(items: &[String]) -> Result<KeyValues, Failure> {
    let mut kv = KeyValues::new();
    for item in items {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{item}`")))?;
        kv.set(k.trim(), v.trim());
    }
    Ok(kv)
}

/// Preset, then config file, then `--set`, then the dedicated flags.
fn resolve(common: &Common, flags: impl FnOnce(&mut RunConfig)) -> Result<RunConfig, Failure> {
    let file = match &common.config {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::new(),
    };
    let preset = common.preset.or(preset_of(&file)?).unwrap_or(Preset::Desk);
    let mut cfg = RunConfig::preset(preset).apply(&file)?.apply(&parse_set(&common.set)?)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    flags(&mut cfg);
    cfg.resolved()
}

fn set_steps(cfg: &mut RunConfig, steps: &Steps) {
    if let Some(n) = steps.steps {
        cfg.inversion.steps = n;
    }
}

fn abs(p: &Path) -> Result<PathBuf, Failure> {
    absolute(p)
}

fn abs_opt(p: &Option<PathBuf>) -> Result<Option<PathBuf>, Failure> {
    p.as_deref().map(abs).transpose()
}

/// Turns parsed arguments into a recorded invocation and its settings.
fn plan(command: Command) -> Result<(Invocation, RunConfig, Common), Failure> {
    Ok(match command {
        Command::Fixtures { out, size, common } => {
            let cfg = resolve(&common, |_| {})?;
            (Invocation::Fixtures { out: abs(&out)?, size }, cfg, common)
        }
        Command::PrepareDataset {
            corpus,
            out,
            text_embeddings,
            common,
        } => {
            let cfg = resolve(&common, |_| {})?;
            let inv = Invocation::PrepareDataset {
                corpus: abs(&corpus)?,
                out: abs(&out)?,
                text_embeddings: abs_opt(&text_embeddings)?,
            };
            (inv, cfg, common)
        }
        Command::Generate {
            prompt,
            store,
            out,
            steps,
            suffix,
            no_awp,
            no_procrustes,
            no_freq_schedule,
            no_blend,
            text_embeddings,
            common,
        } => {
            let cfg = resolve(&common, |c| {
                set_steps(c, &steps);
                if let Some(s) = suffix {
                    c.inversion.prompt_suffix = s;
                }
                let inv = &mut c.inversion;
                inv.use_awp_init &= !no_awp;
                inv.use_procrustes &= !no_procrustes;
                inv.use_freq_schedule &= !no_freq_schedule;
                inv.use_blend &= !no_blend;
            })?;
            if prompt.trim().is_empty() {
                return Err(Failure::Usage("prompt must be nonempty".into()));
            }
            let inv = Invocation::Generate {
                prompt,
                store: abs(&store)?,
                out: abs(&out)?,
                text_embeddings: abs_opt(&text_embeddings)?,
            };
            (inv, cfg, common)
        }
        Command::Reconstruct {
            content,
            out,
            steps,
            common,
        } => {
            let cfg = resolve(&common, |c| set_steps(c, &steps))?;
            let inv = Invocation::Task {
                task: TaskKind::Reconstruct,
                content: abs(&content)?,
                style: None,
                prompt: None,
                store: None,
                out: abs(&out)?,
            };
            (inv, cfg, common)
        }
        Command::Edit {
            content,
            prompt,
            store,
            out,
            content_weight,
            steps,
            common,
        } => {
            let cfg = resolve(&common, |c| {
                set_steps(c, &steps);
                c.content_weight = content_weight.or(c.content_weight);
            })?;
            let inv = Invocation::Task {
                task: TaskKind::Edit,
                content: abs(&content)?,
                style: None,
                prompt: Some(prompt),
                store: abs_opt(&store)?,
                out: abs(&out)?,
            };
            (inv, cfg, common)
        }
        Command::Style {
            content,
            style,
            out,
            content_weight,
            steps,
            common,
        } => {
            let cfg = resolve(&common, |c| {
                set_steps(c, &steps);
                c.content_weight = content_weight.or(c.content_weight);
            })?;
            let inv = Invocation::Task {
                task: TaskKind::Style,
                content: abs(&content)?,
                style: Some(abs(&style)?),
                prompt: None,
                store: None,
                out: abs(&out)?,
            };
            (inv, cfg, common)
        }
        Command::Ablate {
            prompts,
            store,
            out,
            steps,
            common,
        } => {
            let cfg = resolve(&common, |c| set_steps(c, &steps))?;
            let inv = Invocation::Ablate {
                prompts: abs(&prompts)?,
                store: abs(&store)?,
                out: abs(&out)?,
            };
            (inv, cfg, common)
        }
        Command::Replay { .. } => unreachable!("replay is dispatched separately"),
    })
}

fn run_and_record(inv: &Invocation, cfg: &RunConfig, ctx: &Context) -> Result<PathBuf, Failure> {
    let start = Instant::now();
    let outcome = execute(inv, cfg, ctx)?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        command: inv.command().into(),
        invocation: inv.clone(),
        config: cfg.clone(),
        seed: cfg.seed,
        encoder: ctx.label.clone(),
        encoder_fingerprint: ctx.encoder.fingerprint().into(),
        allow_mismatch: ctx.allow_mismatch,
        store_fingerprint: outcome.store_fingerprint,
        duration_secs: start.elapsed().as_secs_f64(),
        outputs: outcome.outputs,
        warnings: outcome.warnings,
    };
    let path = inv.manifest_path();
    manifest.save(&path)?;
    if !manifest.warnings.is_empty() {
        eprintln!("{} warning(s), see {}", manifest.warnings.len(), path.display());
    }
    Ok(path)
}

fn replay(manifest_path: &Path, out_dir: Option<&Path>) -> Result<PathBuf, Failure> {
    let m = RunManifest::load(manifest_path)?;
    let ctx = Context::load(&m.encoder, m.allow_mismatch)?;
    if ctx.encoder.fingerprint() != m.encoder_fingerprint {
        return Err(Failure::Data(format!(
            "encoder {} has fingerprint {}, the manifest recorded {}",
            m.encoder,
            ctx.encoder.fingerprint(),
            m.encoder_fingerprint
        )));
    }
    let inv = match out_dir {
        Some(d) => m.invocation.redirected(&abs(d)?),
        None => m.invocation.clone(),
    };
    let cfg = m.config.clone().resolved()?;
    run_and_record(&inv, &cfg, &ctx)
}

fn run(cli: Cli) -> Result<PathBuf, Failure> {
    if let Command::Replay { manifest, out_dir } = &cli.command {
        return replay(manifest, out_dir.as_deref());
    }
    let (inv, cfg, common) = plan(cli.command)?;
    let ctx = Context::load(&common.encoder, common.allow_mismatch)?;
    run_and_record(&inv, &cfg, &ctx)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(manifest) => {
            log::info!("manifest: {}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
