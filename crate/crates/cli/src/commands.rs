use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use inrinv_core::dataset::{
    load_store, load_store_for, prepare_entry_with_text, save_store, DatasetStore,
};
use inrinv_core::encoder::{clipsim_embeddings, load_encoder_files, Embedding, EncoderHandle};
use inrinv_core::fixtures::fixtures_at;
use inrinv_core::imaging::{load_png, save_png};
use inrinv_core::inr::save_weights;
use inrinv_core::inversion::{encoder_view, invert_text_embedding, Generation, InversionConfig, LossTrace};
use inrinv_core::seed::mix_seed;
use inrinv_core::tasks::{run_task, TaskKind, TaskRequest};

use crate::config::RunConfig;
use crate::failure::{io, Failure};
use crate::manifest::{sibling, write_atomic, Invocation};

/// The loaded encoder and how it was named.
pub struct Context {
    pub encoder: EncoderHandle,
    /// `toy` or the manifest path.
    pub label: String,
    pub allow_mismatch: bool,
}

impl Context {
    pub fn load(label: &str, allow_mismatch: bool) -> Result<Self, Failure> {
        let (encoder, label) = if label == "toy" {
            (EncoderHandle::toy(), label.to_string())
        } else {
            let path = absolute(Path::new(label))?;
            (load_encoder_files(&path)?, path.display().to_string())
        };
        Ok(Self {
            encoder,
            label,
            allow_mismatch,
        })
    }

    fn store(&self, dir: &Path) -> Result<DatasetStore, Failure> {
        Ok(load_store_for(dir, &self.encoder, self.allow_mismatch)?)
    }
}

/// What a command produced, for its manifest.
#[derive(Debug, Default)]
pub struct Outcome {
    pub outputs: Vec<PathBuf>,
    pub store_fingerprint: Option<String>,
    pub warnings: Vec<String>,
}

pub fn absolute(p: &Path) -> Result<PathBuf, Failure> {
    std::path::absolute(p).map_err(|e| io(p, e))
}

/// Text embeddings by caption: from a precomputed store when given,
/// otherwise from the encoder's text tower.
struct TextSource {
    table: Option<HashMap<String, Embedding>>,
}

impl TextSource {
    fn new(dir: Option<&Path>) -> Result<Self, Failure> {
        let table = match dir {
            None => None,
            Some(d) => Some(
                load_store(d)?
                    .entries()
                    .iter()
                    .map(|e| (e.caption.clone(), e.text_embedding.clone()))
                    .collect(),
            ),
        };
        Ok(Self { table })
    }

    fn embed(&self, h: &EncoderHandle, text: &str) -> Result<Embedding, Failure> {
        match &self.table {
            None => Ok(h.embed_text(text)?),
            Some(t) => t
                .get(text)
                .cloned()
                .ok_or_else(|| Failure::Data(format!("no precomputed text embedding for `{text}`"))),
        }
    }
}

pub fn execute(inv: &Invocation, cfg: &RunConfig, ctx: &Context) -> Result<Outcome, Failure> {
    if let Some(dir) = inv.out().parent() {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    match inv {
        Invocation::Fixtures { out, size } => fixtures(out, *size),
        Invocation::PrepareDataset {
            corpus,
            out,
            text_embeddings,
        } => prepare_dataset(corpus, out, text_embeddings.as_deref(), cfg, ctx),
        Invocation::Generate {
            prompt,
            store,
            out,
            text_embeddings,
        } => generate(prompt, store, out, text_embeddings.as_deref(), cfg, ctx),
        Invocation::Task {
            task,
            content,
            style,
            prompt,
            store,
            out,
        } => task_command(*task, content, style.as_deref(), prompt.as_deref(), store.as_deref(), out, cfg, ctx),
        Invocation::Ablate { prompts, store, out } => ablate(prompts, store, out, cfg, ctx),
    }
}

fn fixtures(out: &Path, size: usize) -> Result<Outcome, Failure> {
    if size < 8 {
        return Err(Failure::Usage(format!("fixture size must be >= 8, got {size}")));
    }
    fs::create_dir_all(out).map_err(|e| io(out, e))?;
    let mut outputs = Vec::new();
    for (i, f) in fixtures_at(size).iter().enumerate() {
        let png = out.join(format!("{i:02}.png"));
        save_png(&f.image, &png)?;
        write_atomic(&png.with_extension("txt"), format!("{}\n", f.caption).as_bytes())?;
        outputs.push(png);
    }
    Ok(Outcome {
        outputs,
        ..Outcome::default()
    })
}

/// PNG files of `dir` in name order.
fn corpus_images(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut images: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    images.sort();
    Ok(images)
}

fn read_caption(png: &Path) -> Result<String, String> {
    let path = png.with_extension("txt");
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let caption = text.trim();
    if caption.is_empty() {
        return Err(format!("{}: empty caption", path.display()));
    }
    Ok(caption.to_string())
}

fn prepare_dataset(
    corpus: &Path,
    out: &Path,
    text_embeddings: Option<&Path>,
    cfg: &RunConfig,
    ctx: &Context,
) -> Result<Outcome, Failure> {
    let h = &ctx.encoder;
    let texts = TextSource::new(text_embeddings)?;
    let images = corpus_images(corpus)?;
    let mut store = DatasetStore::for_encoder(h);
    let mut warnings = Vec::new();
    for (i, png) in images.iter().enumerate() {
        let loaded = read_caption(png).and_then(|c| load_png(png).map(|img| (img, c)).map_err(|e| e.to_string()));
        let (image, caption) = match loaded {
            Ok(pair) => pair,
            Err(msg) => {
                log::warn!("skipping {}: {msg}", png.display());
                warnings.push(format!("skipped {}: {msg}", png.display()));
                continue;
            }
        };
        let text = texts.embed(h, &caption)?;
        // seeds follow the file's position, so a skipped file leaves the rest unchanged
        let entry = prepare_entry_with_text(&image, &caption, text, h, &cfg.prepare, mix_seed(cfg.seed, i as u64))?;
        let psnr = entry.fit.as_ref().map_or(f64::NAN, |f| f.final_psnr);
        log::info!("[{}/{}] {caption}: fit {psnr:.2} dB", i + 1, images.len());
        store.push(entry)?;
    }
    if store.is_empty() {
        return Err(Failure::Data(format!("no usable image/caption pairs in {}", corpus.display())));
    }
    save_store(&store, out)?;
    Ok(Outcome {
        outputs: vec![out.to_path_buf()],
        store_fingerprint: Some(store.content_fingerprint()?),
        warnings,
    })
}

fn write_trace(trace: &LossTrace, out: &Path) -> Result<PathBuf, Failure> {
    let path = sibling(out, "trace.tsv");
    write_atomic(&path, trace.to_table().as_bytes())?;
    Ok(path)
}

fn write_result(
    out: &Path,
    image: &inrinv_core::imaging::Image,
    init: &inrinv_core::imaging::Image,
    weights: &inrinv_core::inr::INRWeights,
    trace: &LossTrace,
) -> Result<Vec<PathBuf>, Failure> {
    save_png(image, out)?;
    let init_path = sibling(out, "init.png");
    save_png(init, &init_path)?;
    let weights_path = sibling(out, "inrw");
    save_weights(weights, &weights_path)?;
    let trace_path = write_trace(trace, out)?;
    Ok(vec![out.to_path_buf(), init_path, weights_path, trace_path])
}

fn run_generation(
    prompt: &str,
    store: &DatasetStore,
    texts: &TextSource,
    cfg: &InversionConfig,
    h: &EncoderHandle,
) -> Result<(Generation, Embedding), Failure> {
    let e_t = texts.embed(h, &format!("{prompt}{}", cfg.prompt_suffix))?;
    let plain = if cfg.prompt_suffix.is_empty() {
        e_t.clone()
    } else {
        texts.embed(h, prompt)?
    };
    Ok((invert_text_embedding(&e_t, store, h, cfg)?, plain))
}

fn generate(
    prompt: &str,
    store_dir: &Path,
    out: &Path,
    text_embeddings: Option<&Path>,
    cfg: &RunConfig,
    ctx: &Context,
) -> Result<Outcome, Failure> {
    let h = &ctx.encoder;
    let store = ctx.store(store_dir)?;
    let texts = TextSource::new(text_embeddings)?;
    let (gen, prompt_embedding) = run_generation(prompt, &store, &texts, &cfg.inversion, h)?;
    let image = gen.image(h)?;
    let init = gen.init_image(h)?;
    let outputs = write_result(out, &image, &init, &gen.weights, &gen.trace)?;
    let sim = |img| -> Result<f64, Failure> { Ok(clipsim_embeddings(&h.embed_image(img)?, &prompt_embedding)) };
    println!(
        "init entry {}\tclipsim init {:.3}\tclipsim output {:.3}",
        gen.init_entry,
        sim(&init)?,
        sim(&image)?
    );
    Ok(Outcome {
        outputs,
        store_fingerprint: Some(store.content_fingerprint()?),
        warnings: Vec::new(),
    })
}

#[allow(clippy::too_many_arguments)]
fn task_command(
    kind: TaskKind,
    content: &Path,
    style: Option<&Path>,
    prompt: Option<&str>,
    store_dir: Option<&Path>,
    out: &Path,
    cfg: &RunConfig,
    ctx: &Context,
) -> Result<Outcome, Failure> {
    let h = &ctx.encoder;
    let mut req = TaskRequest::new(kind, cfg.inversion.clone(), cfg.tasks.clone());
    req.content_image = Some(load_png(content)?);
    req.style_image = style.map(load_png).transpose()?;
    req.prompt = prompt.map(str::to_string);
    if let Some(w) = cfg.content_weight {
        req.content_weight = w;
    }
    req.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let store = store_dir.map(|d| ctx.store(d)).transpose()?;
    let result = run_task(&req, h, store.as_ref())?;
    let init = encoder_view(&result.init_weights, cfg.inversion.resolution, h)?;
    let outputs = write_result(out, &result.image, &init, &result.weights, &result.trace)?;
    if let (Some(first), Some(last)) = (result.trace.initial(), result.trace.last()) {
        println!("alignment {:.4} -> {:.4}", first.alignment, last.alignment);
    }
    Ok(Outcome {
        outputs,
        store_fingerprint: store.map(|s| s.content_fingerprint()).transpose()?,
        warnings: Vec::new(),
    })
}

/// Variants i–v: the full model, then one component removed at a time.
pub fn ablation_variants(base: &InversionConfig) -> Vec<(&'static str, InversionConfig)> {
    let with = |f: fn(&mut InversionConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    vec![
        ("i full", base.clone()),
        ("ii no-freq-schedule", with(|c| c.use_freq_schedule = false)),
        ("iii no-awp", with(|c| c.use_awp_init = false)),
        ("iv no-procrustes", with(|c| c.use_procrustes = false)),
        ("v no-blend", with(|c| c.use_blend = false)),
    ]
}

fn read_prompts(path: &Path) -> Result<Vec<String>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
    let prompts: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect();
    if prompts.is_empty() {
        return Err(Failure::Data(format!("{}: no prompts", path.display())));
    }
    Ok(prompts)
}

fn ablate(prompts: &Path, store_dir: &Path, out: &Path, cfg: &RunConfig, ctx: &Context) -> Result<Outcome, Failure> {
    let h = &ctx.encoder;
    let prompts = read_prompts(prompts)?;
    let store = ctx.store(store_dir)?;
    let texts = TextSource::new(None)?;
    let mut table = String::from("variant\tmean_clipsim\tmean_final_loss\truns\tfailures\n");
    let mut warnings = Vec::new();
    for (name, variant) in ablation_variants(&cfg.inversion) {
        let (mut clip, mut loss, mut runs) = (0.0, 0.0, 0usize);
        for prompt in &prompts {
            let run = run_generation(prompt, &store, &texts, &variant, h).and_then(|(gen, e)| {
                let sim = clipsim_embeddings(&h.embed_image(&gen.image(h)?)?, &e);
                let last = gen.trace.last().map_or(f64::NAN, |r| r.alignment);
                Ok((sim, last))
            });
            match run {
                Ok((s, l)) => {
                    clip += s;
                    loss += l;
                    runs += 1;
                }
                Err(e) => {
                    log::warn!("{name} / {prompt}: {e}");
                    warnings.push(format!("{name} / {prompt}: {e}"));
                }
            }
        }
        let n = runs.max(1) as f64;
        let failures = prompts.len() - runs;
        table.push_str(&format!("{name}\t{:.4}\t{:.6}\t{runs}\t{failures}\n", clip / n, loss / n));
        log::info!("{name}: {runs}/{} runs", prompts.len());
    }
    write_atomic(out, table.as_bytes())?;
    print!("{table}");
    Ok(Outcome {
        outputs: vec![out.to_path_buf()],
        store_fingerprint: Some(store.content_fingerprint()?),
        warnings,
    })
}
