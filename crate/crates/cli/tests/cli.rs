use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use inrinv_core::dataset::load_store;
use inrinv_core::encoder::EncoderHandle;
use serde_json::Value;
use tempfile::TempDir;

const PREPARE: &[&str] = &[
    "--set",
    "prepare.fit.steps=30",
    "--set",
    "prepare.spec.hidden_width=8",
    "--set",
    "prepare.resolution=16",
    "--set",
    "prepare.fit.blur_kernel=31",
];

const INVERT: &[&str] = &[
    "--set",
    "inversion.resolution=16",
    "--set",
    "inversion.augment.count=2",
    "--set",
    "inversion.procrustes_p=4",
    "--set",
    "inversion.blend_k=2",
];

const TASK_FIT: &[&str] = &[
    "--set",
    "tasks.prepare.fit.steps=20",
    "--set",
    "tasks.prepare.spec.hidden_width=8",
    "--set",
    "tasks.prepare.resolution=16",
    "--set",
    "tasks.prepare.fit.blur_kernel=31",
    "--set",
    "tasks.refine_steps=10",
];

fn inrinv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_inrinv"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = inrinv(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    inrinv(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn cat(parts: &[&[&str]]) -> Vec<String> {
    parts.iter().flat_map(|p| p.iter().map(|s| s.to_string())).collect()
}

fn run_owned(args: Vec<String>) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&refs)
}

/// Corpus of the first five fixtures at 32 px plus a store prepared from it.
struct Shared {
    dir: TempDir,
}

impl Shared {
    fn corpus(&self) -> PathBuf {
        self.dir.path().join("corpus")
    }

    fn store(&self) -> PathBuf {
        self.dir.path().join("store")
    }
}

fn shared() -> &'static Shared {
    static S: OnceLock<Shared> = OnceLock::new();
    S.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus");
        ok(&["fixtures", "--out", s(&corpus), "--size", "32"]);
        for entry in fs::read_dir(&corpus).unwrap() {
            let p = entry.unwrap().path();
            let name = p.file_name().unwrap().to_str().unwrap().to_string();
            if name.starts_with("0") && name[1..2].parse::<u32>().is_ok_and(|i| i >= 5) || name.starts_with('1') {
                fs::remove_file(p).unwrap();
            }
        }
        let store = dir.path().join("store");
        run_owned(cat(&[&["prepare-dataset", s(&corpus), "--out", s(&store)], PREPARE]));
        Shared { dir }
    })
}

fn manifest(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn fixture_corpus_becomes_a_store_with_one_entry_per_pair() {
    let sh = shared();
    let store = load_store(sh.store()).unwrap();
    assert_eq!(store.len(), 5);
    assert_eq!(store.fingerprint(), EncoderHandle::toy().fingerprint());
    let m = manifest(&sh.store().join("run.json"));
    assert_eq!(m["command"], "prepare-dataset");
    assert_eq!(m["warnings"].as_array().unwrap().len(), 0);
    assert!(m["store_fingerprint"].is_string());
}

#[test]
fn bad_entries_are_skipped_with_warnings() {
    let sh = shared();
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    fs::create_dir(&corpus).unwrap();
    fs::copy(sh.corpus().join("00.png"), corpus.join("a.png")).unwrap();
    fs::copy(sh.corpus().join("00.txt"), corpus.join("a.txt")).unwrap();
    fs::write(corpus.join("b.png"), b"not a png").unwrap();
    fs::write(corpus.join("b.txt"), "a broken file").unwrap();
    fs::copy(sh.corpus().join("01.png"), corpus.join("c.png")).unwrap();
    let store = dir.path().join("store");
    run_owned(cat(&[&["prepare-dataset", s(&corpus), "--out", s(&store)], PREPARE]));
    assert_eq!(load_store(&store).unwrap().len(), 1);
    let m = manifest(&store.join("run.json"));
    assert_eq!(m["warnings"].as_array().unwrap().len(), 2);
}

#[test]
fn empty_corpus_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    assert_eq!(code(&["prepare-dataset", s(dir.path()), "--out", s(&store)]), 2);
}

#[test]
fn prepare_replay_is_bitwise_identical() {
    let sh = shared();
    let dir = tempfile::tempdir().unwrap();
    ok(&["replay", s(&sh.store().join("run.json")), "--out-dir", s(dir.path())]);
    let again = dir.path().join("store");
    for f in ["store.json", "embeddings.bin", "captions.bin", "weights/00000.inrw"] {
        assert_eq!(fs::read(sh.store().join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

fn generate(out: &Path, extra: &[&str]) -> Output {
    let sh = shared();
    let store = sh.store();
    run_owned(cat(&[
        &["generate", "a red disc on a blue background", "--store", s(&store), "--out", s(out)],
        INVERT,
        extra,
    ]))
}

#[test]
fn generate_writes_outputs_and_replays_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gen/a.png");
    generate(&out, &["--steps", "8", "--seed", "4"]);
    let m = manifest(&dir.path().join("gen/a.run.json"));
    assert_eq!(m["seed"], 4);
    assert_eq!(m["config"]["inversion"]["steps"], 8);
    assert_eq!(m["config"]["inversion"]["seed"], 4);
    assert_eq!(m["encoder"], "toy");
    assert_eq!(m["outputs"].as_array().unwrap().len(), 4);
    let trace = fs::read_to_string(dir.path().join("gen/a.trace.tsv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 9);
    assert!(trace.starts_with("step\talignment\tblend\ttotal\tcenter"));

    let again = dir.path().join("again");
    ok(&["replay", s(&dir.path().join("gen/a.run.json")), "--out-dir", s(&again)]);
    for f in ["a.png", "a.init.png", "a.inrw", "a.trace.tsv"] {
        assert_eq!(
            fs::read(dir.path().join("gen").join(f)).unwrap(),
            fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn zero_steps_renders_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("z.png");
    generate(&out, &["--steps", "0"]);
    assert_eq!(fs::read(&out).unwrap(), fs::read(dir.path().join("z.init.png")).unwrap());
}

#[test]
fn no_flags_switch_every_component_off() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("n.png");
    generate(
        &out,
        &["--steps", "3", "--no-awp", "--no-procrustes", "--no-freq-schedule", "--no-blend", "--suffix", ", flat"],
    );
    let inv = &manifest(&dir.path().join("n.run.json"))["config"]["inversion"];
    for key in ["use_awp_init", "use_procrustes", "use_freq_schedule", "use_blend"] {
        assert_eq!(inv[key], false, "{key}");
    }
    assert_eq!(inv["prompt_suffix"], ", flat");
}

#[test]
fn config_file_is_applied_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# overrides\ninversion.steps = 2\ninversion.beta = 0.25\nseed = 11\n").unwrap();
    let out = dir.path().join("c.png");
    generate(&out, &["--config", s(&cfg), "--seed", "12"]);
    let m = manifest(&dir.path().join("c.run.json"));
    assert_eq!(m["config"]["inversion"]["steps"], 2);
    assert_eq!(m["config"]["inversion"]["beta"], 0.25);
    assert_eq!(m["seed"], 12);
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let sh = shared();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.png");
    let store = sh.store();
    let base = ["generate", "a red disc", "--store", s(&store), "--out", s(&out)];
    let with = |extra: &[&str]| {
        let args = cat(&[&base, extra]);
        code(&args.iter().map(String::as_str).collect::<Vec<_>>())
    };
    assert_eq!(with(&["--set", "inversion.stepz=1"]), 2);
    assert_eq!(with(&["--set", "inversion.schedule_centers=0"]), 2);
    // p larger than the five-entry store
    assert_eq!(with(&["--set", "inversion.procrustes_p=50", "--steps", "1"]), 2);
    let missing = dir.path().join("nowhere");
    assert_eq!(code(&["generate", "a red disc", "--store", s(&missing), "--out", s(&out)]), 2);
}

#[test]
fn numerical_failure_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.png");
    let sh = shared();
    let store = sh.store();
    let args = cat(&[
        &["generate", "a red disc", "--store", s(&store), "--out", s(&out), "--steps", "5"],
        INVERT,
        &["--set", "inversion.base_lr=1e300"],
    ]);
    assert_eq!(code(&args.iter().map(String::as_str).collect::<Vec<_>>()), 3);
}

#[test]
fn usage_errors_exit_with_code_one() {
    let sh = shared();
    let dir = tempfile::tempdir().unwrap();
    let content = sh.corpus().join("00.png");
    let out = dir.path().join("e.png");
    assert_eq!(code(&["edit", "--content", s(&content), "--out", s(&out)]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["generate", "p", "--store", "x", "--out", "y", "--set", "novalue"]), 1);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn tasks_run_from_the_command_line() {
    let sh = shared();
    let dir = tempfile::tempdir().unwrap();
    let content = sh.corpus().join("00.png");
    let style = sh.corpus().join("02.png");
    let store = sh.store();
    let common = cat(&[INVERT, TASK_FIT, &["--steps", "3"]]);
    let common: Vec<&str> = common.iter().map(String::as_str).collect();

    let rec = dir.path().join("rec.png");
    run_owned(cat(&[&["reconstruct", "--content", s(&content), "--out", s(&rec)], &common]));
    assert!(rec.exists() && dir.path().join("rec.trace.tsv").exists());

    let edit = dir.path().join("edit.png");
    run_owned(cat(&[
        &["edit", "--content", s(&content), "--prompt", "a green disc", "--store", s(&store), "--out", s(&edit)],
        &common,
    ]));
    assert_eq!(manifest(&dir.path().join("edit.run.json"))["command"], "edit");

    let same = dir.path().join("same.png");
    run_owned(cat(&[&["style", "--content", s(&content), "--style", s(&content), "--out", s(&same)], &common]));
    let styled = dir.path().join("styled.png");
    run_owned(cat(&[
        &["style", "--content", s(&content), "--style", s(&style), "--out", s(&styled), "--content-weight", "0.3"],
        &common,
    ]));
    let m = manifest(&dir.path().join("styled.run.json"));
    assert_eq!(m["config"]["content_weight"], 0.3);
    assert!(m["store_fingerprint"].is_null());
}

#[test]
fn ablation_table_has_five_rows_and_is_deterministic() {
    let sh = shared();
    let dir = tempfile::tempdir().unwrap();
    let prompts = dir.path().join("prompts.txt");
    fs::write(&prompts, "# one prompt\na red disc on a blue background\n").unwrap();
    let store = sh.store();
    let table = |name: &str| {
        let out = dir.path().join(name);
        run_owned(cat(&[
            &["ablate", s(&prompts), "--store", s(&store), "--out", s(&out), "--steps", "3"],
            INVERT,
        ]));
        fs::read_to_string(out).unwrap()
    };
    let first = table("a.tsv");
    let lines: Vec<&str> = first.lines().collect();
    assert_eq!(lines[0], "variant\tmean_clipsim\tmean_final_loss\truns\tfailures");
    assert_eq!(lines.len(), 6);
    assert!(lines[1].starts_with("i full\t") && lines[3].starts_with("iii no-awp\t"));
    assert_eq!(first, table("b.tsv"));
}

#[test]
fn empty_prompt_list_is_a_data_error() {
    let sh = shared();
    let dir = tempfile::tempdir().unwrap();
    let prompts = dir.path().join("p.txt");
    fs::write(&prompts, "\n# nothing\n").unwrap();
    let out = dir.path().join("t.tsv");
    assert_eq!(code(&["ablate", s(&prompts), "--store", s(&sh.store()), "--out", s(&out)]), 2);
}

/// Writes a text-only store the way an external exporter would: manifest
/// without entries, f32 embeddings (text then image), length-prefixed captions.
fn write_text_store(dir: &Path, captions: &[String], text: &[Vec<f32>], fingerprint: &str) {
    fs::create_dir_all(dir).unwrap();
    let d = text[0].len();
    let manifest = serde_json::json!({
        "format": "inrinv-store",
        "version": 1,
        "embed_dim": d,
        "encoder_fingerprint": fingerprint,
        "entry_count": captions.len(),
    });
    fs::write(dir.join("store.json"), manifest.to_string()).unwrap();
    let mut emb = Vec::new();
    for row in text.iter().chain(text.iter()) {
        for v in row {
            emb.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join("embeddings.bin"), emb).unwrap();
    let mut cap = Vec::new();
    for c in captions {
        cap.extend_from_slice(&(c.len() as u32).to_le_bytes());
        cap.extend_from_slice(c.as_bytes());
    }
    fs::write(dir.join("captions.bin"), cap).unwrap();
}

#[test]
fn precomputed_text_embeddings_replace_the_text_tower() {
    let sh = shared();
    let dir = tempfile::tempdir().unwrap();
    let h = EncoderHandle::toy();
    let captions: Vec<String> = (0..5)
        .map(|i| fs::read_to_string(sh.corpus().join(format!("{i:02}.txt"))).unwrap().trim().to_string())
        .collect();
    // unit vectors unrelated to the toy text tower
    let text: Vec<Vec<f32>> = (0..5)
        .map(|i| {
            let mut v = vec![0.0f32; h.embed_dim()];
            v[i * 3] = 0.6;
            v[i * 3 + 1] = -0.8;
            v
        })
        .collect();
    let texts = dir.path().join("texts");
    write_text_store(&texts, &captions, &text, h.fingerprint());
    let store = dir.path().join("store");
    run_owned(cat(&[
        &["prepare-dataset", s(&sh.corpus()), "--out", s(&store), "--text-embeddings", s(&texts)],
        PREPARE,
    ]));
    let built = load_store(&store).unwrap();
    for (i, e) in built.entries().iter().enumerate() {
        let want: Vec<f64> = text[i].iter().map(|&v| v as f64).collect();
        assert_eq!(e.text_embedding.values(), &want[..]);
        assert_eq!(e.caption, captions[i]);
    }
    let out = dir.path().join("g.png");
    run_owned(cat(&[
        &[
            "generate",
            &captions[1],
            "--store",
            s(&store),
            "--out",
            s(&out),
            "--steps",
            "2",
            "--text-embeddings",
            s(&texts),
        ],
        INVERT,
    ]));
    let missing = cat(&[
        &["generate", "an unseen caption", "--store", s(&store), "--out", s(&out), "--text-embeddings", s(&texts)],
        INVERT,
    ]);
    assert_eq!(code(&missing.iter().map(String::as_str).collect::<Vec<_>>()), 2);
}

#[test]
fn vit_encoder_without_text_tower_refuses_prompts() {
    let sh = shared();
    let vit = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/tiny_vit/encoder.manifest");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v.png");
    let store = sh.store();
    let args = [
        "generate",
        "a red disc",
        "--store",
        s(&store),
        "--out",
        s(&out),
        "--encoder",
        s(&vit),
        "--allow-mismatch",
    ];
    assert_eq!(code(&args), 2);
}
