use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
preset = desk
canonical_dims = 12,12,12
patch_r = 4
scales = 6,4
d_c = 16
d_v = 64
enc_layers = 2
enc_hidden = 16
enc_heads = 2
head_hidden = 16
align_epochs = 2
bridge_epochs = 1
lm_width = 16
lm_layers = 1
lm_heads = 2
decoder_size = 16
eval_resolution = 16
";

fn run(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxelbridge"))
        .arg("--workdir")
        .arg(workdir)
        .args(["--config", "tiny.cfg"])
        .args(args)
        .env("VOXELBRIDGE_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(workdir: &Path, args: &[&str]) -> String {
    let out = run(workdir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn workdir() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("tiny.cfg"), TINY).unwrap();
    d
}

fn first_file(dir: &Path, ext: &str) -> String {
    let mut names: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(ext))
        .collect();
    names.sort();
    names.remove(0)
}

#[test]
fn full_pipeline_on_a_tiny_world() {
    let w = workdir();
    let p = w.path();
    ok(p, &["synth", "--out", "data", "--n-train", "6", "--n-test", "3", "--trials", "2", "--planted", "zebra"]);
    ok(p, &["preprocess", "--manifest", "data/train.jsonl", "--out", "pre/train"]);
    ok(p, &["preprocess", "--manifest", "data/test.jsonl", "--out", "pre/test", "--average-trials"]);
    ok(p, &["train-align", "--manifest", "pre/train/manifest.jsonl", "--out", "ck/enc"]);
    ok(p, &["train-bridge", "--encoder", "ck/enc", "--manifest", "pre/train/manifest.jsonl", "--stage", "1", "--kinds", "brief", "--out", "ck/b1"]);
    ok(p, &["train-bridge", "--encoder", "ck/enc", "--manifest", "pre/train/manifest.jsonl", "--stage", "2", "--kinds", "brief", "--init", "ck/b1", "--out", "ck/b2"]);

    let scan = format!("pre/test/{}", first_file(&p.join("pre/test"), ".npat"));
    ok(p, &["chat", "--encoder", "ck/enc", "--ckpt", "ck/b2", "--fmri", &scan, "--instruction", "Describe the image.", "--max-tokens", "8"]);
    let stim = first_file(&p.join("pre/test"), ".npat").split('_').next().unwrap().to_string();
    let img = format!("recon/{stim}.ppm");
    ok(p, &["reconstruct", "--fmri", &scan, "--encoder", "ck/enc", "--no-llm", "--beta", "0.5", "--seed", "7", "--out", &img]);
    let again = format!("recon2/{stim}.ppm");
    ok(p, &["reconstruct", "--fmri", &scan, "--encoder", "ck/enc", "--no-llm", "--beta", "0.5", "--seed", "7", "--out", &again]);
    assert_eq!(fs::read(p.join(&img)).unwrap(), fs::read(p.join(&again)).unwrap());

    let report = ok(p, &["evaluate", "--recon", "recon", "--truth", "data/targets", "--metrics", "pixcorr,ssim", "--out", "report.json"]);
    assert!(report.contains("pixcorr"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["protocol"]["n_items"], 1);

    let vol = format!("data/volumes/{}", first_file(&p.join("data/volumes"), ".nvol"));
    ok(p, &["localize", "--concept", "zebra", "--fmri", &vol, "--mask", "data/mask.nvol", "--ckpt", "ck/enc", "--layer", "1", "--out", "heat.nvol"]);
    assert!(p.join("heat.meta.json").is_file());
    assert!(p.join("heat.ppm").is_file());
    ok(p, &["nullify", "--heat", "heat.nvol", "--tau", "90", "--in", &vol, "--out", "vol0.nvol"]);
    ok(p, &["embed", "--kind", "text_embedding", "--text", "zebra", "--out", "zebra.f32"]);
    assert_eq!(fs::metadata(p.join("zebra.f32")).unwrap().len() % 4, 0);

    let runs: Vec<_> = fs::read_dir(p.join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 13, "one run directory per invocation");
    let rec: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("runs/0001-synth/run.json")).unwrap()).unwrap();
    assert_eq!(rec["status"], "ok");
    assert_eq!(rec["seed"], 7);
    assert!(rec["config"].as_str().unwrap().contains("preset = desk"));
    assert!(rec["wall_time_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn caption_metrics_from_tsv() {
    let w = workdir();
    let p = w.path();
    fs::write(p.join("cand.tsv"), "a\tthe cat sat\nb\ta red boat\n").unwrap();
    fs::write(p.join("refs.tsv"), "a\tthe cat sat\nb\ta blue boat\nb\ta red boat on water\n").unwrap();
    ok(p, &["evaluate", "--metrics", "bleu,rouge", "--candidates", "cand.tsv", "--references", "refs.tsv", "--out", "text.json"]);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("text.json")).unwrap()).unwrap();
    assert_eq!(json["metrics"]["bleu1"]["per_sample"][0], 1.0);
    assert_eq!(json["metrics"]["rouge_l"]["per_sample"][0], 1.0);
}

#[test]
fn usage_errors_exit_two() {
    let w = workdir();
    let out = run(w.path(), &["synth"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(w.path(), &["reconstruct", "--fmri", "a", "--encoder", "b", "--out", "c"]);
    assert_eq!(out.status.code(), Some(2), "needs --bridge or --no-llm");
    let out = run(w.path(), &["train-bridge", "--encoder", "e", "--manifest", "m", "--stage", "3", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
}

fn error_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr)
        .lines()
        .find(|l| l.starts_with("error["))
        .unwrap_or_default()
        .to_string()
}

#[test]
fn failures_report_a_category() {
    let w = workdir();
    let p = w.path();
    let out = run(p, &["nullify", "--heat", "missing.nvol", "--in", "x.nvol", "--out", "y.nvol"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_line(&out).starts_with("error[io]:"), "{}", error_line(&out));

    fs::write(p.join("bad.nvol"), b"not a volume").unwrap();
    let out = run(p, &["nullify", "--heat", "bad.nvol", "--in", "bad.nvol", "--out", "y.nvol"]);
    assert!(error_line(&out).starts_with("error[format]:"), "{}", error_line(&out));

    let out = run(p, &["--set", "beta=2", "embed", "--kind", "text_embedding", "--text", "a", "--out", "e"]);
    assert!(error_line(&out).starts_with("error[config]:"));

    let out = run(p, &["embed", "--kind", "sound", "--text", "a", "--out", "e"]);
    assert!(error_line(&out).starts_with("error[invalid]:"));

    let out = run(p, &["--set", "decoder=external:/nonexistent", "embed", "--kind", "text_embedding", "--text", "a", "--out", "e"]);
    assert!(out.status.success(), "unused components are not checked");
    let out = run(p, &["--set", "text_embedder=external:/nonexistent", "embed", "--kind", "text_embedding", "--text", "a", "--out", "e"]);
    assert!(error_line(&out).starts_with("error[capability]:"));

    let failed = fs::read_dir(p.join("runs"))
        .unwrap()
        .map(|e| e.unwrap().path().join("run.json"))
        .filter(|f| fs::read_to_string(f).unwrap().contains("\"status\": \"error\""))
        .count();
    assert_eq!(failed, 4, "errors after config loading are logged");
}

#[test]
fn repro_subset_and_determinism() {
    let w = workdir();
    let p = w.path();
    let first = ok(p, &["repro", "--seed", "7", "--criteria", "1,8,9"]);
    assert!(first.contains("criterion 1 [PASS]"));
    assert!(first.contains("criterion 8 [PASS]"));
    assert!(first.contains("criterion 9 [SKIP]"));
    assert!(first.contains("deviations from the published setup"));
    let second = ok(p, &["repro", "--seed", "7", "--criteria", "1,8,9"]);
    assert!(second.contains("criterion 9 [PASS]"), "{second}");
    let twice = ok(p, &["repro", "--seed", "3", "--criteria", "8,9", "--twice"]);
    assert!(twice.contains("criterion 9 [PASS]"), "{twice}");
}

#[test]
fn run_directories_are_never_reused() {
    let w = workdir();
    let p = w.path();
    fs::create_dir_all(p.join("runs/0005-synth")).unwrap();
    ok(p, &["embed", "--kind", "text_embedding", "--text", "a", "--out", "e"]);
    assert!(p.join("runs/0006-embed/run.json").is_file());
    assert!(!p.join("runs/0005-synth/run.json").exists());
}
