use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mmig::datasets::{load_dataset, save_dataset};
use mmig::decoder::{load_generations, save_generations, GeneratedText, GenerationRecord};
use mmig::training::Checkpoint;

fn mmig(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmig"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mmig(args);
    assert!(
        out.status.success(),
        "mmig {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const SMALL: &str = r#"
seed = 5

[paths]
data_dir = "data"
checkpoint_dir = "ckpt"

[model]
d_model = 16
num_queries = 2
qformer_layers = 1
qformer_heads = 2
ffn_mult = 2
d_dec = 16
lm_layers = 1
lm_heads = 2
max_len = 24

[pretrain_lm]
epochs = 2

[tqpp]
epochs = 1

[pdmp]
epochs = 2

[hccp]
epochs = 1
batch_size = 4
beam_size = 2
"#;

/// A small dataset and config under a fresh directory.
fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, SMALL).unwrap();
    ok(&["gen-data", "--config", s(&config), "--n", "12"]);
    (dir, config)
}

#[test]
fn gen_data_is_deterministic_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let stdout = ok(&["gen-data", "--n", "20", "--seed", "3", "--out", s(&a)]);
    assert!(stdout.contains("train 16, val 2, test 2"), "{stdout}");
    ok(&["gen-data", "--n", "20", "--seed", "3", "--out", s(&b)]);
    let ta = tree(&a);
    assert_eq!(ta, tree(&b));
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "features/manifest.json", "scenes/scene00000.json"] {
        assert!(ta.iter().any(|(p, _)| p == Path::new(f)), "missing {f}");
    }
    // 40 images plus the manifest.
    assert_eq!(ta.iter().filter(|(p, _)| p.starts_with("features")).count(), 41);
}

#[test]
fn gen_data_into_unwritable_location_fails() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = mmig(&["gen-data", "--n", "4", "--out", s(&blocker.join("sub"))]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}

#[test]
fn stages_require_their_prerequisites() {
    let (dir, config) = workspace();
    for (stage, needs) in [("hccp", "pdmp"), ("pdmp", "tqpp")] {
        let out = mmig(&["train", "--stage", stage, "--config", s(&config)]);
        assert!(!out.status.success());
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("missing prerequisite") && err.contains(needs), "{err}");
    }
    assert!(!dir.path().join("ckpt").join("hccp.ckpt.json").exists());

    let out = mmig(&["train", "--stage", "warmup", "--config", s(&config)]);
    assert!(!out.status.success());
}

#[test]
fn full_pipeline_through_the_binary() {
    let (dir, config) = workspace();
    let root = dir.path();
    let ckpt = root.join("ckpt");
    for stage in ["pretrain-lm", "tqpp", "pdmp", "hccp"] {
        let stdout = ok(&["train", "--stage", stage, "--config", s(&config)]);
        assert!(stdout.contains(&format!("{stage}.ckpt.json")), "{stdout}");
        let mut files: Vec<String> = fs::read_dir(&ckpt)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| n.starts_with(&format!("{stage}.")))
            .collect();
        files.sort();
        assert_eq!(files, [format!("{stage}.ckpt.json"), format!("{stage}.log.jsonl")]);
    }
    let hccp = Checkpoint::load(&ckpt.join("hccp.ckpt.json")).unwrap();
    assert_eq!(hccp.completed_stages.len(), 4);
    let run = mmig::pipeline::RunConfig::load(&config).unwrap();
    assert_eq!(hccp.config_hash, run.hash());

    // Generation: deterministic, covers every sample, beam 1 is greedy.
    let data = root.join("data");
    let train = data.join("train.jsonl");
    let pdmp = ckpt.join("pdmp.ckpt.json");
    let (g1, g2, g3) = (root.join("g1.jsonl"), root.join("g2.jsonl"), root.join("g3.jsonl"));
    ok(&["generate", "--checkpoint", s(&pdmp), "--dataset", s(&train), "--beam-size", "3", "--out", s(&g1)]);
    ok(&["generate", "--checkpoint", s(&pdmp), "--dataset", s(&train), "--beam-size", "3", "--out", s(&g2)]);
    assert_eq!(fs::read(&g1).unwrap(), fs::read(&g2).unwrap());
    let pairs = load_dataset(&train).unwrap();
    let records = load_generations(&g1).unwrap();
    assert_eq!(records.len(), pairs.len());
    assert!(records.iter().zip(&pairs).all(|(r, p)| r.sample_id == p.sample_id && !r.candidates.is_empty()));
    assert!(records.iter().all(|r| r.config_hash == run.hash() && r.stage == "pdmp"));

    ok(&["generate", "--checkpoint", s(&pdmp), "--dataset", s(&train), "--beam-size", "1", "--out", s(&g3)]);
    let model = Checkpoint::load(&pdmp).unwrap().to_model().unwrap();
    let data_ctx = mmig::pipeline::DataContext::open(&data).unwrap();
    let samples = data_ctx.samples(&pairs).unwrap();
    for (r, sample) in load_generations(&g3).unwrap().iter().zip(&samples) {
        assert_eq!(r.candidates.len(), 1);
        assert_eq!(r.candidates[0].text, model.greedy(&sample.target, &sample.receptacle).unwrap().text);
    }

    // Evaluation report mirrors the printed numbers.
    let report = root.join("reports/eval.json");
    let stdout = ok(&["evaluate", "--dataset", s(&train), "--generations", s(&g1), "--out", s(&report)]);
    let json: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    for key in ["cider_d", "bleu4", "stub_target", "stub_receptacle"] {
        let printed = stdout
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{key} = ")))
            .unwrap_or_else(|| panic!("{key} not printed: {stdout}"));
        assert_eq!(printed.parse::<f64>().unwrap(), json[key].as_f64().unwrap(), "{key}");
    }
    assert_eq!(json["config_hash"], run.hash());
    assert_eq!(json["per_sample"].as_array().unwrap().len(), pairs.len());

    // Augmentation: stable, one sentence per pair, usable as training data.
    let (a1, a2) = (root.join("aug1.jsonl"), root.join("aug2.jsonl"));
    ok(&["augment", "--checkpoint", s(&pdmp), "--dataset", s(&train), "--out", s(&a1), "--beam-size", "2"]);
    ok(&["augment", "--checkpoint", s(&pdmp), "--dataset", s(&train), "--out", s(&a2), "--beam-size", "2"]);
    assert_eq!(fs::read(&a1).unwrap(), fs::read(&a2).unwrap());
    let aug = load_dataset(&a1).unwrap();
    assert_eq!(aug.len(), pairs.len());
    assert!(aug.iter().all(|p| p.references.len() == 1 && p.sample_id.ends_with("-aug")));
    ok(&[
        "train",
        "--stage",
        "pretrain-lm",
        "--config",
        s(&config),
        "--checkpoint-dir",
        s(&root.join("ckpt_aug")),
        "--train-extra",
        s(&a1),
    ]);
}

#[test]
fn evaluate_scores_references_perfectly_and_reports_gaps() {
    let (dir, _) = workspace();
    let root = dir.path();
    let mut pairs = load_dataset(&root.join("data/train.jsonl")).unwrap();
    for p in &mut pairs {
        p.references.truncate(1);
    }
    let dataset = root.join("data/single.jsonl");
    save_dataset(&pairs, &dataset).unwrap();
    let records: Vec<GenerationRecord> = pairs
        .iter()
        .map(|p| GenerationRecord {
            sample_id: p.sample_id.clone(),
            candidates: vec![GeneratedText {
                text: p.references[0].clone(),
                total_logprob: 0.0,
            }],
            stage: "reference".into(),
            checkpoint: String::new(),
            config_hash: "h".into(),
        })
        .collect();
    let gens = root.join("refs.jsonl");
    save_generations(&records, &gens).unwrap();
    let stdout = ok(&["evaluate", "--dataset", s(&dataset), "--generations", s(&gens), "--out", s(&root.join("r.json"))]);
    assert!(stdout.contains("cider_d = 10\n"), "{stdout}");
    assert!(stdout.contains("bleu4 = 1\n"), "{stdout}");

    let missing = records[3].sample_id.clone();
    save_generations(&[&records[..3], &records[4..]].concat(), &gens).unwrap();
    let out = mmig(&["evaluate", "--dataset", s(&dataset), "--generations", s(&gens), "--out", s(&root.join("r2.json"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(&missing));
    assert!(!root.join("r2.json").exists());
}
