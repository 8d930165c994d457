use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mixoe::metrics::DetectionReport;
use mixoe::splits::EnvironmentSpec;

const SMOKE: &str = r#"
seed = 2
[data]
dataset = "a"
n_ood = 2
n_splits = 2
[data.suite]
seed = 2
web_concepts = 4
web_per_concept = 20
contamination_per_dataset = 10
families = [
  { name = "a", n_classes = 6, train_per_class = 12, test_per_class = 6 },
  { name = "b", n_classes = 3, train_per_class = 12, test_per_class = 6 },
]
[model]
hidden = [16]
[standard]
epochs = 2
[standard.optimizer]
lr = 0.05
momentum = 0.9
weight_decay = 0.0005
[finetune]
epochs = 1
[finetune.objective]
kind = "mixoe"
alpha = 1.0
beta = 1.0
mode = "linear"
[evaluate]
scorers = ["msp", "energy"]
[evaluate.vis]
epochs = 2
lr = 0.01
momentum = 0.9
batch_size = 16
seed = 0
"#;

fn mixoe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixoe"))
        .args(args)
        .current_dir(dir)
        .env("MIXOE_OUTPUT_ROOT", dir.join("runs"))
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("smoke.toml");
    fs::write(&config, SMOKE).unwrap();
    (dir, config)
}

fn files_below(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    if let Ok(entries) = fs::read_dir(dir) {
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                out.extend(files_below(&p));
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn make_splits_writes_reloadable_manifests_and_refuses_to_overwrite() {
    let (dir, _) = setup();
    let suite = dir.path().join("suite.toml");
    fs::write(
        &suite,
        "seed = 1\nweb_concepts = 2\nweb_per_concept = 5\ncontamination_per_dataset = 1\n",
    )
    .unwrap();
    let args = [
        "make-splits",
        "--dataset",
        "fgvc-a",
        "--n-ood",
        "5",
        "--seed",
        "7",
        "--suite",
        suite.to_str().unwrap(),
        "--out",
        "splits",
    ];
    let stdout = ok(&mixoe(dir.path(), &args));
    let paths: Vec<&str> = stdout.lines().collect();
    assert_eq!(paths.len(), 3);
    for (i, p) in paths.iter().enumerate() {
        let spec = EnvironmentSpec::load(&dir.path().join(p)).unwrap();
        assert_eq!(spec.split_index, i as u32 + 1);
        assert_eq!(spec.fine_ood_classes.len(), 5);
        assert_eq!(spec.id_classes.len(), 25);
        assert_eq!(spec.seed, 7);
    }
    let before: Vec<String> = files_below(&dir.path().join("splits"))
        .iter()
        .map(|p| fs::read_to_string(p).unwrap())
        .collect();

    let again = mixoe(dir.path(), &args);
    assert_eq!(again.status.code(), Some(2));
    let mut forced = args.to_vec();
    forced.push("--force");
    ok(&mixoe(dir.path(), &forced));
    let after: Vec<String> = files_below(&dir.path().join("splits"))
        .iter()
        .map(|p| fs::read_to_string(p).unwrap())
        .collect();
    assert_eq!(before, after);
}

#[test]
fn run_and_manifest_replay_give_identical_reports() {
    let (dir, config) = setup();
    ok(&mixoe(
        dir.path(),
        &["run", "--config", config.to_str().unwrap(), "--out", "first"],
    ));
    let first = dir.path().join("first");
    for name in [
        "manifest.json",
        "reports/reports.csv",
        "checkpoints/standard.ckpt",
        "checkpoints/finetune.ckpt",
        "figures/figures.json",
    ] {
        assert!(first.join(name).exists(), "missing {name}");
    }
    let manifest = first.join("manifest.json");
    ok(&mixoe(
        dir.path(),
        &["run", "--manifest", manifest.to_str().unwrap(), "--out", "second"],
    ));
    let read = |root: &str| -> Vec<(PathBuf, Vec<u8>)> {
        let base = dir.path().join(root);
        files_below(&base.join("reports"))
            .into_iter()
            .chain(files_below(&base.join("figures")))
            .map(|p| (p.strip_prefix(&base).unwrap().to_path_buf(), fs::read(&p).unwrap()))
            .collect()
    };
    let a = read("first");
    assert!(a.len() >= 4);
    assert_eq!(a, read("second"));
}

#[test]
fn output_root_from_environment_when_no_out_given() {
    let (dir, config) = setup();
    ok(&mixoe(dir.path(), &["train", "--config", config.to_str().unwrap()]));
    assert!(dir.path().join("runs/smoke/checkpoints/standard.ckpt").exists());
}

#[test]
fn bad_arguments_exit_2_without_artifacts() {
    let (dir, config) = setup();
    let c = config.to_str().unwrap();
    let cases: [&[&str]; 6] = [
        &[
            "run",
            "--config",
            c,
            "--out",
            "x",
            "--objective",
            "mixoe",
            "--alpha",
            "-1",
        ],
        &["run", "--config", c, "--out", "x", "--objective", "bogus"],
        &["run", "--config", c, "--out", "x", "--scorer", "mahalanobis"],
        &["run", "--out", "x"],
        &["make-splits", "--dataset", "nope", "--n-ood", "2", "--out", "x"],
        &["train", "--config", c, "--out", "x", "--epochs", "0"],
    ];
    for args in cases {
        let out = mixoe(dir.path(), args);
        assert_eq!(
            out.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(!dir.path().join("x").exists(), "{args:?} left artifacts");
    }
    let missing = mixoe(dir.path(), &["train", "--config", "absent.toml", "--out", "x"]);
    assert_eq!(missing.status.code(), Some(3));
}

fn load_report(path: &Path) -> DetectionReport {
    DetectionReport::from_json(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn phase_commands_chain_and_report_aggregates() {
    let (dir, config) = setup();
    let c = config.to_str().unwrap();
    let ckpt = ok(&mixoe(dir.path(), &["train", "--config", c, "--out", "w"]));
    let ckpt = ckpt.trim();

    // OE with β = 0 is plain continued training on the same ID stream.
    ok(&mixoe(
        dir.path(),
        &[
            "finetune",
            "--config",
            c,
            "--out",
            "oe0",
            "--checkpoint",
            ckpt,
            "--objective",
            "oe",
            "--beta",
            "0",
        ],
    ));
    ok(&mixoe(
        dir.path(),
        &[
            "finetune",
            "--config",
            c,
            "--out",
            "std",
            "--checkpoint",
            ckpt,
            "--objective",
            "standard",
        ],
    ));
    for (root, flags) in [
        ("oe0", ["--objective", "oe", "--beta", "0"].as_slice()),
        ("std", &["--objective", "standard"]),
    ] {
        let ckpt = format!("{root}/checkpoints/finetune.ckpt");
        let mut args = vec![
            "evaluate",
            "--config",
            c,
            "--out",
            root,
            "--checkpoint",
            &ckpt,
            "--scorer",
            "msp",
        ];
        args.extend_from_slice(flags);
        ok(&mixoe(dir.path(), &args));
    }
    let a = load_report(&dir.path().join("oe0/reports/oe-msp.json"));
    let b = load_report(&dir.path().join("std/reports/standard-msp.json"));
    assert_eq!(
        (a.auroc_fine, a.auroc_coarse, a.id_accuracy),
        (b.auroc_fine, b.auroc_coarse, b.id_accuracy)
    );

    ok(&mixoe(
        dir.path(),
        &[
            "evaluate",
            "--config",
            c,
            "--out",
            "w",
            "--checkpoint",
            ckpt,
            "--scorer",
            "msp,odin",
        ],
    ));
    let table = ok(&mixoe(
        dir.path(),
        &["report", "--dir", "w", "--dir", "oe0", "--out", "tables"],
    ));
    assert!(table.contains("| Method | Split 1 | Avg. diff. |"));
    assert!(table.contains("| oe |"));
    for name in ["table_tnr95.md", "table_auroc.md", "tnr95_bars.svg"] {
        assert!(dir.path().join("tables").join(name).exists(), "missing {name}");
    }
}
