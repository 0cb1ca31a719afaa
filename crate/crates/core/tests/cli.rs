use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_fewshot-ot");

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

const SMALL: &[&str] = &[
    "--override",
    "synth.couples=4",
    "--override",
    "selected_few_shot=24",
    "--override",
    "selected_one_shot=12",
    "--override",
    "epochs_few_shot=2",
    "--override",
    "epochs_one_shot=1",
    "--override",
    "keep_embeddings=true",
];

#[test]
fn generate_writes_the_cohort_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &[
            "generate",
            "--out",
            "c.csv",
            "--seed",
            "3",
            "--override",
            "couples=5",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = fs::read_to_string(dir.path().join("c.csv")).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("couple_id,participant_id,hour_index,stress_raw,label,f0,"));
    assert!(header.ends_with(",f90"));
    let cohort =
        fewshot_ot::cohort::load_csv(&dir.path().join("c.csv"), Default::default()).unwrap();
    assert_eq!(cohort.couple_count(), 5);
}

#[test]
fn run_then_plot() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["run", "--out", "runs", "--seed", "1"];
    args.extend(SMALL);
    let out = run(&args, dir.path());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("Proposed"));

    let runs: Vec<_> = fs::read_dir(dir.path().join("runs"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(runs.len(), 1);
    let run_dir = &runs[0];
    let name = run_dir.file_name().unwrap().to_string_lossy().to_string();
    assert!(name.len() > 14 && name.ends_with('Z'), "{name}");
    for f in [
        "config.toml",
        "folds.csv",
        "pooled.csv",
        "summary.csv",
        "skipped.csv",
        "table.txt",
    ] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let folds = fs::read_to_string(run_dir.join("folds.csv")).unwrap();
    assert_eq!(
        folds.lines().next().unwrap(),
        "mode,variant,couple,seed,n_anchors,n_selected,n_test,f1_stress,f1_nostress,f1_macro"
    );

    let embedding = fs::read_dir(run_dir.join("embeddings"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.to_string_lossy().contains("few-shot_proposed"))
        .unwrap();
    let fold = embedding.file_stem().unwrap().to_string_lossy().to_string();
    let out = run(
        &["plot", run_dir.to_str().unwrap(), &fold, "--out", "plots"],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let pca = fs::read_to_string(dir.path().join("plots").join(format!("{fold}.pca.csv"))).unwrap();
    assert_eq!(pca.lines().next().unwrap(), "sample_id,group,pc1,pc2");
    for line in pca.lines().skip(1) {
        let group = line.split(',').nth(1).unwrap();
        assert!(
            fewshot_ot::evalharness::GROUP_NAMES.contains(&group),
            "{group}"
        );
    }
    let svg = fs::read_to_string(dir.path().join("plots").join(format!("{fold}.svg"))).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));

    let out = run(
        &["plot", run_dir.to_str().unwrap(), "no-such-fold"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn selfcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["selfcheck"], dir.path());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}");
    assert_eq!(
        stdout.lines().filter(|l| l.starts_with("PASS")).count(),
        4,
        "{stdout}"
    );
}

#[test]
fn config_file_and_bad_overrides() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[synth]\ncouples = \"many\"\n").unwrap();
    let out = run(&["generate", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["generate", "--override", "no_such_key=1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    let out = run(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["generate", "--config", "missing.toml"], dir.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn shipped_config_matches_the_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/default.toml");
    let cfg = fewshot_ot::cli::RunConfig::load(Some(&path), &[]).unwrap();
    assert_eq!(cfg, fewshot_ot::cli::RunConfig::default());
}
