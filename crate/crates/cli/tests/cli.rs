use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--data.triage.images_per_class=20",
    "--data.pretrain.images_per_class=10",
    "--data.longitudinal.patients=20",
    "--data.triage.image_size=16",
    "--data.triage.roi_size=5",
    "--data.pretrain.image_size=16",
    "--data.pretrain.roi_size=5",
    "--data.longitudinal.image_size=16",
    "--pretrain.train.epochs=2",
    "--finetune.train.epochs=2",
    "--distill.train.epochs=2",
    "--traj.classifier.train.epochs=3",
];

fn ktd(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ktd"))
        .args(args)
        .env("KTD_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn small(root: &Path, command: &str) -> Output {
    let mut args = vec![command];
    args.extend_from_slice(SMALL);
    ktd(root, &args)
}

/// Run directory printed on the last stdout line.
fn run_dir(out: &Output) -> PathBuf {
    let stdout = String::from_utf8_lossy(&out.stdout);
    PathBuf::from(stdout.lines().last().expect("run directory line"))
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn pipeline(root: &Path) -> Vec<PathBuf> {
    ["synth", "pretrain", "finetune", "distill", "eval"]
        .iter()
        .map(|c| run_dir(&ok(small(root, c))))
        .collect()
}

#[test]
fn help_lists_every_config_key() {
    let out = ok(ktd(Path::new("unused"), &["--help"]));
    let help = String::from_utf8_lossy(&out.stdout);
    for key in [
        "--seed",
        "--output_root",
        "--inputs.rf",
        "--data.triage.images_per_class",
        "--data.longitudinal.trend_mix",
        "--teacher.channels",
        "--distill.loss.alpha",
        "--distill.loss.pc.xi",
        "--distill.baseline",
        "--traj.classifier.hidden",
        "--sweep.grid.alphas",
        "--sweep.grid.layout.mode",
        "--sweep.jobs",
        "--eval.checkpoint",
    ] {
        assert!(help.contains(key), "help lacks {key}");
    }
    for sub in ["synth", "pretrain", "finetune", "distill", "traj", "eval", "sweep", "complexity"] {
        assert!(help.contains(sub), "help lacks {sub}");
    }
}

#[test]
fn distill_before_finetune_is_a_stage_order_error() {
    let root = tempfile::tempdir().unwrap();
    ok(small(root.path(), "synth"));
    let out = small(root.path(), "distill");
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    let last = err.lines().last().unwrap();
    assert!(last.contains("stage order") && last.contains("ktd finetune"), "{last}");
}

#[test]
fn missing_data_names_the_synth_command() {
    let root = tempfile::tempdir().unwrap();
    let out = small(root.path(), "pretrain");
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ktd synth"));
}

#[test]
fn config_errors_exit_with_two() {
    let root = tempfile::tempdir().unwrap();
    let file = root.path().join("bad.toml");
    std::fs::write(&file, "[distill.loss]\nalpah = 0.5\n").unwrap();
    let out = ktd(root.path(), &["complexity", "--config", file.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpah"));

    for args in [
        &["complexity", "--distill.loss.alpha=1.5"][..],
        &["complexity", "--pretrain.train.epochs=abc"],
        &["complexity", "--no.such.key=1"],
    ] {
        assert_eq!(ktd(root.path(), args).status.code(), Some(2), "{args:?}");
    }
    // per-stage seeds follow the global one
    std::fs::write(&file, "[pretrain.train]\nseed = 4\n").unwrap();
    let out = ktd(root.path(), &["complexity", "--config", file.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    // nothing was written for rejected configs
    assert!(std::fs::read_dir(root.path()).unwrap().all(|e| e.unwrap().path() == file));
}

#[test]
fn flags_override_the_config_file() {
    let root = tempfile::tempdir().unwrap();
    let file = root.path().join("run.toml");
    std::fs::write(&file, "seed = 9\n[distill.loss]\nalpha = 0.4\ntemperature = 10.0\n").unwrap();
    let out = ok(ktd(
        root.path(),
        &["distill", "--config", file.to_str().unwrap(), "--distill.loss.alpha=0.6", "--print-config"],
    ));
    let resolved: toml::Table = toml::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
    let loss = &resolved["distill"]["loss"];
    assert_eq!(loss["alpha"].as_float(), Some(0.6));
    assert_eq!(loss["temperature"].as_float(), Some(10.0));
    assert_eq!(resolved["distill"]["train"]["seed"].as_integer(), Some(9));
    // integers are accepted for float keys
    let out = ok(ktd(root.path(), &["eval", "--distill.loss.temperature=2", "--print-config"]));
    assert!(String::from_utf8_lossy(&out.stdout).contains("temperature = 2.0"));
}

#[test]
fn full_pipeline_writes_run_directories_and_reports() {
    let root = tempfile::tempdir().unwrap();
    let dirs = pipeline(root.path());
    for (dir, cmd) in dirs.iter().zip(["synth", "pretrain", "finetune", "distill", "eval"]) {
        let name = dir.file_name().unwrap().to_str().unwrap();
        assert!(name.ends_with(&format!("-{cmd}-s0")), "{name}");
        assert!(dir.starts_with(root.path()));
        let echo: toml::Table = toml::from_str(&std::fs::read_to_string(dir.join("config.toml")).unwrap()).unwrap();
        assert_eq!(echo["pretrain"]["train"]["epochs"].as_integer(), Some(2));
        assert!(dir.join("log.txt").exists());
    }
    assert!(dirs[0].join("triage/manifest.csv").exists());
    assert!(dirs[0].join("triage/manifest.csv.provenance.json").exists());
    for (dir, stage) in [(&dirs[1], "ap"), (&dirs[2], "rf"), (&dirs[3], "ms")] {
        assert!(dir.join(format!("{stage}.ktdw")).exists());
        assert!(dir.join(format!("{stage}.spec.json")).exists());
    }
    let report = std::fs::read_to_string(dirs[4].join("report.json")).unwrap();
    let report = ktd_core::evalkit::EvalReport::from_json(&report).unwrap();
    assert_eq!(report.auroc.len(), 3);
    assert!(dirs[4].join("roc/covid_vs_normal.txt").exists());

    let traj = run_dir(&ok(small(root.path(), "traj")));
    let text = std::fs::read_to_string(traj.join("traj_report.json")).unwrap();
    assert!(text.contains("difference") && text.contains("concatenation"));
}

#[test]
fn identical_config_gives_identical_artifacts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (da, db) = (pipeline(a.path()), pipeline(b.path()));
    for (x, y, file) in [
        (&da[1], &db[1], "ap.ktdw"),
        (&da[2], &db[2], "rf.ktdw"),
        (&da[3], &db[3], "ms.ktdw"),
        (&da[4], &db[4], "report.json"),
    ] {
        assert_eq!(std::fs::read(x.join(file)).unwrap(), std::fs::read(y.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn baseline_distill_needs_no_teacher() {
    let root = tempfile::tempdir().unwrap();
    ok(small(root.path(), "synth"));
    let mut args = vec!["distill", "--distill.baseline=true"];
    args.extend_from_slice(SMALL);
    let dir = run_dir(&ok(ktd(root.path(), &args)));
    assert!(dir.join("ms.ktdw").exists());
}

#[test]
fn explicit_inputs_override_discovery() {
    let root = tempfile::tempdir().unwrap();
    let dirs = pipeline(root.path());
    let ms = dirs[3].join("ms.ktdw");
    let data = format!("--inputs.data={}", dirs[0].display());
    let ms_arg = format!("--inputs.ms={}", ms.display());
    let mut args = vec!["eval", data.as_str(), ms_arg.as_str()];
    args.extend_from_slice(SMALL);
    let out = ok(ktd(root.path(), &args));
    assert!(String::from_utf8_lossy(&out.stderr).contains(ms.to_str().unwrap()));

    let args = ["eval", "--inputs.ms=/nonexistent/ms.ktdw"];
    assert_eq!(ktd(root.path(), &args).status.code(), Some(3));
}

#[test]
fn sweep_emits_both_table_blocks() {
    let root = tempfile::tempdir().unwrap();
    pipeline(root.path());
    let mut args = vec!["sweep", "--sweep.grid.seeds=[0, 1]", "--sweep.train.epochs=1"];
    args.extend_from_slice(SMALL);
    let dir = run_dir(&ok(ktd(root.path(), &args)));
    let md = std::fs::read_to_string(dir.join("sweep.md")).unwrap();
    assert!(md.contains("T=5") && md.contains("alpha=0.8"), "{md}");
    let csv = std::fs::read_to_string(dir.join("per_seed.csv")).unwrap();
    // 6 (alpha, T) pairs x 4 losses x 2 seeds, one line per metric
    let accuracy_rows = csv.lines().filter(|l| l.contains(",accuracy,")).count();
    assert_eq!(accuracy_rows, 48);
}

#[test]
fn complexity_reports_all_three_networks() {
    let root = tempfile::tempdir().unwrap();
    let out = ok(ktd(root.path(), &["complexity"]));
    let table = String::from_utf8_lossy(&out.stdout);
    for name in ["ap", "rf", "ms", "rf/ms parameter ratio"] {
        assert!(table.contains(name), "{table}");
    }
    let dir = run_dir(&out);
    assert!(dir.join("complexity.json").exists());
}
