use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bmdgan::imaging::{DatasetManifest, Split};
use bmdgan::metrics::{mae, pcc, EvaluationReport};
use bmdgan::train::{sidecar_path, CheckpointMeta, Stage};

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Run {
    fn new(extra: &str) -> Run {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let base = [
            ("[dataset]", "n_cases = 15"),
            ("[generator]", "base_channels = 8\nn_res_blocks = 1\nnorm_groups = 4"),
            ("[discriminator]", "base_channels = 8\nnorm_groups = 4"),
            ("[stage1]", "epochs = 1"),
            ("[stage2]", "epochs = 1"),
            ("[baseline]", "epochs = 1"),
        ];
        // Sections given in `extra` replace the defaults above.
        let mut text = format!("{extra}\n");
        for (header, body) in base {
            if !extra.contains(header) {
                text.push_str(&format!("{header}\n{body}\n"));
            }
        }
        text.push_str(&format!(
            "[paths]\ndata_dir = \"{}\"\nout_dir = \"{}\"\n",
            root.join("data").display(),
            root.join("out").display()
        ));
        let config = root.join("run.toml");
        fs::write(&config, text).unwrap();
        Run { _dir: dir, root, config }
    }

    fn with_phantom() -> Run {
        Run::new("[phantom]\nmirror = true")
    }

    fn bmdgan(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_bmdgan")).arg("--config").arg(&self.config).args(args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.bmdgan(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn out(&self, name: &str) -> PathBuf {
        self.root.join("out").join(name)
    }

    fn data(&self, name: &str) -> PathBuf {
        self.root.join("data").join(name)
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn sidecar_stage(ckpt: &Path) -> Stage {
    let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(sidecar_path(ckpt)).unwrap()).unwrap();
    meta.stage
}

#[test]
fn synth_without_phantom_section_names_the_key() {
    let run = Run::new("");
    let out = run.bmdgan(&["synth"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("phantom"));
}

#[test]
fn unknown_key_exits_2_with_suggestion() {
    let run = Run::new("[loss]\nlamda_l1 = 5.0");
    let out = run.bmdgan(&["synth"]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("lambda_l1") && err.contains("line 2"), "{err}");
}

#[test]
fn missing_config_file_is_io_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_bmdgan")).args(["--config", "/nonexistent/run.toml", "synth"]).output().unwrap();
    assert_eq!(code(&out), 3);
}

#[test]
fn synth_rerun_is_byte_identical() {
    let run = Run::with_phantom();
    run.ok(&["synth"]);
    let first = fs::read(run.data("manifest.json")).unwrap();
    let xray = fs::read(run.data("images/case0003_xray.bdr")).unwrap();
    run.ok(&["synth"]);
    assert_eq!(first, fs::read(run.data("manifest.json")).unwrap());
    assert_eq!(xray, fs::read(run.data("images/case0003_xray.bdr")).unwrap());
    let m = DatasetManifest::read(run.data("manifest.json")).unwrap();
    assert_eq!(m.entries_in(Split::Train).count(), 12);
    assert_eq!(m.entries_in(Split::Test).count(), 3);
    assert!(!m.config_hash.is_empty());
}

#[test]
fn stage_two_needs_init_or_no_hl() {
    let run = Run::with_phantom();
    run.ok(&["synth"]);
    assert_eq!(code(&run.bmdgan(&["train", "--stage", "2"])), 2);
    let bad = run.bmdgan(&["train", "--stage", "3"]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn train_before_synth_is_io_error() {
    let run = Run::with_phantom();
    assert_eq!(code(&run.bmdgan(&["train"])), 3);
}

#[test]
fn staged_training_writes_checkpoints_with_sidecars() {
    let run = Run::with_phantom();
    run.ok(&["synth"]);
    let printed = run.ok(&["train", "--stage", "all"]);
    assert_eq!(printed.lines().count(), 2);
    assert_eq!(sidecar_stage(&run.out("ckpt_stage1.bin")), Stage::Stage1);
    assert_eq!(sidecar_stage(&run.out("ckpt_stage2.bin")), Stage::Stage2);
    assert!(run.out("train_log.jsonl").exists());

    // Separate invocations: stage 1, then stage 2 warm-started from it.
    let s1 = run.out("ckpt_stage1.bin");
    let s1_s = s1.to_str().unwrap();
    assert_eq!(code(&run.bmdgan(&["train", "--stage", "2", "--init", run.out("ckpt_stage2.bin").to_str().unwrap()])), 2);
    run.ok(&["train", "--stage", "2", "--init", s1_s]);
    let meta: CheckpointMeta =
        serde_json::from_str(&fs::read_to_string(sidecar_path(&run.out("ckpt_stage2.bin"))).unwrap()).unwrap();
    assert!(meta.warm_started);
}

#[test]
fn calibration_never_reads_test_split_and_evaluation_does() {
    let run = Run::with_phantom();
    run.ok(&["synth"]);
    run.ok(&["train", "--no-hl"]);
    assert!(!run.out("ckpt_stage1.bin").exists());
    let ck = run.out("ckpt_stage2.bin");
    let ck_s = ck.to_str().unwrap();

    let m = DatasetManifest::read(run.data("manifest.json")).unwrap();
    let hidden = run.root.join("hidden");
    fs::create_dir_all(&hidden).unwrap();
    let test_files: Vec<String> = m
        .entries_in(Split::Test)
        .flat_map(|e| [e.xray_path.clone(), e.target_stage1_path.clone(), e.target_stage2_path.clone()])
        .collect();
    for (i, f) in test_files.iter().enumerate() {
        fs::rename(run.data(f), hidden.join(i.to_string())).unwrap();
    }
    // Manifest validation only checks presence, so restore empty placeholders.
    for f in &test_files {
        fs::write(run.data(f), b"").unwrap();
    }
    run.ok(&["calibrate", "--ckpt", ck_s]);
    let first = fs::read(run.out("calibration.json")).unwrap();
    run.ok(&["calibrate", "--ckpt", ck_s]);
    assert_eq!(first, fs::read(run.out("calibration.json")).unwrap());

    let cal = run.out("calibration.json");
    let out = run.bmdgan(&["evaluate", "--ckpt", ck_s, "--calibration", cal.to_str().unwrap()]);
    assert_ne!(code(&out), 0, "evaluation must read the test images");
}

#[test]
fn evaluation_report_matches_recomputation_and_writes_plots() {
    let run = Run::with_phantom();
    run.ok(&["synth"]);
    run.ok(&["train"]);
    let ck = run.out("ckpt_stage2.bin");
    run.ok(&["calibrate", "--ckpt", ck.to_str().unwrap()]);
    run.ok(&["baseline"]);
    let cal = run.out("calibration.json");
    let base = run.out("baseline.bin");
    run.ok(&["evaluate", "--ckpt", ck.to_str().unwrap(), "--calibration", cal.to_str().unwrap(), "--baseline", base.to_str().unwrap()]);

    let r = EvaluationReport::read(run.out("report.json")).unwrap();
    assert_eq!(r.n_cases, 3);
    let (p, t) = (r.predicted_dxa(), r.true_dxa());
    assert!((r.mae - mae(&p, &t).unwrap()).abs() < 1e-12);
    if let Some(v) = r.pcc {
        assert!((v - pcc(&p, &t).unwrap()).abs() < 1e-12);
    }
    let psnr_mean = r.per_case_records.iter().map(|c| c.psnr).sum::<f64>() / 3.0;
    assert!((r.psnr_mean - psnr_mean).abs() < 1e-9);
    let dice_mean = r.per_case_records.iter().map(|c| c.dice).sum::<f64>() / 3.0;
    assert!((r.dice_mean - dice_mean).abs() < 1e-9);
    for rec in &r.per_case_records {
        assert!(((rec.predicted_dxa_bmd - 0.875) / 0.1 - rec.t_score).abs() < 1e-9);
    }
    let b = r.baseline.as_ref().expect("baseline columns");
    assert_eq!(b.predictions.len(), 3);
    assert!(!r.config_hash.is_empty());
    for f in ["scatter.png", "abs_error_box.png", "dice_bars.png"] {
        let bytes = fs::read(run.out("plots").join(f)).unwrap();
        assert_eq!(&bytes[..4], b"\x89PNG");
    }
}

#[test]
fn degenerate_calibration_exits_5() {
    let run = Run::new("[phantom]\nmirror = true\n[bmd]\nthreshold_t = 1e12");
    run.ok(&["synth"]);
    run.ok(&["train", "--no-hl"]);
    let out = run.bmdgan(&["calibrate", "--ckpt", run.out("ckpt_stage2.bin").to_str().unwrap()]);
    assert_eq!(code(&out), 5, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn divergence_exits_4() {
    let run = Run::new("[phantom]\nmirror = true\n[stage2]\nlr_initial = 1e300\nepochs = 2");
    run.ok(&["synth"]);
    let out = run.bmdgan(&["train", "--no-hl"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}
