//! Command implementations behind the `bmdgan` binary. Every command reads
//! one [`RunConfig`] and writes stable file names under the configured
//! directories.

use std::fs;
use std::path::{Path, PathBuf};

use crate::bmd::{fit_bmd_calibration, masked_average, predict_bmd, predict_pf_drr, BmdCalibration, CalibrationCase};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::imaging::{DatasetReader, PairStage, Split};
use crate::metrics::{baseline_summary, evaluate_run, write_plots, CasePrediction, CaseTruth};
use crate::phantom::generate_dataset;
use crate::train::{
    run_hierarchical, train_regression_baseline, train_stage, Checkpoint, RegressionCheckpoint, Stage, StageData,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const REPORT_FILE: &str = "report.json";
pub const BASELINE_FILE: &str = "baseline.bin";
pub const PLOTS_DIR: &str = "plots";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSelect {
    One,
    Two,
    All,
}

impl std::str::FromStr for StageSelect {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "1" => Ok(StageSelect::One),
            "2" => Ok(StageSelect::Two),
            "all" => Ok(StageSelect::All),
            other => Err(format!("stage must be 1, 2 or all, got `{other}`")),
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Default manifest location for a config.
pub fn manifest_path(config: &RunConfig) -> PathBuf {
    config.paths.data_dir.join(MANIFEST_FILE)
}

fn open_manifest(path: &Path) -> Result<DatasetReader> {
    if !path.is_file() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "manifest not found")));
    }
    let reader = DatasetReader::open(path)?;
    reader.manifest.validate(Some(reader.root()))?;
    Ok(reader)
}

/// Synthesizes the phantom dataset into `out_dir` (default `paths.data_dir`).
pub fn cmd_synth(config: &RunConfig, out_dir: Option<&Path>) -> Result<PathBuf> {
    let spec = config
        .phantom
        .as_ref()
        .ok_or_else(|| Error::Config("missing section `phantom` (required by synth)".into()))?;
    let dir = out_dir.unwrap_or(&config.paths.data_dir);
    create_dir(dir)?;
    let d = &config.dataset;
    generate_dataset(spec, d.n_cases, d.split_fraction, config.seeds.data, dir, d.canvas, &config.hash())?;
    Ok(dir.join(MANIFEST_FILE))
}

/// Trains the selected stage(s) and returns the written checkpoint paths.
/// `no_hl` (or `hierarchical = false`) trains stage 2 from scratch.
pub fn cmd_train(
    config: &RunConfig,
    manifest: &Path,
    stage: StageSelect,
    no_hl: bool,
    init: Option<&Path>,
) -> Result<Vec<PathBuf>> {
    let no_hl = no_hl || !config.hierarchical;
    if stage == StageSelect::Two && init.is_none() && !no_hl {
        return Err(Error::Config("--stage 2 needs --init <stage1 checkpoint> or --no-hl".into()));
    }
    if stage != StageSelect::Two && init.is_some() {
        return Err(Error::Config("--init only applies to --stage 2".into()));
    }
    let reader = open_manifest(manifest)?;
    let out = &config.paths.out_dir;
    create_dir(out)?;
    let setup = config.train_setup(Some(out.clone()));
    let (s1, s2) = (config.stage(Stage::Stage1), config.stage(Stage::Stage2));
    let path = |s: Stage| out.join(Checkpoint::file_name(s));

    match stage {
        StageSelect::One => {
            let d1 = StageData::from_reader(&reader, Stage::Stage1)?;
            train_stage(&s1, &setup, &d1, None, true)?;
            Ok(vec![path(Stage::Stage1)])
        }
        StageSelect::Two => {
            let d2 = StageData::from_reader(&reader, Stage::Stage2)?;
            let init_ck = init.map(Checkpoint::load).transpose()?;
            if let Some(ck) = &init_ck {
                if ck.meta.stage != Stage::Stage1 {
                    return Err(Error::Config("--init must be a stage1 checkpoint".into()));
                }
            }
            train_stage(&s2, &setup, &d2, init_ck.as_ref().map(|c| &c.generator), !no_hl)?;
            Ok(vec![path(Stage::Stage2)])
        }
        StageSelect::All => {
            let d1 = StageData::from_reader(&reader, Stage::Stage1)?;
            let d2 = StageData::from_reader(&reader, Stage::Stage2)?;
            let run = run_hierarchical(&s1, &s2, &setup, &d1, &d2, no_hl)?;
            let mut paths = Vec::new();
            if run.stage1.is_some() {
                paths.push(path(Stage::Stage1));
            }
            paths.push(path(Stage::Stage2));
            Ok(paths)
        }
    }
}

fn load_stage2(ckpt: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::load(ckpt)?;
    if ck.meta.stage != Stage::Stage2 {
        return Err(Error::Config(format!("{} is not a stage2 checkpoint", ckpt.display())));
    }
    Ok(ck)
}

/// Fits the PF-average → BMD lines on the TRAIN split only.
pub fn cmd_calibrate(config: &RunConfig, ckpt: &Path, manifest: &Path) -> Result<PathBuf> {
    let ck = load_stage2(ckpt)?;
    let reader = open_manifest(manifest)?;
    let m = &reader.manifest;
    let t = config.bmd.threshold_t;
    let mut cases = Vec::new();
    for (entry, pair) in reader.load_split(Split::Train, PairStage::Stage2Proximal)? {
        let drr = predict_pf_drr(&ck.generator, &pair.xray, m.xray_normalization, m.normalization)?;
        cases.push(CalibrationCase {
            pf_average: masked_average(&drr, t)?.value,
            true_dxa_bmd: entry.true_dxa_bmd,
            true_qct_bmd: entry.true_qct_bmd,
        });
    }
    let mut cal = fit_bmd_calibration(&cases, t)?;
    cal.config_hash = config.hash();
    create_dir(&config.paths.out_dir)?;
    let path = config.paths.out_dir.join(CALIBRATION_FILE);
    cal.write(&path)?;
    Ok(path)
}

/// Scores the TEST split and writes `report.json` plus `plots/*.png`.
pub fn cmd_evaluate(
    config: &RunConfig,
    ckpt: &Path,
    calibration: &Path,
    manifest: &Path,
    baseline: Option<&Path>,
) -> Result<PathBuf> {
    let ck = load_stage2(ckpt)?;
    let cal = BmdCalibration::read(calibration)?;
    let reader = open_manifest(manifest)?;
    let m = &reader.manifest;
    let mut test = reader.load_split(Split::Test, PairStage::Stage2Proximal)?;
    if test.is_empty() {
        return Err(Error::Config("TEST split is empty".into()));
    }
    test.sort_by(|a, b| a.0.id.cmp(&b.0.id));

    let (mut preds, mut truths) = (Vec::new(), Vec::new());
    for (entry, pair) in &test {
        let estimate = predict_bmd(
            &ck.generator,
            PairStage::Stage2Proximal,
            &pair.xray,
            &cal,
            m.xray_normalization,
            m.normalization,
            config.bmd.ref_mean,
            config.bmd.ref_sd,
        )?;
        let pred_drr = predict_pf_drr(&ck.generator, &pair.xray, m.xray_normalization, m.normalization)?;
        preds.push(CasePrediction { id: entry.id.clone(), pred_drr, estimate });
        truths.push(CaseTruth {
            id: entry.id.clone(),
            true_drr: pair.target.clone(),
            true_dxa_bmd: entry.true_dxa_bmd,
            true_qct_bmd: entry.true_qct_bmd,
        });
    }
    let mut report = evaluate_run(&preds, &truths, &config.eval, &config.hash())?;
    if let Some(b) = baseline {
        let reg = RegressionCheckpoint::load(b)?;
        let bp: Vec<f64> = test.iter().map(|(_, p)| reg.predict(&p.xray)).collect::<Result<_>>()?;
        let truth: Vec<f64> = test.iter().map(|(e, _)| e.true_dxa_bmd).collect();
        report.baseline = Some(baseline_summary(&bp, &truth)?);
    }
    let out = &config.paths.out_dir;
    create_dir(out)?;
    let path = out.join(REPORT_FILE);
    report.write(&path)?;
    write_plots(&report, &out.join(PLOTS_DIR))?;
    Ok(path)
}

/// Trains the direct x-ray → BMD regressor on the TRAIN split.
pub fn cmd_baseline(config: &RunConfig, manifest: &Path) -> Result<PathBuf> {
    let reader = open_manifest(manifest)?;
    let train = reader.load_split(Split::Train, PairStage::Stage2Proximal)?;
    let xrays: Vec<_> = train.iter().map(|(_, p)| p.xray.clone()).collect();
    let targets: Vec<f64> = train.iter().map(|(e, _)| e.true_dxa_bmd).collect();
    let ck = train_regression_baseline(
        &xrays,
        &targets,
        reader.manifest.xray_normalization,
        &config.baseline,
        &reader.manifest.hash(),
        &config.hash(),
    )?;
    create_dir(&config.paths.out_dir)?;
    let path = config.paths.out_dir.join(BASELINE_FILE);
    ck.save(&path)?;
    Ok(path)
}

