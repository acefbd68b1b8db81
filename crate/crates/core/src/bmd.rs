//! BMD from a proximal-femur projection: thresholded mean intensity, linear
//! calibration against reference BMD, T-score.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{
    from_normalized, to_normalized, Image2D, IntensityUnit, LinearModel, Normalization, PairStage,
};
use crate::models::{generator_forward, Generator};

pub const DEFAULT_THRESHOLD: f64 = 1000.0;
pub const REF_MEAN: f64 = 0.875;
pub const REF_SD: f64 = 0.100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedAverage {
    pub value: f64,
    pub pixels: usize,
    /// No pixel reached the threshold; `value` is 0.
    pub degenerate: bool,
}

/// Mean of the pixels `≥ t`. An empty selection gives 0 flagged degenerate.
pub fn masked_average(drr: &Image2D, t: f64) -> Result<MaskedAverage> {
    if drr.unit() == IntensityUnit::Normalized {
        return Err(Error::invalid("masked_average needs quantitative intensities, got NORMALIZED"));
    }
    let (mut sum, mut n) = (0.0f64, 0usize);
    for &p in drr.pixels() {
        let p = p as f64;
        if p >= t {
            sum += p;
            n += 1;
        }
    }
    Ok(if n == 0 {
        MaskedAverage { value: 0.0, pixels: 0, degenerate: true }
    } else {
        MaskedAverage { value: sum / n as f64, pixels: n, degenerate: false }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BmdCalibration {
    pub dxa_model: LinearModel,
    pub qct_model: LinearModel,
    pub threshold_t: f64,
    #[serde(default)]
    pub config_hash: String,
}

impl BmdCalibration {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("calibration serializes");
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// One training observation: (PF average, reference DXA BMD, reference QCT BMD).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationCase {
    pub pf_average: f64,
    pub true_dxa_bmd: f64,
    pub true_qct_bmd: f64,
}

/// Independent least-squares lines average → DXA and average → QCT.
pub fn fit_bmd_calibration(cases: &[CalibrationCase], threshold_t: f64) -> Result<BmdCalibration> {
    let avg: Vec<f64> = cases.iter().map(|c| c.pf_average).collect();
    let dxa: Vec<f64> = cases.iter().map(|c| c.true_dxa_bmd).collect();
    let qct: Vec<f64> = cases.iter().map(|c| c.true_qct_bmd).collect();
    Ok(BmdCalibration {
        dxa_model: LinearModel::fit(&avg, &dxa)?,
        qct_model: LinearModel::fit(&avg, &qct)?,
        threshold_t,
        config_hash: String::new(),
    })
}

/// `(bmd − ref_mean) / ref_sd`.
pub fn t_score(bmd: f64, ref_mean: f64, ref_sd: f64) -> Result<f64> {
    if !(ref_sd > 0.0) {
        return Err(Error::invalid(format!("reference sd must be > 0, got {ref_sd}")));
    }
    Ok((bmd - ref_mean) / ref_sd)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BmdEstimate {
    pub pf_average: f64,
    pub predicted_dxa_bmd: f64,
    pub predicted_qct_bmd: f64,
    pub t_score: f64,
    pub degenerate: bool,
}

/// Applies the calibration to a quantitative proximal-femur projection.
pub fn estimate_from_drr(
    drr: &Image2D,
    calibration: &BmdCalibration,
    ref_mean: f64,
    ref_sd: f64,
) -> Result<BmdEstimate> {
    let avg = masked_average(drr, calibration.threshold_t)?;
    let dxa = calibration.dxa_model.predict(avg.value);
    Ok(BmdEstimate {
        pf_average: avg.value,
        predicted_dxa_bmd: dxa,
        predicted_qct_bmd: calibration.qct_model.predict(avg.value),
        t_score: t_score(dxa, ref_mean, ref_sd)?,
        degenerate: avg.degenerate,
    })
}

/// Normalizes a canvas x-ray, decomposes it and denormalizes the predicted
/// proximal-femur projection.
pub fn predict_pf_drr(
    generator: &Generator,
    xray: &Image2D,
    xray_norm: Normalization,
    target_norm: Normalization,
) -> Result<Image2D> {
    let x = to_normalized(xray, xray_norm.scale, xray_norm.offset)?;
    let y = generator_forward(generator, &x)?;
    from_normalized(&y, target_norm.scale, target_norm.offset, IntensityUnit::DensityLineIntegral)
}

/// Full x-ray → BMD pipeline. `stage` is the stage the generator was trained
/// for and must be the proximal-femur stage.
#[allow(clippy::too_many_arguments)]
pub fn predict_bmd(
    generator: &Generator,
    stage: PairStage,
    xray: &Image2D,
    calibration: &BmdCalibration,
    xray_norm: Normalization,
    target_norm: Normalization,
    ref_mean: f64,
    ref_sd: f64,
) -> Result<BmdEstimate> {
    if stage != PairStage::Stage2Proximal {
        return Err(Error::invalid("BMD prediction needs a proximal-femur (stage 2) generator"));
    }
    let drr = predict_pf_drr(generator, xray, xray_norm, target_norm)?;
    estimate_from_drr(&drr, calibration, ref_mean, ref_sd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_generator, GeneratorConfig};

    fn img(px: &[f32]) -> Image2D {
        Image2D::new(px.len(), 1, px.to_vec(), IntensityUnit::DensityLineIntegral).unwrap()
    }

    #[test]
    fn masked_average_cases() {
        let a = masked_average(&img(&[900.0, 1000.0, 1100.0]), 1000.0).unwrap();
        assert_eq!((a.value, a.pixels, a.degenerate), (1050.0, 2, false));
        let a = masked_average(&img(&[1.0, 2.0]), 1000.0).unwrap();
        assert_eq!((a.value, a.degenerate), (0.0, true));
        let a = masked_average(&img(&[1.0, 2.0, 6.0]), f64::NEG_INFINITY).unwrap();
        assert_eq!(a.value, 3.0);
        let n = Image2D::filled(2, 2, 0.5, IntensityUnit::Normalized).unwrap();
        assert!(matches!(masked_average(&n, 0.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn masked_average_not_below_threshold() {
        let px: Vec<f32> = (0..200).map(|i| (i * 37 % 101) as f32 * 25.0).collect();
        let im = img(&px);
        for t in [0.0, 500.0, 1000.0, 1777.0, 2400.0] {
            let a = masked_average(&im, t).unwrap();
            if !a.degenerate {
                assert!(a.value >= t);
            }
        }
    }

    #[test]
    fn t_score_values() {
        assert_eq!(t_score(0.875, REF_MEAN, REF_SD).unwrap(), 0.0);
        assert!((t_score(0.775, REF_MEAN, REF_SD).unwrap() + 1.0).abs() < 1e-12);
        assert!((t_score(1.075, REF_MEAN, REF_SD).unwrap() - 2.0).abs() < 1e-12);
        assert!(t_score(1.0, 0.875, 0.0).is_err());
        let (a, b) = (t_score(0.5, REF_MEAN, REF_SD).unwrap(), t_score(0.6, REF_MEAN, REF_SD).unwrap());
        assert!(b > a);
    }

    #[test]
    fn calibration_exact_recovery_and_singular() {
        let cases: Vec<CalibrationCase> = [1500.0, 2200.0, 2900.0, 3100.0]
            .iter()
            .map(|&a| CalibrationCase { pf_average: a, true_dxa_bmd: 0.0004 * a + 0.1, true_qct_bmd: 0.1 * a - 3.0 })
            .collect();
        let cal = fit_bmd_calibration(&cases, 1000.0).unwrap();
        assert!((cal.dxa_model.slope - 0.0004).abs() < 1e-12);
        assert!((cal.dxa_model.intercept - 0.1).abs() < 1e-10);
        assert!(cal.dxa_model.residual_se < 1e-12);
        assert!((cal.qct_model.slope - 0.1).abs() < 1e-12);
        assert!(matches!(fit_bmd_calibration(&cases[..1], 1000.0), Err(Error::SingularFit(_))));
    }

    #[test]
    fn zero_slope_gives_constant_prediction() {
        let flat = LinearModel { slope: 0.0, intercept: 0.9, residual_se: 0.0, n: 3 };
        let cal = BmdCalibration { dxa_model: flat, qct_model: flat, threshold_t: 1000.0, config_hash: String::new() };
        for v in [1000.0f32, 3000.0] {
            let e = estimate_from_drr(&img(&[v, v]), &cal, REF_MEAN, REF_SD).unwrap();
            assert_eq!(e.predicted_dxa_bmd, 0.9);
        }
    }

    #[test]
    fn prediction_is_deterministic_and_checks_stage() {
        let cfg = GeneratorConfig { base_channels: 8, n_res_blocks: 1, ..GeneratorConfig::default() };
        let gen = build_generator(&cfg, 3).unwrap();
        let xray = Image2D::from_fn(8, 16, IntensityUnit::XrayRelative, |x, y| (x * 100 + y * 20) as f32).unwrap();
        let cal = BmdCalibration {
            dxa_model: LinearModel { slope: 1e-4, intercept: 0.5, residual_se: 0.0, n: 2 },
            qct_model: LinearModel { slope: 0.05, intercept: 1.0, residual_se: 0.0, n: 2 },
            threshold_t: f64::NEG_INFINITY,
            config_hash: String::new(),
        };
        let xn = Normalization::new(500.0, 500.0).unwrap();
        let tn = Normalization::new(4000.0, 0.0).unwrap();
        let a = predict_bmd(&gen, PairStage::Stage2Proximal, &xray, &cal, xn, tn, REF_MEAN, REF_SD).unwrap();
        let b = predict_bmd(&gen, PairStage::Stage2Proximal, &xray, &cal, xn, tn, REF_MEAN, REF_SD).unwrap();
        assert_eq!(a, b);
        assert!((a.t_score - (a.predicted_dxa_bmd - REF_MEAN) / REF_SD).abs() < 1e-12);
        assert!(predict_bmd(&gen, PairStage::Stage1Bones, &xray, &cal, xn, tn, REF_MEAN, REF_SD).is_err());
    }

    #[test]
    fn calibration_json_round_trip() {
        let m = LinearModel { slope: 0.0003, intercept: 0.1, residual_se: 0.01, n: 8 };
        let cal = BmdCalibration { dxa_model: m, qct_model: m, threshold_t: 1000.0, config_hash: String::new() };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cal.json");
        cal.write(&p).unwrap();
        assert_eq!(BmdCalibration::read(&p).unwrap(), cal);
    }
}
