//! Decomposition and BMD agreement metrics, report assembly and plots.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::bmd::{masked_average, BmdEstimate};
use crate::error::{Error, Result};
use crate::imaging::{Image2D, LinearModel};

/// `10·log10(range² / MSE)`; identical images give `+∞`.
pub fn psnr(pred: &Image2D, truth: &Image2D, data_range: f64) -> Result<f64> {
    if !pred.same_shape(truth) {
        return Err(Error::invalid("psnr: image sizes differ"));
    }
    if !(data_range > 0.0) || !data_range.is_finite() {
        return Err(Error::invalid(format!("psnr: data_range must be > 0, got {data_range}")));
    }
    let mse = pred
        .pixels()
        .iter()
        .zip(truth.pixels())
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
        .sum::<f64>()
        / pred.pixels().len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (data_range * data_range / mse).log10() })
}

/// Dice at each threshold after binarizing both images at `≥ τ`; two empty
/// masks count as 1. Returns (mean, per threshold).
pub fn multi_threshold_dice(pred: &Image2D, truth: &Image2D, thresholds: &[f64]) -> Result<(f64, Vec<f64>)> {
    if !pred.same_shape(truth) {
        return Err(Error::invalid("dice: image sizes differ"));
    }
    if thresholds.is_empty() {
        return Err(Error::invalid("dice: threshold list is empty"));
    }
    if thresholds.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("dice: thresholds must be ascending"));
    }
    let per: Vec<f64> = thresholds
        .iter()
        .map(|&t| {
            let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
            for (p, q) in pred.pixels().iter().zip(truth.pixels()) {
                let (ip, iq) = (*p as f64 >= t, *q as f64 >= t);
                a += ip as usize;
                b += iq as usize;
                both += (ip && iq) as usize;
            }
            if a + b == 0 {
                1.0
            } else {
                2.0 * both as f64 / (a + b) as f64
            }
        })
        .collect();
    Ok((per.iter().sum::<f64>() / per.len() as f64, per))
}

fn check_pair(x: &[f64], y: &[f64], min: usize, what: &str) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("{what}: lengths differ ({} vs {})", x.len(), y.len())));
    }
    if x.len() < min {
        return Err(Error::invalid(format!("{what}: needs at least {min} points, got {}", x.len())));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Pearson correlation.
pub fn pcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 2, "pcc")?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("pcc of a constant series".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// ICC(2,1): two-way random effects, absolute agreement, single measurement,
/// with the two series as raters.
pub fn icc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 3, "icc")?;
    let n = x.len() as f64;
    let k = 2.0;
    let grand = (x.iter().sum::<f64>() + y.iter().sum::<f64>()) / (k * n);
    let ss_total: f64 = x.iter().chain(y).map(|v| (v - grand).powi(2)).sum();
    let ss_rows: f64 = x.iter().zip(y).map(|(a, b)| k * ((a + b) / k - grand).powi(2)).sum();
    let ss_cols = n * ((mean(x) - grand).powi(2) + (mean(y) - grand).powi(2));
    let ss_err = (ss_total - ss_rows - ss_cols).max(0.0);
    let ms_r = ss_rows / (n - 1.0);
    let ms_c = ss_cols / (k - 1.0);
    let ms_e = ss_err / ((n - 1.0) * (k - 1.0));
    let denom = ms_r + (k - 1.0) * ms_e + k / n * (ms_c - ms_e);
    if denom == 0.0 {
        return Err(Error::UndefinedCorrelation("icc of constant data".into()));
    }
    Ok((ms_r - ms_e) / denom)
}

pub fn mae(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 1, "mae")?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64)
}

/// Residual SD of the least-squares line of `truth` on `pred`.
pub fn see(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth, 3, "see")?;
    Ok(LinearModel::fit(pred, truth)?.residual_se)
}

/// Mean over groups of sample SD / mean, in percent.
pub fn cov_repeated(groups: &[Vec<f64>]) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::invalid("cov: no groups"));
    }
    let mut total = 0.0;
    for (i, g) in groups.iter().enumerate() {
        if g.len() < 2 {
            return Err(Error::invalid(format!("cov: group {i} has fewer than 2 measurements")));
        }
        let m = mean(g);
        if !(m > 0.0) {
            return Err(Error::invalid(format!("cov: group {i} mean must be positive, got {m}")));
        }
        let var = g.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (g.len() - 1) as f64;
        total += var.sqrt() / m;
    }
    Ok(100.0 * total / groups.len() as f64)
}

/// JSON numbers cannot be infinite; `+∞` PSNR is written as the string "inf".
mod db {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    fn decode<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Text(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Text(s) => Err(E::custom(format!("expected a number or \"inf\", got {s:?}"))),
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        decode(Repr::deserialize(d)?)
    }

    pub mod vec {
        use super::*;
        use serde::ser::SerializeSeq;

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for x in v {
                if x.is_infinite() && *x > 0.0 {
                    seq.serialize_element("inf")?;
                } else {
                    seq.serialize_element(x)?;
                }
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Vec::<Repr>::deserialize(d)?.into_iter().map(decode).collect()
        }
    }
}

#[derive(Debug, Clone)]
pub struct CasePrediction {
    pub id: String,
    pub pred_drr: Image2D,
    pub estimate: BmdEstimate,
}

#[derive(Debug, Clone)]
pub struct CaseTruth {
    pub id: String,
    pub true_drr: Image2D,
    pub true_dxa_bmd: f64,
    pub true_qct_bmd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Dice thresholds as fractions of the ground-truth maximum.
    pub dice_fractions: Vec<f64>,
    /// Threshold used for the ground-truth PF averages.
    pub threshold_t: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { dice_fractions: vec![0.1, 0.3, 0.5, 0.7, 0.9], threshold_t: 1000.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub id: String,
    #[serde(with = "db")]
    pub psnr: f64,
    pub dice: f64,
    pub pred_pf_average: f64,
    pub true_pf_average: f64,
    pub predicted_dxa_bmd: f64,
    pub true_dxa_bmd: f64,
    pub predicted_qct_bmd: f64,
    pub true_qct_bmd: f64,
    pub t_score: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub icc: Option<f64>,
    pub pcc: Option<f64>,
    pub mae: f64,
    pub predictions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n_cases: usize,
    #[serde(with = "db")]
    pub psnr_mean: f64,
    #[serde(with = "db::vec")]
    pub psnr_per_case: Vec<f64>,
    pub data_range: f64,
    pub dice_thresholds: Vec<f64>,
    pub dice_mean: f64,
    pub dice_per_threshold: Vec<f64>,
    /// Predicted vs. reference DXA BMD. `None` when undefined (constant series).
    pub icc: Option<f64>,
    pub pcc: Option<f64>,
    pub mae: f64,
    pub see: Option<f64>,
    pub pcc_wrt_qct: Option<f64>,
    /// Predicted vs. ground-truth PF averages.
    pub pf_average_pcc: Option<f64>,
    pub pf_average_icc: Option<f64>,
    pub cov_percent: Option<f64>,
    pub baseline: Option<BaselineSummary>,
    pub config_hash: String,
    pub per_case_records: Vec<CaseRecord>,
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn predicted_dxa(&self) -> Vec<f64> {
        self.per_case_records.iter().map(|r| r.predicted_dxa_bmd).collect()
    }

    pub fn true_dxa(&self) -> Vec<f64> {
        self.per_case_records.iter().map(|r| r.true_dxa_bmd).collect()
    }
}

/// Undefined correlations become `None` instead of failing the whole report.
fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedCorrelation(_)) | Err(Error::SingularFit(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Assembles every metric over cases matched by id. Records are sorted by id,
/// so the report does not depend on input order.
pub fn evaluate_run(
    predictions: &[CasePrediction],
    truth: &[CaseTruth],
    config: &EvalConfig,
    config_hash: &str,
) -> Result<EvaluationReport> {
    let preds: BTreeMap<&str, &CasePrediction> = predictions.iter().map(|p| (p.id.as_str(), p)).collect();
    let truths: BTreeMap<&str, &CaseTruth> = truth.iter().map(|t| (t.id.as_str(), t)).collect();
    let pk: BTreeSet<&str> = preds.keys().copied().collect();
    let tk: BTreeSet<&str> = truths.keys().copied().collect();
    if pk != tk || preds.len() != predictions.len() || truths.len() != truth.len() {
        let missing: Vec<&str> = pk.symmetric_difference(&tk).copied().collect();
        return Err(Error::invalid(format!("case ids do not match; unmatched: {missing:?}")));
    }
    if truths.is_empty() {
        return Err(Error::invalid("no cases to evaluate"));
    }
    if config.dice_fractions.is_empty() {
        return Err(Error::invalid("dice_fractions is empty"));
    }

    let data_range = truths.values().map(|t| t.true_drr.max() as f64).fold(0.0, f64::max);
    let range = if data_range > 0.0 { data_range } else { 1.0 };
    let thresholds: Vec<f64> = config.dice_fractions.iter().map(|f| f * range).collect();

    let mut records = Vec::with_capacity(truths.len());
    let mut dice_sum = vec![0.0; thresholds.len()];
    for (id, t) in &truths {
        let p = preds[id];
        let ps = psnr(&p.pred_drr, &t.true_drr, range)?;
        let (dm, per) = multi_threshold_dice(&p.pred_drr, &t.true_drr, &thresholds)?;
        dice_sum.iter_mut().zip(&per).for_each(|(s, v)| *s += v);
        records.push(CaseRecord {
            id: id.to_string(),
            psnr: ps,
            dice: dm,
            pred_pf_average: p.estimate.pf_average,
            true_pf_average: masked_average(&t.true_drr, config.threshold_t)?.value,
            predicted_dxa_bmd: p.estimate.predicted_dxa_bmd,
            true_dxa_bmd: t.true_dxa_bmd,
            predicted_qct_bmd: p.estimate.predicted_qct_bmd,
            true_qct_bmd: t.true_qct_bmd,
            t_score: p.estimate.t_score,
            degenerate: p.estimate.degenerate,
        });
    }
    let n = records.len();
    let col = |f: fn(&CaseRecord) -> f64| records.iter().map(f).collect::<Vec<f64>>();
    let (pd, td) = (col(|r| r.predicted_dxa_bmd), col(|r| r.true_dxa_bmd));
    let (pq, tq) = (col(|r| r.predicted_qct_bmd), col(|r| r.true_qct_bmd));
    let (pa, ta) = (col(|r| r.pred_pf_average), col(|r| r.true_pf_average));
    let psnrs = col(|r| r.psnr);

    Ok(EvaluationReport {
        n_cases: n,
        psnr_mean: mean(&psnrs),
        psnr_per_case: psnrs,
        data_range: range,
        dice_mean: mean(&col(|r| r.dice)),
        dice_per_threshold: dice_sum.iter().map(|s| s / n as f64).collect(),
        dice_thresholds: thresholds,
        icc: if n >= 3 { defined(icc(&pd, &td))? } else { None },
        pcc: defined(pcc(&pd, &td))?,
        mae: mae(&pd, &td)?,
        see: if n >= 3 { defined(see(&pd, &td))? } else { None },
        pcc_wrt_qct: defined(pcc(&pq, &tq))?,
        pf_average_pcc: defined(pcc(&pa, &ta))?,
        pf_average_icc: if n >= 3 { defined(icc(&pa, &ta))? } else { None },
        cov_percent: None,
        baseline: None,
        config_hash: config_hash.to_string(),
        per_case_records: records,
    })
}

/// Baseline agreement block for cases ordered as `truth`.
pub fn baseline_summary(predictions: &[f64], truth: &[f64]) -> Result<BaselineSummary> {
    Ok(BaselineSummary {
        icc: if truth.len() >= 3 { defined(icc(predictions, truth))? } else { None },
        pcc: defined(pcc(predictions, truth))?,
        mae: mae(predictions, truth)?,
        predictions: predictions.to_vec(),
    })
}

const PLOT_W: u32 = 320;
const PLOT_H: u32 = 240;
const MARGIN: f64 = 24.0;
const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);

struct Plot {
    img: RgbImage,
    x: (f64, f64),
    y: (f64, f64),
}

impl Plot {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let pad = |(lo, hi): (f64, f64)| {
            let span = if hi > lo { hi - lo } else { 1.0 };
            (lo - 0.05 * span, hi + 0.05 * span)
        };
        let mut p = Plot { img: RgbImage::from_pixel(PLOT_W, PLOT_H, BG), x: pad(x), y: pad(y) };
        let (x0, y0) = (MARGIN, PLOT_H as f64 - MARGIN);
        p.segment_px((x0, y0), (PLOT_W as f64 - 4.0, y0), AXIS);
        p.segment_px((x0, y0), (x0, 4.0), AXIS);
        p
    }

    fn to_px(&self, x: f64, y: f64) -> (f64, f64) {
        let w = PLOT_W as f64 - MARGIN - 4.0;
        let h = PLOT_H as f64 - MARGIN - 4.0;
        (
            MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * w,
            PLOT_H as f64 - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * h,
        )
    }

    fn put(&mut self, px: f64, py: f64, c: Rgb<u8>) {
        if px >= 0.0 && py >= 0.0 && (px as u32) < PLOT_W && (py as u32) < PLOT_H {
            self.img.put_pixel(px as u32, py as u32, c);
        }
    }

    fn segment_px(&mut self, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
        let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            self.put(a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1), c);
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
        let (pa, pb) = (self.to_px(a.0, a.1), self.to_px(b.0, b.1));
        self.segment_px(pa, pb, c);
    }

    fn dot(&mut self, x: f64, y: f64, c: Rgb<u8>) {
        let (px, py) = self.to_px(x, y);
        for dy in -2..=2 {
            for dx in -2..=2 {
                if dx * dx + dy * dy <= 4 {
                    self.put(px + dx as f64, py + dy as f64, c);
                }
            }
        }
    }

    fn rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, c: Rgb<u8>) {
        let (a, b) = (self.to_px(x0, y0), self.to_px(x1, y1));
        let (lx, hx) = (a.0.min(b.0), a.0.max(b.0));
        let (ly, hy) = (a.1.min(b.1), a.1.max(b.1));
        let mut y = ly;
        while y <= hy {
            let mut x = lx;
            while x <= hx {
                self.put(x, y, c);
                x += 1.0;
            }
            y += 1.0;
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.img.save(path).map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
    }
}

fn extent(v: impl Iterator<Item = f64>) -> (f64, f64) {
    v.filter(|x| x.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, f) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - f) + sorted[i + 1] * f
    } else {
        sorted[i]
    }
}

/// Writes `scatter.png` (predicted vs. reference DXA BMD with identity and fit
/// lines), `abs_error_box.png` and `dice_bars.png` into `dir`.
pub fn write_plots(report: &EvaluationReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (pred, truth) = (report.predicted_dxa(), report.true_dxa());

    let r = extent(pred.iter().chain(&truth).copied());
    let r = if r.0.is_finite() { r } else { (0.0, 1.0) };
    let mut sc = Plot::new(r, r);
    sc.line((r.0, r.0), (r.1, r.1), Rgb([170, 170, 170]));
    if let Ok(fit) = LinearModel::fit(&truth, &pred) {
        sc.line((r.0, fit.predict(r.0)), (r.1, fit.predict(r.1)), Rgb([200, 60, 40]));
    }
    for (t, p) in truth.iter().zip(&pred) {
        sc.dot(*t, *p, Rgb([30, 90, 180]));
    }
    if let Some(b) = &report.baseline {
        for (t, p) in truth.iter().zip(&b.predictions) {
            sc.dot(*t, *p, Rgb([40, 160, 70]));
        }
    }
    sc.save(&dir.join("scatter.png"))?;

    let mut errs: Vec<f64> = pred.iter().zip(&truth).map(|(p, t)| (p - t).abs()).collect();
    errs.sort_by(f64::total_cmp);
    let top = errs.last().copied().unwrap_or(1.0).max(1e-9);
    let mut bx = Plot::new((0.0, 1.0), (0.0, top));
    if !errs.is_empty() {
        let q = |p| quantile(&errs, p);
        let blue = Rgb([30, 90, 180]);
        bx.rect(0.3, q(0.25), 0.7, q(0.75), Rgb([190, 210, 240]));
        bx.line((0.3, q(0.5)), (0.7, q(0.5)), blue);
        bx.line((0.5, q(0.0)), (0.5, q(0.25)), blue);
        bx.line((0.5, q(0.75)), (0.5, q(1.0)), blue);
        bx.line((0.4, q(0.0)), (0.6, q(0.0)), blue);
        bx.line((0.4, q(1.0)), (0.6, q(1.0)), blue);
    }
    bx.save(&dir.join("abs_error_box.png"))?;

    let k = report.dice_per_threshold.len().max(1) as f64;
    let mut bars = Plot::new((0.0, k), (0.0, 1.0));
    for (i, d) in report.dice_per_threshold.iter().enumerate() {
        bars.rect(i as f64 + 0.15, 0.0, i as f64 + 0.85, *d, Rgb([30, 90, 180]));
    }
    bars.save(&dir.join("dice_bars.png"))
}
