//! Two-stage adversarial training: learning-rate schedules, paired
//! augmentation, AdamW, checkpoints, the stage loop and the direct-regression
//! baseline.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{
    from_normalized, to_normalized, DatasetReader, Image2D, ImagePair, IntensityUnit, Normalization, PairStage,
    Split,
};
use crate::losses::{
    adversarial_loss_d, adversarial_loss_d_grads, adversarial_loss_g, adversarial_loss_g_grad,
    feature_matching_grads, feature_matching_layers, gradient_correlation_with_grad, l1_with_grad,
    total_generator_objective, LossReport, LossWeights,
};
use crate::metrics::psnr;
use crate::models::{
    build_generator, image_to_tensor, tensor_to_image, DiscriminatorConfig, DiscriminatorStack, Generator,
    GeneratorConfig, Regressor,
};
use crate::nn::{ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
}

impl Stage {
    pub fn pair_stage(self) -> PairStage {
        match self {
            Stage::Stage1 => PairStage::Stage1Bones,
            Stage::Stage2 => PairStage::Stage2Proximal,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }
}

/// Learning rate held for `keep_epochs`, then decayed linearly to zero at
/// `total_epochs`.
pub fn lr_linear_decay(epoch: usize, lr_initial: f64, keep_epochs: usize, total_epochs: usize) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(Error::invalid(format!("epoch {epoch} outside 0..{total_epochs}")));
    }
    if keep_epochs > total_epochs {
        return Err(Error::invalid(format!("keep_epochs {keep_epochs} exceeds total {total_epochs}")));
    }
    if epoch < keep_epochs {
        return Ok(lr_initial);
    }
    Ok(lr_initial * (total_epochs - epoch) as f64 / (total_epochs - keep_epochs) as f64)
}

/// Cosine annealing with warm restarts; cycle `i` lasts `t0 · t_mult^i` epochs.
pub fn lr_sgdr(epoch: usize, eta_min: f64, eta_max: f64, t0: usize, t_mult: usize) -> Result<f64> {
    if t0 < 1 || t_mult < 1 || !(eta_min >= 0.0) || eta_max < eta_min {
        return Err(Error::invalid(format!(
            "invalid SGDR parameters: t0={t0}, t_mult={t_mult}, eta_min={eta_min}, eta_max={eta_max}"
        )));
    }
    let (mut t_cur, mut t_i) = (epoch, t0);
    while t_cur >= t_i {
        t_cur -= t_i;
        t_i *= t_mult;
    }
    let phase = std::f64::consts::PI * t_cur as f64 / t_i as f64;
    Ok(eta_min + 0.5 * (eta_max - eta_min) * (1.0 + phase.cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrPolicy {
    LinearDecay {
        /// Defaults to half of the stage's epochs.
        #[serde(default)]
        keep_epochs: Option<usize>,
    },
    Sgdr {
        #[serde(default)]
        eta_min: f64,
        #[serde(default = "default_t0")]
        t0: usize,
        #[serde(default = "default_t_mult")]
        t_mult: usize,
    },
}

fn default_t0() -> usize {
    10
}

fn default_t_mult() -> usize {
    2
}

impl LrPolicy {
    pub fn sgdr_default() -> Self {
        LrPolicy::Sgdr { eta_min: 0.0, t0: default_t0(), t_mult: default_t_mult() }
    }

    pub fn lr(&self, epoch: usize, lr_initial: f64, total_epochs: usize) -> Result<f64> {
        match *self {
            LrPolicy::LinearDecay { keep_epochs } => {
                lr_linear_decay(epoch, lr_initial, keep_epochs.unwrap_or(total_epochs / 2), total_epochs)
            }
            LrPolicy::Sgdr { eta_min, t0, t_mult } => lr_sgdr(epoch, eta_min, lr_initial, t0, t_mult),
        }
    }
}

/// Symmetric ranges of the random geometric augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub shear_deg: f64,
    /// Fraction of the image size.
    pub translate_frac: f64,
    /// Scale factor is drawn from `1 ± scale_frac`.
    pub scale_frac: f64,
    pub hflip: bool,
    pub vflip: bool,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams { rotation_deg: 25.0, shear_deg: 8.0, translate_frac: 0.3, scale_frac: 0.3, hflip: true, vflip: true }
    }
}

impl AugmentParams {
    pub fn none() -> Self {
        AugmentParams { rotation_deg: 0.0, shear_deg: 0.0, translate_frac: 0.0, scale_frac: 0.0, hflip: false, vflip: false }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.rotation_deg, self.shear_deg, self.translate_frac, self.scale_frac];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("augment ranges must be finite and ≥ 0".into()));
        }
        if self.scale_frac >= 1.0 {
            return Err(Error::Config(format!("augment.scale_frac must be < 1, got {}", self.scale_frac)));
        }
        if self.shear_deg >= 90.0 {
            return Err(Error::Config("augment.shear_deg must be < 90".into()));
        }
        Ok(())
    }
}

/// One sampled geometric transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineDraw {
    pub rotation_deg: f64,
    pub shear_deg: f64,
    pub tx_frac: f64,
    pub ty_frac: f64,
    pub scale: f64,
    pub hflip: bool,
    pub vflip: bool,
}

impl AffineDraw {
    pub fn identity() -> Self {
        AffineDraw { rotation_deg: 0.0, shear_deg: 0.0, tx_frac: 0.0, ty_frac: 0.0, scale: 1.0, hflip: false, vflip: false }
    }

    pub fn sample(params: &AugmentParams, rng: &mut impl Rng) -> Self {
        let mut u = |r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        let rotation_deg = u(params.rotation_deg);
        let shear_deg = u(params.shear_deg);
        let tx_frac = u(params.translate_frac);
        let ty_frac = u(params.translate_frac);
        let scale = 1.0 + u(params.scale_frac);
        let hflip = params.hflip && rng.gen_bool(0.5);
        let vflip = params.vflip && rng.gen_bool(0.5);
        AffineDraw { rotation_deg, shear_deg, tx_frac, ty_frac, scale, hflip, vflip }
    }

    fn is_warp_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.shear_deg == 0.0 && self.tx_frac == 0.0 && self.ty_frac == 0.0 && self.scale == 1.0
    }
}

/// Warps `img` by `draw` about its center with bilinear sampling. Samples that
/// fall outside the image take the image minimum. Flips act on the output.
pub fn apply_affine(img: &Image2D, draw: &AffineDraw) -> Result<Image2D> {
    let (w, h) = (img.width(), img.height());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let fill = img.min() as f64;
    let identity = draw.is_warp_identity();

    let (th, sh) = (draw.rotation_deg.to_radians(), draw.shear_deg.to_radians().tan());
    let (c, s) = (th.cos(), th.sin());
    // A = scale · R · [[1, sh], [0, 1]]
    let (a, b, cc, d) = (draw.scale * c, draw.scale * (c * sh - s), draw.scale * s, draw.scale * (s * sh + c));
    let det = a * d - b * cc;
    let (ia, ib, ic, id) = (d / det, -b / det, -cc / det, a / det);
    let (tx, ty) = (draw.tx_frac * w as f64, draw.ty_frac * h as f64);
    const TOL: f64 = 1e-9;

    Image2D::from_fn(w, h, img.unit(), |i, j| {
        let xi = if draw.hflip { w - 1 - i } else { i };
        let yj = if draw.vflip { h - 1 - j } else { j };
        if identity {
            return img.get(xi, yj);
        }
        let (u, v) = (xi as f64 - cx - tx, yj as f64 - cy - ty);
        let (x, y) = (ia * u + ib * v + cx, ic * u + id * v + cy);
        if x < -TOL || y < -TOL || x > w as f64 - 1.0 + TOL || y > h as f64 - 1.0 + TOL {
            fill as f32
        } else {
            img.sample_bilinear(x, y) as f32
        }
    })
}

/// Draws one transform and applies it to both images of the pair.
pub fn augment_pair(pair: &ImagePair, params: &AugmentParams, rng: &mut impl Rng) -> Result<(ImagePair, AffineDraw)> {
    let draw = AffineDraw::sample(params, rng);
    let out = ImagePair::new(
        pair.id.clone(),
        apply_affine(&pair.xray, &draw)?,
        apply_affine(&pair.target, &draw)?,
        pair.stage,
        pair.side,
    )?;
    Ok((out, draw))
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(n_params: usize, weight_decay: f64) -> Self {
        AdamW { beta1: 0.5, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    /// Applies one update from the accumulated gradients of `net`.
    pub fn update(&mut self, net: &mut impl ParamSet, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let (m, v, wd, eps) = (&mut self.m, &mut self.v, self.weight_decay, self.eps);
        let mut at = 0;
        net.visit_mut(&mut |p| {
            let decay = if p.no_decay { 1.0 } else { 1.0 - lr * wd };
            for k in 0..p.value.len() {
                let g = p.grad[k];
                let i = at + k;
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let step = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                p.value[k] = p.value[k] * decay - step;
            }
            at += p.value.len();
        });
    }

    fn state(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        out.extend_from_slice(&self.m);
        out.extend_from_slice(&self.v);
        out
    }

    fn load_state(&mut self, step: u64, state: &[f64]) -> Result<()> {
        if state.len() != 2 * self.m.len() {
            return Err(Error::Format { field: "optimizer", message: "state size mismatch".into() });
        }
        let n = self.m.len();
        self.m.copy_from_slice(&state[..n]);
        self.v.copy_from_slice(&state[n..]);
        self.step = step;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_policy: LrPolicy,
    pub weight_decay: f64,
    pub augment: AugmentParams,
    pub rng_seed: u64,
}

impl StageConfig {
    pub fn default_for(stage: Stage) -> Self {
        let (lr_policy, rng_seed) = match stage {
            Stage::Stage1 => (LrPolicy::LinearDecay { keep_epochs: None }, 1),
            Stage::Stage2 => (LrPolicy::sgdr_default(), 2),
        };
        StageConfig {
            stage,
            epochs: 20,
            batch_size: 4,
            lr_initial: 2e-4,
            lr_policy,
            weight_decay: 1e-4,
            augment: AugmentParams::default(),
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let name = self.stage.name();
        if self.epochs < 1 {
            return Err(Error::Config(format!("{name}.epochs must be ≥ 1")));
        }
        if self.batch_size < 1 {
            return Err(Error::Config(format!("{name}.batch_size must be ≥ 1")));
        }
        if !(self.lr_initial > 0.0) || !self.lr_initial.is_finite() {
            return Err(Error::Config(format!("{name}.lr_initial must be > 0, got {}", self.lr_initial)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("{name}.weight_decay must be ≥ 0")));
        }
        self.augment.validate()?;
        self.lr_policy
            .lr(0, self.lr_initial, self.epochs)
            .map_err(|e| Error::Config(format!("{name}.lr_policy: {e}")))?;
        Ok(())
    }
}

/// Models, losses and output location shared by both stages.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSetup {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub loss: LossWeights,
    /// Training pairs used for the per-epoch validation PSNR.
    pub val_cases: usize,
    pub config_hash: String,
    /// Receives checkpoints and `train_log.jsonl`; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
}

/// Normalized training pairs for one stage.
#[derive(Debug, Clone)]
pub struct StageData {
    pub stage: Stage,
    pub pairs: Vec<ImagePair>,
    pub xray_norm: Normalization,
    pub target_norm: Normalization,
    pub manifest_hash: String,
}

impl StageData {
    /// Normalizes raw canvas pairs.
    pub fn from_raw(
        stage: Stage,
        raw: &[ImagePair],
        xray_norm: Normalization,
        target_norm: Normalization,
        manifest_hash: String,
    ) -> Result<Self> {
        let pairs = raw
            .iter()
            .map(|p| {
                if p.stage != stage.pair_stage() {
                    return Err(Error::Config(format!("pair {} is tagged {:?}, {} needs {:?}", p.id, p.stage, stage.name(), stage.pair_stage())));
                }
                ImagePair::new(
                    p.id.clone(),
                    to_normalized(&p.xray, xray_norm.scale, xray_norm.offset)?,
                    to_normalized(&p.target, target_norm.scale, target_norm.offset)?,
                    p.stage,
                    p.side,
                )
            })
            .collect::<Result<_>>()?;
        Ok(StageData { stage, pairs, xray_norm, target_norm, manifest_hash })
    }

    /// The TRAIN split of a manifest. Test cases are never read.
    pub fn from_reader(reader: &DatasetReader, stage: Stage) -> Result<Self> {
        let m = &reader.manifest;
        let raw: Vec<ImagePair> =
            reader.load_split(Split::Train, stage.pair_stage())?.into_iter().map(|(_, p)| p).collect();
        Self::from_raw(stage, &raw, m.xray_normalization, m.normalization, m.hash())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub stage: Stage,
    /// Completed epochs.
    pub epoch: usize,
    pub generator_config: GeneratorConfig,
    pub discriminator_config: DiscriminatorConfig,
    pub loss_weights: LossWeights,
    pub rng_seed: u64,
    pub manifest_hash: String,
    pub config_hash: String,
    /// SHA-256 of the generator parameters.
    pub param_checksum: String,
    pub warm_started: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub generator: Generator,
    pub discriminators: DiscriminatorStack,
    pub opt_g: AdamW,
    pub opt_d: AdamW,
}

const CKPT_MAGIC: &[u8; 4] = b"BCK1";

/// `<path>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn put_block(buf: &mut Vec<u8>, values: &[f64]) {
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Blocks<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Blocks<'_> {
    fn u64(&mut self) -> Result<u64> {
        let b = self
            .bytes
            .get(self.at..self.at + 8)
            .ok_or_else(|| Error::Format { field: "payload", message: "truncated".into() })?;
        self.at += 8;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn block(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        (0..n).map(|_| self.u64().map(f64::from_bits)).collect()
    }
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = CKPT_MAGIC.to_vec();
        put_block(&mut buf, &self.generator.flat_values());
        put_block(&mut buf, &self.discriminators.flat_values());
        for opt in [&self.opt_g, &self.opt_d] {
            put_block(&mut buf, &[opt.beta1, opt.beta2, opt.eps, opt.weight_decay]);
            buf.extend_from_slice(&opt.step.to_le_bytes());
            put_block(&mut buf, &opt.state());
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.meta).expect("sidecar serializes");
        fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::json(&side, e))?;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 4 || &bytes[..4] != CKPT_MAGIC {
            return Err(Error::Format { field: "magic", message: format!("{} is not a checkpoint", path.display()) });
        }
        let mut r = Blocks { bytes: &bytes, at: 4 };
        let mut generator = build_generator(&meta.generator_config, 0)?;
        generator.load_flat_values(&r.block()?)?;
        let mut discriminators = DiscriminatorStack::new(&meta.discriminator_config, 0)?;
        discriminators.load_flat_values(&r.block()?)?;
        let mut opt_g = AdamW::new(generator.param_count(), 0.0);
        let mut opt_d = AdamW::new(discriminators.param_count(), 0.0);
        for opt in [&mut opt_g, &mut opt_d] {
            let hyper = r.block()?;
            let [b1, b2, eps, wd] = hyper[..] else {
                return Err(Error::Format { field: "optimizer", message: "expected 4 hyperparameters".into() });
            };
            (opt.beta1, opt.beta2, opt.eps, opt.weight_decay) = (b1, b2, eps, wd);
            let step = r.u64()?;
            opt.load_state(step, &r.block()?)?;
        }
        if generator.checksum() != meta.param_checksum {
            return Err(Error::Format { field: "payload", message: "generator checksum mismatch".into() });
        }
        Ok(Checkpoint { meta, generator, discriminators, opt_g, opt_d })
    }

    pub fn file_name(stage: Stage) -> String {
        format!("ckpt_{}.bin", stage.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    pub gan_g: f64,
    pub gan_d: f64,
    pub fm: f64,
    pub l1: f64,
    pub gc: f64,
    pub total_g: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub val_psnr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedStage {
    pub checkpoint: Checkpoint,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(z << 6).wrapping_add(z >> 2);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x5348_5546, epoch as u64])));
    order
}

fn batch_rng(seed: u64, epoch: usize, batch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x4155_474d, epoch as u64, batch as u64]))
}

struct JsonLog {
    file: Option<fs::File>,
    path: PathBuf,
}

impl JsonLog {
    fn open(dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(JsonLog { file: None, path: PathBuf::new() });
        };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("train_log.jsonl");
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        Ok(JsonLog { file: Some(file), path })
    }

    fn write(&mut self, record: &impl Serialize) -> Result<()> {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(record).expect("log record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
}

/// Mean validation PSNR in target units; the range is the target scale.
fn validation_psnr(gen: &Generator, data: &StageData, n: usize) -> Result<f64> {
    let n = n.min(data.pairs.len());
    if n == 0 {
        return Ok(f64::NAN);
    }
    let tn = data.target_norm;
    let mut total = 0.0;
    for p in &data.pairs[..n] {
        let y = gen.infer_tensor(&image_to_tensor(&p.xray))?;
        let pred = from_normalized(&tensor_to_image(&y, IntensityUnit::Normalized)?, tn.scale, tn.offset, IntensityUnit::DensityLineIntegral)?;
        let truth = from_normalized(&p.target, tn.scale, tn.offset, IntensityUnit::DensityLineIntegral)?;
        let v = psnr(&pred, &truth, tn.scale + tn.offset.abs())?;
        total += v.min(100.0);
    }
    Ok(total / n as f64)
}

fn diverged(stage: Stage, epoch: usize, step: usize) -> Error {
    Error::Diverged { stage: stage.name().to_string(), epoch, step }
}

/// Optimizes one batch: a discriminator step on real and detached fake pairs,
/// then a generator step through the updated discriminators.
fn train_batch(
    gen: &mut Generator,
    disc: &mut DiscriminatorStack,
    opt_g: &mut AdamW,
    opt_d: &mut AdamW,
    batch: &[(Tensor, Tensor)],
    weights: &LossWeights,
    lr: f64,
) -> Result<LossReport> {
    let inv_b = 1.0 / batch.len() as f64;
    let mut report = LossReport::default();

    let mut fakes = Vec::with_capacity(batch.len());
    for (x, _) in batch {
        fakes.push(gen.forward_tensor(x)?);
    }

    disc.zero_grad();
    for ((x, y), (fake, _)) in batch.iter().zip(&fakes) {
        let real_out = disc.forward(x, y)?;
        let fake_out = disc.forward(x, fake)?;
        let mut d_real = Vec::new();
        let mut d_fake = Vec::new();
        for (r, f) in real_out.per_scale.iter().zip(&fake_out.per_scale) {
            report.gan_d += inv_b * adversarial_loss_d(&r.score, &f.score, weights.gan_mode);
            let (mut gr, mut gf) = adversarial_loss_d_grads(&r.score, &f.score, weights.gan_mode);
            gr.scale(inv_b);
            gf.scale(inv_b);
            d_real.push(gr);
            d_fake.push(gf);
        }
        disc.backward(&real_out, &d_real, None);
        disc.backward(&fake_out, &d_fake, None);
    }
    opt_d.update(disc, lr);

    gen.zero_grad();
    for ((x, y), (fake, cache)) in batch.iter().zip(&fakes) {
        let real_out = disc.forward(x, y)?;
        let fake_out = disc.forward(x, fake)?;
        let mut d_scores = Vec::new();
        let mut d_feats = Vec::new();
        for (r, f) in real_out.per_scale.iter().zip(&fake_out.per_scale) {
            report.gan_g += inv_b * adversarial_loss_g(&f.score, weights.gan_mode);
            report.fm += inv_b * feature_matching_layers(&r.features, &f.features)?;
            let mut gs = adversarial_loss_g_grad(&f.score, weights.gan_mode);
            gs.scale(inv_b);
            d_scores.push(gs);
            let mut gf = feature_matching_grads(&r.features, &f.features)?;
            gf.iter_mut().for_each(|t| t.scale(inv_b * weights.lambda_fm));
            d_feats.push(gf);
        }
        let mut d_fake = disc.backward(&fake_out, &d_scores, Some(&d_feats));

        let (l1, mut g_l1) = l1_with_grad(fake, y)?;
        let (gc, mut g_gc) = gradient_correlation_with_grad(fake, y, weights.gc_literal_sign)?;
        report.l1 += inv_b * l1;
        report.gc += inv_b * gc;
        g_l1.scale(inv_b * weights.lambda_l1);
        g_gc.scale(inv_b * weights.lambda_gc);
        d_fake.add_assign(&g_l1);
        d_fake.add_assign(&g_gc);
        gen.backward(cache, &d_fake);
    }
    // Discriminator gradients from the generator pass are not applied.
    disc.zero_grad();
    opt_g.update(gen, lr);
    report.total_g = total_generator_objective(weights, report.gan_g, report.fm, report.l1, report.gc);
    Ok(report)
}

fn check_shapes(setup: &TrainSetup, data: &StageData) -> Result<()> {
    let first = data.pairs.first().ok_or_else(|| Error::Config(format!("{}: TRAIN split is empty", data.stage.name())))?;
    let (w, h) = (first.xray.width(), first.xray.height());
    let m = setup.generator.spatial_multiple();
    if w % m != 0 || h % m != 0 {
        return Err(Error::Config(format!("canvas {w}×{h} is not divisible by the generator's {m}")));
    }
    let min = setup.discriminator.min_input_side();
    if w < min || h < min {
        return Err(Error::Config(format!("canvas {w}×{h} is smaller than the discriminator minimum {min}")));
    }
    if data.pairs.iter().any(|p| p.xray.width() != w || p.xray.height() != h) {
        return Err(Error::Config("training pairs differ in size".into()));
    }
    Ok(())
}

/// Trains one stage from a fresh or warm-started generator. With
/// `hierarchical` set, stage 2 requires `init_generator`.
pub fn train_stage(
    config: &StageConfig,
    setup: &TrainSetup,
    data: &StageData,
    init_generator: Option<&Generator>,
    hierarchical: bool,
) -> Result<TrainedStage> {
    config.validate()?;
    setup.generator.validate()?;
    setup.discriminator.validate()?;
    setup.loss.validate()?;
    if data.stage != config.stage {
        return Err(Error::Config(format!("{} data passed to {} training", data.stage.name(), config.stage.name())));
    }
    if config.stage == Stage::Stage2 && hierarchical && init_generator.is_none() {
        return Err(Error::Config("hierarchical stage2 needs the stage1 generator".into()));
    }
    check_shapes(setup, data)?;

    let generator = match init_generator {
        Some(g) => {
            if g.config != setup.generator {
                return Err(Error::Config("initial generator config differs from the run config".into()));
            }
            g.clone()
        }
        None => build_generator(&setup.generator, config.rng_seed)?,
    };
    let discriminators = DiscriminatorStack::new(&setup.discriminator, mix_seed(config.rng_seed, &[0x44]))?;
    let checkpoint = Checkpoint {
        meta: CheckpointMeta {
            stage: config.stage,
            epoch: 0,
            generator_config: setup.generator,
            discriminator_config: setup.discriminator,
            loss_weights: setup.loss,
            rng_seed: config.rng_seed,
            manifest_hash: data.manifest_hash.clone(),
            config_hash: setup.config_hash.clone(),
            param_checksum: generator.checksum(),
            warm_started: init_generator.is_some(),
        },
        opt_g: AdamW::new(generator.param_count(), config.weight_decay),
        opt_d: AdamW::new(discriminators.param_count(), config.weight_decay),
        generator,
        discriminators,
    };
    run_epochs(config, setup, data, checkpoint)
}

/// Continues a run from a checkpoint of the same stage and config; the
/// remaining epochs see exactly the batches and draws of an uninterrupted run.
pub fn resume_stage(config: &StageConfig, setup: &TrainSetup, data: &StageData, checkpoint: Checkpoint) -> Result<TrainedStage> {
    config.validate()?;
    if checkpoint.meta.stage != config.stage || checkpoint.meta.rng_seed != config.rng_seed {
        return Err(Error::Config("checkpoint does not belong to this stage configuration".into()));
    }
    if checkpoint.meta.manifest_hash != data.manifest_hash {
        return Err(Error::Config("checkpoint was trained on a different manifest".into()));
    }
    check_shapes(setup, data)?;
    run_epochs(config, setup, data, checkpoint)
}

fn run_epochs(config: &StageConfig, setup: &TrainSetup, data: &StageData, mut ck: Checkpoint) -> Result<TrainedStage> {
    let mut log = JsonLog::open(setup.out_dir.as_deref())?;
    log.write(&serde_json::json!({
        "stage": config.stage,
        "start_epoch": ck.meta.epoch,
        "config_hash": setup.config_hash,
        "manifest_hash": data.manifest_hash,
    }))?;
    let ckpt_path = setup.out_dir.as_ref().map(|d| d.join(Checkpoint::file_name(config.stage)));
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let n = data.pairs.len();
    let mut step = ck.meta.epoch * n.div_ceil(config.batch_size);

    for epoch in ck.meta.epoch..config.epochs {
        let lr = config.lr_policy.lr(epoch, config.lr_initial, config.epochs)?;
        let order = epoch_order(n, config.rng_seed, epoch);
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut rng = batch_rng(config.rng_seed, epoch, bi);
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (p, _) = augment_pair(&data.pairs[i], &config.augment, &mut rng)?;
                batch.push((image_to_tensor(&p.xray), image_to_tensor(&p.target)));
            }
            let r = train_batch(&mut ck.generator, &mut ck.discriminators, &mut ck.opt_g, &mut ck.opt_d, &batch, &setup.loss, lr)?;
            let values = [r.gan_g, r.gan_d, r.fm, r.l1, r.gc, r.total_g];
            if values.iter().any(|v| !v.is_finite()) {
                return Err(diverged(config.stage, epoch, step));
            }
            let rec = StepRecord {
                stage: config.stage,
                epoch,
                step,
                gan_g: r.gan_g,
                gan_d: r.gan_d,
                fm: r.fm,
                l1: r.l1,
                gc: r.gc,
                total_g: r.total_g,
                lr,
            };
            log.write(&rec)?;
            steps.push(rec);
            step += 1;
        }
        if ck.generator.flat_values().iter().any(|v| !v.is_finite()) {
            return Err(diverged(config.stage, epoch, step));
        }
        let val_psnr = validation_psnr(&ck.generator, data, setup.val_cases)?;
        let rec = EpochRecord { stage: config.stage, epoch, val_psnr };
        log.write(&rec)?;
        epochs.push(rec);

        ck.meta.epoch = epoch + 1;
        ck.meta.param_checksum = ck.generator.checksum();
        if let Some(p) = &ckpt_path {
            ck.save(p)?;
        }
    }
    Ok(TrainedStage { checkpoint: ck, steps, epochs })
}

/// Result of a full run; `stage1` is absent for the no-hierarchy ablation.
#[derive(Debug, Clone)]
pub struct HierarchicalRun {
    pub stage1: Option<TrainedStage>,
    pub stage2: TrainedStage,
}

/// Stage 1 on whole-bone targets, then stage 2 warm-started from its
/// generator with fresh discriminators and optimizers. With `no_hl`, stage 2
/// trains from scratch for the combined epoch budget of both stages.
pub fn run_hierarchical(
    stage1: &StageConfig,
    stage2: &StageConfig,
    setup: &TrainSetup,
    data1: &StageData,
    data2: &StageData,
    no_hl: bool,
) -> Result<HierarchicalRun> {
    stage1.validate()?;
    stage2.validate()?;
    if no_hl {
        let mut cfg = stage2.clone();
        cfg.epochs = stage1.epochs + stage2.epochs;
        let s2 = train_stage(&cfg, setup, data2, None, false)?;
        return Ok(HierarchicalRun { stage1: None, stage2: s2 });
    }
    let s1 = train_stage(stage1, setup, data1, None, true)?;
    let s2 = train_stage(stage2, setup, data2, Some(&s1.checkpoint.generator), true)?;
    Ok(HierarchicalRun { stage1: Some(s1), stage2: s2 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub base_channels: usize,
    pub norm_groups: usize,
    pub augment: AugmentParams,
    pub rng_seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            epochs: 20,
            batch_size: 4,
            lr: 2e-4,
            weight_decay: 1e-4,
            base_channels: 8,
            norm_groups: 4,
            augment: AugmentParams::default(),
            rng_seed: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionMeta {
    pub epoch: usize,
    pub config: BaselineConfig,
    pub target_mean: f64,
    pub target_std: f64,
    pub xray_normalization: Normalization,
    pub manifest_hash: String,
    pub config_hash: String,
    pub param_checksum: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionCheckpoint {
    pub meta: RegressionMeta,
    pub regressor: Regressor,
}

impl RegressionCheckpoint {
    /// Predicted DXA BMD for a raw canvas x-ray.
    pub fn predict(&self, xray: &Image2D) -> Result<f64> {
        let n = self.meta.xray_normalization;
        let x = to_normalized(xray, n.scale, n.offset)?;
        Ok(self.meta.target_mean + self.meta.target_std * self.regressor.infer(&image_to_tensor(&x)))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = CKPT_MAGIC.to_vec();
        put_block(&mut buf, &self.regressor.flat_values());
        fs::write(path, buf).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.meta).expect("sidecar serializes");
        fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: RegressionMeta = serde_json::from_str(&text).map_err(|e| Error::json(&side, e))?;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 4 || &bytes[..4] != CKPT_MAGIC {
            return Err(Error::Format { field: "magic", message: format!("{} is not a checkpoint", path.display()) });
        }
        let mut regressor = Regressor::new(meta.config.base_channels, meta.config.norm_groups, 0)?;
        regressor.load_flat_values(&Blocks { bytes: &bytes, at: 4 }.block()?)?;
        if regressor.checksum() != meta.param_checksum {
            return Err(Error::Format { field: "payload", message: "regressor checksum mismatch".into() });
        }
        Ok(RegressionCheckpoint { meta, regressor })
    }
}

/// Direct x-ray → DXA BMD regression with a mean-squared-error loss on the
/// standardized target. `xrays` are raw canvas images.
pub fn train_regression_baseline(
    xrays: &[Image2D],
    targets: &[f64],
    xray_norm: Normalization,
    config: &BaselineConfig,
    manifest_hash: &str,
    config_hash: &str,
) -> Result<RegressionCheckpoint> {
    if xrays.is_empty() || xrays.len() != targets.len() {
        return Err(Error::Config(format!("baseline needs matching non-empty inputs, got {} images and {} targets", xrays.len(), targets.len())));
    }
    if config.epochs < 1 || config.batch_size < 1 || !(config.lr > 0.0) {
        return Err(Error::Config("baseline epochs, batch_size and lr must be positive".into()));
    }
    config.augment.validate()?;
    let n = targets.len();
    let mean = targets.iter().sum::<f64>() / n as f64;
    let sd = (targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let std = if sd > 0.0 { sd } else { 1.0 };
    let z: Vec<f64> = targets.iter().map(|t| (t - mean) / std).collect();
    let norm: Vec<Image2D> = xrays.iter().map(|x| to_normalized(x, xray_norm.scale, xray_norm.offset)).collect::<Result<_>>()?;

    let mut reg = Regressor::new(config.base_channels, config.norm_groups, config.rng_seed)?;
    let mut opt = AdamW::new(reg.param_count(), config.weight_decay);
    for epoch in 0..config.epochs {
        let lr = lr_linear_decay(epoch, config.lr, config.epochs / 2, config.epochs)?;
        for (bi, chunk) in epoch_order(n, config.rng_seed, epoch).chunks(config.batch_size).enumerate() {
            let mut rng = batch_rng(config.rng_seed, epoch, bi);
            reg.zero_grad();
            let mut loss = 0.0;
            for &i in chunk {
                let draw = AffineDraw::sample(&config.augment, &mut rng);
                let x = image_to_tensor(&apply_affine(&norm[i], &draw)?);
                let (out, cache) = reg.forward(&x);
                let err = out - z[i];
                loss += err * err / chunk.len() as f64;
                reg.backward(&cache, 2.0 * err / chunk.len() as f64);
            }
            if !loss.is_finite() {
                return Err(Error::Diverged { stage: "baseline".into(), epoch, step: bi });
            }
            opt.update(&mut reg, lr);
        }
    }
    Ok(RegressionCheckpoint {
        meta: RegressionMeta {
            epoch: config.epochs,
            config: config.clone(),
            target_mean: mean,
            target_std: std,
            xray_normalization: xray_norm,
            manifest_hash: manifest_hash.to_string(),
            config_hash: config_hash.to_string(),
            param_checksum: reg.checksum(),
        },
        regressor: reg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Side;

    #[test]
    fn linear_decay_values() {
        assert_eq!(lr_linear_decay(0, 2e-4, 5, 10).unwrap(), 2e-4);
        assert!((lr_linear_decay(9, 2e-4, 5, 10).unwrap() - 2e-4 / 5.0).abs() < 1e-18);
        for e in 0..10 {
            assert_eq!(lr_linear_decay(e, 1.0, 10, 10).unwrap(), 1.0);
        }
        let lrs: Vec<f64> = (0..10).map(|e| lr_linear_decay(e, 1.0, 3, 10).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(lr_linear_decay(10, 1.0, 3, 10).is_err());
        assert!(lr_linear_decay(0, 1.0, 11, 10).is_err());
    }

    #[test]
    fn sgdr_matches_recurrence() {
        // scalar oracle: walk epoch by epoch, restarting when the counter reaches the period
        let (eta_min, eta_max) = (1e-6, 1e-3);
        let (mut t_cur, mut t_i) = (0.0f64, 10.0f64);
        for epoch in 0..30 {
            let expect = eta_min + 0.5 * (eta_max - eta_min) * (1.0 + (std::f64::consts::PI * t_cur / t_i).cos());
            let got = lr_sgdr(epoch, eta_min, eta_max, 10, 2).unwrap();
            assert!((got - expect).abs() < 1e-15, "epoch {epoch}");
            t_cur += 1.0;
            if t_cur >= t_i {
                t_cur = 0.0;
                t_i *= 2.0;
            }
        }
        for restart in [0, 10, 30] {
            assert_eq!(lr_sgdr(restart, 0.0, 1.0, 10, 2).unwrap(), 1.0);
        }
        assert!((lr_sgdr(5, 0.0, 1.0, 10, 2).unwrap() - 0.5).abs() < 1e-12);
        assert!(lr_sgdr(29, 0.0, 1.0, 10, 2).unwrap() < 0.01);
        assert!(lr_sgdr(0, 0.0, 1.0, 0, 2).is_err());
        assert!(lr_sgdr(0, 2.0, 1.0, 10, 2).is_err());
    }

    fn pair(w: usize, h: usize) -> ImagePair {
        let x = Image2D::from_fn(w, h, IntensityUnit::XrayRelative, |i, j| ((i * 7 + j * 3) % 11) as f32 + 0.25 * i as f32).unwrap();
        let t = Image2D::from_fn(w, h, IntensityUnit::DensityLineIntegral, |i, j| (i * j) as f32).unwrap();
        ImagePair::new("p", x, t, PairStage::Stage1Bones, Side::Left).unwrap()
    }

    #[test]
    fn augment_identity_and_flip_involution() {
        let p = pair(9, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (q, _) = augment_pair(&p, &AugmentParams::none(), &mut rng).unwrap();
        assert_eq!(q.xray, p.xray);
        assert_eq!(q.target, p.target);
        let flip = AffineDraw { hflip: true, ..AffineDraw::identity() };
        let twice = apply_affine(&apply_affine(&p.xray, &flip).unwrap(), &flip).unwrap();
        assert_eq!(twice, p.xray);
        let once = apply_affine(&p.xray, &flip).unwrap();
        assert_eq!(once.get(0, 3), p.xray.get(8, 3));
    }

    #[test]
    fn augment_keeps_registration() {
        let p = pair(16, 12);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (q, draw) = augment_pair(&p, &AugmentParams::default(), &mut rng).unwrap();
            assert_eq!(apply_affine(&p.target, &draw).unwrap(), q.target);
            assert_eq!(apply_affine(&p.xray, &draw).unwrap(), q.xray);
            assert!(q.xray.pixels().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn pure_rotation_by_quarter_turn_on_square() {
        let img = Image2D::from_fn(5, 5, IntensityUnit::XrayRelative, |i, j| (i + 10 * j) as f32).unwrap();
        let d = AffineDraw { rotation_deg: 90.0, ..AffineDraw::identity() };
        let r = apply_affine(&img, &d).unwrap();
        // forward map sends (x, y) to (−(y−2)+2, (x−2)+2) about the center
        for j in 0..5 {
            for i in 0..5 {
                let (x, y) = (j, 4 - i);
                assert!((r.get(i, j) - img.get(x, y)).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn adamw_first_step_and_decay() {
        struct One(crate::nn::Layer);
        impl ParamSet for One {
            fn visit(&self, f: &mut dyn FnMut(&crate::nn::Param)) {
                self.0.visit_params(f)
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(&mut crate::nn::Param)) {
                self.0.visit_params_mut(f)
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = One(crate::nn::Layer::Conv(crate::nn::Conv2d::new(1, 1, 1, 1, 0, &mut rng)));
        let w0 = net.flat_values();
        net.visit_mut(&mut |p| p.grad.iter_mut().for_each(|g| *g = 0.5));
        let mut opt = AdamW::new(net.param_count(), 0.1);
        opt.update(&mut net, 0.01);
        let w1 = net.flat_values();
        // bias-corrected first step is lr·sign(g); weights also shrink by lr·wd
        let expect_w = w0[0] * (1.0 - 0.01 * 0.1) - 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((w1[0] - expect_w).abs() < 1e-12);
        assert!((w1[1] - (w0[1] - 0.01 * 0.5 / (0.5 + 1e-8))).abs() < 1e-12);
    }
}
