//! Synthetic hip phantoms: density volumes built from ellipsoids, mask-gated
//! parallel projections, simulated radiographs and complete datasets with
//! reference BMD values.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bmd::masked_average;
use crate::error::{Error, Result};
use crate::imaging::{
    normalize_to_canvas, write_image, BmdGroundTruth, Canvas, DatasetManifest, Image2D, IntensityUnit, LinearModel,
    ManifestEntry, Normalization, Side, Split, MANIFEST_VERSION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoneLabel {
    Pelvis,
    Femur,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipsoid {
    /// Voxel coordinates (x, y, z).
    pub center: [f64; 3],
    /// Semi-axes in voxels.
    pub radii: [f64; 3],
    /// mg/cm³.
    pub density: f64,
    pub label: BoneLabel,
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

/// Plane `{p : (p − point)·normal ≥ 0}` selecting the proximal sub-region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CutPlane {
    pub point: [f64; 3],
    pub normal: [f64; 3],
}

impl CutPlane {
    fn keeps(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| (p[a] - self.point[a]) * self.normal[a]).sum::<f64>() >= 0.0
    }

    fn mirrored_x(&self, nx: usize) -> CutPlane {
        let mut c = *self;
        c.point[0] = (nx - 1) as f64 - c.point[0];
        c.normal[0] = -c.normal[0];
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Fraction of the clean image maximum.
    pub gaussian_sigma: f64,
    pub gain_range: [f64; 2],
    pub bias_range: [f64; 2],
}

/// Random soft-tissue inhomogeneities (fat, muscle, gas) inside the body.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoftBlobSpec {
    pub count: usize,
    /// Semi-axis range, voxels.
    pub radius_range: [f64; 2],
    /// mg/cm³ equivalent.
    pub density_range: [f64; 2],
}

/// Per-case anatomical variation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterSpec {
    /// Uniform ± shift of each center, voxels.
    pub center_voxels: f64,
    /// Uniform ± relative change of each semi-axis.
    pub radius_fraction: f64,
    /// Uniform ± relative change of each primitive's density.
    pub density_fraction: f64,
    /// Case-wide multiplier range for every femur primitive.
    pub femur_density_factor: [f64; 2],
    /// Drawn independently of the femur factor.
    pub pelvis_density_factor: [f64; 2],
    /// Case-wide multiplier range for the soft-tissue density.
    pub soft_tissue_factor: [f64; 2],
}

/// Omitted keys take the [`Default`] values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    /// (nx, ny, nz); projections run along z, so images are nx wide and ny tall.
    pub volume_dims: [usize; 3],
    /// mm.
    pub voxel_spacing: f64,
    /// Primitives of the left hip.
    pub bone_primitives: Vec<Ellipsoid>,
    /// Add an x-mirrored copy of every primitive (the right hip).
    pub mirror: bool,
    /// mg/cm³ equivalent.
    pub soft_tissue_density: f64,
    /// Semi-axes of the body cross-section as fractions of (nx, nz).
    pub body_fraction: [f64; 2],
    pub soft_blobs: SoftBlobSpec,
    pub proximal_cut: CutPlane,
    pub noise: NoiseSpec,
    pub jitter: JitterSpec,
    /// Calibration insert densities, mg/cm³.
    pub insert_densities: Vec<f64>,
    pub bmd_model: BmdGroundTruth,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        use BoneLabel::{Femur, Pelvis};
        let e = |c: [f64; 3], r: [f64; 3], density: f64, label| Ellipsoid { center: c, radii: r, density, label };
        PhantomSpec {
            volume_dims: [64, 64, 24],
            voxel_spacing: 1.0,
            bone_primitives: vec![
                e([10.0, 12.0, 12.0], [9.0, 10.0, 3.5], 220.0, Pelvis),
                e([22.0, 21.0, 12.0], [6.0, 5.0, 5.0], 260.0, Pelvis),
                e([28.0, 30.0, 12.0], [4.0, 3.0, 3.0], 240.0, Pelvis),
                e([21.0, 27.0, 12.0], [4.5, 4.5, 4.5], 420.0, Femur),
                e([16.0, 31.0, 12.0], [5.0, 2.5, 3.0], 380.0, Femur),
                e([10.0, 33.0, 12.0], [3.5, 4.0, 4.0], 330.0, Femur),
                e([14.0, 40.0, 12.0], [2.0, 2.0, 2.0], 340.0, Femur),
                e([11.0, 50.0, 12.0], [3.5, 13.0, 3.5], 480.0, Femur),
            ],
            mirror: true,
            soft_tissue_density: 60.0,
            body_fraction: [0.47, 0.45],
            soft_blobs: SoftBlobSpec { count: 6, radius_range: [3.0, 8.0], density_range: [10.0, 160.0] },
            proximal_cut: CutPlane { point: [0.0, 42.0, 0.0], normal: [0.0, -1.0, 0.0] },
            noise: NoiseSpec { gaussian_sigma: 0.01, gain_range: [0.7, 1.3], bias_range: [-300.0, 300.0] },
            jitter: JitterSpec {
                center_voxels: 1.0,
                radius_fraction: 0.08,
                density_fraction: 0.05,
                femur_density_factor: [0.7, 1.3],
                pelvis_density_factor: [0.7, 1.3],
                soft_tissue_factor: [0.6, 1.6],
            },
            insert_densities: vec![0.0, 50.0, 100.0, 150.0, 200.0],
            bmd_model: BmdGroundTruth { a_known: 3e-4, b_known: 0.1, noise_sd: 0.01, threshold_t: 1000.0 },
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("phantom: {m}")));
        if self.volume_dims.iter().any(|&d| d == 0) {
            return bad(format!("volume_dims must be positive, got {:?}", self.volume_dims));
        }
        if !(self.voxel_spacing > 0.0) {
            return bad("voxel_spacing must be > 0".into());
        }
        for (i, p) in self.bone_primitives.iter().enumerate() {
            if p.radii.iter().any(|&r| !(r > 0.0)) {
                return bad(format!("bone_primitives[{i}] radii must be > 0"));
            }
            if !(p.density >= 0.0) {
                return bad(format!("bone_primitives[{i}] density must be ≥ 0"));
            }
        }
        if !(self.soft_tissue_density >= 0.0) {
            return bad("soft_tissue_density must be ≥ 0".into());
        }
        let [glo, ghi] = self.noise.gain_range;
        if !(glo > 0.0) || ghi < glo {
            return bad(format!("noise.gain_range must satisfy 0 < lo ≤ hi, got {:?}", self.noise.gain_range));
        }
        if self.noise.bias_range[1] < self.noise.bias_range[0] || !(self.noise.gaussian_sigma >= 0.0) {
            return bad("noise.bias_range must be ordered and gaussian_sigma ≥ 0".into());
        }
        let b = &self.soft_blobs;
        if b.count > 0 && (!(b.radius_range[0] > 0.0) || b.radius_range[1] < b.radius_range[0] || !(b.density_range[0] >= 0.0) || b.density_range[1] < b.density_range[0]) {
            return bad("soft_blobs ranges must be ordered with positive radii and non-negative densities".into());
        }
        let j = &self.jitter;
        let factors = [j.femur_density_factor, j.pelvis_density_factor, j.soft_tissue_factor];
        if factors.iter().any(|[lo, hi]| !(*lo > 0.0) || hi < lo) || j.radius_fraction >= 1.0 || j.density_fraction >= 1.0 {
            return bad("jitter ranges must keep radii and densities positive".into());
        }
        if self.proximal_cut.normal.iter().all(|&n| n == 0.0) {
            return bad("proximal_cut.normal must be non-zero".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskLabel {
    Pelvis,
    Femur,
    ProximalFemur,
    /// Pelvis ∪ femur.
    Bones,
    /// Every voxel outside the bone masks.
    SoftTissue,
}

impl FromStr for MaskLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pelvis" => Ok(MaskLabel::Pelvis),
            "femur" => Ok(MaskLabel::Femur),
            "proximal_femur" => Ok(MaskLabel::ProximalFemur),
            "bones" => Ok(MaskLabel::Bones),
            "soft_tissue" => Ok(MaskLabel::SoftTissue),
            other => Err(Error::invalid(format!("unknown mask label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis3 {
    X,
    Y,
    Z,
}

/// Density volume with label masks. Index `x + nx·(y + ny·z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub dims: [usize; 3],
    pub voxel_spacing: f64,
    pub densities: Vec<f64>,
    pub pelvis: Vec<bool>,
    pub femur: Vec<bool>,
    pub proximal_femur: Vec<bool>,
    pub warnings: Vec<String>,
}

impl Volume3D {
    /// Volume with the given densities and empty masks.
    pub fn from_densities(dims: [usize; 3], voxel_spacing: f64, densities: Vec<f64>) -> Result<Self> {
        let n = dims.iter().product();
        if densities.len() != n {
            return Err(Error::invalid(format!("{} densities for {n} voxels", densities.len())));
        }
        if densities.iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::invalid("densities must be finite and ≥ 0"));
        }
        Ok(Volume3D {
            dims,
            voxel_spacing,
            densities,
            pelvis: vec![false; n],
            femur: vec![false; n],
            proximal_femur: vec![false; n],
            warnings: Vec::new(),
        })
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn mask(&self, label: MaskLabel) -> Vec<bool> {
        match label {
            MaskLabel::Pelvis => self.pelvis.clone(),
            MaskLabel::Femur => self.femur.clone(),
            MaskLabel::ProximalFemur => self.proximal_femur.clone(),
            MaskLabel::Bones => self.pelvis.iter().zip(&self.femur).map(|(a, b)| *a || *b).collect(),
            MaskLabel::SoftTissue => self.pelvis.iter().zip(&self.femur).map(|(a, b)| !(*a || *b)).collect(),
        }
    }

    /// Mean density over the proximal femur voxels whose x coordinate falls in
    /// the image half for `side`.
    pub fn proximal_mean_density(&self, side: Side) -> Option<f64> {
        let split = self.dims[0].div_ceil(2);
        let (mut sum, mut n) = (0.0, 0usize);
        for z in 0..self.dims[2] {
            for y in 0..self.dims[1] {
                for x in 0..self.dims[0] {
                    let on_side = match side {
                        Side::Left => x < split,
                        Side::Right => x >= split,
                    };
                    let i = self.index(x, y, z);
                    if on_side && self.proximal_femur[i] {
                        sum += self.densities[i];
                        n += 1;
                    }
                }
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

fn jittered(p: &Ellipsoid, j: &JitterSpec, factor: f64, rng: &mut impl Rng) -> Ellipsoid {
    let mut u = |a: f64| if a > 0.0 { rng.gen_range(-a..=a) } else { 0.0 };
    let mut q = *p;
    for a in 0..3 {
        q.center[a] += u(j.center_voxels);
    }
    for a in 0..3 {
        q.radii[a] *= 1.0 + u(j.radius_fraction);
    }
    q.density *= factor * (1.0 + u(j.density_fraction));
    q
}

/// Rasterizes the phantom with per-case jitter drawn from `rng_seed`.
/// Overlapping primitives keep the larger density.
pub fn make_phantom_volume(spec: &PhantomSpec, rng_seed: u64) -> Result<Volume3D> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let [nx, ny, nz] = spec.volume_dims;
    let mut draw = |[lo, hi]: [f64; 2]| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let femur_factor = draw(spec.jitter.femur_density_factor);
    let pelvis_factor = draw(spec.jitter.pelvis_density_factor);
    let soft = spec.soft_tissue_density * draw(spec.jitter.soft_tissue_factor);

    let mut vol = Volume3D::from_densities(spec.volume_dims, spec.voxel_spacing, vec![0.0; nx * ny * nz])?;

    let (cx, cz) = ((nx as f64 - 1.0) / 2.0, (nz as f64 - 1.0) / 2.0);
    let (ax, az) = (spec.body_fraction[0] * nx as f64, spec.body_fraction[1] * nz as f64);
    if ax > 0.0 && az > 0.0 {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let r = ((x as f64 - cx) / ax).powi(2) + ((z as f64 - cz) / az).powi(2);
                    if r <= 1.0 {
                        let i = vol.index(x, y, z);
                        vol.densities[i] = soft;
                    }
                }
            }
        }
        let mut brng = ChaCha8Rng::seed_from_u64(rng_seed);
        brng.set_stream(2);
        let b = spec.soft_blobs;
        let mut u = |[lo, hi]: [f64; 2]| if hi > lo { brng.gen_range(lo..=hi) } else { lo };
        for _ in 0..b.count {
            let blob = Ellipsoid {
                center: [u([cx - ax, cx + ax]), u([0.0, ny as f64 - 1.0]), u([cz - az, cz + az])],
                radii: [u(b.radius_range), u(b.radius_range), u(b.radius_range)],
                density: u(b.density_range),
                label: BoneLabel::Pelvis,
            };
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let i = vol.index(x, y, z);
                        if vol.densities[i] > 0.0 && blob.contains([x as f64, y as f64, z as f64]) {
                            vol.densities[i] = blob.density;
                        }
                    }
                }
            }
        }
    }

    // (primitive, cut that applies to it)
    let mut prims: Vec<(Ellipsoid, CutPlane)> = Vec::new();
    for p in &spec.bone_primitives {
        let factor = match p.label {
            BoneLabel::Femur => femur_factor,
            BoneLabel::Pelvis => pelvis_factor,
        };
        prims.push((jittered(p, &spec.jitter, factor, &mut rng), spec.proximal_cut));
        if spec.mirror {
            let mut m = *p;
            m.center[0] = (nx - 1) as f64 - m.center[0];
            prims.push((jittered(&m, &spec.jitter, factor, &mut rng), spec.proximal_cut.mirrored_x(nx)));
        }
    }

    for (k, (p, cut)) in prims.iter().enumerate() {
        let lo = |a: usize| (p.center[a] - p.radii[a]).floor().max(0.0) as usize;
        let hi = |a: usize| ((p.center[a] + p.radii[a]).ceil()).min(spec.volume_dims[a] as f64 - 1.0);
        let (hx, hy, hz) = (hi(0), hi(1), hi(2));
        if hx < 0.0 || hy < 0.0 || hz < 0.0 {
            vol.warnings.push(format!("primitive {k} lies entirely outside the volume"));
            continue;
        }
        let mut touched = false;
        for z in lo(2)..=hz as usize {
            for y in lo(1)..=hy as usize {
                for x in lo(0)..=hx as usize {
                    let pt = [x as f64, y as f64, z as f64];
                    if !p.contains(pt) {
                        continue;
                    }
                    touched = true;
                    let i = vol.index(x, y, z);
                    // bone replaces soft tissue; overlapping bones keep the denser one
                    vol.densities[i] = if vol.pelvis[i] || vol.femur[i] { vol.densities[i].max(p.density) } else { p.density };
                    match p.label {
                        BoneLabel::Pelvis => vol.pelvis[i] = true,
                        BoneLabel::Femur => {
                            vol.femur[i] = true;
                            if cut.keeps(pt) {
                                vol.proximal_femur[i] = true;
                            }
                        }
                    }
                }
            }
        }
        if !touched {
            vol.warnings.push(format!("primitive {k} lies entirely outside the volume"));
        }
    }
    Ok(vol)
}

/// Parallel-ray line integral `Σ density × spacing` along `axis`, restricted to
/// `mask` when given. The output spans the two remaining axes in index order
/// (the lower-index axis is the image width).
pub fn project_volume(volume: &Volume3D, mask: Option<MaskLabel>, axis: Axis3) -> Result<Image2D> {
    let [nx, ny, nz] = volume.dims;
    let m = mask.map(|l| volume.mask(l));
    let (w, h) = match axis {
        Axis3::Z => (nx, ny),
        Axis3::Y => (nx, nz),
        Axis3::X => (ny, nz),
    };
    let mut out = vec![0.0f64; w * h];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = volume.index(x, y, z);
                if m.as_ref().is_some_and(|m| !m[i]) {
                    continue;
                }
                let pix = match axis {
                    Axis3::Z => y * w + x,
                    Axis3::Y => z * w + x,
                    Axis3::X => z * w + y,
                };
                out[pix] += volume.densities[i] * volume.voxel_spacing;
            }
        }
    }
    Image2D::new(w, h, out.into_iter().map(|v| v as f32).collect(), IntensityUnit::DensityLineIntegral)
}

/// Least-squares raw → density line from phantom insert measurements.
pub fn calibrate_intensity(samples: &[(f64, f64)]) -> Result<LinearModel> {
    let raw: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let density: Vec<f64> = samples.iter().map(|s| s.1).collect();
    LinearModel::fit(&raw, &density)
}

/// `gain·(bones + soft) + bias` plus Gaussian noise with standard deviation
/// `gaussian_sigma` × the clean image maximum.
pub fn synthesize_xray(
    drr_bones: &Image2D,
    drr_soft: &Image2D,
    gain: f64,
    bias: f64,
    gaussian_sigma: f64,
    rng_seed: u64,
) -> Result<Image2D> {
    if !drr_bones.same_shape(drr_soft) {
        return Err(Error::invalid("bone and soft-tissue projections differ in size"));
    }
    if !(gain > 0.0) {
        return Err(Error::invalid(format!("gain must be > 0, got {gain}")));
    }
    let clean: Vec<f64> = drr_bones
        .pixels()
        .iter()
        .zip(drr_soft.pixels())
        .map(|(b, s)| gain * (*b as f64 + *s as f64) + bias)
        .collect();
    let sd = gaussian_sigma * clean.iter().copied().fold(f64::NEG_INFINITY, f64::max).abs();
    let px: Vec<f32> = if sd > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let normal = Normal::new(0.0, sd).map_err(|e| Error::invalid(e.to_string()))?;
        clean.iter().map(|v| (v + normal.sample(&mut rng)) as f32).collect()
    } else {
        clean.iter().map(|&v| v as f32).collect()
    };
    Image2D::new(drr_bones.width(), drr_bones.height(), px, IntensityUnit::XrayRelative)
}

/// One synthetic subject.
#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub id: String,
    pub side: Side,
    pub volume: Volume3D,
    pub xray: Image2D,
    pub drr_stage1: Image2D,
    pub drr_stage2: Image2D,
    pub true_dxa_bmd: f64,
    pub true_qct_bmd: f64,
}

impl PhantomCase {
    /// Projects `volume` and assembles the case. Fails when the selected side
    /// has no proximal femur voxels.
    pub fn build(
        id: String,
        volume: Volume3D,
        side: Side,
        spec: &PhantomSpec,
        canvas: Canvas,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let true_qct_bmd = volume
            .proximal_mean_density(side)
            .ok_or_else(|| Error::invalid(format!("case {id}: proximal femur mask is empty")))?;
        let drr_stage1 = project_volume(&volume, Some(MaskLabel::Bones), Axis3::Z)?;
        let drr_stage2 = project_volume(&volume, Some(MaskLabel::ProximalFemur), Axis3::Z)?;
        let soft = project_volume(&volume, Some(MaskLabel::SoftTissue), Axis3::Z)?;
        let [glo, ghi] = spec.noise.gain_range;
        let [blo, bhi] = spec.noise.bias_range;
        let gain = if ghi > glo { rng.gen_range(glo..=ghi) } else { glo };
        let bias = if bhi > blo { rng.gen_range(blo..=bhi) } else { blo };
        let xray = synthesize_xray(&drr_stage1, &soft, gain, bias, spec.noise.gaussian_sigma, rng.gen())?;

        let gt = spec.bmd_model;
        let pf = normalize_to_canvas(&drr_stage2, side, canvas.width, canvas.height)?;
        let pf_average = masked_average(&pf, gt.threshold_t)?.value;
        let noise = if gt.noise_sd > 0.0 {
            Normal::new(0.0, gt.noise_sd).map_err(|e| Error::invalid(e.to_string()))?.sample(rng)
        } else {
            0.0
        };
        let true_dxa_bmd = gt.a_known * pf_average + gt.b_known + noise;
        Ok(PhantomCase { id, side, volume, xray, drr_stage1, drr_stage2, true_dxa_bmd, true_qct_bmd })
    }
}

/// Seed of case `index` derived from the dataset seed.
pub fn case_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates case `index` of a dataset; identical regardless of generation order.
pub fn generate_case(spec: &PhantomSpec, seed: u64, index: usize, canvas: Canvas) -> Result<PhantomCase> {
    let cs = case_seed(seed, index);
    let volume = make_phantom_volume(spec, cs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cs);
    rng.set_stream(1);
    let side = if !spec.mirror || rng.gen_bool(0.5) { Side::Left } else { Side::Right };
    PhantomCase::build(format!("case{index:04}"), volume, side, spec, canvas, &mut rng)
}

/// Simulated phantom scan of the calibration inserts and the fitted
/// raw → density line.
fn simulate_insert_calibration(spec: &PhantomSpec, seed: u64) -> Result<LinearModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let hu_per_density = rng.gen_range(0.9..1.1);
    let hu_offset = rng.gen_range(-20.0..20.0);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let samples: Vec<(f64, f64)> = spec
        .insert_densities
        .iter()
        .map(|&d| (d * hu_per_density + hu_offset + noise.sample(&mut rng), d))
        .collect();
    calibrate_intensity(&samples)
}

/// Writes `n_cases` cases plus `manifest.json` under `out_dir`.
pub fn generate_dataset(
    spec: &PhantomSpec,
    n_cases: usize,
    split_fraction: f64,
    rng_seed: u64,
    out_dir: &Path,
    canvas: Canvas,
    config_hash: &str,
) -> Result<DatasetManifest> {
    if n_cases < 2 {
        return Err(Error::invalid(format!("need at least 2 cases, got {n_cases}")));
    }
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(Error::invalid(format!("split_fraction must be in (0, 1), got {split_fraction}")));
    }
    spec.validate()?;
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;

    let n_train = ((n_cases as f64 * split_fraction).round() as usize).clamp(1, n_cases - 1);
    let mut entries = Vec::with_capacity(n_cases);
    let (mut target_max, mut x_min, mut x_max) = (0.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n_cases {
        let case = generate_case(spec, rng_seed, i, canvas)?;
        let split = if i < n_train { Split::Train } else { Split::Test };
        if split == Split::Train {
            for img in [&case.drr_stage1, &case.drr_stage2] {
                let c = normalize_to_canvas(img, case.side, canvas.width, canvas.height)?;
                target_max = target_max.max(c.max() as f64);
            }
            let xr = normalize_to_canvas(&case.xray, case.side, canvas.width, canvas.height)?;
            x_min = x_min.min(xr.min() as f64);
            x_max = x_max.max(xr.max() as f64);
        }
        let names = [
            format!("images/{}_xray.bdr", case.id),
            format!("images/{}_stage1.bdr", case.id),
            format!("images/{}_stage2.bdr", case.id),
        ];
        write_image(&case.xray, out_dir.join(&names[0]))?;
        write_image(&case.drr_stage1, out_dir.join(&names[1]))?;
        write_image(&case.drr_stage2, out_dir.join(&names[2]))?;
        let [xray_path, target_stage1_path, target_stage2_path] = names;
        entries.push(ManifestEntry {
            id: case.id,
            side: case.side,
            xray_path,
            target_stage1_path,
            target_stage2_path,
            true_dxa_bmd: case.true_dxa_bmd,
            true_qct_bmd: case.true_qct_bmd,
            split,
        });
    }

    let normalization = Normalization::new(if target_max > 0.0 { target_max } else { 1.0 }, 0.0)?;
    let half_range = 0.5 * (x_max - x_min) * 1.1;
    let xray_normalization =
        Normalization::new(if half_range > 0.0 { half_range } else { 1.0 }, 0.5 * (x_max + x_min))?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        seed: rng_seed,
        canvas,
        entries,
        normalization,
        xray_normalization,
        bmd_ground_truth: spec.bmd_model,
        intensity_calibration: simulate_insert_calibration(spec, rng_seed)?,
        config_hash: config_hash.to_string(),
    };
    manifest.write(out_dir.join("manifest.json"))?;
    Ok(manifest)
}
