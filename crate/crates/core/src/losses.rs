//! Generator and discriminator objectives: adversarial, feature matching, L1
//! and gradient correlation, each with its analytic gradient.
//!
//! Every function takes rasters as [`Tensor`]s; losses are averaged over
//! elements unless noted. Discriminator scores are logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

const NCC_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanMode {
    /// Log-likelihood objective on sigmoid-interpreted logits; the generator
    /// uses the non-saturating form.
    VanillaLog,
    LeastSquares,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_l1: f64,
    pub lambda_gc: f64,
    pub lambda_fm: f64,
    pub gan_mode: GanMode,
    /// Use `NCC_x + NCC_y` verbatim as the gradient-correlation term instead
    /// of the agreement-maximizing `2 − NCC_x − NCC_y`.
    pub gc_literal_sign: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_l1: 100.0,
            lambda_gc: 1.0,
            lambda_fm: 10.0,
            gan_mode: GanMode::VanillaLog,
            gc_literal_sign: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_l1", self.lambda_l1), ("lambda_gc", self.lambda_gc), ("lambda_fm", self.lambda_fm)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("loss.{name} must be a finite value ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-step loss values. `total_g` is the generator objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub gan_g: f64,
    pub gan_d: f64,
    pub fm: f64,
    pub l1: f64,
    pub gc: f64,
    pub total_g: f64,
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "{what}: shape {:?} does not match {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

struct NccParts {
    value: f64,
    centered_a: Vec<f64>,
    centered_b: Vec<f64>,
    saa: f64,
    sbb: f64,
    sab: f64,
}

fn ncc_parts(a: &[f64], b: &[f64]) -> NccParts {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let centered_a: Vec<f64> = a.iter().map(|v| v - ma).collect();
    let centered_b: Vec<f64> = b.iter().map(|v| v - mb).collect();
    let saa: f64 = centered_a.iter().map(|v| v * v).sum();
    let sbb: f64 = centered_b.iter().map(|v| v * v).sum();
    let sab: f64 = centered_a.iter().zip(&centered_b).map(|(x, y)| x * y).sum();
    let value = if saa == 0.0 || sbb == 0.0 { 0.0 } else { sab / (saa.sqrt() * sbb.sqrt() + NCC_EPS) };
    NccParts { value, centered_a, centered_b, saa, sbb, sab }
}

/// Zero-mean normalized cross-correlation over all elements. Constant inputs
/// give 0.
pub fn ncc(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same(a, b, "ncc")?;
    if a.len() < 2 {
        return Err(Error::invalid("ncc needs at least 2 pixels"));
    }
    Ok(ncc_parts(&a.data, &b.data).value)
}

/// NCC and its gradient with respect to `b`.
pub fn ncc_with_grad(a: &Tensor, b: &Tensor) -> Result<(f64, Tensor)> {
    check_same(a, b, "ncc")?;
    if a.len() < 2 {
        return Err(Error::invalid("ncc needs at least 2 pixels"));
    }
    let p = ncc_parts(&a.data, &b.data);
    let mut grad = Tensor::zeros(b.c, b.h, b.w);
    if p.saa > 0.0 && p.sbb > 0.0 {
        let (ra, rb) = (p.saa.sqrt(), p.sbb.sqrt());
        let d = ra * rb + NCC_EPS;
        for ((g, ca), cb) in grad.data.iter_mut().zip(&p.centered_a).zip(&p.centered_b) {
            *g = ca / d - p.sab * ra * (cb / rb) / (d * d);
        }
    }
    Ok((p.value, grad))
}

fn require_gradient_size(img: &Tensor) -> Result<()> {
    if img.c != 1 || img.h < 3 || img.w < 3 {
        return Err(Error::invalid(format!(
            "image gradients need a single-channel image of at least 3×3, got {:?}",
            img.shape()
        )));
    }
    Ok(())
}

/// Central differences in the interior, one-sided differences on the border.
/// `gx` runs along the width, `gy` along the height.
pub fn image_gradients(img: &Tensor) -> Result<(Tensor, Tensor)> {
    require_gradient_size(img)?;
    let (h, w) = (img.h, img.w);
    let at = |y: usize, x: usize| img.data[y * w + x];
    let mut gx = Tensor::zeros(1, h, w);
    let mut gy = Tensor::zeros(1, h, w);
    for y in 0..h {
        for x in 0..w {
            gx.data[y * w + x] = match x {
                0 => at(y, 1) - at(y, 0),
                _ if x == w - 1 => at(y, w - 1) - at(y, w - 2),
                _ => 0.5 * (at(y, x + 1) - at(y, x - 1)),
            };
            gy.data[y * w + x] = match y {
                0 => at(1, x) - at(0, x),
                _ if y == h - 1 => at(h - 1, x) - at(h - 2, x),
                _ => 0.5 * (at(y + 1, x) - at(y - 1, x)),
            };
        }
    }
    Ok((gx, gy))
}

/// Adjoint of [`image_gradients`].
pub fn image_gradients_backward(dgx: &Tensor, dgy: &Tensor) -> Tensor {
    let (h, w) = (dgx.h, dgx.w);
    let mut d = Tensor::zeros(1, h, w);
    for y in 0..h {
        for x in 0..w {
            let gx = dgx.data[y * w + x];
            match x {
                0 => {
                    d.data[y * w + 1] += gx;
                    d.data[y * w] -= gx;
                }
                _ if x == w - 1 => {
                    d.data[y * w + w - 1] += gx;
                    d.data[y * w + w - 2] -= gx;
                }
                _ => {
                    d.data[y * w + x + 1] += 0.5 * gx;
                    d.data[y * w + x - 1] -= 0.5 * gx;
                }
            }
            let gy = dgy.data[y * w + x];
            match y {
                0 => {
                    d.data[w + x] += gy;
                    d.data[x] -= gy;
                }
                _ if y == h - 1 => {
                    d.data[(h - 1) * w + x] += gy;
                    d.data[(h - 2) * w + x] -= gy;
                }
                _ => {
                    d.data[(y + 1) * w + x] += 0.5 * gy;
                    d.data[(y - 1) * w + x] -= 0.5 * gy;
                }
            }
        }
    }
    d
}

/// `2 − NCC(∇x real, ∇x fake) − NCC(∇y real, ∇y fake)`, in `[0, 4]`.
pub fn gradient_correlation_loss(fake: &Tensor, real: &Tensor) -> Result<f64> {
    Ok(gradient_correlation_with_grad(fake, real, false)?.0)
}

/// Gradient-correlation loss and its gradient with respect to `fake`.
/// With `literal_sign` the loss is `NCC_x + NCC_y`.
pub fn gradient_correlation_with_grad(fake: &Tensor, real: &Tensor, literal_sign: bool) -> Result<(f64, Tensor)> {
    check_same(fake, real, "gradient correlation")?;
    let (fx, fy) = image_gradients(fake)?;
    let (rx, ry) = image_gradients(real)?;
    let (nx, mut dx) = ncc_with_grad(&rx, &fx)?;
    let (ny, mut dy) = ncc_with_grad(&ry, &fy)?;
    let (loss, sign) = if literal_sign { (nx + ny, 1.0) } else { (2.0 - nx - ny, -1.0) };
    dx.scale(sign);
    dy.scale(sign);
    Ok((loss, image_gradients_backward(&dx, &dy)))
}

/// Mean absolute difference.
pub fn l1_loss(fake: &Tensor, real: &Tensor) -> Result<f64> {
    check_same(fake, real, "l1")?;
    let n = fake.len() as f64;
    Ok(fake.data.iter().zip(&real.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

pub fn l1_with_grad(fake: &Tensor, real: &Tensor) -> Result<(f64, Tensor)> {
    let loss = l1_loss(fake, real)?;
    let n = fake.len() as f64;
    let data = fake
        .data
        .iter()
        .zip(&real.data)
        .map(|(a, b)| {
            let d = a - b;
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss, Tensor::from_vec(fake.c, fake.h, fake.w, data)))
}

/// `Σ_i (1/N_i) ‖real_i − fake_i‖₁` over one discriminator's feature layers.
pub fn feature_matching_layers(real: &[Tensor], fake: &[Tensor]) -> Result<f64> {
    if real.len() != fake.len() {
        return Err(Error::invalid(format!(
            "feature lists differ in length: {} vs {}",
            real.len(),
            fake.len()
        )));
    }
    let mut total = 0.0;
    for (r, f) in real.iter().zip(fake) {
        check_same(r, f, "feature matching")?;
        let n = r.len() as f64;
        total += r.data.iter().zip(&f.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    }
    Ok(total)
}

/// Feature matching summed over discriminator scales.
pub fn feature_matching_loss(real: &[Vec<Tensor>], fake: &[Vec<Tensor>]) -> Result<f64> {
    if real.len() != fake.len() {
        return Err(Error::invalid("feature matching needs the same number of scales"));
    }
    real.iter().zip(fake).map(|(r, f)| feature_matching_layers(r, f)).sum()
}

/// Gradients of [`feature_matching_layers`] with respect to the fake features;
/// real features are constants.
pub fn feature_matching_grads(real: &[Tensor], fake: &[Tensor]) -> Result<Vec<Tensor>> {
    if real.len() != fake.len() {
        return Err(Error::invalid("feature lists differ in length"));
    }
    real.iter()
        .zip(fake)
        .map(|(r, f)| {
            check_same(r, f, "feature matching")?;
            let n = r.len() as f64;
            let data = f
                .data
                .iter()
                .zip(&r.data)
                .map(|(a, b)| {
                    if a > b {
                        1.0 / n
                    } else if a < b {
                        -1.0 / n
                    } else {
                        0.0
                    }
                })
                .collect();
            Ok(Tensor::from_vec(f.c, f.h, f.w, data))
        })
        .collect()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mean(t: &Tensor, f: impl Fn(f64) -> f64) -> f64 {
    t.data.iter().map(|&v| f(v)).sum::<f64>() / t.len() as f64
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_vec(t.c, t.h, t.w, t.data.iter().map(|&v| f(v)).collect())
}

/// Discriminator loss for one discriminator (minimization form), averaged over
/// patches. For the log mode this is `−E[log D(real)] − E[log(1 − D(fake))]`.
pub fn adversarial_loss_d(real_scores: &Tensor, fake_scores: &Tensor, mode: GanMode) -> f64 {
    match mode {
        GanMode::VanillaLog => mean(real_scores, |s| softplus(-s)) + mean(fake_scores, softplus),
        GanMode::LeastSquares => mean(real_scores, |s| (s - 1.0) * (s - 1.0)) + mean(fake_scores, |s| s * s),
    }
}

/// Gradients of [`adversarial_loss_d`] with respect to the real and fake logits.
pub fn adversarial_loss_d_grads(real_scores: &Tensor, fake_scores: &Tensor, mode: GanMode) -> (Tensor, Tensor) {
    let (nr, nf) = (real_scores.len() as f64, fake_scores.len() as f64);
    match mode {
        GanMode::VanillaLog => (
            map(real_scores, |s| (sigmoid(s) - 1.0) / nr),
            map(fake_scores, |s| sigmoid(s) / nf),
        ),
        GanMode::LeastSquares => (
            map(real_scores, |s| 2.0 * (s - 1.0) / nr),
            map(fake_scores, |s| 2.0 * s / nf),
        ),
    }
}

/// Generator adversarial loss for one discriminator: `−E[log D(fake)]` in the
/// log mode, `E[(D(fake) − 1)²]` in least squares.
pub fn adversarial_loss_g(fake_scores: &Tensor, mode: GanMode) -> f64 {
    match mode {
        GanMode::VanillaLog => mean(fake_scores, |s| softplus(-s)),
        GanMode::LeastSquares => mean(fake_scores, |s| (s - 1.0) * (s - 1.0)),
    }
}

pub fn adversarial_loss_g_grad(fake_scores: &Tensor, mode: GanMode) -> Tensor {
    let n = fake_scores.len() as f64;
    match mode {
        GanMode::VanillaLog => map(fake_scores, |s| (sigmoid(s) - 1.0) / n),
        GanMode::LeastSquares => map(fake_scores, |s| 2.0 * (s - 1.0) / n),
    }
}

/// `λ_L1·l1 + λ_GC·gc + λ_FM·fm + gan_g`; `fm` and `gan_g` are already summed
/// over the discriminator scales.
pub fn total_generator_objective(weights: &LossWeights, gan_g: f64, fm: f64, l1: f64, gc: f64) -> f64 {
    weights.lambda_l1 * l1 + weights.lambda_gc * gc + weights.lambda_fm * fm + gan_g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(h: usize, w: usize, v: &[f64]) -> Tensor {
        Tensor::from_vec(1, h, w, v.to_vec())
    }

    fn random(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(1, h, w, (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn ncc_basic_cases() {
        let a = t(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let neg = map(&a, |v| -v);
        assert!((ncc(&a, &a).unwrap() - 1.0).abs() < 1e-8);
        assert!((ncc(&a, &neg).unwrap() + 1.0).abs() < 1e-8);
        // Centered A = [-1.5,-0.5,0.5,1.5], centered B = [-0.5,-1.5,1.5,0.5]:
        // Σab = 0.75+0.75+0.75+0.75 = 3, Σa² = Σb² = 5 → 3/5.
        let b = t(2, 2, &[2.0, 1.0, 4.0, 3.0]);
        assert!((ncc(&a, &b).unwrap() - 0.6).abs() < 1e-8);
        let flat = t(2, 2, &[3.0; 4]);
        assert_eq!(ncc(&a, &flat).unwrap(), 0.0);
        assert!(ncc(&a, &t(1, 2, &[1.0, 2.0])).is_err());
        assert!(ncc(&t(1, 1, &[1.0]), &t(1, 1, &[1.0])).is_err());
    }

    #[test]
    fn gradients_of_ramp_and_constant() {
        let ramp = Tensor::from_vec(1, 4, 5, (0..20).map(|i| (i % 5) as f64).collect());
        let (gx, gy) = image_gradients(&ramp).unwrap();
        assert!(gx.data.iter().all(|&v| v == 1.0));
        assert!(gy.data.iter().all(|&v| v == 0.0));
        let (cx, cy) = image_gradients(&t(3, 3, &[2.0; 9])).unwrap();
        assert!(cx.data.iter().chain(&cy.data).all(|&v| v == 0.0));
        assert!(image_gradients(&t(2, 3, &[0.0; 6])).is_err());
    }

    #[test]
    fn gradients_match_stencil_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = random(5, 5, &mut rng);
        let (gx, gy) = image_gradients(&img).unwrap();
        let p = |y: usize, x: usize| img.data[y * 5 + x];
        for y in 0..5 {
            for x in 0..5 {
                let ex = if x == 0 {
                    p(y, 1) - p(y, 0)
                } else if x == 4 {
                    p(y, 4) - p(y, 3)
                } else {
                    (p(y, x + 1) - p(y, x - 1)) / 2.0
                };
                let ey = if y == 0 {
                    p(1, x) - p(0, x)
                } else if y == 4 {
                    p(4, x) - p(3, x)
                } else {
                    (p(y + 1, x) - p(y - 1, x)) / 2.0
                };
                assert_eq!(gx.data[y * 5 + x], ex);
                assert_eq!(gy.data[y * 5 + x], ey);
            }
        }
    }

    #[test]
    fn gradient_correlation_special_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let real = random(6, 6, &mut rng);
        assert!(gradient_correlation_loss(&real, &real).unwrap().abs() < 1e-7);
        let affine = map(&real, |v| 3.0 * v + 7.0);
        assert!(gradient_correlation_loss(&affine, &real).unwrap().abs() < 1e-7);
        let neg = map(&real, |v| -v);
        assert!((gradient_correlation_loss(&neg, &real).unwrap() - 4.0).abs() < 1e-7);
    }

    #[test]
    fn l1_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(4, 4, &mut rng);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        let shifted = map(&a, |v| v - 0.25);
        assert!((l1_loss(&shifted, &a).unwrap() - 0.25).abs() < 1e-12);
        assert!(l1_loss(&a, &t(1, 2, &[0.0, 0.0])).is_err());
    }

    #[test]
    fn feature_matching_hand_value() {
        let real = vec![t(1, 4, &[1.0, 2.0, 3.0, 4.0])];
        let fake = vec![t(1, 4, &[1.0, 2.0, 3.0, 8.0])];
        assert_eq!(feature_matching_layers(&real, &real).unwrap(), 0.0);
        assert!((feature_matching_layers(&real, &fake).unwrap() - 1.0).abs() < 1e-12);
        let doubled = vec![t(1, 4, &[1.0, 2.0, 3.0, 12.0])];
        assert!((feature_matching_layers(&real, &doubled).unwrap() - 2.0).abs() < 1e-12);
        assert!(feature_matching_layers(&real, &[]).is_err());
        assert!(feature_matching_layers(&real, &[t(1, 3, &[0.0; 3])]).is_err());
    }

    #[test]
    fn adversarial_special_values() {
        let zeros = Tensor::zeros(1, 3, 3);
        let d = adversarial_loss_d(&zeros, &zeros, GanMode::VanillaLog);
        assert!((d - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((d - 1.3863).abs() < 1e-4);
        let ones = map(&zeros, |_| 1.0);
        assert_eq!(adversarial_loss_d(&ones, &zeros, GanMode::LeastSquares), 0.0);
        assert_eq!(adversarial_loss_g(&ones, GanMode::LeastSquares), 0.0);
    }

    #[test]
    fn total_objective_with_default_weights() {
        let w = LossWeights::default();
        assert_eq!(total_generator_objective(&w, 0.0, 0.0, 0.0, 0.0), 0.0);
        let v = total_generator_objective(&w, 0.3, 0.05, 0.1, 0.2);
        assert!((v - 11.0).abs() < 1e-12);
        let no_fm = LossWeights { lambda_fm: 0.0, ..w };
        assert_eq!(
            total_generator_objective(&no_fm, 0.3, 0.05, 0.1, 0.2),
            total_generator_objective(&no_fm, 0.3, 123.0, 0.1, 0.2)
        );
    }

    #[test]
    fn ncc_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random(4, 4, &mut rng);
        let b = random(4, 4, &mut rng);
        let (_, g) = ncc_with_grad(&a, &b).unwrap();
        let h = 1e-6;
        for i in 0..b.len() {
            let mut p = b.clone();
            let mut m = b.clone();
            p.data[i] += h;
            m.data[i] -= h;
            let fd = (ncc(&a, &p).unwrap() - ncc(&a, &m).unwrap()) / (2.0 * h);
            assert!((fd - g.data[i]).abs() < 1e-7, "{fd} vs {}", g.data[i]);
        }
    }

    #[test]
    fn adversarial_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = map(&random(3, 4, &mut rng), |v| 3.0 * v);
        let f = map(&random(3, 4, &mut rng), |v| 3.0 * v);
        for mode in [GanMode::VanillaLog, GanMode::LeastSquares] {
            let (gr, gf) = adversarial_loss_d_grads(&r, &f, mode);
            let gg = adversarial_loss_g_grad(&f, mode);
            let h = 1e-6;
            for i in 0..r.len() {
                let bump = |t: &Tensor, d: f64| {
                    let mut c = t.clone();
                    c.data[i] += d;
                    c
                };
                let fd_r = (adversarial_loss_d(&bump(&r, h), &f, mode) - adversarial_loss_d(&bump(&r, -h), &f, mode)) / (2.0 * h);
                let fd_f = (adversarial_loss_d(&r, &bump(&f, h), mode) - adversarial_loss_d(&r, &bump(&f, -h), mode)) / (2.0 * h);
                let fd_g = (adversarial_loss_g(&bump(&f, h), mode) - adversarial_loss_g(&bump(&f, -h), mode)) / (2.0 * h);
                assert!((fd_r - gr.data[i]).abs() < 1e-8);
                assert!((fd_f - gf.data[i]).abs() < 1e-8);
                assert!((fd_g - gg.data[i]).abs() < 1e-8);
            }
        }
    }
}
