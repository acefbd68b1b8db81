//! Generator backbones and the three-scale conditional patch discriminator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image2D, IntensityUnit};
use crate::nn::{avg_pool2x, avg_pool2x_backward, Cache, Conv2d, GroupNorm, Layer, Param, ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Stem, strided downsampling, residual trunk, mirrored upsampling.
    ResnetGlobal,
    /// Full-resolution branch fused with a downsampled residual branch.
    HrLite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub backbone: Backbone,
    pub base_channels: usize,
    pub n_downsamples: usize,
    pub n_res_blocks: usize,
    pub norm_groups: usize,
    pub output_activation: OutputActivation,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            backbone: Backbone::ResnetGlobal,
            base_channels: 32,
            n_downsamples: 2,
            n_res_blocks: 4,
            norm_groups: 8,
            output_activation: OutputActivation::Tanh,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 8 {
            return Err(Error::Config(format!("generator.base_channels must be ≥ 8, got {}", self.base_channels)));
        }
        if self.n_downsamples < 1 {
            return Err(Error::Config("generator.n_downsamples must be ≥ 1".into()));
        }
        if self.norm_groups == 0 || self.base_channels % self.norm_groups != 0 {
            return Err(Error::Config(format!(
                "generator.norm_groups {} must divide base_channels {}",
                self.norm_groups, self.base_channels
            )));
        }
        Ok(())
    }

    /// Required divisor of the canvas height and width.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.n_downsamples
    }
}

fn conv(in_c: usize, out_c: usize, k: usize, s: usize, p: usize, rng: &mut ChaCha8Rng) -> Layer {
    Layer::Conv(Conv2d::new(in_c, out_c, k, s, p, rng))
}

fn norm(groups: usize, ch: usize) -> Result<Layer> {
    Ok(Layer::GroupNorm(GroupNorm::new(groups, ch)?))
}

fn res_block(ch: usize, groups: usize, rng: &mut ChaCha8Rng) -> Result<Layer> {
    Ok(Layer::Residual(Box::new(Layer::Sequential(vec![
        conv(ch, ch, 3, 1, 1, rng),
        norm(groups, ch)?,
        Layer::Relu,
        conv(ch, ch, 3, 1, 1, rng),
        norm(groups, ch)?,
    ]))))
}

/// Downsampling ladder, residual trunk and upsampling ladder starting from
/// `base` channels.
fn encoder_decoder(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Layer>> {
    let (base, g) = (cfg.base_channels, cfg.norm_groups);
    let mut layers = Vec::new();
    let mut ch = base;
    for _ in 0..cfg.n_downsamples {
        layers.extend([conv(ch, ch * 2, 3, 2, 1, rng), norm(g, ch * 2)?, Layer::Relu]);
        ch *= 2;
    }
    for _ in 0..cfg.n_res_blocks {
        layers.push(res_block(ch, g, rng)?);
    }
    for _ in 0..cfg.n_downsamples {
        layers.extend([Layer::Upsample2x, conv(ch, ch / 2, 3, 1, 1, rng), norm(g, ch / 2)?, Layer::Relu]);
        ch /= 2;
    }
    Ok(layers)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
    net: Layer,
}

impl Generator {
    pub fn forward_tensor(&self, x: &Tensor) -> Result<(Tensor, Cache)> {
        self.check_input(x.c, x.h, x.w)?;
        Ok(self.net.forward(x))
    }

    pub fn infer_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.c, x.h, x.w)?;
        Ok(self.net.infer(x))
    }

    pub fn backward(&mut self, cache: &Cache, dy: &Tensor) -> Tensor {
        self.net.backward(cache, dy)
    }

    fn check_input(&self, c: usize, h: usize, w: usize) -> Result<()> {
        let m = self.config.spatial_multiple();
        if c != 1 {
            return Err(Error::invalid(format!("generator expects 1 channel, got {c}")));
        }
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::invalid(format!(
                "input {w}×{h} is not divisible by 2^{} = {m}",
                self.config.n_downsamples
            )));
        }
        Ok(())
    }
}

impl ParamSet for Generator {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.net.visit_params(f)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.net.visit_params_mut(f)
    }
}

/// Builds a generator with deterministic initialization: conv weights
/// N(0, 0.02), zero biases, identity norm affines.
pub fn build_generator(config: &GeneratorConfig, seed: u64) -> Result<Generator> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (base, g) = (config.base_channels, config.norm_groups);
    let net = match config.backbone {
        Backbone::ResnetGlobal => {
            let mut layers = vec![conv(1, base, 7, 1, 3, &mut rng), norm(g, base)?, Layer::Relu];
            layers.extend(encoder_decoder(config, &mut rng)?);
            layers.extend([conv(base, 1, 7, 1, 3, &mut rng), Layer::Tanh]);
            Layer::Sequential(layers)
        }
        Backbone::HrLite => {
            let stem = vec![conv(1, base, 3, 1, 1, &mut rng), norm(g, base)?, Layer::Relu];
            let high = Layer::Sequential(vec![
                conv(base, base, 3, 1, 1, &mut rng),
                norm(g, base)?,
                Layer::Relu,
                conv(base, base, 3, 1, 1, &mut rng),
                norm(g, base)?,
                Layer::Relu,
            ]);
            let low = Layer::Sequential(encoder_decoder(config, &mut rng)?);
            let mut layers = stem;
            layers.push(Layer::Parallel(Box::new(high), Box::new(low)));
            layers.extend([conv(base, 1, 3, 1, 1, &mut rng), Layer::Tanh]);
            Layer::Sequential(layers)
        }
    };
    Ok(Generator { config: *config, net })
}

/// Runs the generator on a NORMALIZED x-ray.
pub fn generator_forward(gen: &Generator, xray: &Image2D) -> Result<Image2D> {
    if xray.unit() != IntensityUnit::Normalized {
        return Err(Error::invalid("generator input must be NORMALIZED"));
    }
    let x = image_to_tensor(xray);
    let y = gen.infer_tensor(&x)?;
    tensor_to_image(&y, IntensityUnit::Normalized)
}

pub fn image_to_tensor(img: &Image2D) -> Tensor {
    Tensor::from_vec(1, img.height(), img.width(), img.to_f64())
}

pub fn tensor_to_image(t: &Tensor, unit: IntensityUnit) -> Result<Image2D> {
    let px = t
        .data
        .iter()
        .map(|&v| {
            let v = v as f32;
            if unit == IntensityUnit::Normalized {
                v.clamp(-1.0, 1.0)
            } else {
                v
            }
        })
        .collect();
    Image2D::new(t.w, t.h, px, unit)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub n_layers: usize,
    pub norm_groups: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { base_channels: 32, n_layers: 3, norm_groups: 8 }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 {
            return Err(Error::Config("discriminator.n_layers must be ≥ 1".into()));
        }
        if self.norm_groups == 0 || self.base_channels % self.norm_groups != 0 {
            return Err(Error::Config(format!(
                "discriminator.norm_groups {} must divide base_channels {}",
                self.norm_groups, self.base_channels
            )));
        }
        Ok(())
    }

    /// Smallest full-resolution side length the three-scale stack accepts.
    pub fn min_input_side(&self) -> usize {
        4 << self.n_layers
    }
}

/// One patch discriminator over the 2-channel (x-ray, DRR) stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    /// Feature-producing blocks; each output is a feature tap.
    blocks: Vec<Layer>,
    head: Layer,
}

pub struct DiscriminatorOutput {
    pub score: Tensor,
    pub features: Vec<Tensor>,
    caches: Vec<Cache>,
    head_cache: Cache,
}

impl Discriminator {
    fn new(cfg: &DiscriminatorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (ndf, g) = (cfg.base_channels, cfg.norm_groups);
        let cap = ndf * 8;
        let mut blocks = vec![Layer::Sequential(vec![conv(2, ndf, 4, 2, 1, rng), Layer::LeakyRelu(0.2)])];
        let mut ch = ndf;
        for _ in 1..cfg.n_layers {
            let next = (ch * 2).min(cap);
            blocks.push(Layer::Sequential(vec![conv(ch, next, 4, 2, 1, rng), norm(g, next)?, Layer::LeakyRelu(0.2)]));
            ch = next;
        }
        let next = (ch * 2).min(cap);
        blocks.push(Layer::Sequential(vec![conv(ch, next, 3, 1, 1, rng), norm(g, next)?, Layer::LeakyRelu(0.2)]));
        let head = conv(next, 1, 3, 1, 1, rng);
        Ok(Discriminator { blocks, head })
    }

    pub fn forward(&self, input: &Tensor) -> DiscriminatorOutput {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut features = Vec::with_capacity(self.blocks.len());
        let mut cur = input.clone();
        for b in &self.blocks {
            let (y, c) = b.forward(&cur);
            caches.push(c);
            features.push(y.clone());
            cur = y;
        }
        let (score, head_cache) = self.head.forward(&cur);
        DiscriminatorOutput { score, features, caches, head_cache }
    }

    /// Backpropagates a score gradient plus optional per-feature gradients and
    /// returns the gradient with respect to the 2-channel input.
    pub fn backward(&mut self, out: &DiscriminatorOutput, d_score: &Tensor, d_features: Option<&[Tensor]>) -> Tensor {
        let mut grad = self.head.backward(&out.head_cache, d_score);
        for (i, (b, c)) in self.blocks.iter_mut().zip(&out.caches).enumerate().rev() {
            if let Some(df) = d_features {
                grad.add_assign(&df[i]);
            }
            grad = b.backward(c, &grad);
        }
        grad
    }

    pub fn feature_count(&self) -> usize {
        self.blocks.len()
    }
}

impl ParamSet for Discriminator {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.blocks.iter().for_each(|b| b.visit_params(f));
        self.head.visit_params(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.blocks.iter_mut().for_each(|b| b.visit_params_mut(f));
        self.head.visit_params_mut(f);
    }
}

pub const N_SCALES: usize = 3;

/// Discriminators at full, half and quarter resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorStack {
    pub config: DiscriminatorConfig,
    pub scales: Vec<Discriminator>,
}

pub struct StackOutput {
    pub per_scale: Vec<DiscriminatorOutput>,
    shapes: Vec<(usize, usize, usize)>,
}

impl DiscriminatorStack {
    pub fn new(config: &DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scales = (0..N_SCALES).map(|_| Discriminator::new(config, &mut rng)).collect::<Result<_>>()?;
        Ok(DiscriminatorStack { config: *config, scales })
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let min = self.config.min_input_side();
        if h < min || w < min {
            return Err(Error::invalid(format!(
                "discriminator stack needs inputs of at least {min}×{min}, got {w}×{h}"
            )));
        }
        Ok(())
    }

    /// Scores `(xray, drr)` at three resolutions, obtained by 2× average pooling
    /// of both channels.
    pub fn forward(&self, xray: &Tensor, drr: &Tensor) -> Result<StackOutput> {
        if xray.shape() != drr.shape() || xray.c != 1 {
            return Err(Error::invalid(format!(
                "discriminator inputs differ: {:?} vs {:?}",
                xray.shape(),
                drr.shape()
            )));
        }
        self.check_input(xray.h, xray.w)?;
        let mut level = Tensor::concat(&[xray, drr]);
        let mut per_scale = Vec::with_capacity(N_SCALES);
        let mut shapes = Vec::with_capacity(N_SCALES);
        for (k, d) in self.scales.iter().enumerate() {
            if k > 0 {
                level = avg_pool2x(&level);
            }
            shapes.push(level.shape());
            per_scale.push(d.forward(&level));
        }
        Ok(StackOutput { per_scale, shapes })
    }

    /// Returns the gradient with respect to the full-resolution DRR channel.
    pub fn backward(
        &mut self,
        out: &StackOutput,
        d_scores: &[Tensor],
        d_features: Option<&[Vec<Tensor>]>,
    ) -> Tensor {
        let mut carry: Option<Tensor> = None;
        for k in (0..N_SCALES).rev() {
            let df = d_features.map(|f| f[k].as_slice());
            let mut g = self.scales[k].backward(&out.per_scale[k], &d_scores[k], df);
            if let Some(c) = carry.take() {
                g.add_assign(&c);
            }
            if k > 0 {
                let (c, h, w) = out.shapes[k - 1];
                carry = Some(avg_pool2x_backward(&g, c, h, w));
            } else {
                carry = Some(g);
            }
        }
        carry.expect("three scales").channel_tensor(1)
    }
}

impl ParamSet for DiscriminatorStack {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.scales.iter().for_each(|d| d.visit(f));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.scales.iter_mut().for_each(|d| d.visit_mut(f));
    }
}

/// Small convolutional regressor mapping an x-ray to one scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Regressor {
    pub base_channels: usize,
    net: Layer,
}

impl Regressor {
    pub fn new(base_channels: usize, norm_groups: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = base_channels;
        let net = Layer::Sequential(vec![
            conv(1, b, 4, 2, 1, &mut rng),
            norm(norm_groups, b)?,
            Layer::Relu,
            conv(b, 2 * b, 4, 2, 1, &mut rng),
            norm(norm_groups, 2 * b)?,
            Layer::Relu,
            conv(2 * b, 4 * b, 4, 2, 1, &mut rng),
            norm(norm_groups, 4 * b)?,
            Layer::Relu,
            Layer::GlobalAvgPool,
            conv(4 * b, 1, 1, 1, 0, &mut rng),
        ]);
        Ok(Regressor { base_channels, net })
    }

    pub fn forward(&self, x: &Tensor) -> (f64, Cache) {
        let (y, c) = self.net.forward(x);
        (y.data[0], c)
    }

    pub fn infer(&self, x: &Tensor) -> f64 {
        self.net.infer(x).data[0]
    }

    pub fn backward(&mut self, cache: &Cache, d_out: f64) {
        self.net.backward(cache, &Tensor::from_vec(1, 1, 1, vec![d_out]));
    }
}

impl ParamSet for Regressor {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.net.visit_params(f)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.net.visit_params_mut(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy() -> GeneratorConfig {
        GeneratorConfig { base_channels: 8, n_downsamples: 1, n_res_blocks: 1, norm_groups: 2, ..Default::default() }
    }

    #[test]
    fn resnet_parameter_count_matches_layer_tally() {
        let cfg = GeneratorConfig { base_channels: 32, n_downsamples: 2, n_res_blocks: 4, norm_groups: 8, ..Default::default() };
        let conv_p = |i: usize, o: usize, k: usize| i * o * k * k + o;
        let gn = |c: usize| 2 * c;
        let stem = conv_p(1, 32, 7) + gn(32);
        let down = conv_p(32, 64, 3) + gn(64) + conv_p(64, 128, 3) + gn(128);
        let block = 2 * (conv_p(128, 128, 3) + gn(128));
        let up = conv_p(128, 64, 3) + gn(64) + conv_p(64, 32, 3) + gn(32);
        let out = conv_p(32, 1, 7);
        let expected = stem + down + 4 * block + up + out;
        assert_eq!(expected, 1600 + 64 + 18496 + 128 + 73856 + 256 + 4 * 295680 + 73792 + 128 + 18464 + 64 + 1569);
        assert_eq!(build_generator(&cfg, 0).unwrap().param_count(), expected);
    }

    #[test]
    fn builds_are_deterministic_and_initialized() {
        let a = build_generator(&toy(), 7).unwrap();
        let b = build_generator(&toy(), 7).unwrap();
        let c = build_generator(&toy(), 8).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn forward_contract_for_both_backbones() {
        for backbone in [Backbone::ResnetGlobal, Backbone::HrLite] {
            let gen = build_generator(&GeneratorConfig { backbone, ..toy() }, 1).unwrap();
            let zero = Image2D::filled(16, 32, 0.0, IntensityUnit::Normalized).unwrap();
            let out = generator_forward(&gen, &zero).unwrap();
            assert_eq!((out.width(), out.height()), (16, 32));
            assert!(out.pixels().iter().all(|p| p.is_finite() && (-1.0..=1.0).contains(p)));
            let again = generator_forward(&gen, &zero).unwrap();
            assert_eq!(out, again);
            let raw = Image2D::filled(16, 32, 0.0, IntensityUnit::XrayRelative).unwrap();
            assert!(generator_forward(&gen, &raw).is_err());
            let odd = Image2D::filled(15, 32, 0.0, IntensityUnit::Normalized).unwrap();
            assert!(generator_forward(&gen, &odd).is_err());
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(GeneratorConfig { base_channels: 4, norm_groups: 2, ..toy() }.validate().is_err());
        assert!(GeneratorConfig { n_downsamples: 0, ..toy() }.validate().is_err());
        assert!(GeneratorConfig { norm_groups: 3, ..toy() }.validate().is_err());
        assert!(DiscriminatorConfig { base_channels: 8, n_layers: 0, norm_groups: 2 }.validate().is_err());
    }

    #[test]
    fn discriminator_scales_halve_and_features_have_expected_sizes() {
        let cfg = DiscriminatorConfig { base_channels: 8, n_layers: 3, norm_groups: 2 };
        let stack = DiscriminatorStack::new(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_vec(1, 32, 64, (0..2048).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let y = Tensor::from_vec(1, 32, 64, (0..2048).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let out = stack.forward(&x, &y).unwrap();
        let sizes: Vec<_> = out.per_scale.iter().map(|o| (o.score.h, o.score.w)).collect();
        assert_eq!(sizes, vec![(4, 8), (2, 4), (1, 2)]);
        // Full scale: 4×4/s2/p1 halves (32×64 → 16×32 → 8×16 → 4×8), then 3×3/s1 keeps 4×8.
        let n: Vec<usize> = out.per_scale[0].features.iter().map(Tensor::len).collect();
        assert_eq!(n, vec![8 * 16 * 32, 16 * 8 * 16, 32 * 4 * 8, 64 * 4 * 8]);
        let again = stack.forward(&x, &y).unwrap();
        for (a, b) in out.per_scale.iter().zip(&again.per_scale) {
            assert_eq!(a.score, b.score);
        }
        assert!(stack.forward(&x, &Tensor::zeros(1, 32, 32)).is_err());
        assert!(stack.forward(&Tensor::zeros(1, 16, 16), &Tensor::zeros(1, 16, 16)).is_err());
    }

    #[test]
    fn stack_input_gradient_matches_finite_differences() {
        let cfg = DiscriminatorConfig { base_channels: 8, n_layers: 1, norm_groups: 2 };
        let mut stack = DiscriminatorStack::new(&cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_vec(1, 8, 8, (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let y = Tensor::from_vec(1, 8, 8, (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let out = stack.forward(&x, &y).unwrap();
        let us: Vec<Tensor> = out
            .per_scale
            .iter()
            .map(|o| Tensor::from_vec(1, o.score.h, o.score.w, (0..o.score.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let dfeat: Vec<Vec<Tensor>> = out
            .per_scale
            .iter()
            .map(|o| {
                o.features
                    .iter()
                    .map(|f| Tensor::from_vec(f.c, f.h, f.w, (0..f.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()))
                    .collect()
            })
            .collect();
        let d_y = stack.backward(&out, &us, Some(&dfeat));
        let objective = |s: &DiscriminatorStack, yy: &Tensor| -> f64 {
            let o = s.forward(&x, yy).unwrap();
            let mut acc = 0.0;
            for (k, so) in o.per_scale.iter().enumerate() {
                acc += so.score.data.iter().zip(&us[k].data).map(|(a, b)| a * b).sum::<f64>();
                for (f, df) in so.features.iter().zip(&dfeat[k]) {
                    acc += f.data.iter().zip(&df.data).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            acc
        };
        let v: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = 1e-6;
        let yp = Tensor::from_vec(1, 8, 8, y.data.iter().zip(&v).map(|(a, b)| a + h * b).collect());
        let ym = Tensor::from_vec(1, 8, 8, y.data.iter().zip(&v).map(|(a, b)| a - h * b).collect());
        let fd = (objective(&stack, &yp) - objective(&stack, &ym)) / (2.0 * h);
        let an: f64 = d_y.data.iter().zip(&v).map(|(a, b)| a * b).sum();
        assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "{fd} vs {an}");
    }

    #[test]
    fn regressor_emits_one_scalar() {
        let r = Regressor::new(8, 2, 0).unwrap();
        let x = Tensor::zeros(1, 32, 16);
        let (y, _) = r.forward(&x);
        assert!(y.is_finite());
        assert_eq!(r.infer(&x), y);
    }
}
