//! Minimal CPU tensor engine: layers with explicit forward/backward passes.
//!
//! Tensors are single-sample `(channels, height, width)` blocks of `f64`.
//! Batches are handled by the trainer, which accumulates gradients sample by
//! sample. Forward passes take `&self` and return a [`Cache`] holding what the
//! backward pass needs, so inference is reentrant; backward passes take
//! `&mut self` and accumulate into each parameter's gradient buffer.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor buffer length");
        Tensor { c, h, w, data }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_tensor(&self, c: usize) -> Tensor {
        Tensor::from_vec(1, self.h, self.w, self.channel(c).to_vec())
    }

    /// Stacks equally sized tensors along the channel axis.
    pub fn concat(parts: &[&Tensor]) -> Tensor {
        let (h, w) = (parts[0].h, parts[0].w);
        let mut data = Vec::new();
        let mut c = 0;
        for p in parts {
            assert_eq!((p.h, p.w), (h, w), "concat spatial shape");
            data.extend_from_slice(&p.data);
            c += p.c;
        }
        Tensor::from_vec(c, h, w, data)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for a in &mut self.data {
            *a *= k;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Learnable parameter block with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    /// Excluded from weight decay (biases, norm affines).
    pub no_decay: bool,
}

impl Param {
    fn new(value: Vec<f64>, no_decay: bool) -> Self {
        let grad = vec![0.0; value.len()];
        Param { value, grad, no_decay }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `out_c × (in_c · kernel · kernel)`, row-major.
    pub weight: Param,
    pub bias: Param,
}

impl Conv2d {
    pub fn new(in_c: usize, out_c: usize, kernel: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let weight = (0..out_c * in_c * kernel * kernel).map(|_| normal.sample(rng)).collect();
        Conv2d {
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            weight: Param::new(weight, false),
            bias: Param::new(vec![0.0; out_c], true),
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let hp = h + 2 * self.pad;
        let wp = w + 2 * self.pad;
        if hp < self.kernel || wp < self.kernel {
            return None;
        }
        Some(((hp - self.kernel) / self.stride + 1, (wp - self.kernel) / self.stride + 1))
    }

    fn im2col(&self, x: &Tensor, oh: usize, ow: usize) -> Vec<f64> {
        let k = self.kernel;
        let p = oh * ow;
        let mut cols = vec![0.0; self.in_c * k * k * p];
        for ci in 0..self.in_c {
            let plane = x.channel(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.w..][..x.w];
                        let dst = &mut row[oy * ow..][..ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < x.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Tensor {
        let k = self.kernel;
        let p = oh * ow;
        let mut dx = Tensor::zeros(self.in_c, h, w);
        for ci in 0..self.in_c {
            let plane = &mut dx.data[ci * h * w..][..h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ci * k + ky) * k + kx) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..][..w];
                        let src = &row[oy * ow..][..ow];
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (oh, ow) = self.output_size(x.h, x.w).expect("conv input smaller than kernel");
        let kk = self.in_c * self.kernel * self.kernel;
        let p = oh * ow;
        let cols = self.im2col(x, oh, ow);
        let mut out = Vec::with_capacity(self.out_c * p);
        for b in &self.bias.value {
            out.extend(std::iter::repeat(*b).take(p));
        }
        gemm(self.out_c, kk, p, &self.weight.value, (kk, 1), &cols, (p, 1), &mut out, 1.0);
        Tensor::from_vec(self.out_c, oh, ow, out)
    }

    fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let (oh, ow) = (dy.h, dy.w);
        let kk = self.in_c * self.kernel * self.kernel;
        let p = oh * ow;
        let cols = self.im2col(x, oh, ow);
        // dW += dY · colsᵀ
        gemm(self.out_c, p, kk, &dy.data, (p, 1), &cols, (1, p), &mut self.weight.grad, 1.0);
        for (o, g) in self.bias.grad.iter_mut().enumerate() {
            *g += dy.data[o * p..(o + 1) * p].iter().sum::<f64>();
        }
        // dcols = Wᵀ · dY
        let mut dcols = vec![0.0; kk * p];
        gemm(kk, self.out_c, p, &self.weight.value, (1, kk), &dy.data, (p, 1), &mut dcols, 0.0);
        self.col2im(&dcols, x.h, x.w, oh, ow)
    }
}

/// `c (m×n) = a (m×k) · b (k×n) + beta·c`, strides given as (row, col).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: bounds checked above; strides describe dense row- or column-major
    // views that stay inside each slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupNorm {
    pub groups: usize,
    pub channels: usize,
    pub eps: f64,
    pub gamma: Param,
    pub beta: Param,
}

impl GroupNorm {
    pub fn new(groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::invalid(format!(
                "norm_groups {groups} does not divide {channels} channels"
            )));
        }
        Ok(GroupNorm {
            groups,
            channels,
            eps: 1e-5,
            gamma: Param::new(vec![1.0; channels], true),
            beta: Param::new(vec![0.0; channels], true),
        })
    }

    fn forward(&self, x: &Tensor) -> (Tensor, Cache) {
        assert_eq!(x.c, self.channels, "group norm channels");
        let per = (self.channels / self.groups) * x.plane();
        let mut xhat = Tensor::zeros(x.c, x.h, x.w);
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let src = &x.data[g * per..(g + 1) * per];
            let mean = src.iter().sum::<f64>() / per as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std.push(is);
            for (d, s) in xhat.data[g * per..(g + 1) * per].iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
        }
        let plane = x.plane();
        let mut y = xhat.clone();
        for c in 0..x.c {
            let (ga, be) = (self.gamma.value[c], self.beta.value[c]);
            for v in &mut y.data[c * plane..(c + 1) * plane] {
                *v = *v * ga + be;
            }
        }
        (y, Cache::Norm { xhat, inv_std })
    }

    fn backward(&mut self, xhat: &Tensor, inv_std: &[f64], dy: &Tensor) -> Tensor {
        let plane = dy.plane();
        let mut dxhat = Tensor::zeros(dy.c, dy.h, dy.w);
        for c in 0..dy.c {
            let r = c * plane..(c + 1) * plane;
            let (dyc, xc) = (&dy.data[r.clone()], &xhat.data[r.clone()]);
            self.gamma.grad[c] += dyc.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>();
            self.beta.grad[c] += dyc.iter().sum::<f64>();
            let ga = self.gamma.value[c];
            for (d, g) in dxhat.data[r].iter_mut().zip(dyc) {
                *d = g * ga;
            }
        }
        let per = (self.channels / self.groups) * plane;
        let mut dx = Tensor::zeros(dy.c, dy.h, dy.w);
        for (g, is) in inv_std.iter().enumerate() {
            let r = g * per..(g + 1) * per;
            let dh = &dxhat.data[r.clone()];
            let xh = &xhat.data[r.clone()];
            let mean_dh = dh.iter().sum::<f64>() / per as f64;
            let mean_dhx = dh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / per as f64;
            for ((d, a), b) in dx.data[r].iter_mut().zip(dh).zip(xh) {
                *d = is * (a - mean_dh - b * mean_dhx);
            }
        }
        dx
    }
}

/// Network layer. Composite variants nest other layers.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    GroupNorm(GroupNorm),
    Relu,
    LeakyRelu(f64),
    Tanh,
    /// Nearest-neighbour ×2 upsampling.
    Upsample2x,
    /// 2×2 average pooling, stride 2 (odd trailing row/column dropped).
    AvgPool2x,
    /// Spatial mean per channel, producing `(c, 1, 1)`.
    GlobalAvgPool,
    /// `y = x + inner(x)`.
    Residual(Box<Layer>),
    /// `y = a(x) + b(x)`.
    Parallel(Box<Layer>, Box<Layer>),
    Sequential(Vec<Layer>),
}

#[derive(Debug, Clone)]
pub enum Cache {
    Input(Tensor),
    Output(Tensor),
    Norm { xhat: Tensor, inv_std: Vec<f64> },
    Shape(usize, usize, usize),
    Nested(Vec<Cache>),
}

impl Layer {
    pub fn forward(&self, x: &Tensor) -> (Tensor, Cache) {
        match self {
            Layer::Conv(conv) => (conv.forward(x), Cache::Input(x.clone())),
            Layer::GroupNorm(gn) => gn.forward(x),
            Layer::Relu => {
                let mut y = x.clone();
                y.data.iter_mut().for_each(|v| *v = v.max(0.0));
                (y, Cache::Input(x.clone()))
            }
            Layer::LeakyRelu(slope) => {
                let mut y = x.clone();
                y.data.iter_mut().for_each(|v| {
                    if *v < 0.0 {
                        *v *= slope
                    }
                });
                (y, Cache::Input(x.clone()))
            }
            Layer::Tanh => {
                let mut y = x.clone();
                y.data.iter_mut().for_each(|v| *v = v.tanh());
                (y.clone(), Cache::Output(y))
            }
            Layer::Upsample2x => {
                let mut y = Tensor::zeros(x.c, x.h * 2, x.w * 2);
                for c in 0..x.c {
                    for i in 0..y.h {
                        for j in 0..y.w {
                            y.data[(c * y.h + i) * y.w + j] = x.data[(c * x.h + i / 2) * x.w + j / 2];
                        }
                    }
                }
                (y, Cache::Shape(x.c, x.h, x.w))
            }
            Layer::AvgPool2x => (avg_pool2x(x), Cache::Shape(x.c, x.h, x.w)),
            Layer::GlobalAvgPool => {
                let p = x.plane() as f64;
                let data = (0..x.c).map(|c| x.channel(c).iter().sum::<f64>() / p).collect();
                (Tensor::from_vec(x.c, 1, 1, data), Cache::Shape(x.c, x.h, x.w))
            }
            Layer::Residual(inner) => {
                let (mut y, cache) = inner.forward(x);
                y.add_assign(x);
                (y, Cache::Nested(vec![cache]))
            }
            Layer::Parallel(a, b) => {
                let (mut ya, ca) = a.forward(x);
                let (yb, cb) = b.forward(x);
                ya.add_assign(&yb);
                (ya, Cache::Nested(vec![ca, cb]))
            }
            Layer::Sequential(layers) => {
                let mut caches = Vec::with_capacity(layers.len());
                let mut cur = x.clone();
                for l in layers {
                    let (y, c) = l.forward(&cur);
                    caches.push(c);
                    cur = y;
                }
                (cur, Cache::Nested(caches))
            }
        }
    }

    /// Forward pass without retaining intermediate state.
    pub fn infer(&self, x: &Tensor) -> Tensor {
        match self {
            Layer::Sequential(layers) => layers.iter().fold(x.clone(), |cur, l| l.infer(&cur)),
            Layer::Conv(conv) => conv.forward(x),
            _ => self.forward(x).0,
        }
    }

    pub fn backward(&mut self, cache: &Cache, dy: &Tensor) -> Tensor {
        match (self, cache) {
            (Layer::Conv(conv), Cache::Input(x)) => conv.backward(x, dy),
            (Layer::GroupNorm(gn), Cache::Norm { xhat, inv_std }) => gn.backward(xhat, inv_std, dy),
            (Layer::Relu, Cache::Input(x)) => {
                let mut dx = dy.clone();
                for (d, v) in dx.data.iter_mut().zip(&x.data) {
                    if *v <= 0.0 {
                        *d = 0.0;
                    }
                }
                dx
            }
            (Layer::LeakyRelu(slope), Cache::Input(x)) => {
                let mut dx = dy.clone();
                for (d, v) in dx.data.iter_mut().zip(&x.data) {
                    if *v < 0.0 {
                        *d *= *slope;
                    }
                }
                dx
            }
            (Layer::Tanh, Cache::Output(y)) => {
                let mut dx = dy.clone();
                for (d, t) in dx.data.iter_mut().zip(&y.data) {
                    *d *= 1.0 - t * t;
                }
                dx
            }
            (Layer::Upsample2x, Cache::Shape(c, h, w)) => {
                let mut dx = Tensor::zeros(*c, *h, *w);
                for ci in 0..*c {
                    for i in 0..dy.h {
                        for j in 0..dy.w {
                            dx.data[(ci * h + i / 2) * w + j / 2] += dy.data[(ci * dy.h + i) * dy.w + j];
                        }
                    }
                }
                dx
            }
            (Layer::AvgPool2x, Cache::Shape(c, h, w)) => avg_pool2x_backward(dy, *c, *h, *w),
            (Layer::GlobalAvgPool, Cache::Shape(c, h, w)) => {
                let p = (h * w) as f64;
                let mut dx = Tensor::zeros(*c, *h, *w);
                for ci in 0..*c {
                    let g = dy.data[ci] / p;
                    dx.data[ci * h * w..(ci + 1) * h * w].iter_mut().for_each(|v| *v = g);
                }
                dx
            }
            (Layer::Residual(inner), Cache::Nested(c)) => {
                let mut dx = inner.backward(&c[0], dy);
                dx.add_assign(dy);
                dx
            }
            (Layer::Parallel(a, b), Cache::Nested(c)) => {
                let mut dx = a.backward(&c[0], dy);
                dx.add_assign(&b.backward(&c[1], dy));
                dx
            }
            (Layer::Sequential(layers), Cache::Nested(caches)) => {
                let mut grad = dy.clone();
                for (l, c) in layers.iter_mut().zip(caches).rev() {
                    grad = l.backward(c, &grad);
                }
                grad
            }
            (layer, _) => panic!("cache does not belong to layer {layer:?}"),
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        match self {
            Layer::Conv(c) => {
                f(&c.weight);
                f(&c.bias);
            }
            Layer::GroupNorm(g) => {
                f(&g.gamma);
                f(&g.beta);
            }
            Layer::Residual(inner) => inner.visit_params(f),
            Layer::Parallel(a, b) => {
                a.visit_params(f);
                b.visit_params(f);
            }
            Layer::Sequential(ls) => ls.iter().for_each(|l| l.visit_params(f)),
            _ => {}
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            Layer::Conv(c) => {
                f(&mut c.weight);
                f(&mut c.bias);
            }
            Layer::GroupNorm(g) => {
                f(&mut g.gamma);
                f(&mut g.beta);
            }
            Layer::Residual(inner) => inner.visit_params_mut(f),
            Layer::Parallel(a, b) => {
                a.visit_params_mut(f);
                b.visit_params_mut(f);
            }
            Layer::Sequential(ls) => ls.iter_mut().for_each(|l| l.visit_params_mut(f)),
            _ => {}
        }
    }
}

pub fn avg_pool2x(x: &Tensor) -> Tensor {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.c, oh, ow);
    for c in 0..x.c {
        for i in 0..oh {
            for j in 0..ow {
                let at = |a: usize, b: usize| x.data[(c * x.h + a) * x.w + b];
                y.data[(c * oh + i) * ow + j] =
                    0.25 * (at(2 * i, 2 * j) + at(2 * i, 2 * j + 1) + at(2 * i + 1, 2 * j) + at(2 * i + 1, 2 * j + 1));
            }
        }
    }
    y
}

pub fn avg_pool2x_backward(dy: &Tensor, c: usize, h: usize, w: usize) -> Tensor {
    let mut dx = Tensor::zeros(c, h, w);
    for ci in 0..c {
        for i in 0..dy.h {
            for j in 0..dy.w {
                let g = 0.25 * dy.data[(ci * dy.h + i) * dy.w + j];
                for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    dx.data[(ci * h + 2 * i + a) * w + 2 * j + b] += g;
                }
            }
        }
    }
    dx
}

/// Parameter-set helpers shared by every network wrapper.
pub trait ParamSet {
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.extend_from_slice(&p.value));
        out
    }

    fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.extend_from_slice(&p.grad));
        out
    }

    fn load_flat_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "parameter vector has {} values, network expects {}",
                values.len(),
                self.param_count()
            )));
        }
        let mut at = 0;
        self.visit_mut(&mut |p| {
            let n = p.len();
            p.value.copy_from_slice(&values[at..at + n]);
            at += n;
        });
        Ok(())
    }

    /// SHA-256 over the little-endian parameter bytes.
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        self.visit(&mut |p| {
            for v in &p.value {
                h.update(v.to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }
}

impl ParamSet for Layer {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.visit_params(f)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.visit_params_mut(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Direct convolution used as an oracle for the im2col path.
    fn conv_direct(conv: &Conv2d, x: &Tensor) -> Tensor {
        let (oh, ow) = conv.output_size(x.h, x.w).unwrap();
        let k = conv.kernel;
        let mut y = Tensor::zeros(conv.out_c, oh, ow);
        for o in 0..conv.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.bias.value[o];
                    for ci in 0..conv.in_c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                acc += conv.weight.value[((o * conv.in_c + ci) * k + ky) * k + kx]
                                    * x.data[(ci * x.h + iy as usize) * x.w + ix as usize];
                            }
                        }
                    }
                    y.data[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (k, s, p) in [(3, 1, 1), (4, 2, 1), (7, 1, 3), (1, 1, 0), (3, 2, 1)] {
            let mut conv = Conv2d::new(3, 4, k, s, p, &mut rng);
            conv.bias.value.iter_mut().for_each(|b| *b = rng.gen_range(-1.0..1.0));
            let x = rand_tensor(3, 9, 8, &mut rng);
            let a = Layer::Conv(conv.clone()).infer(&x);
            let b = conv_direct(&conv, &x);
            assert_eq!(a.shape(), b.shape());
            for (u, v) in a.data.iter().zip(&b.data) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    /// Checks `⟨u, J v⟩` for input and parameter directions by central differences.
    fn check_layer_gradients(mut layer: Layer, x: Tensor, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (y, cache) = layer.forward(&x);
        let u = rand_tensor(y.c, y.h, y.w, &mut rng);
        layer.zero_grad();
        let dx = layer.backward(&cache, &u);
        let pgrad = layer.flat_grads();
        let theta = layer.flat_values();

        let v = rand_tensor(x.c, x.h, x.w, &mut rng);
        let proj = |l: &Layer, xx: &Tensor| -> f64 { l.infer(xx).data.iter().zip(&u.data).map(|(a, b)| a * b).sum() };
        let h = 1e-6;
        let mut xp = x.clone();
        let mut xm = x.clone();
        for i in 0..x.len() {
            xp.data[i] += h * v.data[i];
            xm.data[i] -= h * v.data[i];
        }
        let fd = (proj(&layer, &xp) - proj(&layer, &xm)) / (2.0 * h);
        let an: f64 = dx.data.iter().zip(&v.data).map(|(a, b)| a * b).sum();
        assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "input jvp {fd} vs {an}");

        if theta.is_empty() {
            return;
        }
        let dir: Vec<f64> = (0..theta.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let plus: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + h * d).collect();
        let minus: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t - h * d).collect();
        layer.load_flat_values(&plus).unwrap();
        let fp = proj(&layer, &x);
        layer.load_flat_values(&minus).unwrap();
        let fm = proj(&layer, &x);
        let fd = (fp - fm) / (2.0 * h);
        let an: f64 = pgrad.iter().zip(&dir).map(|(a, b)| a * b).sum();
        assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "param jvp {fd} vs {an}");
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut conv = Conv2d::new(2, 3, 3, 2, 1, &mut rng);
        conv.weight.value.iter_mut().for_each(|w| *w *= 20.0);
        check_layer_gradients(Layer::Conv(conv), rand_tensor(2, 6, 7, &mut rng), 1);

        let mut gn = GroupNorm::new(2, 4).unwrap();
        gn.gamma.value = vec![0.5, 1.5, -1.0, 2.0];
        gn.beta.value = vec![0.1, -0.2, 0.3, 0.0];
        check_layer_gradients(Layer::GroupNorm(gn), rand_tensor(4, 3, 5, &mut rng), 2);

        check_layer_gradients(Layer::Tanh, rand_tensor(2, 3, 3, &mut rng), 3);
        check_layer_gradients(Layer::LeakyRelu(0.2), rand_tensor(2, 3, 3, &mut rng), 4);
        check_layer_gradients(Layer::Upsample2x, rand_tensor(2, 3, 3, &mut rng), 5);
        check_layer_gradients(Layer::AvgPool2x, rand_tensor(2, 4, 6, &mut rng), 6);
        check_layer_gradients(Layer::GlobalAvgPool, rand_tensor(3, 4, 6, &mut rng), 7);

        let mut c1 = Conv2d::new(2, 2, 3, 1, 1, &mut rng);
        let mut c2 = Conv2d::new(2, 2, 1, 1, 0, &mut rng);
        c1.weight.value.iter_mut().for_each(|w| *w *= 30.0);
        c2.weight.value.iter_mut().for_each(|w| *w *= 30.0);
        let block = Layer::Residual(Box::new(Layer::Sequential(vec![
            Layer::Conv(c1),
            Layer::GroupNorm(GroupNorm::new(1, 2).unwrap()),
            Layer::Tanh,
        ])));
        let par = Layer::Parallel(Box::new(block), Box::new(Layer::Conv(c2)));
        check_layer_gradients(par, rand_tensor(2, 4, 4, &mut rng), 8);
    }

    #[test]
    fn group_norm_rejects_indivisible_channels() {
        assert!(GroupNorm::new(3, 8).is_err());
        assert!(GroupNorm::new(0, 8).is_err());
    }

    #[test]
    fn flat_values_round_trip_and_checksum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut layer = Layer::Sequential(vec![
            Layer::Conv(Conv2d::new(1, 2, 3, 1, 1, &mut rng)),
            Layer::GroupNorm(GroupNorm::new(1, 2).unwrap()),
        ]);
        assert_eq!(layer.param_count(), 2 * 9 + 2 + 2 + 2);
        let before = layer.checksum();
        let vals = layer.flat_values();
        layer.load_flat_values(&vec![0.0; vals.len()]).unwrap();
        assert_ne!(layer.checksum(), before);
        layer.load_flat_values(&vals).unwrap();
        assert_eq!(layer.checksum(), before);
        assert!(layer.load_flat_values(&[1.0]).is_err());
    }
}
