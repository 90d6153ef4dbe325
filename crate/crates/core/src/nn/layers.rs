//! Layers with explicit forward and backward passes.
//!
//! Every layer caches what its backward pass needs during a forward call in
//! [`Mode::Train`] or [`Mode::Eval`]. [`Mode::Infer`] skips the cache and is
//! what batched inference uses.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{gemm, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers, running stats updated.
    Train,
    /// Running statistics, gradients available (frozen feature extractor).
    Eval,
    /// Running statistics, no backward pass possible.
    Infer,
}

impl Mode {
    fn caches(self) -> bool {
        !matches!(self, Mode::Infer)
    }
}

/// A trainable array and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(shape: &[usize], value: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Self {
            shape: shape.to_vec(),
            value,
            grad,
        }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let len = shape.iter().product();
        let value = (0..len)
            .map(|_| T::from_f64_lossy(rng.random_range(-bound..=bound)))
            .collect();
        Self::new(shape, value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Spatial geometry of a convolution from an input plane to its output plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if height + 2 * pad < kernel || width + 2 * pad < kernel || stride == 0 {
            return Err(Error::Argument(format!(
                "kernel {kernel} with pad {pad} does not fit a {height}x{width} plane"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds one `[C, H, W]` image into a `[C*k*k, out_h*out_w]` matrix.
    fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        let (h, w, k, s) = (self.height, self.width, self.kernel, self.stride);
        let p = self.pad as isize;
        let npos = self.positions();
        for c in 0..self.channels {
            let plane = &img[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * npos..(row + 1) * npos];
                    for oy in 0..self.out_h {
                        let iy = (oy * s + ki) as isize - p;
                        let seg = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= h as isize {
                            seg.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in seg.iter_mut().enumerate() {
                            let ix = (ox * s + kj) as isize - p;
                            *v = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Folds a column matrix back onto an image, accumulating overlaps.
    fn col2im<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        let (h, w, k, s) = (self.height, self.width, self.kernel, self.stride);
        let p = self.pad as isize;
        let npos = self.positions();
        for c in 0..self.channels {
            let plane = &mut img[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * npos..(row + 1) * npos];
                    for oy in 0..self.out_h {
                        let iy = (oy * s + ki) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..self.out_w {
                            let ix = (ox * s + kj) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

fn expect_channels<T: Scalar>(x: &Tensor<T>, channels: usize, layer: &str) -> Result<()> {
    if x.shape().len() != 4 || x.shape()[1] != channels {
        return Err(Error::Argument(format!(
            "{layer} expects [N, {channels}, H, W], got {:?}",
            x.shape()
        )));
    }
    Ok(())
}

fn missing_cache(layer: &str) -> Error {
    Error::Config(format!("{layer}: backward called without a caching forward pass"))
}

/// 2-D convolution, square kernel.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[out, in * k * k]`
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = fan_in_bound(fan_in);
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weight: Param::uniform(&[out_channels, fan_in], bound, rng),
            bias: Param::uniform(&[out_channels], bound, rng),
            input: None,
        }
    }

    pub fn geometry(&self, h: usize, w: usize) -> Result<ConvGeometry> {
        ConvGeometry::new(self.in_channels, h, w, self.kernel, self.stride, self.pad)
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        expect_channels(x, self.in_channels, "conv2d")?;
        let (n, _, h, w) = x.dims4();
        let g = self.geometry(h, w)?;
        let (rows, npos) = (g.col_rows(), g.positions());
        let mut out = Tensor::zeros(&[n, self.out_channels, g.out_h, g.out_w]);
        let mut cols = vec![T::zero(); rows * npos];
        for i in 0..n {
            g.im2col(x.row(i), &mut cols);
            let y = out.row_mut(i);
            gemm(
                self.out_channels,
                rows,
                npos,
                T::one(),
                &self.weight.value,
                false,
                &cols,
                false,
                T::zero(),
                y,
            );
            for (oc, b) in self.bias.value.iter().enumerate() {
                y[oc * npos..(oc + 1) * npos].iter_mut().for_each(|v| *v += *b);
            }
        }
        self.input = mode.caches().then(|| x.clone());
        Ok(out)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(|| missing_cache("conv2d"))?;
        let (n, _, h, w) = x.dims4();
        let g = self.geometry(h, w)?;
        let (rows, npos) = (g.col_rows(), g.positions());
        let mut dx = Tensor::zeros(x.shape());
        let mut cols = vec![T::zero(); rows * npos];
        let mut dcols = vec![T::zero(); rows * npos];
        for i in 0..n {
            let dyi = dy.row(i);
            g.im2col(x.row(i), &mut cols);
            gemm(
                self.out_channels,
                npos,
                rows,
                T::one(),
                dyi,
                false,
                &cols,
                true,
                T::one(),
                &mut self.weight.grad,
            );
            for (oc, gb) in self.bias.grad.iter_mut().enumerate() {
                *gb += dyi[oc * npos..(oc + 1) * npos].iter().copied().sum::<T>();
            }
            gemm(
                rows,
                self.out_channels,
                npos,
                T::one(),
                &self.weight.value,
                true,
                dyi,
                false,
                T::zero(),
                &mut dcols,
            );
            g.col2im(&dcols, dx.row_mut(i));
        }
        Ok(dx)
    }
}

/// Transposed 2-D convolution (fractionally strided), square kernel.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
    /// `[in, out * k * k]`
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
        rng: &mut R,
    ) -> Self {
        // Same fan-in convention as torch: weight dim 1 times the receptive field.
        let bound = fan_in_bound(out_channels * kernel * kernel);
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            output_pad,
            weight: Param::uniform(&[in_channels, out_channels * kernel * kernel], bound, rng),
            bias: Param::uniform(&[out_channels], bound, rng),
            input: None,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let grow = |v: usize| {
            ((v - 1) * self.stride + self.kernel + self.output_pad).checked_sub(2 * self.pad)
        };
        match (grow(h), grow(w)) {
            (Some(oh), Some(ow)) if h > 0 && w > 0 => Ok((oh, ow)),
            _ => Err(Error::Argument(format!(
                "transposed conv cannot expand a {h}x{w} plane"
            ))),
        }
    }

    /// Geometry of the adjoint convolution (output plane back to input plane).
    fn geometry(&self, h: usize, w: usize) -> Result<ConvGeometry> {
        let (oh, ow) = self.output_size(h, w)?;
        let g = ConvGeometry::new(self.out_channels, oh, ow, self.kernel, self.stride, self.pad)?;
        if g.out_h != h || g.out_w != w {
            return Err(Error::Argument(format!(
                "transposed conv geometry mismatch for {h}x{w} input"
            )));
        }
        Ok(g)
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        expect_channels(x, self.in_channels, "conv_transpose2d")?;
        let (n, _, h, w) = x.dims4();
        let g = self.geometry(h, w)?;
        let (rows, npos) = (g.col_rows(), g.positions());
        let mut out = Tensor::zeros(&[n, self.out_channels, g.height, g.width]);
        let mut cols = vec![T::zero(); rows * npos];
        let plane = g.height * g.width;
        for i in 0..n {
            gemm(
                rows,
                self.in_channels,
                npos,
                T::one(),
                &self.weight.value,
                true,
                x.row(i),
                false,
                T::zero(),
                &mut cols,
            );
            let y = out.row_mut(i);
            g.col2im(&cols, y);
            for (oc, b) in self.bias.value.iter().enumerate() {
                y[oc * plane..(oc + 1) * plane].iter_mut().for_each(|v| *v += *b);
            }
        }
        self.input = mode.caches().then(|| x.clone());
        Ok(out)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .input
            .as_ref()
            .ok_or_else(|| missing_cache("conv_transpose2d"))?;
        let (n, _, h, w) = x.dims4();
        let g = self.geometry(h, w)?;
        let (rows, npos) = (g.col_rows(), g.positions());
        let plane = g.height * g.width;
        let mut dx = Tensor::zeros(x.shape());
        let mut dcols = vec![T::zero(); rows * npos];
        for i in 0..n {
            let dyi = dy.row(i);
            g.im2col(dyi, &mut dcols);
            gemm(
                self.in_channels,
                rows,
                npos,
                T::one(),
                &self.weight.value,
                false,
                &dcols,
                false,
                T::zero(),
                dx.row_mut(i),
            );
            gemm(
                self.in_channels,
                npos,
                rows,
                T::one(),
                x.row(i),
                false,
                &dcols,
                true,
                T::one(),
                &mut self.weight.grad,
            );
            for (oc, gb) in self.bias.grad.iter_mut().enumerate() {
                *gb += dyi[oc * plane..(oc + 1) * plane].iter().copied().sum::<T>();
            }
        }
        Ok(dx)
    }
}

/// Per-channel batch normalization over `N, H, W`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            momentum: 0.1,
            eps: 1e-5,
            gamma: Param::new(&[channels], vec![T::one(); channels]),
            beta: Param::new(&[channels], vec![T::zero(); channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            cache: None,
        }
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        expect_channels(x, self.channels, "batch_norm2d")?;
        let (n, c, h, w) = x.dims4();
        let plane = h * w;
        let count = n * plane;
        let eps = T::from_f64_lossy(self.eps);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let batch_stats = mode == Mode::Train;
        if batch_stats {
            if count < 2 {
                return Err(Error::Argument(
                    "batch norm needs more than one value per channel in training".into(),
                ));
            }
            let cnt = T::from_usize(count).unwrap();
            for ch in 0..c {
                let mut s = T::zero();
                for i in 0..n {
                    let off = (i * c + ch) * plane;
                    s += x.data()[off..off + plane].iter().copied().sum::<T>();
                }
                let m = s / cnt;
                let mut v = T::zero();
                for i in 0..n {
                    let off = (i * c + ch) * plane;
                    for &e in &x.data()[off..off + plane] {
                        v += (e - m) * (e - m);
                    }
                }
                mean[ch] = m;
                var[ch] = v / cnt;
            }
            let mom = T::from_f64_lossy(self.momentum);
            let unbias = cnt / (cnt - T::one());
            for ch in 0..c {
                self.running_mean[ch] = (T::one() - mom) * self.running_mean[ch] + mom * mean[ch];
                self.running_var[ch] =
                    (T::one() - mom) * self.running_var[ch] + mom * var[ch] * unbias;
            }
        } else {
            mean.copy_from_slice(&self.running_mean);
            var.copy_from_slice(&self.running_var);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut normalized = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                let (g, b, m, is) = (self.gamma.value[ch], self.beta.value[ch], mean[ch], inv_std[ch]);
                for k in off..off + plane {
                    let xh = (x.data()[k] - m) * is;
                    normalized.data_mut()[k] = xh;
                    out.data_mut()[k] = g * xh + b;
                }
            }
        }
        self.cache = mode.caches().then_some(BnCache {
            normalized,
            inv_std,
            batch_stats,
        });
        Ok(out)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_cache("batch_norm2d"))?;
        let (n, c, h, w) = dy.dims4();
        let plane = h * w;
        let cnt = T::from_usize(n * plane).unwrap();
        let xh = cache.normalized.data();
        let mut dx = Tensor::zeros(dy.shape());
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xh = T::zero();
            for i in 0..n {
                let off = (i * c + ch) * plane;
                for k in off..off + plane {
                    sum_dy += dy.data()[k];
                    sum_dy_xh += dy.data()[k] * xh[k];
                }
            }
            self.gamma.grad[ch] += sum_dy_xh;
            self.beta.grad[ch] += sum_dy;
            let scale = self.gamma.value[ch] * cache.inv_std[ch];
            for i in 0..n {
                let off = (i * c + ch) * plane;
                for k in off..off + plane {
                    dx.data_mut()[k] = if cache.batch_stats {
                        scale * (dy.data()[k] - sum_dy / cnt - xh[k] * sum_dy_xh / cnt)
                    } else {
                        scale * dy.data()[k]
                    };
                }
            }
        }
        Ok(dx)
    }
}

/// Fully connected layer, `y = x W^T + b`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = fan_in_bound(in_features);
        Self {
            in_features,
            out_features,
            weight: Param::uniform(&[out_features, in_features], bound, rng),
            bias: Param::uniform(&[out_features], bound, rng),
            input: None,
        }
    }

    /// Appends freshly initialized output rows; existing rows are untouched.
    pub fn grow_outputs<R: Rng + ?Sized>(&mut self, extra: usize, rng: &mut R) {
        let fresh = Linear::<T>::new(self.in_features, extra, rng);
        self.weight.value.extend_from_slice(&fresh.weight.value);
        self.bias.value.extend_from_slice(&fresh.bias.value);
        self.out_features += extra;
        self.weight.shape = vec![self.out_features, self.in_features];
        self.bias.shape = vec![self.out_features];
        self.weight.grad = vec![T::zero(); self.weight.value.len()];
        self.bias.grad = vec![T::zero(); self.bias.value.len()];
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if x.shape().len() != 2 || x.shape()[1] != self.in_features {
            return Err(Error::Argument(format!(
                "linear expects [N, {}], got {:?}",
                self.in_features,
                x.shape()
            )));
        }
        let n = x.batch();
        let mut out = Tensor::zeros(&[n, self.out_features]);
        gemm(
            n,
            self.in_features,
            self.out_features,
            T::one(),
            x.data(),
            false,
            &self.weight.value,
            true,
            T::zero(),
            out.data_mut(),
        );
        for i in 0..n {
            for (v, b) in out.row_mut(i).iter_mut().zip(&self.bias.value) {
                *v += *b;
            }
        }
        self.input = mode.caches().then(|| x.clone());
        Ok(out)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(|| missing_cache("linear"))?;
        let n = x.batch();
        gemm(
            self.out_features,
            n,
            self.in_features,
            T::one(),
            dy.data(),
            true,
            x.data(),
            false,
            T::one(),
            &mut self.weight.grad,
        );
        for i in 0..n {
            for (g, d) in self.bias.grad.iter_mut().zip(dy.row(i)) {
                *g += *d;
            }
        }
        let mut dx = Tensor::zeros(x.shape());
        gemm(
            n,
            self.out_features,
            self.in_features,
            T::one(),
            dy.data(),
            false,
            &self.weight.value,
            false,
            T::zero(),
            dx.data_mut(),
        );
        Ok(dx)
    }
}

/// Rectifier with a configurable negative slope (0 gives plain ReLU).
#[derive(Debug, Clone)]
pub struct Rectifier<T> {
    pub negative_slope: f64,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Rectifier<T> {
    pub fn relu() -> Self {
        Self::leaky(0.0)
    }

    pub fn leaky(negative_slope: f64) -> Self {
        Self {
            negative_slope,
            input: None,
        }
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let a = T::from_f64_lossy(self.negative_slope);
        let out = x.map(|v| if v > T::zero() { v } else { a * v });
        self.input = mode.caches().then(|| x.clone());
        Ok(out)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(|| missing_cache("rectifier"))?;
        let a = T::from_f64_lossy(self.negative_slope);
        let data = x
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&v, &d)| if v > T::zero() { d } else { a * d })
            .collect();
        Tensor::from_vec(dy.shape(), data)
    }
}

/// Reshape between `[N, sample..]` layouts.
#[derive(Debug, Clone)]
pub struct Reshape {
    pub target: Vec<usize>,
    input_shape: Option<Vec<usize>>,
}

impl Reshape {
    /// `target` excludes the batch axis.
    pub fn new(target: &[usize]) -> Self {
        Self {
            target: target.to_vec(),
            input_shape: None,
        }
    }

    fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut shape = vec![x.batch()];
        shape.extend_from_slice(&self.target);
        self.input_shape = Some(x.shape().to_vec());
        x.clone().reshape(&shape)
    }

    fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.input_shape.as_ref().ok_or_else(|| missing_cache("reshape"))?;
        dy.clone().reshape(shape)
    }
}

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    ConvTranspose(ConvTranspose2d<T>),
    BatchNorm(BatchNorm2d<T>),
    Linear(Linear<T>),
    Rectifier(Rectifier<T>),
    Reshape(Reshape),
}

impl<T: Scalar> Layer<T> {
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.forward(x, mode),
            Layer::ConvTranspose(l) => l.forward(x, mode),
            Layer::BatchNorm(l) => l.forward(x, mode),
            Layer::Linear(l) => l.forward(x, mode),
            Layer::Rectifier(l) => l.forward(x, mode),
            Layer::Reshape(l) => l.forward(x),
        }
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.backward(dy),
            Layer::ConvTranspose(l) => l.backward(dy),
            Layer::BatchNorm(l) => l.backward(dy),
            Layer::Linear(l) => l.backward(dy),
            Layer::Rectifier(l) => l.backward(dy),
            Layer::Reshape(l) => l.backward(dy),
        }
    }

    /// Named trainable parameters, in a fixed order.
    pub fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        match self {
            Layer::Conv(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            Layer::ConvTranspose(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            Layer::BatchNorm(l) => vec![("weight", &l.gamma), ("bias", &l.beta)],
            Layer::Linear(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            Layer::Rectifier(_) | Layer::Reshape(_) => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Conv(l) => vec![&mut l.weight, &mut l.bias],
            Layer::ConvTranspose(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Rectifier(_) | Layer::Reshape(_) => Vec::new(),
        }
    }

    /// Non-trainable state that still belongs in a checkpoint.
    pub fn buffers(&self) -> Vec<(&'static str, &Vec<T>)> {
        match self {
            Layer::BatchNorm(l) => vec![
                ("running_mean", &l.running_mean),
                ("running_var", &l.running_var),
            ],
            _ => Vec::new(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Vec<T>)> {
        match self {
            Layer::BatchNorm(l) => vec![
                ("running_mean", &mut l.running_mean),
                ("running_var", &mut l.running_var),
            ],
            _ => Vec::new(),
        }
    }

    /// Drops cached activations.
    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv(l) => l.input = None,
            Layer::ConvTranspose(l) => l.input = None,
            Layer::BatchNorm(l) => l.cache = None,
            Layer::Linear(l) => l.input = None,
            Layer::Rectifier(l) => l.input = None,
            Layer::Reshape(l) => l.input_shape = None,
        }
    }
}

/// Layers applied in order.
#[derive(Debug, Clone, Default)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut iter = self.layers.iter_mut();
        let Some(first) = iter.next() else {
            return Ok(x.clone());
        };
        let mut h = first.forward(x, mode)?;
        for layer in iter {
            h = layer.forward(&h, mode)?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = dy.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(|(_, p)| p.value.len())
            .sum()
    }

    pub fn buffer_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.buffers())
            .map(|(_, b)| b.len())
            .sum()
    }

    /// Flattened `(name, shape, values)` triples for checkpointing.
    pub fn named_arrays(&self, prefix: &str) -> Vec<(String, Vec<usize>, Vec<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, p) in layer.params() {
                out.push((format!("{prefix}.{i}.{name}"), p.shape.clone(), p.value.clone()));
            }
            for (name, b) in layer.buffers() {
                out.push((format!("{prefix}.{i}.{name}"), vec![b.len()], b.clone()));
            }
        }
        out
    }

    /// Overwrites parameters and buffers from named arrays produced by
    /// [`Sequential::named_arrays`].
    pub fn load_arrays(
        &mut self,
        prefix: &str,
        lookup: &dyn Fn(&str) -> Option<(Vec<usize>, Vec<T>)>,
    ) -> Result<()> {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let names: Vec<&'static str> = layer.params().iter().map(|(n, _)| *n).collect();
            for (name, p) in names.into_iter().zip(layer.params_mut()) {
                let key = format!("{prefix}.{i}.{name}");
                let (shape, values) =
                    lookup(&key).ok_or_else(|| Error::Format(format!("missing array {key}")))?;
                if shape != p.shape {
                    return Err(Error::Format(format!(
                        "array {key} has shape {shape:?}, expected {:?}",
                        p.shape
                    )));
                }
                p.value = values;
                p.zero_grad();
            }
            for (name, b) in layer.buffers_mut() {
                let key = format!("{prefix}.{i}.{name}");
                let (_, values) =
                    lookup(&key).ok_or_else(|| Error::Format(format!("missing array {key}")))?;
                if values.len() != b.len() {
                    return Err(Error::Format(format!("buffer {key} has wrong length")));
                }
                *b = values;
            }
        }
        Ok(())
    }
}
