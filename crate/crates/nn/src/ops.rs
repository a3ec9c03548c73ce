//! Forward kernels and their reverse-mode counterparts.
//!
//! The free functions here work on plain tensors and parameter structs; the
//! [`Tape`](crate::Tape) records the same kernels and calls the `*_backward`
//! functions when gradients are requested.

use crate::error::{NnError, Result};
use crate::tensor::{lit, Real, Tensor};

/// Spatial bookkeeping for one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Validates an `N x C x H x W` input against a `K x C x kh x kw` kernel.
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(NnError::shape(format!(
                "conv2d expects NxCxHxW input and KxCxkHxkW kernel, got {input:?} and {kernel:?}"
            )));
        }
        if stride == 0 {
            return Err(NnError::config("conv2d stride must be positive"));
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (k, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if c != kc {
            return Err(NnError::config(format!(
                "conv2d input has {c} channels but kernel expects {kc}"
            )));
        }
        let out_h = conv_out_dim(h, kh, stride, pad)?;
        let out_w = conv_out_dim(w, kw, stride, pad)?;
        Ok(Self {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            out_channels: k,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_image(&self) -> usize {
        self.in_channels * self.height * self.width
    }
}

/// `floor((size + 2 pad - kernel) / stride) + 1`, or an error when the kernel
/// does not fit the padded input.
pub fn conv_out_dim(size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if kernel == 0 || kernel > padded {
        return Err(NnError::config(format!(
            "kernel {kernel} does not fit padded size {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Convolution weights: kernel `K x C x kH x kW` and bias `K`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Affine layer `y = W x + b` with `W: out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// LSTM cell weights. Gate rows are ordered input, forget, candidate, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<T> {
    /// `4H x I`
    pub w_input: Tensor<T>,
    /// `4H x H`
    pub w_hidden: Tensor<T>,
    /// `4H`
    pub bias: Tensor<T>,
}

impl<T: Real> LstmParams<T> {
    pub fn hidden(&self) -> usize {
        self.w_hidden.dim(1)
    }
}

/// Per-channel affine normalization with running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    /// False until the first training-mode pass has filled the running stats.
    pub initialized: bool,
}

impl<T: Real> BatchNormParams<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full([channels], T::one()),
            beta: Tensor::zeros([channels]),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::full([channels], T::one()),
            initialized: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;

// ---------------------------------------------------------------------------
// convolution

/// Unfolds one image into a `(C kh kw) x (Ho Wo)` patch matrix.
fn im2col<T: Real>(image: &[T], g: &ConvGeometry, col: &mut [T]) {
    let plane = g.out_plane();
    let (s, pad) = (g.stride as isize, g.pad as isize);
    for c in 0..g.in_channels {
        let chan = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = oy as isize * s + ki as isize - pad;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &chan[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s + kj as isize - pad;
                        *v = if ix < 0 || ix >= g.width as isize {
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

/// Adjoint of [`im2col`]: scatters patch gradients back into the image.
fn col2im<T: Real>(col: &[T], g: &ConvGeometry, image: &mut [T]) {
    let plane = g.out_plane();
    let (s, pad) = (g.stride as isize, g.pad as isize);
    for c in 0..g.in_channels {
        let chan = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = oy as isize * s + ki as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut chan[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = ox as isize * s + kj as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Real>(bias: &Tensor<T>, channels: usize) -> Result<()> {
    if bias.shape() != [channels] {
        return Err(NnError::config(format!(
            "bias shape {:?} does not match {channels} output channels",
            bias.shape()
        )));
    }
    Ok(())
}

/// Batched im2col convolution on an `N x C x H x W` tensor.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, ConvGeometry)> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, pad)?;
    check_bias(bias, g.out_channels)?;
    let plane = g.out_plane();
    let out_image = g.out_channels * plane;
    let mut out = vec![T::zero(); g.batch * out_image];
    let mut col = vec![T::zero(); g.patch_len() * plane];
    for n in 0..g.batch {
        let image = &input.data()[n * g.in_image()..(n + 1) * g.in_image()];
        im2col(image, &g, &mut col);
        let dst = &mut out[n * out_image..(n + 1) * out_image];
        for (k, chunk) in dst.chunks_mut(plane).enumerate() {
            chunk.fill(bias.data()[k]);
        }
        T::gemm(
            g.out_channels,
            g.patch_len(),
            plane,
            T::one(),
            kernel.data(),
            g.patch_len() as isize,
            1,
            &col,
            plane as isize,
            1,
            T::one(),
            dst,
            plane as isize,
            1,
        );
    }
    let out = Tensor::new([g.batch, g.out_channels, g.out_h, g.out_w], out)?;
    Ok((out, g))
}

/// Gradients of a convolution: `(d input, d kernel, d bias)`.
///
/// The input gradient is skipped when `want_input` is false.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: &ConvGeometry,
    want_input: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let out_image = g.out_channels * plane;
    let mut d_kernel = vec![T::zero(); g.out_channels * patch];
    let mut d_bias = vec![T::zero(); g.out_channels];
    let mut d_input = want_input.then(|| vec![T::zero(); input.len()]);
    let mut col = vec![T::zero(); patch * plane];
    for n in 0..g.batch {
        let image = &input.data()[n * g.in_image()..(n + 1) * g.in_image()];
        let dy = &grad_out.data()[n * out_image..(n + 1) * out_image];
        for (k, chunk) in dy.chunks(plane).enumerate() {
            d_bias[k] = d_bias[k] + chunk.iter().copied().sum::<T>();
        }
        im2col(image, g, &mut col);
        // dK += dY [K x P] * col^T [P x patch]
        T::gemm(
            g.out_channels,
            plane,
            patch,
            T::one(),
            dy,
            plane as isize,
            1,
            &col,
            1,
            plane as isize,
            T::one(),
            &mut d_kernel,
            patch as isize,
            1,
        );
        if let Some(dx) = d_input.as_mut() {
            // dcol = K^T [patch x K] * dY [K x P]
            T::gemm(
                patch,
                g.out_channels,
                plane,
                T::one(),
                kernel.data(),
                1,
                patch as isize,
                dy,
                plane as isize,
                1,
                T::zero(),
                &mut col,
                plane as isize,
                1,
            );
            col2im(
                &col,
                g,
                &mut dx[n * g.in_image()..(n + 1) * g.in_image()],
            );
        }
    }
    let shape = [g.batch, g.in_channels, g.height, g.width];
    (
        d_input.map(|d| Tensor::new(shape, d).expect("input gradient shape")),
        Tensor::new(kernel.shape().to_vec(), d_kernel).expect("kernel gradient shape"),
        Tensor::new([g.out_channels], d_bias).expect("bias gradient shape"),
    )
}

/// Convolution of a `C x H x W` (or batched `N x C x H x W`) input.
///
/// Positions outside the input read as zero.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    params: &Conv2dParams<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    match input.rank() {
        3 => {
            let mut shape = vec![1];
            shape.extend_from_slice(input.shape());
            let batched = input.clone().reshape(shape)?;
            let (out, g) = conv2d_forward(&batched, &params.kernel, &params.bias, stride, pad)?;
            out.reshape([g.out_channels, g.out_h, g.out_w])
        }
        _ => Ok(conv2d_forward(input, &params.kernel, &params.bias, stride, pad)?.0),
    }
}

/// Direct six-loop convolution. Slow; kept as the reference the im2col path
/// is checked against.
pub fn conv2d_reference<T: Real>(
    input: &Tensor<T>,
    params: &Conv2dParams<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let batched_shape = if input.rank() == 3 {
        let mut s = vec![1];
        s.extend_from_slice(input.shape());
        s
    } else {
        input.shape().to_vec()
    };
    let g = ConvGeometry::new(&batched_shape, params.kernel.shape(), stride, pad)?;
    check_bias(&params.bias, g.out_channels)?;
    let x = input.data();
    let w = params.kernel.data();
    let mut out = Vec::with_capacity(g.batch * g.out_channels * g.out_plane());
    for n in 0..g.batch {
        for k in 0..g.out_channels {
            for i in 0..g.out_h {
                for j in 0..g.out_w {
                    let mut acc = params.bias.data()[k];
                    for c in 0..g.in_channels {
                        for m in 0..g.kernel_h {
                            for q in 0..g.kernel_w {
                                let y = (i * stride + m) as isize - pad as isize;
                                let xx = (j * stride + q) as isize - pad as isize;
                                if y < 0
                                    || xx < 0
                                    || y >= g.height as isize
                                    || xx >= g.width as isize
                                {
                                    continue;
                                }
                                let xi = ((n * g.in_channels + c) * g.height + y as usize)
                                    * g.width
                                    + xx as usize;
                                let wi = ((k * g.in_channels + c) * g.kernel_h + m) * g.kernel_w
                                    + q;
                                acc = acc + w[wi] * x[xi];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    if input.rank() == 3 {
        Tensor::new([g.out_channels, g.out_h, g.out_w], out)
    } else {
        Tensor::new([g.batch, g.out_channels, g.out_h, g.out_w], out)
    }
}

// ---------------------------------------------------------------------------
// pooling

/// Max pooling over the last two axes. Returns the output and, for every
/// output cell, the flat input index that won (first maximum in row-major
/// order on ties).
pub fn maxpool2d_forward<T: Real>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if input.rank() < 2 {
        return Err(NnError::shape("maxpool2d needs at least two axes"));
    }
    if window == 0 || stride == 0 {
        return Err(NnError::config("maxpool2d window and stride must be positive"));
    }
    let r = input.rank();
    let (h, w) = (input.dim(r - 2), input.dim(r - 1));
    if h < window || w < window {
        return Err(NnError::config(format!(
            "maxpool2d window {window} larger than spatial dims {h}x{w}"
        )));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let planes = input.len() / (h * w);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    let x = input.data();
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best_idx = base + i * stride * w + j * stride;
                let mut best = x[best_idx];
                for m in 0..window {
                    for n in 0..window {
                        let idx = base + (i * stride + m) * w + j * stride + n;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    let mut shape = input.shape().to_vec();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Ok((Tensor::new(shape, out)?, argmax))
}

pub fn maxpool2d_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] = d[idx] + g;
    }
    dx
}

/// 2x2 / stride-2 max pooling.
pub fn maxpool2d<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(maxpool2d_forward(input, 2, 2)?.0)
}

// ---------------------------------------------------------------------------
// batch normalization

/// Layout helper: `(batch, channels, spatial)` for `N x C [x H x W]` inputs.
fn norm_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(NnError::shape(format!(
            "batch norm expects N x C [x ...] input, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Saved values for the training-mode backward pass.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    /// Biased (1/m) batch variance.
    pub batch_var: Vec<T>,
}

pub fn batchnorm_train_forward<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let (n, c, s) = norm_layout(input.shape())?;
    if n < 2 {
        return Err(NnError::config(
            "training-mode batch norm needs a batch of at least 2",
        ));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(NnError::config(format!(
            "batch norm affine params must have shape [{c}]"
        )));
    }
    let m = lit::<T>((n * s) as f64);
    let x = input.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let plane = &x[(b * c + ch) * s..(b * c + ch + 1) * s];
            mean[ch] = mean[ch] + plane.iter().copied().sum::<T>();
        }
    }
    for v in &mut mean {
        *v = *v / m;
    }
    for b in 0..n {
        for ch in 0..c {
            let plane = &x[(b * c + ch) * s..(b * c + ch + 1) * s];
            let mu = mean[ch];
            var[ch] = var[ch] + plane.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
        }
    }
    for v in &mut var {
        *v = *v / m;
    }
    let eps = lit::<T>(eps);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * s..(b * c + ch + 1) * s;
            let (g, bt, mu, is) = (gamma.data()[ch], beta.data()[ch], mean[ch], inv_std[ch]);
            for i in range {
                let xh = (x[i] - mu) * is;
                xhat[i] = xh;
                out[i] = g * xh + bt;
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), out)?,
        NormCache {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    ))
}

/// `(d input, d gamma, d beta)` for training-mode batch norm.
pub fn batchnorm_train_backward<T: Real>(
    shape: &[usize],
    gamma: &Tensor<T>,
    cache: &NormCache<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, s) = norm_layout(shape).expect("validated in forward");
    let m = lit::<T>((n * s) as f64);
    let dy = grad_out.data();
    let mut d_gamma = vec![T::zero(); c];
    let mut d_beta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                d_beta[ch] = d_beta[ch] + dy[i];
                d_gamma[ch] = d_gamma[ch] + dy[i] * cache.xhat[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let g = gamma.data()[ch];
            // sum(dxhat) = g * d_beta, sum(dxhat * xhat) = g * d_gamma
            let k = g * cache.inv_std[ch] / m;
            for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                dx[i] = k * (m * dy[i] - d_beta[ch] - cache.xhat[i] * d_gamma[ch]);
            }
        }
    }
    (
        Tensor::new(shape.to_vec(), dx).expect("shape"),
        Tensor::new([c], d_gamma).expect("shape"),
        Tensor::new([c], d_beta).expect("shape"),
    )
}

/// Inference-mode normalization using fixed statistics. Returns the output
/// and the per-channel `1/sqrt(var + eps)` used.
pub fn batchnorm_infer_forward<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (n, c, s) = norm_layout(input.shape())?;
    for t in [gamma, beta, mean, var] {
        if t.shape() != [c] {
            return Err(NnError::config(format!(
                "batch norm statistics must have shape [{c}]"
            )));
        }
    }
    let eps = lit::<T>(eps);
    let inv_std: Vec<T> = var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let (g, bt, mu, is) = (
                gamma.data()[ch],
                beta.data()[ch],
                mean.data()[ch],
                inv_std[ch],
            );
            for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                out[i] = g * (x[i] - mu) * is + bt;
            }
        }
    }
    Ok((Tensor::new(input.shape().to_vec(), out)?, inv_std))
}

/// Folds a batch's statistics into the running estimates.
pub fn update_running_stats<T: Real>(
    params: &mut BatchNormParams<T>,
    cache: &NormCache<T>,
    count: usize,
) {
    fold_running_stats(
        &mut params.running_mean,
        &mut params.running_var,
        !params.initialized,
        &cache.batch_mean,
        &cache.batch_var,
        count,
    );
    params.initialized = true;
}

/// EMA update of running mean/variance from one batch of `count` values per
/// channel. The first batch replaces the estimates outright.
pub fn fold_running_stats<T: Real>(
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    first: bool,
    batch_mean: &[T],
    batch_var: &[T],
    count: usize,
) {
    let keep = lit::<T>(BN_MOMENTUM);
    let take = T::one() - keep;
    // running variance tracks the unbiased estimate
    let unbias = if count > 1 {
        lit::<T>(count as f64 / (count as f64 - 1.0))
    } else {
        T::one()
    };
    for (ch, (&mu, &var)) in batch_mean.iter().zip(batch_var).enumerate() {
        let rm = &mut running_mean.data_mut()[ch];
        *rm = if first { mu } else { keep * *rm + take * mu };
        let rv = &mut running_var.data_mut()[ch];
        let v = (var * unbias).max(T::zero());
        *rv = if first { v } else { keep * *rv + take * v };
    }
}

/// Batch normalization over `N x C [x H x W]` inputs.
///
/// Training mode normalizes with batch statistics and updates the running
/// estimates; inference mode uses the running estimates and fails if none
/// exist yet.
pub fn batchnorm<T: Real>(
    input: &Tensor<T>,
    params: &mut BatchNormParams<T>,
    mode: Mode,
    eps: f64,
) -> Result<Tensor<T>> {
    match mode {
        Mode::Train => {
            let (out, cache) = batchnorm_train_forward(input, &params.gamma, &params.beta, eps)?;
            let (n, _, s) = norm_layout(input.shape())?;
            update_running_stats(params, &cache, n * s);
            Ok(out)
        }
        Mode::Infer => {
            if !params.initialized {
                return Err(NnError::UntrainedNorm("batchnorm".into()));
            }
            Ok(batchnorm_infer_forward(
                input,
                &params.gamma,
                &params.beta,
                &params.running_mean,
                &params.running_var,
                eps,
            )?
            .0)
        }
    }
}

// ---------------------------------------------------------------------------
// activations

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Logistic function evaluated without overflow and kept strictly inside
/// `(0, 1)`.
#[inline]
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    let s = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let hi = T::one() - T::epsilon() / lit(2.0);
    s.max(T::min_positive_value()).min(hi)
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn tanh<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

// ---------------------------------------------------------------------------
// dense

/// `a [N x I] * w^T` for `w: O x I`, giving `N x O`.
pub fn matmul_t<T: Real>(a: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || w.rank() != 2 || a.dim(1) != w.dim(1) {
        return Err(NnError::config(format!(
            "cannot multiply {:?} by transpose of {:?}",
            a.shape(),
            w.shape()
        )));
    }
    let (n, i, o) = (a.dim(0), a.dim(1), w.dim(0));
    let mut out = vec![T::zero(); n * o];
    T::gemm(
        n,
        i,
        o,
        T::one(),
        a.data(),
        i as isize,
        1,
        w.data(),
        1,
        i as isize,
        T::zero(),
        &mut out,
        o as isize,
        1,
    );
    Tensor::new([n, o], out)
}

/// `(d a, d w)` for [`matmul_t`].
pub fn matmul_t_backward<T: Real>(
    a: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    want_a: bool,
) -> (Option<Tensor<T>>, Tensor<T>) {
    let (n, i, o) = (a.dim(0), a.dim(1), w.dim(0));
    // dW [O x I] = dY^T [O x N] * A [N x I]
    let mut dw = vec![T::zero(); o * i];
    T::gemm(
        o,
        n,
        i,
        T::one(),
        grad_out.data(),
        1,
        o as isize,
        a.data(),
        i as isize,
        1,
        T::zero(),
        &mut dw,
        i as isize,
        1,
    );
    let da = want_a.then(|| {
        // dA [N x I] = dY [N x O] * W [O x I]
        let mut da = vec![T::zero(); n * i];
        T::gemm(
            n,
            o,
            i,
            T::one(),
            grad_out.data(),
            o as isize,
            1,
            w.data(),
            i as isize,
            1,
            T::zero(),
            &mut da,
            i as isize,
            1,
        );
        Tensor::new([n, i], da).expect("shape")
    });
    (da, Tensor::new([o, i], dw).expect("shape"))
}

/// Adds a length-`O` row vector to every row of an `N x O` matrix.
pub fn add_row<T: Real>(x: &Tensor<T>, row: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 || row.shape() != [x.dim(1)] {
        return Err(NnError::config(format!(
            "cannot broadcast {:?} over rows of {:?}",
            row.shape(),
            x.shape()
        )));
    }
    let o = x.dim(1);
    let mut out = x.clone();
    for chunk in out.data_mut().chunks_mut(o) {
        for (v, &b) in chunk.iter_mut().zip(row.data()) {
            *v = *v + b;
        }
    }
    Ok(out)
}

/// Affine map. Accepts a vector of length `in` or an `N x in` batch.
pub fn dense<T: Real>(input: &Tensor<T>, params: &DenseParams<T>) -> Result<Tensor<T>> {
    if params.weight.rank() != 2 || params.bias.shape() != [params.weight.dim(0)] {
        return Err(NnError::config("dense weight must be out x in with bias of length out"));
    }
    let vector = input.rank() == 1;
    let batch = if vector {
        input.clone().reshape([1, input.len()])?
    } else {
        input.clone()
    };
    let y = add_row(&matmul_t(&batch, &params.weight)?, &params.bias)?;
    if vector {
        y.reshape([params.weight.dim(0)])
    } else {
        Ok(y)
    }
}

// ---------------------------------------------------------------------------
// LSTM

/// One LSTM step on a batch: `x: N x I`, `h, c: N x H`.
pub fn lstm_step<T: Real>(
    x: &Tensor<T>,
    h_prev: &Tensor<T>,
    c_prev: &Tensor<T>,
    params: &LstmParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let hidden = params.hidden();
    if params.w_input.dim(0) != 4 * hidden
        || params.w_hidden.shape() != [4 * hidden, hidden]
        || params.bias.shape() != [4 * hidden]
    {
        return Err(NnError::config("inconsistent LSTM parameter shapes"));
    }
    if h_prev.rank() != 2 || h_prev.dim(1) != hidden || c_prev.shape() != h_prev.shape() {
        return Err(NnError::shape(format!(
            "LSTM state must be N x {hidden}, got h {:?} c {:?}",
            h_prev.shape(),
            c_prev.shape()
        )));
    }
    if x.rank() != 2 || x.dim(0) != h_prev.dim(0) {
        return Err(NnError::shape("LSTM input batch does not match state batch"));
    }
    let z = add_row(&matmul_t(x, &params.w_input)?, &params.bias)?;
    let zh = matmul_t(h_prev, &params.w_hidden)?;
    let n = x.dim(0);
    let mut h = vec![T::zero(); n * hidden];
    let mut c = vec![T::zero(); n * hidden];
    for b in 0..n {
        let row = b * 4 * hidden;
        for j in 0..hidden {
            let pre = |gate: usize| z.data()[row + gate * hidden + j] + zh.data()[row + gate * hidden + j];
            let i_g = sigmoid_scalar(pre(0));
            let f_g = sigmoid_scalar(pre(1));
            let g_g = pre(2).tanh();
            let o_g = sigmoid_scalar(pre(3));
            let ct = f_g * c_prev.data()[b * hidden + j] + i_g * g_g;
            c[b * hidden + j] = ct;
            h[b * hidden + j] = o_g * ct.tanh();
        }
    }
    Ok((Tensor::new([n, hidden], h)?, Tensor::new([n, hidden], c)?))
}
