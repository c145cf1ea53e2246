//! Parameter storage and the small set of layers the model is built from.
//!
//! Parameters live in a [`ParamStore`]. A trainable store hands out
//! variable-backed tensors that participate in backpropagation; a frozen
//! store hands out detached tensors, so nothing computed from them can ever
//! receive a gradient. Every parameter is initialised from a generator
//! seeded by the store seed and the parameter name, which keeps
//! initialisation independent of construction order.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Module, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Initialisation scheme for a freshly created parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Uniform { bound: f64 },
    Normal { std: f64 },
    /// Normal truncated at two standard deviations.
    TruncNormal { std: f64 },
}

impl Init {
    /// He/Kaiming uniform for ReLU networks.
    pub fn kaiming_uniform(fan_in: usize) -> Self {
        Init::Uniform {
            bound: (6.0 / fan_in as f64).sqrt(),
        }
    }

    fn sample(self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform { bound } => {
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..n).map(|_| dist.sample(rng) as f32).collect()
            }
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(rng) as f32).collect()
            }
            Init::TruncNormal { std } => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = dist.sample(rng);
                        if v.abs() <= 2.0 * std {
                            break v as f32;
                        }
                    })
                    .collect()
            }
        }
    }
}

struct StoreInner {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    seed: u64,
    trainable: bool,
    device: Device,
}

/// Named parameter storage shared by every layer of a model part.
///
/// Cloning is cheap; clones share storage and differ only in prefix.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<StoreInner>>,
    prefix: String,
}

fn param_seed(seed: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

impl ParamStore {
    pub fn new(seed: u64, trainable: bool) -> Self {
        Self {
            inner: Arc::new(Mutex::new(StoreInner {
                params: BTreeMap::new(),
                buffers: BTreeMap::new(),
                seed,
                trainable,
                device: Device::Cpu,
            })),
            prefix: String::new(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, StoreInner> {
        self.inner.lock().expect("parameter store poisoned")
    }

    /// Store with `name` appended to the current prefix.
    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Self {
            inner: Arc::clone(&self.inner),
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.lock().trainable
    }

    pub fn device(&self) -> Device {
        self.lock().device.clone()
    }

    /// Fetches or creates a parameter.
    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.full_name(name);
        let mut inner = self.lock();
        let var = match inner.params.get(&full) {
            Some(var) => {
                if var.dims() != shape {
                    return Err(Error::Contract(format!(
                        "parameter `{full}` requested with shape {shape:?}, stored as {:?}",
                        var.dims()
                    )));
                }
                var.clone()
            }
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(param_seed(inner.seed, &full));
                let n = shape.iter().product();
                let data = init.sample(n, &mut rng);
                let tensor = Tensor::from_vec(data, shape, &inner.device)?;
                let var = Var::from_tensor(&tensor)?;
                inner.params.insert(full, var.clone());
                var
            }
        };
        Ok(if inner.trainable {
            var.as_tensor().clone()
        } else {
            var.as_detached_tensor()
        })
    }

    /// Fetches or creates a non-trainable state buffer (e.g. running statistics).
    pub fn buffer(&self, name: &str, shape: &[usize], fill: f32) -> Result<Var> {
        let full = self.full_name(name);
        let mut inner = self.lock();
        if let Some(var) = inner.buffers.get(&full) {
            return Ok(var.clone());
        }
        let tensor = Tensor::full(fill, shape, &inner.device)?;
        let var = Var::from_tensor(&tensor)?;
        inner.buffers.insert(full, var.clone());
        Ok(var)
    }

    /// Trainable variables in name order; empty for a frozen store.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        let inner = self.lock();
        if !inner.trainable {
            return Vec::new();
        }
        inner
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Parameters only (no buffers), in name order.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        self.lock()
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.as_detached_tensor()))
            .collect()
    }

    /// Parameters and buffers, in name order.
    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        let inner = self.lock();
        inner
            .params
            .iter()
            .chain(inner.buffers.iter())
            .map(|(k, v)| (k.clone(), v.as_detached_tensor()))
            .collect()
    }

    /// Number of scalar parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.lock()
            .params
            .iter()
            .filter(|(k, _)| k.as_str() == prefix || k.starts_with(&format!("{prefix}.")))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    pub fn num_params(&self) -> usize {
        self.lock().params.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites stored parameters and buffers whose name starts with
    /// `scope` from `tensors`, keyed by the same names.
    ///
    /// Every in-scope entry must be present with a matching shape.
    pub fn load(&self, tensors: &HashMap<String, Tensor>, scope: &str) -> Result<()> {
        let inner = self.lock();
        for (name, var) in inner.params.iter().chain(inner.buffers.iter()) {
            if !name.starts_with(scope) {
                continue;
            }
            let src = tensors
                .get(name)
                .ok_or_else(|| Error::Config(format!("weight `{name}` missing from file")))?;
            if src.dims() != var.dims() {
                return Err(Error::Config(format!(
                    "weight `{name}` has shape {:?}, expected {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(DType::F32)?)?;
        }
        Ok(())
    }

    /// SHA-256 over every parameter name and its little-endian bytes.
    pub fn checksum(&self) -> Result<String> {
        let inner = self.lock();
        let mut hasher = Sha256::new();
        for (name, var) in inner.params.iter() {
            hasher.update(name.as_bytes());
            let values = var.as_tensor().flatten_all()?.to_vec1::<f32>()?;
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }
}

/// 2-D convolution over NCHW input.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        p: &ParamStore,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_c * kernel * kernel;
        let weight = p.param(
            "weight",
            &[out_c, in_c, kernel, kernel],
            Init::kaiming_uniform(fan_in),
        )?;
        let bias = if bias {
            Some(p.param("bias", &[out_c], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn with_init(
        p: &ParamStore,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> Result<Self> {
        let weight = p.param("weight", &[out_c, in_c, kernel, kernel], init)?;
        let bias = Some(p.param("bias", &[out_c], Init::Zeros)?);
        Ok(Self {
            weight,
            bias,
            stride,
            padding: 0,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn param_count(in_c: usize, out_c: usize, kernel: usize, bias: bool) -> usize {
        out_c * in_c * kernel * kernel + if bias { out_c } else { 0 }
    }
}

#[derive(Debug, Clone, Copy)]
struct Unfold {
    k: usize,
    stride: usize,
    padding: usize,
    /// Input (C, H, W); the output is (Ho·Wo, C·k²) per batch item.
    c: usize,
    h: usize,
    w: usize,
}

impl Unfold {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.padding - self.k) / self.stride + 1,
            (self.w + 2 * self.padding - self.k) / self.stride + 1,
        )
    }

    /// Calls `f(column offset, image offset, run length)` for every
    /// in-bounds run of horizontal taps. The column buffer is
    /// (Ho·Wo, C·k²): one row per output pixel. Runs are contiguous in
    /// both buffers when the stride is 1; otherwise they have length 1.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = self.out_hw();
        let (k, s, p) = (self.k, self.stride, self.padding);
        let row_len = self.c * k * k;
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (oy * wo + ox) * row_len;
                // valid kx satisfy p <= ox*s + kx < w + p
                let kx0 = p.saturating_sub(ox * s);
                let kx1 = k.min((self.w + p).saturating_sub(ox * s));
                if kx0 >= kx1 {
                    continue;
                }
                for ky in 0..k {
                    let iy = oy * s + ky;
                    if iy < p || iy - p >= self.h {
                        continue;
                    }
                    for c in 0..self.c {
                        let dst = row + (c * k + ky) * k;
                        let src = (c * self.h + iy - p) * self.w + ox * s + kx0 - p;
                        if s == 1 {
                            f(dst + kx0, src, kx1 - kx0);
                        } else {
                            for kx in kx0..kx1 {
                                f(dst + kx, src + kx - kx0, 1);
                            }
                        }
                    }
                }
            }
        }
    }

    fn col_len(&self) -> usize {
        let (ho, wo) = self.out_hw();
        self.c * self.k * self.k * ho * wo
    }

    fn img_len(&self) -> usize {
        self.c * self.h * self.w
    }
}

fn f32_slice<'a>(storage: &'a candle_core::CpuStorage, layout: &candle_core::Layout) -> candle_core::Result<&'a [f32]> {
    let candle_core::CpuStorage::F32(data) = storage else {
        candle_core::bail!("unfold supports f32 only");
    };
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("unfold expects a contiguous tensor"),
    }
}

/// Image → columns.
struct Im2Col(Unfold);
/// Columns → image, summing overlapping taps; the adjoint of [`Im2Col`].
struct Col2Im(Unfold);

impl candle_core::CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        let u = self.0;
        let src = f32_slice(storage, layout)?;
        let b = src.len() / u.img_len();
        let (ho, wo) = u.out_hw();
        let mut dst = vec![0f32; b * u.col_len()];
        for bi in 0..b {
            let img = &src[bi * u.img_len()..(bi + 1) * u.img_len()];
            let col = &mut dst[bi * u.col_len()..(bi + 1) * u.col_len()];
            u.for_each_run(|ci, ii, n| col[ci..ci + n].copy_from_slice(&img[ii..ii + n]));
        }
        let shape = (b, ho * wo, u.c * u.k * u.k).into();
        Ok((candle_core::CpuStorage::F32(dst), shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl candle_core::CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        let u = self.0;
        let src = f32_slice(storage, layout)?;
        let b = src.len() / u.col_len();
        let mut dst = vec![0f32; b * u.img_len()];
        for bi in 0..b {
            let col = &src[bi * u.col_len()..(bi + 1) * u.col_len()];
            let img = &mut dst[bi * u.img_len()..(bi + 1) * u.img_len()];
            u.for_each_run(|ci, ii, n| {
                for (d, v) in img[ii..ii + n].iter_mut().zip(&col[ci..ci + n]) {
                    *d += v;
                }
            });
        }
        Ok((candle_core::CpuStorage::F32(dst), (b, u.c, u.h, u.w).into()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// Unfolds k×k patches into rows (B, Ho·Wo, C·k²), channel-major to
/// match an (O, C, k, k) weight.
fn im2col(
    x: &Tensor,
    k: usize,
    stride: usize,
    padding: usize,
) -> candle_core::Result<(Tensor, usize, usize)> {
    let (_, c, h, w) = x.dims4()?;
    if h + 2 * padding < k || w + 2 * padding < k {
        candle_core::bail!("conv input {h}x{w} smaller than kernel {k}");
    }
    let u = Unfold {
        k,
        stride,
        padding,
        c,
        h,
        w,
    };
    let (ho, wo) = u.out_hw();
    let cols = x.to_dtype(DType::F32)?.contiguous()?.apply_op1(Im2Col(u))?;
    Ok((cols, ho, wo))
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (out_c, in_c, k, _) = self.weight.dims4()?;
        let (rows, ho, wo) = im2col(x, k, self.stride, self.padding)?;
        let b = rows.dim(0)?;
        let y = rows
            .reshape((b * ho * wo, in_c * k * k))?
            .matmul(&self.weight.reshape((out_c, in_c * k * k))?.t()?)?
            .reshape((b, ho * wo, out_c))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, out_c, ho, wo))?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?),
            None => Ok(y),
        }
    }
}

/// Transposed convolution with kernel == stride (exact integer upsampling).
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
}

impl ConvTranspose2d {
    pub fn new(p: &ParamStore, in_c: usize, out_c: usize, factor: usize) -> Result<Self> {
        let weight = p.param(
            "weight",
            &[in_c, out_c, factor, factor],
            Init::kaiming_uniform(in_c),
        )?;
        let bias = p.param("bias", &[out_c], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            stride: factor,
        })
    }
}

impl Module for ConvTranspose2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.conv_transpose2d(&self.weight, 0, 0, self.stride, 1)?
            .broadcast_add(&self.bias.reshape((1, (), 1, 1))?)
    }
}

/// Affine map over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(p: &ParamStore, in_f: usize, out_f: usize) -> Result<Self> {
        let weight = p.param("weight", &[out_f, in_f], Init::TruncNormal { std: 0.02 })?;
        let bias = p.param("bias", &[out_f], Init::Zeros)?;
        Ok(Self { weight, bias })
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.broadcast_matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)
    }
}

/// Layer normalisation over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(p: &ParamStore, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: p.param("weight", &[dim], Init::Ones)?,
            bias: p.param("bias", &[dim], Init::Zeros)?,
            eps: 1e-6,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

/// Per-channel batch normalisation with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    pub fn new(p: &ParamStore, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: p.param("weight", &[channels], Init::Ones)?,
            bias: p.param("bias", &[channels], Init::Zeros)?,
            running_mean: p.buffer("running_mean", &[channels], 0.0)?,
            running_var: p.buffer("running_var", &[channels], 1.0)?,
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        })
    }

    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }

    /// In training mode normalises with batch statistics and updates the
    /// running estimates; otherwise uses the running estimates.
    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        let (mean, var) = if train {
            let mean = x.mean_keepdim((0, 2, 3))?;
            let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim((0, 2, 3))?;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = self.momentum;
            let rm = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.detach().flatten_all()? * m)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - m))?
                + (var.detach().flatten_all()? * (m * unbiased))?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_detached_tensor().reshape((1, (), 1, 1))?,
                self.running_var.as_detached_tensor().reshape((1, (), 1, 1))?,
            )
        };
        let y = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight.reshape((1, (), 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?;
        Ok(y)
    }
}

/// Row-stochastic linear-interpolation matrix of shape (out, in), matching
/// half-pixel-centre (align_corners = false) bilinear resampling.
fn interp_matrix(in_size: usize, out_size: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_size * in_size];
    let scale = in_size as f64 / out_size as f64;
    for i in 0..out_size {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_size - 1);
        let i1 = (i0 + 1).min(in_size - 1);
        let frac = src - i0 as f64;
        m[i * in_size + i0] += 1.0 - frac;
        m[i * in_size + i1] += frac;
    }
    m
}

fn interp_tensor(in_size: usize, out_size: usize, x: &Tensor) -> Result<Tensor> {
    let m = interp_matrix(in_size, out_size);
    // (in, out) so that rows @ m^T resamples the trailing axis.
    Ok(Tensor::from_vec(m, (out_size, in_size), x.device())?
        .to_dtype(x.dtype())?
        .t()?
        .contiguous()?)
}

/// Differentiable bilinear resize of an NCHW tensor, built from two matrix
/// products so that gradients flow through standard matmul backward.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let mw = interp_tensor(w, out_w, x)?;
    let mh = interp_tensor(h, out_h, x)?;
    let y = x.contiguous()?.reshape((n * c * h, w))?.matmul(&mw)?;
    let y = y
        .reshape((n * c, h, out_w))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((n * c * out_w, h))?
        .matmul(&mh)?;
    let y = y
        .reshape((n * c, out_w, out_h))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((n, c, out_h, out_w))?;
    Ok(y)
}

/// Bilinear upsampling by an integer factor.
pub fn upsample_bilinear(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    resize_bilinear(x, h * factor, w * factor)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (_, _, h, w) = x.dims4()?;
    Ok(x.upsample_nearest2d(h * factor, w * factor)?)
}

/// Non-overlapping average pooling by an integer factor.
pub fn avg_pool(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    Ok(x.avg_pool2d(factor)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_init_is_order_independent() {
        let a = ParamStore::new(3, true);
        let x1 = a.pp("x").param("w", &[4], Init::Normal { std: 1.0 }).unwrap();
        let _y1 = a.pp("y").param("w", &[4], Init::Normal { std: 1.0 }).unwrap();

        let b = ParamStore::new(3, true);
        let _y2 = b.pp("y").param("w", &[4], Init::Normal { std: 1.0 }).unwrap();
        let x2 = b.pp("x").param("w", &[4], Init::Normal { std: 1.0 }).unwrap();
        assert_eq!(
            x1.to_vec1::<f32>().unwrap(),
            x2.to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn unfolded_conv_matches_direct_conv() {
        let p = ParamStore::new(1, false);
        for (k, stride, padding, h) in [(3, 1, 1, 8), (3, 2, 1, 8), (3, 2, 1, 7), (1, 1, 0, 5), (4, 4, 0, 8), (2, 2, 0, 6)] {
            let conv = Conv2d::new(&p.pp(format!("c{k}{stride}{padding}{h}")), 3, 5, k, stride, padding, true).unwrap();
            let x = Tensor::randn(0f32, 1f32, (2, 3, h, h + 1), &Device::Cpu).unwrap();
            let a = conv.forward(&x).unwrap();
            let b = x.conv2d(conv.weight(), padding, stride, 1, 1).unwrap();
            assert_eq!(a.dims(), b.dims());
            let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert!(d < 1e-5, "{k} {stride} {padding} {h}: {d}");
        }
    }

    #[test]
    fn frozen_store_is_untracked() {
        let p = ParamStore::new(0, false);
        let w = p.param("w", &[3], Init::Ones).unwrap();
        assert!(!w.track_op());
        assert!(p.trainable_vars().is_empty());
        let t = ParamStore::new(0, true);
        let w = t.param("w", &[3], Init::Ones).unwrap();
        assert!(w.is_variable());
    }

    #[test]
    fn interpolation_rows_sum_to_one() {
        for (i, o) in [(4, 8), (8, 16), (3, 12), (8, 4)] {
            let m = interp_matrix(i, o);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_preserves_constants_and_matches_reference() {
        let x = Tensor::full(2.5f32, (1, 2, 4, 4), &Device::Cpu).unwrap();
        let y = upsample_bilinear(&x, 2).unwrap();
        assert_eq!(y.dims(), &[1, 2, 8, 8]);
        for v in y.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert!((v - 2.5).abs() < 1e-6);
        }
        // 1-D ramp [0, 1] upsampled 2x with half-pixel centres.
        let x = Tensor::new(&[[[[0f32, 1.0]]]], &Device::Cpu).unwrap();
        let y = resize_bilinear(&x, 1, 4).unwrap();
        let got = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let want = [0.0, 0.25, 0.75, 1.0];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-6, "{got:?}");
        }
    }

    #[test]
    fn batch_norm_train_normalises_and_tracks_stats() {
        let p = ParamStore::new(0, true);
        let bn = BatchNorm2d::new(&p, 1).unwrap();
        let x = Tensor::new(&[[[[1f32, 3.0], [5.0, 7.0]]]], &Device::Cpu).unwrap();
        let y = bn.forward_t(&x, true).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let mean: f32 = v.iter().sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        let rm = bn.running_mean.as_tensor().to_vec1::<f32>().unwrap()[0];
        assert!((rm - 0.4).abs() < 1e-6);
        // unbiased variance of {1,3,5,7} is 20/3
        let rv = bn.running_var.as_tensor().to_vec1::<f32>().unwrap()[0];
        assert!((rv - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-5);
    }
}
