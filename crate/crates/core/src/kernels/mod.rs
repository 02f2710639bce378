//! Dense f32 tensors and the reference operator kernels. Reference kernels
//! fix one accumulation order (n, c_out, h, w, c_in, k_h, k_w for conv) so
//! results are reproducible bit-for-bit across runs; the tuned conv in
//! [`tuned`] reuses the same inner helpers to keep its degenerate
//! configuration identical to the reference.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{pad_before, ConvSpec, Layout, PoolSpec, TensorSpec};

pub mod tuned;

pub use tuned::{conv2d_tuned, fused_conv_bias_relu_tuned, TileConfig};

/// Row-major tensor in the physical order given by `spec.dims`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub spec: TensorSpec,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(spec: TensorSpec, data: Vec<f32>) -> Result<Self> {
        spec.validate()?;
        if spec.element_count() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "payload of {} elements does not fill dims {:?}",
                data.len(),
                spec.dims
            )));
        }
        Ok(Tensor { spec, data })
    }

    pub fn zeros(spec: TensorSpec) -> Self {
        let len = spec.element_count();
        Tensor { spec, data: vec![0.0; len] }
    }

    pub fn filled(spec: TensorSpec, value: f32) -> Self {
        let len = spec.element_count();
        Tensor { spec, data: vec![value; len] }
    }

    pub fn random(spec: TensorSpec, rng: &mut impl Rng) -> Self {
        let len = spec.element_count();
        let data = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor { spec, data }
    }

    pub fn from_dims(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Tensor::new(TensorSpec::new(dims), data)
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { spec: TensorSpec::new(vec![1]), data: vec![value] }
    }

    /// Physically permute a rank-4 tensor into `target` order. Values are
    /// moved, never recomputed, so round trips are exact.
    pub fn to_layout(&self, target: Layout) -> Result<Tensor> {
        if self.spec.rank() != 4 {
            return Err(Error::UnsupportedRank(format!(
                "cannot change layout of rank-{} tensor",
                self.spec.rank()
            )));
        }
        let current = self.spec.layout.unwrap_or(Layout::Nchw);
        if current == target {
            return Ok(self.clone());
        }
        let [n, c, h, w] = self.spec.nchw_dims()?;
        let spec = TensorSpec::from_nchw(n, c, h, w, target);
        let mut out = vec![0.0f32; self.data.len()];
        match (current, target) {
            (Layout::Nchw, Layout::Nhwc) => {
                for ni in 0..n {
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                out[((ni * h + hi) * w + wi) * c + ci] =
                                    self.data[((ni * c + ci) * h + hi) * w + wi];
                            }
                        }
                    }
                }
            }
            (Layout::Nhwc, Layout::Nchw) => {
                for ni in 0..n {
                    for hi in 0..h {
                        for wi in 0..w {
                            for ci in 0..c {
                                out[((ni * c + ci) * h + hi) * w + wi] =
                                    self.data[((ni * h + hi) * w + wi) * c + ci];
                            }
                        }
                    }
                }
            }
            _ => unreachable!(),
        }
        Ok(Tensor { spec, data: out })
    }
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.spec.dims != b.spec.dims {
        return Err(Error::ShapeMismatch(format!(
            "cannot compare dims {:?} with {:?}",
            a.spec.dims, b.spec.dims
        )));
    }
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).abs())
        .fold(0.0, f64::max))
}

/// Sequential dot product; the single accumulation order every conv path
/// shares. Not reassociated, so equal inputs give equal bits.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// Accumulate one output cell of a conv over the channel range `c_lo..c_hi`,
/// walking (c_in, k_h, k_w) ascending. Window rows and columns that fall
/// outside the input are skipped (zero padding contributes nothing).
#[inline]
pub(crate) fn accumulate_window(
    x: &[f32],
    f: &[f32],
    cs: &ConvSpec,
    ni: usize,
    z: usize,
    oh: usize,
    ow: usize,
    c_lo: usize,
    c_hi: usize,
) -> f32 {
    let (h, w) = (cs.h, cs.w);
    let (k_h, k_w) = (cs.k_h, cs.k_w);
    let ih0 = (oh * cs.stride) as isize - pad_before(h, k_h, cs.stride, cs.padding) as isize;
    let iw0 = (ow * cs.stride) as isize - pad_before(w, k_w, cs.stride, cs.padding) as isize;
    let kw_lo = (-iw0).max(0) as usize;
    let kw_hi = (w as isize - iw0).clamp(0, k_w as isize) as usize;
    let mut acc = 0.0f32;
    if kw_lo >= kw_hi {
        return acc;
    }
    let x_base = ni * cs.c_in * h * w;
    let f_stride_c = k_h * k_w;
    let f_base_z = z * cs.c_in * f_stride_c;
    for ci in c_lo..c_hi {
        let x_plane = x_base + ci * h * w;
        let f_plane = f_base_z + ci * f_stride_c;
        for kh in 0..k_h {
            let ih = ih0 + kh as isize;
            if ih < 0 || ih >= h as isize {
                continue;
            }
            let row = x_plane + ih as usize * w + (iw0 + kw_lo as isize) as usize;
            let frow = f_plane + kh * k_w + kw_lo;
            acc += dot(&f[frow..frow + (kw_hi - kw_lo)], &x[row..row + (kw_hi - kw_lo)]);
        }
    }
    acc
}

pub(crate) fn check_conv_inputs(input: &Tensor, filter: &Tensor, cs: &ConvSpec) -> Result<Layout> {
    cs.validate()?;
    let layout = input.spec.layout.unwrap_or(Layout::Nchw);
    if input.spec.dims != cs.input_spec(layout).dims {
        return Err(Error::ShapeMismatch(format!(
            "conv input dims {:?} do not match spec {:?}",
            input.spec.dims,
            cs.input_spec(layout).dims
        )));
    }
    if filter.spec.dims != cs.filter_spec().dims {
        return Err(Error::ShapeMismatch(format!(
            "filter dims {:?} do not match {:?}",
            filter.spec.dims,
            cs.filter_spec().dims
        )));
    }
    Ok(layout)
}

/// Direct convolution with the fixed reference loop order. `post` maps each
/// accumulated cell (keyed by output channel) before it is stored; plain conv
/// passes the value through, the fused kernel adds bias and clamps.
fn conv_core<P: Fn(usize, f32) -> f32>(
    input: &Tensor,
    filter: &Tensor,
    cs: &ConvSpec,
    post: P,
) -> Result<Tensor> {
    let layout = check_conv_inputs(input, filter, cs)?;
    let canonical;
    let x: &Tensor = if layout == Layout::Nchw {
        input
    } else {
        canonical = input.to_layout(Layout::Nchw)?;
        &canonical
    };
    let (out_h, out_w) = cs.out_hw()?;
    let mut out = vec![0.0f32; cs.n * cs.c_out * out_h * out_w];
    let mut idx = 0;
    for ni in 0..cs.n {
        for z in 0..cs.c_out {
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let acc = accumulate_window(&x.data, &filter.data, cs, ni, z, oh, ow, 0, cs.c_in);
                    out[idx] = post(z, acc);
                    idx += 1;
                }
            }
        }
    }
    let result = Tensor {
        spec: cs.output_spec(Layout::Nchw)?,
        data: out,
    };
    if layout == Layout::Nchw {
        Ok(result)
    } else {
        result.to_layout(layout)
    }
}

pub fn conv2d_reference(input: &Tensor, filter: &Tensor, cs: &ConvSpec) -> Result<Tensor> {
    conv_core(input, filter, cs, |_, acc| acc)
}

/// Conv + bias + ReLU in one pass over the output.
pub fn fused_conv_bias_relu(
    input: &Tensor,
    filter: &Tensor,
    bias: &Tensor,
    cs: &ConvSpec,
) -> Result<Tensor> {
    if bias.spec.dims != [cs.c_out] {
        return Err(Error::ShapeMismatch(format!(
            "bias dims {:?} do not match [{}]",
            bias.spec.dims, cs.c_out
        )));
    }
    let b = &bias.data;
    conv_core(input, filter, cs, |z, acc| (acc + b[z]).max(0.0))
}

pub fn relu(input: &Tensor) -> Tensor {
    Tensor {
        spec: input.spec.clone(),
        data: input.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.spec.dims != b.spec.dims || a.spec.layout != b.spec.layout {
        return Err(Error::ShapeMismatch(format!(
            "add operands disagree: {:?} vs {:?}",
            a.spec.dims, b.spec.dims
        )));
    }
    Ok(Tensor {
        spec: a.spec.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

/// Add a per-channel bias. Rank-4 inputs use the channel axis of their
/// layout; rank-2 inputs treat columns as channels.
pub fn bias_add(input: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if bias.spec.rank() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "bias must be rank-1, got {:?}",
            bias.spec.dims
        )));
    }
    let b = &bias.data;
    let mut out = input.data.clone();
    match input.spec.rank() {
        2 => {
            let cols = input.spec.dims[1];
            if b.len() != cols {
                return Err(Error::ShapeMismatch(format!(
                    "bias length {} does not match {} columns",
                    b.len(),
                    cols
                )));
            }
            for (i, v) in out.iter_mut().enumerate() {
                *v += b[i % cols];
            }
        }
        4 => {
            let [n, c, h, w] = input.spec.nchw_dims()?;
            if b.len() != c {
                return Err(Error::ShapeMismatch(format!(
                    "bias length {} does not match {} channels",
                    b.len(),
                    c
                )));
            }
            match input.spec.layout.unwrap_or(Layout::Nchw) {
                Layout::Nchw => {
                    let plane = h * w;
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            for v in &mut out[base..base + plane] {
                                *v += b[ci];
                            }
                        }
                    }
                }
                Layout::Nhwc => {
                    for (i, v) in out.iter_mut().enumerate() {
                        *v += b[i % c];
                    }
                }
            }
        }
        r => {
            return Err(Error::ShapeMismatch(format!(
                "bias_add input must be rank-2 or rank-4, got rank-{r}"
            )));
        }
    }
    Ok(Tensor { spec: input.spec.clone(), data: out })
}

pub fn max_pool(input: &Tensor, ps: &PoolSpec) -> Result<Tensor> {
    if input.spec.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "pool input must be rank-4, got {:?}",
            input.spec.dims
        )));
    }
    let layout = input.spec.layout.unwrap_or(Layout::Nchw);
    let canonical;
    let x = if layout == Layout::Nchw {
        input
    } else {
        canonical = input.to_layout(Layout::Nchw)?;
        &canonical
    };
    let [n, c, h, w] = x.spec.nchw_dims()?;
    let out_h = crate::graph::window_out_dim(h, ps.k_h, ps.stride, ps.padding)?;
    let out_w = crate::graph::window_out_dim(w, ps.k_w, ps.stride, ps.padding)?;
    let ph = pad_before(h, ps.k_h, ps.stride, ps.padding) as isize;
    let pw = pad_before(w, ps.k_w, ps.stride, ps.padding) as isize;
    let mut out = vec![0.0f32; n * c * out_h * out_w];
    let mut idx = 0;
    for ni in 0..n {
        for ci in 0..c {
            let plane = (ni * c + ci) * h * w;
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let ih0 = (oh * ps.stride) as isize - ph;
                    let iw0 = (ow * ps.stride) as isize - pw;
                    let mut best = f32::NEG_INFINITY;
                    for kh in 0..ps.k_h {
                        let ih = ih0 + kh as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kw in 0..ps.k_w {
                            let iw = iw0 + kw as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            best = best.max(x.data[plane + ih as usize * w + iw as usize]);
                        }
                    }
                    out[idx] = best;
                    idx += 1;
                }
            }
        }
    }
    let result = Tensor {
        spec: TensorSpec::from_nchw(n, c, out_h, out_w, Layout::Nchw),
        data: out,
    };
    if layout == Layout::Nchw {
        Ok(result)
    } else {
        result.to_layout(layout)
    }
}

/// (M, K) x (K, N) -> (M, N). A rank-4 left operand is read as
/// (dims[0], rest) in its stored physical order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = match a.spec.rank() {
        2 => (a.spec.dims[0], a.spec.dims[1]),
        4 => (a.spec.dims[0], a.spec.dims[1] * a.spec.dims[2] * a.spec.dims[3]),
        r => {
            return Err(Error::ShapeMismatch(format!(
                "matmul lhs must be rank-2 or rank-4, got rank-{r}"
            )));
        }
    };
    if b.spec.rank() != 2 || b.spec.dims[0] != k {
        return Err(Error::ShapeMismatch(format!(
            "matmul rhs dims {:?} do not match inner dim {k}",
            b.spec.dims
        )));
    }
    let n = b.spec.dims[1];
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let mut acc = 0.0f32;
            for (kk, &av) in arow.iter().enumerate() {
                acc += av * b.data[kk * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::from_dims(vec![m, n], out)
}
