//! N-dimensional (1 to 3 spatial axes) zero-padded convolution.
//!
//! Lowered to a matrix product: the input is unfolded into a
//! `[in_channels * kernel_volume, output_positions]` column buffer and
//! multiplied by the `[out_channels, in_channels * kernel_volume]` weight
//! matrix. Lower-rank inputs are handled by prepending unit axes.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub dilation: Vec<usize>,
    pub padding: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    /// Unit stride and dilation, no padding.
    pub fn new(in_channels: usize, out_channels: usize, kernel: &[usize]) -> Self {
        let r = kernel.len();
        Self {
            kernel: kernel.to_vec(),
            stride: vec![1; r],
            dilation: vec![1; r],
            padding: vec![0; r],
            in_channels,
            out_channels,
        }
    }

    pub fn with_stride(mut self, stride: &[usize]) -> Self {
        self.stride = stride.to_vec();
        self
    }

    pub fn with_dilation(mut self, dilation: &[usize]) -> Self {
        self.dilation = dilation.to_vec();
        self
    }

    pub fn with_padding(mut self, padding: &[usize]) -> Self {
        self.padding = padding.to_vec();
        self
    }

    /// Padding that preserves spatial extent at unit stride (odd kernels only).
    pub fn same_padding(mut self) -> Self {
        self.padding = self
            .kernel
            .iter()
            .zip(&self.dilation)
            .map(|(&k, &d)| d * (k.saturating_sub(1)) / 2)
            .collect();
        self
    }

    pub fn rank(&self) -> usize {
        self.kernel.len()
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let mut s = vec![self.out_channels, self.in_channels];
        s.extend_from_slice(&self.kernel);
        s
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rank();
        ensure!(
            (1..=3).contains(&r),
            "convolution supports 1 to 3 spatial axes, got {r}"
        );
        ensure!(
            self.stride.len() == r && self.dilation.len() == r && self.padding.len() == r,
            "kernel, stride, dilation and padding must all have {r} entries"
        );
        ensure!(
            self.in_channels > 0 && self.out_channels > 0,
            "channel counts must be positive"
        );
        for axis in 0..r {
            ensure!(self.kernel[axis] > 0, "kernel extent on axis {} is zero", axis + 1);
            ensure!(self.stride[axis] > 0, "stride on axis {} is zero", axis + 1);
            ensure!(self.dilation[axis] > 0, "dilation on axis {} is zero", axis + 1);
        }
        Ok(())
    }

    /// `floor((in + 2 pad - dilation (k - 1) - 1) / stride) + 1` per axis.
    pub fn output_extents(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        ensure!(
            input.len() == self.rank(),
            "input has {} spatial axes, kernel has {}",
            input.len(),
            self.rank()
        );
        let mut out = Vec::with_capacity(input.len());
        for axis in 0..input.len() {
            let span = self.dilation[axis] * (self.kernel[axis] - 1) + 1;
            let padded = input[axis] + 2 * self.padding[axis];
            ensure!(
                padded >= span,
                "axis {}: padded extent {} is smaller than the dilated kernel span {}",
                axis + 1,
                padded,
                span
            );
            out.push((padded - span) / self.stride[axis] + 1);
        }
        Ok(out)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel.iter().all(|&k| k == 1)
            && self.stride.iter().all(|&s| s == 1)
            && self.padding.iter().all(|&p| p == 0)
    }
}

/// Geometry lifted to exactly three spatial axes.
#[derive(Debug, Clone, Copy)]
struct Geom {
    cin: usize,
    cout: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    dilation: [usize; 3],
    padding: [usize; 3],
    output: [usize; 3],
}

impl Geom {
    fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }
    fn in_len(&self) -> usize {
        self.input.iter().product()
    }
    fn out_len(&self) -> usize {
        self.output.iter().product()
    }
}

fn lift(v: &[usize], fill: usize) -> [usize; 3] {
    let mut out = [fill; 3];
    let off = 3 - v.len();
    out[off..].copy_from_slice(v);
    out
}

fn geometry(input: &Tensor, weight: &Tensor, spec: &ConvSpec) -> Result<Geom> {
    spec.validate()?;
    ensure!(
        input.shape().len() == spec.rank() + 1,
        "input rank {} does not match a {}-axis convolution (expected [C, spatial...])",
        input.shape().len(),
        spec.rank()
    );
    if input.channels() != spec.in_channels {
        return Err(Error::contract(format!(
            "axis 0 (channels): input has {} channels, spec expects {}",
            input.channels(),
            spec.in_channels
        )));
    }
    let ws = spec.weight_shape();
    ensure!(
        weight.shape().len() == ws.len(),
        "weight rank {} does not match expected shape {:?}",
        weight.shape().len(),
        ws
    );
    for (axis, (&got, &want)) in weight.shape().iter().zip(&ws).enumerate() {
        ensure!(
            got == want,
            "weight axis {axis}: extent {got}, expected {want} (expected shape {ws:?})"
        );
    }
    let output = spec.output_extents(input.spatial())?;
    Ok(Geom {
        cin: spec.in_channels,
        cout: spec.out_channels,
        input: lift(input.spatial(), 1),
        kernel: lift(&spec.kernel, 1),
        stride: lift(&spec.stride, 1),
        dilation: lift(&spec.dilation, 1),
        padding: lift(&spec.padding, 0),
        output: lift(&output, 1),
    })
}

/// Half-open range of output positions whose input index is inside `[0, n)`.
#[inline]
fn valid_range(out: usize, n: usize, stride: usize, offset: usize, pad: usize) -> (usize, usize) {
    // input = o * stride + offset - pad
    let lo = if offset >= pad {
        0
    } else {
        (pad - offset).div_ceil(stride)
    };
    let hi = if n + pad > offset {
        ((n - 1 + pad - offset) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(out), hi.max(lo.min(out)))
}

fn im2col(x: &[f64], g: &Geom, cols: &mut [f64]) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let s_len = g.out_len();
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for kd in 0..g.kernel[0] {
            let (d_lo, d_hi) = valid_range(od, d, g.stride[0], kd * g.dilation[0], g.padding[0]);
            for kh in 0..g.kernel[1] {
                let (h_lo, h_hi) =
                    valid_range(oh, h, g.stride[1], kh * g.dilation[1], g.padding[1]);
                for kw in 0..g.kernel[2] {
                    let woff = kw * g.dilation[2];
                    let (w_lo, w_hi) = valid_range(ow, w, g.stride[2], woff, g.padding[2]);
                    let dst = &mut cols[row * s_len..(row + 1) * s_len];
                    dst.fill(0.0);
                    for o_d in d_lo..d_hi {
                        let id = o_d * g.stride[0] + kd * g.dilation[0] - g.padding[0];
                        for o_h in h_lo..h_hi {
                            let ih = o_h * g.stride[1] + kh * g.dilation[1] - g.padding[1];
                            let src = &xc[(id * h + ih) * w..(id * h + ih + 1) * w];
                            let base = (o_d * oh + o_h) * ow;
                            if w_lo == w_hi {
                                continue;
                            }
                            if g.stride[2] == 1 {
                                let start = w_lo + woff - g.padding[2];
                                dst[base + w_lo..base + w_hi]
                                    .copy_from_slice(&src[start..start + (w_hi - w_lo)]);
                            } else {
                                for o_w in w_lo..w_hi {
                                    dst[base + o_w] = src[o_w * g.stride[2] + woff - g.padding[2]];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &Geom, dx: &mut [f64]) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let s_len = g.out_len();
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &mut dx[ci * d * h * w..(ci + 1) * d * h * w];
        for kd in 0..g.kernel[0] {
            let (d_lo, d_hi) = valid_range(od, d, g.stride[0], kd * g.dilation[0], g.padding[0]);
            for kh in 0..g.kernel[1] {
                let (h_lo, h_hi) =
                    valid_range(oh, h, g.stride[1], kh * g.dilation[1], g.padding[1]);
                for kw in 0..g.kernel[2] {
                    let woff = kw * g.dilation[2];
                    let (w_lo, w_hi) = valid_range(ow, w, g.stride[2], woff, g.padding[2]);
                    let src = &cols[row * s_len..(row + 1) * s_len];
                    for o_d in d_lo..d_hi {
                        let id = o_d * g.stride[0] + kd * g.dilation[0] - g.padding[0];
                        for o_h in h_lo..h_hi {
                            let ih = o_h * g.stride[1] + kh * g.dilation[1] - g.padding[1];
                            let dst = &mut xc[(id * h + ih) * w..(id * h + ih + 1) * w];
                            let base = (o_d * oh + o_h) * ow;
                            for o_w in w_lo..w_hi {
                                dst[o_w * g.stride[2] + woff - g.padding[2]] += src[base + o_w];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `c = a * b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Forward convolution. `bias`, when present, must have shape `[out_channels]`.
pub fn conv_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<Tensor> {
    let g = geometry(input, weight, spec)?;
    if let Some(b) = bias {
        ensure!(
            b.shape() == [g.cout],
            "bias shape {:?}, expected [{}]",
            b.shape(),
            g.cout
        );
    }
    let k = g.cin * g.kvol();
    let s = g.out_len();
    let mut out = vec![0.0; g.cout * s];
    if spec.is_pointwise() {
        gemm(g.cout, k, s, weight.data(), (k, 1), input.data(), (s, 1), 0.0, &mut out);
    } else {
        let mut cols = vec![0.0; k * s];
        im2col(input.data(), &g, &mut cols);
        gemm(g.cout, k, s, weight.data(), (k, 1), &cols, (s, 1), 0.0, &mut out);
    }
    if let Some(b) = bias {
        for (co, row) in out.chunks_mut(s).enumerate() {
            let bv = b.data()[co];
            row.iter_mut().for_each(|v| *v += bv);
        }
    }
    let mut shape = vec![g.cout];
    shape.extend(spec.output_extents(input.spatial())?);
    Tensor::new(shape, out)
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv_backward(
    input: &Tensor,
    weight: &Tensor,
    spec: &ConvSpec,
    grad_out: &[f64],
    need: (bool, bool, bool),
) -> Result<ConvGrads> {
    let g = geometry(input, weight, spec)?;
    let k = g.cin * g.kvol();
    let s = g.out_len();
    ensure!(grad_out.len() == g.cout * s, "output gradient has wrong length");
    let pointwise = spec.is_pointwise();

    let cols_storage;
    let cols: &[f64] = if pointwise {
        input.data()
    } else if need.1 {
        let mut c = vec![0.0; k * s];
        im2col(input.data(), &g, &mut c);
        cols_storage = c;
        &cols_storage
    } else {
        &[]
    };

    let weight_grad = need.1.then(|| {
        let mut dw = vec![0.0; g.cout * k];
        // dW[co, r] = sum_s gout[co, s] * cols[r, s]
        gemm(g.cout, s, k, grad_out, (s, 1), cols, (1, s), 0.0, &mut dw);
        dw
    });

    let input_grad = need.0.then(|| {
        let mut dcols = vec![0.0; k * s];
        // dcols[r, s] = sum_co W[co, r] * gout[co, s]
        gemm(k, g.cout, s, weight.data(), (1, k), grad_out, (s, 1), 0.0, &mut dcols);
        if pointwise {
            dcols
        } else {
            let mut dx = vec![0.0; g.cin * g.in_len()];
            col2im(&dcols, &g, &mut dx);
            dx
        }
    });

    let bias_grad = need
        .2
        .then(|| grad_out.chunks(s).map(|row| row.iter().sum()).collect());

    Ok(ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    })
}
