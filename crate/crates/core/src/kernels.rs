//! Direct 2-D convolution kernels.
//!
//! The forward pass and both gradients are written as plane-at-a-time loops so
//! that every output plane is owned by exactly one task. Each output element is
//! accumulated in a fixed order, which keeps results bitwise identical between
//! the sequential and the rayon-backed executors.
//!
//! The kernels are exposed to candle as custom ops with a backward pass, see
//! [`conv2d`].

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How plane-level work is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Exec::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Exec::Sequential
        }
    }
}

/// Applies `f(index, chunk)` to consecutive `chunk`-sized pieces of `out`.
pub fn for_each_chunk<F>(exec: Exec, out: &mut [f32], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Send + Sync,
{
    match exec {
        Exec::Sequential => out.chunks_mut(chunk).enumerate().for_each(|(j, c)| f(j, c)),
        #[cfg(feature = "parallel")]
        Exec::Parallel => out.par_chunks_mut(chunk).enumerate().for_each(|(j, c)| f(j, c)),
    }
}

/// Geometry of a square-kernel, groups=1, dilation=1 convolution over NCHW data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub height: usize,
    pub width: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.c_in * self.height * self.width
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.c_out * self.out_height() * self.out_width()
    }

    /// Input row for output row `oy` and kernel row `ky`, if inside the image.
    #[inline]
    fn src_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
        (iy >= 0 && (iy as usize) < self.height).then_some(iy as usize)
    }

    /// Half-open range of output columns whose source column for `kx` is in bounds.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let (s, p, w) = (self.stride, self.padding, self.width);
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        let hi = if w + p > kx {
            ((w - 1 + p - kx) / s + 1).min(self.out_width())
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

pub fn conv2d_forward(g: &ConvGeom, input: &[f32], weight: &[f32], out: &mut [f32], exec: Exec) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane_in = g.height * g.width;
    let kk = g.kernel * g.kernel;
    for_each_chunk(exec, out, oh * ow, |j, plane| {
        let (n, o) = (j / g.c_out, j % g.c_out);
        plane.fill(0.0);
        let w_o = &weight[o * g.c_in * kk..(o + 1) * g.c_in * kk];
        for i in 0..g.c_in {
            let src = &input[(n * g.c_in + i) * plane_in..(n * g.c_in + i + 1) * plane_in];
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let wv = w_o[(i * g.kernel + ky) * g.kernel + kx];
                    let (lo, hi) = g.col_range(kx);
                    for oy in 0..oh {
                        let Some(iy) = g.src_row(oy, ky) else { continue };
                        let row = &src[iy * g.width..(iy + 1) * g.width];
                        let dst = &mut plane[oy * ow..(oy + 1) * ow];
                        if g.stride == 1 {
                            let start = lo + kx - g.padding;
                            for (d, s) in dst[lo..hi].iter_mut().zip(&row[start..start + hi - lo]) {
                                *d += wv * s;
                            }
                        } else {
                            for ox in lo..hi {
                                dst[ox] += wv * row[ox * g.stride + kx - g.padding];
                            }
                        }
                    }
                }
            }
        }
    });
}

pub fn conv2d_backward_input(
    g: &ConvGeom,
    grad_out: &[f32],
    weight: &[f32],
    grad_in: &mut [f32],
    exec: Exec,
) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane_in = g.height * g.width;
    let kk = g.kernel * g.kernel;
    for_each_chunk(exec, grad_in, plane_in, |j, plane| {
        let (n, i) = (j / g.c_in, j % g.c_in);
        plane.fill(0.0);
        for o in 0..g.c_out {
            let go = &grad_out[(n * g.c_out + o) * oh * ow..(n * g.c_out + o + 1) * oh * ow];
            let w_oi = &weight[(o * g.c_in + i) * kk..(o * g.c_in + i + 1) * kk];
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let wv = w_oi[ky * g.kernel + kx];
                    let (lo, hi) = g.col_range(kx);
                    for oy in 0..oh {
                        let Some(iy) = g.src_row(oy, ky) else { continue };
                        let src = &go[oy * ow..(oy + 1) * ow];
                        let dst = &mut plane[iy * g.width..(iy + 1) * g.width];
                        if g.stride == 1 {
                            let start = lo + kx - g.padding;
                            for (d, s) in dst[start..start + hi - lo].iter_mut().zip(&src[lo..hi]) {
                                *d += wv * s;
                            }
                        } else {
                            for ox in lo..hi {
                                dst[ox * g.stride + kx - g.padding] += wv * src[ox];
                            }
                        }
                    }
                }
            }
        }
    });
}

pub fn conv2d_backward_weight(
    g: &ConvGeom,
    input: &[f32],
    grad_out: &[f32],
    grad_w: &mut [f32],
    exec: Exec,
) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane_in = g.height * g.width;
    let kk = g.kernel * g.kernel;
    for_each_chunk(exec, grad_w, g.c_in * kk, |o, gw| {
        for i in 0..g.c_in {
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let (lo, hi) = g.col_range(kx);
                    let mut acc = 0f32;
                    for n in 0..g.batch {
                        let go = &grad_out[(n * g.c_out + o) * oh * ow..];
                        let src = &input[(n * g.c_in + i) * plane_in..];
                        for oy in 0..oh {
                            let Some(iy) = g.src_row(oy, ky) else { continue };
                            let grow = &go[oy * ow..(oy + 1) * ow];
                            let row = &src[iy * g.width..(iy + 1) * g.width];
                            if g.stride == 1 {
                                let start = lo + kx - g.padding;
                                for (a, b) in grow[lo..hi].iter().zip(&row[start..start + hi - lo]) {
                                    acc += a * b;
                                }
                            } else {
                                for ox in lo..hi {
                                    acc += grow[ox] * row[ox * g.stride + kx - g.padding];
                                }
                            }
                        }
                    }
                    gw[(i * g.kernel + ky) * g.kernel + kx] = acc;
                }
            }
        }
    });
}

fn f32_slice<'a>(s: &'a CpuStorage, l: &Layout, what: &str) -> candle_core::Result<&'a [f32]> {
    let data = match s {
        CpuStorage::F32(v) => v.as_slice(),
        _ => candle_core::bail!("{what}: conv kernels support f32 only"),
    };
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("{what}: non-contiguous operand"),
    }
}

struct ConvForward(ConvGeom);
struct ConvBackwardInput(ConvGeom);
struct ConvBackwardWeight(ConvGeom);

impl CustomOp2 for ConvForward {
    fn name(&self) -> &'static str {
        "direct-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let input = f32_slice(s1, l1, "conv input")?;
        let weight = f32_slice(s2, l2, "conv weight")?;
        let mut out = vec![0f32; g.output_len()];
        conv2d_forward(g, input, weight, &mut out, Exec::default());
        let shape = Shape::from((g.batch, g.c_out, g.out_height(), g.out_width()));
        Ok((CpuStorage::F32(out), shape))
    }

    fn bwd(
        &self,
        input: &Tensor,
        weight: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad_res = grad_res.contiguous()?;
        let gi = grad_res.apply_op2_no_bwd(weight, &ConvBackwardInput(self.0))?;
        let gw = input.apply_op2_no_bwd(&grad_res, &ConvBackwardWeight(self.0))?;
        Ok((Some(gi), Some(gw)))
    }
}

impl CustomOp2 for ConvBackwardInput {
    fn name(&self) -> &'static str {
        "direct-conv2d-grad-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let grad_out = f32_slice(s1, l1, "conv grad")?;
        let weight = f32_slice(s2, l2, "conv weight")?;
        let mut out = vec![0f32; g.input_len()];
        conv2d_backward_input(g, grad_out, weight, &mut out, Exec::default());
        Ok((CpuStorage::F32(out), Shape::from((g.batch, g.c_in, g.height, g.width))))
    }
}

impl CustomOp2 for ConvBackwardWeight {
    fn name(&self) -> &'static str {
        "direct-conv2d-grad-weight"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let input = f32_slice(s1, l1, "conv input")?;
        let grad_out = f32_slice(s2, l2, "conv grad")?;
        let mut out = vec![0f32; g.weight_len()];
        conv2d_backward_weight(g, input, grad_out, &mut out, Exec::default());
        let shape = Shape::from((g.c_out, g.c_in, g.kernel, g.kernel));
        Ok((CpuStorage::F32(out), shape))
    }
}

/// Differentiable convolution of an NCHW `input` with an OIKK `weight` (no bias).
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
) -> candle_core::Result<Tensor> {
    let (batch, c_in, height, width) = input.dims4()?;
    let (c_out, wc_in, kh, kw) = weight.dims4()?;
    if wc_in != c_in || kh != kw {
        candle_core::bail!(
            "conv2d: input {:?} incompatible with weight {:?}",
            input.dims(),
            weight.dims()
        );
    }
    if height + 2 * padding < kh || width + 2 * padding < kw || stride == 0 {
        candle_core::bail!("conv2d: kernel {kh} larger than padded input {height}x{width}");
    }
    let geom = ConvGeom { batch, c_in, height, width, c_out, kernel: kh, stride, padding };
    input.contiguous()?.apply_op2(&weight.contiguous()?, ConvForward(geom))
}
