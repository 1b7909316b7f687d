//! Tensor helpers shared by the network modules: a lowered convolution with
//! a fast backward pass, resampling by interpolation matrices, and
//! conversions from `ndarray`.

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, WithDType};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn cols(&self) -> usize {
        self.c * self.k * self.k
    }

    fn rows_per_image(&self) -> usize {
        self.oh * self.ow
    }

    /// Calls `f(dst_row, col, src_offset)` for every in-bounds tap of image `b`.
    fn for_each_tap(&self, b: usize, mut f: impl FnMut(usize, usize, usize)) {
        let g = self;
        for ci in 0..g.c {
            let plane = (b * g.c + ci) * g.h * g.w;
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let col = (ci * g.k + ki) * g.k + kj;
                    for oy in 0..g.oh {
                        let y = (oy * g.stride + ki) as isize - g.pad as isize;
                        if y < 0 || y >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.ow {
                            let x = (ox * g.stride + kj) as isize - g.pad as isize;
                            if x < 0 || x >= g.w as isize {
                                continue;
                            }
                            let row = b * g.rows_per_image() + oy * g.ow + ox;
                            f(row, col, plane + y as usize * g.w + x as usize);
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: WithDType>(src: &[T], batch: usize, g: ConvGeometry) -> Vec<T> {
    let cols = g.cols();
    let mut out = vec![T::zero(); batch * g.rows_per_image() * cols];
    for b in 0..batch {
        g.for_each_tap(b, |row, col, s| out[row * cols + col] = src[s]);
    }
    out
}

fn col2im<T: WithDType>(src: &[T], batch: usize, g: ConvGeometry) -> Vec<T> {
    let cols = g.cols();
    let mut out = vec![T::zero(); batch * g.c * g.h * g.w];
    for b in 0..batch {
        g.for_each_tap(b, |row, col, d| out[d] += src[row * cols + col]);
    }
    out
}

fn contiguous_slice<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("lowered convolution expects a contiguous input"),
    }
}

/// `(B, C, H, W)` to `(B*OH*OW, C*K*K)` patch rows.
struct Im2Col(ConvGeometry);
/// Adjoint of [`Im2Col`].
struct Col2Im(ConvGeometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let b = layout.dims()[0];
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous_slice(v, layout)?, b, g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous_slice(v, layout)?, b, g)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, Shape::from((b * g.rows_per_image(), g.cols()))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let b = layout.dims()[0] / g.rows_per_image();
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous_slice(v, layout)?, b, g)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous_slice(v, layout)?, b, g)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, Shape::from((b, g.c, g.h, g.w))))
    }
}

/// 2-D convolution of `(B, C, H, W)` with `(CO, C, K, K)` weights, lowered
/// to one matrix product so that both passes run through gemm.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (co, ci, k, k2) = weight.dims4()?;
    if ci != c || k != k2 {
        return Err(Error::Config(format!(
            "conv weight {:?} does not fit input with {c} channels",
            weight.dims()
        )));
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::Config(format!(
            "input {h}x{w} too small for kernel {k} with padding {pad}"
        )));
    }
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let y = if k == 1 && stride == 1 && pad == 0 {
        // pointwise: (CO, C) x (B, C, HW)
        let wm = weight.reshape((co, c))?;
        wm.broadcast_left(b)?.contiguous()?.matmul(&x.reshape((b, c, h * w))?.contiguous()?)?.reshape((b, co, h, w))?
    } else {
        let g = ConvGeometry { c, h, w, k, stride, pad, oh, ow };
        let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
        let wm = weight.reshape((co, c * k * k))?;
        cols.matmul(&wm.t()?)?
            .reshape((b, oh, ow, co))?
            .permute((0, 3, 1, 2))?
            .contiguous()?
    };
    Ok(match bias {
        Some(bias) => y.broadcast_add(&bias.reshape((1, co, 1, 1))?)?,
        None => y,
    })
}

/// `(out, in)` matrix of bilinear weights with half-pixel centers.
pub fn bilinear_matrix(input: usize, output: usize) -> Array2<f64> {
    let mut m = Array2::zeros((output, input));
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[[o, i0]] += 1.0 - frac;
        m[[o, i1]] += frac;
    }
    m
}

/// `(out, in)` matrix averaging each output cell's footprint, weighted by
/// overlap. Rows sum to one.
pub fn area_matrix(input: usize, output: usize) -> Result<Array2<f64>> {
    if output > input || output == 0 {
        return Err(Error::Config(format!(
            "area resampling only shrinks: {input} -> {output}"
        )));
    }
    let mut m = Array2::zeros((output, input));
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
        for i in (lo.floor() as usize)..(hi.ceil() as usize).min(input) {
            let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
            m[[o, i]] = overlap / scale;
        }
    }
    Ok(m)
}

fn matrix_tensor(m: &Array2<f64>, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_slice(m.as_slice().expect("standard layout"), m.dim(), device)?.to_dtype(dtype)?)
}

/// Applies separable row/column matrices to the last two axes of a 4-D tensor.
fn separable(x: &Tensor, rows: &Array2<f64>, cols: &Array2<f64>) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (oh, ow) = (rows.nrows(), cols.nrows());
    let r = matrix_tensor(rows, x.dtype(), x.device())?;
    let ct = matrix_tensor(cols, x.dtype(), x.device())?.t()?.contiguous()?;
    let flat = x.reshape((b * c * h, w))?.contiguous()?;
    // columns: (B*C*H, W) x (W, OW)
    let y = flat.matmul(&ct)?.reshape((b * c, h, ow))?;
    // rows: (OH, H) x (B*C, H, OW)
    let y = r.broadcast_left(b * c)?.contiguous()?.matmul(&y.contiguous()?)?;
    Ok(y.reshape((b, c, oh, ow))?)
}

/// Bilinear resize of a `(B, C, H, W)` tensor; differentiable.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    separable(x, &bilinear_matrix(h, out_h), &bilinear_matrix(w, out_w))
}

/// Area-average downsampling of a `(B, C, H, W)` tensor; differentiable.
pub fn downsample_area(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    separable(x, &area_matrix(h, out_h)?, &area_matrix(w, out_w)?)
}

/// Nearest-neighbor downsampling of a label map, sampling cell centers.
pub fn downsample_nearest<T: Copy>(labels: &Array2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = labels.dim();
    Array2::from_shape_fn((out_h, out_w), |(r, c)| {
        let sr = ((r as f64 + 0.5) * h as f64 / out_h as f64).floor() as usize;
        let sc = ((c as f64 + 0.5) * w as f64 / out_w as f64).floor() as usize;
        labels[[sr.min(h - 1), sc.min(w - 1)]]
    })
}

pub fn array3_to_tensor(a: &Array3<f32>, dtype: DType, device: &Device) -> Result<Tensor> {
    let std = a.as_standard_layout();
    Ok(Tensor::from_slice(std.as_slice().expect("standard layout"), a.dim(), device)?.to_dtype(dtype)?)
}

pub fn array2_to_tensor(a: &Array2<f32>, dtype: DType, device: &Device) -> Result<Tensor> {
    let std = a.as_standard_layout();
    Ok(Tensor::from_slice(std.as_slice().expect("standard layout"), a.dim(), device)?.to_dtype(dtype)?)
}

/// A `(H, W)` tensor as an `f32` array.
pub fn tensor_to_array2(t: &Tensor) -> Result<Array2<f32>> {
    let (h, w) = t.dims2()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(Array2::from_shape_vec((h, w), v).expect("shape matches"))
}

/// A `(C, H, W)` tensor as an `f32` array.
pub fn tensor_to_array3(t: &Tensor) -> Result<Array3<f32>> {
    let (c, h, w) = t.dims3()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(Array3::from_shape_vec((c, h, w), v).expect("shape matches"))
}

/// Scalar value of a 0-d or single-element tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}
