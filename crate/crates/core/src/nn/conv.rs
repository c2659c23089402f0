//! 2-D convolution as im2col + GEMM with an explicit backward pass.
//!
//! Candle's built-in CPU convolution backward goes through a slow transposed
//! convolution; this op keeps every pass on the GEMM path.

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Result, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

trait Gemm: Copy + Default + std::ops::AddAssign + candle_core::WithDType {
    /// `c = a * b + beta * c` on row-major dense buffers.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_gemm {
    ($t:ty, $f:path) => {
        impl Gemm for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                (rsa, csa): (isize, isize),
                b: &[Self],
                (rsb, csb): (isize, isize),
                beta: Self,
                c: &mut [Self],
            ) {
                debug_assert!(c.len() >= m * n);
                // SAFETY: the caller sizes every buffer for the given strides
                // and dimensions; `c` is row-major m x n.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    )
                }
            }
        }
    };
}

impl_gemm!(f32, matrixmultiply::sgemm);
impl_gemm!(f64, matrixmultiply::dgemm);

#[derive(Debug, Clone, Copy)]
struct Dims {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    oh: usize,
    ow: usize,
    geo: ConvGeometry,
}

impl Dims {
    fn new(x: &[usize], w: &[usize], geo: ConvGeometry) -> Result<Self> {
        let [batch, c_in, h, wd] = x else {
            candle_core::bail!("conv2d input must be 4-D, got {x:?}")
        };
        let [c_out, c_in_w, k, k2] = w else {
            candle_core::bail!("conv2d weight must be 4-D, got {w:?}")
        };
        if c_in != c_in_w || k != k2 {
            candle_core::bail!("conv2d shape mismatch: input {x:?}, weight {w:?}");
        }
        if h + 2 * geo.padding < *k || wd + 2 * geo.padding < *k {
            candle_core::bail!("conv2d kernel {k} larger than padded input {h}x{wd}");
        }
        let oh = (h + 2 * geo.padding - k) / geo.stride + 1;
        let ow = (wd + 2 * geo.padding - k) / geo.stride + 1;
        Ok(Self {
            batch: *batch,
            c_in: *c_in,
            h: *h,
            w: *wd,
            c_out: *c_out,
            k: *k,
            oh,
            ow,
            geo,
        })
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Output columns `ox` whose source `ox*stride + k - padding` lies in
    /// `0..len`, for a kernel offset `k` along an axis of length `len`.
    #[inline]
    fn valid(&self, k: usize, len: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.geo.stride, self.geo.padding);
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        let hi = if len + p > k { (len + p - k).div_ceil(s) } else { 0 };
        (lo.min(out), hi.min(out).max(lo.min(out)))
    }

    fn im2col<T: Gemm>(&self, img: &[T], cols: &mut [T]) {
        let n_cols = self.cols();
        let (s, p) = (self.geo.stride, self.geo.padding);
        for c in 0..self.c_in {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                let (oy_lo, oy_hi) = self.valid(ky, self.h, self.oh);
                for kx in 0..self.k {
                    let (ox_lo, ox_hi) = self.valid(kx, self.w, self.ow);
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * n_cols..(row + 1) * n_cols];
                    dst.fill(T::default());
                    for oy in oy_lo..oy_hi {
                        let y = oy * s + ky - p;
                        let src = &plane[y * self.w..(y + 1) * self.w];
                        let out = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if s == 1 {
                            let x0 = ox_lo + kx - p;
                            out[ox_lo..ox_hi].copy_from_slice(&src[x0..x0 + (ox_hi - ox_lo)]);
                        } else {
                            for ox in ox_lo..ox_hi {
                                out[ox] = src[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Gemm>(&self, cols: &[T], img: &mut [T]) {
        let n_cols = self.cols();
        let (s, p) = (self.geo.stride, self.geo.padding);
        for c in 0..self.c_in {
            let plane = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                let (oy_lo, oy_hi) = self.valid(ky, self.h, self.oh);
                for kx in 0..self.k {
                    let (ox_lo, ox_hi) = self.valid(kx, self.w, self.ow);
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * n_cols..(row + 1) * n_cols];
                    for oy in oy_lo..oy_hi {
                        let y = oy * s + ky - p;
                        let dst = &mut plane[y * self.w..(y + 1) * self.w];
                        let inp = &src[oy * self.ow..(oy + 1) * self.ow];
                        if s == 1 {
                            let x0 = ox_lo + kx - p;
                            for (d, v) in dst[x0..x0 + (ox_hi - ox_lo)].iter_mut().zip(&inp[ox_lo..ox_hi]) {
                                *d += *v;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                dst[ox * s + kx - p] += inp[ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward<T: Gemm>(&self, x: &[T], w: &[T]) -> Vec<T> {
        let (rows, n_cols) = (self.rows(), self.cols());
        let mut cols = vec![T::default(); rows * n_cols];
        let mut out = vec![T::default(); self.batch * self.c_out * n_cols];
        let in_len = self.c_in * self.h * self.w;
        for b in 0..self.batch {
            self.im2col(&x[b * in_len..(b + 1) * in_len], &mut cols);
            let dst = &mut out[b * self.c_out * n_cols..(b + 1) * self.c_out * n_cols];
            T::gemm(
                self.c_out,
                rows,
                n_cols,
                w,
                (rows as isize, 1),
                &cols,
                (n_cols as isize, 1),
                T::from_f64(0.0),
                dst,
            );
        }
        out
    }

    fn backward<T: Gemm>(&self, x: &[T], w: &[T], grad_out: &[T]) -> (Vec<T>, Vec<T>) {
        let (rows, n_cols) = (self.rows(), self.cols());
        let in_len = self.c_in * self.h * self.w;
        let mut cols = vec![T::default(); rows * n_cols];
        let mut grad_cols = vec![T::default(); rows * n_cols];
        let mut grad_x = vec![T::default(); self.batch * in_len];
        let mut grad_w = vec![T::default(); self.c_out * rows];
        for b in 0..self.batch {
            let gy = &grad_out[b * self.c_out * n_cols..(b + 1) * self.c_out * n_cols];
            self.im2col(&x[b * in_len..(b + 1) * in_len], &mut cols);
            // dW += dY * cols^T
            T::gemm(
                self.c_out,
                n_cols,
                rows,
                gy,
                (n_cols as isize, 1),
                &cols,
                (1, n_cols as isize),
                T::from_f64(1.0),
                &mut grad_w,
            );
            // dcols = W^T * dY
            T::gemm(
                rows,
                self.c_out,
                n_cols,
                w,
                (1, rows as isize),
                gy,
                (n_cols as isize, 1),
                T::from_f64(0.0),
                &mut grad_cols,
            );
            self.col2im(&grad_cols, &mut grad_x[b * in_len..(b + 1) * in_len]);
        }
        (grad_x, grad_w)
    }
}

fn contiguous_slice<'a, T: candle_core::WithDType>(s: &'a [T], l: &Layout) -> Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&s[start..end]),
        None => candle_core::bail!("conv2d expects contiguous operands"),
    }
}

struct Conv2dOp {
    geo: ConvGeometry,
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "gemm-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let d = Dims::new(l1.dims(), l2.dims(), self.geo)?;
        let shape = Shape::from((d.batch, d.c_out, d.oh, d.ow));
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => {
                CpuStorage::F32(d.forward(contiguous_slice(x, l1)?, contiguous_slice(w, l2)?))
            }
            (CpuStorage::F64(x), CpuStorage::F64(w)) => {
                CpuStorage::F64(d.forward(contiguous_slice(x, l1)?, contiguous_slice(w, l2)?))
            }
            _ => candle_core::bail!("conv2d supports matching f32 or f64 operands"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let d = Dims::new(x.dims(), w.dims(), self.geo)?;
        let dev = x.device();
        let (gx, gw) = match x.dtype() {
            DType::F32 => {
                let (gx, gw) = d.backward(
                    &x.flatten_all()?.to_vec1::<f32>()?,
                    &w.flatten_all()?.to_vec1::<f32>()?,
                    &grad_res.flatten_all()?.to_vec1::<f32>()?,
                );
                (Tensor::from_vec(gx, x.shape(), dev)?, Tensor::from_vec(gw, w.shape(), dev)?)
            }
            DType::F64 => {
                let (gx, gw) = d.backward(
                    &x.flatten_all()?.to_vec1::<f64>()?,
                    &w.flatten_all()?.to_vec1::<f64>()?,
                    &grad_res.flatten_all()?.to_vec1::<f64>()?,
                );
                (Tensor::from_vec(gx, x.shape(), dev)?, Tensor::from_vec(gw, w.shape(), dev)?)
            }
            dt => candle_core::bail!("conv2d backward does not support {dt:?}"),
        };
        Ok((Some(gx), Some(gw)))
    }
}

/// Cross-correlation of `x: [B, Cin, H, W]` with `weight: [Cout, Cin, k, k]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, geo: ConvGeometry) -> Result<Tensor> {
    x.contiguous()?
        .apply_op2(&weight.contiguous()?, Conv2dOp { geo })
}
