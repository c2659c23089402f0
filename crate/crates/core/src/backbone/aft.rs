//! Adaptive Fourier filter: `out = z + irfft2(w ⊙ rfft2(z))`.
//!
//! The transforms are dense DFT matrices applied with matmuls, which keeps
//! the layer differentiable through candle's autograd. Feature maps here
//! are latent-sized (tens of pixels a side) so the O(n²) transform is cheap.

use std::f64::consts::PI;

use candle_core::{DType, Device, Result, Tensor};
use ndarray::Array3;

use super::BackboneError;
use crate::nn::{Init, ParamPath};

/// Half-spectrum weights: real and imaginary parts of shape `C×H×(W/2+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AftWeights {
    pub re: Array3<f64>,
    pub im: Array3<f64>,
}

impl AftWeights {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        let d = (c, h, w / 2 + 1);
        Self {
            re: Array3::zeros(d),
            im: Array3::zeros(d),
        }
    }

    pub fn filled(c: usize, h: usize, w: usize, re: f64, im: f64) -> Self {
        let d = (c, h, w / 2 + 1);
        Self {
            re: Array3::from_elem(d, re),
            im: Array3::from_elem(d, im),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.re
            .iter()
            .zip(self.im.iter())
            .map(|(r, i)| r.hypot(*i))
            .fold(0.0, f64::max)
    }
}

struct DftMats {
    // W axis: real input -> half spectrum, and back
    cw: Tensor,
    sw: Tensor,
    icw: Tensor,
    isw: Tensor,
    // H axis: full complex transform
    ch: Tensor,
    sh: Tensor,
}

fn mat(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64, dtype: DType, dev: &Device) -> Result<Tensor> {
    let data: Vec<f64> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .map(|(r, c)| f(r, c))
        .collect();
    Tensor::from_vec(data, (rows, cols), dev)?.to_dtype(dtype)
}

impl DftMats {
    fn new(h: usize, w: usize, dtype: DType, dev: &Device) -> Result<Self> {
        let k = w / 2 + 1;
        let ang_w = |a: usize, b: usize| 2.0 * PI * ((a * b) % w) as f64 / w as f64;
        let ang_h = |a: usize, b: usize| 2.0 * PI * ((a * b) % h) as f64 / h as f64;
        // irfft weights: DC and (even) Nyquist bins count once, the rest twice
        let ck = |kk: usize| {
            if kk == 0 || (w % 2 == 0 && kk == w / 2) {
                1.0
            } else {
                2.0
            }
        };
        let wf = w as f64;
        Ok(Self {
            cw: mat(w, k, |x, kk| ang_w(x, kk).cos(), dtype, dev)?,
            sw: mat(w, k, |x, kk| ang_w(x, kk).sin(), dtype, dev)?,
            icw: mat(k, w, |kk, x| ck(kk) * ang_w(kk, x).cos() / wf, dtype, dev)?,
            isw: mat(k, w, |kk, x| ck(kk) * ang_w(kk, x).sin() / wf, dtype, dev)?,
            ch: mat(h, h, |a, b| ang_h(a, b).cos(), dtype, dev)?,
            sh: mat(h, h, |a, b| ang_h(a, b).sin(), dtype, dev)?,
        })
    }
}

/// The non-residual term `irfft2(w ⊙ rfft2(x))` for `x: [B, C, H, W]` and
/// weights `[C, H, W/2+1]`.
pub fn spectral_filter(x: &Tensor, w_re: &Tensor, w_im: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    let k = w / 2 + 1;
    if w_re.dims() != [c, h, k] || w_im.dims() != [c, h, k] {
        candle_core::bail!(
            "spectral weights {:?}/{:?} do not fit features [{c}, {h}, {w}]",
            w_re.dims(),
            w_im.dims()
        );
    }
    let m = DftMats::new(h, w, x.dtype(), x.device())?;
    // rfft along W: X = x·e^{-iθ}
    let xr = x.broadcast_matmul(&m.cw)?;
    let xi = x.broadcast_matmul(&m.sw)?.neg()?;
    // full DFT along H
    let yr = (m.ch.broadcast_matmul(&xr)? + m.sh.broadcast_matmul(&xi)?)?;
    let yi = (m.ch.broadcast_matmul(&xi)? - m.sh.broadcast_matmul(&xr)?)?;
    let wr = w_re.unsqueeze(0)?;
    let wi = w_im.unsqueeze(0)?;
    let zr = (yr.broadcast_mul(&wr)? - yi.broadcast_mul(&wi)?)?;
    let zi = (yi.broadcast_mul(&wr)? + yr.broadcast_mul(&wi)?)?;
    // inverse along H (unnormalized here, 1/H applied below)
    let ur = (m.ch.broadcast_matmul(&zr)? - m.sh.broadcast_matmul(&zi)?)?;
    let ui = (m.ch.broadcast_matmul(&zi)? + m.sh.broadcast_matmul(&zr)?)?;
    // irfft along W
    let out = (ur.broadcast_matmul(&m.icw)? - ui.broadcast_matmul(&m.isw)?)?;
    out / h as f64
}

/// Learnable AFT layer with a residual connection.
#[derive(Debug, Clone)]
pub struct Aft {
    w_re: Tensor,
    w_im: Tensor,
}

impl Aft {
    pub fn new(p: &ParamPath, c: usize, h: usize, w: usize) -> Result<Self> {
        let init = Init::Normal { std: 0.02 };
        Ok(Self {
            w_re: p.get((c, h, w / 2 + 1), "w_re", init)?,
            w_im: p.get((c, h, w / 2 + 1), "w_im", init)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x + spectral_filter(x, &self.w_re, &self.w_im)?
    }
}

/// `z + irfft2(w ⊙ rfft2(z))` on a single `C×H×W` array.
pub fn aft_apply(z: &Array3<f64>, w: &AftWeights) -> std::result::Result<Array3<f64>, BackboneError> {
    let (c, h, wd) = z.dim();
    let want = (c, h, wd / 2 + 1);
    if w.re.dim() != want || w.im.dim() != want {
        return Err(BackboneError::ShapeMismatch {
            expected: vec![want.0, want.1, want.2],
            actual: w.re.shape().to_vec(),
        });
    }
    let dev = Device::Cpu;
    let to_t = |a: &Array3<f64>| {
        let (a0, a1, a2) = a.dim();
        Tensor::from_iter(a.iter().copied(), &dev).and_then(|t| t.reshape((a0, a1, a2)))
    };
    let x = to_t(z)?.unsqueeze(0)?;
    let out = (&x + spectral_filter(&x, &to_t(&w.re)?, &to_t(&w.im)?)?)?.squeeze(0)?;
    let data = out.flatten_all()?.to_vec1::<f64>()?;
    Ok(Array3::from_shape_vec((c, h, wd), data).expect("shape preserved"))
}
