//! Group normalization with an optional fused SiLU, as a custom op with a
//! hand-written backward pass. Statistics accumulate in f64.

use candle_core::{CpuStorage, CustomOp3, DType, Layout, Result, Shape, Tensor, WithDType};

#[derive(Debug, Clone, Copy)]
pub(crate) struct GroupNormOp {
    pub groups: usize,
    pub eps: f64,
    pub silu: bool,
}

#[inline]
fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

struct Geo {
    b: usize,
    c: usize,
    hw: usize,
    g: usize,
}

impl Geo {
    fn new(dims: &[usize], groups: usize) -> Result<Self> {
        if dims.len() < 2 {
            candle_core::bail!("group norm expects [B, C, ...], got {dims:?}");
        }
        let (b, c) = (dims[0], dims[1]);
        if c % groups != 0 {
            candle_core::bail!("{c} channels do not split into {groups} groups");
        }
        Ok(Self {
            b,
            c,
            hw: dims[2..].iter().product(),
            g: groups,
        })
    }

    fn group_len(&self) -> usize {
        self.c / self.g * self.hw
    }
}

/// Per-(batch, group) mean and inverse std.
fn stats<T: WithDType>(x: &[T], geo: &Geo, eps: f64) -> Vec<(f64, f64)> {
    let n = geo.group_len();
    x.chunks_exact(n)
        .map(|chunk| {
            let mean = chunk.iter().map(|v| v.to_f64()).sum::<f64>() / n as f64;
            let var = chunk.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n as f64;
            (mean, 1.0 / (var + eps).sqrt())
        })
        .collect()
}

impl GroupNormOp {
    fn fwd<T: WithDType>(&self, x: &[T], gamma: &[T], beta: &[T], geo: &Geo) -> Vec<T> {
        let st = stats(x, geo, self.eps);
        let cg = geo.c / geo.g;
        let mut out = Vec::with_capacity(x.len());
        for b in 0..geo.b {
            for c in 0..geo.c {
                let (mean, inv) = st[b * geo.g + c / cg];
                let (ga, be) = (gamma[c].to_f64(), beta[c].to_f64());
                let base = (b * geo.c + c) * geo.hw;
                out.extend(x[base..base + geo.hw].iter().map(|v| {
                    let u = (v.to_f64() - mean) * inv * ga + be;
                    T::from_f64(if self.silu { u * sigmoid(u) } else { u })
                }));
            }
        }
        out
    }

    fn bwd_impl<T: WithDType>(&self, x: &[T], gamma: &[T], beta: &[T], dy: &[T], geo: &Geo) -> (Vec<T>, Vec<T>, Vec<T>) {
        let st = stats(x, geo, self.eps);
        let cg = geo.c / geo.g;
        let n = geo.group_len() as f64;
        let mut dx = vec![T::zero(); x.len()];
        let mut dgamma = vec![0f64; geo.c];
        let mut dbeta = vec![0f64; geo.c];
        let mut dxhat = vec![0f64; geo.group_len()];
        let mut xhat = vec![0f64; geo.group_len()];
        for b in 0..geo.b {
            for g in 0..geo.g {
                let (mean, inv) = st[b * geo.g + g];
                let (mut s1, mut s2) = (0.0, 0.0);
                for ci in 0..cg {
                    let c = g * cg + ci;
                    let (ga, be) = (gamma[c].to_f64(), beta[c].to_f64());
                    let base = (b * geo.c + c) * geo.hw;
                    for i in 0..geo.hw {
                        let xh = (x[base + i].to_f64() - mean) * inv;
                        let mut d = dy[base + i].to_f64();
                        if self.silu {
                            let u = xh * ga + be;
                            let s = sigmoid(u);
                            d *= s * (1.0 + u * (1.0 - s));
                        }
                        dbeta[c] += d;
                        dgamma[c] += d * xh;
                        let dh = d * ga;
                        let k = ci * geo.hw + i;
                        xhat[k] = xh;
                        dxhat[k] = dh;
                        s1 += dh;
                        s2 += dh * xh;
                    }
                }
                let (m1, m2) = (s1 / n, s2 / n);
                for ci in 0..cg {
                    let base = (b * geo.c + g * cg + ci) * geo.hw;
                    for i in 0..geo.hw {
                        let k = ci * geo.hw + i;
                        dx[base + i] = T::from_f64(inv * (dxhat[k] - m1 - xhat[k] * m2));
                    }
                }
            }
        }
        let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect();
        (dx, cast(dgamma), cast(dbeta))
    }
}

fn slice<'a, T: WithDType>(s: &'a [T], l: &Layout) -> Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("group norm expects contiguous operands"),
    }
}

impl CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "group-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let geo = Geo::new(l1.dims(), self.groups)?;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => {
                CpuStorage::F32(self.fwd(slice(x, l1)?, slice(g, l2)?, slice(b, l3)?, &geo))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => {
                CpuStorage::F64(self.fwd(slice(x, l1)?, slice(g, l2)?, slice(b, l3)?, &geo))
            }
            _ => candle_core::bail!("group norm supports matching f32 or f64 operands"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let geo = Geo::new(x.dims(), self.groups)?;
        let dev = x.device();
        macro_rules! run {
            ($t:ty) => {{
                let (dx, dg, db) = self.bwd_impl(
                    &x.flatten_all()?.to_vec1::<$t>()?,
                    &gamma.flatten_all()?.to_vec1::<$t>()?,
                    &beta.flatten_all()?.to_vec1::<$t>()?,
                    &grad_res.flatten_all()?.to_vec1::<$t>()?,
                    &geo,
                );
                (
                    Tensor::from_vec(dx, x.shape(), dev)?,
                    Tensor::from_vec(dg, gamma.shape(), dev)?,
                    Tensor::from_vec(db, beta.shape(), dev)?,
                )
            }};
        }
        let (dx, dg, db) = match x.dtype() {
            DType::F32 => run!(f32),
            DType::F64 => run!(f64),
            dt => candle_core::bail!("group norm backward does not support {dt:?}"),
        };
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

pub(crate) fn group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, op: GroupNormOp) -> Result<Tensor> {
    x.contiguous()?
        .apply_op3(&gamma.contiguous()?, &beta.contiguous()?, op)
}
