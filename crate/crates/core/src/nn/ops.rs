//! Differentiable kernels that candle's CPU backend handles slowly or not at all.
//!
//! All spatial tensors here are channels-last: `(batch, height, width, channels)`.

use std::ops::AddAssign;

use candle_core::{
    backend::BackendStorage, CpuStorage, CustomOp1, CustomOp2, DType, Layout, Result, Shape,
    Tensor, WithDType,
};

/// Element types the kernels are instantiated for.
pub(crate) trait Elem: WithDType + AddAssign + Default {}
impl Elem for f32 {}
impl Elem for f64 {}

fn contiguous<'a, T: Elem>(storage: &'a CpuStorage, layout: &Layout) -> Result<&'a [T]> {
    let data = T::cpu_storage_as_slice(storage)?;
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("kernel input must be contiguous"),
    }
}

/// Row-major `dst = lhs · rhs` with optional transposition of either operand.
///
/// `lhs` is `m×k` (or `k×m` when `lhs_t`), `rhs` is `k×n` (or `n×k` when `rhs_t`).
#[allow(clippy::too_many_arguments)]
fn matmul<T: Elem>(
    m: usize,
    k: usize,
    n: usize,
    lhs: &[T],
    lhs_t: bool,
    rhs: &[T],
    rhs_t: bool,
    dst: &mut [T],
) {
    assert_eq!(lhs.len(), m * k);
    assert_eq!(rhs.len(), k * n);
    assert_eq!(dst.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        dst.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let (lhs_rs, lhs_cs) = if lhs_t { (1, m as isize) } else { (k as isize, 1) };
    let (rhs_rs, rhs_cs) = if rhs_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            false,
            lhs.as_ptr(),
            lhs_cs,
            lhs_rs,
            rhs.as_ptr(),
            rhs_cs,
            rhs_rs,
            T::zero(),
            T::one(),
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

/// Stride-1 convolution with zero padding over `(B, H, W, Cin)` inputs and a
/// `(KH·KW·Cin, Cout)` weight matrix whose rows are ordered `(ky, kx, cin)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvNhwc {
    pub kh: usize,
    pub kw: usize,
    pub ph: usize,
    pub pw: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    cout: usize,
}

impl ConvDims {
    fn rows(&self) -> usize {
        self.b * self.oh * self.ow
    }
}

impl ConvNhwc {
    pub fn same(kh: usize, kw: usize) -> Self {
        Self { kh, kw, ph: kh / 2, pw: kw / 2 }
    }

    fn patch(&self, c: usize) -> usize {
        self.kh * self.kw * c
    }

    fn dims(&self, x: &Layout, w: &Layout) -> Result<ConvDims> {
        let (b, h, wd, c) = x.shape().dims4()?;
        let (rows, cout) = w.shape().dims2()?;
        if rows != self.patch(c) {
            candle_core::bail!(
                "conv weight has {rows} rows, expected {} for a {}x{} kernel over {c} channels",
                self.patch(c),
                self.kh,
                self.kw
            );
        }
        if h + 2 * self.ph < self.kh || wd + 2 * self.pw < self.kw {
            candle_core::bail!("conv kernel larger than padded input");
        }
        Ok(ConvDims {
            b,
            h,
            w: wd,
            c,
            oh: h + 2 * self.ph + 1 - self.kh,
            ow: wd + 2 * self.pw + 1 - self.kw,
            cout,
        })
    }

    fn im2col<T: Elem>(&self, x: &[T], d: &ConvDims) -> Vec<T> {
        let patch = self.patch(d.c);
        let mut col = vec![T::zero(); d.rows() * patch];
        for bi in 0..d.b {
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let row = ((bi * d.oh + oy) * d.ow + ox) * patch;
                    for ky in 0..self.kh {
                        let iy = (oy + ky) as isize - self.ph as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox + kx) as isize - self.pw as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            let src = ((bi * d.h + iy as usize) * d.w + ix as usize) * d.c;
                            let dst = row + (ky * self.kw + kx) * d.c;
                            col[dst..dst + d.c].copy_from_slice(&x[src..src + d.c]);
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<T: Elem>(&self, col: &[T], d: &ConvDims) -> Vec<T> {
        let patch = self.patch(d.c);
        let mut x = vec![T::zero(); d.b * d.h * d.w * d.c];
        for bi in 0..d.b {
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let row = ((bi * d.oh + oy) * d.ow + ox) * patch;
                    for ky in 0..self.kh {
                        let iy = (oy + ky) as isize - self.ph as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox + kx) as isize - self.pw as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            let dst = ((bi * d.h + iy as usize) * d.w + ix as usize) * d.c;
                            let src = row + (ky * self.kw + kx) * d.c;
                            for (o, i) in x[dst..dst + d.c].iter_mut().zip(&col[src..src + d.c]) {
                                *o += *i;
                            }
                        }
                    }
                }
            }
        }
        x
    }

    fn forward<T: Elem>(&self, x: &[T], w: &[T], d: &ConvDims) -> Vec<T> {
        let col = self.im2col(x, d);
        let mut out = vec![T::zero(); d.rows() * d.cout];
        matmul(d.rows(), self.patch(d.c), d.cout, &col, false, w, false, &mut out);
        out
    }

    fn grad_input<T: Elem>(&self, g: &[T], w: &[T], d: &ConvDims) -> Vec<T> {
        let patch = self.patch(d.c);
        let mut gcol = vec![T::zero(); d.rows() * patch];
        matmul(d.rows(), d.cout, patch, g, false, w, true, &mut gcol);
        self.col2im(&gcol, d)
    }

    fn grad_weight<T: Elem>(&self, x: &[T], g: &[T], d: &ConvDims) -> Vec<T> {
        let patch = self.patch(d.c);
        let col = self.im2col(x, d);
        let mut gw = vec![T::zero(); patch * d.cout];
        matmul(patch, d.rows(), d.cout, &col, true, g, false, &mut gw);
        gw
    }
}

impl CustomOp2 for ConvNhwc {
    fn name(&self) -> &'static str {
        "conv-nhwc"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let d = self.dims(l1, l2)?;
        let shape = Shape::from((d.b, d.oh, d.ow, d.cout));
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => CpuStorage::F32(self.forward(
                contiguous::<f32>(s1, l1)?,
                contiguous::<f32>(s2, l2)?,
                &d,
            )),
            (CpuStorage::F64(_), CpuStorage::F64(_)) => CpuStorage::F64(self.forward(
                contiguous::<f64>(s1, l1)?,
                contiguous::<f64>(s2, l2)?,
                &d,
            )),
            _ => candle_core::bail!(
                "conv-nhwc supports f32/f64 with matching dtypes, got {:?}/{:?}",
                s1.dtype(),
                s2.dtype()
            ),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let d = self.dims(x.layout(), w.layout())?;
        let grad = grad.contiguous()?;
        let x = x.contiguous()?;
        let w_c = w.contiguous()?;
        let dev = x.device();
        macro_rules! run {
            ($t:ty) => {{
                let xs = x.flatten_all()?.to_vec1::<$t>()?;
                let ws = w_c.flatten_all()?.to_vec1::<$t>()?;
                let gs = grad.flatten_all()?.to_vec1::<$t>()?;
                let gx = if x.track_op() {
                    let v = self.grad_input(&gs, &ws, &d);
                    Some(Tensor::from_vec(v, (d.b, d.h, d.w, d.c), dev)?)
                } else {
                    None
                };
                let gw = if w.track_op() {
                    let v = self.grad_weight(&xs, &gs, &d);
                    Some(Tensor::from_vec(v, (self.patch(d.c), d.cout), dev)?)
                } else {
                    None
                };
                Ok((gx, gw))
            }};
        }
        match x.dtype() {
            DType::F32 => run!(f32),
            DType::F64 => run!(f64),
            dt => candle_core::bail!("conv-nhwc backward does not support {dt:?}"),
        }
    }
}

/// Applies a channels-last convolution; `weight` is `(KH·KW·Cin, Cout)`.
pub(crate) fn conv_nhwc(x: &Tensor, weight: &Tensor, spec: ConvNhwc) -> Result<Tensor> {
    x.contiguous()?.apply_op2(&weight.contiguous()?, spec)
}

/// Euclidean norm of the whole tensor, with gradient zero at the origin.
struct L2Norm;

impl CustomOp1 for L2Norm {
    fn name(&self) -> &'static str {
        "l2-norm"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(_) => {
                let s: f64 = contiguous::<f32>(storage, layout)?
                    .iter()
                    .map(|&v| (v as f64) * (v as f64))
                    .sum();
                CpuStorage::F32(vec![s.sqrt() as f32])
            }
            CpuStorage::F64(_) => {
                let s: f64 = contiguous::<f64>(storage, layout)?.iter().map(|&v| v * v).sum();
                CpuStorage::F64(vec![s.sqrt()])
            }
            s => candle_core::bail!("l2-norm does not support {:?}", s.dtype()),
        };
        Ok((out, Shape::from(())))
    }

    fn bwd(&self, arg: &Tensor, res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let norm = res.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if norm == 0.0 {
            return Ok(Some(arg.zeros_like()?));
        }
        let g = grad.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        Ok(Some(arg.affine(g / norm, 0.0)?))
    }
}

/// `‖x‖₂` over all elements as a scalar tensor.
pub(crate) fn l2_norm(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(L2Norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn naive_conv(x: &[f64], w: &[f64], b: usize, h: usize, wd: usize, c: usize, co: usize, k: usize) -> Vec<f64> {
        let p = k / 2;
        let mut out = vec![0.0; b * h * wd * co];
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..wd {
                    for o in 0..co {
                        let mut acc = 0.0;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + ky as isize - p as isize;
                                let ix = xx as isize + kx as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                for ci in 0..c {
                                    let xv = x[((bi * h + iy as usize) * wd + ix as usize) * c + ci];
                                    acc += xv * w[((ky * k + kx) * c + ci) * co + o];
                                }
                            }
                        }
                        out[((bi * h + y) * wd + xx) * co + o] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        let (b, h, w, c, co) = (2, 5, 4, 3, 2);
        let xs: Vec<f64> = (0..b * h * w * c).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let ws: Vec<f64> = (0..9 * c * co).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect();
        let dev = Device::Cpu;
        let xt = Tensor::from_vec(xs.clone(), (b, h, w, c), &dev).unwrap();
        let wt = Tensor::from_vec(ws.clone(), (9 * c, co), &dev).unwrap();
        let got = conv_nhwc(&xt, &wt, ConvNhwc::same(3, 3)).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let want = naive_conv(&xs, &ws, b, h, w, c, co, 3);
        for (g, e) in got.iter().zip(&want) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let (b, h, w, c, co) = (1, 4, 3, 2, 2);
        let dev = Device::Cpu;
        let xs: Vec<f64> = (0..b * h * w * c).map(|i| ((i * 29 % 13) as f64 - 6.0) / 9.0).collect();
        let ws: Vec<f64> = (0..9 * c * co).map(|i| ((i * 7 % 5) as f64 - 2.0) / 3.0).collect();
        let x = Var::from_vec(xs.clone(), (b, h, w, c), &dev).unwrap();
        let wv = Var::from_vec(ws.clone(), (9 * c, co), &dev).unwrap();
        let loss = |x: &Tensor, wt: &Tensor| {
            conv_nhwc(x, wt, ConvNhwc::same(3, 3)).unwrap().sqr().unwrap().sum_all().unwrap()
        };
        let grads = loss(x.as_tensor(), wv.as_tensor()).backward().unwrap();
        let gx = grads.get(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let gw = grads.get(&wv).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let eval = |xs: &[f64], ws: &[f64]| {
            let xt = Tensor::from_vec(xs.to_vec(), (b, h, w, c), &dev).unwrap();
            let wt = Tensor::from_vec(ws.to_vec(), (9 * c, co), &dev).unwrap();
            loss(&xt, &wt).to_scalar::<f64>().unwrap()
        };
        let eps = 1e-6;
        for i in 0..xs.len() {
            let (mut p, mut m) = (xs.clone(), xs.clone());
            p[i] += eps;
            m[i] -= eps;
            let fd = (eval(&p, &ws) - eval(&m, &ws)) / (2.0 * eps);
            assert!((fd - gx[i]).abs() < 1e-6, "x[{i}]: {fd} vs {}", gx[i]);
        }
        for i in 0..ws.len() {
            let (mut p, mut m) = (ws.clone(), ws.clone());
            p[i] += eps;
            m[i] -= eps;
            let fd = (eval(&xs, &p) - eval(&xs, &m)) / (2.0 * eps);
            assert!((fd - gw[i]).abs() < 1e-6, "w[{i}]: {fd} vs {}", gw[i]);
        }
    }

    #[test]
    fn l2_norm_value_and_zero_subgradient() {
        let dev = Device::Cpu;
        let v = Var::from_vec(vec![3f32, 4.0], 2, &dev).unwrap();
        let n = l2_norm(v.as_tensor()).unwrap();
        assert_eq!(n.to_scalar::<f32>().unwrap(), 5.0);
        let g = n.backward().unwrap();
        let g = g.get(&v).unwrap().to_vec1::<f32>().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-7 && (g[1] - 0.8).abs() < 1e-7);

        let z = Var::from_vec(vec![0f32; 3], 3, &dev).unwrap();
        let g = l2_norm(z.as_tensor()).unwrap().backward().unwrap();
        assert_eq!(g.get(&z).unwrap().to_vec1::<f32>().unwrap(), vec![0.0; 3]);
    }
}
