//! Fused CPU kernels with hand-written backward passes.
//!
//! Composing convolution and group normalisation from many small candle ops
//! makes the backward pass allocate, zero-fill and accumulate a gradient for
//! every intermediate, which dominates training time on a single core. These
//! kernels keep the large intermediates (im2col buffers, normalised
//! activations) out of the autograd graph.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor, WithDType};
use gemm::Parallelism;

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&T::cpu_storage_as_slice(s)?[a..b]),
        None => candle_core::bail!("fused kernels need contiguous inputs"),
    }
}

macro_rules! dispatch {
    ($s:expr, $f:ident ( $($arg:expr),* )) => {
        match $s.dtype() {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
            other => candle_core::bail!("unsupported dtype {other:?}"),
        }
    };
}

/// Floating-point element types the kernels run on.
pub(crate) trait Real: WithDType {
    fn exp(self) -> Self;
}

impl Real for f32 {
    fn exp(self) -> Self {
        f32::exp(self)
    }
}

impl Real for f64 {
    fn exp(self) -> Self {
        f64::exp(self)
    }
}

/// A row-major matrix view: data, rows, columns, and whether to read it
/// transposed.
#[derive(Clone, Copy)]
struct Mat<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    transposed: bool,
}

impl<'a, T> Mat<'a, T> {
    fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    /// (logical rows, logical cols, row stride, col stride)
    fn geometry(&self) -> (usize, usize, isize, isize) {
        if self.transposed {
            (self.cols, self.rows, 1, self.cols as isize)
        } else {
            (self.rows, self.cols, self.cols as isize, 1)
        }
    }
}

/// `dst[m×n] = a·b`, or `dst += a·b` when `accumulate`; `dst` is row-major.
fn matmul<T: WithDType>(dst: &mut [T], a: Mat<T>, b: Mat<T>, accumulate: bool) {
    let (m, k, a_rs, a_cs) = a.geometry();
    let (k2, n, b_rs, b_cs) = b.geometry();
    assert_eq!(k, k2, "inner dimensions differ");
    assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols);
    assert!(dst.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            dst[..m * n].fill(T::zero());
        }
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches:
    // a is m×k, b is k×n and dst is m×n with the strides computed from the
    // checked shapes; the slices do not alias since `dst` is borrowed mutably.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            a.data.as_ptr(),
            a_cs,
            a_rs,
            b.data.as_ptr(),
            b_cs,
            b_rs,
            T::one(),
            T::one(),
            false,
            false,
            false,
            Parallelism::None,
        )
    }
}

/// Geometry of a square-kernel convolution over one image, padding
/// `kernel / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeometry {
    kernel: usize,
    stride: usize,
    channels: usize,
    h: usize,
    w: usize,
}

impl ConvGeometry {
    fn out_hw(&self) -> (usize, usize) {
        let p = self.kernel / 2;
        (
            (self.h + 2 * p - self.kernel) / self.stride + 1,
            (self.w + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    /// Rows of the column matrix, ordered (channel, dy, dx).
    fn taps(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        let (ho, wo) = self.out_hw();
        ho * wo
    }

    fn plane(&self) -> usize {
        self.channels * self.h * self.w
    }

    /// Calls `f(col_offset, input_offset, len)` for every contiguous run of
    /// in-bounds taps of one image (runs have length 1 when strided).
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, s, p) = (self.kernel, self.stride, self.kernel / 2);
        let (ho, wo) = self.out_hw();
        let (h, w) = (self.h, self.w);
        for ci in 0..self.channels {
            for dy in 0..k {
                for dx in 0..k {
                    let row = ((ci * k + dy) * k + dx) * ho * wo;
                    // output columns whose input column `ox·s + dx − p` is in bounds
                    let lo = (p.saturating_sub(dx) + s - 1) / s;
                    let hi = ((w + p - dx + s - 1) / s).min(wo);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * s + dy) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = ci * h * w + iy as usize * w;
                        let dst = row + oy * wo;
                        if s == 1 {
                            f(dst + lo, src + lo + dx - p, hi - lo);
                        } else {
                            for ox in lo..hi {
                                f(dst + ox, src + ox * s + dx - p, 1);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Fills the in-bounds entries of `cols`; padding entries are left as
    /// they are, so a zeroed buffer can be reused across images.
    fn im2col<T: Copy>(&self, x: &[T], cols: &mut [T]) {
        self.for_each_run(|o, i, n| cols[o..o + n].copy_from_slice(&x[i..i + n]));
    }

    fn col2im<T: WithDType>(&self, cols: &[T], dx: &mut [T]) {
        self.for_each_run(|o, i, n| {
            for (d, v) in dx[i..i + n].iter_mut().zip(&cols[o..o + n]) {
                *d += *v;
            }
        });
    }
}

/// 2-D convolution `(x [b,c,h,w], weight [o,c,k,k], bias [o])`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv2dOp {
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2dOp {
    fn geometry(&self, x: &[usize], w: &[usize]) -> candle_core::Result<(usize, usize, ConvGeometry)> {
        let (&[b, c, h, wd], &[o, wc, k1, k2]) = (x, w) else {
            candle_core::bail!("conv expects 4-d input and weight, got {x:?} and {w:?}");
        };
        if wc != c || k1 != self.kernel || k2 != self.kernel {
            candle_core::bail!("conv weight {w:?} does not fit input {x:?}");
        }
        Ok((
            b,
            o,
            ConvGeometry {
                kernel: self.kernel,
                stride: self.stride,
                channels: c,
                h,
                w: wd,
            },
        ))
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_fwd<T: WithDType>(
    op: &Conv2dOp,
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
    s3: &CpuStorage,
    l3: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let (b, o, g) = op.geometry(l1.dims(), l2.dims())?;
    let (x, w, bias) = (contiguous::<T>(s1, l1)?, contiguous::<T>(s2, l2)?, contiguous::<T>(s3, l3)?);
    if bias.len() != o {
        candle_core::bail!("conv bias must have {o} entries");
    }
    let (ho, wo) = g.out_hw();
    let (taps, pos) = (g.taps(), g.positions());
    let mut out = vec![T::zero(); b * o * pos];
    let mut cols = vec![T::zero(); taps * pos];
    for bi in 0..b {
        let dst = &mut out[bi * o * pos..(bi + 1) * o * pos];
        for (row, &bv) in dst.chunks_mut(pos).zip(bias) {
            row.fill(bv);
        }
        if g.kernel == 1 && g.stride == 1 {
            matmul(dst, Mat::new(w, o, taps), Mat::new(&x[bi * g.plane()..], taps, pos), true);
        } else {
            g.im2col(&x[bi * g.plane()..(bi + 1) * g.plane()], &mut cols);
            matmul(dst, Mat::new(w, o, taps), Mat::new(&cols, taps, pos), true);
        }
    }
    Ok((T::to_cpu_storage_owned(out), Shape::from((b, o, ho, wo))))
}

impl CustomOp3 for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s1, conv_fwd(self, s1, l1, s2, l2, s3, l3))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _bias: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dx = grad.apply_op2_no_bwd(w, &ConvInputGrad { conv: *self, x_dims: x.dims4()? })?;
        let w_dims = w.dims4()?;
        let both = grad.apply_op2_no_bwd(x, &ConvWeightGrad { conv: *self, w_dims })?;
        let nw = w.elem_count();
        let dw = both.narrow(0, 0, nw)?.reshape(w_dims)?;
        let db = both.narrow(0, nw, w_dims.0)?;
        Ok((Some(dx), Some(dw), Some(db)))
    }
}

/// `(grad [b,o,ho,wo], weight)` → gradient with respect to the input.
struct ConvInputGrad {
    conv: Conv2dOp,
    x_dims: (usize, usize, usize, usize),
}

fn conv_input_grad<T: WithDType>(
    op: &ConvInputGrad,
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let (xb, xc, xh, xw) = op.x_dims;
    let (b, o, g) = op.conv.geometry(&[xb, xc, xh, xw], l2.dims())?;
    let (gr, w) = (contiguous::<T>(s1, l1)?, contiguous::<T>(s2, l2)?);
    let (taps, pos) = (g.taps(), g.positions());
    if gr.len() != b * o * pos {
        candle_core::bail!("conv gradient has the wrong size");
    }
    let mut dx = vec![T::zero(); b * g.plane()];
    let mut cols = vec![T::zero(); taps * pos];
    for bi in 0..b {
        let gi = Mat::new(&gr[bi * o * pos..(bi + 1) * o * pos], o, pos);
        let dxi = &mut dx[bi * g.plane()..(bi + 1) * g.plane()];
        if g.kernel == 1 && g.stride == 1 {
            matmul(dxi, Mat::new(w, o, taps).t(), gi, false);
        } else {
            matmul(&mut cols, Mat::new(w, o, taps).t(), gi, false);
            g.col2im(&cols, dxi);
        }
    }
    Ok((T::to_cpu_storage_owned(dx), Shape::from(op.x_dims)))
}

impl CustomOp2 for ConvInputGrad {
    fn name(&self) -> &'static str {
        "conv2d-input-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s1, conv_input_grad(self, s1, l1, s2, l2))
    }
}

/// `(grad [b,o,ho,wo], x)` → `[dweight..., dbias...]` flattened.
struct ConvWeightGrad {
    conv: Conv2dOp,
    w_dims: (usize, usize, usize, usize),
}

fn conv_weight_grad<T: WithDType>(
    op: &ConvWeightGrad,
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let (wo_, wc, k1, k2) = op.w_dims;
    let (b, o, g) = op.conv.geometry(l2.dims(), &[wo_, wc, k1, k2])?;
    let (gr, x) = (contiguous::<T>(s1, l1)?, contiguous::<T>(s2, l2)?);
    let (taps, pos) = (g.taps(), g.positions());
    if gr.len() != b * o * pos {
        candle_core::bail!("conv gradient has the wrong size");
    }
    let mut dw = vec![T::zero(); o * taps + o];
    let mut db = vec![0f64; o];
    let mut cols = vec![T::zero(); taps * pos];
    for bi in 0..b {
        let gb = &gr[bi * o * pos..(bi + 1) * o * pos];
        for (acc, row) in db.iter_mut().zip(gb.chunks(pos)) {
            *acc += row.iter().map(|v| v.to_f64()).sum::<f64>();
        }
        let gi = Mat::new(gb, o, pos);
        let xi = &x[bi * g.plane()..(bi + 1) * g.plane()];
        if g.kernel == 1 && g.stride == 1 {
            matmul(&mut dw, gi, Mat::new(xi, taps, pos).t(), bi > 0);
        } else {
            g.im2col(xi, &mut cols);
            matmul(&mut dw, gi, Mat::new(&cols, taps, pos).t(), bi > 0);
        }
    }
    for (d, v) in dw[o * taps..].iter_mut().zip(db) {
        *d = T::from_f64(v);
    }
    Ok((T::to_cpu_storage_owned(dw), Shape::from(o * taps + o)))
}

impl CustomOp2 for ConvWeightGrad {
    fn name(&self) -> &'static str {
        "conv2d-weight-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s1, conv_weight_grad(self, s1, l1, s2, l2))
    }
}

struct Groups {
    batch: usize,
    channels: usize,
    spatial: usize,
    groups: usize,
}

impl Groups {
    fn new(dims: &[usize], groups: usize) -> candle_core::Result<Self> {
        if dims.len() < 2 || groups == 0 || dims[1] % groups != 0 {
            candle_core::bail!("group norm with {groups} groups cannot take {dims:?}");
        }
        Ok(Self {
            batch: dims[0],
            channels: dims[1],
            spatial: dims[2..].iter().product(),
            groups,
        })
    }

    fn per_group(&self) -> usize {
        self.channels / self.groups
    }

    /// (start offset, first channel) of each group.
    fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let cpg = self.per_group();
        (0..self.batch * self.groups).map(move |i| {
            let (bi, g) = (i / self.groups, i % self.groups);
            ((bi * self.channels + g * cpg) * self.spatial, g * cpg)
        })
    }

    fn len(&self) -> usize {
        self.per_group() * self.spatial
    }
}

/// Mean and reciprocal standard deviation (biased variance), accumulated
/// in f64.
fn moments<T: WithDType>(x: &[T], eps: f64) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().map(|v| v.to_f64()).sum::<f64>() / n;
    let var = x.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Group normalisation over `[b, c, ...]` with per-channel affine terms.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GroupNormOp {
    pub groups: usize,
    pub eps: f64,
}

#[allow(clippy::too_many_arguments)]
fn group_norm_fwd<T: WithDType>(
    op: &GroupNormOp,
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
    s3: &CpuStorage,
    l3: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let (x, gamma, beta) = (contiguous::<T>(s1, l1)?, contiguous::<T>(s2, l2)?, contiguous::<T>(s3, l3)?);
    let g = Groups::new(l1.dims(), op.groups)?;
    if gamma.len() != g.channels || beta.len() != g.channels {
        candle_core::bail!("group norm affine terms must have {} entries", g.channels);
    }
    let mut out = vec![T::zero(); x.len()];
    for (start, c0) in g.iter() {
        let (mean, rstd) = moments(&x[start..start + g.len()], op.eps);
        for ci in 0..g.per_group() {
            let c = c0 + ci;
            // y = x·scale + shift
            let scale = rstd * gamma[c].to_f64();
            let shift = beta[c].to_f64() - mean * scale;
            let (scale, shift) = (T::from_f64(scale), T::from_f64(shift));
            let off = start + ci * g.spatial;
            for (o, v) in out[off..off + g.spatial].iter_mut().zip(&x[off..off + g.spatial]) {
                *o = *v * scale + shift;
            }
        }
    }
    Ok((T::to_cpu_storage_owned(out), l1.shape().clone()))
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
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s1, group_norm_fwd(self, s1, l1, s2, l2, s3, l3))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let n = x.elem_count();
        let c = gamma.elem_count();
        let all = x
            .contiguous()?
            .apply_op3_no_bwd(&gamma.contiguous()?, &grad.contiguous()?, &GroupNormGrad(*self))?;
        let dx = all.narrow(0, 0, n)?.reshape(x.shape())?;
        let dgamma = all.narrow(0, n, c)?.reshape(gamma.shape())?;
        let dbeta = all.narrow(0, n + c, c)?.reshape(gamma.shape())?;
        Ok((Some(dx), Some(dgamma), Some(dbeta)))
    }
}

/// `(x, gamma, grad)` → `[dx..., dgamma..., dbeta...]` flattened.
struct GroupNormGrad(GroupNormOp);

fn group_norm_grad<T: WithDType>(
    op: &GroupNormOp,
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
    s3: &CpuStorage,
    l3: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let (x, gamma, dy) = (contiguous::<T>(s1, l1)?, contiguous::<T>(s2, l2)?, contiguous::<T>(s3, l3)?);
    let g = Groups::new(l1.dims(), op.groups)?;
    let (n, c) = (x.len(), g.channels);
    let mut out = vec![T::zero(); n + 2 * c];
    let mut dgamma = vec![0f64; c];
    let mut dbeta = vec![0f64; c];
    let len = g.len() as f64;
    for (start, c0) in g.iter() {
        let (mean, rstd) = moments(&x[start..start + g.len()], op.eps);
        // with x̂ = (x − mean)·rstd and d = dy·gamma:
        // dx = rstd·(d − mean(d) − x̂·mean(d·x̂))
        let (mut m1, mut m2) = (0.0, 0.0);
        for ci in 0..g.per_group() {
            let ch = c0 + ci;
            let off = start + ci * g.spatial;
            let (mut sdy, mut sdyx) = (0.0, 0.0);
            for (v, d) in x[off..off + g.spatial].iter().zip(&dy[off..off + g.spatial]) {
                let (xh, d) = ((v.to_f64() - mean) * rstd, d.to_f64());
                sdy += d;
                sdyx += d * xh;
            }
            dbeta[ch] += sdy;
            dgamma[ch] += sdyx;
            let gm = gamma[ch].to_f64();
            m1 += sdy * gm;
            m2 += sdyx * gm;
        }
        let (m1, m2) = (m1 / len, m2 / len);
        for ci in 0..g.per_group() {
            let ch = c0 + ci;
            let gm = gamma[ch].to_f64();
            let off = start + ci * g.spatial;
            // dx = a·dy + b·x + k, expanded so the inner loop stays in T
            let a = rstd * gm;
            let b = -rstd * rstd * m2;
            let k = -rstd * m1 + rstd * rstd * mean * m2;
            let (a, b, k) = (T::from_f64(a), T::from_f64(b), T::from_f64(k));
            for ((o, v), d) in out[off..off + g.spatial]
                .iter_mut()
                .zip(&x[off..off + g.spatial])
                .zip(&dy[off..off + g.spatial])
            {
                *o = a * *d + b * *v + k;
            }
        }
    }
    for ch in 0..c {
        out[n + ch] = T::from_f64(dgamma[ch]);
        out[n + c + ch] = T::from_f64(dbeta[ch]);
    }
    Ok((T::to_cpu_storage_owned(out), Shape::from(n + 2 * c)))
}

impl CustomOp3 for GroupNormGrad {
    fn name(&self) -> &'static str {
        "group-norm-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s1, group_norm_grad(&self.0, s1, l1, s2, l2, s3, l3))
    }
}

/// `x · sigmoid(x)` with a single-pass backward.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Silu;

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (T::zero() - x).exp())
}

fn silu_fwd<T: Real>(s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
    let x = contiguous::<T>(s, l)?;
    let out = x.iter().map(|&v| v * sigmoid(v)).collect();
    Ok((T::to_cpu_storage_owned(out), l.shape().clone()))
}

impl CustomOp1 for Silu {
    fn name(&self) -> &'static str {
        "silu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s, silu_fwd(s, l))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(x.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &SiluGrad)?))
    }
}

/// `(x, grad)` → `grad · σ(x)·(1 + x·(1 − σ(x)))`.
struct SiluGrad;

fn silu_grad<T: Real>(s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
    let (x, g) = (contiguous::<T>(s1, l1)?, contiguous::<T>(s2, l2)?);
    if x.len() != g.len() {
        candle_core::bail!("silu gradient has the wrong size");
    }
    let out = x
        .iter()
        .zip(g)
        .map(|(&x, &g)| {
            let sig = sigmoid(x);
            g * sig * (T::one() + x * (T::one() - sig))
        })
        .collect();
    Ok((T::to_cpu_storage_owned(out), l1.shape().clone()))
}

impl CustomOp2 for SiluGrad {
    fn name(&self) -> &'static str {
        "silu-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s1, silu_grad(s1, l1, s2, l2))
    }
}

/// Nearest-neighbour ×2 upsampling of `[b, c, h, w]`, scaled by `scale`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Upsample2 {
    pub scale: f64,
}

/// 2×2 sum pooling of `[b, c, h, w]`, scaled by `scale`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Pool2 {
    pub scale: f64,
}

fn upsample_fwd<T: WithDType>(scale: f64, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
    let x = contiguous::<T>(s, l)?;
    let (b, c, h, w) = l.shape().dims4()?;
    let k = T::from_f64(scale);
    let mut out = vec![T::zero(); x.len() * 4];
    for (plane, row) in x.chunks(w).enumerate() {
        let (p, y) = (plane / h, plane % h);
        let top = (p * 2 * h + 2 * y) * 2 * w;
        for (i, &v) in row.iter().enumerate() {
            let v = v * k;
            for o in [top + 2 * i, top + 2 * i + 1, top + 2 * w + 2 * i, top + 2 * w + 2 * i + 1] {
                out[o] = v;
            }
        }
    }
    Ok((T::to_cpu_storage_owned(out), Shape::from((b, c, 2 * h, 2 * w))))
}

fn pool_fwd<T: WithDType>(scale: f64, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
    let x = contiguous::<T>(s, l)?;
    let (b, c, h, w) = l.shape().dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        candle_core::bail!("cannot pool a {h}×{w} map");
    }
    let (ho, wo) = (h / 2, w / 2);
    let k = T::from_f64(scale);
    let mut out = vec![T::zero(); x.len() / 4];
    for (o, v) in out.iter_mut().enumerate() {
        let (p, y, i) = (o / (ho * wo), (o / wo) % ho, o % wo);
        let top = (p * h + 2 * y) * w + 2 * i;
        *v = (x[top] + x[top + 1] + x[top + w] + x[top + w + 1]) * k;
    }
    Ok((T::to_cpu_storage_owned(out), Shape::from((b, c, ho, wo))))
}

impl CustomOp1 for Upsample2 {
    fn name(&self) -> &'static str {
        "upsample2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s, upsample_fwd(self.scale, s, l))
    }

    fn bwd(&self, _x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Pool2 { scale: self.scale })?))
    }
}

impl CustomOp1 for Pool2 {
    fn name(&self) -> &'static str {
        "pool2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s, pool_fwd(self.scale, s, l))
    }

    fn bwd(&self, _x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Upsample2 { scale: self.scale })?))
    }
}
