//! Forward and backward kernels on raw tensors. The autograd tape wraps these;
//! nothing here tracks history.

use crate::error::{Error, Result};
use crate::tensor::{gemm, numel_of, Element, MatRef, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Conv2dSpec {
            stride,
            padding,
            groups,
        }
    }
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec::new(1, 0, 1)
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_out_extent(input: usize, k: usize, spec: &Conv2dSpec, axis: &str) -> Result<usize> {
    let padded = input + 2 * spec.padding;
    if padded < k {
        return Err(Error::shape(format!(
            "conv2d kernel {k} larger than padded {axis} extent {padded}"
        )));
    }
    if (padded - k) % spec.stride != 0 {
        return Err(Error::shape(format!(
            "conv2d {axis}: ({input} + 2·{} − {k}) not divisible by stride {}",
            spec.padding, spec.stride
        )));
    }
    Ok((padded - k) / spec.stride + 1)
}

fn conv_geom(xs: &[usize], ws: &[usize], spec: Conv2dSpec) -> Result<ConvGeom> {
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::shape(format!(
            "conv2d expects 4-d input and kernel, got {xs:?} and {ws:?}"
        )));
    }
    if spec.groups == 0 || spec.stride == 0 {
        return Err(Error::shape("conv2d needs groups ≥ 1 and stride ≥ 1"));
    }
    let (batch, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if cin % spec.groups != 0 || cout % spec.groups != 0 {
        return Err(Error::shape(format!(
            "conv2d channels in={cin} out={cout} not divisible by groups={}",
            spec.groups
        )));
    }
    if cin / spec.groups != cin_g {
        return Err(Error::shape(format!(
            "conv2d kernel {ws:?} expects {cin_g} input channels per group, input {xs:?} with groups={} gives {}",
            spec.groups,
            cin / spec.groups
        )));
    }
    let oh = conv_out_extent(h, kh, &spec, "height")?;
    let ow = conv_out_extent(w, kw, &spec, "width")?;
    Ok(ConvGeom {
        batch,
        cin,
        h,
        w,
        cout,
        cin_g,
        cout_g: cout / spec.groups,
        kh,
        kw,
        oh,
        ow,
    })
}

/// Output positions `o` along one axis whose tap `k` lands inside the input.
#[inline]
fn valid_range(k: usize, stride: usize, pad: usize, extent: usize, out: usize) -> std::ops::Range<usize> {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if extent + pad > k {
        out.min((extent - 1 + pad - k) / stride + 1)
    } else {
        0
    };
    lo..hi.max(lo)
}

impl ConvGeom {
    fn kk(&self) -> usize {
        self.kh * self.kw
    }

    fn ohw(&self) -> usize {
        self.oh * self.ow
    }

    fn single_channel(&self) -> bool {
        self.cin_g == 1 && self.cout_g == 1
    }

    fn pointwise(&self, spec: &Conv2dSpec) -> bool {
        self.kh == 1 && self.kw == 1 && spec.stride == 1 && spec.padding == 0
    }

    fn groups(&self) -> usize {
        self.cout / self.cout_g
    }
}

/// Unfolds one group's input `[cin_g, h, w]` into `[cin_g·kh·kw, oh·ow]`.
fn im2col<T: Element>(x: &[T], g: &ConvGeom, spec: &Conv2dSpec, cols: &mut [T]) {
    let (s, p, ohw) = (spec.stride, spec.padding, g.ohw());
    cols.iter_mut().for_each(|v| *v = T::zero());
    for ic in 0..g.cin_g {
        let plane = &x[ic * g.h * g.w..(ic + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let ys = valid_range(ky, s, p, g.h, g.oh);
            for kx in 0..g.kw {
                let xs = valid_range(kx, s, p, g.w, g.ow);
                let row = &mut cols[((ic * g.kh + ky) * g.kw + kx) * ohw..][..ohw];
                for oy in ys.clone() {
                    let iy = oy * s + ky - p;
                    for ox in xs.clone() {
                        row[oy * g.ow + ox] = plane[iy * g.w + ox * s + kx - p];
                    }
                }
            }
        }
    }
}

/// Adds columns `[cin_g·kh·kw, oh·ow]` back into a group's input gradient.
fn col2im<T: Element>(cols: &[T], g: &ConvGeom, spec: &Conv2dSpec, dx: &mut [T]) {
    let (s, p, ohw) = (spec.stride, spec.padding, g.ohw());
    for ic in 0..g.cin_g {
        let plane = &mut dx[ic * g.h * g.w..(ic + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let ys = valid_range(ky, s, p, g.h, g.oh);
            for kx in 0..g.kw {
                let xs = valid_range(kx, s, p, g.w, g.ow);
                let row = &cols[((ic * g.kh + ky) * g.kw + kx) * ohw..][..ohw];
                for oy in ys.clone() {
                    let iy = oy * s + ky - p;
                    for ox in xs.clone() {
                        plane[iy * g.w + ox * s + kx - p] += row[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

/// One input plane, one kernel, one output plane. Stride-1 planes run over
/// a zero-padded copy in `scratch` so every tap is one contiguous pass.
fn conv_plane<T: Element>(x: &[T], k: &[T], g: &ConvGeom, spec: &Conv2dSpec, scratch: &mut Vec<T>, out: &mut [T]) {
    let (s, p) = (spec.stride, spec.padding);
    if s == 1 {
        let pw = g.w + 2 * p;
        let ph = g.h + 2 * p;
        // one spare row lets the last tap run past the bottom edge
        let padded = (ph + 1) * pw;
        let span = g.oh * pw;
        // the border stays zero between planes of one call; only the
        // interior and the accumulator are rewritten
        if scratch.len() != padded + span {
            scratch.clear();
            scratch.resize(padded + span, T::zero());
        }
        let (xp, acc) = scratch.split_at_mut(padded);
        acc.fill(T::zero());
        for (y, row) in x.chunks_exact(g.w).enumerate() {
            xp[(y + p) * pw + p..][..g.w].copy_from_slice(row);
        }
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let wv = k[ky * g.kw + kx];
                let src = &xp[ky * pw + kx..][..span];
                for (a, &v) in acc.iter_mut().zip(src) {
                    *a += wv * v;
                }
            }
        }
        for oy in 0..g.oh {
            out[oy * g.ow..(oy + 1) * g.ow].copy_from_slice(&acc[oy * pw..][..g.ow]);
        }
        return;
    }
    for ky in 0..g.kh {
        let ys = valid_range(ky, s, p, g.h, g.oh);
        for kx in 0..g.kw {
            let xs = valid_range(kx, s, p, g.w, g.ow);
            let wv = k[ky * g.kw + kx];
            for oy in ys.clone() {
                let xrow = &x[(oy * s + ky - p) * g.w..];
                let orow = &mut out[oy * g.ow..(oy + 1) * g.ow];
                for ox in xs.clone() {
                    orow[ox] += wv * xrow[ox * s + kx - p];
                }
            }
        }
    }
}

fn conv_plane_backward<T: Element>(
    x: &[T],
    k: &[T],
    dy: &[T],
    g: &ConvGeom,
    spec: &Conv2dSpec,
    dx: Option<&mut [T]>,
    dk: Option<&mut [T]>,
) {
    let (s, p) = (spec.stride, spec.padding);
    if let Some(dx) = dx {
        for ky in 0..g.kh {
            let ys = valid_range(ky, s, p, g.h, g.oh);
            for kx in 0..g.kw {
                let xs = valid_range(kx, s, p, g.w, g.ow);
                let wv = k[ky * g.kw + kx];
                for oy in ys.clone() {
                    let xrow = &mut dx[(oy * s + ky - p) * g.w..];
                    let grow = &dy[oy * g.ow..(oy + 1) * g.ow];
                    for ox in xs.clone() {
                        xrow[ox * s + kx - p] += wv * grow[ox];
                    }
                }
            }
        }
    }
    if let Some(dk) = dk {
        for ky in 0..g.kh {
            let ys = valid_range(ky, s, p, g.h, g.oh);
            for kx in 0..g.kw {
                let xs = valid_range(kx, s, p, g.w, g.ow);
                let mut acc = T::zero();
                for oy in ys.clone() {
                    let xrow = &x[(oy * s + ky - p) * g.w..];
                    let grow = &dy[oy * g.ow..(oy + 1) * g.ow];
                    for ox in xs.clone() {
                        acc += grow[ox] * xrow[ox * s + kx - p];
                    }
                }
                dk[ky * g.kw + kx] += acc;
            }
        }
    }
}

/// Grouped 2-d cross-correlation. Each (sample, group) pair is computed by
/// the same routine on the same slice extents however batch and groups are
/// arranged, so the fused and per-sample layouts agree bitwise.
pub fn conv2d<T: Element>(x: &Tensor<T>, w: &Tensor<T>, spec: Conv2dSpec) -> Result<Tensor<T>> {
    conv2d_slices(x.data(), x.shape(), w.data(), w.shape(), spec)
}

/// [`conv2d`] on raw row-major buffers, so callers can reinterpret a batch
/// as channels without copying.
pub fn conv2d_slices<T: Element>(
    xd: &[T],
    x_shape: &[usize],
    wd: &[T],
    w_shape: &[usize],
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let g = conv_geom(x_shape, w_shape, spec)?;
    if xd.len() != numel_of(x_shape) || wd.len() != numel_of(w_shape) {
        return Err(Error::shape(format!(
            "conv2d buffers of {} and {} elements do not match shapes {x_shape:?} and {w_shape:?}",
            xd.len(),
            wd.len()
        )));
    }
    let (ohw, kk, hw) = (g.ohw(), g.kk(), g.h * g.w);
    let mut out = vec![T::zero(); g.batch * g.cout * ohw];
    let mut cols = if g.single_channel() || g.pointwise(&spec) {
        Vec::new()
    } else {
        vec![T::zero(); g.cin_g * kk * ohw]
    };
    let mut scratch = Vec::new();
    for b in 0..g.batch {
        for grp in 0..g.groups() {
            let xg = &xd[(b * g.cin + grp * g.cin_g) * hw..][..g.cin_g * hw];
            let wg = &wd[grp * g.cout_g * g.cin_g * kk..][..g.cout_g * g.cin_g * kk];
            let og = &mut out[(b * g.cout + grp * g.cout_g) * ohw..][..g.cout_g * ohw];
            if g.single_channel() {
                conv_plane(xg, wg, &g, &spec, &mut scratch, og);
            } else if g.pointwise(&spec) {
                gemm(MatRef::new(wg, g.cout_g, g.cin_g), MatRef::new(xg, g.cin_g, hw), og, false);
            } else {
                im2col(xg, &g, &spec, &mut cols);
                gemm(MatRef::new(wg, g.cout_g, g.cin_g * kk), MatRef::new(&cols, g.cin_g * kk, ohw), og, false);
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.batch, g.cout, g.oh, g.ow], out))
}

/// Gradients of [`conv2d`] w.r.t. input and kernel.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    spec: Conv2dSpec,
    need_dx: bool,
    need_dw: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let g = conv_geom(x.shape(), w.shape(), spec)?;
    if dy.shape() != [g.batch, g.cout, g.oh, g.ow] {
        return Err(Error::shape(format!(
            "conv2d upstream gradient {:?} does not match output",
            dy.shape()
        )));
    }
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    let (ohw, kk, hw) = (g.ohw(), g.kk(), g.h * g.w);
    let mut dx = need_dx.then(|| vec![T::zero(); xd.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); wd.len()]);
    let direct = g.single_channel();
    let pointwise = g.pointwise(&spec);
    let mut cols = if direct || pointwise {
        Vec::new()
    } else {
        vec![T::zero(); g.cin_g * kk * ohw]
    };
    let mut dcols = cols.clone();
    let wlen = g.cout_g * g.cin_g * kk;
    for b in 0..g.batch {
        for grp in 0..g.groups() {
            let xoff = (b * g.cin + grp * g.cin_g) * hw;
            let xg = &xd[xoff..][..g.cin_g * hw];
            let wg = &wd[grp * wlen..][..wlen];
            let dyg = &dyd[(b * g.cout + grp * g.cout_g) * ohw..][..g.cout_g * ohw];
            let dxg = dx.as_mut().map(|d| &mut d[xoff..xoff + g.cin_g * hw]);
            let dwg = dw.as_mut().map(|d| &mut d[grp * wlen..(grp + 1) * wlen]);
            if direct {
                conv_plane_backward(xg, wg, dyg, &g, &spec, dxg, dwg);
                continue;
            }
            let k = g.cin_g * kk;
            let wm = MatRef::new(wg, g.cout_g, k);
            let dym = MatRef::new(dyg, g.cout_g, ohw);
            if pointwise {
                if let Some(dwg) = dwg {
                    gemm(dym, MatRef::new(xg, k, hw).t(), dwg, true);
                }
                if let Some(dxg) = dxg {
                    gemm(wm.t(), dym, dxg, true);
                }
                continue;
            }
            if let Some(dwg) = dwg {
                im2col(xg, &g, &spec, &mut cols);
                gemm(dym, MatRef::new(&cols, k, ohw).t(), dwg, true);
            }
            if let Some(dxg) = dxg {
                gemm(wm.t(), dym, &mut dcols, false);
                col2im(&dcols, &g, &spec, dxg);
            }
        }
    }
    Ok((
        dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        dw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
    ))
}

/// Split `shape` into (batch, m, k) for batched matmul; 2-d means batch 1.
pub(crate) fn as_batched(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [m, k] => Ok((1, m, k)),
        [g, m, k] => Ok((g, m, k)),
        _ => Err(Error::shape(format!(
            "matmul operand must be 2-d or 3-d, got {shape:?}"
        ))),
    }
}

/// Batched matmul: `a[g]·b[g]` or `a[g]·b[g]ᵀ`.
pub fn bmm<T: Element>(a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
    let (ga, m, k) = as_batched(a.shape())?;
    let (gb, r, c) = as_batched(b.shape())?;
    let (kb, n) = if trans_b { (c, r) } else { (r, c) };
    if ga != gb || k != kb || a.shape().len() != b.shape().len() {
        return Err(Error::shape(format!(
            "matmul {:?} × {:?}{}: inner extents differ",
            a.shape(),
            b.shape(),
            if trans_b { "ᵀ" } else { "" }
        )));
    }
    let mut out = vec![T::zero(); ga * m * n];
    for i in 0..ga {
        let am = MatRef::new(&a.data()[i * m * k..(i + 1) * m * k], m, k);
        let bm = MatRef::new(&b.data()[i * r * c..(i + 1) * r * c], r, c);
        let bm = if trans_b { bm.t() } else { bm };
        gemm(am, bm, &mut out[i * m * n..(i + 1) * m * n], false);
    }
    let shape = if a.shape().len() == 2 {
        vec![m, n]
    } else {
        vec![ga, m, n]
    };
    Ok(Tensor::from_parts(shape, out))
}

/// Gradients of [`bmm`]: `(da, db)`.
pub fn bmm_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    trans_b: bool,
    dc: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (g, m, k) = as_batched(a.shape()).expect("validated in forward");
    let (_, r, c) = as_batched(b.shape()).expect("validated in forward");
    let n = if trans_b { r } else { c };
    let mut da = vec![T::zero(); a.numel()];
    let mut db = vec![T::zero(); b.numel()];
    for i in 0..g {
        let am = MatRef::new(&a.data()[i * m * k..(i + 1) * m * k], m, k);
        let bm = MatRef::new(&b.data()[i * r * c..(i + 1) * r * c], r, c);
        let dcm = MatRef::new(&dc.data()[i * m * n..(i + 1) * m * n], m, n);
        let da_i = &mut da[i * m * k..(i + 1) * m * k];
        let db_i = &mut db[i * r * c..(i + 1) * r * c];
        if trans_b {
            // c = a·bsᵀ with bs [n,k]
            gemm(dcm, bm, da_i, false);
            gemm(dcm.t(), am, db_i, false);
        } else {
            gemm(dcm, bm.t(), da_i, false);
            gemm(am.t(), dcm, db_i, false);
        }
    }
    (
        Tensor::from_parts(a.shape().to_vec(), da),
        Tensor::from_parts(b.shape().to_vec(), db),
    )
}

/// Layer normalization over the last axis. Returns output plus the per-row
/// mean and reciprocal standard deviation for the backward pass.
pub fn layer_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| Error::shape("layer_norm on a scalar"))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(format!(
            "layer_norm over {:?} with gamma {:?} and beta {:?}",
            x.shape(),
            gamma.shape(),
            beta.shape()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let rows = x.numel() / d;
    let inv_d = T::from_f64(1.0 / d as f64);
    let eps = T::from_f64(eps);
    let (gd, bd) = (gamma.data(), beta.data());
    let mut out = Vec::with_capacity(x.numel());
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for row in x.data().chunks_exact(d) {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = (var + eps).sqrt().recip();
        out.extend(
            row.iter()
                .enumerate()
                .map(|(j, &v)| (v - mean) * rstd * gd[j] + bd[j]),
        );
        means.push(mean);
        rstds.push(rstd);
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), means, rstds))
}

pub fn layer_norm_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    means: &[T],
    rstds: &[T],
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = gamma.numel();
    let inv_d = T::from_f64(1.0 / d as f64);
    let gd = gamma.data();
    let mut dx = Vec::with_capacity(x.numel());
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let mut xhat = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for (r, (row, dyr)) in x
        .data()
        .chunks_exact(d)
        .zip(dy.data().chunks_exact(d))
        .enumerate()
    {
        let (mean, rstd) = (means[r], rstds[r]);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..d {
            xhat[j] = (row[j] - mean) * rstd;
            dxhat[j] = dyr[j] * gd[j];
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * xhat[j];
            dgamma[j] += dyr[j] * xhat[j];
            dbeta[j] += dyr[j];
        }
        let mean_dxhat = sum_dxhat * inv_d;
        let mean_dxhat_xhat = sum_dxhat_xhat * inv_d;
        dx.extend((0..d).map(|j| rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat)));
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(vec![d], dgamma),
        Tensor::from_parts(vec![d], dbeta),
    )
}

/// Softmax over the last axis, max-subtracted.
pub fn softmax<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| Error::shape("softmax on a scalar"))?;
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(d) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        let inv = total.recip();
        out[start..].iter_mut().for_each(|v| *v = *v * inv);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn softmax_backward<T: Element>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let d = *y.shape().last().expect("validated in forward");
    let mut dx = Vec::with_capacity(y.numel());
    for (yr, gr) in y.data().chunks_exact(d).zip(dy.data().chunks_exact(d)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        dx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
    }
    Tensor::from_parts(y.shape().to_vec(), dx)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Element>(v: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * v * (T::one() + (c * (v + a * v * v * v)).tanh())
}

pub fn gelu_grad<T: Element>(v: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (v + a * v * v * v);
    let th = u.tanh();
    let du = c * (T::one() + three * a * v * v);
    half * (T::one() + th) + half * v * (T::one() - th * th) * du
}

pub fn silu<T: Element>(v: T) -> T {
    v / (T::one() + (-v).exp())
}

pub fn silu_grad<T: Element>(v: T) -> T {
    let s = (T::one() + (-v).exp()).recip();
    s * (T::one() + v * (T::one() - s))
}

/// General axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Element>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rank = x.shape().len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::shape(format!(
            "permutation {perm:?} invalid for shape {:?}",
            x.shape()
        )));
    }
    let in_shape = x.shape();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let xd = x.data();
    for _ in 0..n {
        out.push(xd[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// (outer, axis extent, inner) decomposition around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel_of(&shape[..axis]);
    let inner = numel_of(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, v).unwrap()
    }

    /// Direct definition: y[b,o,i,j] = Σ x[b, grp·cin_g + c, i·s + u − p, j·s + v − p] · w[o,c,u,v].
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, spec: Conv2dSpec) -> Tensor<f64> {
        let g = conv_geom(x.shape(), w.shape(), spec).unwrap();
        let mut out = vec![0.0; g.batch * g.cout * g.ohw()];
        for b in 0..g.batch {
            for oc in 0..g.cout {
                let grp = oc / g.cout_g;
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut acc = 0.0;
                        for c in 0..g.cin_g {
                            for u in 0..g.kh {
                                for v in 0..g.kw {
                                    let iy = (oy * spec.stride + u) as isize - spec.padding as isize;
                                    let ix = (ox * spec.stride + v) as isize - spec.padding as isize;
                                    if iy < 0 || ix < 0 || iy as usize >= g.h || ix as usize >= g.w {
                                        continue;
                                    }
                                    let xi = ((b * g.cin + grp * g.cin_g + c) * g.h + iy as usize) * g.w + ix as usize;
                                    acc += x.data()[xi] * w.data()[((oc * g.cin_g + c) * g.kh + u) * g.kw + v];
                                }
                            }
                        }
                        out[((b * g.cout + oc) * g.oh + oy) * g.ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::from_parts(vec![g.batch, g.cout, g.oh, g.ow], out)
    }

    fn conv_case() -> impl Strategy<Value = (Vec<usize>, Vec<usize>, Conv2dSpec, u64)> {
        (1usize..3, 1usize..4, 1usize..3, 1usize..3, 1usize..4, 0usize..2, 1usize..3, 3usize..7, any::<u64>())
            .prop_filter_map("kernel fits", |(b, groups, cin_g, cout_g, k, pad, stride, size, seed)| {
                let padded = size + 2 * pad;
                if padded < k || (padded - k) % stride != 0 {
                    return None;
                }
                Some((
                    vec![b, groups * cin_g, size, size],
                    vec![groups * cout_g, cin_g, k, k],
                    Conv2dSpec::new(stride, pad, groups),
                    seed,
                ))
            })
    }

    proptest! {
        #[test]
        fn conv_matches_definition((xs, ws, spec, seed) in conv_case()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::randn(&xs, 1.0, &mut rng);
            let w = Tensor::<f64>::randn(&ws, 1.0, &mut rng);
            let y = conv2d(&x, &w, spec).unwrap();
            prop_assert!(y.max_abs_diff(&naive_conv(&x, &w, spec)).unwrap() < 1e-12);
        }

        #[test]
        fn conv_backward_is_adjoint((xs, ws, spec, seed) in conv_case()) {
            // <dy, conv(x, w)> is bilinear, so its gradients are conv applied
            // to unit perturbations.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::randn(&xs, 1.0, &mut rng);
            let w = Tensor::<f64>::randn(&ws, 1.0, &mut rng);
            let y = naive_conv(&x, &w, spec);
            let dy = Tensor::<f64>::randn(y.shape(), 1.0, &mut rng);
            let (dx, dw) = conv2d_backward(&x, &w, &dy, spec, true, true).unwrap();
            let (dx, dw) = (dx.unwrap(), dw.unwrap());
            let dot = |a: &Tensor<f64>| a.data().iter().zip(dy.data()).map(|(p, q)| p * q).sum::<f64>();
            for i in 0..x.numel() {
                let mut e = Tensor::<f64>::zeros(&xs);
                e.data_mut()[i] = 1.0;
                prop_assert!((dot(&naive_conv(&e, &w, spec)) - dx.data()[i]).abs() < 1e-10);
            }
            for i in 0..w.numel() {
                let mut e = Tensor::<f64>::zeros(&ws);
                e.data_mut()[i] = 1.0;
                prop_assert!((dot(&naive_conv(&x, &e, spec)) - dw.data()[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn conv_sum_of_ones() {
        let x = Tensor::<f32>::ones(&[1, 1, 3, 3]);
        let w = Tensor::<f32>::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &w, Conv2dSpec::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::randn(&[2, 1, 5, 4], 1.0, &mut rng);
        let w = Tensor::<f32>::ones(&[1, 1, 1, 1]);
        let y = conv2d(&x, &w, Conv2dSpec::default()).unwrap();
        assert!(y.bitwise_eq(&x));
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let x = Tensor::<f32>::ones(&[1, 3, 4, 4]);
        let w = Tensor::<f32>::ones(&[4, 1, 3, 3]);
        assert!(conv2d(&x, &w, Conv2dSpec::new(1, 1, 3)).is_err());
        let w = Tensor::<f32>::ones(&[3, 1, 3, 3]);
        assert!(conv2d(&x, &w, Conv2dSpec::new(1, 1, 3)).is_ok());
        // (4 + 0 - 3) / 2 is not integral
        let w = Tensor::<f32>::ones(&[3, 3, 3, 3]);
        assert!(conv2d(&x, &w, Conv2dSpec::new(2, 0, 1)).is_err());
        let w = Tensor::<f32>::ones(&[3, 3, 5, 5]);
        assert!(conv2d(&x, &w, Conv2dSpec::default()).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let g = t(&[2], &[1.0, 1.0]);
        let b = t(&[2], &[0.0, 0.0]);
        let (y, _, _) = layer_norm(&t(&[1, 2], &[1.0, 3.0]), &g, &b, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
        let (y, _, _) = layer_norm(&t(&[1, 2], &[5.0, 5.0]), &g, &b, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
        assert!(layer_norm(&t(&[1, 2], &[5.0, 5.0]), &g, &b, 0.0).is_err());
    }

    #[test]
    fn softmax_examples() {
        let y = softmax(&t(&[4], &[0.7; 4])).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let y = softmax(&t(&[2], &[0.0, 3f64.ln()])).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15 && (y.data()[1] - 0.75).abs() < 1e-15);
        let x = t(&[3], &[0.1, -2.0, 4.0]);
        let shifted = x.map(|v| v + 100.0);
        let d = softmax(&x).unwrap().max_abs_diff(&softmax(&shifted).unwrap()).unwrap();
        assert!(d <= 1e-7);
    }

    #[test]
    fn activation_derivatives_match_differences() {
        for &v in &[-3.0f64, -0.5, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let num = (gelu(v + h) - gelu(v - h)) / (2.0 * h);
            assert!((num - gelu_grad(v)).abs() < 1e-8);
            let num = (silu(v + h) - silu(v - h)) / (2.0 * h);
            assert!((num - silu_grad(v)).abs() < 1e-8);
        }
    }

    #[test]
    fn permute_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn(&[2, 3, 4, 5], 1.0, &mut rng);
        let perm = [2, 0, 3, 1];
        let y = permute(&x, &perm).unwrap();
        assert_eq!(y.shape(), &[4, 2, 5, 3]);
        // y[c,a,d,b] == x[a,b,c,d]
        assert_eq!(y.data()[((1 * 2 + 1) * 5 + 4) * 3 + 2], x.data()[((1 * 3 + 2) * 4 + 1) * 5 + 4]);
        let back = permute(&y, &inverse_perm(&perm)).unwrap();
        assert!(back.bitwise_eq(&x));
        assert!(permute(&x, &[0, 0, 1, 2]).is_err());
    }
}
