//! Raw forward/backward kernels on dense buffers. The autodiff tape in
//! [`crate::graph`] wraps these; nothing here records history.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Layout, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvSpec {
    /// Stride 1, "same" padding for an odd kernel.
    pub fn same(kernel: usize) -> Self {
        Self {
            padding: kernel / 2,
            ..Self::default()
        }
    }

    pub fn dilated(kernel: usize, dilation: usize) -> Self {
        Self {
            padding: dilation * (kernel / 2),
            dilation,
            ..Self::default()
        }
    }

    pub fn out_size(&self, input: usize, kernel: usize) -> Result<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return Err(Error::dim(
                "conv2d",
                "spatial",
                format!("padded extent {padded} smaller than dilated kernel {span}"),
            ));
        }
        Ok((padded - span) / self.stride + 1)
    }
}

pub(crate) struct ConvGeom {
    pub b: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub ho: usize,
    pub wo: usize,
    pub cin_g: usize,
    pub cout_g: usize,
}

pub(crate) fn conv_geom<S: Scalar>(
    x: &Tensor<S>,
    wt: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    spec: ConvSpec,
) -> Result<ConvGeom> {
    let (b, cin, h, w) = x.dims4()?;
    let (cout, wc, kh, kw) = wt.dims4()?;
    if spec.groups == 0 || spec.stride == 0 || spec.dilation == 0 {
        return Err(Error::contract("conv2d: groups, stride and dilation must be positive"));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::dim(
            "conv2d",
            "kernel",
            format!("kernel must be square and odd, got {kh}x{kw}"),
        ));
    }
    if cin % spec.groups != 0 || cout % spec.groups != 0 {
        return Err(Error::dim(
            "conv2d",
            "channel",
            format!("channels {cin}->{cout} not divisible by groups {}", spec.groups),
        ));
    }
    if wc != cin / spec.groups {
        return Err(Error::dim(
            "conv2d",
            "channel",
            format!(
                "kernel expects {} input channels per group, input has {}",
                wc,
                cin / spec.groups
            ),
        ));
    }
    if let Some(bias) = bias {
        if bias.numel() != cout {
            return Err(Error::dim(
                "conv2d",
                "bias",
                format!("bias has {} entries for {cout} outputs", bias.numel()),
            ));
        }
    }
    let ho = spec.out_size(h, kh)?;
    let wo = spec.out_size(w, kw)?;
    Ok(ConvGeom {
        b,
        cin,
        h,
        w,
        cout,
        k: kh,
        ho,
        wo,
        cin_g: wc,
        cout_g: cout / spec.groups,
    })
}

fn is_pointwise(g: &ConvGeom, spec: ConvSpec) -> bool {
    g.k == 1 && spec.stride == 1 && spec.padding == 0
}

fn is_depthwise(g: &ConvGeom, spec: ConvSpec) -> bool {
    spec.groups == g.cin && g.cin == g.cout
}

/// Unfolds `channels` planes of `src` (each `h x w`) into a
/// `(channels*k*k) x (ho*wo)` column matrix.
fn im2col<S: Scalar>(src: &[S], channels: usize, g: &ConvGeom, spec: ConvSpec, col: &mut [S]) {
    let p = g.ho * g.wo;
    let (s, d, pad) = (spec.stride as isize, spec.dilation as isize, spec.padding as isize);
    for c in 0..channels {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let out = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = oy as isize * s + ky as isize * d - pad;
                    let dst = &mut out[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(S::zero());
                        continue;
                    }
                    let line = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize * d - pad;
                        *v = if ix < 0 || ix >= g.w as isize {
                            S::zero()
                        } else {
                            line[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<S: Scalar>(col: &[S], channels: usize, g: &ConvGeom, spec: ConvSpec, dst: &mut [S]) {
    let p = g.ho * g.wo;
    let (s, d, pad) = (spec.stride as isize, spec.dilation as isize, spec.padding as isize);
    for c in 0..channels {
        let plane = &mut dst[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = oy as isize * s + ky as isize * d - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = ox as isize * s + kx as isize * d - pad;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_forward<S: Scalar>(x: &[S], wt: &[S], g: &ConvGeom, spec: ConvSpec, out: &mut [S]) {
    let (s, d, pad) = (spec.stride as isize, spec.dilation as isize, spec.padding as isize);
    let kk = g.k * g.k;
    for bc in 0..g.b * g.cin {
        let c = bc % g.cin;
        let plane = &x[bc * g.h * g.w..(bc + 1) * g.h * g.w];
        let o = &mut out[bc * g.ho * g.wo..(bc + 1) * g.ho * g.wo];
        let kern = &wt[c * kk..(c + 1) * kk];
        for ky in 0..g.k {
            for oy in 0..g.ho {
                let iy = oy as isize * s + ky as isize * d - pad;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let line = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                let orow = &mut o[oy * g.wo..(oy + 1) * g.wo];
                for kx in 0..g.k {
                    let wv = kern[ky * g.k + kx];
                    for (ox, ov) in orow.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize * d - pad;
                        if ix >= 0 && ix < g.w as isize {
                            *ov += wv * line[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<S: Scalar>(
    x: &[S],
    wt: &[S],
    gy: &[S],
    g: &ConvGeom,
    spec: ConvSpec,
    mut dx: Option<&mut [S]>,
    dw: &mut [S],
) {
    let (s, d, pad) = (spec.stride as isize, spec.dilation as isize, spec.padding as isize);
    let kk = g.k * g.k;
    for bc in 0..g.b * g.cin {
        let c = bc % g.cin;
        let plane = &x[bc * g.h * g.w..(bc + 1) * g.h * g.w];
        let go = &gy[bc * g.ho * g.wo..(bc + 1) * g.ho * g.wo];
        let kern = &wt[c * kk..(c + 1) * kk];
        for ky in 0..g.k {
            for oy in 0..g.ho {
                let iy = oy as isize * s + ky as isize * d - pad;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let row0 = iy as usize * g.w;
                let grow = &go[oy * g.wo..(oy + 1) * g.wo];
                for kx in 0..g.k {
                    let mut acc = S::zero();
                    let wv = kern[ky * g.k + kx];
                    for (ox, &gv) in grow.iter().enumerate() {
                        let ix = ox as isize * s + kx as isize * d - pad;
                        if ix >= 0 && ix < g.w as isize {
                            acc += gv * plane[row0 + ix as usize];
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[bc * g.h * g.w + row0 + ix as usize] += wv * gv;
                            }
                        }
                    }
                    dw[c * kk + ky * g.k + kx] += acc;
                }
            }
        }
    }
}

pub fn conv2d_forward<S: Scalar>(
    x: &Tensor<S>,
    wt: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    spec: ConvSpec,
) -> Result<Tensor<S>> {
    let g = conv_geom(x, wt, bias, spec)?;
    let p = g.ho * g.wo;
    let mut out = vec![S::zero(); g.b * g.cout * p];
    if is_depthwise(&g, spec) {
        depthwise_forward(x.data(), wt.data(), &g, spec, &mut out);
    } else {
        let kdim = g.cin_g * g.k * g.k;
        let mut col = if is_pointwise(&g, spec) {
            Vec::new()
        } else {
            vec![S::zero(); kdim * p]
        };
        for b in 0..g.b {
            for grp in 0..spec.groups {
                let xs = &x.data()[(b * g.cin + grp * g.cin_g) * g.h * g.w..][..g.cin_g * g.h * g.w];
                let cmat: &[S] = if is_pointwise(&g, spec) {
                    xs
                } else {
                    im2col(xs, g.cin_g, &g, spec, &mut col);
                    &col
                };
                let wg = &wt.data()[grp * g.cout_g * kdim..][..g.cout_g * kdim];
                let o = &mut out[(b * g.cout + grp * g.cout_g) * p..][..g.cout_g * p];
                gemm(g.cout_g, kdim, p, S::one(), wg, Layout::N, cmat, Layout::N, S::zero(), o);
            }
        }
    }
    if let Some(bias) = bias {
        for b in 0..g.b {
            for (c, &bv) in bias.data().iter().enumerate() {
                for v in &mut out[(b * g.cout + c) * p..(b * g.cout + c + 1) * p] {
                    *v += bv;
                }
            }
        }
    }
    Ok(Tensor::raw(vec![g.b, g.cout, g.ho, g.wo], out))
}

pub struct ConvGrads<S> {
    pub dx: Option<Tensor<S>>,
    pub dw: Tensor<S>,
    pub db: Option<Tensor<S>>,
}

pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    wt: &Tensor<S>,
    has_bias: bool,
    gy: &Tensor<S>,
    spec: ConvSpec,
    need_dx: bool,
) -> Result<ConvGrads<S>> {
    let g = conv_geom(x, wt, None, spec)?;
    let p = g.ho * g.wo;
    let kdim = g.cin_g * g.k * g.k;
    let mut dw = vec![S::zero(); wt.numel()];
    let mut dx = need_dx.then(|| vec![S::zero(); x.numel()]);
    if is_depthwise(&g, spec) {
        depthwise_backward(x.data(), wt.data(), gy.data(), &g, spec, dx.as_deref_mut(), &mut dw);
    } else {
        let pointwise = is_pointwise(&g, spec);
        let mut col = if pointwise { Vec::new() } else { vec![S::zero(); kdim * p] };
        let mut dcol = if pointwise || !need_dx {
            Vec::new()
        } else {
            vec![S::zero(); kdim * p]
        };
        for b in 0..g.b {
            for grp in 0..spec.groups {
                let xoff = (b * g.cin + grp * g.cin_g) * g.h * g.w;
                let xs = &x.data()[xoff..][..g.cin_g * g.h * g.w];
                let cmat: &[S] = if pointwise {
                    xs
                } else {
                    im2col(xs, g.cin_g, &g, spec, &mut col);
                    &col
                };
                let gys = &gy.data()[(b * g.cout + grp * g.cout_g) * p..][..g.cout_g * p];
                let dwg = &mut dw[grp * g.cout_g * kdim..][..g.cout_g * kdim];
                gemm(g.cout_g, p, kdim, S::one(), gys, Layout::N, cmat, Layout::T, S::one(), dwg);
                if let Some(dx) = dx.as_mut() {
                    let wg = &wt.data()[grp * g.cout_g * kdim..][..g.cout_g * kdim];
                    let dxs = &mut dx[xoff..][..g.cin_g * g.h * g.w];
                    if pointwise {
                        gemm(kdim, g.cout_g, p, S::one(), wg, Layout::T, gys, Layout::N, S::one(), dxs);
                    } else {
                        gemm(kdim, g.cout_g, p, S::one(), wg, Layout::T, gys, Layout::N, S::zero(), &mut dcol);
                        col2im(&dcol, g.cin_g, &g, spec, dxs);
                    }
                }
            }
        }
    }
    let db = has_bias.then(|| {
        let mut db = vec![S::zero(); g.cout];
        for b in 0..g.b {
            for (c, acc) in db.iter_mut().enumerate() {
                *acc += gy.data()[(b * g.cout + c) * p..(b * g.cout + c + 1) * p]
                    .iter()
                    .copied()
                    .sum::<S>();
            }
        }
        Tensor::raw(vec![g.cout], db)
    });
    Ok(ConvGrads {
        dx: dx.map(|d| Tensor::raw(x.shape().to_vec(), d)),
        dw: Tensor::raw(wt.shape().to_vec(), dw),
        db,
    })
}

/// Interpolation taps along one axis, align-corners-false convention.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn resize_forward<S: Scalar>(x: &Tensor<S>, th: usize, tw: usize) -> Result<Tensor<S>> {
    let (b, c, h, w) = x.dims4()?;
    if th == 0 || tw == 0 {
        return Err(Error::contract("resize_bilinear: target extents must be >= 1"));
    }
    if th == h && tw == w {
        return Ok(x.clone());
    }
    let ty = bilinear_taps(h, th);
    let tx = bilinear_taps(w, tw);
    let mut out = vec![S::zero(); b * c * th * tw];
    for bc in 0..b * c {
        let src = &x.data()[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out[bc * th * tw..(bc + 1) * th * tw];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = S::of(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = S::of(lx);
                let top = src[y0 * w + x0] * (S::one() - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (S::one() - lx) + src[y1 * w + x1] * lx;
                dst[oy * tw + ox] = top * (S::one() - ly) + bot * ly;
            }
        }
    }
    Ok(Tensor::raw(vec![b, c, th, tw], out))
}

pub fn resize_backward<S: Scalar>(gy: &Tensor<S>, h: usize, w: usize) -> Result<Tensor<S>> {
    let (b, c, th, tw) = gy.dims4()?;
    if th == h && tw == w {
        return Ok(gy.clone());
    }
    let ty = bilinear_taps(h, th);
    let tx = bilinear_taps(w, tw);
    let mut dx = vec![S::zero(); b * c * h * w];
    for bc in 0..b * c {
        let g = &gy.data()[bc * th * tw..(bc + 1) * th * tw];
        let dst = &mut dx[bc * h * w..(bc + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = S::of(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = S::of(lx);
                let gv = g[oy * tw + ox];
                dst[y0 * w + x0] += gv * (S::one() - ly) * (S::one() - lx);
                dst[y0 * w + x1] += gv * (S::one() - ly) * lx;
                dst[y1 * w + x0] += gv * ly * (S::one() - lx);
                dst[y1 * w + x1] += gv * ly * lx;
            }
        }
    }
    Ok(Tensor::raw(vec![b, c, h, w], dx))
}

/// Left-pads a shape with ones to rank 4.
fn pad4(shape: &[usize]) -> Result<[usize; 4]> {
    if shape.len() > 4 {
        return Err(Error::dim("broadcast", "rank", format!("rank {} > 4", shape.len())));
    }
    let mut out = [1; 4];
    out[4 - shape.len()..].copy_from_slice(shape);
    Ok(out)
}

fn strides4(shape: [usize; 4], out: [usize; 4]) -> [usize; 4] {
    let mut s = [0; 4];
    let mut acc = 1;
    for i in (0..4).rev() {
        s[i] = if shape[i] == 1 && out[i] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    s
}

pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let (pa, pb) = (pad4(a)?, pad4(b)?);
    let mut out = Vec::with_capacity(rank);
    for i in 4 - rank..4 {
        let (x, y) = (pa[i], pb[i]);
        if x != y && x != 1 && y != 1 {
            return Err(Error::dim(op, format!("{}", i + rank - 4), format!("{a:?} vs {b:?}")));
        }
        out.push(x.max(y));
    }
    Ok(out)
}

/// Elementwise binary map with size-1 broadcasting on either side.
pub fn broadcast_binary<S: Scalar>(
    op: &'static str,
    a: &Tensor<S>,
    b: &Tensor<S>,
    f: impl Fn(S, S) -> S,
) -> Result<Tensor<S>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
    let o4 = pad4(&out_shape)?;
    let sa = strides4(pad4(a.shape())?, o4);
    let sb = strides4(pad4(b.shape())?, o4);
    let mut out = Vec::with_capacity(o4.iter().product());
    let (ad, bd) = (a.data(), b.data());
    for i0 in 0..o4[0] {
        for i1 in 0..o4[1] {
            for i2 in 0..o4[2] {
                let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..o4[3] {
                    out.push(f(ad[ba + i3 * sa[3]], bd[bb + i3 * sb[3]]));
                }
            }
        }
    }
    Ok(Tensor::raw(out_shape, out))
}

/// Sums a broadcast gradient back down to `shape`.
pub fn reduce_to<S: Scalar>(g: &Tensor<S>, shape: &[usize]) -> Tensor<S> {
    if g.shape() == shape {
        return g.clone();
    }
    let o4 = pad4(g.shape()).expect("rank checked at forward");
    let st = strides4(pad4(shape).expect("rank checked at forward"), o4);
    let mut out = vec![S::zero(); shape.iter().product()];
    let mut it = g.data().iter();
    for i0 in 0..o4[0] {
        for i1 in 0..o4[1] {
            for i2 in 0..o4[2] {
                let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                for i3 in 0..o4[3] {
                    out[base + i3 * st[3]] += *it.next().expect("sized");
                }
            }
        }
    }
    Tensor::raw(shape.to_vec(), out)
}

pub fn permute4<S: Scalar>(x: &Tensor<S>, axes: [usize; 4]) -> Result<Tensor<S>> {
    let src = pad4(x.shape())?;
    if x.rank() != 4 {
        return Err(Error::dim("permute", "rank", format!("{:?}", x.shape())));
    }
    let mut seen = [false; 4];
    for &a in &axes {
        if a >= 4 || seen[a] {
            return Err(Error::contract(format!("permute: invalid axes {axes:?}")));
        }
        seen[a] = true;
    }
    let mut src_strides = [0; 4];
    let mut acc = 1;
    for i in (0..4).rev() {
        src_strides[i] = acc;
        acc *= src[i];
    }
    let dims = axes.map(|a| src[a]);
    let st = axes.map(|a| src_strides[a]);
    let mut out = Vec::with_capacity(x.numel());
    for i0 in 0..dims[0] {
        for i1 in 0..dims[1] {
            for i2 in 0..dims[2] {
                let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                for i3 in 0..dims[3] {
                    out.push(x.data()[base + i3 * st[3]]);
                }
            }
        }
    }
    Ok(Tensor::raw(dims.to_vec(), out))
}

pub fn inverse_axes(axes: [usize; 4]) -> [usize; 4] {
    let mut inv = [0; 4];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Per-channel statistics over batch and spatial positions of a BCHW map.
pub fn channel_moments<S: Scalar>(x: &Tensor<S>) -> Result<(Vec<S>, Vec<S>)> {
    let (b, c, h, w) = x.dims4()?;
    let hw = h * w;
    let n = S::of((b * hw) as f64);
    let mut mean = vec![S::zero(); c];
    let mut var = vec![S::zero(); c];
    for ch in 0..c {
        let mut s = S::zero();
        for bi in 0..b {
            s += x.data()[(bi * c + ch) * hw..][..hw].iter().copied().sum::<S>();
        }
        let m = s / n;
        let mut v = S::zero();
        for bi in 0..b {
            for &xv in &x.data()[(bi * c + ch) * hw..][..hw] {
                v += (xv - m) * (xv - m);
            }
        }
        mean[ch] = m;
        var[ch] = v / n;
    }
    Ok((mean, var))
}

pub fn cross_entropy_forward<S: Scalar>(
    logits: &Tensor<S>,
    targets: &[usize],
) -> Result<(S, Tensor<S>)> {
    let (b, k, h, w) = logits.dims4()?;
    let hw = h * w;
    if k < 2 {
        return Err(Error::contract("cross_entropy: need at least two classes"));
    }
    if targets.len() != b * hw {
        return Err(Error::dim(
            "cross_entropy",
            "spatial",
            format!("{} targets for {} pixels", targets.len(), b * hw),
        ));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::contract(format!(
            "cross_entropy: target id {t} out of range for {k} classes"
        )));
    }
    let mut probs = vec![S::zero(); logits.numel()];
    let mut total = 0.0f64;
    let ld = logits.data();
    for bi in 0..b {
        for p in 0..hw {
            let idx = |c: usize| (bi * k + c) * hw + p;
            let mx = (0..k).map(|c| ld[idx(c)]).fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for c in 0..k {
                let e = (ld[idx(c)] - mx).exp();
                probs[idx(c)] = e;
                z += e;
            }
            for c in 0..k {
                probs[idx(c)] = probs[idx(c)] / z;
            }
            let t = targets[bi * hw + p];
            total += (z.ln() - (ld[idx(t)] - mx)).f64();
        }
    }
    Ok((
        S::of(total / (b * hw) as f64),
        Tensor::raw(logits.shape().to_vec(), probs),
    ))
}
