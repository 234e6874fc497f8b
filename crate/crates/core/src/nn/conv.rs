//! Convolutions in `N,C,H,W` layout.
//!
//! All four variants share one weight layout, `[S, S, X/G, Y]` (row index
//! `(i·S + j)·(X/G) + m`, column `n`). Depthwise weights are therefore
//! stored as `[S, S, X]` and pointwise weights as `[X, Y]` without any
//! reshuffling. Output channel `n` belongs to group `n / (Y/G)` and reads
//! input channels `g·(X/G) .. (g+1)·(X/G)`.
//!
//! Two algorithms are provided: [`ConvAlgo::Direct`] is the nested-loop
//! reference, [`ConvAlgo::Fast`] uses a per-channel kernel for depthwise
//! layers and im2col + GEMM otherwise.

use serde::{Deserialize, Serialize};

use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{bail, Result};
use crate::tensor::{Element, MatMut, MatRef, Tensor};

/// Geometry of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    Standard,
    Depthwise,
    Pointwise,
    Grouped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvAlgo {
    Direct,
    #[default]
    Fast,
}

impl ConvSpec {
    /// Dense `S×S` convolution with "same" padding.
    pub fn standard(kernel: usize, in_channels: usize, out_channels: usize) -> Self {
        Self { kernel, in_channels, out_channels, stride: 1, padding: kernel / 2, groups: 1 }
    }

    pub fn depthwise(kernel: usize, channels: usize) -> Self {
        Self { kernel, in_channels: channels, out_channels: channels, stride: 1, padding: kernel / 2, groups: channels }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self { kernel: 1, in_channels, out_channels, stride: 1, padding: 0, groups: 1 }
    }

    pub fn grouped(kernel: usize, in_channels: usize, out_channels: usize, groups: usize) -> Self {
        Self { kernel, in_channels, out_channels, stride: 1, padding: kernel / 2, groups }
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Shape of the weight tensor for `kind`.
    pub fn weight_shape(&self, kind: ConvKind) -> Vec<usize> {
        let s = self.kernel;
        match kind {
            ConvKind::Depthwise => vec![s, s, self.in_channels],
            ConvKind::Pointwise => vec![self.in_channels, self.out_channels],
            ConvKind::Standard | ConvKind::Grouped => vec![s, s, self.in_per_group(), self.out_channels],
        }
    }

    pub fn weight_len(&self) -> usize {
        self.kernel * self.kernel * self.in_per_group() * self.out_channels
    }

    pub fn output_extent(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            bail!(Shape, "kernel {} does not fit input extent {} with padding {}", self.kernel, input, self.padding);
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    /// Multiply-accumulates for one sample at input extent `d`.
    pub fn macs(&self, d: usize) -> Result<u64> {
        let out = self.output_extent(d)? as u64;
        Ok(out * out * (self.kernel * self.kernel * self.in_per_group() * self.out_channels) as u64)
    }

    pub fn validate(&self, kind: ConvKind) -> Result<()> {
        let Self { kernel, in_channels, out_channels, stride, groups, .. } = *self;
        if kernel == 0 || kernel % 2 == 0 {
            bail!(Shape, "kernel size must be a positive odd integer, got {}", kernel);
        }
        if in_channels == 0 || out_channels == 0 || stride == 0 || groups == 0 {
            bail!(Shape, "channels, stride and groups must be positive: {:?}", self);
        }
        if in_channels % groups != 0 || out_channels % groups != 0 {
            bail!(Shape, "channels {}→{} not divisible by {} groups", in_channels, out_channels, groups);
        }
        match kind {
            ConvKind::Standard if groups != 1 => bail!(Shape, "standard convolution needs groups = 1, got {}", groups),
            ConvKind::Depthwise if groups != in_channels || out_channels != in_channels => {
                bail!(Shape, "depthwise convolution needs G = X = Y, got {:?}", self)
            }
            ConvKind::Pointwise if kernel != 1 || groups != 1 => {
                bail!(Shape, "pointwise convolution needs S = 1 and G = 1, got {:?}", self)
            }
            _ => Ok(()),
        }
    }
}

/// Input geometry `[N, X, H, W]`.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
}

fn geometry(input_shape: &[usize], spec: &ConvSpec) -> Result<Geometry> {
    if input_shape.len() != 4 {
        bail!(Shape, "convolution input must be [N,C,H,W], got {:?}", input_shape);
    }
    if input_shape[1] != spec.in_channels {
        bail!(Shape, "input has {} channels, convolution expects {}", input_shape[1], spec.in_channels);
    }
    Ok(Geometry {
        batch: input_shape[0],
        height: input_shape[2],
        width: input_shape[3],
        out_h: spec.output_extent(input_shape[2])?,
        out_w: spec.output_extent(input_shape[3])?,
    })
}

/// Nested-loop reference: `O[n,oy,ox] = Σ_{i,j,m} K[i,j,m,n]·I[m, oy·s+i−p, ox·s+j−p]`.
pub fn conv2d_direct<T: Element>(input: &Tensor<T>, weight: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    spec.validate(ConvKind::Grouped)?;
    let g = geometry(input.shape(), spec)?;
    check_weight(weight, spec)?;
    let x = input.values();
    let w = weight.values();
    let (s, xg, yg, y) = (spec.kernel, spec.in_per_group(), spec.out_per_group(), spec.out_channels);
    let mut out = vec![T::zero(); g.batch * y * g.out_h * g.out_w];
    let mut idx = 0;
    for b in 0..g.batch {
        for n in 0..y {
            let group = n / yg;
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = T::zero();
                    for i in 0..s {
                        let iy = (oy * spec.stride + i) as isize - spec.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        for j in 0..s {
                            let ix = (ox * spec.stride + j) as isize - spec.padding as isize;
                            if ix < 0 || ix >= g.width as isize {
                                continue;
                            }
                            for m in 0..xg {
                                let c = group * xg + m;
                                let xv = x[((b * spec.in_channels + c) * g.height + iy as usize) * g.width + ix as usize];
                                acc += w[((i * s + j) * xg + m) * y + n] * xv;
                            }
                        }
                    }
                    out[idx] = acc;
                    idx += 1;
                }
            }
        }
    }
    Tensor::from_vec(&[g.batch, y, g.out_h, g.out_w], out)
}

fn check_weight<T: Element>(weight: &Tensor<T>, spec: &ConvSpec) -> Result<()> {
    if weight.numel() != spec.weight_len() {
        bail!(Shape, "weight {:?} has {} elements, {:?} needs {}", weight.shape(), weight.numel(), spec, spec.weight_len());
    }
    Ok(())
}

fn is_depthwise(spec: &ConvSpec) -> bool {
    spec.groups == spec.in_channels && spec.out_channels == spec.in_channels
}

fn is_plain_pointwise(spec: &ConvSpec) -> bool {
    spec.kernel == 1 && spec.stride == 1 && spec.padding == 0
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `tap`.
#[inline]
fn tap_range(tap: usize, pad: usize, stride: usize, input: usize, output: usize) -> (usize, usize) {
    // need 0 <= o·stride + tap − pad < input
    let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
    let hi = if input + pad > tap { ((input + pad - tap - 1) / stride + 1).min(output) } else { 0 };
    (lo, hi.max(lo))
}

fn depthwise_forward<T: Element>(x: &[T], w: &[T], spec: &ConvSpec, g: &Geometry) -> Vec<T> {
    let (s, c_total, st, pad) = (spec.kernel, spec.in_channels, spec.stride, spec.padding);
    let (h, wd, oh, ow) = (g.height, g.width, g.out_h, g.out_w);
    let mut out = vec![T::zero(); g.batch * c_total * oh * ow];
    for b in 0..g.batch {
        for c in 0..c_total {
            let xin = &x[(b * c_total + c) * h * wd..][..h * wd];
            let o = &mut out[(b * c_total + c) * oh * ow..][..oh * ow];
            // taps in (i, j) order so each output accumulates like the reference loop
            for oy in 0..oh {
                let orow = &mut o[oy * ow..(oy + 1) * ow];
                for i in 0..s {
                    let iy = (oy * st + i) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &xin[iy as usize * wd..(iy as usize + 1) * wd];
                    for j in 0..s {
                        let wv = w[(i * s + j) * c_total + c];
                        let (lo, hi) = tap_range(j, pad, st, wd, ow);
                        if st == 1 {
                            let base = lo + j - pad;
                            for (ov, &xv) in orow[lo..hi].iter_mut().zip(&xrow[base..base + hi - lo]) {
                                *ov += wv * xv;
                            }
                        } else {
                            for (ox, ov) in orow.iter_mut().enumerate().take(hi).skip(lo) {
                                *ov += wv * xrow[ox * st + j - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn depthwise_backward<T: Element>(x: &[T], w: &[T], go: &[T], spec: &ConvSpec, g: &Geometry, need_x: bool) -> (Option<Vec<T>>, Vec<T>) {
    let (s, c_total, st, pad) = (spec.kernel, spec.in_channels, spec.stride, spec.padding);
    let (h, wd, oh, ow) = (g.height, g.width, g.out_h, g.out_w);
    let mut dx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut dw = vec![T::zero(); w.len()];
    for b in 0..g.batch {
        for c in 0..c_total {
            let xin = &x[(b * c_total + c) * h * wd..][..h * wd];
            let gout = &go[(b * c_total + c) * oh * ow..][..oh * ow];
            for i in 0..s {
                let (ylo, yhi) = tap_range(i, pad, st, h, oh);
                for j in 0..s {
                    let (xlo, xhi) = tap_range(j, pad, st, wd, ow);
                    let widx = (i * s + j) * c_total + c;
                    let wv = w[widx];
                    let mut acc = T::zero();
                    for oy in ylo..yhi {
                        let iy = oy * st + i - pad;
                        let grow = &gout[oy * ow..(oy + 1) * ow];
                        let xrow = &xin[iy * wd..(iy + 1) * wd];
                        for ox in xlo..xhi {
                            acc += grow[ox] * xrow[ox * st + j - pad];
                        }
                        if let Some(dx) = dx.as_mut() {
                            let drow = &mut dx[((b * c_total + c) * h + iy) * wd..][..wd];
                            for ox in xlo..xhi {
                                drow[ox * st + j - pad] += wv * grow[ox];
                            }
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    (dx, dw)
}

/// Fills `col` (`R × P`, `R = S·S·X/G`, `P = H'·W'`) for one sample and group.
fn im2col<T: Element>(xs: &[T], spec: &ConvSpec, g: &Geometry, group: usize, col: &mut [T]) {
    let (s, xg, st, pad) = (spec.kernel, spec.in_per_group(), spec.stride, spec.padding);
    let (h, wd, oh, ow) = (g.height, g.width, g.out_h, g.out_w);
    let p = oh * ow;
    for i in 0..s {
        let (ylo, yhi) = tap_range(i, pad, st, h, oh);
        for j in 0..s {
            let (xlo, xhi) = tap_range(j, pad, st, wd, ow);
            for m in 0..xg {
                let r = (i * s + j) * xg + m;
                let row = &mut col[r * p..(r + 1) * p];
                row.fill(T::zero());
                let plane = &xs[(group * xg + m) * h * wd..][..h * wd];
                for oy in ylo..yhi {
                    let iy = oy * st + i - pad;
                    let src = &plane[iy * wd..(iy + 1) * wd];
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    for ox in xlo..xhi {
                        dst[ox] = src[ox * st + j - pad];
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(col: &[T], spec: &ConvSpec, g: &Geometry, group: usize, dxs: &mut [T]) {
    let (s, xg, st, pad) = (spec.kernel, spec.in_per_group(), spec.stride, spec.padding);
    let (h, wd, oh, ow) = (g.height, g.width, g.out_h, g.out_w);
    let p = oh * ow;
    for i in 0..s {
        let (ylo, yhi) = tap_range(i, pad, st, h, oh);
        for j in 0..s {
            let (xlo, xhi) = tap_range(j, pad, st, wd, ow);
            for m in 0..xg {
                let r = (i * s + j) * xg + m;
                let row = &col[r * p..(r + 1) * p];
                let plane = &mut dxs[(group * xg + m) * h * wd..][..h * wd];
                for oy in ylo..yhi {
                    let iy = oy * st + i - pad;
                    let dst = &mut plane[iy * wd..(iy + 1) * wd];
                    let src = &row[oy * ow..(oy + 1) * ow];
                    for ox in xlo..xhi {
                        dst[ox * st + j - pad] += src[ox];
                    }
                }
            }
        }
    }
}

fn gemm_forward<T: Element>(x: &[T], w: &[T], spec: &ConvSpec, g: &Geometry) -> Vec<T> {
    let (xc, y, xg, yg) = (spec.in_channels, spec.out_channels, spec.in_per_group(), spec.out_per_group());
    let (hw, p) = (g.height * g.width, g.out_h * g.out_w);
    let r = spec.kernel * spec.kernel * xg;
    let mut out = vec![T::zero(); g.batch * y * p];
    let direct = is_plain_pointwise(spec);
    let mut col = if direct { Vec::new() } else { vec![T::zero(); r * p] };
    for b in 0..g.batch {
        let xs = &x[b * xc * hw..(b + 1) * xc * hw];
        for group in 0..spec.groups {
            let cols: &[T] = if direct {
                &xs[group * xg * hw..(group + 1) * xg * hw]
            } else {
                im2col(xs, spec, g, group, &mut col);
                &col
            };
            // out_g (Yg × P) = W_gᵀ (Yg × R) · col (R × P)
            let o = &mut out[(b * y + group * yg) * p..(b * y + (group + 1) * yg) * p];
            T::gemm(yg, r, p, T::one(), MatRef::new(&w[group * yg..], 1, y), MatRef::new(cols, p, 1), T::zero(), MatMut::new(o, p, 1));
        }
    }
    out
}

fn gemm_backward<T: Element>(
    x: &[T],
    w: &[T],
    go: &[T],
    spec: &ConvSpec,
    g: &Geometry,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (xc, y, xg, yg) = (spec.in_channels, spec.out_channels, spec.in_per_group(), spec.out_per_group());
    let (hw, p) = (g.height * g.width, g.out_h * g.out_w);
    let r = spec.kernel * spec.kernel * xg;
    let direct = is_plain_pointwise(spec);
    let mut dx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_w.then(|| vec![T::zero(); w.len()]);
    let mut col = if direct { Vec::new() } else { vec![T::zero(); r * p] };
    let mut dcol = if direct || !need_x { Vec::new() } else { vec![T::zero(); r * p] };
    for b in 0..g.batch {
        let xs = &x[b * xc * hw..(b + 1) * xc * hw];
        for group in 0..spec.groups {
            let gout = &go[(b * y + group * yg) * p..(b * y + (group + 1) * yg) * p];
            if let Some(dw) = dw.as_mut() {
                let cols: &[T] = if direct {
                    &xs[group * xg * hw..(group + 1) * xg * hw]
                } else {
                    im2col(xs, spec, g, group, &mut col);
                    &col
                };
                // dW_g (R × Yg) += col (R × P) · gᵀ (P × Yg)
                T::gemm(
                    r,
                    p,
                    yg,
                    T::one(),
                    MatRef::new(cols, p, 1),
                    MatRef::new(gout, 1, p),
                    T::one(),
                    MatMut::new(&mut dw[group * yg..], y, 1),
                );
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx[b * xc * hw..(b + 1) * xc * hw];
                // dcol (R × P) = W_g (R × Yg) · g (Yg × P)
                if direct {
                    let dst = &mut dxs[group * xg * hw..(group + 1) * xg * hw];
                    T::gemm(
                        r,
                        yg,
                        p,
                        T::one(),
                        MatRef::new(&w[group * yg..], y, 1),
                        MatRef::new(gout, p, 1),
                        T::zero(),
                        MatMut::new(dst, p, 1),
                    );
                } else {
                    T::gemm(
                        r,
                        yg,
                        p,
                        T::one(),
                        MatRef::new(&w[group * yg..], y, 1),
                        MatRef::new(gout, p, 1),
                        T::zero(),
                        MatMut::new(&mut dcol, p, 1),
                    );
                    col2im(&dcol, spec, g, group, dxs);
                }
            }
        }
    }
    (dx, dw)
}

/// Forward pass without recording, choosing the kernel by `algo`.
pub fn conv2d_forward<T: Element>(input: &Tensor<T>, weight: &Tensor<T>, spec: &ConvSpec, algo: ConvAlgo) -> Result<Tensor<T>> {
    if algo == ConvAlgo::Direct {
        return conv2d_direct(input, weight, spec);
    }
    spec.validate(ConvKind::Grouped)?;
    let g = geometry(input.shape(), spec)?;
    check_weight(weight, spec)?;
    let x = input.values();
    let w = weight.values();
    let out = if is_depthwise(spec) { depthwise_forward(&x, &w, spec, &g) } else { gemm_forward(&x, &w, spec, &g) };
    Tensor::from_vec(&[g.batch, spec.out_channels, g.out_h, g.out_w], out)
}

struct Conv2d {
    spec: ConvSpec,
}

impl<T: Element> Backward<T> for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (input, weight) = (ctx.inputs[0], ctx.inputs[1]);
        let g = geometry(input.shape(), &self.spec).expect("validated in forward");
        let x = input.values();
        let w = weight.values();
        if is_depthwise(&self.spec) {
            let (dx, dw) = depthwise_backward(&x, &w, ctx.grad_out, &self.spec, &g, ctx.needs[0]);
            vec![dx, ctx.needs[1].then_some(dw)]
        } else {
            let (dx, dw) = gemm_backward(&x, &w, ctx.grad_out, &self.spec, &g, ctx.needs[0], ctx.needs[1]);
            vec![dx, dw]
        }
    }
}

impl<T: Element> Tape<T> {
    fn conv2d_kind(&mut self, input: Var, weight: Var, spec: &ConvSpec, kind: ConvKind) -> Result<Var> {
        spec.validate(kind)?;
        let expected = spec.weight_shape(kind);
        if self.value(weight).shape() != expected.as_slice() {
            bail!(Shape, "{:?} weight must have shape {:?}, got {:?}", kind, expected, self.value(weight).shape());
        }
        let value = conv2d_forward(self.value(input), self.value(weight), spec, ConvAlgo::Fast)?;
        self.record(value, &[input, weight], Conv2d { spec: *spec })
    }

    /// Dense convolution, weight `[S, S, X, Y]`.
    pub fn conv2d_standard(&mut self, input: Var, weight: Var, spec: &ConvSpec) -> Result<Var> {
        self.conv2d_kind(input, weight, spec, ConvKind::Standard)
    }

    /// One `S×S` filter per channel, weight `[S, S, X]`.
    pub fn conv2d_depthwise(&mut self, input: Var, weight: Var, spec: &ConvSpec) -> Result<Var> {
        self.conv2d_kind(input, weight, spec, ConvKind::Depthwise)
    }

    /// `1×1` channel mixing, weight `[X, Y]`.
    pub fn conv2d_pointwise(&mut self, input: Var, weight: Var, spec: &ConvSpec) -> Result<Var> {
        self.conv2d_kind(input, weight, spec, ConvKind::Pointwise)
    }

    /// `G` independent convolutions over contiguous channel groups, weight
    /// `[S, S, X/G, Y]`.
    pub fn conv2d_grouped(&mut self, input: Var, weight: Var, spec: &ConvSpec) -> Result<Var> {
        self.conv2d_kind(input, weight, spec, ConvKind::Grouped)
    }
}
