//! Finite difference, Hessian and blur operators with exact adjoints.
//!
//! Every operator is evaluated on a [`Frame`]: a rectangular window of the
//! global grid that holds the input values, plus an active rectangle inside
//! it where outputs are produced. Boundary rules (homogeneous Neumann for the
//! differences, zero padding for the blur) are always decided from *global*
//! indices, so a frame covering the whole grid gives the global operator and
//! a subdomain frame gives the restricted operator `T|_{Ω_s}`. Reads that
//! fall outside the window see zeros; the layout guarantees that restricted
//! stencils never need them.
//!
//! Adjoints scatter-add transposed stencils, so the adjoint identity holds
//! to rounding on every frame, boundary rows included.

use crate::error::{Error, Result};
use crate::field::{GridShape, ScalarField, TensorField, VectorField};

/// Half-open rectangle of global pixel indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rect {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Rect {
    pub fn new(row0: usize, col0: usize, rows: usize, cols: usize) -> Self {
        Self {
            row0,
            col0,
            rows,
            cols,
        }
    }

    pub fn full(shape: GridShape) -> Self {
        Self::new(0, 0, shape.rows, shape.cols)
    }

    #[inline]
    pub fn row_end(&self) -> usize {
        self.row0 + self.rows
    }

    #[inline]
    pub fn col_end(&self) -> usize {
        self.col0 + self.cols
    }

    #[inline]
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row0 && row < self.row_end() && col >= self.col0 && col < self.col_end()
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.row0 >= self.row0
            && other.col0 >= self.col0
            && other.row_end() <= self.row_end()
            && other.col_end() <= self.col_end()
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> GridShape {
        GridShape {
            rows: self.rows,
            cols: self.cols,
        }
    }

    /// Iterates the global `(row, col)` pairs in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.row0..self.row_end()).flat_map(move |i| (self.col0..self.col_end()).map(move |j| (i, j)))
    }
}

/// A window of the global grid holding field values, and the active
/// rectangle where operator outputs live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Frame {
    pub global: GridShape,
    pub window: Rect,
    pub active: Rect,
}

impl Frame {
    pub fn full(shape: GridShape) -> Self {
        Self {
            global: shape,
            window: Rect::full(shape),
            active: Rect::full(shape),
        }
    }

    pub fn new(global: GridShape, window: Rect, active: Rect) -> Result<Self> {
        if !Rect::full(global).contains_rect(&window) || !window.contains_rect(&active) {
            return Err(Error::InvalidParameter(format!(
                "frame rectangles not nested: active {active:?}, window {window:?}, grid {global}"
            )));
        }
        Ok(Self {
            global,
            window,
            active,
        })
    }

    /// Shape of fields living on this frame.
    pub fn local_shape(&self) -> GridShape {
        self.window.shape()
    }

    /// Same window with every window pixel active.
    pub fn widened(&self) -> Self {
        Self {
            active: self.window,
            ..*self
        }
    }

    #[inline]
    fn local(&self, gi: usize, gj: usize) -> usize {
        (gi - self.window.row0) * self.window.cols + (gj - self.window.col0)
    }
}

/// Uniform `(2l+1) x (2l+1)` averaging kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlurKernel {
    half_width: usize,
}

impl BlurKernel {
    pub fn new(half_width: usize) -> Result<Self> {
        if half_width == 0 {
            return Err(Error::InvalidParameter("blur half-width must be >= 1".into()));
        }
        Ok(Self { half_width })
    }

    pub fn half_width(&self) -> usize {
        self.half_width
    }

    pub fn size(&self) -> usize {
        2 * self.half_width + 1
    }

    pub fn weight(&self) -> f64 {
        let s = self.size() as f64;
        1.0 / (s * s)
    }
}

// ---------------------------------------------------------------------------
// Slice kernels. Outputs are fully overwritten (zero off the active rect);
// adjoints accumulate into `out`.

fn zero(out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
}

pub fn dxp_into(f: &Frame, u: &[f64], out: &mut [f64]) {
    zero(out);
    let a = f.active;
    for gi in a.row0..a.row_end() {
        if gi + 1 >= f.global.rows {
            continue;
        }
        let below = gi + 1 < f.window.row_end();
        for gj in a.col0..a.col_end() {
            let k = f.local(gi, gj);
            let next = if below { u[k + f.window.cols] } else { 0.0 };
            out[k] = next - u[k];
        }
    }
}

pub fn dxp_adjoint_add(f: &Frame, p: &[f64], out: &mut [f64]) {
    let a = f.active;
    for gi in a.row0..a.row_end() {
        if gi + 1 >= f.global.rows {
            continue;
        }
        let below = gi + 1 < f.window.row_end();
        for gj in a.col0..a.col_end() {
            let k = f.local(gi, gj);
            if below {
                out[k + f.window.cols] += p[k];
            }
            out[k] -= p[k];
        }
    }
}

pub fn dyp_into(f: &Frame, u: &[f64], out: &mut [f64]) {
    zero(out);
    let a = f.active;
    for gi in a.row0..a.row_end() {
        for gj in a.col0..a.col_end() {
            if gj + 1 >= f.global.cols {
                continue;
            }
            let k = f.local(gi, gj);
            let next = if gj + 1 < f.window.col_end() { u[k + 1] } else { 0.0 };
            out[k] = next - u[k];
        }
    }
}

pub fn dyp_adjoint_add(f: &Frame, p: &[f64], out: &mut [f64]) {
    let a = f.active;
    for gi in a.row0..a.row_end() {
        for gj in a.col0..a.col_end() {
            if gj + 1 >= f.global.cols {
                continue;
            }
            let k = f.local(gi, gj);
            if gj + 1 < f.window.col_end() {
                out[k + 1] += p[k];
            }
            out[k] -= p[k];
        }
    }
}

pub fn dxm_into(f: &Frame, u: &[f64], out: &mut [f64]) {
    zero(out);
    let a = f.active;
    for gi in a.row0..a.row_end() {
        if gi == 0 {
            continue;
        }
        let above = gi > f.window.row0;
        for gj in a.col0..a.col_end() {
            let k = f.local(gi, gj);
            let prev = if above { u[k - f.window.cols] } else { 0.0 };
            out[k] = u[k] - prev;
        }
    }
}

pub fn dxm_adjoint_add(f: &Frame, p: &[f64], out: &mut [f64]) {
    let a = f.active;
    for gi in a.row0..a.row_end() {
        if gi == 0 {
            continue;
        }
        let above = gi > f.window.row0;
        for gj in a.col0..a.col_end() {
            let k = f.local(gi, gj);
            out[k] += p[k];
            if above {
                out[k - f.window.cols] -= p[k];
            }
        }
    }
}

pub fn dym_into(f: &Frame, u: &[f64], out: &mut [f64]) {
    zero(out);
    let a = f.active;
    for gi in a.row0..a.row_end() {
        for gj in a.col0..a.col_end() {
            if gj == 0 {
                continue;
            }
            let k = f.local(gi, gj);
            let prev = if gj > f.window.col0 { u[k - 1] } else { 0.0 };
            out[k] = u[k] - prev;
        }
    }
}

pub fn dym_adjoint_add(f: &Frame, p: &[f64], out: &mut [f64]) {
    let a = f.active;
    for gi in a.row0..a.row_end() {
        for gj in a.col0..a.col_end() {
            if gj == 0 {
                continue;
            }
            let k = f.local(gi, gj);
            out[k] += p[k];
            if gj > f.window.col0 {
                out[k - 1] -= p[k];
            }
        }
    }
}

pub fn grad_plus_into(f: &Frame, u: &[f64], out: &mut VectorField) {
    dxp_into(f, u, out.x.as_mut_slice());
    dyp_into(f, u, out.y.as_mut_slice());
}

pub fn grad_plus_adjoint_add(f: &Frame, p: &VectorField, out: &mut [f64]) {
    dxp_adjoint_add(f, p.x.as_slice(), out);
    dyp_adjoint_add(f, p.y.as_slice(), out);
}

/// Scratch buffer reused by the Hessian kernels.
#[derive(Debug, Clone)]
pub struct HessianScratch {
    grad: VectorField,
}

impl HessianScratch {
    pub fn new(shape: GridShape) -> Self {
        Self {
            grad: VectorField::zeros(shape),
        }
    }
}

/// `∇⁻∇⁺` on the active rect: the forward gradient is formed on the whole
/// window, then backward differences are taken channel-wise.
pub fn hessian_into(f: &Frame, u: &[f64], out: &mut TensorField, scratch: &mut HessianScratch) {
    let wide = f.widened();
    grad_plus_into(&wide, u, &mut scratch.grad);
    dxm_into(f, scratch.grad.x.as_slice(), out.xx.as_mut_slice());
    dym_into(f, scratch.grad.x.as_slice(), out.xy.as_mut_slice());
    dxm_into(f, scratch.grad.y.as_slice(), out.yx.as_mut_slice());
    dym_into(f, scratch.grad.y.as_slice(), out.yy.as_mut_slice());
}

pub fn hessian_adjoint_add(
    f: &Frame,
    p: &TensorField,
    out: &mut [f64],
    scratch: &mut HessianScratch,
) {
    let g = &mut scratch.grad;
    zero(g.x.as_mut_slice());
    zero(g.y.as_mut_slice());
    dxm_adjoint_add(f, p.xx.as_slice(), g.x.as_mut_slice());
    dym_adjoint_add(f, p.xy.as_slice(), g.x.as_mut_slice());
    dxm_adjoint_add(f, p.yx.as_slice(), g.y.as_mut_slice());
    dym_adjoint_add(f, p.yy.as_slice(), g.y.as_mut_slice());
    grad_plus_adjoint_add(&f.widened(), g, out);
}

/// Scratch buffer reused by the blur kernels.
#[derive(Debug, Clone)]
pub struct BlurScratch {
    rows: Vec<f64>,
}

impl BlurScratch {
    pub fn new(shape: GridShape) -> Self {
        Self {
            rows: vec![0.0; shape.len()],
        }
    }
}

/// Correlation with the uniform kernel under zero padding, evaluated on the
/// active rect. Separable: horizontal window sums first, vertical second.
pub fn blur_into(f: &Frame, k: BlurKernel, u: &[f64], out: &mut [f64], scratch: &mut BlurScratch) {
    zero(out);
    let l = k.half_width();
    let w = f.window;
    let a = f.active;
    let h = &mut scratch.rows;
    let r_lo = a.row0.saturating_sub(l).max(w.row0);
    let r_hi = (a.row_end() + l).min(w.row_end());
    for gi in r_lo..r_hi {
        for gj in a.col0..a.col_end() {
            let c_lo = gj.saturating_sub(l).max(w.col0);
            let c_hi = (gj + l + 1).min(w.col_end());
            let base = f.local(gi, w.col0);
            let s: f64 = u[base + (c_lo - w.col0)..base + (c_hi - w.col0)].iter().sum();
            h[f.local(gi, gj)] = s;
        }
    }
    let wt = k.weight();
    for gi in a.row0..a.row_end() {
        let i_lo = gi.saturating_sub(l).max(w.row0);
        let i_hi = (gi + l + 1).min(w.row_end());
        for gj in a.col0..a.col_end() {
            let mut s = 0.0;
            for ii in i_lo..i_hi {
                s += h[f.local(ii, gj)];
            }
            out[f.local(gi, gj)] = wt * s;
        }
    }
}

pub fn blur_adjoint_add(
    f: &Frame,
    k: BlurKernel,
    q: &[f64],
    out: &mut [f64],
    scratch: &mut BlurScratch,
) {
    let l = k.half_width();
    let w = f.window;
    let a = f.active;
    let t = &mut scratch.rows;
    let r_lo = a.row0.saturating_sub(l).max(w.row0);
    let r_hi = (a.row_end() + l).min(w.row_end());
    // vertical spread of q onto rows r_lo..r_hi, active columns only
    for gi in r_lo..r_hi {
        let i_lo = gi.saturating_sub(l).max(a.row0);
        let i_hi = (gi + l + 1).min(a.row_end());
        for gj in a.col0..a.col_end() {
            let mut s = 0.0;
            for ii in i_lo..i_hi {
                s += q[f.local(ii, gj)];
            }
            t[f.local(gi, gj)] = s;
        }
    }
    let wt = k.weight();
    let c_lo_all = a.col0.saturating_sub(l).max(w.col0);
    let c_hi_all = (a.col_end() + l).min(w.col_end());
    for gi in r_lo..r_hi {
        for gj in c_lo_all..c_hi_all {
            let j_lo = gj.saturating_sub(l).max(a.col0);
            let j_hi = (gj + l + 1).min(a.col_end());
            let mut s = 0.0;
            for jj in j_lo..j_hi {
                s += t[f.local(gi, jj)];
            }
            out[f.local(gi, gj)] += wt * s;
        }
    }
}

// ---------------------------------------------------------------------------
// Whole-grid conveniences.

fn full_scalar(u: &ScalarField, mut kernel: impl FnMut(&Frame, &[f64], &mut [f64])) -> ScalarField {
    let f = Frame::full(u.shape());
    let mut out = ScalarField::zeros(u.shape());
    kernel(&f, u.as_slice(), out.as_mut_slice());
    out
}

/// Forward difference along rows; zero on the last row.
pub fn dxp(u: &ScalarField) -> ScalarField {
    full_scalar(u, dxp_into)
}

/// Backward difference along rows; zero on the first row.
pub fn dxm(u: &ScalarField) -> ScalarField {
    full_scalar(u, dxm_into)
}

pub fn dyp(u: &ScalarField) -> ScalarField {
    full_scalar(u, dyp_into)
}

pub fn dym(u: &ScalarField) -> ScalarField {
    full_scalar(u, dym_into)
}

pub fn grad_plus(u: &ScalarField) -> VectorField {
    VectorField {
        x: dxp(u),
        y: dyp(u),
    }
}

pub fn grad_minus(u: &ScalarField) -> VectorField {
    VectorField {
        x: dxm(u),
        y: dym(u),
    }
}

pub fn adjoint_grad_plus(p: &VectorField) -> ScalarField {
    let f = Frame::full(p.shape());
    let mut out = ScalarField::zeros(p.shape());
    grad_plus_adjoint_add(&f, p, out.as_mut_slice());
    out
}

pub fn adjoint_grad_minus(p: &VectorField) -> ScalarField {
    let f = Frame::full(p.shape());
    let mut out = ScalarField::zeros(p.shape());
    dxm_adjoint_add(&f, p.x.as_slice(), out.as_mut_slice());
    dym_adjoint_add(&f, p.y.as_slice(), out.as_mut_slice());
    out
}

/// Discrete Hessian `∇⁻∇⁺u`.
pub fn hessian(u: &ScalarField) -> TensorField {
    let f = Frame::full(u.shape());
    let mut out = TensorField::zeros(u.shape());
    hessian_into(&f, u.as_slice(), &mut out, &mut HessianScratch::new(u.shape()));
    out
}

pub fn adjoint_hessian(p: &TensorField) -> ScalarField {
    let f = Frame::full(p.shape());
    let mut out = ScalarField::zeros(p.shape());
    hessian_adjoint_add(&f, p, out.as_mut_slice(), &mut HessianScratch::new(p.shape()));
    out
}

pub fn blur(u: &ScalarField, k: BlurKernel) -> ScalarField {
    let mut scratch = BlurScratch::new(u.shape());
    full_scalar(u, |f, x, o| blur_into(f, k, x, o, &mut scratch))
}

pub fn adjoint_blur(q: &ScalarField, k: BlurKernel) -> ScalarField {
    let f = Frame::full(q.shape());
    let mut out = ScalarField::zeros(q.shape());
    blur_adjoint_add(&f, k, q.as_slice(), out.as_mut_slice(), &mut BlurScratch::new(q.shape()));
    out
}

// ---------------------------------------------------------------------------
// Flat linear-operator view, used for norm estimation and dense checks.

/// Which operator a [`FrameOp`] applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Identity,
    GradPlus,
    GradMinus,
    Hessian,
    Blur(BlurKernel),
}

impl OpKind {
    pub fn out_channels(&self) -> usize {
        match self {
            OpKind::Identity | OpKind::Blur(_) => 1,
            OpKind::GradPlus | OpKind::GradMinus => 2,
            OpKind::Hessian => 4,
        }
    }
}

/// An operator bound to a frame, acting on flat buffers. Output channels are
/// concatenated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameOp {
    pub kind: OpKind,
    pub frame: Frame,
}

impl FrameOp {
    pub fn new(kind: OpKind, frame: Frame) -> Self {
        Self { kind, frame }
    }

    pub fn full(kind: OpKind, shape: GridShape) -> Self {
        Self::new(kind, Frame::full(shape))
    }

    pub fn input_len(&self) -> usize {
        self.frame.local_shape().len()
    }

    pub fn output_len(&self) -> usize {
        self.input_len() * self.kind.out_channels()
    }

    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        let f = &self.frame;
        let n = self.input_len();
        let shape = f.local_shape();
        match self.kind {
            OpKind::Identity => {
                zero(out);
                let a = f.active;
                for (gi, gj) in a.pixels() {
                    let k = f.local(gi, gj);
                    out[k] = u[k];
                }
            }
            OpKind::GradPlus => {
                let (x, y) = out.split_at_mut(n);
                dxp_into(f, u, x);
                dyp_into(f, u, y);
            }
            OpKind::GradMinus => {
                let (x, y) = out.split_at_mut(n);
                dxm_into(f, u, x);
                dym_into(f, u, y);
            }
            OpKind::Hessian => {
                let mut t = TensorField::zeros(shape);
                hessian_into(f, u, &mut t, &mut HessianScratch::new(shape));
                for (dst, src) in out.chunks_mut(n).zip([&t.xx, &t.xy, &t.yx, &t.yy]) {
                    dst.copy_from_slice(src.as_slice());
                }
            }
            OpKind::Blur(k) => blur_into(f, k, u, out, &mut BlurScratch::new(shape)),
        }
    }

    pub fn adjoint(&self, p: &[f64], out: &mut [f64]) {
        let f = &self.frame;
        let n = self.input_len();
        let shape = f.local_shape();
        zero(out);
        match self.kind {
            OpKind::Identity => {
                for (gi, gj) in f.active.pixels() {
                    let k = f.local(gi, gj);
                    out[k] = p[k];
                }
            }
            OpKind::GradPlus => {
                dxp_adjoint_add(f, &p[..n], out);
                dyp_adjoint_add(f, &p[n..], out);
            }
            OpKind::GradMinus => {
                dxm_adjoint_add(f, &p[..n], out);
                dym_adjoint_add(f, &p[n..], out);
            }
            OpKind::Hessian => {
                let chan = |c: usize| ScalarField::from_vec(shape, p[c * n..(c + 1) * n].to_vec());
                let t = TensorField {
                    xx: chan(0).expect("finite"),
                    xy: chan(1).expect("finite"),
                    yx: chan(2).expect("finite"),
                    yy: chan(3).expect("finite"),
                };
                hessian_adjoint_add(f, &t, out, &mut HessianScratch::new(shape));
            }
            OpKind::Blur(k) => blur_adjoint_add(f, k, p, out, &mut BlurScratch::new(shape)),
        }
    }
}

/// Lower estimate of `‖op‖²` by power iteration on `op* op`.
///
/// Starts from a fixed pseudo-random vector and returns the Rayleigh quotient
/// `‖op x‖² / ‖x‖²` of the last iterate.
pub fn op_norm_sq_estimate(op: &FrameOp, iters: usize) -> Result<f64> {
    if iters == 0 {
        return Err(Error::InvalidParameter("power iteration needs iters >= 1".into()));
    }
    let n = op.input_len();
    let mut x: Vec<f64> = (0..n as u64).map(|k| hash_unit(k) - 0.5).collect();
    let mut y = vec![0.0; op.output_len()];
    let mut est = 0.0;
    for _ in 0..iters {
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nx == 0.0 {
            return Ok(0.0);
        }
        x.iter_mut().for_each(|v| *v /= nx);
        op.apply(&x, &mut y);
        est = y.iter().map(|v| v * v).sum::<f64>();
        op.adjoint(&y, &mut x);
    }
    Ok(est)
}

// splitmix64 finaliser mapped to [0, 1); only used for deterministic starts
fn hash_unit(k: u64) -> f64 {
    let mut z = k.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}
