//! Decoupled augmented Lagrangian outer loop, accelerated primal-dual local
//! solvers, the full-domain primal-dual baseline and convergence diagnostics.
//!
//! All three models share one saddle-point form on a frame:
//!
//! ```text
//! min_u max_{|p|≤1, |q|≤α}  ⟨Ku, p⟩ + ⟨Au - f, q⟩ + ⟨c, u⟩ + χ(u) + η/2 ‖u - û‖²
//! ```
//!
//! with `K = ∇⁺` or `∇⁻∇⁺` restricted to the tile, an optional fidelity
//! block (`A` = blur or identity), an optional linear term `c = αg` and the
//! optional box `χ = χ_{[0,1]}` (Chan–Vese). A single [`PrimalDual`] engine
//! runs the update sequence for every model; `η = 0`, `γ = 0` gives the plain
//! full-domain iteration.

use rayon::prelude::*;

use crate::decomp::{OverlapLayout, StackedField};
use crate::error::{ensure_same, Error, Result};
use crate::field::{project_ball_channels, psnr, GridShape, ScalarField};
use crate::models::{Model, ModelKind};
use crate::ops::{
    blur_adjoint_add, blur_into, dxm_adjoint_add, dxm_into, dxp_adjoint_add, dxp_into,
    dym_adjoint_add, dym_into, dyp_adjoint_add, dyp_into, BlurKernel, BlurScratch, Frame, OpKind,
};

/// Upper bound on `σ0 τ0` for the model's local algorithm.
pub fn step_product_bound(kind: &ModelKind) -> f64 {
    match kind {
        ModelKind::ChanVese { .. } => 1.0 / 8.0,
        ModelKind::TvL1 { .. } => 1.0 / 9.0,
        ModelKind::HessianL1 { .. } => 1.0 / 65.0,
    }
}

// σ0 = τ0 = 1/√8 squares to one ulp above 1/8
fn within_bound(sigma: f64, tau: f64, bound: f64) -> bool {
    sigma * tau <= bound * (1.0 + 1e-12)
}

/// Step sizes and stopping for the local primal-dual solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerParams {
    pub sigma0: f64,
    pub tau0: f64,
    /// Acceleration parameter, `0 ≤ γ ≤ η`.
    pub gamma: f64,
    /// Iterations per outer step; an upper bound when `gap_tol` is set.
    pub iters: usize,
    /// Residual-targeted mode: stop once the local primal-dual gap is at most
    /// this value.
    pub gap_tol: Option<f64>,
}

impl InnerParams {
    pub fn defaults(kind: &ModelKind, eta: f64) -> Self {
        let (step, iters) = match kind {
            ModelKind::ChanVese { .. } => (1.0 / 8f64.sqrt(), 10),
            ModelKind::TvL1 { .. } => (1.0 / 3.0, 50),
            ModelKind::HessianL1 { .. } => (1.0 / 65f64.sqrt(), 50),
        };
        Self {
            sigma0: step,
            tau0: step,
            gamma: 0.125 * eta,
            iters,
            gap_tol: None,
        }
    }

    pub fn validate(&self, kind: &ModelKind, eta: f64) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.sigma0 > 0.0 && self.tau0 > 0.0) {
            return bad(format!("step sizes must be positive, got σ0={} τ0={}", self.sigma0, self.tau0));
        }
        let bound = step_product_bound(kind);
        if !within_bound(self.sigma0, self.tau0, bound) {
            return bad(format!(
                "σ0·τ0 = {} exceeds {bound} for {}",
                self.sigma0 * self.tau0,
                kind.name()
            ));
        }
        if !(0.0..=eta).contains(&self.gamma) {
            return bad(format!("γ must lie in [0, η] = [0, {eta}], got {}", self.gamma));
        }
        if self.iters == 0 {
            return bad("inner iteration count must be at least 1".into());
        }
        if let Some(t) = self.gap_tol {
            if !(t > 0.0) {
                return bad(format!("gap tolerance must be positive, got {t}"));
            }
        }
        Ok(())
    }
}

/// Outer-loop parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlmParams {
    pub eta: f64,
    pub max_outer: usize,
    pub tol: f64,
    pub inner: InnerParams,
}

impl AlmParams {
    pub fn defaults(kind: &ModelKind) -> Self {
        let (eta, tol) = match kind {
            ModelKind::ChanVese { .. } => (1.0, 1e-4),
            ModelKind::TvL1 { .. } => (10.0, 1e-3),
            ModelKind::HessianL1 { .. } => (20.0, 1e-3),
        };
        Self {
            eta,
            max_outer: 1000,
            tol,
            inner: InnerParams::defaults(kind, eta),
        }
    }

    pub fn validate(&self, kind: &ModelKind) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidParameter(format!("η must be positive, got {}", self.eta)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!("tol must be positive, got {}", self.tol)));
        }
        self.inner.validate(kind, self.eta)
    }
}

// ---------------------------------------------------------------------------
// Primal-dual engine

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Reg {
    Grad,
    Hessian,
}

impl Reg {
    fn channels(self) -> usize {
        match self {
            Reg::Grad => 2,
            Reg::Hessian => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fid {
    Identity,
    Blur(BlurKernel),
}

/// Outcome of a run of local iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerReport {
    pub iters: usize,
    /// Primal-dual gap at exit; only evaluated in residual-targeted mode.
    pub gap: Option<f64>,
}

/// Primal-dual iteration on one frame (a subdomain, or the whole grid).
///
/// Holds the primal iterate `u`, its extrapolation `ū` and the duals, which
/// persist between calls to [`PrimalDual::run`] so that outer iterations warm
/// start.
#[derive(Debug, Clone)]
pub struct PrimalDual {
    frame: Frame,
    n: usize,
    mask: Vec<bool>,
    reg: Reg,
    fid: Option<Fid>,
    alpha: f64,
    // f on the active rect, zero elsewhere
    data: Vec<f64>,
    // αg on the active rect (Chan–Vese)
    lin: Option<Vec<f64>>,
    clamp: bool,
    u: Vec<f64>,
    ubar: Vec<f64>,
    p: Vec<f64>,
    q: Vec<f64>,
    sigma: f64,
    tau: f64,
    u_old: Vec<f64>,
    kbuf: Vec<f64>,
    abuf: Vec<f64>,
    w: Vec<f64>,
    gx: Vec<f64>,
    gy: Vec<f64>,
    blur: BlurScratch,
}

impl PrimalDual {
    /// Full-grid problem, all values zero.
    pub fn full(model: &Model) -> Self {
        let shape = model.shape();
        Self::build(model, Frame::full(shape), vec![true; shape.len()])
    }

    /// Local problem of subdomain `s`: operators restricted to `Ω_s`, unknowns
    /// on `Ω̃_s`.
    pub fn for_subdomain(model: &Model, layout: &OverlapLayout, s: usize) -> Result<Self> {
        model.check_layout(layout)?;
        // containment of every operator the model uses
        for kind in op_kinds(&model.kind()) {
            layout.restricted(s, kind)?;
        }
        let sub = layout.subdomain(s);
        Ok(Self::build(model, sub.frame(model.shape()), sub.mask().to_vec()))
    }

    fn build(model: &Model, frame: Frame, mask: Vec<bool>) -> Self {
        let shape = frame.local_shape();
        let n = shape.len();
        let kind = model.kind();
        let (reg, fid) = match kind {
            ModelKind::ChanVese { .. } => (Reg::Grad, None),
            ModelKind::TvL1 { kernel, .. } => (Reg::Grad, Some(Fid::Blur(kernel))),
            ModelKind::HessianL1 { .. } => (Reg::Hessian, Some(Fid::Identity)),
        };
        let on_active = |field: &ScalarField, scale: f64| {
            let mut v = vec![0.0; n];
            for (gi, gj) in frame.active.pixels() {
                v[local(&frame, gi, gj)] = scale * field.get(gi, gj);
            }
            v
        };
        let data = if fid.is_some() { on_active(model.data(), 1.0) } else { Vec::new() };
        let lin = model.region_field().map(|g| on_active(g, kind.alpha()));
        Self {
            frame,
            n,
            mask,
            reg,
            fid,
            alpha: kind.alpha(),
            data,
            clamp: lin.is_some(),
            lin,
            u: vec![0.0; n],
            ubar: vec![0.0; n],
            p: vec![0.0; reg.channels() * n],
            q: vec![0.0; if fid.is_some() { n } else { 0 }],
            sigma: 0.0,
            tau: 0.0,
            u_old: vec![0.0; n],
            kbuf: vec![0.0; reg.channels() * n],
            abuf: vec![0.0; n],
            w: vec![0.0; n],
            gx: vec![0.0; n],
            gy: vec![0.0; n],
            blur: BlurScratch::new(shape),
        }
    }

    pub fn shape(&self) -> GridShape {
        self.frame.local_shape()
    }

    /// Current primal iterate over the frame's window.
    pub fn u(&self) -> ScalarField {
        ScalarField::from_vec(self.shape(), self.u.clone()).expect("finite iterate")
    }

    /// Sets the primal iterate (and its extrapolation); values outside the
    /// support are dropped.
    pub fn set_u(&mut self, u: &ScalarField) -> Result<()> {
        ensure_same(u.shape(), self.shape())?;
        for ((dst, &v), &m) in self.u.iter_mut().zip(u.as_slice()).zip(&self.mask) {
            *dst = if m { v } else { 0.0 };
        }
        self.ubar.copy_from_slice(&self.u);
        Ok(())
    }

    /// Regulariser dual, channels concatenated (2 for `∇⁺`, 4 for `∇⁻∇⁺`).
    pub fn reg_dual(&self) -> &[f64] {
        &self.p
    }

    /// Fidelity dual `q`; empty for Chan–Vese.
    pub fn fid_dual(&self) -> &[f64] {
        &self.q
    }

    /// Current `(σ, τ)`.
    pub fn steps(&self) -> (f64, f64) {
        (self.sigma, self.tau)
    }

    /// Runs the accelerated iteration on `E_s(u) + η/2‖u - û‖²`, starting from
    /// the stored iterate with step sizes reset to `(σ0, τ0)`. With
    /// `params.gap_tol` set, stops once the gap reaches the tolerance (checked
    /// after every block of 10 iterations) or after `params.iters`.
    pub fn run(&mut self, uhat: &[f64], eta: f64, params: &InnerParams) -> InnerReport {
        debug_assert_eq!(uhat.len(), self.n);
        self.sigma = params.sigma0;
        self.tau = params.tau0;
        self.ubar.copy_from_slice(&self.u);
        let Some(tol) = params.gap_tol else {
            for _ in 0..params.iters {
                self.iterate(uhat, eta, params.gamma);
            }
            return InnerReport {
                iters: params.iters,
                gap: None,
            };
        };
        // at least one block, so a warm start that already meets the tolerance
        // still tracks the moving prox center
        let mut done = 0;
        loop {
            let chunk = 10.min(params.iters - done);
            for _ in 0..chunk {
                self.iterate(uhat, eta, params.gamma);
            }
            done += chunk;
            let gap = self.gap(uhat, eta);
            if gap <= tol || done >= params.iters {
                return InnerReport {
                    iters: done,
                    gap: Some(gap),
                };
            }
        }
    }

    /// One step of the update sequence with the current `(σ, τ)`.
    fn iterate(&mut self, uhat: &[f64], eta: f64, gamma: f64) {
        let (sigma, tau) = (self.sigma, self.tau);
        let n = self.n;

        // dual ascent on the regulariser
        reg_forward(&self.frame, self.reg, &self.ubar, &mut self.kbuf, &mut self.gx, &mut self.gy);
        for (p, k) in self.p.iter_mut().zip(&self.kbuf) {
            *p += sigma * k;
        }
        let mut chans: Vec<&mut [f64]> = self.p.chunks_mut(n).collect();
        project_ball_channels(&mut chans, n, 1.0);

        // dual ascent on the fidelity
        if let Some(fid) = self.fid {
            fid_forward(&self.frame, fid, &self.ubar, &mut self.abuf, &mut self.blur);
            let a = self.alpha;
            for ((q, &au), &f) in self.q.iter_mut().zip(&self.abuf).zip(&self.data) {
                *q = (*q + sigma * (au - f)).clamp(-a, a);
            }
        }

        // primal resolvent
        self.dual_image();
        self.u_old.copy_from_slice(&self.u);
        let denom = 1.0 + tau * eta;
        for k in 0..n {
            if !self.mask[k] {
                continue;
            }
            let mut v = (self.u[k] - tau * self.w[k] + tau * eta * uhat[k]) / denom;
            if self.clamp {
                v = v.clamp(0.0, 1.0);
            }
            self.u[k] = v;
        }

        let theta = 1.0 / (1.0 + 2.0 * gamma * tau).sqrt();
        self.tau = theta * tau;
        self.sigma = sigma / theta;
        for ((b, &u), &o) in self.ubar.iter_mut().zip(&self.u).zip(&self.u_old) {
            *b = (1.0 + theta) * u - theta * o;
        }
    }

    // w = K*p + A*q + c, zero outside the support
    fn dual_image(&mut self) {
        self.w.iter_mut().for_each(|v| *v = 0.0);
        reg_adjoint_add(&self.frame, self.reg, &self.p, &mut self.w, &mut self.gx, &mut self.gy);
        if let Some(fid) = self.fid {
            fid_adjoint_add(&self.frame, fid, &self.q, &mut self.w, &mut self.blur);
        }
        if let Some(c) = &self.lin {
            for (w, c) in self.w.iter_mut().zip(c) {
                *w += c;
            }
        }
    }

    /// Local objective `E_s(u) + η/2‖u - û‖²` at the current iterate.
    pub fn objective(&mut self, uhat: &[f64], eta: f64) -> f64 {
        let n = self.n;
        reg_forward(&self.frame, self.reg, &self.u, &mut self.kbuf, &mut self.gx, &mut self.gy);
        let nch = self.reg.channels();
        let mut total = 0.0;
        for (gi, gj) in self.frame.active.pixels() {
            let k = local(&self.frame, gi, gj);
            let m: f64 = (0..nch).map(|c| self.kbuf[c * n + k].powi(2)).sum();
            total += m.sqrt();
        }
        if let Some(fid) = self.fid {
            fid_forward(&self.frame, fid, &self.u, &mut self.abuf, &mut self.blur);
            for (gi, gj) in self.frame.active.pixels() {
                let k = local(&self.frame, gi, gj);
                total += self.alpha * (self.abuf[k] - self.data[k]).abs();
            }
        }
        if let Some(c) = &self.lin {
            total += c.iter().zip(&self.u).map(|(c, u)| c * u).sum::<f64>();
        }
        let prox: f64 = (0..n)
            .filter(|&k| self.mask[k])
            .map(|k| (self.u[k] - uhat[k]).powi(2))
            .sum();
        total + 0.5 * eta * prox
    }

    /// Primal-dual gap of the local problem at the current `(u, p, q)`;
    /// requires `η > 0`.
    pub fn gap(&mut self, uhat: &[f64], eta: f64) -> f64 {
        let primal = self.objective(uhat, eta);
        self.dual_image();
        let mut dual = -self.q.iter().zip(&self.data).map(|(q, f)| q * f).sum::<f64>();
        for k in 0..self.n {
            if !self.mask[k] {
                continue;
            }
            let mut v = uhat[k] - self.w[k] / eta;
            if self.clamp {
                v = v.clamp(0.0, 1.0);
            }
            dual += self.w[k] * v + 0.5 * eta * (v - uhat[k]).powi(2);
        }
        primal - dual
    }
}

fn op_kinds(kind: &ModelKind) -> Vec<OpKind> {
    match *kind {
        ModelKind::ChanVese { .. } => vec![OpKind::GradPlus],
        ModelKind::TvL1 { kernel, .. } => vec![OpKind::GradPlus, OpKind::Blur(kernel)],
        ModelKind::HessianL1 { .. } => vec![OpKind::Hessian, OpKind::Identity],
    }
}

fn local(f: &Frame, gi: usize, gj: usize) -> usize {
    (gi - f.window.row0) * f.window.cols + (gj - f.window.col0)
}

fn reg_forward(f: &Frame, reg: Reg, u: &[f64], out: &mut [f64], gx: &mut [f64], gy: &mut [f64]) {
    let n = u.len();
    match reg {
        Reg::Grad => {
            let (x, y) = out.split_at_mut(n);
            dxp_into(f, u, x);
            dyp_into(f, u, y);
        }
        Reg::Hessian => {
            let wide = f.widened();
            dxp_into(&wide, u, gx);
            dyp_into(&wide, u, gy);
            let (a, rest) = out.split_at_mut(n);
            let (b, rest) = rest.split_at_mut(n);
            let (c, d) = rest.split_at_mut(n);
            dxm_into(f, gx, a);
            dym_into(f, gx, b);
            dxm_into(f, gy, c);
            dym_into(f, gy, d);
        }
    }
}

fn reg_adjoint_add(f: &Frame, reg: Reg, p: &[f64], out: &mut [f64], gx: &mut [f64], gy: &mut [f64]) {
    let n = out.len();
    match reg {
        Reg::Grad => {
            dxp_adjoint_add(f, &p[..n], out);
            dyp_adjoint_add(f, &p[n..], out);
        }
        Reg::Hessian => {
            gx.iter_mut().for_each(|v| *v = 0.0);
            gy.iter_mut().for_each(|v| *v = 0.0);
            dxm_adjoint_add(f, &p[..n], gx);
            dym_adjoint_add(f, &p[n..2 * n], gx);
            dxm_adjoint_add(f, &p[2 * n..3 * n], gy);
            dym_adjoint_add(f, &p[3 * n..], gy);
            let wide = f.widened();
            dxp_adjoint_add(&wide, gx, out);
            dyp_adjoint_add(&wide, gy, out);
        }
    }
}

fn fid_forward(f: &Frame, fid: Fid, u: &[f64], out: &mut [f64], scratch: &mut BlurScratch) {
    match fid {
        Fid::Identity => {
            out.iter_mut().for_each(|v| *v = 0.0);
            for (gi, gj) in f.active.pixels() {
                let k = local(f, gi, gj);
                out[k] = u[k];
            }
        }
        Fid::Blur(kernel) => blur_into(f, kernel, u, out, scratch),
    }
}

fn fid_adjoint_add(f: &Frame, fid: Fid, q: &[f64], out: &mut [f64], scratch: &mut BlurScratch) {
    match fid {
        Fid::Identity => {
            for (gi, gj) in f.active.pixels() {
                let k = local(f, gi, gj);
                out[k] += q[k];
            }
        }
        Fid::Blur(kernel) => blur_adjoint_add(f, kernel, q, out, scratch),
    }
}

// ---------------------------------------------------------------------------
// Outer loop

/// Iterate of the outer loop: `ũ⁽ⁿ⁾`, `λ⁽ⁿ⁾` and the cached `P_B ũ⁽ⁿ⁾`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlmState {
    pub n: usize,
    pub u: StackedField,
    pub lambda: StackedField,
    pub consensus: StackedField,
}

impl AlmState {
    /// `ũ⁽⁰⁾ = 0`, `λ⁽⁰⁾ = 0`.
    pub fn zero(layout: &OverlapLayout) -> Self {
        Self {
            n: 0,
            u: layout.zeros_stacked(),
            lambda: layout.zeros_stacked(),
            consensus: layout.zeros_stacked(),
        }
    }
}

/// Per-step summary of the local solves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub max_inner_iters: usize,
    /// Largest local gap at exit (residual-targeted mode only).
    pub max_gap: Option<f64>,
}

/// Decoupled augmented Lagrangian solver over an overlapping layout.
pub struct Alm<'a> {
    model: &'a Model,
    layout: &'a OverlapLayout,
    params: AlmParams,
    locals: Vec<PrimalDual>,
    state: AlmState,
    pool: rayon::ThreadPool,
}

impl<'a> Alm<'a> {
    /// `workers` threads run the local solves; results do not depend on it.
    pub fn new(
        model: &'a Model,
        layout: &'a OverlapLayout,
        params: AlmParams,
        workers: usize,
    ) -> Result<Self> {
        params.validate(&model.kind())?;
        if workers == 0 {
            return Err(Error::InvalidParameter("need at least one worker".into()));
        }
        let locals = (0..layout.len())
            .map(|s| PrimalDual::for_subdomain(model, layout, s))
            .collect::<Result<Vec<_>>>()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
        Ok(Self {
            model,
            layout,
            params,
            locals,
            state: AlmState::zero(layout),
            pool,
        })
    }

    pub fn state(&self) -> &AlmState {
        &self.state
    }

    pub fn params(&self) -> &AlmParams {
        &self.params
    }

    pub fn layout(&self) -> &OverlapLayout {
        self.layout
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    /// Global image `u⁽ⁿ⁾` from `P_B ũ⁽ⁿ⁾`.
    pub fn solution(&self) -> ScalarField {
        self.layout
            .assemble_global(&self.state.consensus)
            .expect("layout-shaped state")
    }

    /// One outer iteration.
    pub fn step(&mut self) -> Result<StepReport> {
        let eta = self.params.eta;
        let inner = self.params.inner;
        let state = &self.state;
        let reports: Vec<InnerReport> = self.pool.install(|| {
            self.locals
                .par_iter_mut()
                .enumerate()
                .map(|(s, local)| {
                    let uhat: Vec<f64> = state.consensus.parts[s]
                        .as_slice()
                        .iter()
                        .zip(state.lambda.parts[s].as_slice())
                        .map(|(c, l)| c - l / eta)
                        .collect();
                    local.run(&uhat, eta, &inner)
                })
                .collect()
        });
        let u = StackedField {
            parts: self.locals.iter().map(PrimalDual::u).collect(),
        };
        let consensus = self.layout.project_consensus(&u)?;
        let mut lambda = self.state.lambda.clone();
        for ((l, u), c) in lambda.parts.iter_mut().zip(&u.parts).zip(&consensus.parts) {
            for ((l, u), c) in l.as_mut_slice().iter_mut().zip(u.as_slice()).zip(c.as_slice()) {
                *l += eta * (u - c);
            }
        }
        self.state = AlmState {
            n: self.state.n + 1,
            u,
            lambda,
            consensus,
        };
        Ok(StepReport {
            max_inner_iters: reports.iter().map(|r| r.iters).max().unwrap_or(0),
            max_gap: reports
                .iter()
                .filter_map(|r| r.gap)
                .fold(None, |m: Option<f64>, g| Some(m.map_or(g, |m| m.max(g)))),
        })
    }
}

// ---------------------------------------------------------------------------
// Stop rule

/// Relative-change stop rule. Uses `|E(f)|` (or 1 when it is below 1e-12) to
/// scale energy changes, and `‖f‖₂` (same fallback) for iterate changes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopRule {
    energy_scale: f64,
    f_norm: f64,
    tol: f64,
}

impl StopRule {
    pub fn new(model: &Model, tol: f64) -> Result<Self> {
        let f = model.data();
        Ok(Self::from_parts(model.energy(f)?, norm(f.as_slice()), tol))
    }

    pub fn from_parts(energy_of_f: f64, f_norm: f64, tol: f64) -> Self {
        let fallback = |v: f64| if v.is_finite() && v.abs() >= 1e-12 { v.abs() } else { 1.0 };
        Self {
            energy_scale: fallback(energy_of_f),
            f_norm: fallback(f_norm),
            tol,
        }
    }

    /// The quantity compared against `tol`.
    pub fn measure(&self, e_prev: f64, e_cur: f64, u_prev: &ScalarField, u_cur: &ScalarField) -> f64 {
        let de = if e_prev == e_cur { 0.0 } else { (e_prev - e_cur).abs() };
        let du: f64 = u_prev
            .as_slice()
            .iter()
            .zip(u_cur.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let m = (de / self.energy_scale).max(du / self.f_norm);
        if m.is_nan() {
            f64::INFINITY
        } else {
            m
        }
    }

    pub fn check(&self, e_prev: f64, e_cur: f64, u_prev: &ScalarField, u_cur: &ScalarField) -> bool {
        self.measure(e_prev, e_cur, u_prev, u_cur) < self.tol
    }
}

/// `max{|E_prev - E_cur| / |E(f)|, ‖u_prev - u_cur‖₂ / ‖f‖₂} < tol`.
pub fn stop_check(
    e_prev: f64,
    e_cur: f64,
    u_prev: &ScalarField,
    u_cur: &ScalarField,
    f: &ScalarField,
    energy_of_f: f64,
    tol: f64,
) -> bool {
    StopRule::from_parts(energy_of_f, norm(f.as_slice()), tol).check(e_prev, e_cur, u_prev, u_cur)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// Full-domain baseline

/// Step sizes of the non-accelerated full-domain iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CpParams {
    pub sigma: f64,
    pub tau: f64,
}

impl CpParams {
    pub fn defaults(kind: &ModelKind) -> Self {
        match kind {
            ModelKind::ChanVese { .. } => Self {
                sigma: 1.0 / 8f64.sqrt(),
                tau: 1.0 / 8f64.sqrt(),
            },
            ModelKind::TvL1 { .. } => Self {
                sigma: 1.0 / (9.0 * 0.02),
                tau: 0.02,
            },
            ModelKind::HessianL1 { .. } => Self {
                sigma: 1.0 / (65.0 * 0.02),
                tau: 0.02,
            },
        }
    }

    pub fn validate(&self, kind: &ModelKind) -> Result<()> {
        if !(self.sigma > 0.0 && self.tau > 0.0) {
            return Err(Error::InvalidParameter("step sizes must be positive".into()));
        }
        let bound = step_product_bound(kind);
        if !within_bound(self.sigma, self.tau, bound) {
            return Err(Error::InvalidParameter(format!(
                "σ·τ = {} exceeds {bound} for {}",
                self.sigma * self.tau,
                kind.name()
            )));
        }
        Ok(())
    }
}

/// Stateful full-domain primal-dual iteration (`𝒩 = 1` baseline).
#[derive(Debug, Clone)]
pub struct FullPrimalDual {
    engine: PrimalDual,
    // unused with η = 0, kept to share the local update
    uhat: Vec<f64>,
    iters: usize,
}

impl FullPrimalDual {
    pub fn new(model: &Model, params: CpParams) -> Result<Self> {
        params.validate(&model.kind())?;
        let mut engine = PrimalDual::full(model);
        engine.sigma = params.sigma;
        engine.tau = params.tau;
        Ok(Self {
            uhat: vec![0.0; engine.n],
            engine,
            iters: 0,
        })
    }

    /// Advances `iters` iterations. The extrapolation carries across calls,
    /// so splitting a run into blocks gives the same iterates.
    pub fn advance(&mut self, iters: usize) {
        for _ in 0..iters {
            self.engine.iterate(&self.uhat, 0.0, 0.0);
        }
        self.iters += iters;
    }

    pub fn iterations(&self) -> usize {
        self.iters
    }

    pub fn u(&self) -> ScalarField {
        self.engine.u()
    }
}

/// Runs `iters` full-domain iterations from zero; returns the final iterate
/// and the energy after each iteration.
pub fn cp_full(model: &Model, params: CpParams, iters: usize) -> Result<(ScalarField, Vec<f64>)> {
    let mut cp = FullPrimalDual::new(model, params)?;
    let mut trace = Vec::with_capacity(iters);
    for _ in 0..iters {
        cp.advance(1);
        trace.push(model.energy(&cp.u())?);
    }
    Ok((cp.u(), trace))
}

// ---------------------------------------------------------------------------
// Diagnostics

/// A reference critical point `(ũ*, λ*)` for the distance measure `e_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub u: StackedField,
    pub lambda: StackedField,
}

impl Reference {
    pub fn from_state(state: &AlmState) -> Self {
        Self {
            u: state.u.clone(),
            lambda: state.lambda.clone(),
        }
    }
}

/// `η‖P_B(a - b)‖² + ‖λ_a - λ_b‖² / η`.
pub fn lyapunov_distance(
    layout: &OverlapLayout,
    eta: f64,
    u_a: &StackedField,
    lambda_a: &StackedField,
    u_b: &StackedField,
    lambda_b: &StackedField,
) -> Result<f64> {
    let du = layout.project_consensus(&u_a.sub(u_b)?)?;
    let dl = lambda_a.sub(lambda_b)?;
    Ok(eta * du.norm_sq() + dl.norm_sq() / eta)
}

/// One metrics row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagRecord {
    pub n: usize,
    pub energy: f64,
    pub rel_gap: Option<f64>,
    pub consensus_residual: f64,
    /// Displacement from the previous iterate: `d_{n-1}` for row `n`.
    pub d_n: Option<f64>,
    pub e_n: Option<f64>,
    pub psnr: Option<f64>,
    pub elapsed_s: Option<f64>,
}

/// Inputs that are optional in a [`DiagRecord`].
#[derive(Debug, Clone, Copy, Default)]
pub struct DiagContext<'a> {
    pub reference: Option<&'a Reference>,
    pub e_star: Option<f64>,
    pub truth: Option<&'a ScalarField>,
}

/// Diagnostics of `cur` (optionally relative to the previous iterate).
pub fn diagnostics(
    model: &Model,
    layout: &OverlapLayout,
    eta: f64,
    prev: Option<&AlmState>,
    cur: &AlmState,
    ctx: DiagContext<'_>,
) -> Result<DiagRecord> {
    let u = layout.assemble_global(&cur.consensus)?;
    let energy = model.energy(&u)?;
    let d_n = prev
        .map(|p| lyapunov_distance(layout, eta, &p.u, &p.lambda, &cur.u, &cur.lambda))
        .transpose()?;
    let e_n = ctx
        .reference
        .map(|r| lyapunov_distance(layout, eta, &cur.u, &cur.lambda, &r.u, &r.lambda))
        .transpose()?;
    Ok(DiagRecord {
        n: cur.n,
        energy,
        rel_gap: ctx.e_star.map(|e| relative_gap(energy, e)),
        consensus_residual: layout.consensus_residual(&cur.u)?,
        d_n,
        e_n,
        psnr: ctx.truth.map(|t| psnr(&u, t)).transpose()?,
        elapsed_s: None,
    })
}

/// `(E - E*) / |E*|`, or `E - E*` when `E* = 0`.
pub fn relative_gap(energy: f64, e_star: f64) -> f64 {
    if e_star == 0.0 {
        energy - e_star
    } else {
        (energy - e_star) / e_star.abs()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomp::partition_rect;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shape(r: usize, c: usize) -> GridShape {
        GridShape::new(r, c).unwrap()
    }

    fn random(s: GridShape, seed: u64) -> ScalarField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScalarField::from_fn(s, |_, _| rng.gen_range(0.0..1.0))
    }

    fn all_models(f: &ScalarField) -> Vec<Model> {
        vec![
            Model::new(ModelKind::ChanVese { alpha: 10.0, c1: 0.6, c2: 0.1 }, f.clone()).unwrap(),
            Model::new(
                ModelKind::TvL1 {
                    alpha: 10.0,
                    kernel: BlurKernel::new(1).unwrap(),
                },
                f.clone(),
            )
            .unwrap(),
            Model::new(ModelKind::HessianL1 { alpha: 1.0 }, f.clone()).unwrap(),
        ]
    }

    fn layout_for(m: &Model, p: usize, q: usize) -> OverlapLayout {
        OverlapLayout::new(partition_rect(m.shape(), p, q).unwrap(), m.stencil())
    }

    #[test]
    fn parameter_bounds() {
        let f = random(shape(4, 4), 0);
        for m in all_models(&f) {
            let k = m.kind();
            let p = AlmParams::defaults(&k);
            p.validate(&k).unwrap();
            CpParams::defaults(&k).validate(&k).unwrap();
            let mut bad = p.inner;
            bad.sigma0 *= 1.01;
            assert!(bad.validate(&k, p.eta).is_err());
            let mut bad = p.inner;
            bad.gamma = p.eta * 1.5;
            assert!(bad.validate(&k, p.eta).is_err());
            let mut bad = p;
            bad.eta = 0.0;
            assert!(bad.validate(&k).is_err());
            let mut bad = CpParams::defaults(&k);
            bad.tau *= 2.0;
            assert!(bad.validate(&k).is_err());
        }
        assert_eq!(step_product_bound(&all_models(&f)[2].kind()), 1.0 / 65.0);
    }

    #[test]
    fn step_schedule_after_one_iteration() {
        let f = random(shape(6, 6), 1);
        for m in all_models(&f) {
            let layout = layout_for(&m, 2, 2);
            let mut pd = PrimalDual::for_subdomain(&m, &layout, 1).unwrap();
            let mut inner = InnerParams::defaults(&m.kind(), 5.0);
            inner.iters = 1;
            let uhat = vec![0.3; pd.shape().len()];
            pd.run(&uhat, 5.0, &inner);
            let theta0 = 1.0 / (1.0 + 2.0 * inner.gamma * inner.tau0).sqrt();
            let (sigma1, tau1) = pd.steps();
            assert_eq!(tau1, theta0 * inner.tau0);
            assert_eq!(sigma1, inner.sigma0 / theta0);
        }
    }

    #[test]
    fn chan_vese_without_region_term_returns_to_prox_center() {
        // f = (c1 + c2) / 2 makes g vanish
        let f = ScalarField::constant(shape(7, 6), 0.35);
        let m = Model::new(ModelKind::ChanVese { alpha: 10.0, c1: 0.6, c2: 0.1 }, f).unwrap();
        assert!(m.region_field().unwrap().as_slice().iter().all(|&g| g.abs() < 1e-15));
        let layout = layout_for(&m, 2, 2);
        for s in 0..layout.len() {
            let mut pd = PrimalDual::for_subdomain(&m, &layout, s).unwrap();
            pd.set_u(&random(layout.subdomain(s).window.shape(), 3)).unwrap();
            let c = 0.7;
            let uhat: Vec<f64> = layout.subdomain(s).mask().iter().map(|&m| if m { c } else { 0.0 }).collect();
            let mut inner = InnerParams::defaults(&m.kind(), 1.0);
            inner.iters = 2000;
            pd.run(&uhat, 1.0, &inner);
            for (v, &inside) in pd.u().as_slice().iter().zip(layout.subdomain(s).mask()) {
                if inside {
                    assert!((v - c).abs() < 1e-8, "{v}");
                } else {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }

    // E(u) + η/2‖u - û‖² for TV-L1 on a 2×2 grid with the 3×3 kernel: every
    // blurred value is (Σu)/9 under zero padding.
    fn tvl1_2x2_objective(u: [f64; 4], f: [f64; 4], uhat: [f64; 4], alpha: f64, eta: f64) -> f64 {
        let [a, b, c, d] = u; // (0,0) (0,1) (1,0) (1,1)
        let s = (a + b + c + d) / 9.0;
        let fid: f64 = f.iter().map(|fi| (s - fi).abs()).sum();
        let tv = (c - a).hypot(b - a) + (d - b).abs() + (d - c).abs();
        let prox: f64 = u.iter().zip(&uhat).map(|(x, y)| (x - y).powi(2)).sum();
        alpha * fid + tv + 0.5 * eta * prox
    }

    fn grid_search(obj: impl Fn([f64; 4]) -> f64, mut center: [f64; 4], plan: &[(f64, i32)]) -> ([f64; 4], f64) {
        let mut best = (center, obj(center));
        for &(step, half) in plan {
            let c = center;
            for i in -half..=half {
                for j in -half..=half {
                    for k in -half..=half {
                        for l in -half..=half {
                            let u = [
                                c[0] + step * i as f64,
                                c[1] + step * j as f64,
                                c[2] + step * k as f64,
                                c[3] + step * l as f64,
                            ];
                            let v = obj(u);
                            if v < best.1 {
                                best = (u, v);
                            }
                        }
                    }
                }
            }
            center = best.0;
        }
        best
    }

    #[test]
    fn tvl1_local_problem_matches_grid_search() {
        let f = ScalarField::from_rows(&[&[0.8, 0.1], &[0.4, 0.9]]).unwrap();
        let kernel = BlurKernel::new(1).unwrap();
        let (alpha, eta) = (1.0, 1.0);
        let m = Model::new(ModelKind::TvL1 { alpha, kernel }, f.clone()).unwrap();
        let layout = layout_for(&m, 1, 1);
        let mut pd = PrimalDual::for_subdomain(&m, &layout, 0).unwrap();
        let uhat = [0.2, 0.9, 0.5, 0.3];
        let inner = InnerParams {
            iters: 200_000,
            gap_tol: Some(1e-12),
            ..InnerParams::defaults(&m.kind(), eta)
        };
        let rep = pd.run(&uhat, eta, &inner);
        assert!(rep.gap.unwrap() <= 1e-12);
        let u = pd.u();
        let fa = [0.8, 0.1, 0.4, 0.9];
        let obj = |v: [f64; 4]| tvl1_2x2_objective(v, fa, uhat, alpha, eta);
        let (best_u, best) = grid_search(obj, [0.5; 4], &[(0.05, 12), (0.01, 6), (0.002, 6), (0.001, 3)]);
        let pd_u = [u.get(0, 0), u.get(0, 1), u.get(1, 0), u.get(1, 1)];
        let pd_obj = obj(pd_u);
        assert!((pd.objective(&uhat, eta) - pd_obj).abs() < 1e-12);
        assert!(pd_obj <= best + 1e-12, "{pd_obj} vs {best}");
        assert!(best - pd_obj < 1e-4);
        for (a, b) in pd_u.iter().zip(best_u) {
            assert!((a - b).abs() <= 2e-3, "{pd_u:?} vs {best_u:?}");
        }
    }

    #[test]
    fn baseline_matches_exhaustive_search_on_two_pixels() {
        let f = ScalarField::from_rows(&[&[0.9, 0.2]]).unwrap();
        let m = Model::new(ModelKind::ChanVese { alpha: 10.0, c1: 0.6, c2: 0.1 }, f).unwrap();
        let (u, trace) = cp_full(&m, CpParams::defaults(&m.kind()), 2000).unwrap();
        let g = m.region_field().unwrap();
        let (g0, g1) = (g.get(0, 0), g.get(0, 1));
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=1000 {
            for j in 0..=1000 {
                let (a, b) = (i as f64 / 1000.0, j as f64 / 1000.0);
                let e = 10.0 * (a * g0 + b * g1) + (b - a).abs();
                if e < best.0 {
                    best = (e, a, b);
                }
            }
        }
        assert!((trace.last().unwrap() - best.0).abs() < 1e-9);
        assert!((u.get(0, 0) - best.1).abs() < 1e-6 && (u.get(0, 1) - best.2).abs() < 1e-6);
    }

    #[test]
    fn baseline_is_feasible_and_blocks_compose() {
        let f = random(shape(9, 7), 4);
        for m in all_models(&f) {
            let p = CpParams::defaults(&m.kind());
            let (u, trace) = cp_full(&m, p, 7).unwrap();
            assert!(trace.iter().all(|e| e.is_finite()));
            if let ModelKind::ChanVese { .. } = m.kind() {
                assert!(u.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
            }
            let mut split = FullPrimalDual::new(&m, p).unwrap();
            split.advance(3);
            split.advance(4);
            assert_eq!(split.u(), u);
            assert_eq!(split.iterations(), 7);
        }
    }

    #[test]
    fn baseline_energy_settles() {
        let f = random(shape(16, 16), 5);
        for m in all_models(&f) {
            let p = CpParams::defaults(&m.kind());
            let (_, trace) = cp_full(&m, p, 4000).unwrap();
            let last = *trace.last().unwrap();
            let best = trace.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(last - best <= 1e-6 * last.abs().max(1.0), "{:?}", m.kind());
            assert!(last < trace[0]);
        }
    }

    #[test]
    fn single_subdomain_keeps_zero_multiplier() {
        let f = random(shape(8, 8), 6);
        for m in all_models(&f) {
            let layout = layout_for(&m, 1, 1);
            let mut alm = Alm::new(&m, &layout, AlmParams::defaults(&m.kind()), 1).unwrap();
            for _ in 0..20 {
                alm.step().unwrap();
                assert!(alm.state().lambda.parts[0].as_slice().iter().all(|&l| l == 0.0));
            }
        }
    }

    #[test]
    fn single_subdomain_step_is_a_proximal_step() {
        let f = random(shape(6, 5), 7);
        for m in all_models(&f) {
            let layout = layout_for(&m, 1, 1);
            let eta = AlmParams::defaults(&m.kind()).eta;
            let mut p = AlmParams::defaults(&m.kind());
            p.inner.gap_tol = Some(1e-10);
            p.inner.iters = 1_000_000;
            let mut alm = Alm::new(&m, &layout, p, 1).unwrap();
            alm.step().unwrap();
            let prev = alm.solution();
            alm.step().unwrap();
            // the new iterate is an approximate minimiser of E + η/2‖· - u_prev‖²
            let mut pd = PrimalDual::full(&m);
            pd.set_u(&alm.solution()).unwrap();
            let obj = pd.objective(prev.as_slice(), eta);
            let mut exact = PrimalDual::full(&m);
            exact.run(prev.as_slice(), eta, &p.inner);
            assert!((obj - exact.objective(prev.as_slice(), eta)).abs() < 1e-8);
        }
    }

    #[test]
    fn multiplier_stays_orthogonal_and_duals_feasible() {
        let f = random(shape(12, 11), 8);
        for m in all_models(&f) {
            let layout = layout_for(&m, 3, 3);
            let p = AlmParams::defaults(&m.kind());
            let mut alm = Alm::new(&m, &layout, p, 2).unwrap();
            for _ in 0..100 {
                alm.step().unwrap();
                let lam = &alm.state().lambda;
                let proj = layout.project_consensus(lam).unwrap().norm();
                assert!(proj <= 1e-10 * lam.norm().max(1.0), "{proj}");
                for local in &alm.locals {
                    let n = local.n;
                    for k in 0..n {
                        let mag: f64 = local.p.chunks(n).map(|c| c[k] * c[k]).sum::<f64>().sqrt();
                        assert!(mag <= 1.0);
                    }
                    assert!(local.q.iter().all(|q| q.abs() <= m.kind().alpha()));
                }
            }
        }
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let f = random(shape(14, 13), 9);
        for m in all_models(&f) {
            let layout = layout_for(&m, 3, 2);
            let p = AlmParams::defaults(&m.kind());
            let run = |w| {
                let mut alm = Alm::new(&m, &layout, p, w).unwrap();
                for _ in 0..5 {
                    alm.step().unwrap();
                }
                alm.state().clone()
            };
            assert_eq!(run(1), run(4));
        }
    }

    #[test]
    fn stop_rule_examples() {
        let f = random(shape(4, 4), 10);
        let u = random(shape(4, 4), 11);
        assert!(stop_check(2.0, 2.0, &u, &u, &f, 5.0, 1e-12));
        assert!(stop_check(f64::INFINITY, f64::INFINITY, &u, &u, &f, 5.0, 1e-12));
        // energy change ratio 1e-3
        assert!(!stop_check(1.0, 1.0 + 5e-3, &u, &u, &f, 5.0, 1e-4));
        // hand evaluation
        let mut v = u.clone();
        v.set(1, 2, u.get(1, 2) + 0.01);
        let fnorm = f.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
        let rule = StopRule::from_parts(-4.0, fnorm, 1e-3);
        let expected = (0.02f64 / 4.0).max(0.01 / fnorm);
        assert!((rule.measure(3.0, 3.02, &u, &v) - expected).abs() < 1e-15);
        // tiny E(f) falls back to 1
        let rule = StopRule::from_parts(1e-13, fnorm, 1e-3);
        assert!((rule.measure(0.0, 0.5, &u, &u) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn diagnostics_vanish_at_rest_and_at_reference() {
        let f = random(shape(8, 8), 12);
        let m = &all_models(&f)[0];
        let layout = layout_for(m, 2, 2);
        let mut alm = Alm::new(m, &layout, AlmParams::defaults(&m.kind()), 1).unwrap();
        for _ in 0..3 {
            alm.step().unwrap();
        }
        let s = alm.state().clone();
        let r = Reference::from_state(&s);
        let ctx = DiagContext {
            reference: Some(&r),
            e_star: Some(m.energy(&alm.solution()).unwrap()),
            truth: Some(&f),
        };
        let d = diagnostics(m, &layout, 1.0, Some(&s), &s, ctx).unwrap();
        assert_eq!(d.d_n, Some(0.0));
        assert_eq!(d.e_n, Some(0.0));
        assert_eq!(d.rel_gap, Some(0.0));
        assert_eq!(d.n, 3);
        assert!(d.psnr.unwrap().is_finite());
        alm.step().unwrap();
        let d = diagnostics(m, &layout, 1.0, Some(&s), alm.state(), ctx).unwrap();
        assert!(d.d_n.unwrap() > 0.0 && d.e_n.unwrap() > 0.0);
        assert!(d.consensus_residual >= 0.0);
    }
}
