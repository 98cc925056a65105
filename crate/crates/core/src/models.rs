//! Energies of the three imaging models and corruption synthesis.
//!
//! Every energy has the integral structure `E(u) = Σ_{(i,j)} T(u)_{ij}` with a
//! pointwise integrand `T`; the local energy of subdomain `s` sums `T` over
//! the tile `Ω_s` using operators restricted to `Ω̃_s`.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decomp::{OverlapLayout, StencilSpec};
use crate::error::{ensure_same, Error, Result};
use crate::field::{GridShape, ScalarField, TensorField, VectorField};
use crate::ops::{
    blur_into, grad_plus_into, hessian_into, BlurKernel, BlurScratch, Frame, HessianScratch,
};

/// Model selector with its scalar parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelKind {
    /// Convex Chan–Vese segmentation: `α⟨u, g⟩ + χ_{[0,1]}(u) + ‖∇⁺u‖₁`.
    ChanVese { alpha: f64, c1: f64, c2: f64 },
    /// TV-L¹ deblurring: `α‖Au - f‖₁ + ‖∇⁺u‖₁`.
    TvL1 { alpha: f64, kernel: BlurKernel },
    /// Hessian-L¹ denoising: `α‖u - f‖₁ + ‖∇⁻∇⁺u‖₁`.
    HessianL1 { alpha: f64 },
}

impl ModelKind {
    pub fn alpha(&self) -> f64 {
        match *self {
            ModelKind::ChanVese { alpha, .. }
            | ModelKind::TvL1 { alpha, .. }
            | ModelKind::HessianL1 { alpha } => alpha,
        }
    }

    /// Stencil whose essential domain covers the integrand.
    pub fn stencil(&self) -> StencilSpec {
        match *self {
            ModelKind::ChanVese { .. } => StencilSpec::ForwardOne,
            ModelKind::TvL1 { kernel, .. } => StencilSpec::Band(kernel.half_width()),
            ModelKind::HessianL1 { .. } => StencilSpec::BackwardForward,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::ChanVese { .. } => "ccv",
            ModelKind::TvL1 { .. } => "tvl1",
            ModelKind::HessianL1 { .. } => "hessl1",
        }
    }
}

/// A model together with its data image `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    kind: ModelKind,
    f: ScalarField,
    // (f - c1)² - (f - c2)² for Chan–Vese; unused otherwise
    g: Option<ScalarField>,
}

impl Model {
    pub fn new(kind: ModelKind, f: ScalarField) -> Result<Self> {
        let alpha = kind.alpha();
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!("alpha must be positive, got {alpha}")));
        }
        let g = match kind {
            ModelKind::ChanVese { c1, c2, .. } => {
                if c1 == c2 || !c1.is_finite() || !c2.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "region intensities must be finite and distinct, got {c1} and {c2}"
                    )));
                }
                Some(f.map(|v| (v - c1).powi(2) - (v - c2).powi(2)))
            }
            _ => None,
        };
        Ok(Self { kind, f, g })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn data(&self) -> &ScalarField {
        &self.f
    }

    pub fn shape(&self) -> GridShape {
        self.f.shape()
    }

    /// `g = (f - c1)² - (f - c2)²` for Chan–Vese.
    pub fn region_field(&self) -> Option<&ScalarField> {
        self.g.as_ref()
    }

    pub fn stencil(&self) -> StencilSpec {
        self.kind.stencil()
    }

    /// Integrand over the active rect of `frame`; `u` lives on the window.
    /// The returned vectors are indexed like the window.
    pub fn integrand_on(&self, frame: &Frame, u: &[f64]) -> Integrand {
        let shape = frame.local_shape();
        let mut values = vec![0.0; shape.len()];
        let mut infeasible = vec![false; shape.len()];
        let alpha = self.kind.alpha();
        let win = frame.window;
        let data_at = |field: &ScalarField, gi: usize, gj: usize| field.get(gi, gj);
        let local = |gi: usize, gj: usize| (gi - win.row0) * win.cols + (gj - win.col0);
        match self.kind {
            ModelKind::ChanVese { .. } => {
                let g = self.g.as_ref().expect("chan-vese has g");
                let mut grad = VectorField::zeros(shape);
                grad_plus_into(frame, u, &mut grad);
                for (gi, gj) in frame.active.pixels() {
                    let k = local(gi, gj);
                    let (dx, dy) = (grad.x.as_slice()[k], grad.y.as_slice()[k]);
                    values[k] = alpha * u[k] * data_at(g, gi, gj) + (dx * dx + dy * dy).sqrt();
                    infeasible[k] = !(0.0..=1.0).contains(&u[k]);
                }
            }
            ModelKind::TvL1 { kernel, .. } => {
                let mut grad = VectorField::zeros(shape);
                grad_plus_into(frame, u, &mut grad);
                let mut au = vec![0.0; shape.len()];
                blur_into(frame, kernel, u, &mut au, &mut BlurScratch::new(shape));
                for (gi, gj) in frame.active.pixels() {
                    let k = local(gi, gj);
                    let (dx, dy) = (grad.x.as_slice()[k], grad.y.as_slice()[k]);
                    values[k] =
                        alpha * (au[k] - data_at(&self.f, gi, gj)).abs() + (dx * dx + dy * dy).sqrt();
                }
            }
            ModelKind::HessianL1 { .. } => {
                let mut h = TensorField::zeros(shape);
                hessian_into(frame, u, &mut h, &mut HessianScratch::new(shape));
                for (gi, gj) in frame.active.pixels() {
                    let k = local(gi, gj);
                    let m = [&h.xx, &h.xy, &h.yx, &h.yy]
                        .iter()
                        .map(|c| c.as_slice()[k].powi(2))
                        .sum::<f64>()
                        .sqrt();
                    values[k] = alpha * (u[k] - data_at(&self.f, gi, gj)).abs() + m;
                }
            }
        }
        Integrand {
            frame: *frame,
            values,
            infeasible,
        }
    }

    /// Pointwise integrand `T(u)` on the whole grid.
    pub fn integrand(&self, u: &ScalarField) -> Result<Integrand> {
        ensure_same(u.shape(), self.shape())?;
        Ok(self.integrand_on(&Frame::full(self.shape()), u.as_slice()))
    }

    /// `E(u)`; `+∞` when the Chan–Vese box constraint is violated.
    pub fn energy(&self, u: &ScalarField) -> Result<f64> {
        Ok(self.integrand(u)?.total())
    }

    /// `E_s(ũ_s) = Σ_{Ω_s} T(ũ_s)` evaluated from values on `Ω̃_s` only.
    pub fn local_energy(&self, layout: &OverlapLayout, s: usize, u_s: &ScalarField) -> Result<f64> {
        self.check_layout(layout)?;
        let sub = layout
            .subdomains()
            .get(s)
            .ok_or_else(|| Error::InvalidParameter(format!("no subdomain {s}")))?;
        ensure_same(u_s.shape(), sub.window.shape())?;
        // values outside Ω̃_s are ignored: read a masked copy
        let masked: Vec<f64> = u_s
            .as_slice()
            .iter()
            .zip(sub.mask())
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect();
        Ok(self.integrand_on(&sub.frame(self.shape()), &masked).total())
    }

    pub(crate) fn check_layout(&self, layout: &OverlapLayout) -> Result<()> {
        ensure_same(layout.shape(), self.shape())?;
        if layout.stencil() != self.stencil() {
            return Err(Error::InvalidParameter(format!(
                "layout built for {:?}, model needs {:?}",
                layout.stencil(),
                self.stencil()
            )));
        }
        Ok(())
    }
}

/// Integrand values on a frame, with the Chan–Vese indicator kept as a flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Integrand {
    frame: Frame,
    values: Vec<f64>,
    infeasible: Vec<bool>,
}

impl Integrand {
    /// Finite part of `T` at a global pixel of the active rect.
    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[self.local(row, col)]
    }

    pub fn is_feasible_at(&self, row: usize, col: usize) -> bool {
        !self.infeasible[self.local(row, col)]
    }

    fn local(&self, row: usize, col: usize) -> usize {
        let w = self.frame.window;
        (row - w.row0) * w.cols + (col - w.col0)
    }

    /// Sum over the active rect in row-major order; `+∞` if any pixel is
    /// infeasible.
    pub fn total(&self) -> f64 {
        let mut acc = 0.0;
        for (i, j) in self.frame.active.pixels() {
            let k = self.local(i, j);
            if self.infeasible[k] {
                return f64::INFINITY;
            }
            acc += self.values[k];
        }
        acc
    }

    /// Finite part as a field over the window.
    pub fn to_field(&self) -> ScalarField {
        ScalarField::from_vec(self.frame.window.shape(), self.values.clone()).expect("finite")
    }
}

/// Impulse noise: each pixel is replaced with probability `fraction` by 0 or 1
/// (equally likely).
///
/// Pixel `k` draws from ChaCha8 keyed by `seed`, at stream offset `4k` words,
/// so the result does not depend on traversal order.
pub fn salt_pepper(u: &ScalarField, fraction: f64, seed: u64) -> Result<ScalarField> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidParameter(format!(
            "noise fraction must lie in [0, 1], got {fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = u.clone();
    for (k, v) in out.as_mut_slice().iter_mut().enumerate() {
        rng.set_word_pos(4 * k as u128);
        let hit = unit(rng.next_u64()) < fraction;
        let salt = rng.next_u64() >> 63 == 1;
        if hit {
            *v = if salt { 1.0 } else { 0.0 };
        }
    }
    Ok(out)
}

fn unit(x: u64) -> f64 {
    (x >> 11) as f64 / (1u64 << 53) as f64
}

/// Binary mask: 1 where `u >= 1/2`, else 0.
pub fn threshold_half(u: &ScalarField) -> ScalarField {
    u.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}
