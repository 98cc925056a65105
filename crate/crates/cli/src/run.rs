//! Solver orchestration shared by the binary and the tests.

use std::time::Instant;

use anyhow::{bail, Result};
use ddalm::decomp::{partition_rect, OverlapLayout};
use ddalm::field::psnr;
use ddalm::models::{Model, ModelKind};
use ddalm::ops::{blur, BlurKernel};
use ddalm::solvers::{
    diagnostics, relative_gap, Alm, AlmParams, CpParams, DiagContext, DiagRecord, FullPrimalDual,
    StopRule,
};
use ddalm::ScalarField;

/// Source of the minimum energy `E*` used for the `rel_gap` column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReferenceEnergy {
    None,
    Given(f64),
    /// Energy of the final iterate of this many full-domain iterations.
    Compute(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveConfig {
    pub kind: ModelKind,
    /// Partition `P×Q`; `1×1` runs the full-domain baseline.
    pub subdomains: (usize, usize),
    pub params: AlmParams,
    pub workers: usize,
    pub reference: ReferenceEnergy,
    pub record_elapsed: bool,
}

impl SolveConfig {
    pub fn defaults(kind: ModelKind, subdomains: (usize, usize)) -> Self {
        Self {
            kind,
            subdomains,
            params: AlmParams::defaults(&kind),
            workers: 1,
            reference: ReferenceEnergy::None,
            record_elapsed: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub u: ScalarField,
    /// Stop rule met before the iteration budget ran out.
    pub converged: bool,
    pub iterations: usize,
    pub e_star: Option<f64>,
    pub rows: Vec<DiagRecord>,
    /// Layout used (absent for the full-domain path).
    pub layout: Option<OverlapLayout>,
}

/// Energy of the final iterate of `iters` full-domain iterations.
pub fn reference_energy(model: &Model, iters: usize) -> Result<f64> {
    let mut cp = FullPrimalDual::new(model, CpParams::defaults(&model.kind()))?;
    cp.advance(iters);
    Ok(model.energy(&cp.u())?)
}

/// Runs the solver on data `f`, handing each metrics row to `sink`.
///
/// With more than one subdomain every outer iteration yields a row. With a
/// single subdomain the full-domain iteration runs in blocks of
/// `params.inner.iters` steps and each block yields a row.
pub fn solve(
    f: &ScalarField,
    truth: Option<&ScalarField>,
    cfg: &SolveConfig,
    mut sink: impl FnMut(&DiagRecord) -> Result<()>,
) -> Result<SolveReport> {
    let model = Model::new(cfg.kind, f.clone())?;
    cfg.params.validate(&cfg.kind)?;
    if cfg.params.max_outer == 0 {
        bail!("max-outer must be at least 1");
    }
    let e_star = match cfg.reference {
        ReferenceEnergy::None => None,
        ReferenceEnergy::Given(e) => Some(e),
        ReferenceEnergy::Compute(iters) => Some(reference_energy(&model, iters)?),
    };
    let (p, q) = cfg.subdomains;
    let partition = partition_rect(model.shape(), p, q)?;
    let rule = StopRule::new(&model, cfg.params.tol)?;
    let start = Instant::now();
    let elapsed = |t: &Instant| cfg.record_elapsed.then(|| t.elapsed().as_secs_f64());
    let mut rows = Vec::new();

    if p * q == 1 {
        let mut cp = FullPrimalDual::new(&model, CpParams::defaults(&cfg.kind))?;
        let mut u_prev = cp.u();
        let mut e_prev = model.energy(&u_prev)?;
        for n in 1..=cfg.params.max_outer {
            cp.advance(cfg.params.inner.iters);
            let u = cp.u();
            let energy = model.energy(&u)?;
            let row = DiagRecord {
                n,
                energy,
                rel_gap: e_star.map(|e| relative_gap(energy, e)),
                consensus_residual: 0.0,
                d_n: None,
                e_n: None,
                psnr: truth.map(|t| psnr(&u, t)).transpose()?,
                elapsed_s: elapsed(&start),
            };
            sink(&row)?;
            rows.push(row);
            if rule.check(e_prev, energy, &u_prev, &u) {
                return Ok(SolveReport {
                    u,
                    converged: true,
                    iterations: n,
                    e_star,
                    rows,
                    layout: None,
                });
            }
            u_prev = u;
            e_prev = energy;
        }
        return Ok(SolveReport {
            u: cp.u(),
            converged: false,
            iterations: cfg.params.max_outer,
            e_star,
            rows,
            layout: None,
        });
    }

    let layout = OverlapLayout::new(partition, model.stencil());
    let mut alm = Alm::new(&model, &layout, cfg.params, cfg.workers)?;
    let ctx = DiagContext {
        reference: None,
        e_star,
        truth,
    };
    let mut u_prev = alm.solution();
    let mut e_prev = model.energy(&u_prev)?;
    let mut converged = false;
    let mut n = 0;
    while n < cfg.params.max_outer {
        let prev = alm.state().clone();
        alm.step()?;
        n += 1;
        let mut row = diagnostics(&model, &layout, cfg.params.eta, Some(&prev), alm.state(), ctx)?;
        row.elapsed_s = elapsed(&start);
        sink(&row)?;
        rows.push(row);
        let u = alm.solution();
        if rule.check(e_prev, row.energy, &u_prev, &u) {
            converged = true;
            break;
        }
        u_prev = u;
        e_prev = row.energy;
    }
    let u = alm.solution();
    drop(alm);
    Ok(SolveReport {
        u,
        converged,
        iterations: n,
        e_star,
        rows,
        layout: Some(layout),
    })
}

/// Blur (when `kernel` is given) followed by salt-and-pepper noise.
pub fn corrupt(
    clean: &ScalarField,
    kernel: Option<BlurKernel>,
    noise: f64,
    seed: u64,
) -> Result<ScalarField> {
    let blurred = match kernel {
        Some(k) => blur(clean, k),
        None => clean.clone(),
    };
    if noise == 0.0 {
        return Ok(blurred);
    }
    Ok(ddalm::models::salt_pepper(&blurred, noise, seed)?)
}
