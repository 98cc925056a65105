//! Rectangular partitions, essential domains and the consensus projection.
//!
//! Each tile `Ω_s` of a nonoverlapping partition is grown to its essential
//! domain `Ω̃_s`, the set of pixels the model integrand reads when evaluated
//! on `Ω_s`. A subdomain field is stored on the bounding window of `Ω̃_s`
//! with global indexing and is identically zero on window pixels outside
//! `Ω̃_s`. Pixels shared by several `Ω̃_s` are tracked by membership lists
//! sorted by subdomain index; the consensus projection averages over them in
//! that order, so results do not depend on how work is scheduled.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{GridShape, PixelIndex, ScalarField};
use crate::ops::{Frame, FrameOp, OpKind, Rect};

/// Nonoverlapping `P x Q` grid of rectangular tiles, numbered row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    shape: GridShape,
    row_splits: usize,
    col_splits: usize,
    tiles: Vec<Rect>,
}

fn bands(len: usize, parts: usize) -> Vec<(usize, usize)> {
    let base = len / parts;
    let extra = len % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for k in 0..parts {
        let size = base + usize::from(k < extra);
        out.push((start, size));
        start += size;
    }
    out
}

/// Splits the grid into `row_splits x col_splits` tiles. Band sizes differ by
/// at most one; the larger bands come first.
pub fn partition_rect(shape: GridShape, row_splits: usize, col_splits: usize) -> Result<Partition> {
    if row_splits == 0 || row_splits > shape.rows || col_splits == 0 || col_splits > shape.cols {
        return Err(Error::InvalidParameter(format!(
            "cannot split a {shape} grid into {row_splits}x{col_splits} tiles"
        )));
    }
    let rb = bands(shape.rows, row_splits);
    let cb = bands(shape.cols, col_splits);
    let tiles = rb
        .iter()
        .flat_map(|&(r0, nr)| cb.iter().map(move |&(c0, nc)| Rect::new(r0, c0, nr, nc)))
        .collect();
    Ok(Partition {
        shape,
        row_splits,
        col_splits,
        tiles,
    })
}

impl Partition {
    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn tiles(&self) -> &[Rect] {
        &self.tiles
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn splits(&self) -> (usize, usize) {
        (self.row_splits, self.col_splits)
    }

    /// Index of the tile containing a pixel.
    pub fn tile_of(&self, row: usize, col: usize) -> usize {
        let p = self
            .tiles
            .iter()
            .step_by(self.col_splits)
            .position(|t| row < t.row_end())
            .expect("row in grid");
        let q = self.tiles[..self.col_splits]
            .iter()
            .position(|t| col < t.col_end())
            .expect("col in grid");
        p * self.col_splits + q
    }
}

/// How a tile is grown into its essential domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StencilSpec {
    /// Adds `(i+1, j)` and `(i, j+1)`: the forward gradient.
    ForwardOne,
    /// Adds the `(2l+1)²` square around each pixel: a blur of half-width `l`.
    Band(usize),
    /// Backward differences of the forward gradient: the discrete Hessian.
    BackwardForward,
}

impl StencilSpec {
    /// Pixels whose values enter the integrand at `(i, j)`, the pixel itself
    /// included. Neumann boundary rules drop terms that vanish identically,
    /// so the union over a tile is the minimal essential domain.
    pub fn dependencies(&self, shape: GridShape, i: usize, j: usize) -> Vec<PixelIndex> {
        let (m, n) = (shape.rows, shape.cols);
        let mut out = vec![PixelIndex::new(i, j)];
        match *self {
            StencilSpec::ForwardOne => {
                if i + 1 < m {
                    out.push(PixelIndex::new(i + 1, j));
                }
                if j + 1 < n {
                    out.push(PixelIndex::new(i, j + 1));
                }
            }
            StencilSpec::Band(l) => {
                let r = i.saturating_sub(l)..(i + l + 1).min(m);
                for a in r {
                    for b in j.saturating_sub(l)..(j + l + 1).min(n) {
                        if (a, b) != (i, j) {
                            out.push(PixelIndex::new(a, b));
                        }
                    }
                }
            }
            StencilSpec::BackwardForward => {
                // D_x⁻D_x⁺ (i > 0)
                if i > 0 {
                    out.push(PixelIndex::new(i - 1, j));
                    if i + 1 < m {
                        out.push(PixelIndex::new(i + 1, j));
                    }
                }
                // D_y⁻D_y⁺ (j > 0)
                if j > 0 {
                    out.push(PixelIndex::new(i, j - 1));
                    if j + 1 < n {
                        out.push(PixelIndex::new(i, j + 1));
                    }
                }
                // D_y⁻D_x⁺ (j > 0, i < M-1)
                if j > 0 && i + 1 < m {
                    out.push(PixelIndex::new(i + 1, j));
                    out.push(PixelIndex::new(i + 1, j - 1));
                    out.push(PixelIndex::new(i, j - 1));
                }
                // D_x⁻D_y⁺ (i > 0, j < N-1)
                if i > 0 && j + 1 < n {
                    out.push(PixelIndex::new(i, j + 1));
                    out.push(PixelIndex::new(i - 1, j + 1));
                    out.push(PixelIndex::new(i - 1, j));
                }
                out.sort();
                out.dedup();
            }
        }
        out
    }
}

/// A subset of grid pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelSet {
    shape: GridShape,
    mask: Vec<bool>,
}

impl PixelSet {
    pub fn empty(shape: GridShape) -> Self {
        Self {
            shape,
            mask: vec![false; shape.len()],
        }
    }

    pub fn from_rect(shape: GridShape, r: Rect) -> Self {
        let mut s = Self::empty(shape);
        for (i, j) in r.pixels() {
            s.insert(i, j);
        }
        s
    }

    pub fn insert(&mut self, row: usize, col: usize) {
        let k = self.shape.index(row, col);
        self.mask[k] = true;
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.mask[self.shape.index(row, col)]
    }

    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixels in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = PixelIndex> + '_ {
        let cols = self.shape.cols;
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(k, _)| PixelIndex::new(k / cols, k % cols))
    }

    pub fn is_subset_of(&self, other: &PixelSet) -> bool {
        self.mask.iter().zip(&other.mask).all(|(&a, &b)| !a || b)
    }

    /// Smallest rectangle containing every pixel; `None` when empty.
    pub fn bounding_rect(&self) -> Option<Rect> {
        let mut it = self.iter();
        let first = it.next()?;
        let (mut r0, mut r1, mut c0, mut c1) = (first.row, first.row, first.col, first.col);
        for p in it {
            r0 = r0.min(p.row);
            r1 = r1.max(p.row);
            c0 = c0.min(p.col);
            c1 = c1.max(p.col);
        }
        Some(Rect::new(r0, c0, r1 - r0 + 1, c1 - c0 + 1))
    }
}

/// Essential domain of a tile: the tile plus every pixel its stencil reads.
pub fn essential_domain(shape: GridShape, tile: Rect, stencil: StencilSpec) -> PixelSet {
    let mut set = PixelSet::empty(shape);
    for (i, j) in tile.pixels() {
        for p in stencil.dependencies(shape, i, j) {
            set.insert(p.row, p.col);
        }
    }
    set
}

/// One subdomain: its tile `Ω_s`, the bounding window of `Ω̃_s`, and the
/// window-local mask of `Ω̃_s`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subdomain {
    pub tile: Rect,
    pub window: Rect,
    mask: Vec<bool>,
}

impl Subdomain {
    pub fn in_essential(&self, row: usize, col: usize) -> bool {
        self.window.contains(row, col)
            && self.mask[(row - self.window.row0) * self.window.cols + (col - self.window.col0)]
    }

    /// Window-local mask of `Ω̃_s`.
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Frame for operators restricted to the tile.
    pub fn frame(&self, global: GridShape) -> Frame {
        Frame {
            global,
            window: self.window,
            active: self.tile,
        }
    }

    pub fn local_index(&self, row: usize, col: usize) -> usize {
        (row - self.window.row0) * self.window.cols + (col - self.window.col0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Member {
    sub: u32,
    local: u32,
}

/// Overlapping decomposition `{Ω̃_s}` built from a partition and a stencil.
#[derive(Debug, Clone)]
pub struct OverlapLayout {
    partition: Partition,
    stencil: StencilSpec,
    subs: Vec<Subdomain>,
    // CSR membership: members[offsets[k]..offsets[k+1]] for global pixel k
    offsets: Vec<usize>,
    members: Vec<Member>,
}

impl OverlapLayout {
    pub fn new(partition: Partition, stencil: StencilSpec) -> Self {
        let shape = partition.shape();
        let subs: Vec<Subdomain> = partition
            .tiles()
            .iter()
            .map(|&tile| {
                let ed = essential_domain(shape, tile, stencil);
                let window = ed.bounding_rect().expect("tiles are nonempty");
                let mask = window.pixels().map(|(i, j)| ed.contains(i, j)).collect();
                Subdomain { tile, window, mask }
            })
            .collect();

        let mut counts = vec![0usize; shape.len()];
        for sub in &subs {
            for ((i, j), &m) in sub.window.pixels().zip(&sub.mask) {
                if m {
                    counts[shape.index(i, j)] += 1;
                }
            }
        }
        let mut offsets = Vec::with_capacity(shape.len() + 1);
        offsets.push(0);
        for c in &counts {
            offsets.push(offsets.last().unwrap() + c);
        }
        let mut fill = offsets[..shape.len()].to_vec();
        let mut members = vec![Member { sub: 0, local: 0 }; *offsets.last().unwrap()];
        // subdomains visited in ascending order, so each list ends up sorted
        for (s, sub) in subs.iter().enumerate() {
            for (local, ((i, j), &m)) in sub.window.pixels().zip(&sub.mask).enumerate() {
                if m {
                    let k = shape.index(i, j);
                    members[fill[k]] = Member {
                        sub: s as u32,
                        local: local as u32,
                    };
                    fill[k] += 1;
                }
            }
        }
        Self {
            partition,
            stencil,
            subs,
            offsets,
            members,
        }
    }

    pub fn shape(&self) -> GridShape {
        self.partition.shape()
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn stencil(&self) -> StencilSpec {
        self.stencil
    }

    pub fn len(&self) -> usize {
        self.subs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subs.is_empty()
    }

    pub fn subdomain(&self, s: usize) -> &Subdomain {
        &self.subs[s]
    }

    pub fn subdomains(&self) -> &[Subdomain] {
        &self.subs
    }

    /// Essential domain `Ω̃_s` as a global pixel set.
    pub fn essential_set(&self, s: usize) -> PixelSet {
        let sub = &self.subs[s];
        let mut set = PixelSet::empty(self.shape());
        for ((i, j), &m) in sub.window.pixels().zip(&sub.mask) {
            if m {
                set.insert(i, j);
            }
        }
        set
    }

    /// Number of subdomains whose essential domain contains the pixel.
    pub fn count(&self, row: usize, col: usize) -> usize {
        let k = self.shape().index(row, col);
        self.offsets[k + 1] - self.offsets[k]
    }

    /// Subdomains containing the pixel, ascending.
    pub fn membership(&self, row: usize, col: usize) -> Vec<usize> {
        let k = self.shape().index(row, col);
        self.members[self.offsets[k]..self.offsets[k + 1]]
            .iter()
            .map(|m| m.sub as usize)
            .collect()
    }

    pub fn zeros_stacked(&self) -> StackedField {
        StackedField {
            parts: self
                .subs
                .iter()
                .map(|s| ScalarField::zeros(s.window.shape()))
                .collect(),
        }
    }

    /// Restriction of a global field to every `Ω̃_s`.
    pub fn restrict(&self, u: &ScalarField) -> Result<StackedField> {
        crate::error::ensure_same(u.shape(), self.shape())?;
        let parts = self
            .subs
            .iter()
            .map(|sub| {
                let data = sub
                    .window
                    .pixels()
                    .zip(&sub.mask)
                    .map(|((i, j), &m)| if m { u.get(i, j) } else { 0.0 })
                    .collect();
                ScalarField::from_vec(sub.window.shape(), data).expect("finite input")
            })
            .collect();
        Ok(StackedField { parts })
    }

    fn check_stacked(&self, u: &StackedField) -> Result<()> {
        if u.parts.len() != self.subs.len() {
            return Err(Error::InvalidParameter(format!(
                "stacked field has {} parts, layout has {} subdomains",
                u.parts.len(),
                self.subs.len()
            )));
        }
        for (p, s) in u.parts.iter().zip(&self.subs) {
            crate::error::ensure_same(p.shape(), s.window.shape())?;
        }
        Ok(())
    }

    /// Membership average at every pixel, summed in ascending subdomain order.
    pub fn assemble_global(&self, u: &StackedField) -> Result<ScalarField> {
        self.check_stacked(u)?;
        let shape = self.shape();
        let mut out = ScalarField::zeros(shape);
        out.as_mut_slice()
            .par_chunks_mut(shape.cols)
            .enumerate()
            .for_each(|(i, row)| {
                for (j, v) in row.iter_mut().enumerate() {
                    let k = i * shape.cols + j;
                    let ms = &self.members[self.offsets[k]..self.offsets[k + 1]];
                    let value = |m: &Member| u.parts[m.sub as usize].as_slice()[m.local as usize];
                    let first = value(&ms[0]);
                    // an already consistent list keeps its exact value
                    if ms[1..].iter().all(|m| value(m).to_bits() == first.to_bits()) {
                        *v = first;
                        continue;
                    }
                    let mut acc = 0.0;
                    for m in ms {
                        acc += value(m);
                    }
                    *v = acc / ms.len() as f64;
                }
            });
        Ok(out)
    }

    /// Orthogonal projection `P_B` onto consistent stacked fields.
    pub fn project_consensus(&self, u: &StackedField) -> Result<StackedField> {
        let mut out = u.clone();
        self.project_consensus_in_place(&mut out)?;
        Ok(out)
    }

    /// In-place `P_B`. Averages are formed from a read-only pass before any
    /// part is written.
    pub fn project_consensus_in_place(&self, u: &mut StackedField) -> Result<()> {
        let avg = self.assemble_global(u)?;
        let shape = self.shape();
        u.parts
            .par_iter_mut()
            .zip(self.subs.par_iter())
            .for_each(|(part, sub)| {
                let data = part.as_mut_slice();
                for (local, ((i, j), &m)) in sub.window.pixels().zip(&sub.mask).enumerate() {
                    if m && self.count(i, j) > 1 {
                        data[local] = avg.as_slice()[shape.index(i, j)];
                    }
                }
            });
        Ok(())
    }

    /// `‖(I - P_B) ũ‖₂`.
    pub fn consensus_residual(&self, u: &StackedField) -> Result<f64> {
        let p = self.project_consensus(u)?;
        Ok(u.sub(&p)?.norm())
    }

    /// Pairwise jumps `ũ_s - ũ_t` on every nonempty thick interface
    /// `Γ̃_st = Ω̃_s ∩ Ω̃_t`, `s < t`, plus the consensus residual.
    pub fn jump(&self, u: &StackedField) -> Result<JumpReport> {
        self.check_stacked(u)?;
        let shape = self.shape();
        let mut pairs: Vec<InterfaceJump> = Vec::new();
        for k in 0..shape.len() {
            let ms = &self.members[self.offsets[k]..self.offsets[k + 1]];
            for (a, ma) in ms.iter().enumerate() {
                for mb in &ms[a + 1..] {
                    let (s, t) = (ma.sub as usize, mb.sub as usize);
                    let value = u.parts[s].as_slice()[ma.local as usize]
                        - u.parts[t].as_slice()[mb.local as usize];
                    let pixel = PixelIndex::new(k / shape.cols, k % shape.cols);
                    match pairs.iter_mut().find(|p| p.s == s && p.t == t) {
                        Some(p) => p.values.push((pixel, value)),
                        None => pairs.push(InterfaceJump {
                            s,
                            t,
                            values: vec![(pixel, value)],
                        }),
                    }
                }
            }
        }
        pairs.sort_by_key(|p| (p.s, p.t));
        Ok(JumpReport {
            pairs,
            residual: self.consensus_residual(u)?,
        })
    }

    /// Operator restricted to tile `s`, verified to read only `Ω̃_s`.
    pub fn restricted(&self, s: usize, kind: OpKind) -> Result<RestrictedOp<'_>> {
        if s >= self.subs.len() {
            return Err(Error::InvalidParameter(format!("no subdomain {s}")));
        }
        let shape = self.shape();
        let sub = &self.subs[s];
        let stencil = match kind {
            OpKind::Identity => None,
            OpKind::GradPlus => Some(StencilSpec::ForwardOne),
            OpKind::Hessian => Some(StencilSpec::BackwardForward),
            OpKind::Blur(k) => Some(StencilSpec::Band(k.half_width())),
            OpKind::GradMinus => {
                return Err(Error::InvalidParameter(
                    "backward gradient has no restricted form".into(),
                ))
            }
        };
        for (i, j) in sub.tile.pixels() {
            let deps = match stencil {
                Some(st) => st.dependencies(shape, i, j),
                None => vec![PixelIndex::new(i, j)],
            };
            if let Some(p) = deps.iter().find(|p| !sub.in_essential(p.row, p.col)) {
                return Err(Error::StencilEscape {
                    subdomain: s,
                    row: p.row,
                    col: p.col,
                });
            }
        }
        Ok(RestrictedOp {
            op: FrameOp::new(kind, sub.frame(shape)),
            sub,
        })
    }
}

/// Per-pair jump values on one thick interface.
#[derive(Debug, Clone, PartialEq)]
pub struct InterfaceJump {
    pub s: usize,
    pub t: usize,
    pub values: Vec<(PixelIndex, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JumpReport {
    pub pairs: Vec<InterfaceJump>,
    pub residual: f64,
}

/// Operator `T|_{Ω_s}` acting on a subdomain field.
#[derive(Debug, Clone, Copy)]
pub struct RestrictedOp<'a> {
    op: FrameOp,
    sub: &'a Subdomain,
}

impl RestrictedOp<'_> {
    pub fn frame_op(&self) -> &FrameOp {
        &self.op
    }

    /// Output channels are concatenated, each shaped like the window and
    /// zero outside the tile.
    pub fn apply(&self, u_s: &ScalarField) -> Vec<f64> {
        let mut out = vec![0.0; self.op.output_len()];
        self.op.apply(u_s.as_slice(), &mut out);
        out
    }

    /// Adjoint, masked back to `Ω̃_s`.
    pub fn adjoint(&self, p: &[f64]) -> ScalarField {
        let mut out = vec![0.0; self.op.input_len()];
        self.op.adjoint(p, &mut out);
        for (v, &m) in out.iter_mut().zip(self.sub.mask()) {
            debug_assert!(m || *v == 0.0);
            if !m {
                *v = 0.0;
            }
        }
        ScalarField::from_vec(self.sub.window.shape(), out).expect("finite")
    }
}

/// Element `ũ = ⊕ ũ_s` of the stacked space; part `s` lives on the window of
/// `Ω̃_s` and vanishes outside `Ω̃_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedField {
    pub parts: Vec<ScalarField>,
}

impl StackedField {
    pub fn inner(&self, other: &StackedField) -> Result<f64> {
        if self.parts.len() != other.parts.len() {
            return Err(Error::InvalidParameter("stacked fields differ in length".into()));
        }
        let mut acc = 0.0;
        for (a, b) in self.parts.iter().zip(&other.parts) {
            acc += crate::field::inner(a, b)?;
        }
        Ok(acc)
    }

    pub fn norm_sq(&self) -> f64 {
        self.parts
            .iter()
            .map(|p| p.as_slice().iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn zip_map(&self, other: &StackedField, f: impl Fn(f64, f64) -> f64 + Copy) -> Result<Self> {
        if self.parts.len() != other.parts.len() {
            return Err(Error::InvalidParameter("stacked fields differ in length".into()));
        }
        let parts = self
            .parts
            .iter()
            .zip(&other.parts)
            .map(|(a, b)| a.zip_map(b, f))
            .collect::<Result<_>>()?;
        Ok(Self { parts })
    }

    pub fn sub(&self, other: &StackedField) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }
}
