//! Grids and pointwise fields.
//!
//! All fields are stored row-major with 0-based `(row, col)` indices. A
//! [`ScalarField`] holds one real per pixel, a [`VectorField`] two channels
//! and a [`TensorField`] four. Norms of multi-channel fields take the
//! pointwise Euclidean magnitude first and then the scalar p-norm.

use std::fmt;

use crate::error::{ensure_same, Error, Result};

/// Grid dimensions: `rows` (M) by `cols` (N).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
}

impl GridShape {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidParameter(format!(
                "grid must be at least 1x1, got {rows}x{cols}"
            )));
        }
        Ok(Self { rows, cols })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.rows && col < self.cols);
        row * self.cols + col
    }

    #[inline]
    pub fn contains(&self, row: isize, col: isize) -> bool {
        row >= 0 && col >= 0 && (row as usize) < self.rows && (col as usize) < self.cols
    }
}

impl fmt::Display for GridShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

/// A pixel position, 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PixelIndex {
    pub row: usize,
    pub col: usize,
}

impl PixelIndex {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// Real-valued function on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    shape: GridShape,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(shape: GridShape) -> Self {
        Self::constant(shape, 0.0)
    }

    pub fn constant(shape: GridShape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: GridShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::InvalidParameter(format!(
                "expected {} values for a {shape} grid, got {}",
                shape.len(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("field values must be finite".into()));
        }
        Ok(Self { shape, data })
    }

    /// Builds a field from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidParameter("ragged rows".into()));
        }
        let shape = GridShape::new(rows.len(), cols)?;
        Self::from_vec(shape, rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    pub fn from_fn(shape: GridShape, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for i in 0..shape.rows {
            for j in 0..shape.cols {
                data.push(f(i, j));
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> GridShape {
        self.shape
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[self.shape.index(row, col)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let k = self.shape.index(row, col);
        self.data[k] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        ensure_same(self.shape, other.shape)?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Two-channel field `(p1, p2)`; channel 1 pairs with the row direction.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub x: ScalarField,
    pub y: ScalarField,
}

impl VectorField {
    pub fn zeros(shape: GridShape) -> Self {
        Self {
            x: ScalarField::zeros(shape),
            y: ScalarField::zeros(shape),
        }
    }

    pub fn new(x: ScalarField, y: ScalarField) -> Result<Self> {
        ensure_same(x.shape(), y.shape())?;
        Ok(Self { x, y })
    }

    pub fn shape(&self) -> GridShape {
        self.x.shape()
    }
}

/// Four-channel field `[[p11, p12], [p21, p22]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    pub xx: ScalarField,
    pub xy: ScalarField,
    pub yx: ScalarField,
    pub yy: ScalarField,
}

impl TensorField {
    pub fn zeros(shape: GridShape) -> Self {
        Self {
            xx: ScalarField::zeros(shape),
            xy: ScalarField::zeros(shape),
            yx: ScalarField::zeros(shape),
            yy: ScalarField::zeros(shape),
        }
    }

    pub fn shape(&self) -> GridShape {
        self.xx.shape()
    }
}

/// Common view over scalar, vector and tensor fields.
pub trait Channels {
    fn shape(&self) -> GridShape;
    fn channels(&self) -> Vec<&[f64]>;
    fn channels_mut(&mut self) -> Vec<&mut [f64]>;

    /// Pointwise Euclidean magnitude `|x|` (absolute value for scalars).
    fn magnitude(&self) -> ScalarField {
        let chans = self.channels();
        let shape = self.shape();
        let data = (0..shape.len())
            .map(|k| chans.iter().map(|c| c[k] * c[k]).sum::<f64>().sqrt())
            .collect();
        ScalarField { shape, data }
    }
}

impl Channels for ScalarField {
    fn shape(&self) -> GridShape {
        self.shape
    }
    fn channels(&self) -> Vec<&[f64]> {
        vec![&self.data]
    }
    fn channels_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.data]
    }
    fn magnitude(&self) -> ScalarField {
        self.map(f64::abs)
    }
}

impl Channels for VectorField {
    fn shape(&self) -> GridShape {
        self.x.shape
    }
    fn channels(&self) -> Vec<&[f64]> {
        vec![&self.x.data, &self.y.data]
    }
    fn channels_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.x.data, &mut self.y.data]
    }
}

impl Channels for TensorField {
    fn shape(&self) -> GridShape {
        self.xx.shape
    }
    fn channels(&self) -> Vec<&[f64]> {
        vec![&self.xx.data, &self.xy.data, &self.yx.data, &self.yy.data]
    }
    fn channels_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.xx.data,
            &mut self.xy.data,
            &mut self.yx.data,
            &mut self.yy.data,
        ]
    }
}

/// Euclidean inner product of two scalar fields.
pub fn inner(u: &ScalarField, v: &ScalarField) -> Result<f64> {
    ensure_same(u.shape, v.shape)?;
    Ok(dot(&u.data, &v.data))
}

/// Sum of channel-wise inner products.
pub fn inner_channels<F: Channels>(a: &F, b: &F) -> Result<f64> {
    ensure_same(a.shape(), b.shape())?;
    Ok(a.channels()
        .iter()
        .zip(b.channels())
        .map(|(x, y)| dot(x, y))
        .sum())
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Which scalar norm to apply after taking pointwise magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    L1,
    L2,
}

/// `‖ |x| ‖_p` for p in {1, 2}.
pub fn pnorm<F: Channels>(x: &F, p: Norm) -> f64 {
    let chans = x.channels();
    let n = x.shape().len();
    match p {
        Norm::L1 => (0..n)
            .map(|k| chans.iter().map(|c| c[k] * c[k]).sum::<f64>().sqrt())
            .sum(),
        Norm::L2 => chans.iter().map(|c| dot(c, c)).sum::<f64>().sqrt(),
    }
}

/// Clamps every value to `[0, 1]`.
pub fn project_box01(u: &ScalarField) -> ScalarField {
    u.map(|v| v.clamp(0.0, 1.0))
}

pub fn project_box01_in_place(u: &mut [f64]) {
    for v in u {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Pointwise projection onto `{ |x| <= radius }`.
pub fn project_ball<F: Channels + Clone>(x: &F, radius: f64) -> Result<F> {
    let mut out = x.clone();
    project_ball_in_place(&mut out, radius)?;
    Ok(out)
}

pub fn project_ball_in_place<F: Channels>(x: &mut F, radius: f64) -> Result<()> {
    if !(radius > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "ball radius must be positive, got {radius}"
        )));
    }
    let n = x.shape().len();
    project_ball_channels(&mut x.channels_mut(), n, radius);
    Ok(())
}

/// Ball projection over `n` pixels whose channels are given as slices.
/// `radius` must be positive.
pub(crate) fn project_ball_channels(chans: &mut [&mut [f64]], n: usize, radius: f64) {
    for k in 0..n {
        let mut mag = chans.iter().map(|c| c[k] * c[k]).sum::<f64>().sqrt();
        if mag <= radius {
            continue;
        }
        let mut factor = radius / mag;
        // rounding can leave |x| one ulp above the radius; shrink until inside
        loop {
            for c in chans.iter_mut() {
                c[k] *= factor;
            }
            mag = chans.iter().map(|c| c[k] * c[k]).sum::<f64>().sqrt();
            if mag <= radius {
                break;
            }
            factor = 1.0 - f64::EPSILON;
        }
    }
}

/// Mean squared error between two equally shaped fields.
pub fn mse(u: &ScalarField, reference: &ScalarField) -> Result<f64> {
    ensure_same(u.shape, reference.shape)?;
    let s: f64 = u
        .data
        .iter()
        .zip(&reference.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(s / u.data.len() as f64)
}

/// Peak signal-to-noise ratio in dB with peak value 1.
///
/// Identical images yield `f64::INFINITY`.
pub fn psnr(u: &ScalarField, reference: &ScalarField) -> Result<f64> {
    let m = mse(u, reference)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / m).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sq(n: usize) -> GridShape {
        GridShape::new(n, n).unwrap()
    }

    #[test]
    fn shape_rejects_empty() {
        assert!(GridShape::new(0, 3).is_err());
        assert!(GridShape::new(3, 0).is_err());
    }

    #[test]
    fn inner_examples() {
        let z = ScalarField::zeros(sq(2));
        assert_eq!(inner(&z, &z).unwrap(), 0.0);
        let u = ScalarField::from_rows(&[&[1.0, 3.0], &[2.0, 4.0]]).unwrap();
        let ones = ScalarField::constant(sq(2), 1.0);
        assert_eq!(inner(&u, &ones).unwrap(), 10.0);
        assert!(matches!(
            inner(&u, &ScalarField::zeros(sq(3))),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn pnorm_single_pixel() {
        let mut v = VectorField::zeros(sq(3));
        v.x.set(1, 2, 3.0);
        v.y.set(1, 2, 4.0);
        assert_eq!(pnorm(&v, Norm::L1), 5.0);
        assert_eq!(pnorm(&v, Norm::L2), 5.0);

        let mut t = TensorField::zeros(sq(2));
        for c in t.channels_mut() {
            c[3] = 1.0;
        }
        assert_eq!(t.magnitude().get(1, 1), 2.0);
        assert_eq!(t.magnitude().get(0, 0), 0.0);
    }

    #[test]
    fn box_projection_examples() {
        let u = ScalarField::from_rows(&[&[0.5, -0.2, 1.7]]).unwrap();
        assert_eq!(project_box01(&u).as_slice(), &[0.5, 0.0, 1.0]);
    }

    #[test]
    fn ball_projection_examples() {
        let mut v = VectorField::zeros(sq(1));
        v.x.set(0, 0, 3.0);
        v.y.set(0, 0, 4.0);
        let p = project_ball(&v, 1.0).unwrap();
        assert!((p.x.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((p.y.get(0, 0) - 0.8).abs() < 1e-15);
        let s = ScalarField::constant(sq(1), 0.5);
        assert_eq!(project_ball(&s, 1.0).unwrap().get(0, 0), 0.5);
        assert!(project_ball(&s, 0.0).is_err());
        assert!(project_ball(&s, -1.0).is_err());
    }

    #[test]
    fn psnr_examples() {
        let u = ScalarField::constant(sq(4), 0.3);
        assert_eq!(psnr(&u, &u).unwrap(), f64::INFINITY);
        let v = ScalarField::constant(sq(4), 0.4);
        assert!((psnr(&v, &u).unwrap() - 20.0).abs() < 1e-9);
    }

    fn arb_field(n: usize) -> impl Strategy<Value = ScalarField> {
        prop::collection::vec(-2.0f64..2.0, n * n)
            .prop_map(move |d| ScalarField::from_vec(sq(n), d).unwrap())
    }

    fn arb_vector(n: usize) -> impl Strategy<Value = VectorField> {
        (arb_field(n), arb_field(n)).prop_map(|(x, y)| VectorField::new(x, y).unwrap())
    }

    proptest! {
        #[test]
        fn inner_symmetric_and_cauchy_schwarz(u in arb_field(5), v in arb_field(5)) {
            let uv = inner(&u, &v).unwrap();
            prop_assert_eq!(uv, inner(&v, &u).unwrap());
            prop_assert!(uv.abs() <= pnorm(&u, Norm::L2) * pnorm(&v, Norm::L2) * (1.0 + 1e-12));
        }

        #[test]
        fn inner_bilinear(u in arb_field(4), v in arb_field(4), w in arb_field(4), a in -3.0f64..3.0) {
            let au_plus_v = u.zip_map(&v, |x, y| a * x + y).unwrap();
            let lhs = inner(&au_plus_v, &w).unwrap();
            let rhs = a * inner(&u, &w).unwrap() + inner(&v, &w).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }

        #[test]
        fn norm_ordering(v in arb_vector(4)) {
            let n1 = pnorm(&v, Norm::L1);
            let n2 = pnorm(&v, Norm::L2);
            prop_assert!(n1 >= n2 * (1.0 - 1e-12));
            prop_assert!(n2 >= 0.0);
            // squared 2-norm equals the sum of squared magnitudes
            let mag = v.magnitude();
            let direct: f64 = mag.as_slice().iter().map(|m| m * m).sum();
            prop_assert!((n2 * n2 - direct).abs() <= 1e-12 * (1.0 + direct));
        }

        #[test]
        fn projections_idempotent_nonexpansive(a in arb_vector(4), b in arb_vector(4), r in 0.1f64..2.0) {
            let pa = project_ball(&a, r).unwrap();
            let pb = project_ball(&b, r).unwrap();
            prop_assert_eq!(&project_ball(&pa, r).unwrap(), &pa);
            prop_assert!(pa.magnitude().as_slice().iter().all(|&m| m <= r));
            let d = |x: &VectorField, y: &VectorField| {
                let dx = x.x.sub(&y.x).unwrap();
                let dy = x.y.sub(&y.y).unwrap();
                pnorm(&VectorField::new(dx, dy).unwrap(), Norm::L2)
            };
            prop_assert!(d(&pa, &pb) <= d(&a, &b) * (1.0 + 1e-12) + 1e-15);
        }

        #[test]
        fn box_idempotent_nonexpansive(u in arb_field(4), v in arb_field(4)) {
            let pu = project_box01(&u);
            let pv = project_box01(&v);
            prop_assert_eq!(&project_box01(&pu), &pu);
            prop_assert!(pnorm(&pu.sub(&pv).unwrap(), Norm::L2) <= pnorm(&u.sub(&v).unwrap(), Norm::L2) + 1e-15);
        }

        #[test]
        fn psnr_matches_direct_mse(u in arb_field(6), v in arb_field(6)) {
            let direct: f64 = u.as_slice().iter().zip(v.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 36.0;
            prop_assume!(direct > 0.0);
            let expected = -10.0 * direct.log10();
            prop_assert!((psnr(&u, &v).unwrap() - expected).abs() < 1e-10);
        }
    }
}
