//! Problem data: discrete marginals, coupling costs, dual variables.
//!
//! A [`MotInstance`] bundles two finitely supported probability measures and a
//! cost. Support points are stored sorted lexicographically so every per-point
//! array shares one deterministic ordering.

use thiserror::Error;

use crate::scalar::{lit, Scalar};

/// Which marginal a diagnostic refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Mu,
    Nu,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Side::Mu => write!(f, "mu"),
            Side::Nu => write!(f, "nu"),
        }
    }
}

/// A violated instance invariant, with the offending index where applicable.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Violation {
    #[error("{side}: non-finite coordinate at point {index}")]
    NonFiniteCoordinate { side: Side, index: usize },
    #[error("{side}: non-finite weight at index {index}")]
    NonFiniteWeight { side: Side, index: usize },
    #[error("{side}: nonpositive weight at index {index}")]
    NonpositiveWeight { side: Side, index: usize },
    #[error("{side}: weights sum to {sum} instead of 1")]
    WeightSumNotOne { side: Side, sum: f64 },
    #[error("{side}: duplicate support point at sorted index {index}")]
    DuplicatePoint { side: Side, index: usize },
    #[error("dimension mismatch: mu has dim {mu_dim}, nu has dim {nu_dim}")]
    DimensionMismatch { mu_dim: usize, nu_dim: usize },
    #[error("cost requires dimension {required}, instance has dimension {found}")]
    CostDimensionMismatch { required: usize, found: usize },
    #[error("tabulated cost is {rows}x{cols}, instance is {expected_rows}x{expected_cols}")]
    TabulatedShapeMismatch {
        rows: usize,
        cols: usize,
        expected_rows: usize,
        expected_cols: usize,
    },
    #[error("non-finite cost at pair ({x_index}, {y_index})")]
    NonFiniteCost { x_index: usize, y_index: usize },
}

/// Errors from model-level operations.
#[derive(Debug, Clone, Error)]
pub enum ModelError {
    #[error("invalid measure: {0:?}")]
    InvalidMeasure(Vec<Violation>),
    #[error("operation requires dimension {required}, got {found}")]
    UnsupportedDimension { required: usize, found: usize },
    #[error("tabulated cost index ({x_index}, {y_index}) out of range {rows}x{cols}")]
    CostIndexOutOfRange {
        x_index: usize,
        y_index: usize,
        rows: usize,
        cols: usize,
    },
    #[error("point has dimension {found}, expected {expected}")]
    PointDimension { expected: usize, found: usize },
}

/// Lexicographic comparison of two points; NaN sorts last so ordering is total.
pub(crate) fn lex_cmp<S: Scalar>(a: &[S], b: &[S]) -> std::cmp::Ordering {
    for (u, v) in a.iter().zip(b.iter()) {
        match u.partial_cmp(v) {
            Some(std::cmp::Ordering::Equal) => continue,
            Some(ord) => return ord,
            None => {
                // NaN handling: finite < NaN, NaN == NaN.
                return match (u.is_nan(), v.is_nan()) {
                    (true, true) => std::cmp::Ordering::Equal,
                    (true, false) => std::cmp::Ordering::Greater,
                    (false, true) => std::cmp::Ordering::Less,
                    (false, false) => unreachable!(),
                };
            }
        }
    }
    std::cmp::Ordering::Equal
}

/// Finitely supported measure on `R^d`: support points plus one weight each.
///
/// Construction sorts the support lexicographically; weights follow the same
/// permutation, so iteration order (and therefore every reduction over the
/// support) is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure<S> {
    dim: usize,
    coords: Vec<S>,
    weights: Vec<S>,
}

impl<S: Scalar> DiscreteMeasure<S> {
    /// Builds a measure and checks every invariant (positivity, normalization,
    /// distinct points, finite entries).
    pub fn new(dim: usize, points: Vec<Vec<S>>, weights: Vec<S>) -> Result<Self, ModelError> {
        let m = Self::new_unchecked(dim, points, weights);
        let violations = m.validate(Side::Mu);
        if violations.is_empty() {
            Ok(m)
        } else {
            Err(ModelError::InvalidMeasure(violations))
        }
    }

    /// Builds and sorts without validating; pair with [`DiscreteMeasure::validate`]
    /// when diagnostics are wanted instead of an error.
    pub fn new_unchecked(dim: usize, points: Vec<Vec<S>>, weights: Vec<S>) -> Self {
        assert_eq!(points.len(), weights.len(), "points/weights length mismatch");
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&i, &j| lex_cmp(&points[i], &points[j]));
        let mut coords = Vec::with_capacity(points.len() * dim);
        let mut w = Vec::with_capacity(points.len());
        for &i in &order {
            assert_eq!(points[i].len(), dim, "point {i} has wrong dimension");
            coords.extend_from_slice(&points[i]);
            w.push(weights[i]);
        }
        DiscreteMeasure { dim, coords, weights: w }
    }

    /// Number of support points.
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Coordinates of the `i`-th support point.
    #[inline]
    pub fn point(&self, i: usize) -> &[S] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weights(&self) -> &[S] {
        &self.weights
    }

    pub fn weight(&self, i: usize) -> S {
        self.weights[i]
    }

    /// All coordinates, row-major, `len() * dim()` entries.
    pub fn coords(&self) -> &[S] {
        &self.coords
    }

    pub fn points(&self) -> Vec<Vec<S>> {
        (0..self.len()).map(|i| self.point(i).to_vec()).collect()
    }

    /// Barycenter of the measure.
    pub fn mean(&self) -> Vec<S> {
        let mut m = vec![S::zero(); self.dim];
        for i in 0..self.len() {
            let w = self.weights[i];
            for (k, c) in self.point(i).iter().enumerate() {
                m[k] += w * *c;
            }
        }
        m
    }

    fn validate(&self, side: Side) -> Vec<Violation> {
        let mut out = Vec::new();
        for i in 0..self.len() {
            if self.point(i).iter().any(|c| !c.is_finite()) {
                out.push(Violation::NonFiniteCoordinate { side, index: i });
            }
        }
        let mut sum = S::zero();
        for (i, &w) in self.weights.iter().enumerate() {
            if !w.is_finite() {
                out.push(Violation::NonFiniteWeight { side, index: i });
            } else if w <= S::zero() {
                out.push(Violation::NonpositiveWeight { side, index: i });
            }
            sum += w;
        }
        let tol = lit::<S>(1e-12).max(S::epsilon() * lit(8.0 * self.len().max(1) as f64));
        if !sum.is_finite() || (sum - S::one()).abs() > tol {
            out.push(Violation::WeightSumNotOne {
                side,
                sum: sum.to_f64().unwrap_or(f64::NAN),
            });
        }
        for i in 1..self.len() {
            if self.point(i - 1) == self.point(i) {
                out.push(Violation::DuplicatePoint { side, index: i });
            }
        }
        out
    }
}

/// Coupling cost `c(x, y)`: built-in analytic families plus a tabulated form.
#[derive(Debug, Clone, PartialEq)]
pub enum CostSpec<S> {
    /// `c(x, y) = x * y^2` in dimension 1.
    ForwardStartPower,
    /// `c(x, y) = |x - y|` (Euclidean), any dimension.
    Distance,
    /// `c(x, y) = sin(8 x y)` in dimension 1.
    Oscillatory,
    /// `c(x, y) = x1 (y1^2 + 2 y2^2) + x2 (2 y1^2 + y2^2)` in dimension 2.
    Basket2d,
    /// Dense matrix indexed by (x index, y index), row-major.
    Tabulated { rows: usize, cols: usize, values: Vec<S> },
}

impl<S: Scalar> CostSpec<S> {
    /// Dimension the analytic kinds require; `None` means any.
    pub fn required_dim(&self) -> Option<usize> {
        match self {
            CostSpec::ForwardStartPower | CostSpec::Oscillatory => Some(1),
            CostSpec::Basket2d => Some(2),
            CostSpec::Distance | CostSpec::Tabulated { .. } => None,
        }
    }

    /// Evaluates the cost for support indices `(xi, yi)` at points `(x, y)`.
    ///
    /// Hot-path variant: tabulated lookups index the matrix directly and panic
    /// on out-of-range indices, like slice indexing. Use [`CostSpec::try_eval`]
    /// for the checked form.
    #[inline]
    pub fn eval(&self, xi: usize, x: &[S], yi: usize, y: &[S]) -> S {
        match self {
            CostSpec::ForwardStartPower => x[0] * y[0] * y[0],
            CostSpec::Distance => {
                let mut s = S::zero();
                for (a, b) in x.iter().zip(y.iter()) {
                    let d = *a - *b;
                    s += d * d;
                }
                s.sqrt()
            }
            CostSpec::Oscillatory => (lit::<S>(8.0) * x[0] * y[0]).sin(),
            CostSpec::Basket2d => {
                let two = lit::<S>(2.0);
                x[0] * (y[0] * y[0] + two * y[1] * y[1]) + x[1] * (two * y[0] * y[0] + y[1] * y[1])
            }
            CostSpec::Tabulated { cols, values, .. } => values[xi * cols + yi],
        }
    }

    /// Checked evaluation; errors on tabulated index out of range.
    pub fn try_eval(&self, xi: usize, x: &[S], yi: usize, y: &[S]) -> Result<S, ModelError> {
        if let CostSpec::Tabulated { rows, cols, .. } = self {
            if xi >= *rows || yi >= *cols {
                return Err(ModelError::CostIndexOutOfRange {
                    x_index: xi,
                    y_index: yi,
                    rows: *rows,
                    cols: *cols,
                });
            }
        }
        if let Some(d) = self.required_dim() {
            if x.len() != d || y.len() != d {
                return Err(ModelError::PointDimension { expected: d, found: x.len() });
            }
        }
        Ok(self.eval(xi, x, yi, y))
    }
}

/// Dual triple `(phi, psi, h)`: one scalar per x-point, one per y-point, and a
/// d-vector per x-point.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState<S> {
    pub phi: Vec<S>,
    pub psi: Vec<S>,
    /// Flat row-major `nx * dim` storage.
    pub h: Vec<S>,
    dim: usize,
}

impl<S: Scalar> DualState<S> {
    pub fn zeros(nx: usize, ny: usize, dim: usize) -> Self {
        DualState {
            phi: vec![S::zero(); nx],
            psi: vec![S::zero(); ny],
            h: vec![S::zero(); nx * dim],
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn h_row(&self, x: usize) -> &[S] {
        &self.h[x * self.dim..(x + 1) * self.dim]
    }

    pub fn h_row_mut(&mut self, x: usize) -> &mut [S] {
        &mut self.h[x * self.dim..(x + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.phi.iter().chain(self.psi.iter()).chain(self.h.iter()).all(|v| v.is_finite())
    }
}

/// A martingale transport problem instance.
#[derive(Debug, Clone, PartialEq)]
pub struct MotInstance<S> {
    pub mu: DiscreteMeasure<S>,
    pub nu: DiscreteMeasure<S>,
    pub cost: CostSpec<S>,
}

impl<S: Scalar> MotInstance<S> {
    pub fn new(mu: DiscreteMeasure<S>, nu: DiscreteMeasure<S>, cost: CostSpec<S>) -> Self {
        MotInstance { mu, nu, cost }
    }

    pub fn dim(&self) -> usize {
        self.mu.dim()
    }

    #[inline]
    pub fn cost_at(&self, xi: usize, yi: usize) -> S {
        self.cost.eval(xi, self.mu.point(xi), yi, self.nu.point(yi))
    }
}

/// Checks every instance invariant and returns one descriptor per violation;
/// an empty list means the instance is valid.
pub fn validate_instance<S: Scalar>(inst: &MotInstance<S>) -> Vec<Violation> {
    let mut out = inst.mu.validate(Side::Mu);
    out.extend(inst.nu.validate(Side::Nu));
    if inst.mu.dim() != inst.nu.dim() {
        out.push(Violation::DimensionMismatch {
            mu_dim: inst.mu.dim(),
            nu_dim: inst.nu.dim(),
        });
        return out;
    }
    if let Some(d) = inst.cost.required_dim() {
        if d != inst.mu.dim() {
            out.push(Violation::CostDimensionMismatch { required: d, found: inst.mu.dim() });
            return out;
        }
    }
    if let CostSpec::Tabulated { rows, cols, .. } = &inst.cost {
        if *rows != inst.mu.len() || *cols != inst.nu.len() {
            out.push(Violation::TabulatedShapeMismatch {
                rows: *rows,
                cols: *cols,
                expected_rows: inst.mu.len(),
                expected_cols: inst.nu.len(),
            });
            return out;
        }
    }
    for xi in 0..inst.mu.len() {
        for yi in 0..inst.nu.len() {
            if !inst.cost_at(xi, yi).is_finite() {
                out.push(Violation::NonFiniteCost { x_index: xi, y_index: yi });
            }
        }
    }
    out
}

/// Result of the one-dimensional convex-order test.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexOrderCheck<S> {
    pub ordered: bool,
    /// Largest excess of a mu call price over the nu call price across strikes.
    pub worst_violation: S,
    pub worst_strike: S,
}

fn call_price<S: Scalar>(m: &DiscreteMeasure<S>, strike: S) -> S {
    let mut acc = S::zero();
    for i in 0..m.len() {
        let gain = m.point(i)[0] - strike;
        if gain > S::zero() {
            acc += m.weight(i) * gain;
        }
    }
    acc
}

/// Tests `mu <= nu` in the convex order in dimension 1.
///
/// Sufficient and necessary for discrete measures: means must match and the
/// call payoff `(X - k)+` must be cheaper under `mu` at every strike taken
/// from the union of both supports. Mean equality uses `tol * (1 + |mean|)`.
pub fn check_convex_order_1d<S: Scalar>(
    mu: &DiscreteMeasure<S>,
    nu: &DiscreteMeasure<S>,
    tol: S,
) -> Result<ConvexOrderCheck<S>, ModelError> {
    if mu.dim() != 1 || nu.dim() != 1 {
        return Err(ModelError::UnsupportedDimension {
            required: 1,
            found: mu.dim().max(nu.dim()),
        });
    }
    let mut worst = S::neg_infinity();
    let mut worst_strike = S::zero();
    for m in [mu, nu] {
        for i in 0..m.len() {
            let k = m.point(i)[0];
            let gap = call_price(mu, k) - call_price(nu, k);
            if gap > worst {
                worst = gap;
                worst_strike = k;
            }
        }
    }
    let mean_mu = mu.mean()[0];
    let mean_nu = nu.mean()[0];
    let mean_ok = (mean_mu - mean_nu).abs() <= tol * (S::one() + mean_mu.abs());
    Ok(ConvexOrderCheck {
        ordered: mean_ok && worst <= tol,
        worst_violation: worst,
        worst_strike,
    })
}

/// Default tolerance for the convex-order check.
pub fn convex_order_tol<S: Scalar>() -> S {
    lit(1e-10)
}
