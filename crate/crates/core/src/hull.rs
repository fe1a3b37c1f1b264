//! Concave envelope of a function sampled on a finite grid, evaluated at one
//! query point: a linear 1D fast path over the upper convex chain, and an
//! active-set exchange method in general dimension that maintains an affine
//! function dominating the samples and touching at the current support.
//!
//! Every result carries its own certificate: the affine function
//! `y -> value + gradient . (y - x)` dominates the samples and is tight on
//! the support, and the barycentric coefficients reconstruct `x`.

use thiserror::Error;

use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum HullError {
    #[error("query point lies outside the convex hull of the grid")]
    OutOfHull,
    #[error("exchange loop exceeded {cap} iterations (cycle guard)")]
    LoopGuard { cap: usize },
    #[error("grid is empty")]
    EmptyGrid,
    #[error("grid/function length mismatch: {grid} points, {values} values")]
    LengthMismatch { grid: usize, values: usize },
    #[error("query point dimension {found}, grid dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// Envelope value at the query point plus its certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct HullResult<S> {
    pub value: S,
    /// Grid indices of the touching points (generically at most d+1).
    pub support: Vec<usize>,
    /// Positive, sums to one, reconstructs x from the support points.
    pub coefficients: Vec<S>,
    /// Slope of the dominating affine function.
    pub gradient: Vec<S>,
    /// Set when some coefficient is within boundary slack of zero.
    pub near_boundary: bool,
}

const BOUNDARY_SLACK: f64 = 1e-9;

/// Upper concave envelope on a sorted 1D grid, linear in the grid size.
pub fn hull_1d<S: Scalar>(grid: &[S], f: &[S], x: S) -> Result<HullResult<S>, HullError> {
    if grid.is_empty() {
        return Err(HullError::EmptyGrid);
    }
    if grid.len() != f.len() {
        return Err(HullError::LengthMismatch { grid: grid.len(), values: f.len() });
    }
    debug_assert!(grid.windows(2).all(|w| w[0] <= w[1]), "grid must be sorted");
    let n = grid.len();
    let span = grid[n - 1] - grid[0];
    let slack = lit::<S>(BOUNDARY_SLACK) * (S::one() + span.abs());
    if x < grid[0] - slack || x > grid[n - 1] + slack {
        return Err(HullError::OutOfHull);
    }
    // Upper chain by cross products (monotone scan).
    let mut chain: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        while chain.len() >= 2 {
            let a = chain[chain.len() - 2];
            let b = chain[chain.len() - 1];
            let cross = (grid[b] - grid[a]) * (f[i] - f[a]) - (f[b] - f[a]) * (grid[i] - grid[a]);
            if cross >= S::zero() {
                chain.pop();
            } else {
                break;
            }
        }
        chain.push(i);
    }
    // Locate x on the chain.
    let mut seg = 0usize;
    while seg + 1 < chain.len() && grid[chain[seg + 1]] < x {
        seg += 1;
    }
    let i = chain[seg];
    if chain.len() == 1 || (x - grid[i]).abs() <= slack && seg == 0 || x <= grid[i] {
        // x at (or within slack of) the left vertex of the segment
        return Ok(vertex_result_1d(grid, f, &chain, seg, x, slack));
    }
    let j = chain[seg + 1];
    if (x - grid[j]).abs() == S::zero() {
        return Ok(vertex_result_1d(grid, f, &chain, seg + 1, x, slack));
    }
    let width = grid[j] - grid[i];
    let lam_j = (x - grid[i]) / width;
    let lam_i = S::one() - lam_j;
    let slope = (f[j] - f[i]) / width;
    let near = lam_i.min(lam_j) <= slack;
    if (x - grid[i]).abs() <= S::zero() {
        return Ok(vertex_result_1d(grid, f, &chain, seg, x, slack));
    }
    Ok(HullResult {
        value: lam_i * f[i] + lam_j * f[j],
        support: vec![i, j],
        coefficients: vec![lam_i, lam_j],
        gradient: vec![slope],
        near_boundary: near,
    })
}

/// Singleton support at a chain vertex; the gradient takes an adjacent chain
/// slope, which dominates both sides by concavity of the chain.
fn vertex_result_1d<S: Scalar>(
    grid: &[S],
    f: &[S],
    chain: &[usize],
    pos: usize,
    x: S,
    slack: S,
) -> HullResult<S> {
    let i = chain[pos];
    let slope = if pos + 1 < chain.len() {
        (f[chain[pos + 1]] - f[i]) / (grid[chain[pos + 1]] - grid[i])
    } else if pos > 0 {
        (f[i] - f[chain[pos - 1]]) / (grid[i] - grid[chain[pos - 1]])
    } else {
        S::zero()
    };
    HullResult {
        value: f[i],
        support: vec![i],
        coefficients: vec![S::one()],
        gradient: vec![slope],
        near_boundary: (x - grid[i]).abs() > slack * lit(0.0),
    }
}

/// Iteration cap multiplier for the exchange loop.
const LOOP_CAP_FACTOR: usize = 50;

/// Concave envelope at `x` of `f` sampled on `grid` (row-major coordinates,
/// `n * dim`), seeded with an optional gradient guess. A warm guess close to
/// the final gradient makes the exchange start near the optimal support.
///
/// Termination is not guaranteed by construction, so the loop carries an
/// iteration cap of `50 * n` and a support-set cycle detector; both convert a
/// potential hang into [`HullError::LoopGuard`].
pub fn hull_nd<S: Scalar>(
    dim: usize,
    grid: &[S],
    f: &[S],
    x: &[S],
    gradient_guess: Option<&[S]>,
) -> Result<HullResult<S>, HullError> {
    let n = f.len();
    if n == 0 {
        return Err(HullError::EmptyGrid);
    }
    if grid.len() != n * dim {
        return Err(HullError::LengthMismatch { grid: grid.len() / dim.max(1), values: n });
    }
    if x.len() != dim {
        return Err(HullError::DimensionMismatch { expected: dim, found: x.len() });
    }

    let point = |i: usize| -> &[S] { &grid[i * dim..(i + 1) * dim] };
    let mut scale = S::one();
    for i in 0..n {
        for k in 0..dim {
            scale = scale.max(point(i)[k].abs());
        }
    }
    for k in 0..dim {
        scale = scale.max(x[k].abs());
    }
    let tol = scale * lit::<S>(1e-12);
    let boundary = scale * lit::<S>(BOUNDARY_SLACK);

    // residual[j] = f(y_j) - A(y_j) <= 0 for the current dominating affine A;
    // the implicit constant of A is carried by the residuals themselves.
    let mut grad = vec![S::zero(); dim];
    let mut residual: Vec<S> = Vec::with_capacity(n);
    if let Some(g) = gradient_guess {
        grad.copy_from_slice(g);
        for j in 0..n {
            let mut dot = S::zero();
            for k in 0..dim {
                dot += g[k] * point(j)[k];
            }
            residual.push(f[j] - dot);
        }
    } else {
        residual.extend_from_slice(f);
    }
    let top = argmax(&residual);
    let shift = residual[top];
    for r in residual.iter_mut() {
        *r -= shift;
    }
    let mut support = vec![top];

    let cap = LOOP_CAP_FACTOR * n;
    let mut seen = std::collections::HashSet::new();
    for _ in 0..cap {
        let mut key = support.clone();
        key.sort_unstable();
        if !seen.insert(key) {
            return Err(HullError::LoopGuard { cap });
        }
        // Orthonormal basis of aff(support) - s0 and projection of x onto it.
        let s0 = point(support[0]);
        let mut basis: Vec<S> = Vec::new(); // rows of length dim
        for &s in &support[1..] {
            let mut v: Vec<S> = point(s).iter().zip(s0.iter()).map(|(a, b)| *a - *b).collect();
            for b in 0..basis.len() / dim {
                let row = &basis[b * dim..(b + 1) * dim];
                let mut dot = S::zero();
                for k in 0..dim {
                    dot += v[k] * row[k];
                }
                for k in 0..dim {
                    v[k] -= dot * row[k];
                }
            }
            let nrm = v.iter().map(|&c| c * c).sum::<S>().sqrt();
            if nrm > tol {
                for c in v.iter_mut() {
                    *c /= nrm;
                }
                basis.extend_from_slice(&v);
            }
        }
        let nb = basis.len() / dim.max(1);
        let mut proj: Vec<S> = s0.to_vec();
        {
            let mut xs: Vec<S> = x.iter().zip(s0.iter()).map(|(a, b)| *a - *b).collect();
            for b in 0..nb {
                let row = &basis[b * dim..(b + 1) * dim];
                let mut dot = S::zero();
                for k in 0..dim {
                    dot += xs[k] * row[k];
                }
                for k in 0..dim {
                    proj[k] += dot * row[k];
                }
            }
            let _ = &mut xs;
        }
        let mut p: Vec<S> = x.iter().zip(proj.iter()).map(|(a, b)| *a - *b).collect();
        let pn = p.iter().map(|&c| c * c).sum::<S>().sqrt();

        if pn <= tol {
            // x in aff(support): solve for barycentric coefficients.
            match barycentric(dim, &support, x, &point, tol) {
                Some(bary) => {
                    let min_idx = argmin(&bary);
                    if bary[min_idx] > S::zero() {
                        let mut value = S::zero();
                        for (i, &s) in support.iter().enumerate() {
                            value += bary[i] * f[s];
                        }
                        let near = bary.iter().any(|&b| b <= boundary);
                        return Ok(HullResult {
                            value,
                            support,
                            coefficients: bary,
                            gradient: grad,
                            near_boundary: near,
                        });
                    }
                    support.remove(min_idx);
                }
                None => {
                    // Affinely dependent support: drop the most recent entry.
                    support.pop();
                }
            }
            if support.is_empty() {
                return Err(HullError::OutOfHull);
            }
            continue;
        }

        // Tilt toward x: scalar_j = p . (y_j - proj); support rows give zero.
        for c in p.iter_mut() {
            *c /= pn;
        }
        let mut best: Option<(S, usize)> = None;
        let mut any_positive = false;
        for j in 0..n {
            let mut s = S::zero();
            let y = point(j);
            for k in 0..dim {
                s += p[k] * (y[k] - proj[k]);
            }
            if s > tol {
                any_positive = true;
                // ratio residual/scalar is <= 0; the largest wins first contact
                let ratio = residual[j] / s;
                match best {
                    Some((r, bj)) if ratio < r || (ratio == r && j >= bj) => {}
                    _ => best = Some((ratio, j)),
                }
            }
        }
        if !any_positive {
            return Err(HullError::OutOfHull);
        }
        let (_, y_new) = best.unwrap();
        let a = -residual[y_new];
        let scalar_new = {
            let y = point(y_new);
            let mut s = S::zero();
            for k in 0..dim {
                s += p[k] * (y[k] - proj[k]);
            }
            s
        };
        let rate = a / scalar_new;
        for j in 0..n {
            let y = point(j);
            let mut s = S::zero();
            for k in 0..dim {
                s += p[k] * (y[k] - proj[k]);
            }
            residual[j] += rate * s;
        }
        for (i, &s) in support.iter().enumerate() {
            let _ = (i, s); // support residuals stay zero up to roundoff
        }
        residual[y_new] = S::zero();
        for k in 0..dim {
            grad[k] -= rate * p[k];
        }
        support.push(y_new);
    }
    Err(HullError::LoopGuard { cap })
}

/// Thin wrapper over [`hull_nd`] returning the contact pair `(support, lambda)`
/// consumed by the semi-dual subgradient.
pub fn argconc_support<S: Scalar>(
    dim: usize,
    grid: &[S],
    f: &[S],
    x: &[S],
    gradient_guess: Option<&[S]>,
) -> Result<(Vec<usize>, Vec<S>), HullError> {
    let r = hull_nd(dim, grid, f, x, gradient_guess)?;
    Ok((r.support, r.coefficients))
}

/// Solves `sum_i lam_i y_i = x, sum lam = 1` by Gaussian elimination on the
/// affine system; returns `None` when a pivot falls under the relative
/// threshold (affinely dependent support).
fn barycentric<'a, S: Scalar>(
    dim: usize,
    support: &[usize],
    x: &[S],
    point: &impl Fn(usize) -> &'a [S],
    tol: S,
) -> Option<Vec<S>>
where
    S: 'a,
{
    let k = support.len();
    if k == 1 {
        return Some(vec![S::one()]);
    }
    // Rows: the all-ones constraint plus coordinates projected onto the
    // difference basis. Build the (dim+1) x k system and reduce; rank must be k.
    let rows = dim + 1;
    let mut m = vec![S::zero(); rows * k];
    let mut rhs = vec![S::zero(); rows];
    for j in 0..k {
        m[j] = S::one();
    }
    rhs[0] = S::one();
    for r in 0..dim {
        for j in 0..k {
            m[(r + 1) * k + j] = point(support[j])[r];
        }
        rhs[r + 1] = x[r];
    }
    // Gaussian elimination with row pivoting into echelon form.
    let mut pivot_cols = Vec::with_capacity(k);
    let mut row = 0usize;
    for col in 0..k {
        let mut best = row;
        for r in row..rows {
            if m[r * k + col].abs() > m[best * k + col].abs() {
                best = r;
            }
        }
        if m[best * k + col].abs() <= tol.max(S::epsilon()) {
            return None; // dependent column: degenerate support
        }
        if best != row {
            for c in 0..k {
                m.swap(row * k + c, best * k + c);
            }
            rhs.swap(row, best);
        }
        let inv = S::one() / m[row * k + col];
        for r in 0..rows {
            if r != row {
                let f = m[r * k + col] * inv;
                if f != S::zero() {
                    for c in 0..k {
                        let v = m[row * k + c];
                        m[r * k + c] -= f * v;
                    }
                    rhs[r] = rhs[r] - f * rhs[row];
                }
            }
        }
        pivot_cols.push((row, col));
        row += 1;
        if row == rows {
            break;
        }
    }
    if pivot_cols.len() < k {
        return None;
    }
    // Consistency of the remaining rows (x really in aff(support)).
    for r in row..rows {
        if rhs[r].abs() > tol * lit(1e3) + tol {
            return None;
        }
    }
    let mut lam = vec![S::zero(); k];
    for &(r, c) in &pivot_cols {
        lam[c] = rhs[r] / m[r * k + c];
    }
    Some(lam)
}

fn argmax<S: Scalar>(v: &[S]) -> usize {
    let mut best = 0usize;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn argmin<S: Scalar>(v: &[S]) -> usize {
    let mut best = 0usize;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// Checks the certificate: domination on the whole grid and tightness on the
/// support, both within `tol`.
pub fn certificate_defect<S: Scalar>(
    dim: usize,
    grid: &[S],
    f: &[S],
    x: &[S],
    r: &HullResult<S>,
) -> S {
    let n = f.len();
    let mut worst = S::zero();
    for j in 0..n {
        let y = &grid[j * dim..(j + 1) * dim];
        let mut affine = r.value;
        for k in 0..dim {
            affine += r.gradient[k] * (y[k] - x[k]);
        }
        worst = worst.max(f[j] - affine);
    }
    for (i, &s) in r.support.iter().enumerate() {
        let y = &grid[s * dim..(s + 1) * dim];
        let mut affine = r.value;
        for k in 0..dim {
            affine += r.gradient[k] * (y[k] - x[k]);
        }
        worst = worst.max((affine - f[s]).abs());
        let _ = i;
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn check_invariants(dim: usize, grid: &[f64], f: &[f64], x: &[f64], r: &HullResult<f64>) {
        let sum: f64 = r.coefficients.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12, "coefficients sum {sum}");
        for k in 0..dim {
            let mut xi = 0.0;
            for (i, &s) in r.support.iter().enumerate() {
                xi += r.coefficients[i] * grid[s * dim + k];
            }
            assert!((xi - x[k]).abs() <= 1e-9, "barycenter mismatch");
        }
        let mut v = 0.0;
        for (i, &s) in r.support.iter().enumerate() {
            v += r.coefficients[i] * f[s];
        }
        assert!((v - r.value).abs() <= 1e-9);
        assert!(certificate_defect(dim, grid, f, x, r) <= 1e-9);
    }

    #[test]
    fn hull_1d_of_affine_is_itself() {
        let grid: Vec<f64> = (0..9).map(|i| -1.0 + 0.25 * i as f64).collect();
        let f: Vec<f64> = grid.iter().map(|y| 0.3 * y + 0.7).collect();
        let r = hull_1d(&grid, &f, 0.125).unwrap();
        assert!((r.value - (0.3 * 0.125 + 0.7)).abs() <= 1e-12);
        assert!((r.gradient[0] - 0.3).abs() <= 1e-12);
        check_invariants(1, &grid, &f, &[0.125], &r);
    }

    #[test]
    fn hull_1d_of_concave_touches_at_grid_point() {
        let grid: Vec<f64> = (0..11).map(|i| -1.0 + 0.2 * i as f64).collect();
        let f: Vec<f64> = grid.iter().map(|y| -y * y).collect();
        let x = grid[4];
        let r = hull_1d(&grid, &f, x).unwrap();
        assert_eq!(r.support, vec![4]);
        assert!((r.value - f[4]).abs() <= 1e-12);
        check_invariants(1, &grid, &f, &[x], &r);
    }

    #[test]
    fn hull_1d_bridges_a_dip() {
        let grid = [-1.0, 0.0, 1.0];
        let f = [0.0, -1.0, 0.0];
        let r = hull_1d(&grid, &f, 0.0).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.support, vec![0, 2]);
        assert_eq!(r.coefficients, vec![0.5, 0.5]);
        check_invariants(1, &grid, &f, &[0.0], &r);
    }

    #[test]
    fn hull_1d_rejects_outside_query() {
        let grid = [-1.0, 1.0];
        let f = [0.0, 0.0];
        assert_eq!(hull_1d(&grid, &f, 2.0), Err(HullError::OutOfHull));
    }

    #[test]
    fn hull_nd_flat_square() {
        let grid = [-1.0, -1.0, 1.0, -1.0, -1.0, 1.0, 1.0, 1.0];
        let f = [0.0f64; 4];
        let r = hull_nd(2, &grid, &f, &[0.0, 0.0], None).unwrap();
        assert!(r.value.abs() <= 1e-12);
        check_invariants(2, &grid, &f, &[0.0, 0.0], &r);
    }

    #[test]
    fn hull_nd_concave_quadratic_touches_grid_point() {
        let n = 5;
        let mut grid = Vec::new();
        let mut f = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let y1 = -1.0 + 0.5 * i as f64;
                let y2 = -1.0 + 0.5 * j as f64;
                grid.push(y1);
                grid.push(y2);
                f.push(-(y1 * y1) - 2.0 * y2 * y2);
            }
        }
        let x = [-0.5, 0.5];
        let r = hull_nd(2, &grid, &f, &x, None).unwrap();
        assert!((r.value - (-(0.25) - 2.0 * 0.25)).abs() <= 1e-9);
        check_invariants(2, &grid, &f, &x, &r);
    }

    #[test]
    fn hull_nd_fails_outside_hull() {
        let grid = [-1.0, -1.0, 1.0, -1.0, -1.0, 1.0, 1.0, 1.0];
        let f = [0.0; 4];
        assert_eq!(hull_nd(2, &grid, &f, &[3.0, 0.0], None), Err(HullError::OutOfHull));
    }

    /// Exhaustive oracle: maximize sum(lam * f) over affinely independent
    /// supports of size <= dim+1 with lam >= 0 solving the barycentric system.
    fn brute_force_hull(dim: usize, grid: &[f64], f: &[f64], x: &[f64]) -> Option<f64> {
        let n = f.len();
        let point = |i: usize| -> &[f64] { &grid[i * dim..(i + 1) * dim] };
        let mut best: Option<f64> = None;
        let mut consider = |support: &[usize]| {
            if support.len() == 1 {
                // singleton support is only admissible when the point is x itself
                let p = point(support[0]);
                if (0..dim).any(|k| (p[k] - x[k]).abs() > 1e-12) {
                    return;
                }
            }
            if let Some(lam) = barycentric(dim, support, x, &point, 1e-12) {
                if lam.iter().all(|&l| l >= -1e-12) {
                    let v: f64 = support.iter().zip(lam.iter()).map(|(&s, &l)| l * f[s]).sum();
                    if best.map_or(true, |b| v > b) {
                        best = Some(v);
                    }
                }
            }
        };
        for i in 0..n {
            consider(&[i]);
            for j in i + 1..n {
                consider(&[i, j]);
                if dim >= 2 {
                    for k in j + 1..n {
                        consider(&[i, j, k]);
                    }
                }
            }
        }
        best
    }

    #[test]
    fn hull_nd_matches_exhaustive_oracle_on_random_grids() {
        let mut rng = StdRng::seed_from_u64(101);
        for _ in 0..20 {
            let n = 5;
            let mut grid = Vec::new();
            let mut f = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    grid.push(-1.0 + 0.5 * i as f64 + rng.gen_range(-0.05..0.05));
                    grid.push(-1.0 + 0.5 * j as f64 + rng.gen_range(-0.05..0.05));
                    f.push(rng.gen_range(-1.0..1.0));
                }
            }
            for _ in 0..10 {
                let x = [rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6)];
                let r = hull_nd(2, &grid, &f, &x, None).unwrap();
                check_invariants(2, &grid, &f, &x, &r);
                let oracle = brute_force_hull(2, &grid, &f, &x).unwrap();
                assert!(
                    (r.value - oracle).abs() <= 1e-8,
                    "hull {} vs oracle {oracle}",
                    r.value
                );
            }
        }
    }

    #[test]
    fn hull_1d_agrees_with_hull_nd() {
        let mut rng = StdRng::seed_from_u64(102);
        for _ in 0..50 {
            let n = 12;
            let grid: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
            let f: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = rng.gen_range(-0.99..0.99);
            let a = hull_1d(&grid, &f, x).unwrap();
            let b = hull_nd(1, &grid, &f, &[x], None).unwrap();
            assert!((a.value - b.value).abs() <= 1e-10, "{} vs {}", a.value, b.value);
            check_invariants(1, &grid, &f, &[x], &a);
            check_invariants(1, &grid, &f, &[x], &b);
        }
    }

    #[test]
    fn adding_a_point_can_only_raise_the_hull() {
        let mut rng = StdRng::seed_from_u64(103);
        for _ in 0..20 {
            let n = 10;
            let grid: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
            let f: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = rng.gen_range(-0.8..0.8);
            let full = hull_1d(&grid, &f, x).unwrap().value;
            // delete an interior point and compare
            let del = rng.gen_range(1..n - 1);
            let g2: Vec<f64> = grid
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != del)
                .map(|(_, &v)| v)
                .collect();
            let f2: Vec<f64> = f
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != del)
                .map(|(_, &v)| v)
                .collect();
            let reduced = hull_1d(&g2, &f2, x).unwrap().value;
            assert!(full >= reduced - 1e-12);
        }
    }

    #[test]
    fn warm_gradient_guess_reproduces_the_same_result() {
        let mut rng = StdRng::seed_from_u64(104);
        let n = 6;
        let mut grid = Vec::new();
        let mut f = Vec::new();
        for i in 0..n {
            for j in 0..n {
                grid.push(-1.0 + 0.4 * i as f64);
                grid.push(-1.0 + 0.4 * j as f64);
                f.push(rng.gen_range(-1.0..1.0));
            }
        }
        let x = [0.17, -0.23];
        let cold = hull_nd(2, &grid, &f, &x, None).unwrap();
        let warm = hull_nd(2, &grid, &f, &x, Some(&cold.gradient)).unwrap();
        assert!((warm.value - cold.value).abs() <= 1e-10);
        check_invariants(2, &grid, &f, &x, &warm);
    }

    #[test]
    fn argconc_on_the_dip_example() {
        let grid = [-1.0, 0.0, 1.0];
        let f = [0.0f64, -1.0, 0.0];
        let (support, lam) = argconc_support(1, &grid, &f, &[0.0], None).unwrap();
        assert_eq!(support, vec![0, 2]);
        assert!((lam[0] - 0.5).abs() <= 1e-12 && (lam[1] - 0.5).abs() <= 1e-12);
    }
}
