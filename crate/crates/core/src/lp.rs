//! Dense LP oracle for desk-scale instances: exact optimum of the martingale
//! transport LP, feasibility certificates for the coupling polytope (which by
//! Strassen decide the convex order in any dimension), and dual prices.
//!
//! Two-phase revised primal simplex with Bland's rule: anti-cycling over
//! speed, since this module exists as ground truth for the entropic solvers.
//! Constraint columns are generated on the fly (each has at most `d + 2`
//! nonzeros), only the basis inverse is dense.

use thiserror::Error;

use crate::model::{DiscreteMeasure, MotInstance};
use crate::scalar::{lit, Scalar};

/// Refuse instances with more kernel entries than this.
pub const LP_SIZE_GUARD: usize = 100_000;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LpError {
    #[error("instance has {entries} kernel entries; the dense oracle is limited to {guard}")]
    SizeGuard { entries: usize, guard: usize },
    #[error("marginals have mismatched dimensions")]
    DimensionMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    IterationLimit,
}

/// Dual prices of the transport constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct LpDuals<S> {
    pub phi: Vec<S>,
    pub psi: Vec<S>,
    /// Flat `nx * d`.
    pub h: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution<S> {
    pub value: S,
    /// Row-major `nx * ny` coupling matrix.
    pub coupling: Vec<S>,
    pub status: LpStatus,
    pub duals: Option<LpDuals<S>>,
}

/// Columns of the MOT constraint matrix, generated per variable (x, y).
struct MotColumns<'a, S> {
    mu: &'a DiscreteMeasure<S>,
    nu: &'a DiscreteMeasure<S>,
    d: usize,
}

impl<'a, S: Scalar> MotColumns<'a, S> {
    fn nx(&self) -> usize {
        self.mu.len()
    }

    fn ny(&self) -> usize {
        self.nu.len()
    }

    fn nrows(&self) -> usize {
        // row sums, column sums with the last dropped (redundant with total
        // mass), martingale block
        self.nx() + self.ny() - 1 + self.d * self.nx()
    }

    /// Writes the nonzeros of column (x, y) as (row, value) pairs.
    fn column(&self, var: usize, out: &mut Vec<(usize, S)>) {
        out.clear();
        let ny = self.ny();
        let xi = var / ny;
        let yi = var % ny;
        out.push((xi, S::one()));
        if yi + 1 < ny {
            out.push((self.nx() + yi, S::one()));
        }
        let x = self.mu.point(xi);
        let y = self.nu.point(yi);
        let base = self.nx() + ny - 1 + xi * self.d;
        for k in 0..self.d {
            let diff = y[k] - x[k];
            if diff != S::zero() {
                out.push((base + k, diff));
            }
        }
    }

    fn rhs(&self) -> Vec<S> {
        let mut b = Vec::with_capacity(self.nrows());
        b.extend_from_slice(self.mu.weights());
        b.extend_from_slice(&self.nu.weights()[..self.ny() - 1]);
        b.resize(self.nrows(), S::zero());
        b
    }
}

struct SimplexState<S> {
    m: usize,
    n: usize,
    /// Basis variable per row; indices >= n are artificials.
    basis: Vec<usize>,
    in_basis: Vec<bool>,
    /// Dense basis inverse, row-major m x m.
    binv: Vec<S>,
    /// Current basic solution `B^-1 b`.
    xb: Vec<S>,
}

impl<S: Scalar> SimplexState<S> {
    fn new(m: usize, n: usize, b: &[S]) -> Self {
        let mut binv = vec![S::zero(); m * m];
        for i in 0..m {
            binv[i * m + i] = S::one();
        }
        let mut in_basis = vec![false; n + m];
        for j in n..n + m {
            in_basis[j] = true;
        }
        SimplexState { m, n, basis: (n..n + m).collect(), in_basis, binv, xb: b.to_vec() }
    }

    /// `u = B^-1 a` for a sparse column.
    fn ftran(&self, col: &[(usize, S)], u: &mut [S]) {
        for v in u.iter_mut() {
            *v = S::zero();
        }
        for &(r, a) in col {
            for i in 0..self.m {
                u[i] += self.binv[i * self.m + r] * a;
            }
        }
    }

    /// Replaces the basis variable on `row` by `entering` with direction `u`.
    fn pivot(&mut self, row: usize, entering: usize, u: &[S]) {
        let m = self.m;
        let inv = S::one() / u[row];
        for c in 0..m {
            self.binv[row * m + c] *= inv;
        }
        self.xb[row] *= inv;
        for i in 0..m {
            if i != row {
                let f = u[i];
                if f != S::zero() {
                    for c in 0..m {
                        let v = self.binv[row * m + c];
                        self.binv[i * m + c] -= f * v;
                    }
                    let v = self.xb[row];
                    self.xb[i] -= f * v;
                    if self.xb[i] < S::zero() {
                        self.xb[i] = S::zero();
                    }
                }
            }
        }
        self.in_basis[self.basis[row]] = false;
        self.in_basis[entering] = true;
        self.basis[row] = entering;
    }

    /// `pi = c_B B^-1` for the given basic costs.
    fn prices(&self, cb: &[S]) -> Vec<S> {
        let m = self.m;
        let mut pi = vec![S::zero(); m];
        for i in 0..m {
            let c = cb[i];
            if c != S::zero() {
                for j in 0..m {
                    pi[j] += c * self.binv[i * m + j];
                }
            }
        }
        pi
    }
}

enum PhaseOutcome {
    Converged,
    IterationLimit,
}

/// One simplex phase, maximizing, Bland's rule: enter the smallest-index
/// column with positive reduced cost, leave the smallest-basis-index row
/// among the minimal ratios.
fn simplex_phase<S: Scalar>(
    cols: &MotColumns<'_, S>,
    state: &mut SimplexState<S>,
    cost_of: &dyn Fn(usize) -> S,
    max_iters: usize,
) -> PhaseOutcome {
    let m = state.m;
    let n = state.n;
    let mut col_buf: Vec<(usize, S)> = Vec::with_capacity(8);
    let mut u = vec![S::zero(); m];
    let tol = lit::<S>(1e-9);
    let ratio_tol = lit::<S>(1e-11);
    for _ in 0..max_iters {
        let cb: Vec<S> = state.basis.iter().map(|&j| cost_of(j)).collect();
        let pi = state.prices(&cb);
        // Bland entering rule over structural columns only; artificials never
        // re-enter.
        let mut entering = None;
        for j in 0..n {
            if state.in_basis[j] {
                continue;
            }
            cols.column(j, &mut col_buf);
            let mut red = cost_of(j);
            for &(r, a) in &col_buf {
                red -= pi[r] * a;
            }
            if red > tol {
                entering = Some(j);
                break;
            }
        }
        let Some(entering) = entering else {
            return PhaseOutcome::Converged;
        };
        cols.column(entering, &mut col_buf);
        state.ftran(&col_buf, &mut u);
        // Ratio test with Bland tie-break on the basis variable index.
        let mut leave: Option<(usize, S)> = None;
        for i in 0..m {
            if u[i] > ratio_tol {
                let ratio = state.xb[i].max(S::zero()) / u[i];
                match leave {
                    None => leave = Some((i, ratio)),
                    Some((li, lr)) => {
                        if ratio < lr - ratio_tol
                            || (ratio <= lr + ratio_tol && state.basis[i] < state.basis[li])
                        {
                            leave = Some((i, ratio));
                        }
                    }
                }
            }
        }
        let Some((row, _)) = leave else {
            // Unbounded direction cannot occur for couplings (mass bounded by
            // the marginals); treat as a numerical dead end.
            return PhaseOutcome::IterationLimit;
        };
        state.pivot(row, entering, &u);
    }
    PhaseOutcome::IterationLimit
}

fn guard<S: Scalar>(mu: &DiscreteMeasure<S>, nu: &DiscreteMeasure<S>) -> Result<(), LpError> {
    if mu.dim() != nu.dim() {
        return Err(LpError::DimensionMismatch);
    }
    let entries = mu.len() * nu.len();
    if entries > LP_SIZE_GUARD {
        return Err(LpError::SizeGuard { entries, guard: LP_SIZE_GUARD });
    }
    Ok(())
}

struct Phase1<S> {
    state: SimplexState<S>,
    violation: S,
    iteration_limited: bool,
}

/// Phase 1: drive artificials to zero. The returned violation is the l1
/// constraint residual of the best point found; redundant rows simply keep
/// their artificial basic at level zero.
fn phase1<S: Scalar>(cols: &MotColumns<'_, S>) -> Phase1<S> {
    let m = cols.nrows();
    let n = cols.nx() * cols.ny();
    let b = cols.rhs();
    let mut state = SimplexState::new(m, n, &b);
    let max_iters = 200 * (n + m);
    let cost = move |j: usize| if j >= n { -S::one() } else { S::zero() };
    let outcome = simplex_phase(cols, &mut state, &cost, max_iters);
    let mut violation = S::zero();
    for (i, &j) in state.basis.iter().enumerate() {
        if j >= n {
            violation += state.xb[i].abs();
        }
    }
    Phase1 {
        state,
        violation,
        iteration_limited: matches!(outcome, PhaseOutcome::IterationLimit),
    }
}

/// Solves `max sum P c` over couplings with marginals `(mu, nu)` and
/// conditional barycenter x. Infeasible status certifies (by Strassen) that
/// the marginals are not in convex order.
pub fn solve_mot_lp<S: Scalar>(inst: &MotInstance<S>) -> Result<LpSolution<S>, LpError> {
    guard(&inst.mu, &inst.nu)?;
    let cols = MotColumns { mu: &inst.mu, nu: &inst.nu, d: inst.dim() };
    let n = cols.nx() * cols.ny();
    let m = cols.nrows();
    let ny = cols.ny();

    let p1 = phase1(&cols);
    let feas_tol = lit::<S>(1e-9);
    if p1.violation > feas_tol {
        let status =
            if p1.iteration_limited { LpStatus::IterationLimit } else { LpStatus::Infeasible };
        return Ok(LpSolution {
            value: S::zero(),
            coupling: vec![S::zero(); n],
            status,
            duals: None,
        });
    }

    let mut state = p1.state;
    // Phase 2: structural costs; artificials stay pinned at zero (they may
    // only leave the basis, never enter).
    let obj: Vec<S> = (0..n).map(|j| inst.cost_at(j / ny, j % ny)).collect();
    let obj2 = obj.clone();
    let cost = move |j: usize| if j < n { obj2[j] } else { S::zero() };
    let outcome = simplex_phase(&cols, &mut state, &cost, 200 * (n + m));
    let status = match outcome {
        PhaseOutcome::Converged => LpStatus::Optimal,
        PhaseOutcome::IterationLimit => LpStatus::IterationLimit,
    };

    let mut coupling = vec![S::zero(); n];
    let mut value = S::zero();
    for (i, &j) in state.basis.iter().enumerate() {
        if j < n {
            let xv = state.xb[i].max(S::zero());
            coupling[j] = xv;
            value += obj[j] * xv;
        }
    }
    let duals = if matches!(status, LpStatus::Optimal) {
        let cb: Vec<S> =
            state.basis.iter().map(|&j| if j < n { obj[j] } else { S::zero() }).collect();
        let pi = state.prices(&cb);
        let nx = cols.nx();
        let d = cols.d;
        let mut psi = vec![S::zero(); ny];
        psi[..ny - 1].copy_from_slice(&pi[nx..nx + ny - 1]);
        Some(LpDuals {
            phi: pi[..nx].to_vec(),
            psi,
            h: pi[nx + ny - 1..nx + ny - 1 + nx * d].to_vec(),
        })
    } else {
        None
    };
    Ok(LpSolution { value, coupling, status, duals })
}

/// True iff a martingale coupling of `(mu, nu)` exists, i.e. the marginals
/// are in convex order; residual tolerance 1e-9 on the constraints.
pub fn feasible_martingale<S: Scalar>(
    mu: &DiscreteMeasure<S>,
    nu: &DiscreteMeasure<S>,
) -> Result<bool, LpError> {
    feasible_martingale_with_tol(mu, nu, lit(1e-9))
}

/// [`feasible_martingale`] with a caller-chosen residual tolerance (the
/// convex-order repair accepts 1e-6 mass-relative).
pub fn feasible_martingale_with_tol<S: Scalar>(
    mu: &DiscreteMeasure<S>,
    nu: &DiscreteMeasure<S>,
    tol: S,
) -> Result<bool, LpError> {
    guard(mu, nu)?;
    let cols = MotColumns { mu, nu, d: mu.dim() };
    let p1 = phase1(&cols);
    Ok(p1.violation <= tol)
}
