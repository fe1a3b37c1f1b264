//! Entropic regularization core: the objective
//! `V_eps(phi, psi, h) = mu[phi] + nu[psi] + eps * sum exp(-Delta/eps)` with
//! `Delta = phi(x) + psi(y) + h(x).(y-x) - c(x,y)`, its three block
//! minimizations, stabilized kernel arithmetic, and kernel truncation.
//!
//! Kernel entries are recomputed on the fly over active sets; the dense
//! `|X| x |Y|` matrix is never materialized.

use rayon::prelude::*;
use thiserror::Error;

use crate::model::{DiscreteMeasure, DualState, MotInstance};
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EntropicError {
    #[error("log-sum-exp of an empty term list")]
    EmptyTerms,
    #[error("non-finite term in log-sum-exp")]
    NonFiniteTerms,
    #[error("martingale block infeasible at x index {x_index}: point {point:?} lies outside the relative interior of the convex hull of its active y points")]
    InfeasibleMartingale { x_index: usize, point: Vec<f64> },
    #[error("h-Newton at x index {x_index} did not reach tolerance after {iterations} iterations (residual {residual:e})")]
    IterationLimit { x_index: usize, iterations: usize, residual: f64 },
    #[error("active sets: {0}")]
    ActiveSets(#[from] ActiveSetError),
    #[error("epsilon must be positive and finite, got {0}")]
    BadEpsilon(f64),
    #[error("penalization weights must all be positive")]
    BadPenalization,
    #[error("active-set shape does not match instance ({rows} rows for {nx} x-points)")]
    ShapeMismatch { rows: usize, nx: usize },
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ActiveSetError {
    #[error("active set for x index {x_index} is empty")]
    EmptyRow { x_index: usize },
    #[error("y index {y_index} is not active for any x; its marginal constraint cannot be met")]
    UncoveredColumn { y_index: usize },
    #[error("active y index {y_index} out of range for {ny} y-points")]
    IndexOutOfRange { y_index: usize, ny: usize },
}

/// Per-x sorted lists of surviving y indices, with a transposed view.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSets {
    ny: usize,
    row_offsets: Vec<usize>,
    ys: Vec<u32>,
    col_offsets: Vec<usize>,
    /// (x index, flat entry position) per column, in increasing x order.
    col_entries: Vec<(u32, u32)>,
}

impl ActiveSets {
    /// Builds from per-x index lists; every row must be nonempty, indices in
    /// range, and every y index covered by at least one row.
    pub fn new(rows: Vec<Vec<u32>>, ny: usize) -> Result<Self, ActiveSetError> {
        let mut row_offsets = Vec::with_capacity(rows.len() + 1);
        let mut ys = Vec::new();
        row_offsets.push(0usize);
        for (x_index, mut row) in rows.into_iter().enumerate() {
            if row.is_empty() {
                return Err(ActiveSetError::EmptyRow { x_index });
            }
            row.sort_unstable();
            for &y in &row {
                if y as usize >= ny {
                    return Err(ActiveSetError::IndexOutOfRange { y_index: y as usize, ny });
                }
            }
            ys.extend_from_slice(&row);
            row_offsets.push(ys.len());
        }
        let mut covered = vec![false; ny];
        for &y in &ys {
            covered[y as usize] = true;
        }
        if let Some(y_index) = covered.iter().position(|c| !c) {
            return Err(ActiveSetError::UncoveredColumn { y_index });
        }
        Ok(Self::from_sorted(row_offsets, ys, ny))
    }

    /// Full product: every y active for every x.
    pub fn full(nx: usize, ny: usize) -> Self {
        let row_offsets = (0..=nx).map(|i| i * ny).collect();
        let mut ys = Vec::with_capacity(nx * ny);
        for _ in 0..nx {
            ys.extend(0..ny as u32);
        }
        Self::from_sorted(row_offsets, ys, ny)
    }

    fn from_sorted(row_offsets: Vec<usize>, ys: Vec<u32>, ny: usize) -> Self {
        let mut col_counts = vec![0usize; ny];
        for &y in &ys {
            col_counts[y as usize] += 1;
        }
        let mut col_offsets = Vec::with_capacity(ny + 1);
        let mut acc = 0usize;
        col_offsets.push(0);
        for &c in &col_counts {
            acc += c;
            col_offsets.push(acc);
        }
        let mut cursor = col_offsets.clone();
        let mut col_entries = vec![(0u32, 0u32); ys.len()];
        let nx = row_offsets.len() - 1;
        for x in 0..nx {
            for pos in row_offsets[x]..row_offsets[x + 1] {
                let y = ys[pos] as usize;
                col_entries[cursor[y]] = (x as u32, pos as u32);
                cursor[y] += 1;
            }
        }
        ActiveSets { ny, row_offsets, ys, col_offsets, col_entries }
    }

    pub fn nx(&self) -> usize {
        self.row_offsets.len() - 1
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    /// Active y indices for row `x`.
    #[inline]
    pub fn row(&self, x: usize) -> &[u32] {
        &self.ys[self.row_offsets[x]..self.row_offsets[x + 1]]
    }

    /// Flat position of the first entry of row `x`.
    #[inline]
    pub fn row_start(&self, x: usize) -> usize {
        self.row_offsets[x]
    }

    /// (x, flat position) pairs for column `y`.
    #[inline]
    pub fn col(&self, y: usize) -> &[(u32, u32)] {
        &self.col_entries[self.col_offsets[y]..self.col_offsets[y + 1]]
    }

    /// Total number of active entries.
    pub fn entry_count(&self) -> usize {
        self.ys.len()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        self.row(x).binary_search(&(y as u32)).is_ok()
    }

    pub fn rows(&self) -> Vec<Vec<u32>> {
        (0..self.nx()).map(|x| self.row(x).to_vec()).collect()
    }

    /// Mean row length, a sparsity diagnostic.
    pub fn mean_row_len(&self) -> f64 {
        self.ys.len() as f64 / self.nx().max(1) as f64
    }
}

/// Quadratic penalization `alpha/2 * sum_y a_y (psi_y - anchor_y)^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Penalization<S> {
    pub alpha: S,
    pub a_weights: Vec<S>,
    pub psi_anchor: Option<Vec<S>>,
}

impl<S: Scalar> Penalization<S> {
    pub fn value(&self, psi: &[S]) -> S {
        let half = lit::<S>(0.5);
        let mut acc = S::zero();
        for (y, &p) in psi.iter().enumerate() {
            let dev = p - self.anchor(y);
            acc += self.a_weights[y] * dev * dev;
        }
        self.alpha * half * acc
    }

    /// d/d psi_y of the penalty.
    #[inline]
    pub fn grad(&self, y: usize, psi_y: S) -> S {
        self.alpha * self.a_weights[y] * (psi_y - self.anchor(y))
    }

    #[inline]
    fn anchor(&self, y: usize) -> S {
        self.psi_anchor.as_ref().map_or(S::zero(), |a| a[y])
    }
}

/// The entropic problem: instance, regularization strength, active sets, and
/// optional penalization.
#[derive(Debug, Clone)]
pub struct EntropicProblem<'a, S> {
    inst: &'a MotInstance<S>,
    epsilon: S,
    active: ActiveSets,
    penalization: Option<Penalization<S>>,
}

impl<'a, S: Scalar> EntropicProblem<'a, S> {
    pub fn new(
        inst: &'a MotInstance<S>,
        epsilon: S,
        active: ActiveSets,
        penalization: Option<Penalization<S>>,
    ) -> Result<Self, EntropicError> {
        if !(epsilon > S::zero()) || !epsilon.is_finite() {
            return Err(EntropicError::BadEpsilon(epsilon.to_f64().unwrap_or(f64::NAN)));
        }
        if active.nx() != inst.mu.len() {
            return Err(EntropicError::ShapeMismatch { rows: active.nx(), nx: inst.mu.len() });
        }
        if active.ny() != inst.nu.len() {
            return Err(EntropicError::ShapeMismatch { rows: active.ny(), nx: inst.nu.len() });
        }
        if let Some(p) = &penalization {
            let ok = p.a_weights.len() == inst.nu.len()
                && p.a_weights.iter().all(|&a| a > S::zero() && a.is_finite())
                && p.alpha >= S::zero()
                && p.psi_anchor.as_ref().map_or(true, |a| a.len() == inst.nu.len());
            if !ok {
                return Err(EntropicError::BadPenalization);
            }
        }
        Ok(EntropicProblem { inst, epsilon, active, penalization })
    }

    /// Full active sets, no penalization.
    pub fn dense(inst: &'a MotInstance<S>, epsilon: S) -> Result<Self, EntropicError> {
        let active = ActiveSets::full(inst.mu.len(), inst.nu.len());
        Self::new(inst, epsilon, active, None)
    }

    pub fn instance(&self) -> &MotInstance<S> {
        self.inst
    }

    pub fn epsilon(&self) -> S {
        self.epsilon
    }

    pub fn active(&self) -> &ActiveSets {
        &self.active
    }

    pub fn penalization(&self) -> Option<&Penalization<S>> {
        self.penalization.as_ref()
    }

    pub fn with_epsilon(mut self, epsilon: S) -> Result<Self, EntropicError> {
        if !(epsilon > S::zero()) || !epsilon.is_finite() {
            return Err(EntropicError::BadEpsilon(epsilon.to_f64().unwrap_or(f64::NAN)));
        }
        self.epsilon = epsilon;
        Ok(self)
    }

    pub fn with_active(mut self, active: ActiveSets) -> Result<Self, EntropicError> {
        if active.nx() != self.inst.mu.len() || active.ny() != self.inst.nu.len() {
            return Err(EntropicError::ShapeMismatch {
                rows: active.nx(),
                nx: self.inst.mu.len(),
            });
        }
        self.active = active;
        Ok(self)
    }

    pub fn with_penalization(mut self, p: Option<Penalization<S>>) -> Result<Self, EntropicError> {
        if let Some(pen) = &p {
            let ok = pen.a_weights.len() == self.inst.nu.len()
                && pen.a_weights.iter().all(|&a| a > S::zero() && a.is_finite());
            if !ok {
                return Err(EntropicError::BadPenalization);
            }
        }
        self.penalization = p;
        Ok(self)
    }
}

/// The slack `Delta(x, y) = phi(x) + psi(y) + h(x).(y - x) - c(x, y)`.
#[inline]
pub fn delta<S: Scalar>(
    prob: &EntropicProblem<'_, S>,
    state: &DualState<S>,
    xi: usize,
    yi: usize,
) -> S {
    let x = prob.inst.mu.point(xi);
    let y = prob.inst.nu.point(yi);
    let mut dot = S::zero();
    for (k, hk) in state.h_row(xi).iter().enumerate() {
        dot += *hk * (y[k] - x[k]);
    }
    state.phi[xi] + state.psi[yi] + dot - prob.inst.cost_at(xi, yi)
}

/// Log of a sum of exponentials, computed as `M + ln sum exp(t_i - M)` with
/// `M = max t_i` so the exponential arguments never exceed zero, plus a log
/// offset (used to fold in `-ln mu_x` separately so tiny weights survive).
pub fn stabilized_log_mean<S: Scalar>(terms: &[S], log_weight_offset: S) -> Result<S, EntropicError> {
    if terms.is_empty() {
        return Err(EntropicError::EmptyTerms);
    }
    let mut m = S::neg_infinity();
    for &t in terms {
        if !t.is_finite() {
            return Err(EntropicError::NonFiniteTerms);
        }
        if t > m {
            m = t;
        }
    }
    let mut acc = S::zero();
    for &t in terms {
        acc += (t - m).exp();
    }
    Ok(m + acc.ln() + log_weight_offset)
}

/// Unchecked log-sum-exp over a slice known to be nonempty and finite.
#[inline]
fn log_sum_exp<S: Scalar>(terms: &[S]) -> S {
    let mut m = terms[0];
    for &t in &terms[1..] {
        if t > m {
            m = t;
        }
    }
    let mut acc = S::zero();
    for &t in terms {
        acc += (t - m).exp();
    }
    m + acc.ln()
}

/// Closed-form phi block: for every x,
/// `phi(x) = eps ln( (1/mu_x) sum_y exp(-(psi(y) + h(x).(y-x) - c(x,y))/eps) )`
/// over the active set, so the x-marginal of the kernel equals `mu_x` exactly.
pub fn update_phi<S: Scalar>(prob: &EntropicProblem<'_, S>, state: &DualState<S>) -> Vec<S> {
    let inst = prob.inst;
    let inv_eps = S::one() / prob.epsilon;
    (0..inst.mu.len())
        .into_par_iter()
        .map(|xi| {
            let x = inst.mu.point(xi);
            let h = state.h_row(xi);
            let terms: Vec<S> = prob
                .active
                .row(xi)
                .iter()
                .map(|&yu| {
                    let yi = yu as usize;
                    let y = inst.nu.point(yi);
                    let mut dot = S::zero();
                    for k in 0..x.len() {
                        dot += h[k] * (y[k] - x[k]);
                    }
                    -(state.psi[yi] + dot - inst.cost_at(xi, yi)) * inv_eps
                })
                .collect();
            prob.epsilon * (log_sum_exp(&terms) - inst.mu.weight(xi).ln())
        })
        .collect()
}

/// Closed-form psi block, mirroring [`update_phi`] with the y-marginal `nu`.
pub fn update_psi<S: Scalar>(prob: &EntropicProblem<'_, S>, state: &DualState<S>) -> Vec<S> {
    let inst = prob.inst;
    let inv_eps = S::one() / prob.epsilon;
    (0..inst.nu.len())
        .into_par_iter()
        .map(|yi| {
            let y = inst.nu.point(yi);
            let terms: Vec<S> = prob
                .active
                .col(yi)
                .iter()
                .map(|&(xu, _)| {
                    let xi = xu as usize;
                    let x = inst.mu.point(xi);
                    let h = state.h_row(xi);
                    let mut dot = S::zero();
                    for k in 0..x.len() {
                        dot += h[k] * (y[k] - x[k]);
                    }
                    -(state.phi[xi] + dot - inst.cost_at(xi, yi)) * inv_eps
                })
                .collect();
            prob.epsilon * (log_sum_exp(&terms) - inst.nu.weight(yi).ln())
        })
        .collect()
}

/// Result of the per-x martingale block.
#[derive(Debug, Clone)]
pub struct HUpdate<S> {
    /// Root of the conditional barycenter equation.
    pub h: Vec<S>,
    /// Implied phi at the returned h.
    pub phi: S,
    /// Newton iterations spent.
    pub iterations: usize,
    /// Final barycenter residual norm.
    pub residual: S,
}

pub fn h_tolerance<S: Scalar>(x: &[S]) -> S {
    let norm = x.iter().map(|&c| c * c).sum::<S>().sqrt();
    lit::<S>(1e-11) * (S::one() + norm)
}

pub const MAX_H_ITERS: usize = 50;

/// Scratch for one per-x martingale solve; reusing it across x avoids
/// reallocating in the sweep hot loop.
#[derive(Debug, Clone)]
pub(crate) struct HScratch<S> {
    base: Vec<S>,
    diffs: Vec<S>,
    terms: Vec<S>,
    pub(crate) weights: Vec<S>,
}

impl<S> Default for HScratch<S> {
    fn default() -> Self {
        HScratch { base: Vec::new(), diffs: Vec::new(), terms: Vec::new(), weights: Vec::new() }
    }
}

/// Joint (phi, h) block for one x: damped Newton on the implied map
/// `F(h) = mu_x * (phi_hat(h) + eps)` whose gradient is
/// `-sum_y (y-x) exp(-Delta_hat/eps)`; converges when the conditional kernel
/// barycenter matches x to [`h_tolerance`].
pub fn update_h<S: Scalar>(
    prob: &EntropicProblem<'_, S>,
    psi: &[S],
    xi: usize,
    warm: &[S],
) -> Result<HUpdate<S>, EntropicError> {
    let mut scratch = HScratch::default();
    update_h_scratch(prob, psi, xi, warm, &mut scratch)
}

pub(crate) fn update_h_scratch<S: Scalar>(
    prob: &EntropicProblem<'_, S>,
    psi: &[S],
    xi: usize,
    warm: &[S],
    scratch: &mut HScratch<S>,
) -> Result<HUpdate<S>, EntropicError> {
    let inst = prob.inst;
    let d = inst.dim();
    let x = inst.mu.point(xi);
    let eps = prob.epsilon;
    let inv_eps = S::one() / eps;
    let row = prob.active.row(xi);
    let n = row.len();

    // Fixed per-entry pieces: base_j = (c - psi)/eps and diff_j = y - x.
    scratch.base.clear();
    scratch.diffs.clear();
    for &yu in row {
        let yi = yu as usize;
        let y = inst.nu.point(yi);
        scratch.base.push((inst.cost_at(xi, yi) - psi[yi]) * inv_eps);
        for k in 0..d {
            scratch.diffs.push(y[k] - x[k]);
        }
    }
    let base = &scratch.base;
    let diffs = &scratch.diffs;
    scratch.terms.resize(n, S::zero());
    scratch.weights.resize(n, S::zero());

    let tol = h_tolerance(x);
    let mut h = warm.to_vec();
    let mut mean = vec![S::zero(); d];

    // log Z(h) and softmax weights at h; the implied phi is a monotone
    // transform of log Z, so backtracking tests log Z directly.
    let eval = |h: &[S], terms: &mut [S], weights: &mut [S], mean: &mut [S]| -> S {
        for j in 0..n {
            let mut dot = S::zero();
            for k in 0..d {
                dot += h[k] * diffs[j * d + k];
            }
            terms[j] = base[j] - dot * inv_eps;
        }
        let mut m = terms[0];
        for &t in terms[1..].iter() {
            if t > m {
                m = t;
            }
        }
        let mut z = S::zero();
        for j in 0..n {
            let e = (terms[j] - m).exp();
            weights[j] = e;
            z += e;
        }
        let inv_z = S::one() / z;
        for k in 0..d {
            mean[k] = S::zero();
        }
        for j in 0..n {
            weights[j] *= inv_z;
            let w = weights[j];
            for k in 0..d {
                mean[k] += w * diffs[j * d + k];
            }
        }
        m + z.ln()
    };

    let mut logz = eval(&h, &mut scratch.terms, &mut scratch.weights, &mut mean);
    let mut iterations = 0usize;
    let mut residual = norm2(&mean);
    // Step multiplier that doubles after every accepted full step: against
    // exponential tails (x at the edge of its active hull) plain Newton gains
    // one e-fold per iteration, which is too slow under the iteration cap.
    let mut boost = S::one();

    while residual > tol {
        if iterations >= MAX_H_ITERS {
            return Err(classify_h_failure(prob, xi, iterations, residual));
        }
        // Newton direction eps * Cov^{-1} mean; Cov is the conditional
        // covariance of (y - x) under the softmax weights.
        let mut cov = vec![S::zero(); d * d];
        for j in 0..n {
            let w = scratch.weights[j];
            for a in 0..d {
                let da = diffs[j * d + a];
                for b in a..d {
                    cov[a * d + b] += w * da * diffs[j * d + b];
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = cov[a * d + b] - mean[a] * mean[b];
                cov[a * d + b] = v;
                cov[b * d + a] = v;
            }
        }
        let mut dir = match solve_sym(&cov, d, &mean) {
            Some(sol) => sol.iter().map(|&s| eps * s).collect::<Vec<S>>(),
            None => {
                // Singular curvature (weights collapsed onto too few points):
                // gradient direction scaled so the exponent shift is order one.
                let mut tr = S::zero();
                for a in 0..d {
                    tr += cov[a * d + a];
                }
                let denom = tr / lit(d as f64) + residual * residual;
                mean.iter().map(|&mk| eps * mk / denom).collect()
            }
        };
        // Trust cap on the exponent shift: when the kernel is concentrated the
        // covariance badly underestimates how far the root is, and an uncapped
        // step followed by halvings crawls one e-fold per iteration.
        let mut shift = S::zero();
        for j in 0..n {
            let mut s = S::zero();
            for k in 0..d {
                s += dir[k] * diffs[j * d + k];
            }
            shift = shift.max(s.abs() * inv_eps);
        }
        let cap = lit::<S>(16.0);
        if shift > cap {
            let scale = cap / shift;
            for v in dir.iter_mut() {
                *v = *v * scale;
            }
        }

        let mut step = boost;
        let mut accepted = false;
        let mut halved = false;
        let mut trial = vec![S::zero(); d];
        for _ in 0..60 {
            for k in 0..d {
                trial[k] = h[k] + step * dir[k];
            }
            let logz_try = eval(&trial, &mut scratch.terms, &mut scratch.weights, &mut mean);
            // Near the root the objective decrease drops under float
            // resolution while the gradient still shrinks quadratically, so a
            // halved residual also counts as progress.
            if logz_try < logz || norm2(&mean) < lit::<S>(0.5) * residual {
                h.copy_from_slice(&trial);
                logz = logz_try;
                accepted = true;
                break;
            }
            step = step * lit(0.5);
            halved = true;
        }
        boost = if halved { S::one() } else { (boost * lit(2.0)).min(lit(1024.0)) };
        iterations += 1;
        if !accepted {
            // Stalled at the numerical floor; re-evaluate at the kept h and
            // let the residual check below decide.
            logz = eval(&h, &mut scratch.terms, &mut scratch.weights, &mut mean);
            residual = norm2(&mean);
            break;
        }
        residual = norm2(&mean);
    }

    if residual > tol {
        return Err(classify_h_failure(prob, xi, iterations, residual));
    }
    let phi = eps * (logz - inst.mu.weight(xi).ln());
    Ok(HUpdate { h, phi, iterations, residual })
}

fn classify_h_failure<S: Scalar>(
    prob: &EntropicProblem<'_, S>,
    xi: usize,
    iterations: usize,
    residual: S,
) -> EntropicError {
    let inst = prob.inst;
    let d = inst.dim();
    let x = inst.mu.point(xi);
    let dirs: Vec<Vec<S>> = prob
        .active
        .row(xi)
        .iter()
        .map(|&yu| {
            let y = inst.nu.point(yu as usize);
            (0..d).map(|k| y[k] - x[k]).collect()
        })
        .collect();
    // Only a strictly exterior x is provably infeasible; on the boundary the
    // infimum is approached by concentration and a stall is an iteration
    // limit, not a certificate.
    if origin_strictly_outside(&dirs, d) {
        EntropicError::InfeasibleMartingale {
            x_index: xi,
            point: x.iter().map(|&c| c.to_f64().unwrap_or(f64::NAN)).collect(),
        }
    } else {
        EntropicError::IterationLimit {
            x_index: xi,
            iterations,
            residual: residual.to_f64().unwrap_or(f64::NAN),
        }
    }
}

/// True when the origin lies strictly outside `conv(dirs)` (dimensions 1 and
/// 2; higher dimensions return false).
fn origin_strictly_outside<S: Scalar>(dirs: &[Vec<S>], d: usize) -> bool {
    let mut scale = S::zero();
    for v in dirs {
        scale = scale.max(norm2(v));
    }
    let tol = (S::one() + scale) * lit(1e-12);
    if scale <= tol {
        return false;
    }
    match d {
        1 => {
            let mut min = S::infinity();
            let mut max = S::neg_infinity();
            for v in dirs {
                min = min.min(v[0]);
                max = max.max(v[0]);
            }
            min > tol || max < -tol
        }
        2 => {
            let mut pts: Vec<(S, S)> = dirs.iter().map(|v| (v[0], v[1])).collect();
            pts.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            pts.dedup();
            if pts.len() == 1 {
                let p = pts[0];
                return (p.0 * p.0 + p.1 * p.1).sqrt() > tol;
            }
            let cross = |o: (S, S), a: (S, S), b: (S, S)| -> S {
                (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
            };
            let mut hull: Vec<(S, S)> = Vec::new();
            for &p in &pts {
                while hull.len() >= 2
                    && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= S::zero()
                {
                    hull.pop();
                }
                hull.push(p);
            }
            let lower = hull.len() + 1;
            for &p in pts.iter().rev() {
                while hull.len() >= lower
                    && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= S::zero()
                {
                    hull.pop();
                }
                hull.push(p);
            }
            hull.pop();
            if hull.len() < 3 {
                // collinear: distance from the line, then the 1D test along it
                let a = hull[0];
                let b = *hull.last().unwrap();
                let len = ((b.0 - a.0) * (b.0 - a.0) + (b.1 - a.1) * (b.1 - a.1)).sqrt();
                if len <= tol {
                    return (a.0 * a.0 + a.1 * a.1).sqrt() > tol;
                }
                let off = (cross(a, b, (S::zero(), S::zero())) / len).abs();
                if off > tol {
                    return true;
                }
                let u = ((b.0 - a.0) / len, (b.1 - a.1) / len);
                let mut min = S::infinity();
                let mut max = S::neg_infinity();
                for p in &pts {
                    let s = p.0 * u.0 + p.1 * u.1;
                    min = min.min(s);
                    max = max.max(s);
                }
                return min > tol || max < -tol;
            }
            for i in 0..hull.len() {
                let a = hull[i];
                let b = hull[(i + 1) % hull.len()];
                let edge = ((b.0 - a.0) * (b.0 - a.0) + (b.1 - a.1) * (b.1 - a.1)).sqrt();
                if cross(a, b, (S::zero(), S::zero())) < -tol * edge {
                    return true;
                }
            }
            false
        }
        _ => false,
    }
}

fn norm2<S: Scalar>(v: &[S]) -> S {
    v.iter().map(|&c| c * c).sum::<S>().sqrt()
}

/// Solves a small symmetric positive definite system; `None` when the pivot
/// falls under the relative threshold.
fn solve_sym<S: Scalar>(a: &[S], d: usize, rhs: &[S]) -> Option<Vec<S>> {
    let mut scale = S::zero();
    for i in 0..d {
        scale = scale.max(a[i * d + i].abs());
    }
    let tiny = scale * S::epsilon() * lit(16.0);
    match d {
        1 => {
            if a[0] > tiny && a[0] > S::zero() {
                Some(vec![rhs[0] / a[0]])
            } else {
                None
            }
        }
        2 => {
            let det = a[0] * a[3] - a[1] * a[2];
            if det > tiny * tiny.max(S::min_positive_value()) && a[0] > S::zero() {
                Some(vec![(a[3] * rhs[0] - a[1] * rhs[1]) / det, (a[0] * rhs[1] - a[2] * rhs[0]) / det])
            } else {
                None
            }
        }
        _ => {
            // Gaussian elimination with partial pivoting.
            let mut m = a.to_vec();
            let mut b = rhs.to_vec();
            for col in 0..d {
                let mut piv = col;
                for r in col + 1..d {
                    if m[r * d + col].abs() > m[piv * d + col].abs() {
                        piv = r;
                    }
                }
                if m[piv * d + col].abs() <= tiny {
                    return None;
                }
                if piv != col {
                    for k in 0..d {
                        m.swap(col * d + k, piv * d + k);
                    }
                    b.swap(col, piv);
                }
                let inv = S::one() / m[col * d + col];
                for r in col + 1..d {
                    let f = m[r * d + col] * inv;
                    if f != S::zero() {
                        for k in col..d {
                            let v = m[col * d + k];
                            m[r * d + k] -= f * v;
                        }
                        b[r] = b[r] - f * b[col];
                    }
                }
            }
            let mut x = vec![S::zero(); d];
            for r in (0..d).rev() {
                let mut acc = b[r];
                for k in r + 1..d {
                    acc -= m[r * d + k] * x[k];
                }
                x[r] = acc / m[r * d + r];
            }
            Some(x)
        }
    }
}

/// Exact relative-interior membership of the origin in `conv(dirs)` for
/// dimensions 1 and 2 (the scope of the built-in experiments). Higher
/// dimensions conservatively return `true`, so failures there surface as
/// iteration limits rather than infeasibility claims.
pub(crate) fn origin_in_relint<S: Scalar>(dirs: &[Vec<S>], d: usize) -> bool {
    let mut scale = S::zero();
    for v in dirs {
        scale = scale.max(norm2(v));
    }
    let tol = (S::one() + scale) * lit(1e-12);
    if scale <= tol {
        return true; // all points coincide with x
    }
    match d {
        1 => {
            let mut neg = false;
            let mut pos = false;
            for v in dirs {
                if v[0] < -tol {
                    neg = true;
                }
                if v[0] > tol {
                    pos = true;
                }
            }
            neg && pos
        }
        2 => {
            // Rank of the point set as vectors.
            let mut best = S::zero();
            let mut u = [S::zero(); 2];
            for v in dirs {
                let n = norm2(v);
                if n > best {
                    best = n;
                    u = [v[0] / n, v[1] / n];
                }
            }
            let mut max_cross = S::zero();
            for v in dirs {
                max_cross = max_cross.max((u[0] * v[1] - u[1] * v[0]).abs());
            }
            if max_cross <= tol {
                // Collinear through the origin: 1D test along u.
                let mut neg = false;
                let mut pos = false;
                for v in dirs {
                    let s = v[0] * u[0] + v[1] * u[1];
                    if s < -tol {
                        neg = true;
                    }
                    if s > tol {
                        pos = true;
                    }
                }
                return neg && pos;
            }
            // Full rank: the origin must be strictly inside the 2D hull.
            origin_strictly_inside_hull2(dirs, tol)
        }
        _ => true,
    }
}

/// Monotone-chain hull of 2D points, then a strict interior test for 0.
fn origin_strictly_inside_hull2<S: Scalar>(dirs: &[Vec<S>], tol: S) -> bool {
    let mut pts: Vec<(S, S)> = dirs.iter().map(|v| (v[0], v[1])).collect();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    pts.dedup();
    if pts.len() < 3 {
        return false;
    }
    let cross = |o: (S, S), a: (S, S), b: (S, S)| -> S {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut hull: Vec<(S, S)> = Vec::new();
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= S::zero() {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev() {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= S::zero() {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    if hull.len() < 3 {
        return false;
    }
    for i in 0..hull.len() {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        let c = cross(a, b, (S::zero(), S::zero()));
        let edge = ((b.0 - a.0) * (b.0 - a.0) + (b.1 - a.1) * (b.1 - a.1)).sqrt();
        if c <= tol * edge {
            return false;
        }
    }
    true
}

/// Evaluation of the kernel `p = exp(-Delta/eps)` over active entries.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelStats<S> {
    /// `sum p * c`.
    pub primal_value: S,
    /// `sum (ln p - 1) p`, the relative entropy against the counting measure.
    pub entropy: S,
    /// `mu[phi] + nu[psi] + eps * mass`.
    pub dual_value: S,
    pub x_marginal: Vec<S>,
    pub y_marginal: Vec<S>,
    /// `sum_y p(x,y)(y-x)` per x, flat `nx * d`.
    pub martingale_residual: Vec<S>,
    /// Total kernel mass `sum p`.
    pub mass: S,
}

impl<S: Scalar> KernelStats<S> {
    pub fn x_marginal_err_l1(&self, mu: &DiscreteMeasure<S>) -> S {
        self.x_marginal
            .iter()
            .zip(mu.weights())
            .map(|(&m, &w)| (m - w).abs())
            .sum()
    }

    pub fn y_marginal_err_l1(&self, nu: &DiscreteMeasure<S>) -> S {
        self.y_marginal
            .iter()
            .zip(nu.weights())
            .map(|(&m, &w)| (m - w).abs())
            .sum()
    }

    pub fn martingale_err_l1(&self) -> S {
        self.martingale_residual.iter().map(|&v| v.abs()).sum()
    }
}

/// One pass over active entries: primal value, entropy, dual value, both
/// marginals, martingale residuals, and total mass. Accumulation runs in row
/// order so results do not depend on thread count.
pub fn kernel_stats<S: Scalar>(prob: &EntropicProblem<'_, S>, state: &DualState<S>) -> KernelStats<S> {
    let inst = prob.inst;
    let d = inst.dim();
    let nx = inst.mu.len();
    let ny = inst.nu.len();
    let inv_eps = S::one() / prob.epsilon;
    let mut primal = S::zero();
    let mut entropy = S::zero();
    let mut mass = S::zero();
    let mut x_marginal = vec![S::zero(); nx];
    let mut y_marginal = vec![S::zero(); ny];
    let mut mart = vec![S::zero(); nx * d];
    for xi in 0..nx {
        let x = inst.mu.point(xi);
        let h = state.h_row(xi);
        for &yu in prob.active.row(xi) {
            let yi = yu as usize;
            let y = inst.nu.point(yi);
            let mut dot = S::zero();
            for k in 0..d {
                dot += h[k] * (y[k] - x[k]);
            }
            let c = inst.cost_at(xi, yi);
            let dlt = state.phi[xi] + state.psi[yi] + dot - c;
            let t = -dlt * inv_eps;
            let p = t.exp();
            mass += p;
            primal += p * c;
            entropy += (t - S::one()) * p;
            x_marginal[xi] += p;
            y_marginal[yi] += p;
            for k in 0..d {
                mart[xi * d + k] += p * (y[k] - x[k]);
            }
        }
    }
    let mut dual = prob.epsilon * mass;
    for xi in 0..nx {
        dual += inst.mu.weight(xi) * state.phi[xi];
    }
    for yi in 0..ny {
        dual += inst.nu.weight(yi) * state.psi[yi];
    }
    KernelStats {
        primal_value: primal,
        entropy,
        dual_value: dual,
        x_marginal,
        y_marginal,
        martingale_residual: mart,
        mass,
    }
}

/// Outcome of one truncation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncationStats<S> {
    pub dropped_entries: usize,
    pub dropped_mass: S,
    pub kept_entries: usize,
}

/// Drops active entries whose kernel value falls under
/// `threshold_factor * min(mu_x, nu_y)`. Rows are never emptied and columns
/// never uncovered: the largest-p entry of an endangered row or column is
/// retained. Meant to run on a near-feasible state only.
pub fn truncate_kernel<S: Scalar>(
    prob: &EntropicProblem<'_, S>,
    state: &DualState<S>,
    threshold_factor: S,
) -> (ActiveSets, TruncationStats<S>) {
    let inst = prob.inst;
    let nx = inst.mu.len();
    let ny = inst.nu.len();
    let inv_eps = S::one() / prob.epsilon;
    let mut rows: Vec<Vec<u32>> = Vec::with_capacity(nx);
    let mut col_cover = vec![false; ny];
    let mut col_best: Vec<(S, u32)> = vec![(S::neg_infinity(), 0); ny];
    let mut total_mass = S::zero();
    let mut kept_mass = S::zero();
    for xi in 0..nx {
        let x = inst.mu.point(xi);
        let h = state.h_row(xi);
        let mu_x = inst.mu.weight(xi);
        let mut keep: Vec<u32> = Vec::new();
        let mut best = (S::neg_infinity(), 0u32);
        for &yu in prob.active.row(xi) {
            let yi = yu as usize;
            let y = inst.nu.point(yi);
            let mut dot = S::zero();
            for k in 0..x.len() {
                dot += h[k] * (y[k] - x[k]);
            }
            let dlt = state.phi[xi] + state.psi[yi] + dot - inst.cost_at(xi, yi);
            let p = (-dlt * inv_eps).exp();
            total_mass += p;
            let threshold = threshold_factor * mu_x.min(inst.nu.weight(yi));
            if p >= threshold {
                keep.push(yu);
                kept_mass += p;
                col_cover[yi] = true;
            }
            if p > best.0 {
                best = (p, yu);
            }
            if p > col_best[yi].0 {
                col_best[yi] = (p, xi as u32);
            }
        }
        if keep.is_empty() {
            keep.push(best.1);
            col_cover[best.1 as usize] = true;
            kept_mass += best.0;
        }
        rows.push(keep);
    }
    for yi in 0..ny {
        if !col_cover[yi] {
            let (p, xi) = col_best[yi];
            let row = &mut rows[xi as usize];
            if let Err(pos) = row.binary_search(&(yi as u32)) {
                row.insert(pos, yi as u32);
                kept_mass += p;
            }
        }
    }
    let kept_entries: usize = rows.iter().map(|r| r.len()).sum();
    let dropped_entries = prob.active.entry_count() - kept_entries;
    let active = ActiveSets::new(rows, ny).expect("truncation preserves coverage");
    (
        active,
        TruncationStats {
            dropped_entries,
            dropped_mass: (total_mass - kept_mass).max(S::zero()),
            kept_entries,
        },
    )
}

/// Runs the (phi, h) block for every x in parallel, writing results in place.
/// Returns total Newton iterations spent.
pub fn update_phi_h_block<S: Scalar>(
    prob: &EntropicProblem<'_, S>,
    state: &mut DualState<S>,
) -> Result<usize, EntropicError> {
    let nx = prob.inst.mu.len();
    let psi = state.psi.clone();
    let d = prob.inst.dim();
    let updates: Result<Vec<HUpdate<S>>, EntropicError> = (0..nx)
        .into_par_iter()
        .map_init(HScratch::default, |scratch, xi| {
            update_h_scratch(prob, &psi, xi, &state.h[xi * d..(xi + 1) * d], scratch)
        })
        .collect();
    let updates = updates?;
    let mut total = 0usize;
    for (xi, u) in updates.into_iter().enumerate() {
        state.phi[xi] = u.phi;
        state.h[xi * d..(xi + 1) * d].copy_from_slice(&u.h);
        total += u.iterations;
    }
    Ok(total)
}
