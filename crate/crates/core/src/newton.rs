//! Truncated Newton on the implied semi-dual: minimize over psi the value
//! `Vt(psi) = min_{phi,h} V_eps(phi, psi, h)`, whose gradient is the marginal
//! mismatch `nu - y_marginal` and whose Hessian acts through cheap row/column
//! kernel passes plus three diagonal corrections. Search directions come from
//! preconditioned conjugate gradients under an adaptive forcing rule, steps
//! from a strong Wolfe line search.
//!
//! Minimizing over (phi, h) first keeps the exponential arguments tame and
//! makes the x-marginal and martingale constraints hold along the whole path,
//! which is what stabilizes the scheme at small epsilon.

use std::time::Instant;

use rayon::prelude::*;

use crate::entropic::{update_h_scratch, EntropicError, EntropicProblem, HScratch};
use crate::model::DualState;
use crate::scalar::{lit, Scalar};
use crate::sinkhorn::{SweepLog, SweepRecord};

/// The implied state at a fixed psi: minimizers (phi_hat, h_hat), the kernel
/// over active entries, and the three diagonal factors the Hessian-vector
/// product consumes.
#[derive(Debug, Clone)]
pub struct ImpliedState<S> {
    pub psi: Vec<S>,
    pub phi: Vec<S>,
    /// Flat `nx * d`.
    pub h: Vec<S>,
    /// Kernel value per active entry, aligned with the active-set layout.
    pub p: Vec<S>,
    /// Column sums of the kernel (the current y-marginal).
    pub d_psi: Vec<S>,
    /// Inverse row sums.
    pub d_phi_inv: Vec<S>,
    /// Inverse second moments per (x, coordinate), zero where degenerate.
    pub d_h_inv: Vec<S>,
    pub mass: S,
    /// Unpenalized implied value `mu[phi] + nu[psi] + eps * mass`.
    pub value: S,
    /// Newton iterations spent across the per-x solves.
    pub h_iters: usize,
}

impl<S: Scalar> ImpliedState<S> {
    /// Implied value plus the quadratic penalty when one is configured.
    pub fn penalized_value(&self, prob: &EntropicProblem<'_, S>) -> S {
        match prob.penalization() {
            Some(pen) => self.value + pen.value(&self.psi),
            None => self.value,
        }
    }

    pub fn to_dual_state(&self, dim: usize) -> DualState<S> {
        let mut s = DualState::zeros(self.phi.len(), self.psi.len(), dim);
        s.phi.copy_from_slice(&self.phi);
        s.psi.copy_from_slice(&self.psi);
        s.h.copy_from_slice(&self.h);
        s
    }
}

/// Minimizes `V_eps` over (phi, h) at fixed psi: one damped-Newton solve per
/// x (warm-started from `warm` when given), then the kernel and its diagonal
/// factors in one pass.
pub fn implicitation<S: Scalar>(
    prob: &EntropicProblem<'_, S>,
    psi: &[S],
    warm: Option<&ImpliedState<S>>,
) -> Result<ImpliedState<S>, EntropicError> {
    let inst = prob.instance();
    let d = inst.dim();
    let nx = inst.mu.len();
    let ny = inst.nu.len();
    let zero_h = vec![S::zero(); d];

    struct RowOut<S> {
        phi: S,
        h: Vec<S>,
        weights: Vec<S>,
        iters: usize,
    }

    let rows: Result<Vec<RowOut<S>>, EntropicError> = (0..nx)
        .into_par_iter()
        .map_init(HScratch::default, |scratch, xi| {
            let warm_h = warm.map_or(&zero_h[..], |w| &w.h[xi * d..(xi + 1) * d]);
            let up = update_h_scratch(prob, psi, xi, warm_h, scratch)?;
            Ok(RowOut {
                phi: up.phi,
                h: up.h,
                weights: scratch.weights.clone(),
                iters: up.iterations,
            })
        })
        .collect();
    let rows = rows?;

    let entries = prob.active().entry_count();
    let mut p = vec![S::zero(); entries];
    let mut phi = vec![S::zero(); nx];
    let mut h = vec![S::zero(); nx * d];
    let mut d_phi_inv = vec![S::zero(); nx];
    let mut d_h_inv = vec![S::zero(); nx * d];
    let mut d_psi = vec![S::zero(); ny];
    let mut mass = S::zero();
    let mut h_iters = 0usize;
    for (xi, row) in rows.iter().enumerate() {
        phi[xi] = row.phi;
        h[xi * d..(xi + 1) * d].copy_from_slice(&row.h);
        h_iters += row.iters;
        let mu_x = inst.mu.weight(xi);
        let x = inst.mu.point(xi);
        let start = prob.active().row_start(xi);
        let ys = prob.active().row(xi);
        let mut row_sum = S::zero();
        let mut second = vec![S::zero(); d];
        for (j, (&yu, &w)) in ys.iter().zip(row.weights.iter()).enumerate() {
            let val = mu_x * w;
            p[start + j] = val;
            row_sum += val;
            d_psi[yu as usize] += val;
            let y = inst.nu.point(yu as usize);
            for k in 0..d {
                let diff = y[k] - x[k];
                second[k] += val * diff * diff;
            }
        }
        mass += row_sum;
        d_phi_inv[xi] = S::one() / row_sum;
        let floor = row_sum * lit::<S>(1e-30);
        for k in 0..d {
            d_h_inv[xi * d + k] = if second[k] > floor { S::one() / second[k] } else { S::zero() };
        }
    }

    let mut value = prob.epsilon() * mass;
    for xi in 0..nx {
        value += inst.mu.weight(xi) * phi[xi];
    }
    for yi in 0..ny {
        value += inst.nu.weight(yi) * psi[yi];
    }
    Ok(ImpliedState { psi: psi.to_vec(), phi, h, p, d_psi, d_phi_inv, d_h_inv, mass, value, h_iters })
}

/// Gradient of the (optionally penalized) implied value:
/// `nu_y - sum_x p(x, y)`, plus `alpha a_y (psi_y - anchor_y)`.
pub fn grad_tilde_v<S: Scalar>(prob: &EntropicProblem<'_, S>, istate: &ImpliedState<S>) -> Vec<S> {
    let nu = &prob.instance().nu;
    let mut g: Vec<S> = (0..nu.len()).map(|yi| nu.weight(yi) - istate.d_psi[yi]).collect();
    if let Some(pen) = prob.penalization() {
        for (yi, gy) in g.iter_mut().enumerate() {
            *gy += pen.grad(yi, istate.psi[yi]);
        }
    }
    g
}

/// Hessian-vector product of the implied value without materializing the
/// matrix: scale by the column sums, take weighted row sums, apply the
/// inverse diagonal factors, project back to the columns, and add the penalty
/// curvature.
pub fn hvp_tilde_v<S: Scalar>(
    prob: &EntropicProblem<'_, S>,
    istate: &ImpliedState<S>,
    dir: &[S],
) -> Vec<S> {
    let inst = prob.instance();
    let d = inst.dim();
    let nx = inst.mu.len();
    let ny = inst.nu.len();
    let active = prob.active();
    let inv_eps = S::one() / prob.epsilon();

    // Row pass: weighted sums scaled by the inverse diagonals.
    let scaled: Vec<Vec<S>> = (0..nx)
        .into_par_iter()
        .map(|xi| {
            let x = inst.mu.point(xi);
            let start = active.row_start(xi);
            let ys = active.row(xi);
            let mut acc = vec![S::zero(); d + 1];
            for (j, &yu) in ys.iter().enumerate() {
                let pe = istate.p[start + j] * dir[yu as usize];
                acc[0] += pe;
                let y = inst.nu.point(yu as usize);
                for k in 0..d {
                    acc[k + 1] += pe * (y[k] - x[k]);
                }
            }
            acc[0] *= istate.d_phi_inv[xi];
            for k in 0..d {
                acc[k + 1] *= istate.d_h_inv[xi * d + k];
            }
            acc
        })
        .collect();

    // Column pass: project the corrections back onto psi space.
    let mut out: Vec<S> = (0..ny)
        .into_par_iter()
        .map(|yi| {
            let y = inst.nu.point(yi);
            let mut corr = S::zero();
            for &(xu, pos) in active.col(yi) {
                let xi = xu as usize;
                let x = inst.mu.point(xi);
                let pe = istate.p[pos as usize];
                let mut s = scaled[xi][0];
                for k in 0..d {
                    s += scaled[xi][k + 1] * (y[k] - x[k]);
                }
                corr += pe * s;
            }
            (istate.d_psi[yi] * dir[yi] - corr) * inv_eps
        })
        .collect();
    if let Some(pen) = prob.penalization() {
        for yi in 0..ny {
            out[yi] += pen.alpha * pen.a_weights[yi] * dir[yi];
        }
    }
    out
}

/// Exact diagonal of the implied Hessian (plus penalty), one pass over active
/// entries; used as the Jacobi preconditioner.
pub fn precond_diag<S: Scalar>(prob: &EntropicProblem<'_, S>, istate: &ImpliedState<S>) -> Vec<S> {
    let inst = prob.instance();
    let d = inst.dim();
    let ny = inst.nu.len();
    let active = prob.active();
    let inv_eps = S::one() / prob.epsilon();
    let mut diag: Vec<S> = (0..ny)
        .into_par_iter()
        .map(|yi| {
            let y = inst.nu.point(yi);
            let mut corr = S::zero();
            for &(xu, pos) in active.col(yi) {
                let xi = xu as usize;
                let x = inst.mu.point(xi);
                let pe = istate.p[pos as usize];
                let mut s = istate.d_phi_inv[xi];
                for k in 0..d {
                    let diff = y[k] - x[k];
                    s += diff * diff * istate.d_h_inv[xi * d + k];
                }
                corr += pe * pe * s;
            }
            (istate.d_psi[yi] - corr) * inv_eps
        })
        .collect();
    if let Some(pen) = prob.penalization() {
        for yi in 0..ny {
            diag[yi] += pen.alpha * pen.a_weights[yi];
        }
    }
    // strictly positive floor so the preconditioner stays invertible
    let mut max = S::zero();
    for &v in &diag {
        max = max.max(v);
    }
    let floor = (max * lit::<S>(1e-16)).max(S::min_positive_value());
    for v in diag.iter_mut() {
        *v = v.max(floor);
    }
    diag
}

/// Outcome of the inexact Newton direction solve.
#[derive(Debug, Clone)]
pub struct CgOutcome<S> {
    pub direction: Vec<S>,
    pub iters: usize,
    pub residual: S,
    pub nonpositive_curvature: bool,
}

/// Preconditioned conjugate gradients on `H p = g`, stopped at the relative
/// forcing residual `|H p - g| <= eta |g|` with `eta = min(cap, sqrt(|g|))`.
/// Nonpositive curvature aborts with the current iterate (or the
/// preconditioned gradient when it strikes on the first step).
pub fn cg_solve<S: Scalar>(
    hvp: impl Fn(&[S]) -> Vec<S>,
    grad: &[S],
    precond_diag: &[S],
    forcing_cap: S,
    max_iters: usize,
) -> CgOutcome<S> {
    let n = grad.len();
    let gnorm = l2(grad);
    if gnorm == S::zero() {
        return CgOutcome {
            direction: vec![S::zero(); n],
            iters: 0,
            residual: S::zero(),
            nonpositive_curvature: false,
        };
    }
    let eta = forcing_cap.min(gnorm.sqrt());
    let target = eta * gnorm;

    let mut x = vec![S::zero(); n];
    let mut r = grad.to_vec();
    let mut z: Vec<S> = r.iter().zip(precond_diag).map(|(&ri, &m)| ri / m).collect();
    let z0 = z.clone();
    let mut dvec = z.clone();
    let mut rz: S = dot(&r, &z);
    let mut iters = 0usize;
    let mut nonpos = false;
    while iters < max_iters {
        if l2(&r) <= target {
            break;
        }
        let w = hvp(&dvec);
        let dw = dot(&dvec, &w);
        if !(dw > S::zero()) {
            nonpos = true;
            if iters == 0 {
                x = z0;
            }
            break;
        }
        let alpha = rz / dw;
        for i in 0..n {
            x[i] += alpha * dvec[i];
            r[i] -= alpha * w[i];
        }
        for i in 0..n {
            z[i] = r[i] / precond_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        for i in 0..n {
            dvec[i] = z[i] + beta * dvec[i];
        }
        rz = rz_new;
        iters += 1;
    }
    CgOutcome { direction: x, iters, residual: l2(&r), nonpositive_curvature: nonpos }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn l2<S: Scalar>(v: &[S]) -> S {
    dot(v, v).sqrt()
}

fn l1<S: Scalar>(v: &[S]) -> S {
    v.iter().map(|&x| x.abs()).sum()
}

/// Strong Wolfe parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WolfeParams<S> {
    pub c1: S,
    pub c2: S,
    pub max_bisections: usize,
    /// Absolute slack on the Armijo comparison; the outer loop sets this to a
    /// few ulps of the objective so sub-resolution decreases near the optimum
    /// do not deadlock the search.
    pub f_abs_slack: S,
}

impl<S: Scalar> Default for WolfeParams<S> {
    fn default() -> Self {
        WolfeParams { c1: lit(1e-4), c2: lit(0.9), max_bisections: 40, f_abs_slack: S::zero() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WolfeOutcome<S> {
    pub t: S,
    pub evals: usize,
    /// False when bisections ran out; `t` is then the best Armijo point seen.
    pub satisfied: bool,
}

/// Line search along `x - t * direction` for a function evaluated through
/// `eval(t) -> (value, gradient_dot_direction)`. Accepts `t` satisfying the
/// Armijo decrease `f <= f0 - c1 t (g0 . d)` and the strong curvature bound
/// `|grad . d| <= c2 |g0 . d|`, growing or bisecting the bracket otherwise.
pub fn wolfe_line_search<S: Scalar>(
    mut eval: impl FnMut(S) -> (S, S),
    f0: S,
    g0_dot_d: S,
    params: &WolfeParams<S>,
) -> WolfeOutcome<S> {
    debug_assert!(g0_dot_d > S::zero(), "needs a descent direction");
    let mut lo = S::zero();
    let mut hi = S::infinity();
    let mut t = S::one();
    let mut best: Option<(S, S)> = None;
    let mut evals = 0usize;
    let two = lit::<S>(2.0);
    let half = lit::<S>(0.5);
    for _ in 0..params.max_bisections {
        let (f, slope) = eval(t);
        evals += 1;
        if !(f <= f0 - params.c1 * t * g0_dot_d + params.f_abs_slack) || !f.is_finite() {
            hi = t;
            t = half * (lo + hi);
            continue;
        }
        if best.map_or(true, |(_, bf)| f < bf) {
            best = Some((t, f));
        }
        if slope > params.c2 * g0_dot_d {
            // still descending steeply: the step is too short
            lo = t;
            t = if hi.is_finite() { half * (lo + hi) } else { two * t };
            continue;
        }
        if slope < -params.c2 * g0_dot_d {
            // walked past the valley: too long
            hi = t;
            t = half * (lo + hi);
            continue;
        }
        return WolfeOutcome { t, evals, satisfied: true };
    }
    match best {
        Some((t, _)) => WolfeOutcome { t, evals, satisfied: false },
        None => WolfeOutcome { t: lo, evals, satisfied: false },
    }
}

/// Solver knobs for the outer Newton loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonConfig<S> {
    pub cg_max_iters: usize,
    /// Cap of the relative forcing rule `eta = min(cap, sqrt(|g|))`.
    pub forcing_cap: S,
    pub wolfe: WolfeParams<S>,
    /// Stop when the norm-1 of the (penalized) gradient falls below this.
    pub grad_tol: S,
    pub max_outer_iters: usize,
}

impl<S: Scalar> Default for NewtonConfig<S> {
    fn default() -> Self {
        NewtonConfig {
            cg_max_iters: 250,
            forcing_cap: lit(0.5),
            wolfe: WolfeParams::default(),
            grad_tol: lit(1e-8),
            max_outer_iters: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonRun<S> {
    pub log: SweepLog<S>,
    pub converged: bool,
    pub grad_error: S,
    /// Total inner h-Newton iterations across implicitations.
    pub h_iters: usize,
    /// Total CG iterations.
    pub cg_iters: usize,
}

/// Runs the truncated Newton loop from `state.psi` (warm-starting the per-x
/// solves from `state.h`) and writes the final implied triple back into
/// `state`. The iteration log is monotone in the penalized objective; after a
/// rejected line-search point, the next implicitation restarts from the last
/// accepted h, never from the rejected one.
pub fn run_newton<S: Scalar>(
    prob: &EntropicProblem<'_, S>,
    state: &mut DualState<S>,
    config: &NewtonConfig<S>,
) -> Result<NewtonRun<S>, EntropicError> {
    let start = Instant::now();
    let mut log = SweepLog::default();

    // seed the per-x warm starts from the caller's h
    let seed = ImpliedState {
        psi: state.psi.clone(),
        phi: state.phi.clone(),
        h: state.h.clone(),
        p: Vec::new(),
        d_psi: Vec::new(),
        d_phi_inv: Vec::new(),
        d_h_inv: Vec::new(),
        mass: S::zero(),
        value: S::zero(),
        h_iters: 0,
    };
    let mut istate = implicitation(prob, &state.psi, Some(&seed))?;
    let mut total_h = istate.h_iters;
    let mut total_cg = 0usize;
    let mut converged = false;
    let mut grad = grad_tilde_v(prob, &istate);
    let mut grad_err = l1(&grad);

    for iter in 0..config.max_outer_iters {
        log.push(SweepRecord {
            iter,
            seconds: start.elapsed().as_secs_f64(),
            grad_error: grad_err,
            dual_value: istate.penalized_value(prob),
            h_newton_iters: istate.h_iters,
        });
        if grad_err <= config.grad_tol {
            converged = true;
            break;
        }

        let diag = precond_diag(prob, &istate);
        let cg = cg_solve(
            |p| hvp_tilde_v(prob, &istate, p),
            &grad,
            &diag,
            config.forcing_cap,
            config.cg_max_iters,
        );
        total_cg += cg.iters;
        let mut direction = cg.direction;
        let mut g_dot_d = dot(&grad, &direction);
        if !(g_dot_d > S::zero()) {
            // fall back to the preconditioned gradient
            direction = grad.iter().zip(diag.iter()).map(|(&g, &m)| g / m).collect();
            g_dot_d = dot(&grad, &direction);
            if !(g_dot_d > S::zero()) {
                break;
            }
        }

        let f0 = istate.penalized_value(prob);
        let mut wolfe = config.wolfe;
        wolfe.f_abs_slack =
            wolfe.f_abs_slack.max(S::epsilon() * lit::<S>(8.0) * (S::one() + f0.abs()));
        let mut candidate: Option<(S, ImpliedState<S>, Vec<S>)> = None;
        let outcome = {
            let accepted = &istate;
            let mut eval = |t: S| -> (S, S) {
                let psi_t: Vec<S> = accepted
                    .psi
                    .iter()
                    .zip(direction.iter())
                    .map(|(&p, &d)| p - t * d)
                    .collect();
                match implicitation(prob, &psi_t, Some(accepted)) {
                    Ok(ist) => {
                        let f = ist.penalized_value(prob);
                        let g = grad_tilde_v(prob, &ist);
                        let slope = dot(&g, &direction);
                        candidate = Some((t, ist, g));
                        (f, slope)
                    }
                    Err(_) => (S::infinity(), S::zero()),
                }
            };
            wolfe_line_search(&mut eval, f0, g_dot_d, &wolfe)
        };
        if !(outcome.t > S::zero()) {
            break;
        }

        let (ist, g) = match candidate {
            Some((ct, ist, g)) if ct == outcome.t => (ist, g),
            _ => {
                // the returned step differs from the last evaluated one
                let psi_t: Vec<S> = istate
                    .psi
                    .iter()
                    .zip(direction.iter())
                    .map(|(&p, &d)| p - outcome.t * d)
                    .collect();
                let ist = implicitation(prob, &psi_t, Some(&istate))?;
                let g = grad_tilde_v(prob, &ist);
                (ist, g)
            }
        };
        total_h += ist.h_iters;
        istate = ist;
        grad = g;
        grad_err = l1(&grad);
    }

    if grad_err <= config.grad_tol {
        converged = true;
    }
    state.phi.copy_from_slice(&istate.phi);
    state.psi.copy_from_slice(&istate.psi);
    state.h.copy_from_slice(&istate.h);
    Ok(NewtonRun { log, converged, grad_error: grad_err, h_iters: total_h, cg_iters: total_cg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropic::{kernel_stats, Penalization};
    use crate::model::{CostSpec, DiscreteMeasure, MotInstance};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn measure_1d(points: &[f64], weights: &[f64]) -> DiscreteMeasure<f64> {
        DiscreteMeasure::new(1, points.iter().map(|&p| vec![p]).collect(), weights.to_vec())
            .unwrap()
    }

    fn spread_instance(rng: &mut StdRng, nx: usize) -> MotInstance<f64> {
        let mut xs: Vec<f64> = (0..nx).map(|_| rng.gen_range(-1.0..1.0)).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut wx: Vec<f64> = (0..nx).map(|_| rng.gen_range(0.2..1.0)).collect();
        let s: f64 = wx.iter().sum();
        wx.iter_mut().for_each(|w| *w /= s);
        let mut ys = Vec::new();
        let mut wy = Vec::new();
        for i in 0..nx {
            let spread = rng.gen_range(0.1..0.3);
            let q = rng.gen_range(0.3..0.7);
            ys.push(xs[i] - (1.0 - q) * spread);
            wy.push(wx[i] * q);
            ys.push(xs[i] + q * spread);
            wy.push(wx[i] * (1.0 - q));
        }
        let nu = DiscreteMeasure::new(1, ys.iter().map(|&p| vec![p]).collect(), wy).unwrap();
        let mu = measure_1d(&xs, &wx);
        let ny = nu.len();
        let values: Vec<f64> = (0..nx * ny).map(|_| rng.gen_range(-0.5..0.5)).collect();
        MotInstance::new(mu, nu, CostSpec::Tabulated { rows: nx, cols: ny, values })
    }

    /// 5 x 7 instance for the derivative tests; means match so the pair is in
    /// convex order when needed.
    fn five_by_seven(rng: &mut StdRng) -> MotInstance<f64> {
        let xs = [-0.8, -0.4, 0.0, 0.4, 0.8];
        let wx = [0.15, 0.2, 0.3, 0.2, 0.15];
        let ys = [-1.2, -0.8, -0.3, 0.0, 0.3, 0.8, 1.2];
        let mut wy: Vec<f64> = (0..7).map(|_| rng.gen_range(0.5..1.0)).collect();
        let s: f64 = wy.iter().sum();
        wy.iter_mut().for_each(|w| *w /= s);
        let mean: f64 = ys.iter().zip(wy.iter()).map(|(y, w)| y * w).sum();
        let ys: Vec<f64> = ys.iter().map(|y| y - mean).collect();
        let values: Vec<f64> = (0..35).map(|_| rng.gen_range(-1.0..1.0)).collect();
        MotInstance::new(
            measure_1d(&xs, &wx),
            measure_1d(&ys, &wy),
            CostSpec::Tabulated { rows: 5, cols: 7, values },
        )
    }

    #[test]
    fn reimplication_with_warm_start_takes_no_iterations() {
        let mut rng = StdRng::seed_from_u64(51);
        let inst = spread_instance(&mut rng, 5);
        let prob = EntropicProblem::dense(&inst, 0.3).unwrap();
        let psi: Vec<f64> = (0..inst.nu.len()).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let first = implicitation(&prob, &psi, None).unwrap();
        let again = implicitation(&prob, &psi, Some(&first)).unwrap();
        assert_eq!(again.h_iters, 0);
        assert!((again.value - first.value).abs() <= 1e-12);
    }

    #[test]
    fn implicitation_closed_form_on_symmetric_dirac() {
        let inst = MotInstance::new(
            measure_1d(&[0.0], &[1.0]),
            measure_1d(&[-1.0, 1.0], &[0.5, 0.5]),
            CostSpec::Tabulated { rows: 1, cols: 2, values: vec![0.0, 0.0] },
        );
        let eps = 0.7;
        let prob = EntropicProblem::dense(&inst, eps).unwrap();
        let psi = vec![0.2, 0.2];
        let ist = implicitation(&prob, &psi, None).unwrap();
        assert!(ist.h[0].abs() <= 1e-12);
        let expected_phi = eps * (2.0 * (-0.2f64 / eps).exp()).ln();
        assert!((ist.phi[0] - expected_phi).abs() <= 1e-12);
    }

    /// Derivative-free joint minimization oracle: Nelder-Mead over
    /// (phi(x), h(x)) for each x separately, since V_eps decomposes.
    fn nelder_mead_min(f: &dyn Fn(&[f64; 2]) -> f64) -> f64 {
        let mut simplex = [[0.0, 0.0], [0.5, 0.0], [0.0, 0.5]];
        let mut vals = simplex.map(|p| f(&p));
        for _ in 0..4000 {
            let mut idx = [0, 1, 2];
            idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
            let (best, mid, worst) = (idx[0], idx[1], idx[2]);
            let centroid = [
                0.5 * (simplex[best][0] + simplex[mid][0]),
                0.5 * (simplex[best][1] + simplex[mid][1]),
            ];
            let refl = [
                centroid[0] + (centroid[0] - simplex[worst][0]),
                centroid[1] + (centroid[1] - simplex[worst][1]),
            ];
            let fr = f(&refl);
            if fr < vals[best] {
                let ext = [
                    centroid[0] + 2.0 * (centroid[0] - simplex[worst][0]),
                    centroid[1] + 2.0 * (centroid[1] - simplex[worst][1]),
                ];
                let fe = f(&ext);
                if fe < fr {
                    simplex[worst] = ext;
                    vals[worst] = fe;
                } else {
                    simplex[worst] = refl;
                    vals[worst] = fr;
                }
            } else if fr < vals[mid] {
                simplex[worst] = refl;
                vals[worst] = fr;
            } else {
                let con = [
                    centroid[0] + 0.5 * (simplex[worst][0] - centroid[0]),
                    centroid[1] + 0.5 * (simplex[worst][1] - centroid[1]),
                ];
                let fc = f(&con);
                if fc < vals[worst] {
                    simplex[worst] = con;
                    vals[worst] = fc;
                } else {
                    for i in 0..3 {
                        if i != best {
                            simplex[i] = [
                                0.5 * (simplex[i][0] + simplex[best][0]),
                                0.5 * (simplex[i][1] + simplex[best][1]),
                            ];
                            vals[i] = f(&simplex[i]);
                        }
                    }
                }
            }
        }
        vals.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn implicitation_matches_derivative_free_joint_minimization() {
        let inst = MotInstance::new(
            measure_1d(&[-0.2, 0.3], &[0.4, 0.6]),
            measure_1d(&[-0.8, 0.1, 0.9], &[0.3, 0.4, 0.3]),
            CostSpec::Tabulated { rows: 2, cols: 3, values: vec![0.3, -0.2, 0.5, 0.1, 0.4, -0.3] },
        );
        let eps = 0.6;
        let prob = EntropicProblem::dense(&inst, eps).unwrap();
        let psi = vec![0.1, -0.2, 0.3];
        let ist = implicitation(&prob, &psi, None).unwrap();

        let mut oracle = 0.0;
        for xi in 0..2 {
            let mu_x = inst.mu.weight(xi);
            let x = inst.mu.point(xi)[0];
            let g = |ph: &[f64; 2]| -> f64 {
                let (phi, h) = (ph[0], ph[1]);
                let mut acc = mu_x * phi;
                for yi in 0..3 {
                    let y = inst.nu.point(yi)[0];
                    let delta = phi + psi[yi] + h * (y - x) - inst.cost_at(xi, yi);
                    acc += eps * (-delta / eps).exp();
                }
                acc
            };
            oracle += nelder_mead_min(&g);
        }
        for yi in 0..3 {
            oracle += inst.nu.weight(yi) * psi[yi];
        }
        assert!((ist.value - oracle).abs() <= 1e-9, "{} vs {oracle}", ist.value);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = StdRng::seed_from_u64(52);
        let inst = five_by_seven(&mut rng);
        let prob = EntropicProblem::dense(&inst, 0.5).unwrap();
        let psi: Vec<f64> = (0..7).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let ist = implicitation(&prob, &psi, None).unwrap();
        let g = grad_tilde_v(&prob, &ist);
        let psi_norm = psi.iter().map(|p| p.abs()).fold(0.0f64, f64::max);
        let delta = 1e-5 * (1.0 + psi_norm);
        for yi in 0..7 {
            let mut plus = psi.clone();
            plus[yi] += delta;
            let mut minus = psi.clone();
            minus[yi] -= delta;
            let fp = implicitation(&prob, &plus, Some(&ist)).unwrap().value;
            let fm = implicitation(&prob, &minus, Some(&ist)).unwrap().value;
            let fd = (fp - fm) / (2.0 * delta);
            let denom = g[yi].abs().max(1e-8);
            assert!((g[yi] - fd).abs() / denom < 1e-5, "component {yi}: {} vs {fd}", g[yi]);
        }
    }

    #[test]
    fn penalty_gradient_vanishes_at_zero_psi() {
        let mut rng = StdRng::seed_from_u64(53);
        let inst = five_by_seven(&mut rng);
        let a = inst.nu.weights().to_vec();
        let pen = Penalization { alpha: 0.3, a_weights: a, psi_anchor: None };
        let prob = EntropicProblem::dense(&inst, 0.5).unwrap();
        let prob_pen = prob.clone().with_penalization(Some(pen)).unwrap();
        let psi = vec![0.0; 7];
        let i0 = implicitation(&prob, &psi, None).unwrap();
        let g_plain = grad_tilde_v(&prob, &i0);
        let g_pen = grad_tilde_v(&prob_pen, &i0);
        for yi in 0..7 {
            assert_eq!(g_plain[yi], g_pen[yi]);
        }
    }

    #[test]
    fn hvp_is_linear_symmetric_and_psd() {
        let mut rng = StdRng::seed_from_u64(54);
        let inst = five_by_seven(&mut rng);
        let prob = EntropicProblem::dense(&inst, 0.3).unwrap();
        let psi: Vec<f64> = (0..7).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let ist = implicitation(&prob, &psi, None).unwrap();
        assert!(hvp_tilde_v(&prob, &ist, &vec![0.0; 7]).iter().all(|&v| v == 0.0));
        let mut hmat = vec![0.0f64; 49];
        for j in 0..7 {
            let mut e = vec![0.0; 7];
            e[j] = 1.0;
            let col = hvp_tilde_v(&prob, &ist, &e);
            for i in 0..7 {
                hmat[i * 7 + j] = col[i];
            }
        }
        for i in 0..7 {
            for j in 0..7 {
                assert!(
                    (hmat[i * 7 + j] - hmat[j * 7 + i]).abs() < 1e-10,
                    "asymmetry at ({i},{j})"
                );
            }
        }
        for _ in 0..10 {
            let p: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let hp = hvp_tilde_v(&prob, &ist, &p);
            let quad: f64 = p.iter().zip(hp.iter()).map(|(a, b)| a * b).sum();
            assert!(quad >= -1e-12, "not PSD: {quad}");
        }
    }

    #[test]
    fn hvp_matches_differenced_gradients() {
        let mut rng = StdRng::seed_from_u64(55);
        let inst = five_by_seven(&mut rng);
        let prob = EntropicProblem::dense(&inst, 0.4).unwrap();
        let psi: Vec<f64> = (0..7).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let ist = implicitation(&prob, &psi, None).unwrap();
        let p: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let hp = hvp_tilde_v(&prob, &ist, &p);
        let delta = 1e-6;
        let plus: Vec<f64> = psi.iter().zip(p.iter()).map(|(a, b)| a + delta * b).collect();
        let minus: Vec<f64> = psi.iter().zip(p.iter()).map(|(a, b)| a - delta * b).collect();
        let gp = grad_tilde_v(&prob, &implicitation(&prob, &plus, Some(&ist)).unwrap());
        let gm = grad_tilde_v(&prob, &implicitation(&prob, &minus, Some(&ist)).unwrap());
        let fd: Vec<f64> = gp.iter().zip(gm.iter()).map(|(a, b)| (a - b) / (2.0 * delta)).collect();
        let num: f64 = hp.iter().zip(fd.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let den: f64 = hp.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(num / den < 1e-4, "hvp vs fd rel err {}", num / den);
    }

    #[test]
    fn hvp_along_constants_is_near_null_at_a_converged_point() {
        let mut rng = StdRng::seed_from_u64(56);
        let inst = five_by_seven(&mut rng);
        let prob = EntropicProblem::dense(&inst, 0.5).unwrap();
        let mut state = DualState::zeros(5, 7, 1);
        let cfg = NewtonConfig { grad_tol: 1e-10, ..NewtonConfig::default() };
        let run = run_newton(&prob, &mut state, &cfg).unwrap();
        assert!(run.converged);
        let ist = implicitation(&prob, &state.psi, None).unwrap();
        let ones = vec![1.0; 7];
        let h1 = hvp_tilde_v(&prob, &ist, &ones);
        let quad: f64 = h1.iter().sum();
        assert!(quad >= -1e-12);
        assert!(quad < 1e-6 * 5.0, "residual curvature along constants: {quad}");
    }

    #[test]
    fn cg_identity_and_diagonal_systems() {
        let g = vec![1.0f64, -2.0, 3.0];
        let out = cg_solve(|p| p.to_vec(), &g, &[1.0, 1.0, 1.0], 1e-12, 10);
        assert_eq!(out.iters, 1);
        for i in 0..3 {
            assert!((out.direction[i] - g[i]).abs() <= 1e-12);
        }
        let d = [2.0f64, 5.0, 0.5, 1.0];
        let g = vec![1.0f64, 1.0, 1.0, 1.0];
        let out = cg_solve(
            |p| p.iter().zip(d.iter()).map(|(a, b)| a * b).collect(),
            &g,
            &[1.0; 4],
            1e-10,
            8,
        );
        assert!(out.iters <= 4);
        for i in 0..4 {
            assert!((out.direction[i] - 1.0 / d[i]).abs() <= 1e-8);
        }
    }

    #[test]
    fn cg_exit_satisfies_the_forcing_bound() {
        let mut rng = StdRng::seed_from_u64(57);
        let inst = five_by_seven(&mut rng);
        let prob = EntropicProblem::dense(&inst, 0.2).unwrap();
        let psi: Vec<f64> = (0..7).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let ist = implicitation(&prob, &psi, None).unwrap();
        let g = grad_tilde_v(&prob, &ist);
        let diag = precond_diag(&prob, &ist);
        let out = cg_solve(|p| hvp_tilde_v(&prob, &ist, p), &g, &diag, 0.5, 200);
        let gnorm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let eta = 0.5f64.min(gnorm.sqrt());
        assert!(out.residual <= eta * gnorm * (1.0 + 1e-12));
    }

    #[test]
    fn wolfe_on_a_quadratic() {
        // f(s) = s^2 from x=1 along d=1: t=1 hits the exact minimum.
        let params = WolfeParams::default();
        let out = wolfe_line_search(
            |t: f64| {
                let s = 1.0 - t;
                (s * s, 2.0 * s)
            },
            1.0,
            2.0,
            &params,
        );
        assert!(out.satisfied);
        assert_eq!(out.evals, 1);
        assert_eq!(out.t, 1.0);
        // Wolfe bounds land the step within a factor of the minimizer
        assert!(out.t >= 0.5 && out.t <= 2.0);
    }

    #[test]
    fn newton_on_ordered_instance_converges_tightly() {
        let mut rng = StdRng::seed_from_u64(58);
        let inst = spread_instance(&mut rng, 10);
        let prob = EntropicProblem::dense(&inst, 0.2).unwrap();
        let mut state = DualState::zeros(inst.mu.len(), inst.nu.len(), 1);
        // the per-x solves stop at h_tol ~ 1e-11, so the reachable gradient
        // floor sits a decade above that
        let cfg = NewtonConfig { grad_tol: 2e-9, ..NewtonConfig::default() };
        let run = run_newton(&prob, &mut state, &cfg).unwrap();
        assert!(run.converged, "grad err {:e}", run.grad_error);
        for w in run.log.records.windows(2) {
            assert!(w[1].dual_value <= w[0].dual_value + 1e-10 * (1.0 + w[0].dual_value.abs()));
        }
        // Lagrangian saddle identity at the optimum
        let stats = kernel_stats(&prob, &state);
        let lagrangian = stats.primal_value - prob.epsilon() * stats.entropy;
        assert!((stats.dual_value - lagrangian).abs() <= 1e-8);
    }

    #[test]
    fn newton_restarted_at_the_optimum_takes_zero_steps() {
        let mut rng = StdRng::seed_from_u64(59);
        let inst = spread_instance(&mut rng, 6);
        let prob = EntropicProblem::dense(&inst, 0.3).unwrap();
        let mut state = DualState::zeros(inst.mu.len(), inst.nu.len(), 1);
        let cfg = NewtonConfig { grad_tol: 1e-9, ..NewtonConfig::default() };
        run_newton(&prob, &mut state, &cfg).unwrap();
        let run2 = run_newton(&prob, &mut state, &cfg).unwrap();
        assert!(run2.converged);
        assert_eq!(run2.log.len(), 1); // the initial record only, no steps
        assert_eq!(run2.cg_iters, 0);
    }

    #[test]
    fn penalized_minimizer_is_unique_across_starts() {
        let mut rng = StdRng::seed_from_u64(60);
        let inst = spread_instance(&mut rng, 8);
        let a: Vec<f64> = inst.nu.weights().iter().map(|w| w * w).collect();
        let pen = Penalization { alpha: 0.1, a_weights: a, psi_anchor: None };
        let prob =
            EntropicProblem::dense(&inst, 0.2).unwrap().with_penalization(Some(pen)).unwrap();
        let cfg = NewtonConfig { grad_tol: 1e-10, ..NewtonConfig::default() };

        let mut s1 = DualState::zeros(inst.mu.len(), inst.nu.len(), 1);
        let r1 = run_newton(&prob, &mut s1, &cfg).unwrap();
        let mut s2 = DualState::zeros(inst.mu.len(), inst.nu.len(), 1);
        s2.psi.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        let r2 = run_newton(&prob, &mut s2, &cfg).unwrap();
        assert!(r1.converged && r2.converged);
        for yi in 0..inst.nu.len() {
            assert!(
                (s1.psi[yi] - s2.psi[yi]).abs() <= 1e-6,
                "psi mismatch at {yi}: {} vs {}",
                s1.psi[yi],
                s2.psi[yi]
            );
        }
    }

    #[test]
    fn penalized_cg_never_sees_nonpositive_curvature() {
        let mut rng = StdRng::seed_from_u64(61);
        for _ in 0..10 {
            let inst = spread_instance(&mut rng, 5);
            let a: Vec<f64> = inst.nu.weights().iter().map(|w| w * w).collect();
            let pen = Penalization { alpha: 0.05, a_weights: a, psi_anchor: None };
            let prob =
                EntropicProblem::dense(&inst, 0.3).unwrap().with_penalization(Some(pen)).unwrap();
            let psi: Vec<f64> = (0..inst.nu.len()).map(|_| rng.gen_range(-0.4..0.4)).collect();
            let ist = implicitation(&prob, &psi, None).unwrap();
            let g = grad_tilde_v(&prob, &ist);
            let diag = precond_diag(&prob, &ist);
            let out = cg_solve(|p| hvp_tilde_v(&prob, &ist, p), &g, &diag, 0.5, 100);
            assert!(!out.nonpositive_curvature);
        }
    }
}
