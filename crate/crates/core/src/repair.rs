//! Convex-order repair and penalization asymptotics: solve the penalized
//! implied problem along a decreasing alpha schedule, read off the y-marginal
//! `nu_alpha` of the optimal kernel, and use its alpha -> 0 limit as the
//! closest (in the f*-divergence of the penalty) measure dominating mu in the
//! convex order. The slope `(nu_alpha - nu) / alpha` converges to the penalty
//! gradient at the minimal-penalty optimizer, which the slope diagnostic
//! monitors.

use thiserror::Error;

use crate::entropic::{kernel_stats, EntropicError, EntropicProblem, Penalization};
use crate::model::{DiscreteMeasure, DualState, ModelError, MotInstance};
use crate::newton::{run_newton, NewtonConfig};
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, Error)]
pub enum RepairError {
    #[error("alpha schedule must be positive and strictly decreasing")]
    BadSchedule,
    #[error("penalty weights must be positive, one per y point")]
    BadWeights,
    #[error("solver failed at alpha = {alpha}: {source}")]
    Solver { alpha: f64, source: EntropicError },
    #[error("repaired weights do not form a measure: {0}")]
    Measure(#[from] ModelError),
    #[error("newton did not converge at alpha = {alpha} (gradient {grad:e})")]
    NotConverged { alpha: f64, grad: f64 },
}

/// Solve parameters for the per-alpha stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RepairOptions<S> {
    /// Regularization the repair runs at; the marginal-limit statement holds
    /// at fixed epsilon, so it is not chained with epsilon scaling.
    pub epsilon: S,
    pub newton: NewtonConfig<S>,
    /// Consecutive f*-gap change (relative) under which the schedule stops.
    pub gap_stop_rel: S,
}

impl<S: Scalar> Default for RepairOptions<S> {
    fn default() -> Self {
        RepairOptions {
            epsilon: lit(1e-2),
            newton: NewtonConfig { grad_tol: lit(1e-10), ..NewtonConfig::default() },
            gap_stop_rel: lit(0.01),
        }
    }
}

/// One solved alpha stage.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaStage<S> {
    pub alpha: S,
    /// y-marginal of the optimal kernel (normalized to total mass one).
    pub nu_alpha: Vec<S>,
    /// `1/2 sum a_y^-1 (nu_alpha - nu)_y^2`, the quadratic-penalty conjugate.
    pub fstar_gap: S,
}

#[derive(Debug, Clone)]
pub struct RepairOutcome<S> {
    pub nu_repaired: DiscreteMeasure<S>,
    /// f*-gap of the repaired marginal against nu.
    pub fstar_gap: S,
    pub stages: Vec<AlphaStage<S>>,
}

fn check_schedule<S: Scalar>(alphas: &[S]) -> Result<(), RepairError> {
    let ok = !alphas.is_empty()
        && alphas.iter().all(|&a| a > S::zero() && a.is_finite())
        && alphas.windows(2).all(|w| w[1] < w[0]);
    if ok {
        Ok(())
    } else {
        Err(RepairError::BadSchedule)
    }
}

fn fstar_gap<S: Scalar>(a: &[S], nu: &DiscreteMeasure<S>, nu_alpha: &[S]) -> S {
    let half = lit::<S>(0.5);
    let mut acc = S::zero();
    for yi in 0..nu.len() {
        let dev = nu_alpha[yi] - nu.weight(yi);
        acc += dev * dev / a[yi];
    }
    half * acc
}

/// True when `x` lies strictly outside the convex hull of the nu support
/// (dimension 1 or 2; higher dimensions report false and rely on solver
/// errors instead).
fn strictly_outside<S: Scalar>(nu: &DiscreteMeasure<S>, x: &[S]) -> bool {
    let d = nu.dim();
    let mut scale = S::one();
    for i in 0..nu.len() {
        for k in 0..d {
            scale = scale.max(nu.point(i)[k].abs());
        }
    }
    let tol = scale * lit::<S>(1e-12);
    match d {
        1 => {
            let lo = nu.point(0)[0];
            let hi = nu.point(nu.len() - 1)[0];
            x[0] < lo - tol || x[0] > hi + tol
        }
        2 => {
            let mut pts: Vec<(S, S)> =
                (0..nu.len()).map(|i| (nu.point(i)[0], nu.point(i)[1])).collect();
            pts.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            pts.dedup();
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
                // degenerate support: outside unless on the segment/point
                let q = (x[0], x[1]);
                return !pts.iter().any(|&p| {
                    (p.0 - q.0).abs() <= tol && (p.1 - q.1).abs() <= tol
                }) && hull.len() < 2
                    || hull.len() == 2 && {
                        let (a, b) = (hull[0], hull[1]);
                        let c = cross(a, b, q).abs();
                        let along0 = (q.0 - a.0) * (b.0 - a.0) + (q.1 - a.1) * (b.1 - a.1);
                        let len2 = (b.0 - a.0) * (b.0 - a.0) + (b.1 - a.1) * (b.1 - a.1);
                        c > tol * (S::one() + len2.sqrt())
                            || along0 < -tol
                            || along0 > len2 + tol
                    };
            }
            let q = (x[0], x[1]);
            for i in 0..hull.len() {
                let a = hull[i];
                let b = hull[(i + 1) % hull.len()];
                let edge = ((b.0 - a.0) * (b.0 - a.0) + (b.1 - a.1) * (b.1 - a.1)).sqrt();
                if cross(a, b, q) < -tol * (S::one() + edge) {
                    return true;
                }
            }
            false
        }
        _ => false,
    }
}

/// Extends the y-grid so every mu point lies inside its convex hull: mu
/// points that fall outside join the grid, plus outer guard points beyond the
/// union's bounding box. New points carry a vanishing share (1e-10) of the nu
/// mass and the mean of the penalty weights; tabulated costs copy the nearest
/// original column.
fn prepare_problem<S: Scalar>(
    inst: &MotInstance<S>,
    a_weights: &[S],
) -> Result<(MotInstance<S>, Vec<S>, bool), RepairError> {
    let d = inst.dim();
    let needs =
        (0..inst.mu.len()).any(|xi| strictly_outside(&inst.nu, inst.mu.point(xi)));
    if !needs {
        return Ok((inst.clone(), a_weights.to_vec(), false));
    }

    let ny = inst.nu.len();
    // gather extra points: outside mu points plus padded guards
    let mut extras: Vec<Vec<S>> = Vec::new();
    for xi in 0..inst.mu.len() {
        let x = inst.mu.point(xi);
        if strictly_outside(&inst.nu, x) {
            extras.push(x.to_vec());
        }
    }
    let mut lo = vec![S::infinity(); d];
    let mut hi = vec![S::neg_infinity(); d];
    for i in 0..ny {
        for k in 0..d {
            lo[k] = lo[k].min(inst.nu.point(i)[k]);
            hi[k] = hi[k].max(inst.nu.point(i)[k]);
        }
    }
    for i in 0..inst.mu.len() {
        for k in 0..d {
            lo[k] = lo[k].min(inst.mu.point(i)[k]);
            hi[k] = hi[k].max(inst.mu.point(i)[k]);
        }
    }
    let pad: Vec<S> = (0..d)
        .map(|k| (hi[k] - lo[k]) * lit::<S>(0.05) + lit::<S>(1e-3))
        .collect();
    match d {
        1 => {
            extras.push(vec![lo[0] - pad[0]]);
            extras.push(vec![hi[0] + pad[0]]);
        }
        2 => {
            for &cx in &[lo[0] - pad[0], hi[0] + pad[0]] {
                for &cy in &[lo[1] - pad[1], hi[1] + pad[1]] {
                    extras.push(vec![cx, cy]);
                }
            }
        }
        _ => return Err(RepairError::BadWeights),
    }
    // dedupe extras against the grid and each other (exact equality)
    let mut uniq: Vec<Vec<S>> = Vec::new();
    'outer: for e in extras {
        for i in 0..ny {
            if inst.nu.point(i) == &e[..] {
                continue 'outer;
            }
        }
        if uniq.iter().any(|u| u == &e) {
            continue;
        }
        uniq.push(e);
    }

    let n_extra = uniq.len();
    let delta_total = lit::<S>(1e-10);
    let keep = S::one() - delta_total;
    let each = delta_total / S::from_usize(n_extra).unwrap();
    let mean_a: S = a_weights.iter().copied().sum::<S>() / S::from_usize(ny).unwrap();

    // combined rows sorted with the measure's own ordering so indices align
    struct Row<S> {
        point: Vec<S>,
        weight: S,
        a: S,
        orig: Option<usize>,
    }
    let mut rows: Vec<Row<S>> = (0..ny)
        .map(|i| Row {
            point: inst.nu.point(i).to_vec(),
            weight: inst.nu.weight(i) * keep,
            a: a_weights[i],
            orig: Some(i),
        })
        .collect();
    for e in uniq {
        rows.push(Row { point: e, weight: each, a: mean_a, orig: None });
    }
    rows.sort_by(|p, q| crate::model::lex_cmp(&p.point, &q.point));

    let points: Vec<Vec<S>> = rows.iter().map(|r| r.point.clone()).collect();
    let weights: Vec<S> = rows.iter().map(|r| r.weight).collect();
    let a_ext: Vec<S> = rows.iter().map(|r| r.a).collect();
    let nu_ext = DiscreteMeasure::new(d, points.clone(), weights)?;

    let cost = match &inst.cost {
        crate::model::CostSpec::Tabulated { rows: nr, values, .. } => {
            // nearest original column for the new points
            let mut new_values = Vec::with_capacity(nr * rows.len());
            for xi in 0..*nr {
                for r in rows.iter() {
                    match r.orig {
                        Some(yi) => new_values.push(values[xi * ny + yi]),
                        None => {
                            let mut best = (S::infinity(), 0usize);
                            for yi in 0..ny {
                                let mut dist = S::zero();
                                for k in 0..d {
                                    let diff = inst.nu.point(yi)[k] - r.point[k];
                                    dist += diff * diff;
                                }
                                if dist < best.0 {
                                    best = (dist, yi);
                                }
                            }
                            new_values.push(values[xi * ny + best.1]);
                        }
                    }
                }
            }
            crate::model::CostSpec::Tabulated {
                rows: *nr,
                cols: rows.len(),
                values: new_values,
            }
        }
        other => other.clone(),
    };
    Ok((MotInstance::new(inst.mu.clone(), nu_ext, cost), a_ext, true))
}

/// Solves one alpha stage; the first stage walks an epsilon ladder down from
/// 1 so its cold start stays in the stable regime.
fn solve_stage<S: Scalar>(
    inst: &MotInstance<S>,
    a_weights: &[S],
    alpha: S,
    opts: &RepairOptions<S>,
    state: &mut DualState<S>,
    first: bool,
) -> Result<Vec<S>, RepairError> {
    let to_err = |source: EntropicError, alpha: S| RepairError::Solver {
        alpha: alpha.to_f64().unwrap_or(f64::NAN),
        source,
    };
    let pen = Penalization { alpha, a_weights: a_weights.to_vec(), psi_anchor: None };
    if first && opts.epsilon < S::one() {
        let mut eps = S::one();
        let warm_cfg = NewtonConfig {
            grad_tol: opts.newton.grad_tol.max(lit(1e-4)),
            ..opts.newton
        };
        while eps > opts.epsilon {
            let prob = EntropicProblem::dense(inst, eps)
                .and_then(|p| p.with_penalization(Some(pen.clone())))
                .map_err(|e| to_err(e, alpha))?;
            run_newton(&prob, state, &warm_cfg).map_err(|e| to_err(e, alpha))?;
            eps = (eps * lit(0.5)).max(opts.epsilon);
        }
    }
    let prob = EntropicProblem::dense(inst, opts.epsilon)
        .and_then(|p| p.with_penalization(Some(pen)))
        .map_err(|e| to_err(e, alpha))?;
    let run = run_newton(&prob, state, &opts.newton).map_err(|e| to_err(e, alpha))?;
    if !run.converged {
        return Err(RepairError::NotConverged {
            alpha: alpha.to_f64().unwrap_or(f64::NAN),
            grad: run.grad_error.to_f64().unwrap_or(f64::NAN),
        });
    }
    let stats = kernel_stats(&prob, state);
    // normalize to total mass one so the marginal is a probability vector
    let inv = S::one() / stats.mass;
    Ok(stats.y_marginal.iter().map(|&m| m * inv).collect())
}

/// Runs the alpha schedule (warm-starting each stage from the previous one),
/// stops once the f*-gap settles, and linearly extrapolates the last two
/// marginals to alpha = 0.
pub fn repair_marginals<S: Scalar>(
    inst: &MotInstance<S>,
    a_weights: &[S],
    alpha_schedule: &[S],
    opts: &RepairOptions<S>,
) -> Result<RepairOutcome<S>, RepairError> {
    check_schedule(alpha_schedule)?;
    if a_weights.len() != inst.nu.len() || a_weights.iter().any(|&a| !(a > S::zero())) {
        return Err(RepairError::BadWeights);
    }
    let (work, a_ext, _extended) = prepare_problem(inst, a_weights)?;
    let mut state = DualState::zeros(work.mu.len(), work.nu.len(), work.dim());
    let mut stages: Vec<AlphaStage<S>> = Vec::new();
    for &alpha in alpha_schedule {
        let first = stages.is_empty();
        let nu_alpha = solve_stage(&work, &a_ext, alpha, opts, &mut state, first)?;
        let gap = fstar_gap(&a_ext, &work.nu, &nu_alpha);
        let settled = stages.last().map_or(false, |prev: &AlphaStage<S>| {
            (gap - prev.fstar_gap).abs()
                <= opts.gap_stop_rel * prev.fstar_gap.abs() + lit::<S>(1e-16)
        });
        stages.push(AlphaStage { alpha, nu_alpha, fstar_gap: gap });
        if settled {
            break;
        }
    }

    // Linear extrapolation in alpha from the last two stages; a single stage
    // is used as-is.
    let weights: Vec<S> = if stages.len() >= 2 {
        let a = &stages[stages.len() - 2];
        let b = &stages[stages.len() - 1];
        let denom = a.alpha - b.alpha;
        b.nu_alpha
            .iter()
            .zip(a.nu_alpha.iter())
            .map(|(&wb, &wa)| wb - b.alpha * (wa - wb) / denom)
            .collect()
    } else {
        stages[0].nu_alpha.clone()
    };
    // clamp stray negative extrapolations and renormalize
    let mut points = Vec::new();
    let mut w = Vec::new();
    for yi in 0..work.nu.len() {
        if weights[yi] > S::zero() {
            points.push(work.nu.point(yi).to_vec());
            w.push(weights[yi]);
        }
    }
    let total: S = w.iter().copied().sum();
    for v in w.iter_mut() {
        *v = *v / total;
    }
    let nu_repaired = DiscreteMeasure::new(work.dim(), points, w)?;
    let gap = {
        // recompute against the surviving support
        let mut acc = S::zero();
        let half = lit::<S>(0.5);
        let mut j = 0usize;
        for yi in 0..work.nu.len() {
            let wr = if j < nu_repaired.len() && nu_repaired.point(j) == work.nu.point(yi) {
                let v = nu_repaired.weight(j);
                j += 1;
                v
            } else {
                S::zero()
            };
            let dev = wr - work.nu.weight(yi);
            acc += dev * dev / a_ext[yi];
        }
        half * acc
    };
    Ok(RepairOutcome { nu_repaired, fstar_gap: gap, stages })
}

/// Slope diagnostic for ordered pairs: `(nu_alpha - nu) / alpha` per stage and
/// the largest componentwise drift between consecutive stages.
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeOutcome<S> {
    pub alphas: Vec<S>,
    /// One slope vector per alpha.
    pub slopes: Vec<Vec<S>>,
    /// `max_y |slope_k - slope_{k-1}|`, one entry per consecutive pair.
    pub drifts: Vec<S>,
}

pub fn penalization_slope<S: Scalar>(
    inst: &MotInstance<S>,
    a_weights: &[S],
    alpha_schedule: &[S],
    opts: &RepairOptions<S>,
) -> Result<SlopeOutcome<S>, RepairError> {
    check_schedule(alpha_schedule)?;
    if a_weights.len() != inst.nu.len() || a_weights.iter().any(|&a| !(a > S::zero())) {
        return Err(RepairError::BadWeights);
    }
    // ordered marginals are a precondition, so no grid extension happens here
    let mut state = DualState::zeros(inst.mu.len(), inst.nu.len(), inst.dim());
    let mut slopes: Vec<Vec<S>> = Vec::new();
    let mut alphas = Vec::new();
    for (k, &alpha) in alpha_schedule.iter().enumerate() {
        let nu_alpha = solve_stage(inst, a_weights, alpha, opts, &mut state, k == 0)?;
        let slope: Vec<S> = nu_alpha
            .iter()
            .zip(inst.nu.weights())
            .map(|(&na, &n)| (na - n) / alpha)
            .collect();
        slopes.push(slope);
        alphas.push(alpha);
    }
    let drifts = slopes
        .windows(2)
        .map(|w| {
            w[0].iter()
                .zip(w[1].iter())
                .map(|(&a, &b)| (a - b).abs())
                .fold(S::zero(), S::max)
        })
        .collect();
    Ok(SlopeOutcome { alphas, slopes, drifts })
}
