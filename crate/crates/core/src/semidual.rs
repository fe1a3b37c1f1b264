//! Non-smooth semi-dual baseline: `V(psi) = mu[(c(X,.) - psi)_conc(X)] + nu[psi]`
//! evaluated through concave envelopes, its subgradient from the envelope
//! contact sets, and projected subgradient descent with an `O(1/sqrt(n))`
//! step size.

use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::hull::{hull_1d, hull_nd, HullError, HullResult};
use crate::model::MotInstance;
use crate::scalar::{to_f64, Scalar};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SemidualError {
    #[error("x index {x_index} lies outside the convex hull of the nu support; the martingale problem is infeasible there")]
    Infeasible { x_index: usize },
    #[error("hull evaluation failed at x index {x_index}: {source}")]
    Hull { x_index: usize, source: HullError },
}

/// One evaluation of the semi-dual objective.
#[derive(Debug, Clone, PartialEq)]
pub struct SemidualIterate<S> {
    pub psi: Vec<S>,
    pub value: S,
    /// Pushforward-minus-target: each component lies in [-1, 1] and the
    /// components sum to zero.
    pub subgradient: Vec<S>,
    pub step_index: usize,
}

/// Per-x hull gradients carried across iterations as warm starts.
#[derive(Debug, Clone)]
pub struct SemidualWorkspace<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S> SemidualWorkspace<S> {
    pub fn new(nx: usize) -> Self {
        SemidualWorkspace { grads: (0..nx).map(|_| None).collect() }
    }
}

/// Evaluates `V(psi)` and one subgradient, computing one concave envelope per
/// x-point (warm-started from the previous gradients in `ws`).
pub fn semidual_value_and_subgradient<S: Scalar>(
    inst: &MotInstance<S>,
    psi: &[S],
    ws: &mut SemidualWorkspace<S>,
) -> Result<SemidualIterate<S>, SemidualError> {
    let d = inst.dim();
    let nx = inst.mu.len();
    let ny = inst.nu.len();
    let grid = inst.nu.coords();

    let hulls: Result<Vec<HullResult<S>>, SemidualError> = (0..nx)
        .into_par_iter()
        .zip(ws.grads.par_iter_mut())
        .map(|(xi, warm)| {
            let x = inst.mu.point(xi);
            let f: Vec<S> = (0..ny).map(|yi| inst.cost_at(xi, yi) - psi[yi]).collect();
            let result = if d == 1 {
                hull_1d(grid, &f, x[0])
            } else {
                hull_nd(d, grid, &f, x, warm.as_deref())
            };
            match result {
                Ok(r) => {
                    *warm = Some(r.gradient.clone());
                    Ok(r)
                }
                Err(HullError::OutOfHull) => Err(SemidualError::Infeasible { x_index: xi }),
                Err(e) => Err(SemidualError::Hull { x_index: xi, source: e }),
            }
        })
        .collect();
    let hulls = hulls?;

    let mut value = S::zero();
    let mut sub = vec![S::zero(); ny];
    for (xi, hull) in hulls.iter().enumerate() {
        let w = inst.mu.weight(xi);
        value += w * hull.value;
        for (i, &yi) in hull.support.iter().enumerate() {
            sub[yi] += w * hull.coefficients[i];
        }
    }
    for yi in 0..ny {
        value += inst.nu.weight(yi) * psi[yi];
        sub[yi] -= inst.nu.weight(yi);
    }
    Ok(SemidualIterate { psi: psi.to_vec(), value, subgradient: sub, step_index: 0 })
}

/// Step schedule and stopping data for the descent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubgradSteps<S> {
    /// Step at iteration n is `c0 / sqrt(n + 1)`.
    pub c0: S,
    pub n_max: usize,
    /// Early stop when the subgradient norm-1 falls below this.
    pub tol: S,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentRecord<S> {
    pub iter: usize,
    pub value: S,
    pub subgrad_l1: S,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct DescentRun<S> {
    /// Iterate with the smallest value seen (including the starting point).
    pub best: SemidualIterate<S>,
    pub log: Vec<DescentRecord<S>>,
}

impl<S: Scalar> DescentRun<S> {
    /// CSV rows `iter,value,subgrad_l1,seconds`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,value,subgrad_l1,seconds\n");
        for r in &self.log {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e}\n",
                r.iter,
                to_f64(r.value),
                to_f64(r.subgrad_l1),
                r.seconds
            ));
        }
        out
    }
}

/// Projected subgradient descent from `psi0`; bounded subgradients make every
/// step safe, and the best value seen is non-increasing by construction.
pub fn run_subgradient_descent<S: Scalar>(
    inst: &MotInstance<S>,
    psi0: &[S],
    steps: SubgradSteps<S>,
) -> Result<DescentRun<S>, SemidualError> {
    let start = Instant::now();
    let mut ws = SemidualWorkspace::new(inst.mu.len());
    let mut psi = psi0.to_vec();
    let mut log = Vec::with_capacity(steps.n_max + 1);
    let mut best: Option<SemidualIterate<S>> = None;
    for n in 0..=steps.n_max {
        let mut it = semidual_value_and_subgradient(inst, &psi, &mut ws)?;
        it.step_index = n;
        let l1: S = it.subgradient.iter().map(|g| g.abs()).sum();
        log.push(DescentRecord {
            iter: n,
            value: it.value,
            subgrad_l1: l1,
            seconds: start.elapsed().as_secs_f64(),
        });
        let better = best.as_ref().map_or(true, |b| it.value < b.value);
        if better {
            best = Some(it.clone());
        }
        if l1 <= steps.tol || n == steps.n_max {
            break;
        }
        // The stored vector is pushforward-minus-target, which is the descent
        // direction of V (the gradient of V is its negative), so step along it.
        let step = steps.c0 / S::from_usize(n + 1).unwrap().sqrt();
        for (p, g) in psi.iter_mut().zip(it.subgradient.iter()) {
            *p = *p + step * *g;
        }
    }
    Ok(DescentRun { best: best.expect("at least one evaluation"), log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lp::{solve_mot_lp, LpStatus};
    use crate::model::{CostSpec, DiscreteMeasure};
    use crate::scalar::lit;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn measure_1d(points: &[f64], weights: &[f64]) -> DiscreteMeasure<f64> {
        DiscreteMeasure::new(1, points.iter().map(|&p| vec![p]).collect(), weights.to_vec())
            .unwrap()
    }

    fn spread_instance(rng: &mut StdRng, nx: usize, cost: CostSpec<f64>) -> MotInstance<f64> {
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
        MotInstance::new(measure_1d(&xs, &wx), nu, cost)
    }

    #[test]
    fn symmetric_dirac_has_zero_value_and_subgradient() {
        let inst = MotInstance::new(
            measure_1d(&[0.0], &[1.0]),
            measure_1d(&[-1.0, 1.0], &[0.5, 0.5]),
            CostSpec::Tabulated { rows: 1, cols: 2, values: vec![0.0, 0.0] },
        );
        let mut ws = SemidualWorkspace::new(1);
        let it = semidual_value_and_subgradient(&inst, &[0.0, 0.0], &mut ws).unwrap();
        assert!(it.value.abs() <= 1e-15);
        assert!(it.subgradient.iter().all(|g| g.abs() <= 1e-15));
    }

    #[test]
    fn value_is_invariant_under_constant_shifts() {
        let mut rng = StdRng::seed_from_u64(71);
        let inst = spread_instance(&mut rng, 6, CostSpec::ForwardStartPower);
        let ny = inst.nu.len();
        let psi: Vec<f64> = (0..ny).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let shifted: Vec<f64> = psi.iter().map(|p| p + 0.7315).collect();
        let mut ws = SemidualWorkspace::new(inst.mu.len());
        let a = semidual_value_and_subgradient(&inst, &psi, &mut ws).unwrap();
        let b = semidual_value_and_subgradient(&inst, &shifted, &mut ws).unwrap();
        assert!((a.value - b.value).abs() <= 1e-10);
    }

    #[test]
    fn subgradient_is_a_difference_of_probabilities() {
        let mut rng = StdRng::seed_from_u64(72);
        for _ in 0..10 {
            let inst = spread_instance(&mut rng, 5, CostSpec::Oscillatory);
            let ny = inst.nu.len();
            let psi: Vec<f64> = (0..ny).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut ws = SemidualWorkspace::new(inst.mu.len());
            let it = semidual_value_and_subgradient(&inst, &psi, &mut ws).unwrap();
            for g in &it.subgradient {
                assert!(*g >= -1.0 - 1e-12 && *g <= 1.0 + 1e-12);
            }
            let total: f64 = it.subgradient.iter().sum();
            assert!(total.abs() <= 1e-10);
        }
    }

    #[test]
    fn weak_duality_against_the_lp_oracle() {
        let mut rng = StdRng::seed_from_u64(73);
        for _ in 0..5 {
            let inst = spread_instance(&mut rng, 5, CostSpec::ForwardStartPower);
            let lp = solve_mot_lp(&inst).unwrap();
            assert_eq!(lp.status, LpStatus::Optimal);
            let ny = inst.nu.len();
            let mut ws = SemidualWorkspace::new(inst.mu.len());
            for _ in 0..5 {
                let psi: Vec<f64> = (0..ny).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let it = semidual_value_and_subgradient(&inst, &psi, &mut ws).unwrap();
                assert!(it.value >= lp.value - 1e-9, "V {} < LP {}", it.value, lp.value);
            }
        }
    }

    #[test]
    fn lp_optimal_psi_attains_the_lp_value() {
        let mut rng = StdRng::seed_from_u64(74);
        let inst = spread_instance(&mut rng, 6, CostSpec::ForwardStartPower);
        let lp = solve_mot_lp(&inst).unwrap();
        let psi_star = lp.duals.as_ref().unwrap().psi.clone();
        let mut ws = SemidualWorkspace::new(inst.mu.len());
        let it = semidual_value_and_subgradient(&inst, &psi_star, &mut ws).unwrap();
        assert!((it.value - lp.value).abs() <= 1e-8, "V {} vs LP {}", it.value, lp.value);

        // descent started there can only track the optimum
        let run = run_subgradient_descent(
            &inst,
            &psi_star,
            SubgradSteps { c0: lit(0.5), n_max: 200, tol: 0.0 },
        )
        .unwrap();
        assert!(run.best.value <= lp.value + 1e-8);
        assert!(run.best.value >= lp.value - 1e-9);
    }

    #[test]
    fn zero_steps_returns_the_evaluated_start() {
        let mut rng = StdRng::seed_from_u64(75);
        let inst = spread_instance(&mut rng, 4, CostSpec::Distance);
        let ny = inst.nu.len();
        let psi0: Vec<f64> = (0..ny).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let run = run_subgradient_descent(
            &inst,
            &psi0,
            SubgradSteps { c0: lit(1.0), n_max: 0, tol: 0.0 },
        )
        .unwrap();
        assert_eq!(run.log.len(), 1);
        assert_eq!(run.best.psi, psi0);
    }

    #[test]
    fn best_value_is_non_increasing_along_the_run() {
        let mut rng = StdRng::seed_from_u64(76);
        let inst = spread_instance(&mut rng, 6, CostSpec::ForwardStartPower);
        let ny = inst.nu.len();
        let psi0 = vec![0.0; ny];
        let run = run_subgradient_descent(
            &inst,
            &psi0,
            SubgradSteps { c0: lit(1.0), n_max: 300, tol: 0.0 },
        )
        .unwrap();
        let mut best = f64::INFINITY;
        for r in &run.log {
            best = best.min(r.value);
        }
        assert_eq!(best, run.best.value);
    }

    #[test]
    fn twenty_point_instance_approaches_the_lp_value() {
        let mut rng = StdRng::seed_from_u64(77);
        let inst = spread_instance(&mut rng, 10, CostSpec::ForwardStartPower); // 20 y-points
        let lp = solve_mot_lp(&inst).unwrap();
        assert_eq!(lp.status, LpStatus::Optimal);
        let psi0 = vec![0.0; inst.nu.len()];
        let run = run_subgradient_descent(
            &inst,
            &psi0,
            SubgradSteps { c0: lit(1.0), n_max: 10_000, tol: 0.0 },
        )
        .unwrap();
        assert!(
            run.best.value - lp.value <= 0.1,
            "best {} vs LP {}",
            run.best.value,
            lp.value
        );
        assert!(run.best.value >= lp.value - 1e-9);
    }
}
