//! The full solve pipeline: epsilon scaling (halving by default), grid-size
//! adaptation with nearest-neighbor prolongation of the duals, kernel
//! truncation between stages, and the Bregman-to-Newton switch that makes the
//! hybrid solver.

use std::time::Instant;

use thiserror::Error;

use crate::entropic::{
    kernel_stats, truncate_kernel, ActiveSets, EntropicError, EntropicProblem, KernelStats,
    Penalization, TruncationStats,
};
use crate::experiments::{generate_instance, ExperimentError, ExperimentMarginals};
use crate::hull::HullError;
use crate::model::{
    check_convex_order_1d, convex_order_tol, CostSpec, DiscreteMeasure, DualState, MotInstance,
};
use crate::newton::{run_newton, NewtonConfig};
use crate::repair::{repair_marginals, RepairError, RepairOptions};
use crate::scalar::{lit, Scalar};
use crate::semidual::{semidual_value_and_subgradient, SemidualError, SemidualWorkspace};
use crate::sinkhorn::{run_sinkhorn, sinkhorn_sweep, StopRule, SweepLog, SweepRecord};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Entropic(#[from] EntropicError),
    #[error("instance generation failed: {0}")]
    Experiment(#[from] ExperimentError),
    #[error("marginals are not in convex order (worst call violation {worst:e}); enable repair_if_needed or fix the instance")]
    NotInConvexOrder { worst: f64 },
    #[error("convex-order repair failed: {0}")]
    Repair(#[from] RepairError),
    #[error("gap dominator failed: {0}")]
    Semidual(#[from] SemidualError),
    #[error("hull evaluation failed: {0}")]
    Hull(#[from] HullError),
    #[error("a tabulated cost cannot be refined to a new grid")]
    TabulatedRefinement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverChoice {
    Bregman,
    Newton,
    Hybrid,
}

impl SolverChoice {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "bregman" => Some(SolverChoice::Bregman),
            "newton" => Some(SolverChoice::Newton),
            "hybrid" => Some(SolverChoice::Hybrid),
            _ => None,
        }
    }
}

/// When the hybrid solver abandons sweeps for Newton: once the first sweep's
/// error is divided by `error_ratio`, after `max_bregman_iters` sweeps, or
/// once the error is divided by `small_error_ratio` if it started under
/// `small_error_threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwitchRule<S> {
    pub error_ratio: S,
    pub max_bregman_iters: usize,
    pub small_error_threshold: S,
    pub small_error_ratio: S,
}

impl<S: Scalar> Default for SwitchRule<S> {
    fn default() -> Self {
        SwitchRule {
            error_ratio: lit(2.0),
            max_bregman_iters: 100,
            small_error_threshold: lit(0.1),
            small_error_ratio: lit(1.1),
        }
    }
}

impl<S: Scalar> SwitchRule<S> {
    fn fires(&self, initial: S, current: S, sweeps: usize) -> bool {
        if sweeps >= self.max_bregman_iters {
            return true;
        }
        if current <= initial / self.error_ratio {
            return true;
        }
        initial < self.small_error_threshold && current <= initial / self.small_error_ratio
    }
}

/// Penalty weight families for the Newton stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyWeights {
    Ones,
    Nu,
    NuSquared,
    /// `nu_y / max(|psi0_y|, 1e-8)` recomputed each stage from the previous
    /// stage's psi.
    NuOverPsi0,
}

impl PenaltyWeights {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "ones" => Some(PenaltyWeights::Ones),
            "nu" => Some(PenaltyWeights::Nu),
            "nu_squared" | "nu2" => Some(PenaltyWeights::NuSquared),
            "nu_over_psi0" => Some(PenaltyWeights::NuOverPsi0),
            _ => None,
        }
    }

    fn build<S: Scalar>(&self, nu: &DiscreteMeasure<S>, psi0: &[S]) -> Vec<S> {
        match self {
            PenaltyWeights::Ones => vec![S::one(); nu.len()],
            PenaltyWeights::Nu => nu.weights().to_vec(),
            PenaltyWeights::NuSquared => nu.weights().iter().map(|w| *w * *w).collect(),
            PenaltyWeights::NuOverPsi0 => {
                let floor = lit::<S>(1e-8);
                nu.weights()
                    .iter()
                    .zip(psi0.iter())
                    .map(|(&w, &p)| w / p.abs().max(floor))
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltySpec<S> {
    pub alpha: S,
    pub weights: PenaltyWeights,
    /// Anchor the penalty at the previous stage's psi instead of zero.
    pub anchor_at_previous: bool,
}

impl<S: Scalar> Default for PenaltySpec<S> {
    fn default() -> Self {
        PenaltySpec { alpha: lit(1e-2), weights: PenaltyWeights::NuSquared, anchor_at_previous: false }
    }
}

/// Grid refinement step: regenerate the synthetic marginals at size `n` once
/// epsilon drops to `eps_threshold` or below.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridStep<S> {
    pub eps_threshold: S,
    pub n: usize,
}

/// Full pipeline configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig<S> {
    pub eps_start: S,
    pub eps_target: S,
    pub eps_factor: S,
    pub stage_grad_tol: S,
    pub final_grad_tol: S,
    pub switch_rule: SwitchRule<S>,
    pub grid_schedule: Vec<GridStep<S>>,
    pub truncation_factor: S,
    /// Truncation (and sparse prolongation) only below this epsilon.
    pub truncation_eps_gate: S,
    pub penalty: Option<PenaltySpec<S>>,
    pub newton: NewtonConfig<S>,
    /// Sweep budget per stage for the Bregman phases.
    pub sinkhorn_max_iters: usize,
    /// Repair non-ordered 1D marginals instead of refusing.
    pub repair_if_needed: bool,
}

impl<S: Scalar> ScheduleConfig<S> {
    /// Defaults matching the experiments: start at 1, halve down to
    /// `eps_target`, stage tolerance 1e-2, truncation at 1e-7 under eps 1e-2.
    pub fn down_to(eps_target: S) -> Self {
        ScheduleConfig {
            eps_start: S::one(),
            eps_target,
            eps_factor: lit(2.0),
            stage_grad_tol: lit(1e-2),
            final_grad_tol: lit(1e-6),
            switch_rule: SwitchRule::default(),
            grid_schedule: Vec::new(),
            truncation_factor: lit(1e-7),
            truncation_eps_gate: lit(1e-2),
            penalty: Some(PenaltySpec::default()),
            newton: NewtonConfig::default(),
            sinkhorn_max_iters: 2000,
            repair_if_needed: false,
        }
    }

    /// The epsilon sequence: geometric with `eps_factor`, final value clamped
    /// to exactly `eps_target`.
    pub fn eps_sequence(&self) -> Vec<S> {
        let mut seq = Vec::new();
        let mut eps = self.eps_start;
        if self.eps_start <= self.eps_target {
            return vec![self.eps_target];
        }
        loop {
            seq.push(eps);
            let next = eps / self.eps_factor;
            if next <= self.eps_target {
                seq.push(self.eps_target);
                return seq;
            }
            eps = next;
        }
    }

    /// Doubling grid schedule from `n0` up to `n_target`, one refinement per
    /// stage, stopping refinement before epsilon gets too small.
    pub fn doubling_grid(mut self, n0: usize, n_target: usize) -> Self {
        let mut steps = Vec::new();
        let mut n = n0;
        let mut eps = self.eps_start;
        while n < n_target {
            eps = eps / self.eps_factor;
            n = (n * 2).min(n_target);
            steps.push(GridStep { eps_threshold: eps, n });
            if eps <= self.eps_target {
                break;
            }
        }
        self.grid_schedule = steps;
        self
    }
}

/// What to solve: a fixed instance, or a synthetic experiment whose marginals
/// can be regenerated at finer grids along the schedule.
#[derive(Debug, Clone)]
pub enum SolveSource<S> {
    Fixed(MotInstance<S>),
    Synthetic { experiment: ExperimentMarginals, cost: CostSpec<S>, base_n: usize },
}

/// Per-stage record of the pipeline.
#[derive(Debug, Clone)]
pub struct StageReport<S> {
    pub eps: S,
    pub grid_nx: usize,
    pub grid_ny: usize,
    pub active_entries: usize,
    pub bregman_log: SweepLog<S>,
    pub newton_log: SweepLog<S>,
    /// Sweep count at which the hybrid switched to Newton.
    pub switched_at: Option<usize>,
    pub converged: bool,
    pub grad_error: S,
    pub truncation: Option<TruncationStats<S>>,
    pub seconds: f64,
}

/// Both duality-gap dominators at the final state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapDominators<S> {
    pub hull_gap: S,
    pub sup_gap: S,
    pub hull_gap_over_eps: S,
    pub sup_gap_over_eps: S,
}

#[derive(Debug, Clone)]
pub struct SolveReport<S> {
    pub stages: Vec<StageReport<S>>,
    pub final_eps: S,
    pub dual_value: S,
    pub primal_value: S,
    pub entropy: S,
    pub mass: S,
    pub x_marginal_err: S,
    pub y_marginal_err: S,
    pub martingale_err: S,
    pub gaps: GapDominators<S>,
    /// Set when the marginals were replaced by their convex-order repair.
    pub repaired: bool,
    pub wall_seconds: f64,
}

impl<S: Scalar> SolveReport<S> {
    /// Trajectory equality ignoring wall-clock fields.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        self.stages.len() == other.stages.len()
            && self
                .stages
                .iter()
                .zip(other.stages.iter())
                .all(|(a, b)| {
                    a.bregman_log.same_trajectory(&b.bregman_log)
                        && a.newton_log.same_trajectory(&b.newton_log)
                        && a.switched_at == b.switched_at
                        && a.grad_error == b.grad_error
                })
            && self.dual_value == other.dual_value
            && self.primal_value == other.primal_value
    }
}

/// Everything the pipeline hands back: the report plus the final instance,
/// duals, and active sets (the instance may differ from the input after grid
/// refinement or repair).
#[derive(Debug, Clone)]
pub struct SolveOutcome<S> {
    pub report: SolveReport<S>,
    pub instance: MotInstance<S>,
    pub state: DualState<S>,
    pub active: ActiveSets,
    pub stats: KernelStats<S>,
}

/// Copies each new point's dual values from the nearest old support point
/// (ties toward the lexicographically smaller point, which comes first in the
/// sorted support).
pub fn prolong_duals<S: Scalar>(
    old_state: &DualState<S>,
    old_mu: &DiscreteMeasure<S>,
    old_nu: &DiscreteMeasure<S>,
    new_mu: &DiscreteMeasure<S>,
    new_nu: &DiscreteMeasure<S>,
) -> DualState<S> {
    let d = old_mu.dim();
    let mut state = DualState::zeros(new_mu.len(), new_nu.len(), d);
    for xi in 0..new_mu.len() {
        let j = nearest(old_mu, new_mu.point(xi));
        state.phi[xi] = old_state.phi[j];
        state.h_row_mut(xi).copy_from_slice(old_state.h_row(j));
    }
    for yi in 0..new_nu.len() {
        let j = nearest(old_nu, new_nu.point(yi));
        state.psi[yi] = old_state.psi[j];
    }
    state
}

fn nearest<S: Scalar>(m: &DiscreteMeasure<S>, p: &[S]) -> usize {
    let mut best = 0usize;
    let mut best_dist = S::infinity();
    for i in 0..m.len() {
        let mut dist = S::zero();
        for (a, b) in m.point(i).iter().zip(p.iter()) {
            let diff = *a - *b;
            dist += diff * diff;
        }
        // strict comparison keeps the first (lexicographically smaller) point
        // on ties
        if dist < best_dist {
            best_dist = dist;
            best = i;
        }
    }
    best
}

/// Dilates a truncated active set onto a refined grid: a new pair stays
/// active when its nearest old pair was active; rows and columns that end up
/// empty are repaired with their nearest counterparts.
fn prolong_active<S: Scalar>(
    old: &ActiveSets,
    old_mu: &DiscreteMeasure<S>,
    old_nu: &DiscreteMeasure<S>,
    new_mu: &DiscreteMeasure<S>,
    new_nu: &DiscreteMeasure<S>,
) -> ActiveSets {
    let x_map: Vec<usize> = (0..new_mu.len()).map(|xi| nearest(old_mu, new_mu.point(xi))).collect();
    let y_map: Vec<usize> = (0..new_nu.len()).map(|yi| nearest(old_nu, new_nu.point(yi))).collect();
    // old y -> new ys
    let mut y_preimage: Vec<Vec<u32>> = vec![Vec::new(); old_nu.len()];
    for (yi, &oy) in y_map.iter().enumerate() {
        y_preimage[oy].push(yi as u32);
    }
    let mut rows: Vec<Vec<u32>> = Vec::with_capacity(new_mu.len());
    for xi in 0..new_mu.len() {
        let mut row = Vec::new();
        for &oy in old.row(x_map[xi]) {
            row.extend_from_slice(&y_preimage[oy as usize]);
        }
        row.sort_unstable();
        row.dedup();
        if row.is_empty() {
            row.push(nearest(new_nu, new_mu.point(xi)) as u32);
        }
        rows.push(row);
    }
    // column coverage repair
    let mut covered = vec![false; new_nu.len()];
    for row in &rows {
        for &y in row {
            covered[y as usize] = true;
        }
    }
    for yi in 0..new_nu.len() {
        if !covered[yi] {
            let xi = nearest(new_mu, new_nu.point(yi));
            let row = &mut rows[xi];
            if let Err(pos) = row.binary_search(&(yi as u32)) {
                row.insert(pos, yi as u32);
            }
        }
    }
    ActiveSets::new(rows, new_nu.len()).expect("prolonged active sets are covered")
}

/// Both duality-gap dominators at the current state: the concave-hull
/// completion of psi (over the full grid) and the cheaper supremum over
/// active entries.
pub fn gap_dominators<S: Scalar>(
    prob: &EntropicProblem<'_, S>,
    state: &DualState<S>,
    stats: &KernelStats<S>,
) -> Result<GapDominators<S>, SemidualError> {
    let inst = prob.instance();
    let mut ws = SemidualWorkspace::new(inst.mu.len());
    let hull_value = semidual_value_and_subgradient(inst, &state.psi, &mut ws)?.value;
    let hull_gap = hull_value - stats.primal_value;

    let mut sup_value = S::zero();
    for xi in 0..inst.mu.len() {
        let mut best = S::neg_infinity();
        for &yu in prob.active().row(xi) {
            let yi = yu as usize;
            let v = inst.cost_at(xi, yi) - state.psi[yi];
            if v > best {
                best = v;
            }
        }
        sup_value += inst.mu.weight(xi) * best;
    }
    for yi in 0..inst.nu.len() {
        sup_value += inst.nu.weight(yi) * state.psi[yi];
    }
    let sup_gap = sup_value - stats.primal_value;
    let eps = prob.epsilon();
    Ok(GapDominators {
        hull_gap,
        sup_gap,
        hull_gap_over_eps: hull_gap / eps,
        sup_gap_over_eps: sup_gap / eps,
    })
}

fn build_penalization<S: Scalar>(
    spec: &PenaltySpec<S>,
    nu: &DiscreteMeasure<S>,
    psi0: &[S],
) -> Penalization<S> {
    Penalization {
        alpha: spec.alpha,
        a_weights: spec.weights.build(nu, psi0),
        psi_anchor: if spec.anchor_at_previous { Some(psi0.to_vec()) } else { None },
    }
}

/// Runs the epsilon-scaled pipeline with the chosen per-stage solver.
pub fn run_hybrid<S: Scalar>(
    source: &SolveSource<S>,
    schedule: &ScheduleConfig<S>,
    choice: SolverChoice,
) -> Result<SolveOutcome<S>, SolveError> {
    let wall = Instant::now();
    let mut grid_n = match source {
        SolveSource::Fixed(_) => 0usize,
        SolveSource::Synthetic { base_n, .. } => *base_n,
    };
    let mut inst = match source {
        SolveSource::Fixed(inst) => inst.clone(),
        SolveSource::Synthetic { experiment, cost, base_n } => {
            generate_instance(*experiment, *base_n, cost.clone())?
        }
    };
    let mut repaired = false;
    if inst.dim() == 1 {
        let check = check_convex_order_1d(&inst.mu, &inst.nu, convex_order_tol())
            .expect("dimension checked");
        if !check.ordered {
            if schedule.repair_if_needed {
                let a: Vec<S> = inst.nu.weights().iter().map(|w| *w * *w).collect();
                let alphas: Vec<S> =
                    (0..11).map(|k| lit::<S>(1e-1) / lit::<S>(2.0).powi(k)).collect();
                let out = repair_marginals(&inst, &a, &alphas, &RepairOptions::default())?;
                inst = MotInstance::new(inst.mu.clone(), out.nu_repaired, inst.cost.clone());
                repaired = true;
            } else {
                return Err(SolveError::NotInConvexOrder {
                    worst: check.worst_violation.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
    }

    let mut state = DualState::zeros(inst.mu.len(), inst.nu.len(), inst.dim());
    let mut active = ActiveSets::full(inst.mu.len(), inst.nu.len());
    let mut truncated = false;
    let mut stages: Vec<StageReport<S>> = Vec::new();
    let eps_seq = schedule.eps_sequence();

    for (k, &eps) in eps_seq.iter().enumerate() {
        let stage_start = Instant::now();
        let is_final = k + 1 == eps_seq.len();

        // grid refinement (synthetic sources only)
        if let SolveSource::Synthetic { experiment, cost, .. } = source {
            let target = schedule
                .grid_schedule
                .iter()
                .filter(|step| eps <= step.eps_threshold)
                .map(|step| step.n)
                .max()
                .unwrap_or(grid_n);
            if target > grid_n {
                if matches!(cost, CostSpec::Tabulated { .. }) {
                    return Err(SolveError::TabulatedRefinement);
                }
                let refined = generate_instance(*experiment, target, cost.clone())?;
                state = prolong_duals(&state, &inst.mu, &inst.nu, &refined.mu, &refined.nu);
                active = if truncated {
                    prolong_active(&active, &inst.mu, &inst.nu, &refined.mu, &refined.nu)
                } else {
                    ActiveSets::full(refined.mu.len(), refined.nu.len())
                };
                inst = refined;
                grid_n = target;
            }
        }

        let stage_tol = if is_final { schedule.final_grad_tol } else { schedule.stage_grad_tol };
        let plain = EntropicProblem::new(&inst, eps, active.clone(), None)?;
        let mut bregman_log = SweepLog::default();
        let mut newton_log = SweepLog::default();
        let mut switched_at = None;
        let mut converged;
        let mut grad_error;

        match choice {
            SolverChoice::Bregman => {
                let run = run_sinkhorn(
                    &plain,
                    &mut state,
                    StopRule { grad_tol: stage_tol, max_iters: schedule.sinkhorn_max_iters },
                )?;
                bregman_log = run.log;
                converged = run.converged;
                grad_error = run.grad_error;
            }
            SolverChoice::Newton => {
                let (pen_log, pen_converged, pen_grad) =
                    newton_stage(&inst, eps, &active, schedule, &state.psi.clone(), &mut state, stage_tol)?;
                newton_log = pen_log;
                converged = pen_converged;
                grad_error = pen_grad;
            }
            SolverChoice::Hybrid => {
                // Bregman sweeps until the switch rule fires, then Newton.
                let sweep_start = Instant::now();
                let mut initial_error: Option<S> = None;
                let mut sweeps = 0usize;
                grad_error = S::infinity();
                converged = false;
                loop {
                    let sr = sinkhorn_sweep(&plain, &mut state)?;
                    grad_error = sr.grad_error;
                    bregman_log.push(SweepRecord {
                        iter: sweeps,
                        seconds: sweep_start.elapsed().as_secs_f64(),
                        grad_error,
                        dual_value: sr.value_after_h,
                        h_newton_iters: sr.h_newton_iters,
                    });
                    sweeps += 1;
                    let e0 = *initial_error.get_or_insert(grad_error);
                    if grad_error <= stage_tol {
                        converged = true;
                        break;
                    }
                    if schedule.switch_rule.fires(e0, grad_error, sweeps) {
                        switched_at = Some(sweeps);
                        break;
                    }
                }
                if !converged {
                    let (log, nc, ng) = newton_stage(
                        &inst,
                        eps,
                        &active,
                        schedule,
                        &state.psi.clone(),
                        &mut state,
                        stage_tol,
                    )?;
                    newton_log = log;
                    converged = nc;
                    grad_error = ng;
                }
            }
        }

        // truncation after stage convergence, gated on epsilon
        let truncation = if schedule.truncation_factor > S::zero()
            && eps <= schedule.truncation_eps_gate
            && converged
        {
            let (new_active, tstats) =
                truncate_kernel(&plain, &state, schedule.truncation_factor);
            active = new_active;
            truncated = true;
            Some(tstats)
        } else {
            None
        };

        stages.push(StageReport {
            eps,
            grid_nx: inst.mu.len(),
            grid_ny: inst.nu.len(),
            active_entries: active.entry_count(),
            bregman_log,
            newton_log,
            switched_at,
            converged,
            grad_error,
            truncation,
            seconds: stage_start.elapsed().as_secs_f64(),
        });
    }

    let final_eps = *eps_seq.last().unwrap();
    let prob = EntropicProblem::new(&inst, final_eps, active.clone(), None)?;
    let stats = kernel_stats(&prob, &state);
    let gaps = gap_dominators(&prob, &state, &stats)?;
    let report = SolveReport {
        final_eps,
        dual_value: stats.dual_value,
        primal_value: stats.primal_value,
        entropy: stats.entropy,
        mass: stats.mass,
        x_marginal_err: stats.x_marginal_err_l1(&inst.mu),
        y_marginal_err: stats.y_marginal_err_l1(&inst.nu),
        martingale_err: stats.martingale_err_l1(),
        gaps,
        repaired,
        wall_seconds: wall.elapsed().as_secs_f64(),
        stages,
    };
    Ok(SolveOutcome { report, instance: inst, state, active, stats })
}

/// One penalized Newton stage; builds the penalty weights from the previous
/// stage's psi per the configured family.
fn newton_stage<S: Scalar>(
    inst: &MotInstance<S>,
    eps: S,
    active: &ActiveSets,
    schedule: &ScheduleConfig<S>,
    psi0: &[S],
    state: &mut DualState<S>,
    stage_tol: S,
) -> Result<(SweepLog<S>, bool, S), SolveError> {
    let pen = schedule.penalty.as_ref().map(|spec| build_penalization(spec, &inst.nu, psi0));
    let prob = EntropicProblem::new(inst, eps, active.clone(), pen)?;
    let cfg = NewtonConfig { grad_tol: stage_tol, ..schedule.newton };
    let run = run_newton(&prob, state, &cfg)?;
    Ok((run.log, run.converged, run.grad_error))
}
