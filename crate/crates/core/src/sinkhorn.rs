//! Martingale Sinkhorn / Bregman projection loop: alternate the closed-form
//! psi block with the per-x (phi, h) block. Each half-step is a block
//! minimization of `V_eps`, so the objective is a Lyapunov function.

use std::time::Instant;

use crate::entropic::{kernel_stats, update_phi_h_block, update_psi, EntropicError, EntropicProblem};
use crate::model::DualState;
use crate::scalar::{to_f64, Scalar};

/// One record per full sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord<S> {
    pub iter: usize,
    pub seconds: f64,
    /// `|nu - y_marginal|_1` measured after the (phi, h) block, which equals
    /// the norm-1 gradient of the implied semi-dual.
    pub grad_error: S,
    pub dual_value: S,
    pub h_newton_iters: usize,
}

/// Iteration log; `dual_value` is non-increasing across records.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepLog<S> {
    pub records: Vec<SweepRecord<S>>,
}

impl<S> Default for SweepLog<S> {
    fn default() -> Self {
        SweepLog { records: Vec::new() }
    }
}

impl<S: Scalar> SweepLog<S> {
    pub fn push(&mut self, rec: SweepRecord<S>) {
        self.records.push(rec);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last_grad_error(&self) -> Option<S> {
        self.records.last().map(|r| r.grad_error)
    }

    /// True when the numeric trajectory (everything except wall-clock) of two
    /// logs is bit-identical.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(other.records.iter()).all(|(a, b)| {
                a.iter == b.iter
                    && a.grad_error == b.grad_error
                    && a.dual_value == b.dual_value
                    && a.h_newton_iters == b.h_newton_iters
            })
    }

    /// CSV rows `iter,seconds,grad_error,dual_value` with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,seconds,grad_error,dual_value\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e}\n",
                r.iter,
                r.seconds,
                to_f64(r.grad_error),
                to_f64(r.dual_value)
            ));
        }
        out
    }
}

/// Values observed during one sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepStats<S> {
    /// `V_eps` after the psi half-step.
    pub value_after_psi: S,
    /// `V_eps` after the (phi, h) half-step.
    pub value_after_h: S,
    /// `|nu - y_marginal|_1` after the (phi, h) half-step.
    pub grad_error: S,
    pub h_newton_iters: usize,
}

/// One full sweep in place: psi block first (matching the iteration the
/// descent analysis is stated for), then the joint (phi, h) block per x.
pub fn sinkhorn_sweep<S: Scalar>(
    prob: &EntropicProblem<'_, S>,
    state: &mut DualState<S>,
) -> Result<SweepStats<S>, EntropicError> {
    state.psi = update_psi(prob, state);
    let mid = kernel_stats(prob, state);
    let h_iters = update_phi_h_block(prob, state)?;
    let stats = kernel_stats(prob, state);
    Ok(SweepStats {
        value_after_psi: mid.dual_value,
        value_after_h: stats.dual_value,
        grad_error: stats.y_marginal_err_l1(&prob.instance().nu),
        h_newton_iters: h_iters,
    })
}

/// Stopping rule for the sweep loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopRule<S> {
    pub grad_tol: S,
    pub max_iters: usize,
}

/// Outcome of [`run_sinkhorn`]; iteration exhaustion is reported here, not
/// raised as an error.
#[derive(Debug, Clone)]
pub struct SinkhornRun<S> {
    pub log: SweepLog<S>,
    pub converged: bool,
    pub grad_error: S,
}

/// Sweeps until `|nu - y_marginal|_1 <= grad_tol` or `max_iters`.
pub fn run_sinkhorn<S: Scalar>(
    prob: &EntropicProblem<'_, S>,
    state: &mut DualState<S>,
    stop: StopRule<S>,
) -> Result<SinkhornRun<S>, EntropicError> {
    let start = Instant::now();
    let mut log = SweepLog::default();
    let mut grad_error = S::infinity();
    for iter in 0..stop.max_iters {
        let sweep = sinkhorn_sweep(prob, state)?;
        grad_error = sweep.grad_error;
        log.push(SweepRecord {
            iter,
            seconds: start.elapsed().as_secs_f64(),
            grad_error,
            dual_value: sweep.value_after_h,
            h_newton_iters: sweep.h_newton_iters,
        });
        if grad_error <= stop.grad_tol {
            return Ok(SinkhornRun { log, converged: true, grad_error });
        }
    }
    Ok(SinkhornRun { log, converged: grad_error <= stop.grad_tol, grad_error })
}
