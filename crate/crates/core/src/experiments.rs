//! Built-in experiment instances: marginals tabulated on regular grids with
//! weights proportional to the stated densities, renormalized to unit mass.
//!
//! - `left_curtain`: mu uniform on [-1, 1], nu with density |y|^1.5 against
//!   mu on the same grid; with the cost `x y^2` the optimal coupling is the
//!   left-curtain coupling.
//! - `basket2d`: the two-dimensional analogue on [-1, 1]^2 with density
//!   |y1|^1.5 + |y2|^1.5 and the two-asset quadratic cost.
//! - `mixture1d`: an equal mixture of the uniform pair and a pair of shifted
//!   lognormals (volatilities 0.1 and 0.2).

use thiserror::Error;

use crate::model::{CostSpec, DiscreteMeasure, MotInstance};
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentMarginals {
    LeftCurtain,
    Basket2d,
    Mixture1d,
}

impl ExperimentMarginals {
    pub fn dim(&self) -> usize {
        match self {
            ExperimentMarginals::Basket2d => 2,
            _ => 1,
        }
    }

    /// Cost the experiment is normally run with.
    pub fn default_cost<S: Scalar>(&self) -> CostSpec<S> {
        match self {
            ExperimentMarginals::Basket2d => CostSpec::Basket2d,
            _ => CostSpec::ForwardStartPower,
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "left_curtain" => Some(ExperimentMarginals::LeftCurtain),
            "basket2d" => Some(ExperimentMarginals::Basket2d),
            "mixture1d" | "mixture" => Some(ExperimentMarginals::Mixture1d),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentMarginals::LeftCurtain => "left_curtain",
            ExperimentMarginals::Basket2d => "basket2d",
            ExperimentMarginals::Mixture1d => "mixture1d",
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ExperimentError {
    #[error("grid size must be at least 2, got {0}")]
    GridTooSmall(usize),
    #[error("cost requires dimension {required}, experiment has dimension {found}")]
    CostDimension { required: usize, found: usize },
    #[error("unknown experiment name '{0}'")]
    UnknownName(String),
}

fn regular_grid<S: Scalar>(n: usize) -> Vec<S> {
    let step = lit::<S>(2.0) / S::from_usize(n - 1).unwrap();
    (0..n).map(|i| lit::<S>(-1.0) + step * S::from_usize(i).unwrap()).collect()
}

fn normalized<S: Scalar>(mut w: Vec<S>) -> Vec<S> {
    let total: S = w.iter().copied().sum();
    for v in w.iter_mut() {
        *v = *v / total;
    }
    w
}

/// Uniform weights on the n-point grid over [-1, 1].
fn uniform_leg<S: Scalar>(n: usize) -> (Vec<Vec<S>>, Vec<S>) {
    let grid = regular_grid::<S>(n);
    let w = vec![S::one() / S::from_usize(n).unwrap(); n];
    (grid.into_iter().map(|g| vec![g]).collect(), w)
}

/// Weights proportional to |y|^1.5 on the same grid, zero-weight points
/// dropped (the measure does not charge them).
fn curtain_leg<S: Scalar>(n: usize) -> (Vec<Vec<S>>, Vec<S>) {
    let grid = regular_grid::<S>(n);
    let p = lit::<S>(1.5);
    let mut pts = Vec::new();
    let mut w = Vec::new();
    for g in grid {
        let weight = g.abs().powf(p);
        if weight > S::zero() {
            pts.push(vec![g]);
            w.push(weight);
        }
    }
    (pts, normalized(w))
}

/// Lognormal leg: the law of `exp(N(-s^2/2, s^2)) - 1` tabulated on an
/// n-point grid covering six standard deviations of log-space.
fn lognormal_leg<S: Scalar>(n: usize, sigma: f64) -> (Vec<Vec<S>>, Vec<S>) {
    let center = -0.5 * sigma * sigma;
    let lo = center - 6.0 * sigma;
    let hi = center + 6.0 * sigma;
    let step = (hi - lo) / (n - 1) as f64;
    let mut pts = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    for i in 0..n {
        let z = lo + step * i as f64;
        let dev = (z - center) / sigma;
        pts.push(vec![lit::<S>(z.exp() - 1.0)]);
        w.push(lit::<S>((-0.5 * dev * dev).exp()));
    }
    (pts, normalized(w))
}

/// Mixes two legs with equal mass, merging exactly coincident points.
fn mix<S: Scalar>(
    a: (Vec<Vec<S>>, Vec<S>),
    b: (Vec<Vec<S>>, Vec<S>),
) -> (Vec<Vec<S>>, Vec<S>) {
    let half = lit::<S>(0.5);
    let mut pts = a.0;
    let mut w: Vec<S> = a.1.into_iter().map(|v| v * half).collect();
    'outer: for (p, v) in b.0.into_iter().zip(b.1.into_iter()) {
        for (i, q) in pts.iter().enumerate() {
            if *q == p {
                w[i] += v * half;
                continue 'outer;
            }
        }
        pts.push(p);
        w.push(v * half);
    }
    (pts, w)
}

/// Builds the named experiment at grid size `n` with the given cost.
pub fn generate_instance<S: Scalar>(
    which: ExperimentMarginals,
    n: usize,
    cost: CostSpec<S>,
) -> Result<MotInstance<S>, ExperimentError> {
    if n < 2 {
        return Err(ExperimentError::GridTooSmall(n));
    }
    if let Some(required) = cost.required_dim() {
        if required != which.dim() {
            return Err(ExperimentError::CostDimension { required, found: which.dim() });
        }
    }
    let (mu, nu) = match which {
        ExperimentMarginals::LeftCurtain => {
            let (mp, mw) = uniform_leg::<S>(n);
            let (np, nw) = curtain_leg::<S>(n);
            (
                DiscreteMeasure::new(1, mp, mw).expect("uniform leg is a valid measure"),
                DiscreteMeasure::new(1, np, nw).expect("curtain leg is a valid measure"),
            )
        }
        ExperimentMarginals::Basket2d => {
            let grid = regular_grid::<S>(n);
            let mut mp = Vec::with_capacity(n * n);
            let uniform = S::one() / S::from_usize(n * n).unwrap();
            let p = lit::<S>(1.5);
            let mut np = Vec::new();
            let mut nw = Vec::new();
            for &g1 in &grid {
                for &g2 in &grid {
                    mp.push(vec![g1, g2]);
                    let weight = g1.abs().powf(p) + g2.abs().powf(p);
                    if weight > S::zero() {
                        np.push(vec![g1, g2]);
                        nw.push(weight);
                    }
                }
            }
            let mw = vec![uniform; n * n];
            (
                DiscreteMeasure::new(2, mp, mw).expect("uniform grid is a valid measure"),
                DiscreteMeasure::new(2, np, normalized(nw))
                    .expect("basket leg is a valid measure"),
            )
        }
        ExperimentMarginals::Mixture1d => {
            let (mp, mw) = mix(uniform_leg::<S>(n), lognormal_leg::<S>(n, 0.1));
            let (np, nw) = mix(curtain_leg::<S>(n), lognormal_leg::<S>(n, 0.2));
            (
                DiscreteMeasure::new(1, mp, mw).expect("mixture mu is a valid measure"),
                DiscreteMeasure::new(1, np, nw).expect("mixture nu is a valid measure"),
            )
        }
    };
    Ok(MotInstance::new(mu, nu, cost))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{check_convex_order_1d, validate_instance};

    #[test]
    fn left_curtain_is_valid_and_ordered() {
        for n in [10, 11, 25, 100] {
            let inst = generate_instance::<f64>(
                ExperimentMarginals::LeftCurtain,
                n,
                CostSpec::ForwardStartPower,
            )
            .unwrap();
            assert!(validate_instance(&inst).is_empty(), "n = {n}");
            assert_eq!(inst.mu.len(), n);
            let total: f64 = inst.nu.weights().iter().sum();
            assert!((total - 1.0).abs() <= 1e-12);
            let check = check_convex_order_1d(&inst.mu, &inst.nu, 1e-10).unwrap();
            assert!(check.ordered, "n = {n}: violation {}", check.worst_violation);
        }
    }

    #[test]
    fn basket_marginals_match_the_stated_grid() {
        let inst =
            generate_instance::<f64>(ExperimentMarginals::Basket2d, 10, CostSpec::Basket2d)
                .unwrap();
        assert!(validate_instance(&inst).is_empty());
        assert_eq!(inst.mu.len(), 100);
        assert_eq!(inst.nu.len(), 100); // even n keeps every point charged
        let total: f64 = inst.nu.weights().iter().sum();
        assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn odd_grid_drops_the_uncharged_center() {
        let inst = generate_instance::<f64>(
            ExperimentMarginals::LeftCurtain,
            11,
            CostSpec::ForwardStartPower,
        )
        .unwrap();
        assert_eq!(inst.nu.len(), 10); // y = 0 carries zero density
        let basket =
            generate_instance::<f64>(ExperimentMarginals::Basket2d, 11, CostSpec::Basket2d)
                .unwrap();
        assert_eq!(basket.nu.len(), 120); // only (0, 0) is uncharged
    }

    #[test]
    fn mixture_is_a_valid_measure_pair() {
        let inst = generate_instance::<f64>(
            ExperimentMarginals::Mixture1d,
            20,
            CostSpec::ForwardStartPower,
        )
        .unwrap();
        assert!(validate_instance(&inst).is_empty());
        // both sides mix two 20-point legs
        assert!(inst.mu.len() <= 40 && inst.mu.len() >= 39);
        let mean_mu = inst.mu.mean()[0];
        let mean_nu = inst.nu.mean()[0];
        // discretization leaves a small mean mismatch; repair handles it
        assert!(mean_mu.abs() < 1e-3);
        assert!(mean_nu.abs() < 1e-3);
    }

    #[test]
    fn grid_too_small_is_rejected() {
        assert!(matches!(
            generate_instance::<f64>(
                ExperimentMarginals::LeftCurtain,
                1,
                CostSpec::ForwardStartPower
            ),
            Err(ExperimentError::GridTooSmall(1))
        ));
    }

    #[test]
    fn cost_dimension_is_checked() {
        assert!(matches!(
            generate_instance::<f64>(ExperimentMarginals::Basket2d, 10, CostSpec::Oscillatory),
            Err(ExperimentError::CostDimension { required: 1, found: 2 })
        ));
    }
}
