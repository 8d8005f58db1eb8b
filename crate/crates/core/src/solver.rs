//! The OCP update and its first-order baseline.
//!
//! One outer iteration computes the gradient `g` and Hessian `H` of the local
//! cost, then refines the regularized Newton direction with the inner
//! recursion
//!
//! ```text
//! d0 = (G + H)^-1 g
//! dl = (G + H)^-1 (g + G d(l-1)),   l = 1..min(r, L_max)
//! ```
//!
//! where `r` is the outer iteration counter and `G = c I`. The recursion is a
//! truncated geometric series converging to the Newton step `H^-1 g`, which
//! is what gives the update its superlinear rate.

use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};

use crate::adjoint::LocalProblem;
use crate::dynamics::{ControlSequence, Matrix, Vector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ocp,
    Msa,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ocp" => Ok(Method::Ocp),
            "msa" => Ok(Method::Msa),
            other => Err(Error::Argument(format!("unknown method `{other}` (expected ocp or msa)"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Ocp => "ocp",
            Method::Msa => "msa",
        })
    }
}

/// Which residual ends an iteration loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopRule {
    /// Stop once `||grad J|| < eps_grad` (finite-horizon mode).
    Gradient,
    /// Stop once `||u(r+1) - u(r)|| < eps_step` (receding-horizon mode).
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub method: Method,
    /// `G = c I`.
    pub c: f64,
    pub l_max: usize,
    pub eps_grad: f64,
    pub eps_step: f64,
    pub max_outer: usize,
    /// Smallest eigenvalue the Hessian is shifted up to before forming `G + H`.
    pub reg_floor: f64,
    /// Initial step of the gradient baseline.
    pub msa_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Ocp,
            c: 1.0,
            l_max: 10,
            eps_grad: 1e-6,
            eps_step: 1e-6,
            max_outer: 100,
            reg_floor: 1e-8,
            msa_step: 0.1,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if !(self.c > 0.0) {
            errors.push(format!("solver.c must be positive, got {}", self.c));
        }
        if !(self.eps_grad > 0.0) || !(self.eps_step > 0.0) {
            errors.push("solver tolerances must be positive".to_string());
        }
        if self.max_outer == 0 {
            errors.push("solver.max_outer must be at least 1".to_string());
        }
        if !(self.reg_floor > 0.0) {
            errors.push(format!("solver.reg_floor must be positive, got {}", self.reg_floor));
        }
        if !(self.msa_step > 0.0) {
            errors.push(format!("solver.msa_step must be positive, got {}", self.msa_step));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn g_matrix(&self, dim: usize) -> Matrix {
        Matrix::identity(dim, dim) * self.c
    }

    /// Inner-loop length at outer iteration `r`.
    pub fn inner_iterations(&self, r: usize) -> usize {
        r.min(self.l_max)
    }
}

/// Shifts `hess` so its smallest eigenvalue is at least `floor`.
/// Returns the shift applied (zero when none was needed).
pub fn regularize(hess: &mut Matrix, floor: f64) -> f64 {
    if hess.nrows() == 0 {
        return 0.0;
    }
    let lo = hess.clone().symmetric_eigenvalues().min();
    if lo < floor {
        let shift = floor - lo;
        for k in 0..hess.nrows() {
            hess[(k, k)] += shift;
        }
        shift
    } else {
        0.0
    }
}

/// The factorized `G + H` the inner recursion reuses.
pub struct OcpStep {
    factor: Cholesky<f64, nalgebra::Dyn>,
    g_mat: Matrix,
}

impl OcpStep {
    pub fn new(hess: &Matrix, g_mat: &Matrix) -> Result<Self> {
        if hess.shape() != g_mat.shape() || !hess.is_square() {
            return Err(Error::Argument(format!(
                "Hessian is {:?} but G is {:?}",
                hess.shape(),
                g_mat.shape()
            )));
        }
        let factor = (g_mat + hess)
            .cholesky()
            .ok_or_else(|| Error::Numeric("G + H is not positive definite".into()))?;
        Ok(Self {
            factor,
            g_mat: g_mat.clone(),
        })
    }

    /// `d^l` after `inner` refinements of `d^0`.
    pub fn direction(&self, g: &Vector, inner: usize) -> Vector {
        let mut d = self.factor.solve(g);
        for _ in 0..inner {
            d = self.factor.solve(&(g + &self.g_mat * &d));
        }
        d
    }
}

/// `d^r` of the OCP recursion for an already-regularized Hessian.
pub fn ocp_direction(g: &Vector, hess: &Matrix, g_mat: &Matrix, inner: usize) -> Result<Vector> {
    if g.len() != hess.nrows() {
        return Err(Error::Argument(format!(
            "gradient has dim {}, Hessian is {}x{}",
            g.len(),
            hess.nrows(),
            hess.ncols()
        )));
    }
    let step = OcpStep::new(hess, g_mat)?;
    let d = step.direction(g, inner);
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("OCP direction is not finite".into()));
    }
    Ok(d)
}

/// Spectral radius of `(G + H)^-1 G`. Requires `H` and `G` positive definite;
/// the result then lies in `(0, 1)`.
pub fn contraction_factor(hess: &Matrix, g_mat: &Matrix) -> Result<f64> {
    if hess.shape() != g_mat.shape() || !hess.is_square() {
        return Err(Error::Argument("Hessian and G must be square and of equal size".into()));
    }
    if hess.clone().cholesky().is_none() {
        return Err(Error::Precondition("Hessian is not positive definite".into()));
    }
    if g_mat.clone().cholesky().is_none() {
        return Err(Error::Precondition("G is not positive definite".into()));
    }
    let m = (g_mat + hess)
        .lu()
        .solve(g_mat)
        .ok_or_else(|| Error::Numeric("G + H is singular".into()))?;
    let rho = m
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    Ok(rho)
}

/// Outcome of a single-agent solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub controls: ControlSequence,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
    /// The gradient baseline's step fell below `1e-15`.
    pub stagnated: bool,
}

/// Runs the OCP update on one agent with neighbors frozen.
pub fn ocp_solve(problem: &LocalProblem<'_>, u0: &ControlSequence, cfg: &SolverConfig, stop: StopRule) -> Result<SolveReport> {
    let m = u0.control_dim();
    let mut u = u0.clone();
    let g_mat = cfg.g_matrix(u.horizon() * m);
    for r in 0..cfg.max_outer {
        let eval = problem.evaluate(&u, true)?;
        let gnorm = eval.gradient.norm();
        if gnorm < cfg.eps_grad {
            return Ok(SolveReport {
                controls: u,
                iterations: r,
                gradient_norm: gnorm,
                converged: true,
                stagnated: false,
            });
        }
        let mut hess = eval.hessian.expect("requested");
        regularize(&mut hess, cfg.reg_floor);
        let d = ocp_direction(&eval.gradient, &hess, &g_mat, cfg.inner_iterations(r))
            .map_err(|e| e.context(format_args!("agent {} iteration {r}", problem.agent)))?;
        u = ControlSequence::from_flat(&(u.flatten() - &d), m)?;
        if stop == StopRule::Step && d.norm() < cfg.eps_step {
            let gnorm = problem.evaluate(&u, false)?.gradient.norm();
            return Ok(SolveReport {
                controls: u,
                iterations: r + 1,
                gradient_norm: gnorm,
                converged: true,
                stagnated: false,
            });
        }
    }
    let gnorm = problem.evaluate(&u, false)?.gradient.norm();
    Ok(SolveReport {
        controls: u,
        iterations: cfg.max_outer,
        gradient_norm: gnorm,
        converged: stop == StopRule::Gradient && gnorm < cfg.eps_grad,
        stagnated: false,
    })
}

/// Halves the step until the agent's own cost does not increase. Shared by
/// [`msa_solve`] and the coordinator's baseline rounds. Returns the accepted
/// step vector and the (possibly reduced) step size, or `None` once the step
/// collapses below `1e-15`.
pub(crate) fn backtracking_step(
    problem: &LocalProblem<'_>,
    u: &ControlSequence,
    cost: f64,
    gradient: &Vector,
    mut eta: f64,
) -> Result<Option<(Vector, f64)>> {
    let m = u.control_dim();
    let flat = u.flatten();
    while eta >= 1e-15 {
        let d = gradient * eta;
        let trial = ControlSequence::from_flat(&(&flat - &d), m)?;
        let value = problem.cost(&trial)?;
        // a few ulps of slack so rounding near the optimum is not read as an increase
        if value <= cost + 4.0 * f64::EPSILON * cost.abs() {
            return Ok(Some((d, eta)));
        }
        eta *= 0.5;
    }
    Ok(None)
}

/// Gradient descent `u <- u - eta grad J` with backtracking on cost increase.
/// Every iteration starts from the configured step `msa_step`.
pub fn msa_solve(problem: &LocalProblem<'_>, u0: &ControlSequence, cfg: &SolverConfig, stop: StopRule) -> Result<SolveReport> {
    let m = u0.control_dim();
    let mut u = u0.clone();
    for r in 0..cfg.max_outer {
        let eval = problem.evaluate(&u, false)?;
        let gnorm = eval.gradient.norm();
        if gnorm < cfg.eps_grad {
            return Ok(SolveReport {
                controls: u,
                iterations: r,
                gradient_norm: gnorm,
                converged: true,
                stagnated: false,
            });
        }
        let Some((d, _)) = backtracking_step(problem, &u, eval.cost, &eval.gradient, cfg.msa_step)? else {
            return Ok(SolveReport {
                controls: u,
                iterations: r,
                gradient_norm: gnorm,
                converged: false,
                stagnated: true,
            });
        };
        u = ControlSequence::from_flat(&(u.flatten() - &d), m)?;
        if stop == StopRule::Step && d.norm() < cfg.eps_step {
            let gnorm = problem.evaluate(&u, false)?.gradient.norm();
            return Ok(SolveReport {
                controls: u,
                iterations: r + 1,
                gradient_norm: gnorm,
                converged: true,
                stagnated: false,
            });
        }
    }
    let gnorm = problem.evaluate(&u, false)?.gradient.norm();
    Ok(SolveReport {
        controls: u,
        iterations: cfg.max_outer,
        gradient_norm: gnorm,
        converged: stop == StopRule::Gradient && gnorm < cfg.eps_grad,
        stagnated: false,
    })
}

/// Dispatches on `cfg.method`.
pub fn solve(problem: &LocalProblem<'_>, u0: &ControlSequence, cfg: &SolverConfig, stop: StopRule) -> Result<SolveReport> {
    match cfg.method {
        Method::Ocp => ocp_solve(problem, u0, cfg, stop),
        Method::Msa => msa_solve(problem, u0, cfg, stop),
    }
}
