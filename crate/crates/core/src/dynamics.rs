//! Agent dynamics `x(k+1) = f(x(k), u(k), k)`, Jacobians, trajectory rollout,
//! and the built-in models.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Discrete-time agent dynamics.
///
/// Only `eval` is mandatory. Models without analytic Jacobians fall back to
/// central differences, and models without analytic curvature fall back to
/// differencing their Jacobians.
pub trait Dynamics: fmt::Debug + Send + Sync {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;

    /// Raw transition. Inputs are assumed dimension-checked.
    fn eval(&self, x: &Vector, u: &Vector, k: usize) -> Vector;

    /// Analytic `(df/dx, df/du)`.
    fn jacobians(&self, _x: &Vector, _u: &Vector, _k: usize) -> Option<(Matrix, Matrix)> {
        None
    }

    /// Analytic second-order action: the `(p+m) x (p+m)` Hessian of the
    /// scalar `lambda . f(x, u, k)` with respect to `z = (x, u)`.
    fn curvature(&self, _x: &Vector, _u: &Vector, _k: usize, _lambda: &Vector) -> Option<Matrix> {
        None
    }
}

fn check_dims(model: &dyn Dynamics, x: &Vector, u: &Vector) -> Result<()> {
    if x.len() != model.state_dim() || u.len() != model.control_dim() {
        return Err(Error::Argument(format!(
            "model `{}` expects state dim {} and control dim {}, got {} and {}",
            model.name(),
            model.state_dim(),
            model.control_dim(),
            x.len(),
            u.len()
        )));
    }
    Ok(())
}

/// One transition with dimension and finiteness checks.
pub fn step(model: &dyn Dynamics, x: &Vector, u: &Vector, k: usize) -> Result<Vector> {
    check_dims(model, x, u)?;
    let next = model.eval(x, u, k);
    if next.len() != model.state_dim() {
        return Err(Error::Internal(format!(
            "model `{}` returned a state of dim {} instead of {}",
            model.name(),
            next.len(),
            model.state_dim()
        )));
    }
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "model `{}` produced a non-finite state at k={k}",
            model.name()
        )));
    }
    Ok(next)
}

/// `(df/dx, df/du)` at `(x, u, k)`; analytic when the model provides it.
pub fn linearize(model: &dyn Dynamics, x: &Vector, u: &Vector, k: usize) -> Result<(Matrix, Matrix)> {
    check_dims(model, x, u)?;
    match model.jacobians(x, u, k) {
        Some(j) => Ok(j),
        None => fd_jacobian(model, x, u, k, 1e-6),
    }
}

/// Central-difference Jacobians with per-component step `h * (1 + |z_c|)`.
pub fn fd_jacobian(
    model: &dyn Dynamics,
    x: &Vector,
    u: &Vector,
    k: usize,
    h: f64,
) -> Result<(Matrix, Matrix)> {
    if !(h > 0.0) {
        return Err(Error::Argument(format!("finite-difference step must be positive, got {h}")));
    }
    check_dims(model, x, u)?;
    let p = x.len();
    let m = u.len();
    let mut jx = Matrix::zeros(p, p);
    let mut ju = Matrix::zeros(p, m);
    for c in 0..p {
        let hc = h * (1.0 + x[c].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[c] += hc;
        xm[c] -= hc;
        let col = (step(model, &xp, u, k)? - step(model, &xm, u, k)?) / (2.0 * hc);
        jx.set_column(c, &col);
    }
    for c in 0..m {
        let hc = h * (1.0 + u[c].abs());
        let mut up = u.clone();
        let mut um = u.clone();
        up[c] += hc;
        um[c] -= hc;
        let col = (step(model, x, &up, k)? - step(model, x, &um, k)?) / (2.0 * hc);
        ju.set_column(c, &col);
    }
    Ok((jx, ju))
}

/// Hessian of `lambda . f` with respect to `(x, u)`. Falls back to central
/// differences of the Jacobians with step `1e-5 * (1 + |z_c|)`.
pub fn second_order(
    model: &dyn Dynamics,
    x: &Vector,
    u: &Vector,
    k: usize,
    lambda: &Vector,
) -> Result<Matrix> {
    check_dims(model, x, u)?;
    if lambda.len() != x.len() {
        return Err(Error::Argument(format!(
            "costate has dim {}, state has dim {}",
            lambda.len(),
            x.len()
        )));
    }
    if let Some(c) = model.curvature(x, u, k, lambda) {
        return Ok(c);
    }
    let p = x.len();
    let m = u.len();
    let weighted_row = |x: &Vector, u: &Vector| -> Result<Vector> {
        let (jx, ju) = linearize(model, x, u, k)?;
        let mut row = Vector::zeros(p + m);
        row.rows_mut(0, p).copy_from(&(jx.transpose() * lambda));
        row.rows_mut(p, m).copy_from(&(ju.transpose() * lambda));
        Ok(row)
    };
    let mut out = Matrix::zeros(p + m, p + m);
    for c in 0..p + m {
        let (mut xp, mut xm, mut up, mut um) = (x.clone(), x.clone(), u.clone(), u.clone());
        let hc;
        if c < p {
            hc = 1e-5 * (1.0 + x[c].abs());
            xp[c] += hc;
            xm[c] -= hc;
        } else {
            hc = 1e-5 * (1.0 + u[c - p].abs());
            up[c - p] += hc;
            um[c - p] -= hc;
        }
        let col = (weighted_row(&xp, &up)? - weighted_row(&xm, &um)?) / (2.0 * hc);
        out.set_column(c, &col);
    }
    Ok((&out + out.transpose()) * 0.5)
}

/// `H + 1` states produced by `H` controls.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTrajectory {
    states: Vec<Vector>,
}

impl StateTrajectory {
    pub fn new(states: Vec<Vector>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::Argument("a trajectory needs at least one state".into()));
        }
        if states.iter().flat_map(|s| s.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("trajectory contains non-finite entries".into()));
        }
        Ok(Self { states })
    }

    /// A trajectory that sits at `x` for `horizon` steps.
    pub fn constant(x: &Vector, horizon: usize) -> Self {
        Self {
            states: vec![x.clone(); horizon + 1],
        }
    }

    /// Number of transitions (`len - 1`).
    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }

    pub fn state(&self, t: usize) -> &Vector {
        &self.states[t]
    }

    pub fn states(&self) -> &[Vector] {
        &self.states
    }

    pub fn last(&self) -> &Vector {
        self.states.last().expect("non-empty by construction")
    }
}

/// `H` control vectors; flattening is time-major (`u(0)` first).
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSequence {
    controls: Vec<Vector>,
}

impl ControlSequence {
    pub fn new(controls: Vec<Vector>) -> Result<Self> {
        if controls.is_empty() {
            return Err(Error::Argument("a control sequence needs at least one control".into()));
        }
        let m = controls[0].len();
        if controls.iter().any(|c| c.len() != m) {
            return Err(Error::Argument("controls have inconsistent dimensions".into()));
        }
        Ok(Self { controls })
    }

    pub fn zeros(horizon: usize, control_dim: usize) -> Self {
        Self {
            controls: vec![Vector::zeros(control_dim); horizon],
        }
    }

    pub fn from_flat(flat: &Vector, control_dim: usize) -> Result<Self> {
        if control_dim == 0 || flat.len() % control_dim != 0 || flat.is_empty() {
            return Err(Error::Argument(format!(
                "cannot split a vector of length {} into controls of dim {control_dim}",
                flat.len()
            )));
        }
        let controls = flat
            .as_slice()
            .chunks(control_dim)
            .map(Vector::from_column_slice)
            .collect();
        Ok(Self { controls })
    }

    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn control_dim(&self) -> usize {
        self.controls[0].len()
    }

    pub fn control(&self, t: usize) -> &Vector {
        &self.controls[t]
    }

    pub fn controls(&self) -> &[Vector] {
        &self.controls
    }

    pub fn flatten(&self) -> Vector {
        let m = self.control_dim();
        let mut out = Vector::zeros(self.horizon() * m);
        for (t, c) in self.controls.iter().enumerate() {
            out.rows_mut(t * m, m).copy_from(c);
        }
        out
    }

    /// Drop the first control and append zeros: the warm start of the next window.
    pub fn shifted(&self) -> Self {
        let m = self.control_dim();
        let mut controls: Vec<Vector> = self.controls[1..].to_vec();
        controls.push(Vector::zeros(m));
        Self { controls }
    }
}

/// States `x(0) = x0`, `x(t+1) = f(x(t), u(t), k0 + t)`.
pub fn rollout(
    model: &dyn Dynamics,
    x0: &Vector,
    u: &ControlSequence,
    k0: usize,
) -> Result<StateTrajectory> {
    let mut states = Vec::with_capacity(u.horizon() + 1);
    states.push(x0.clone());
    for (t, ut) in u.controls().iter().enumerate() {
        let next = step(model, &states[t], ut, k0 + t)
            .map_err(|e| e.context(format_args!("rollout step {t}")))?;
        states.push(next);
    }
    Ok(StateTrajectory { states })
}

/// Forward-Euler unicycle: state `(x, y, theta)`, control `(v, omega)`.
/// The heading is not wrapped.
#[derive(Debug, Clone, PartialEq)]
pub struct Unicycle {
    pub dt: f64,
}

impl Dynamics for Unicycle {
    fn name(&self) -> &str {
        "unicycle"
    }
    fn state_dim(&self) -> usize {
        3
    }
    fn control_dim(&self) -> usize {
        2
    }

    fn eval(&self, x: &Vector, u: &Vector, _k: usize) -> Vector {
        let (v, w, th) = (u[0], u[1], x[2]);
        Vector::from_vec(vec![
            x[0] + self.dt * v * th.cos(),
            x[1] + self.dt * v * th.sin(),
            th + self.dt * w,
        ])
    }

    fn jacobians(&self, x: &Vector, u: &Vector, _k: usize) -> Option<(Matrix, Matrix)> {
        let (v, th, dt) = (u[0], x[2], self.dt);
        let (s, c) = th.sin_cos();
        let jx = Matrix::from_row_slice(3, 3, &[1.0, 0.0, -dt * v * s, 0.0, 1.0, dt * v * c, 0.0, 0.0, 1.0]);
        let ju = Matrix::from_row_slice(3, 2, &[dt * c, 0.0, dt * s, 0.0, 0.0, dt]);
        Some((jx, ju))
    }

    fn curvature(&self, x: &Vector, u: &Vector, _k: usize, lambda: &Vector) -> Option<Matrix> {
        // z = (x, y, theta, v, omega); only theta-theta and theta-v couple.
        let (v, th, dt) = (u[0], x[2], self.dt);
        let (s, c) = th.sin_cos();
        let mut h = Matrix::zeros(5, 5);
        h[(2, 2)] = -dt * v * (c * lambda[0] + s * lambda[1]);
        let cross = dt * (-s * lambda[0] + c * lambda[1]);
        h[(2, 3)] = cross;
        h[(3, 2)] = cross;
        Some(h)
    }
}

/// `x+ = A x + B u`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub a: Matrix,
    pub b: Matrix,
}

impl Linear {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        if !a.is_square() || b.nrows() != a.nrows() || b.ncols() == 0 {
            return Err(Error::Argument(format!(
                "linear model needs square A and B with matching rows, got {}x{} and {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        Ok(Self { a, b })
    }
}

impl Dynamics for Linear {
    fn name(&self) -> &str {
        "linear"
    }
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn control_dim(&self) -> usize {
        self.b.ncols()
    }
    fn eval(&self, x: &Vector, u: &Vector, _k: usize) -> Vector {
        &self.a * x + &self.b * u
    }
    fn jacobians(&self, _x: &Vector, _u: &Vector, _k: usize) -> Option<(Matrix, Matrix)> {
        Some((self.a.clone(), self.b.clone()))
    }
    fn curvature(&self, x: &Vector, u: &Vector, _k: usize, _lambda: &Vector) -> Option<Matrix> {
        let n = x.len() + u.len();
        Some(Matrix::zeros(n, n))
    }
}

/// How the sine nonlinearity `amp * sin(x)` enters a single-input model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SineForcing {
    /// `x+ = A x + B (u + amp * sum_j sin x_j)`: the 2-vector is scalarized
    /// so it shares the input channel.
    ScalarSum,
    /// `x+ = A x + B u + diag(B) amp * sin(x)`: the input column doubles as
    /// a diagonal gain on the elementwise sine.
    DiagB,
}

/// Exogenous input `amp * sin(freq * k)` added to the control channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeForcing {
    pub amplitude: f64,
    pub frequency: f64,
}

/// Single-input linear model with a sine nonlinearity, optionally driven by a
/// time-varying forcing term (the leader variant).
#[derive(Debug, Clone, PartialEq)]
pub struct SineModel {
    a: Matrix,
    b: Vector,
    amplitude: f64,
    mode: SineForcing,
    forcing: Option<TimeForcing>,
    name: &'static str,
}

impl SineModel {
    pub fn new(
        a: Matrix,
        b: Vector,
        amplitude: f64,
        mode: SineForcing,
        forcing: Option<TimeForcing>,
    ) -> Result<Self> {
        if !a.is_square() || b.len() != a.nrows() {
            return Err(Error::Argument(format!(
                "sine model needs square A and a B column of matching length, got {}x{} and {}",
                a.nrows(),
                a.ncols(),
                b.len()
            )));
        }
        let name = if forcing.is_some() { "leader_sine" } else { "linear_sine" };
        Ok(Self {
            a,
            b,
            amplitude,
            mode,
            forcing,
            name,
        })
    }

    fn exogenous(&self, k: usize) -> f64 {
        self.forcing
            .map(|f| f.amplitude * (f.frequency * k as f64).sin())
            .unwrap_or(0.0)
    }
}

impl Dynamics for SineModel {
    fn name(&self) -> &str {
        self.name
    }
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn control_dim(&self) -> usize {
        1
    }

    fn eval(&self, x: &Vector, u: &Vector, k: usize) -> Vector {
        let drive = u[0] + self.exogenous(k);
        match self.mode {
            SineForcing::ScalarSum => {
                let s: f64 = x.iter().map(|v| v.sin()).sum();
                &self.a * x + &self.b * (drive + self.amplitude * s)
            }
            SineForcing::DiagB => {
                let sine = x.map(|v| self.amplitude * v.sin());
                &self.a * x + &self.b * drive + self.b.component_mul(&sine)
            }
        }
    }

    fn jacobians(&self, x: &Vector, _u: &Vector, _k: usize) -> Option<(Matrix, Matrix)> {
        let cos = x.map(|v| self.amplitude * v.cos());
        let jx = match self.mode {
            SineForcing::ScalarSum => &self.a + &self.b * cos.transpose(),
            SineForcing::DiagB => &self.a + Matrix::from_diagonal(&self.b.component_mul(&cos)),
        };
        let ju = Matrix::from_column_slice(self.b.len(), 1, self.b.as_slice());
        Some((jx, ju))
    }

    fn curvature(&self, x: &Vector, _u: &Vector, _k: usize, lambda: &Vector) -> Option<Matrix> {
        let p = x.len();
        let mut h = Matrix::zeros(p + 1, p + 1);
        match self.mode {
            SineForcing::ScalarSum => {
                let lb = lambda.dot(&self.b);
                for j in 0..p {
                    h[(j, j)] = -lb * self.amplitude * x[j].sin();
                }
            }
            SineForcing::DiagB => {
                for j in 0..p {
                    h[(j, j)] = -lambda[j] * self.b[j] * self.amplitude * x[j].sin();
                }
            }
        }
        Some(h)
    }
}

/// System matrices shared by the follower and leader sine models.
pub fn sine_benchmark_matrices() -> (Matrix, Vector) {
    (
        Matrix::from_row_slice(2, 2, &[0.898, 0.056, 0.968, -0.084]),
        Vector::from_vec(vec![0.87, -1.8]),
    )
}
