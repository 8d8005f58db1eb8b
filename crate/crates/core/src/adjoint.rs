//! Costate sweeps and exact derivatives of an agent's local cost.
//!
//! The gradient comes from one backward costate sweep
//!
//! ```text
//! lambda(H) = sum_j D_ij e_ij(H) [+ E_i e_il(H)]
//! lambda(t) = sum_j Q_ij e_ij(t) [+ W_i e_il(t)] + A_t' lambda(t+1)
//! g(t)      = R_i u(t) + B_t' lambda(t+1)
//! ```
//!
//! and the Hessian column for control entry `(s, c)` from a forward
//! sensitivity pass seeded at stage `s` followed by a backward second-order
//! costate pass that picks up the `lambda . d2f` curvature of the dynamics.

use crate::cost::{LocalSlice, NeighborBundle};
use crate::cost::CostSpec;
use crate::dynamics::{self, ControlSequence, Dynamics, Matrix, StateTrajectory, Vector};
use crate::error::{Error, Result};

/// `lambda(t)` for `t = 0..=H`. Only `lambda(1..=H)` enter the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct CostateTrajectory {
    lambdas: Vec<Vector>,
}

impl CostateTrajectory {
    pub fn at(&self, t: usize) -> &Vector {
        &self.lambdas[t]
    }

    pub fn horizon(&self) -> usize {
        self.lambdas.len() - 1
    }

    pub fn all(&self) -> &[Vector] {
        &self.lambdas
    }
}

/// Everything one ACM pass produces for a control sequence.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub trajectory: StateTrajectory,
    pub costates: CostateTrajectory,
    pub cost: f64,
    pub gradient: Vector,
    pub hessian: Option<Matrix>,
}

/// One agent's finite-horizon problem with neighbor trajectories frozen.
#[derive(Debug, Clone)]
pub struct LocalProblem<'a> {
    pub agent: usize,
    pub model: &'a dyn Dynamics,
    pub spec: &'a CostSpec,
    pub neighbors: NeighborBundle<'a>,
    pub x0: Vector,
    /// Absolute time index of the window start.
    pub k0: usize,
    /// Difference Jacobians for curvature when the model has none.
    pub curvature_fallback: bool,
}

impl<'a> LocalProblem<'a> {
    pub fn new(
        agent: usize,
        model: &'a dyn Dynamics,
        spec: &'a CostSpec,
        neighbors: NeighborBundle<'a>,
        x0: Vector,
        k0: usize,
    ) -> Self {
        Self {
            agent,
            model,
            spec,
            neighbors,
            x0,
            k0,
            curvature_fallback: true,
        }
    }

    fn slice(&self, horizon: usize) -> Result<LocalSlice<'a, 'a>> {
        LocalSlice::resolve(self.agent, self.spec, &self.neighbors, horizon)
    }

    fn check(&self, traj: &StateTrajectory, u: &ControlSequence) -> Result<()> {
        if traj.horizon() != u.horizon() {
            return Err(Error::Argument(format!(
                "agent {}: trajectory horizon {} does not match {} controls",
                self.agent,
                traj.horizon(),
                u.horizon()
            )));
        }
        if u.control_dim() != self.model.control_dim() {
            return Err(Error::Argument(format!(
                "agent {}: controls have dim {}, model `{}` expects {}",
                self.agent,
                u.control_dim(),
                self.model.name(),
                self.model.control_dim()
            )));
        }
        Ok(())
    }

    pub fn rollout(&self, u: &ControlSequence) -> Result<StateTrajectory> {
        dynamics::rollout(self.model, &self.x0, u, self.k0)
    }

    pub fn cost(&self, u: &ControlSequence) -> Result<f64> {
        let traj = self.rollout(u)?;
        crate::cost::local_cost(self.agent, &traj, u, &self.neighbors, self.spec)
    }

    /// Backward costate sweep. Leader terms are included when the agent
    /// carries leader weights; a missing leader trajectory is an error then.
    pub fn costate_sweep(&self, traj: &StateTrajectory, u: &ControlSequence) -> Result<CostateTrajectory> {
        self.check(traj, u)?;
        let horizon = u.horizon();
        let slice = self.slice(horizon)?;
        let mut lambdas = vec![Vector::zeros(0); horizon + 1];
        lambdas[horizon] = slice.state_gradient(horizon, traj.state(horizon), true);
        for t in (0..horizon).rev() {
            let (ax, _) = dynamics::linearize(self.model, traj.state(t), u.control(t), self.k0 + t)?;
            lambdas[t] = slice.state_gradient(t, traj.state(t), false) + ax.transpose() * &lambdas[t + 1];
        }
        Ok(CostateTrajectory { lambdas })
    }

    /// Stationarity residual `R u(t) + B_t' lambda(t+1)`, stacked time-major.
    pub fn gradient(&self, traj: &StateTrajectory, u: &ControlSequence, lambda: &CostateTrajectory) -> Result<Vector> {
        self.check(traj, u)?;
        if lambda.horizon() != u.horizon() {
            return Err(Error::Argument("costates and controls have different horizons".into()));
        }
        let m = u.control_dim();
        let r = &self.spec.agent(self.agent).r;
        let mut g = Vector::zeros(u.horizon() * m);
        for t in 0..u.horizon() {
            let (_, bu) = dynamics::linearize(self.model, traj.state(t), u.control(t), self.k0 + t)?;
            let block = r * u.control(t) + bu.transpose() * lambda.at(t + 1);
            g.rows_mut(t * m, m).copy_from(&block);
        }
        Ok(g)
    }

    fn curvature(&self, x: &Vector, u: &Vector, k: usize, lambda: &Vector) -> Result<Matrix> {
        match self.model.curvature(x, u, k, lambda) {
            Some(c) => Ok(c),
            None if self.curvature_fallback => dynamics::second_order(self.model, x, u, k, lambda),
            None => Err(Error::Capability(format!(
                "model `{}` has no second-order information and differencing is disabled",
                self.model.name()
            ))),
        }
    }

    /// Exact Hessian before symmetrization.
    pub fn hessian_raw(&self, traj: &StateTrajectory, u: &ControlSequence, lambda: &CostateTrajectory) -> Result<Matrix> {
        self.check(traj, u)?;
        let horizon = u.horizon();
        let p = self.model.state_dim();
        let m = u.control_dim();
        let slice = self.slice(horizon)?;
        let r = slice.r();
        let stage_c = slice.state_curvature(p, false);
        let terminal_c = slice.state_curvature(p, true);

        let mut a = Vec::with_capacity(horizon);
        let mut b = Vec::with_capacity(horizon);
        let mut fxx = Vec::with_capacity(horizon);
        let mut fxu = Vec::with_capacity(horizon);
        let mut fuu = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let k = self.k0 + t;
            let (ax, bu) = dynamics::linearize(self.model, traj.state(t), u.control(t), k)?;
            let c = self.curvature(traj.state(t), u.control(t), k, lambda.at(t + 1))?;
            a.push(ax);
            b.push(bu);
            fxx.push(c.view((0, 0), (p, p)).into_owned());
            fxu.push(c.view((0, p), (p, m)).into_owned());
            fuu.push(c.view((p, p), (m, m)).into_owned());
        }

        let size = horizon * m;
        let mut hess = Matrix::zeros(size, size);
        let mut dx = vec![Vector::zeros(p); horizon + 1];
        for s in 0..horizon {
            for c in 0..m {
                let col = s * m + c;
                // forward sensitivity of the states to u_s[c]
                for v in dx.iter_mut().take(s + 1) {
                    v.fill(0.0);
                }
                dx[s + 1] = b[s].column(c).into_owned();
                for t in s + 1..horizon {
                    dx[t + 1] = &a[t] * &dx[t];
                }
                // backward second-order costates
                let mut dlam = &terminal_c * &dx[horizon];
                for t in (0..horizon).rev() {
                    let mut block = b[t].transpose() * &dlam + fxu[t].transpose() * &dx[t];
                    let mut next = &stage_c * &dx[t] + a[t].transpose() * &dlam + &fxx[t] * &dx[t];
                    if t == s {
                        block += r.column(c) + fuu[t].column(c);
                        next += fxu[t].column(c);
                    }
                    hess.view_mut((t * m, col), (m, 1)).copy_from(&block);
                    dlam = next;
                }
            }
        }
        Ok(hess)
    }

    /// Exact Hessian of the local cost, symmetrized. Rejects assemblies whose
    /// asymmetry exceeds `1e-8` relative, which would indicate inconsistent
    /// model derivatives.
    pub fn hessian(&self, traj: &StateTrajectory, u: &ControlSequence, lambda: &CostateTrajectory) -> Result<Matrix> {
        let raw = self.hessian_raw(traj, u, lambda)?;
        let asym = (&raw - raw.transpose()).norm();
        if asym > 1e-8 * raw.norm().max(1e-300) {
            return Err(Error::Numeric(format!(
                "agent {}: Hessian asymmetry {asym:e} exceeds tolerance",
                self.agent
            )));
        }
        if asym > 0.0 {
            Ok((&raw + raw.transpose()) * 0.5)
        } else {
            Ok(raw)
        }
    }

    /// Rollout, costates, cost, gradient and (optionally) Hessian at `u`.
    pub fn evaluate(&self, u: &ControlSequence, with_hessian: bool) -> Result<Evaluation> {
        let trajectory = self.rollout(u)?;
        let costates = self.costate_sweep(&trajectory, u)?;
        let cost = self.slice(u.horizon())?.value(&trajectory, u);
        let gradient = self.gradient(&trajectory, u, &costates)?;
        let hessian = if with_hessian {
            Some(self.hessian(&trajectory, u, &costates)?)
        } else {
            None
        };
        Ok(Evaluation {
            trajectory,
            costates,
            cost,
            gradient,
            hessian,
        })
    }

    /// Central differences of the local cost, step `h * (1 + |u_c|)`.
    pub fn fd_gradient(&self, u: &ControlSequence, h: f64) -> Result<Vector> {
        if !(h > 0.0) {
            return Err(Error::Argument(format!("finite-difference step must be positive, got {h}")));
        }
        let m = u.control_dim();
        let flat = u.flatten();
        let mut g = Vector::zeros(flat.len());
        for c in 0..flat.len() {
            let hc = h * (1.0 + flat[c].abs());
            let mut plus = flat.clone();
            let mut minus = flat.clone();
            plus[c] += hc;
            minus[c] -= hc;
            let jp = self.cost(&ControlSequence::from_flat(&plus, m)?)?;
            let jm = self.cost(&ControlSequence::from_flat(&minus, m)?)?;
            g[c] = (jp - jm) / (2.0 * hc);
        }
        Ok(g)
    }

    /// Central differences of the adjoint gradient, step `h * (1 + |u_c|)`.
    /// Not symmetrized.
    pub fn fd_hessian(&self, u: &ControlSequence, h: f64) -> Result<Matrix> {
        if !(h > 0.0) {
            return Err(Error::Argument(format!("finite-difference step must be positive, got {h}")));
        }
        let m = u.control_dim();
        let flat = u.flatten();
        let n = flat.len();
        let mut hess = Matrix::zeros(n, n);
        for c in 0..n {
            let hc = h * (1.0 + flat[c].abs());
            let mut plus = flat.clone();
            let mut minus = flat.clone();
            plus[c] += hc;
            minus[c] -= hc;
            let gp = self.evaluate(&ControlSequence::from_flat(&plus, m)?, false)?.gradient;
            let gm = self.evaluate(&ControlSequence::from_flat(&minus, m)?, false)?.gradient;
            hess.set_column(c, &((gp - gm) / (2.0 * hc)));
        }
        Ok(hess)
    }
}

/// Default oracle step for [`LocalProblem::fd_gradient`].
pub const FD_GRADIENT_STEP: f64 = 1e-6;
/// Default oracle step for [`LocalProblem::fd_hessian`].
pub const FD_HESSIAN_STEP: f64 = 1e-4;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{Linear, SineForcing, SineModel, Unicycle};
    use crate::graph::Topology;

    fn scalar(v: f64) -> Matrix {
        Matrix::from_element(1, 1, v)
    }

    struct Chain {
        model: Linear,
        spec: CostSpec,
        neighbor: StateTrajectory,
    }

    fn chain() -> Chain {
        let topo = Topology::from_pairs(2, &[(1, 2)]).unwrap();
        Chain {
            model: Linear::new(scalar(1.0), scalar(1.0)).unwrap(),
            spec: CostSpec::uniform(&topo, 1, 1, scalar(1.0), scalar(1.0), scalar(1.0), scalar(0.0), scalar(0.0)).unwrap(),
            neighbor: StateTrajectory::constant(&Vector::zeros(1), 1),
        }
    }

    impl Chain {
        fn problem(&self) -> LocalProblem<'_> {
            let nb = NeighborBundle::new([(2, &self.neighbor)], None).unwrap();
            LocalProblem::new(1, &self.model, &self.spec, nb, Vector::from_element(1, 1.0), 0)
        }
    }

    fn u1(v: f64) -> ControlSequence {
        ControlSequence::new(vec![Vector::from_element(1, v)]).unwrap()
    }

    #[test]
    fn scalar_chain_costates_by_hand() {
        let c = chain();
        let p = c.problem();
        let e = p.evaluate(&u1(0.0), true).unwrap();
        assert_eq!(e.costates.at(1)[0], 1.0);
        assert_eq!(e.costates.at(0)[0], 2.0);
        assert_eq!(e.gradient[0], 1.0);
        assert_eq!(e.hessian.unwrap()[(0, 0)], 2.0);
        let at_min = p.evaluate(&u1(-0.5), false).unwrap();
        assert_eq!(at_min.gradient[0], 0.0);
    }

    #[test]
    fn scalar_chain_oracles() {
        let c = chain();
        let p = c.problem();
        let g = p.fd_gradient(&u1(0.0), 1e-6).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-6);
        let h = p.fd_hessian(&u1(0.0), 1e-4).unwrap();
        assert!((h[(0, 0)] - 2.0).abs() < 1e-4);
        for step in [1e-2, 1e-3, 1e-5] {
            let g = p.fd_gradient(&u1(0.3), step).unwrap();
            assert!((g[0] - 1.6).abs() < 1e-9);
        }
        assert!(matches!(p.fd_gradient(&u1(0.0), 0.0), Err(Error::Argument(_))));
        assert!(matches!(p.fd_hessian(&u1(0.0), -1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn consensus_is_a_fixed_point() {
        let topo = Topology::complete(3).unwrap();
        let spec = CostSpec::uniform(&topo, 3, 2, Matrix::identity(3, 3) * 10.0, Matrix::identity(2, 2) * 0.1, Matrix::zeros(3, 3), Matrix::zeros(3, 3), Matrix::zeros(3, 3)).unwrap();
        let model = Unicycle { dt: 0.05 };
        let x0 = Vector::from_vec(vec![1.0, 2.0, 0.3]);
        let still = StateTrajectory::constant(&x0, 6);
        let nb = NeighborBundle::new([(2, &still), (3, &still)], None).unwrap();
        let p = LocalProblem::new(1, &model, &spec, nb, x0, 0);
        let e = p.evaluate(&ControlSequence::zeros(6, 2), true).unwrap();
        assert!(e.costates.all().iter().all(|l| l.iter().all(|&v| v == 0.0)));
        assert!(e.gradient.iter().all(|&v| v == 0.0));
        assert_eq!(e.cost, 0.0);
    }

    #[test]
    fn leader_mode_with_agent_on_leader_has_zero_costates() {
        let topo = Topology::new(2, [(2, 1, 1.0), (1, 2, 1.0)], [1]).unwrap();
        let mut spec = CostSpec::uniform(&topo, 2, 1, Matrix::identity(2, 2), scalar(1.0), Matrix::zeros(2, 2), Matrix::identity(2, 2) * 80.0, Matrix::zeros(2, 2)).unwrap();
        spec = spec.scaled(1.0);
        let (a, b) = crate::dynamics::sine_benchmark_matrices();
        let model = SineModel::new(a, b, 0.01, SineForcing::ScalarSum, None).unwrap();
        let x0 = Vector::zeros(2);
        let leader = StateTrajectory::constant(&x0, 4);
        let nb = NeighborBundle::new([(2, &leader)], Some(&leader)).unwrap();
        let p = LocalProblem::new(1, &model, &spec, nb, x0, 0);
        let e = p.evaluate(&ControlSequence::zeros(4, 1), false).unwrap();
        assert!(e.costates.all().iter().all(|l| l.norm() == 0.0));
    }

    #[test]
    fn pure_control_penalty_gives_identity_hessian() {
        let topo = Topology::complete(2).unwrap();
        let spec = CostSpec::uniform(&topo, 2, 2, Matrix::zeros(2, 2), Matrix::identity(2, 2), Matrix::zeros(2, 2), Matrix::zeros(2, 2), Matrix::zeros(2, 2)).unwrap();
        let model = Linear::new(Matrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]), Matrix::identity(2, 2)).unwrap();
        let other = StateTrajectory::constant(&Vector::from_vec(vec![5.0, -1.0]), 5);
        let nb = NeighborBundle::new([(2, &other)], None).unwrap();
        let p = LocalProblem::new(1, &model, &spec, nb, Vector::zeros(2), 0);
        let u = ControlSequence::new((0..5).map(|t| Vector::from_vec(vec![t as f64, -1.0])).collect()).unwrap();
        let h = p.evaluate(&u, true).unwrap().hessian.unwrap();
        assert_eq!(h, Matrix::identity(10, 10));
    }

    #[test]
    fn linear_quadratic_hessian_is_constant() {
        let topo = Topology::complete(2).unwrap();
        let spec = CostSpec::uniform(&topo, 2, 1, Matrix::identity(2, 2) * 3.0, scalar(0.2), Matrix::identity(2, 2), Matrix::zeros(2, 2), Matrix::zeros(2, 2)).unwrap();
        let model = Linear::new(Matrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]), Matrix::from_row_slice(2, 1, &[0.005, 0.1])).unwrap();
        let other = StateTrajectory::constant(&Vector::from_vec(vec![1.0, 0.0]), 6);
        let nb = NeighborBundle::new([(2, &other)], None).unwrap();
        let p = LocalProblem::new(1, &model, &spec, nb, Vector::zeros(2), 0);
        let ua = ControlSequence::from_flat(&Vector::from_fn(6, |i, _| (i as f64).sin()), 1).unwrap();
        let ub = ControlSequence::from_flat(&Vector::from_fn(6, |i, _| 3.0 * (i as f64).cos()), 1).unwrap();
        let ha = p.evaluate(&ua, true).unwrap().hessian.unwrap();
        let hb = p.evaluate(&ub, true).unwrap().hessian.unwrap();
        assert!((&ha - &hb).norm() < 1e-12);
    }

    #[derive(Debug)]
    struct FirstOrderOnly(Unicycle);

    impl Dynamics for FirstOrderOnly {
        fn name(&self) -> &str {
            "first-order-only"
        }
        fn state_dim(&self) -> usize {
            3
        }
        fn control_dim(&self) -> usize {
            2
        }
        fn eval(&self, x: &Vector, u: &Vector, k: usize) -> Vector {
            self.0.eval(x, u, k)
        }
    }

    #[test]
    fn hessian_without_curvature_needs_fallback() {
        let topo = Topology::complete(2).unwrap();
        let spec = CostSpec::uniform(&topo, 3, 2, Matrix::identity(3, 3), Matrix::identity(2, 2), Matrix::zeros(3, 3), Matrix::zeros(3, 3), Matrix::zeros(3, 3)).unwrap();
        let model = FirstOrderOnly(Unicycle { dt: 0.1 });
        let other = StateTrajectory::constant(&Vector::from_vec(vec![1.0, 1.0, 0.0]), 3);
        let nb = NeighborBundle::new([(2, &other)], None).unwrap();
        let mut p = LocalProblem::new(1, &model, &spec, nb, Vector::zeros(3), 0);
        let u = ControlSequence::new(vec![Vector::from_vec(vec![1.0, 0.5]); 3]).unwrap();
        let fallback = p.evaluate(&u, true).unwrap().hessian.unwrap();
        let fd = p.fd_hessian(&u, FD_HESSIAN_STEP).unwrap();
        assert!((&fallback - &fd).norm() < 1e-4 * (1.0 + fd.norm()));
        p.curvature_fallback = false;
        assert!(matches!(p.evaluate(&u, true), Err(Error::Capability(_))));
    }
}
