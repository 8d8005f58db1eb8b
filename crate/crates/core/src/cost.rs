//! Quadratic consensus costs.
//!
//! Agent `i` owns the slice of the global cost whose outer index is `i`:
//!
//! ```text
//! J_i = 1/2 sum_{t<H} [ sum_{j in N_i} e_ij' Q_ij e_ij + e_il' W_i e_il + u_i' R_i u_i ]
//!     + 1/2 [ sum_{j in N_i} e_ij(H)' D_ij e_ij(H) + e_il(H)' E_i e_il(H) ]
//! ```
//!
//! with `e_ij = (x_i - d_i) - (x_j - d_j)` and `e_il = (x_i - d_i) - x_l`,
//! where `d_i` is the formation offset. The leading `1/2` makes the costate
//! recursion read `Q_ij e_ij` with no factor of two.
//!
//! Components listed as wrapped (angles such as a unicycle heading) have
//! their error mapped to `(-pi, pi]` before weighting.

use std::collections::BTreeMap;

use crate::dynamics::{ControlSequence, Matrix, StateTrajectory, Vector};
use crate::error::{Error, Result};
use crate::graph::Topology;

const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeWeights {
    pub q: Matrix,
    /// Terminal weight.
    pub d: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentWeights {
    pub r: Matrix,
    /// Leader tracking weight; present exactly for leader-linked agents.
    pub w: Option<Matrix>,
    /// Terminal leader tracking weight.
    pub e: Option<Matrix>,
    pub offset: Vector,
}

/// Validated weights for every edge and agent of a topology.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    edges: BTreeMap<(usize, usize), EdgeWeights>,
    agents: Vec<AgentWeights>,
    wrapped: Vec<usize>,
}

/// `a` mapped to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.sin().atan2(a.cos());
    if w == -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        w
    }
}

fn symmetrize(name: &str, m: &Matrix, dim: usize, errors: &mut Vec<String>) -> Matrix {
    if m.nrows() != dim || m.ncols() != dim {
        errors.push(format!("{name} is {}x{}, expected {dim}x{dim}", m.nrows(), m.ncols()));
        return Matrix::zeros(dim, dim);
    }
    if m.iter().any(|v| !v.is_finite()) {
        errors.push(format!("{name} has non-finite entries"));
        return Matrix::zeros(dim, dim);
    }
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOL {
        errors.push(format!("{name} is not symmetric (max asymmetry {asym:e})"));
    }
    (m + m.transpose()) * 0.5
}

fn min_eigenvalue(m: &Matrix) -> f64 {
    m.clone().symmetric_eigenvalues().min()
}

fn check_psd(name: &str, m: &Matrix, errors: &mut Vec<String>) {
    if m.nrows() == 0 {
        return;
    }
    let lo = min_eigenvalue(m);
    if lo < -SYMMETRY_TOL * (1.0 + m.amax()) {
        errors.push(format!("{name} is not positive semidefinite (min eigenvalue {lo:e})"));
    }
}

impl CostSpec {
    /// Validates and symmetrizes the weights. `state_dims[i-1]` and
    /// `control_dims[i-1]` are agent `i`'s dimensions. All violations are
    /// reported together.
    pub fn new(
        topology: &Topology,
        state_dims: &[usize],
        control_dims: &[usize],
        edges: BTreeMap<(usize, usize), EdgeWeights>,
        agents: Vec<AgentWeights>,
    ) -> Result<Self> {
        let n = topology.n();
        let mut errors = Vec::new();
        if state_dims.len() != n || control_dims.len() != n || agents.len() != n {
            return Err(Error::Config(vec![format!(
                "expected data for {n} agents, got {} state dims, {} control dims, {} weight sets",
                state_dims.len(),
                control_dims.len(),
                agents.len()
            )]));
        }
        let mut clean_edges = BTreeMap::new();
        for (&(i, j), w) in &edges {
            if !topology.has_edge(i, j) {
                errors.push(format!("cost references edge ({i},{j}) which is not in the topology"));
                continue;
            }
            let p = state_dims[i - 1];
            if state_dims[j - 1] != p {
                errors.push(format!(
                    "edge ({i},{j}) couples agents with state dims {p} and {}",
                    state_dims[j - 1]
                ));
                continue;
            }
            let q = symmetrize(&format!("Q({i},{j})"), &w.q, p, &mut errors);
            let d = symmetrize(&format!("D({i},{j})"), &w.d, p, &mut errors);
            check_psd(&format!("Q({i},{j})"), &q, &mut errors);
            check_psd(&format!("D({i},{j})"), &d, &mut errors);
            clean_edges.insert((i, j), EdgeWeights { q, d });
        }
        for (i, j, _) in topology.edges() {
            if !edges.contains_key(&(i, j)) {
                errors.push(format!("topology edge ({i},{j}) has no cost weights"));
            }
        }
        let mut clean_agents = Vec::with_capacity(n);
        for (idx, a) in agents.into_iter().enumerate() {
            let i = idx + 1;
            let p = state_dims[idx];
            let m = control_dims[idx];
            let r = symmetrize(&format!("R({i})"), &a.r, m, &mut errors);
            if r.nrows() == m && m > 0 && r.clone().cholesky().is_none() {
                errors.push(format!("R({i}) is not positive definite"));
            }
            let linked = topology.is_leader_linked(i);
            let w = match (&a.w, linked) {
                (Some(w), true) => {
                    let w = symmetrize(&format!("W({i})"), w, p, &mut errors);
                    check_psd(&format!("W({i})"), &w, &mut errors);
                    Some(w)
                }
                (None, true) => Some(Matrix::zeros(p, p)),
                (Some(_), false) => {
                    errors.push(format!("agent {i} has a leader weight W but no leader link"));
                    None
                }
                (None, false) => None,
            };
            let e = match (&a.e, linked) {
                (Some(e), true) => {
                    let e = symmetrize(&format!("E({i})"), e, p, &mut errors);
                    check_psd(&format!("E({i})"), &e, &mut errors);
                    Some(e)
                }
                (None, true) => Some(Matrix::zeros(p, p)),
                (Some(_), false) => {
                    errors.push(format!("agent {i} has a terminal leader weight E but no leader link"));
                    None
                }
                (None, false) => None,
            };
            if a.offset.len() != p {
                errors.push(format!("offset of agent {i} has dim {}, expected {p}", a.offset.len()));
            }
            clean_agents.push(AgentWeights {
                r,
                w,
                e,
                offset: a.offset,
            });
        }
        if errors.is_empty() {
            Ok(Self {
                edges: clean_edges,
                agents: clean_agents,
                wrapped: Vec::new(),
            })
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Same `Q`, `R`, `D` on every edge/agent; `W`, `E` on leader-linked
    /// agents; zero offsets. Homogeneous dimensions only.
    #[allow(clippy::too_many_arguments)]
    pub fn uniform(
        topology: &Topology,
        state_dim: usize,
        control_dim: usize,
        q: Matrix,
        r: Matrix,
        d: Matrix,
        w: Matrix,
        e: Matrix,
    ) -> Result<Self> {
        let n = topology.n();
        let edges = topology
            .edges()
            .map(|(i, j, _)| ((i, j), EdgeWeights { q: q.clone(), d: d.clone() }))
            .collect();
        let agents = (1..=n)
            .map(|i| {
                let linked = topology.is_leader_linked(i);
                AgentWeights {
                    r: r.clone(),
                    w: linked.then(|| w.clone()),
                    e: linked.then(|| e.clone()),
                    offset: Vector::zeros(state_dim),
                }
            })
            .collect();
        Self::new(topology, &vec![state_dim; n], &vec![control_dim; n], edges, agents)
    }

    /// Marks state components whose errors are angle differences.
    pub fn with_wrapped_components(mut self, components: Vec<usize>) -> Result<Self> {
        let min_dim = self.agents.iter().map(|a| a.offset.len()).min().unwrap_or(0);
        if let Some(&bad) = components.iter().find(|&&k| k >= min_dim) {
            return Err(Error::Config(vec![format!(
                "wrapped component {bad} is out of range for state dim {min_dim}"
            )]));
        }
        let mut components = components;
        components.sort_unstable();
        components.dedup();
        self.wrapped = components;
        Ok(self)
    }

    pub fn wrapped_components(&self) -> &[usize] {
        &self.wrapped
    }

    /// Applies the angle wrap to an error vector.
    pub fn wrap_error(&self, mut e: Vector) -> Vector {
        for &k in &self.wrapped {
            e[k] = wrap_angle(e[k]);
        }
        e
    }

    pub fn with_offsets(mut self, offsets: Vec<Vector>) -> Result<Self> {
        if offsets.len() != self.agents.len() {
            return Err(Error::Argument(format!(
                "expected {} offsets, got {}",
                self.agents.len(),
                offsets.len()
            )));
        }
        for (a, o) in self.agents.iter_mut().zip(offsets) {
            if o.len() != a.offset.len() {
                return Err(Error::Argument("offset dimension mismatch".into()));
            }
            a.offset = o;
        }
        Ok(self)
    }

    /// Every weight multiplied by `c > 0`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        for w in out.edges.values_mut() {
            w.q *= c;
            w.d *= c;
        }
        for a in &mut out.agents {
            a.r *= c;
            if let Some(w) = a.w.as_mut() {
                *w *= c;
            }
            if let Some(e) = a.e.as_mut() {
                *e *= c;
            }
        }
        out
    }

    /// Replaces every terminal weight (`D`, `E`) with zero.
    pub fn without_terminal(&self) -> Self {
        let mut out = self.clone();
        for w in out.edges.values_mut() {
            w.d.fill(0.0);
        }
        for a in &mut out.agents {
            if let Some(e) = a.e.as_mut() {
                e.fill(0.0);
            }
        }
        out
    }

    pub fn edge(&self, i: usize, j: usize) -> Option<&EdgeWeights> {
        self.edges.get(&(i, j))
    }

    /// Outgoing cost edges of agent `i`, ascending by neighbor.
    pub fn edges_of(&self, i: usize) -> impl Iterator<Item = (usize, &EdgeWeights)> {
        self.edges.range((i, 0)..=(i, usize::MAX)).map(|(&(_, j), w)| (j, w))
    }

    pub fn agent(&self, i: usize) -> &AgentWeights {
        &self.agents[i - 1]
    }

    pub fn offset(&self, i: usize) -> &Vector {
        &self.agents[i - 1].offset
    }

    pub fn n(&self) -> usize {
        self.agents.len()
    }
}

/// Neighbor trajectories agent `i` works against within one round.
#[derive(Debug, Clone, Default)]
pub struct NeighborBundle<'a> {
    neighbors: Vec<(usize, &'a StateTrajectory)>,
    leader: Option<&'a StateTrajectory>,
}

impl<'a> NeighborBundle<'a> {
    pub fn new(
        neighbors: impl IntoIterator<Item = (usize, &'a StateTrajectory)>,
        leader: Option<&'a StateTrajectory>,
    ) -> Result<Self> {
        let mut neighbors: Vec<_> = neighbors.into_iter().collect();
        neighbors.sort_by_key(|(j, _)| *j);
        let horizons: Vec<usize> = neighbors
            .iter()
            .map(|(_, t)| t.horizon())
            .chain(leader.map(|t| t.horizon()))
            .collect();
        if horizons.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::Argument("neighbor trajectories have different horizons".into()));
        }
        Ok(Self { neighbors, leader })
    }

    pub fn neighbor(&self, j: usize) -> Option<&'a StateTrajectory> {
        self.neighbors
            .binary_search_by_key(&j, |(k, _)| *k)
            .ok()
            .map(|idx| self.neighbors[idx].1)
    }

    pub fn neighbors(&self) -> &[(usize, &'a StateTrajectory)] {
        &self.neighbors
    }

    pub fn leader(&self) -> Option<&'a StateTrajectory> {
        self.leader
    }
}

/// Agent `i`'s cost slice resolved against a concrete bundle: one place that
/// knows which error terms exist and what they weigh.
pub(crate) struct LocalSlice<'s, 'a> {
    agent: usize,
    spec: &'s CostSpec,
    neighbors: Vec<(&'s EdgeWeights, &'a StateTrajectory, &'s Vector)>,
    leader: Option<(&'s Matrix, &'s Matrix, &'a StateTrajectory)>,
}

impl<'s, 'a> LocalSlice<'s, 'a> {
    pub(crate) fn resolve(
        agent: usize,
        spec: &'s CostSpec,
        nb: &NeighborBundle<'a>,
        horizon: usize,
    ) -> Result<Self> {
        if agent == 0 || agent > spec.n() {
            return Err(Error::Argument(format!("agent {agent} is outside 1..={}", spec.n())));
        }
        let mut neighbors = Vec::new();
        for (j, w) in spec.edges_of(agent) {
            let traj = nb.neighbor(j).ok_or_else(|| {
                Error::Argument(format!("agent {agent} has no trajectory for neighbor {j}"))
            })?;
            if traj.horizon() != horizon {
                return Err(Error::Argument(format!(
                    "neighbor {j} trajectory has horizon {}, agent {agent} uses {horizon}",
                    traj.horizon()
                )));
            }
            neighbors.push((w, traj, spec.offset(j)));
        }
        let weights = spec.agent(agent);
        let leader = match (&weights.w, &weights.e) {
            (Some(w), Some(e)) => {
                let traj = nb.leader().ok_or_else(|| {
                    Error::Argument(format!("agent {agent} is leader-linked but has no leader trajectory"))
                })?;
                if traj.horizon() != horizon {
                    return Err(Error::Argument(format!(
                        "leader trajectory has horizon {}, agent {agent} uses {horizon}",
                        traj.horizon()
                    )));
                }
                Some((w, e, traj))
            }
            _ => None,
        };
        Ok(Self {
            agent,
            spec,
            neighbors,
            leader,
        })
    }

    pub(crate) fn r(&self) -> &'s Matrix {
        &self.spec.agent(self.agent).r
    }

    /// Derivative of the state part of the cost with respect to `x_i(t)`.
    pub(crate) fn state_gradient(&self, t: usize, x: &Vector, terminal: bool) -> Vector {
        let zi = x - self.spec.offset(self.agent);
        let mut g = Vector::zeros(x.len());
        for (w, traj, dj) in &self.neighbors {
            let e = self.spec.wrap_error(&zi - (traj.state(t) - *dj));
            g += if terminal { &w.d * e } else { &w.q * e };
        }
        if let Some((w, e_mat, traj)) = &self.leader {
            let e = self.spec.wrap_error(&zi - traj.state(t));
            g += if terminal { *e_mat * e } else { *w * e };
        }
        g
    }

    /// Second derivative of the state part with respect to `x_i(t)`.
    pub(crate) fn state_curvature(&self, dim: usize, terminal: bool) -> Matrix {
        let mut c = Matrix::zeros(dim, dim);
        for (w, _, _) in &self.neighbors {
            c += if terminal { &w.d } else { &w.q };
        }
        if let Some((w, e, _)) = &self.leader {
            c += if terminal { *e } else { *w };
        }
        c
    }

    pub(crate) fn value(&self, traj: &StateTrajectory, u: &ControlSequence) -> f64 {
        let horizon = u.horizon();
        let di = self.spec.offset(self.agent);
        let r = self.r();
        let mut total = 0.0;
        for t in 0..=horizon {
            let terminal = t == horizon;
            let zi = traj.state(t) - di;
            for (w, tj, dj) in &self.neighbors {
                let e = self.spec.wrap_error(&zi - (tj.state(t) - *dj));
                let m = if terminal { &w.d } else { &w.q };
                total += e.dot(&(m * &e));
            }
            if let Some((w, e_mat, tl)) = &self.leader {
                let e = self.spec.wrap_error(&zi - tl.state(t));
                let m = if terminal { *e_mat } else { *w };
                total += e.dot(&(m * &e));
            }
            if !terminal {
                let ut = u.control(t);
                total += ut.dot(&(r * ut));
            }
        }
        0.5 * total
    }
}

/// Agent `i`'s local cost with neighbor trajectories frozen.
pub fn local_cost(
    i: usize,
    traj: &StateTrajectory,
    u: &ControlSequence,
    nb: &NeighborBundle<'_>,
    spec: &CostSpec,
) -> Result<f64> {
    if traj.horizon() != u.horizon() {
        return Err(Error::Argument(format!(
            "agent {i}: trajectory horizon {} does not match {} controls",
            traj.horizon(),
            u.horizon()
        )));
    }
    let slice = LocalSlice::resolve(i, spec, nb, u.horizon())?;
    let value = slice.value(traj, u);
    if value < 0.0 {
        return Err(Error::Internal(format!("agent {i}: negative cost {value}")));
    }
    Ok(value)
}

/// Sum of every agent's slice: each directed edge counted once.
pub fn global_cost(
    trajectories: &[StateTrajectory],
    controls: &[ControlSequence],
    spec: &CostSpec,
    topology: &Topology,
    leader: Option<&StateTrajectory>,
) -> Result<f64> {
    let n = topology.n();
    if trajectories.len() != n || controls.len() != n {
        return Err(Error::Argument(format!(
            "expected {n} trajectories and controls, got {} and {}",
            trajectories.len(),
            controls.len()
        )));
    }
    let mut total = 0.0;
    for i in 1..=n {
        let neighbors = topology.neighbors(i)?.into_iter().map(|j| (j, &trajectories[j - 1]));
        let leader = if topology.is_leader_linked(i) { leader } else { None };
        let nb = NeighborBundle::new(neighbors, leader)?;
        total += local_cost(i, &trajectories[i - 1], &controls[i - 1], &nb, spec)?;
    }
    Ok(total)
}
