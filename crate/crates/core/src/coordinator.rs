//! Synchronous round protocol and the receding-horizon loop.
//!
//! A round has three phases separated by barriers:
//!
//! 1. every agent rolls out its current control sequence and emits a
//!    [`RoundMessage`] carrying the predicted trajectory;
//! 2. the coordinator delivers each agent the messages of its neighbors (and
//!    of the leader, if linked), optionally dropping some, in which case the
//!    receiver keeps the last trajectory it got from that sender;
//! 3. every agent evaluates its local cost, gradient and Hessian against its
//!    inbox and computes its update.
//!
//! Phases 1 and 3 touch only per-agent data and may run in parallel; all
//! cross-agent data flows through the immutable messages of phase 2, so the
//! result does not depend on scheduling.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{LocalProblem, FD_GRADIENT_STEP, FD_HESSIAN_STEP};
use crate::cost::{self, CostSpec, NeighborBundle};
use crate::dynamics::{self, ControlSequence, Dynamics, Matrix, StateTrajectory, Vector};
use crate::error::{Error, Result};
use crate::graph::Topology;
use crate::solver::{backtracking_step, regularize, Method, OcpStep, SolverConfig, StopRule};

/// Autonomous leader: its own model driven by a constant control.
#[derive(Debug, Clone)]
pub struct LeaderSpec {
    pub model: Arc<dyn Dynamics>,
    pub control: Vector,
}

/// Everything static about the multi-agent system.
#[derive(Debug, Clone)]
pub struct Network {
    pub topology: Topology,
    /// `models[i-1]` drives agent `i`.
    pub models: Vec<Arc<dyn Dynamics>>,
    pub spec: CostSpec,
    pub leader: Option<LeaderSpec>,
}

impl Network {
    pub fn new(
        topology: Topology,
        models: Vec<Arc<dyn Dynamics>>,
        spec: CostSpec,
        leader: Option<LeaderSpec>,
    ) -> Result<Self> {
        let n = topology.n();
        let mut errors = Vec::new();
        if models.len() != n {
            errors.push(format!("expected {n} models, got {}", models.len()));
        }
        if spec.n() != n {
            errors.push(format!("cost spec covers {} agents, topology has {n}", spec.n()));
        }
        match (&leader, topology.has_leader()) {
            (None, true) => errors.push("leader links are configured but no leader is given".into()),
            (Some(_), false) => errors.push("a leader is given but no agent is linked to it".into()),
            (Some(l), true) => {
                if l.control.len() != l.model.control_dim() {
                    errors.push(format!(
                        "leader control has dim {}, leader model expects {}",
                        l.control.len(),
                        l.model.control_dim()
                    ));
                }
                for &i in topology.leader_links() {
                    if let Some(m) = models.get(i - 1) {
                        if m.state_dim() != l.model.state_dim() {
                            errors.push(format!(
                                "agent {i} has state dim {} but the leader has {}",
                                m.state_dim(),
                                l.model.state_dim()
                            ));
                        }
                    }
                }
            }
            (None, false) => {}
        }
        if errors.is_empty() {
            Ok(Self {
                topology,
                models,
                spec,
                leader,
            })
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn n(&self) -> usize {
        self.topology.n()
    }

    fn check_states(&self, states: &[Vector], leader: Option<&Vector>) -> Result<()> {
        if states.len() != self.n() {
            return Err(Error::Argument(format!(
                "expected {} initial states, got {}",
                self.n(),
                states.len()
            )));
        }
        for (idx, (x, m)) in states.iter().zip(&self.models).enumerate() {
            if x.len() != m.state_dim() {
                return Err(Error::Argument(format!(
                    "initial state of agent {} has dim {}, model expects {}",
                    idx + 1,
                    x.len(),
                    m.state_dim()
                )));
            }
        }
        match (&self.leader, leader) {
            (Some(l), Some(x)) if x.len() != l.model.state_dim() => Err(Error::Argument(format!(
                "leader state has dim {}, leader model expects {}",
                x.len(),
                l.model.state_dim()
            ))),
            (Some(_), None) => Err(Error::Config(vec!["leader initial state is missing".into()])),
            _ => Ok(()),
        }
    }

    fn require_strong_connectivity(&self) -> Result<()> {
        match self.topology.unreachable_pair() {
            None => Ok(()),
            Some((a, b)) => Err(Error::Precondition(format!(
                "communication graph is not strongly connected: no directed path from agent {a} to agent {b}"
            ))),
        }
    }

    fn require_spanning_tree(&self) -> Result<()> {
        if self.topology.has_spanning_tree() {
            Ok(())
        } else if self.topology.has_leader() {
            Err(Error::Precondition(
                "the leader's information does not reach every follower".into(),
            ))
        } else {
            Err(Error::Precondition("communication graph has no spanning tree".into()))
        }
    }
}

/// Who emitted a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Sender {
    Leader,
    Agent(usize),
}

/// Immutable predicted-trajectory broadcast.
#[derive(Debug, Clone)]
pub struct RoundMessage {
    pub sender: Sender,
    pub round: usize,
    pub mpc_step: usize,
    pub payload: Arc<StateTrajectory>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    /// Controls per prediction window.
    pub horizon: usize,
    /// Closed-loop steps.
    pub steps: usize,
    /// Initialize each window with the previous solution shifted by one step.
    pub warm_start: bool,
    /// Per-message loss probability.
    pub drop_probability: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 8,
            steps: 200,
            warm_start: true,
            drop_probability: 0.0,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if self.horizon < 1 {
            errors.push("mpc.horizon must be at least 1".to_string());
        }
        if self.steps < 1 {
            errors.push("mpc.steps must be at least 1".to_string());
        }
        if !(0.0..1.0).contains(&self.drop_probability) {
            errors.push(format!(
                "mpc.drop_probability must lie in [0, 1), got {}",
                self.drop_probability
            ));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }
}

/// Knobs that do not change the mathematical problem.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub execution: Execution,
    /// Seeds the message-drop stream only.
    pub seed: u64,
    /// State components entering the Euclidean consensus error; all when `None`.
    pub error_components: Option<Vec<usize>>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            execution: Execution::Parallel,
            seed: 0,
            error_components: None,
        }
    }
}

/// Consensus errors at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusErrors {
    /// `(i, j, ||(x_i - d_i) - (x_j - d_j)||)` per directed edge.
    pub edges: Vec<(usize, usize, f64)>,
    /// `(i, ||(x_i - d_i) - x_l||)` per leader-linked agent.
    pub leader: Vec<(usize, f64)>,
    pub max: f64,
}

fn masked_norm(v: &Vector, mask: Option<&[usize]>) -> f64 {
    match mask {
        None => v.norm(),
        Some(idx) => idx.iter().map(|&k| v[k] * v[k]).sum::<f64>().sqrt(),
    }
}

/// Offset-corrected distances along every edge and to the leader.
pub fn consensus_error(
    states: &[Vector],
    topology: &Topology,
    offsets: &[Vector],
    mask: Option<&[usize]>,
    leader: Option<&Vector>,
) -> ConsensusErrors {
    let shifted: Vec<Vector> = states.iter().zip(offsets).map(|(x, d)| x - d).collect();
    let edges: Vec<(usize, usize, f64)> = topology
        .edges()
        .map(|(i, j, _)| (i, j, masked_norm(&(&shifted[i - 1] - &shifted[j - 1]), mask)))
        .collect();
    let leader: Vec<(usize, f64)> = match leader {
        Some(xl) => topology
            .leader_links()
            .iter()
            .map(|&i| (i, masked_norm(&(&shifted[i - 1] - xl), mask)))
            .collect(),
        None => Vec::new(),
    };
    let max = edges
        .iter()
        .map(|e| e.2)
        .chain(leader.iter().map(|e| e.1))
        .fold(0.0, f64::max);
    ConsensusErrors { edges, leader, max }
}

/// Closed-loop record.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    /// `states[i-1][t]`, `t = 0..=T`.
    pub states: Vec<Vec<Vector>>,
    /// `controls[i-1][t]`, `t = 0..T`.
    pub controls: Vec<Vec<Vector>>,
    pub leader_states: Option<Vec<Vector>>,
    /// One entry per recorded state, `T + 1`.
    pub errors: Vec<ConsensusErrors>,
    /// Converged window cost `J_{t_k}` of every step.
    pub window_costs: Vec<f64>,
    /// Exchange rounds used per step.
    pub rounds: Vec<usize>,
    pub converged: Vec<bool>,
}

impl RunResult {
    pub fn steps(&self) -> usize {
        self.window_costs.len()
    }

    pub fn all_converged(&self) -> bool {
        self.converged.iter().all(|&c| c)
    }
}

/// What one window's round loop produced.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowOutcome {
    pub controls: Vec<ControlSequence>,
    pub trajectories: Vec<StateTrajectory>,
    pub leader_trajectory: Option<StateTrajectory>,
    pub rounds: usize,
    pub converged: bool,
    /// Sum of local costs at the start of every round.
    pub round_costs: Vec<f64>,
    /// Max over agents of the gradient norm at the start of every round.
    pub gradient_norms: Vec<f64>,
    /// Converged global window cost.
    pub cost: f64,
}

/// Per-agent result of phase 3.
struct AgentUpdate {
    cost: f64,
    gradient_norm: f64,
    next: Option<(ControlSequence, f64)>,
}

/// Inputs of one prediction window.
#[derive(Debug, Clone)]
pub struct Window {
    pub x0: Vec<Vector>,
    pub k0: usize,
    pub controls: Vec<ControlSequence>,
    pub leader: Option<Arc<StateTrajectory>>,
}

/// Stateful driver: one MPC step per [`Session::step`] call.
pub struct Session<'n> {
    net: &'n Network,
    solver: SolverConfig,
    mpc: MpcConfig,
    options: RunOptions,
    t: usize,
    states: Vec<Vector>,
    leader_state: Option<Vector>,
    warm: Vec<ControlSequence>,
    last_received: BTreeMap<(usize, Sender), Arc<StateTrajectory>>,
    deliveries: BTreeMap<(usize, Sender), usize>,
    rng: ChaCha8Rng,
    result: RunResult,
}

impl<'n> Session<'n> {
    pub fn new(
        net: &'n Network,
        solver: SolverConfig,
        mpc: MpcConfig,
        options: RunOptions,
        initial_states: Vec<Vector>,
        leader_state: Option<Vector>,
    ) -> Result<Self> {
        solver.validate()?;
        mpc.validate()?;
        net.check_states(&initial_states, leader_state.as_ref())?;
        if let Some(mask) = &options.error_components {
            for (idx, m) in net.models.iter().enumerate() {
                if let Some(&bad) = mask.iter().find(|&&k| k >= m.state_dim()) {
                    return Err(Error::Config(vec![format!(
                        "error component {bad} is out of range for agent {} (state dim {})",
                        idx + 1,
                        m.state_dim()
                    )]));
                }
            }
        }
        let leader_state = if net.leader.is_some() { leader_state } else { None };
        let warm = net
            .models
            .iter()
            .map(|m| ControlSequence::zeros(mpc.horizon, m.control_dim()))
            .collect();
        let mut session = Self {
            net,
            solver,
            rng: ChaCha8Rng::seed_from_u64(options.seed),
            mpc,
            options,
            t: 0,
            states: initial_states,
            leader_state,
            warm,
            last_received: BTreeMap::new(),
            deliveries: BTreeMap::new(),
            result: RunResult {
                states: Vec::new(),
                controls: Vec::new(),
                leader_states: None,
                errors: Vec::new(),
                window_costs: Vec::new(),
                rounds: Vec::new(),
                converged: Vec::new(),
            },
        };
        session.result.states = session.states.iter().map(|x| vec![x.clone()]).collect();
        session.result.controls = vec![Vec::new(); net.n()];
        session.result.leader_states = session.leader_state.as_ref().map(|x| vec![x.clone()]);
        let errs = session.errors_now();
        session.result.errors.push(errs);
        Ok(session)
    }

    fn errors_now(&self) -> ConsensusErrors {
        let offsets: Vec<Vector> = (1..=self.net.n()).map(|i| self.net.spec.offset(i).clone()).collect();
        consensus_error(
            &self.states,
            &self.net.topology,
            &offsets,
            self.options.error_components.as_deref(),
            self.leader_state.as_ref(),
        )
    }

    pub fn time(&self) -> usize {
        self.t
    }

    pub fn states(&self) -> &[Vector] {
        &self.states
    }

    pub fn leader_state(&self) -> Option<&Vector> {
        self.leader_state.as_ref()
    }

    /// `(receiver, sender) -> messages delivered` since the session started.
    pub fn deliveries(&self) -> &BTreeMap<(usize, Sender), usize> {
        &self.deliveries
    }

    pub fn result(&self) -> &RunResult {
        &self.result
    }

    /// The window the next [`Session::step`] will solve.
    pub fn current_window(&self) -> Result<Window> {
        let controls = if self.mpc.warm_start {
            self.warm.clone()
        } else {
            self.net
                .models
                .iter()
                .map(|m| ControlSequence::zeros(self.mpc.horizon, m.control_dim()))
                .collect()
        };
        let leader = match (&self.net.leader, &self.leader_state) {
            (Some(l), Some(x)) => {
                let u = ControlSequence::new(vec![l.control.clone(); self.mpc.horizon])?;
                Some(Arc::new(dynamics::rollout(l.model.as_ref(), x, &u, self.t)?))
            }
            _ => None,
        };
        Ok(Window {
            x0: self.states.clone(),
            k0: self.t,
            controls,
            leader,
        })
    }

    /// Solves the current window, applies every agent's first control and
    /// advances the true states by one step.
    pub fn step(&mut self) -> Result<WindowOutcome> {
        let window = self.current_window()?;
        let outcome = run_window(
            self.net,
            &self.solver,
            StopRule::Step,
            &window,
            self.t,
            &mut Exchange {
                drop_probability: self.mpc.drop_probability,
                rng: &mut self.rng,
                last_received: &mut self.last_received,
                deliveries: &mut self.deliveries,
            },
            self.options.execution,
        )
        .map_err(|e| e.context(format_args!("MPC step {}", self.t)))?;

        let mut next = Vec::with_capacity(self.net.n());
        for (idx, model) in self.net.models.iter().enumerate() {
            let u0 = outcome.controls[idx].control(0).clone();
            next.push(dynamics::step(model.as_ref(), &self.states[idx], &u0, self.t)?);
            self.result.controls[idx].push(u0);
        }
        if let (Some(l), Some(x)) = (&self.net.leader, &self.leader_state) {
            let xl = dynamics::step(l.model.as_ref(), x, &l.control, self.t)?;
            self.leader_state = Some(xl);
        }
        self.states = next;
        self.t += 1;
        self.warm = outcome.controls.iter().map(ControlSequence::shifted).collect();

        for (idx, x) in self.states.iter().enumerate() {
            self.result.states[idx].push(x.clone());
        }
        if let (Some(hist), Some(x)) = (self.result.leader_states.as_mut(), &self.leader_state) {
            hist.push(x.clone());
        }
        let errs = self.errors_now();
        self.result.errors.push(errs);
        self.result.window_costs.push(outcome.cost);
        self.result.rounds.push(outcome.rounds);
        self.result.converged.push(outcome.converged);
        Ok(outcome)
    }

    /// Runs the configured number of steps.
    pub fn run(mut self) -> Result<RunResult> {
        while self.t < self.mpc.steps {
            self.step()?;
        }
        Ok(self.result)
    }

    /// Adjoint derivatives of agent `i` at the start of the current window
    /// (warm-start controls, neighbors' warm-start predictions) next to their
    /// finite-difference oracles.
    pub fn gradient_check(&self, agent: usize) -> Result<GradientCheck> {
        let window = self.current_window()?;
        gradient_check(self.net, &window, agent)
    }
}

/// Adjoint derivatives beside central-difference oracles.
#[derive(Debug, Clone)]
pub struct GradientCheck {
    pub gradient: Vector,
    pub fd_gradient: Vector,
    pub hessian: Matrix,
    pub fd_hessian: Matrix,
}

impl GradientCheck {
    pub fn gradient_error(&self) -> f64 {
        (&self.gradient - &self.fd_gradient).norm() / (1.0 + self.fd_gradient.norm())
    }

    pub fn hessian_error(&self) -> f64 {
        (&self.hessian - &self.fd_hessian).norm() / (1.0 + self.fd_hessian.norm())
    }
}

/// Derivative check for one agent of a window.
pub fn gradient_check(net: &Network, window: &Window, agent: usize) -> Result<GradientCheck> {
    if agent == 0 || agent > net.n() {
        return Err(Error::Argument(format!("agent {agent} is outside 1..={}", net.n())));
    }
    let trajectories = rollout_all(net, window, Execution::Sequential)?;
    let neighbors = net.topology.neighbors(agent)?;
    let leader = if net.topology.is_leader_linked(agent) {
        window.leader.as_deref()
    } else {
        None
    };
    let nb = NeighborBundle::new(neighbors.iter().map(|&j| (j, trajectories[j - 1].as_ref())), leader)?;
    let problem = LocalProblem::new(
        agent,
        net.models[agent - 1].as_ref(),
        &net.spec,
        nb,
        window.x0[agent - 1].clone(),
        window.k0,
    );
    let u = &window.controls[agent - 1];
    let eval = problem.evaluate(u, true)?;
    Ok(GradientCheck {
        gradient: eval.gradient,
        fd_gradient: problem.fd_gradient(u, FD_GRADIENT_STEP)?,
        hessian: eval.hessian.expect("requested"),
        fd_hessian: problem.fd_hessian(u, FD_HESSIAN_STEP)?,
    })
}

/// Message bus state that persists across rounds and windows.
struct Exchange<'a> {
    drop_probability: f64,
    rng: &'a mut ChaCha8Rng,
    last_received: &'a mut BTreeMap<(usize, Sender), Arc<StateTrajectory>>,
    deliveries: &'a mut BTreeMap<(usize, Sender), usize>,
}

impl Exchange<'_> {
    /// Phase 2: builds every agent's inbox. Receivers are visited in
    /// ascending order and senders in ascending order so the drop stream is
    /// consumed identically regardless of execution mode.
    fn deliver(&mut self, net: &Network, messages: &[RoundMessage]) -> Result<Vec<Vec<(Sender, Arc<StateTrajectory>)>>> {
        let by_sender: BTreeMap<Sender, &RoundMessage> = messages.iter().map(|m| (m.sender, m)).collect();
        let mut inboxes = Vec::with_capacity(net.n());
        for i in 1..=net.n() {
            let mut senders: Vec<Sender> = net.topology.neighbors(i)?.into_iter().map(Sender::Agent).collect();
            if net.topology.is_leader_linked(i) {
                senders.push(Sender::Leader);
            }
            let mut inbox = Vec::with_capacity(senders.len());
            for sender in senders {
                let msg = by_sender.get(&sender).ok_or_else(|| {
                    Error::Internal(format!("no message from {sender:?} this round"))
                })?;
                let dropped = self.drop_probability > 0.0 && self.rng.random::<f64>() < self.drop_probability;
                let key = (i, sender);
                let payload = match (dropped, self.last_received.get(&key)) {
                    (true, Some(stale)) => stale.clone(),
                    _ => {
                        *self.deliveries.entry(key).or_insert(0) += 1;
                        self.last_received.insert(key, msg.payload.clone());
                        msg.payload.clone()
                    }
                };
                inbox.push((sender, payload));
            }
            inboxes.push(inbox);
        }
        Ok(inboxes)
    }
}

fn map_agents<T, F>(n: usize, execution: Execution, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    match execution {
        Execution::Sequential => (1..=n).map(f).collect(),
        Execution::Parallel => (1..=n).into_par_iter().map(f).collect(),
    }
}

fn rollout_all(net: &Network, window: &Window, execution: Execution) -> Result<Vec<Arc<StateTrajectory>>> {
    map_agents(net.n(), execution, |i| {
        dynamics::rollout(net.models[i - 1].as_ref(), &window.x0[i - 1], &window.controls[i - 1], window.k0)
            .map(Arc::new)
            .map_err(|e| e.context(format_args!("agent {i}")))
    })
}

fn agent_update(
    net: &Network,
    solver: &SolverConfig,
    stop: StopRule,
    window: &Window,
    inbox: &[(Sender, Arc<StateTrajectory>)],
    round: usize,
    i: usize,
) -> Result<AgentUpdate> {
    let mut neighbors = Vec::new();
    let mut leader = None;
    for (sender, traj) in inbox {
        match sender {
            Sender::Agent(j) => neighbors.push((*j, traj.as_ref())),
            Sender::Leader => leader = Some(traj.as_ref()),
        }
    }
    let nb = NeighborBundle::new(neighbors, leader)?;
    let model = net.models[i - 1].as_ref();
    let problem = LocalProblem::new(i, model, &net.spec, nb, window.x0[i - 1].clone(), window.k0);
    let u = &window.controls[i - 1];
    let need_hessian = solver.method == Method::Ocp;
    let eval = problem.evaluate(u, need_hessian)?;
    let gradient_norm = eval.gradient.norm();
    if stop == StopRule::Gradient && gradient_norm < solver.eps_grad {
        return Ok(AgentUpdate {
            cost: eval.cost,
            gradient_norm,
            next: None,
        });
    }
    let step = match solver.method {
        Method::Ocp => {
            let mut hess = eval.hessian.expect("requested");
            regularize(&mut hess, solver.reg_floor);
            let g_mat = solver.g_matrix(hess.nrows());
            OcpStep::new(&hess, &g_mat)?.direction(&eval.gradient, solver.inner_iterations(round))
        }
        Method::Msa => match backtracking_step(&problem, u, eval.cost, &eval.gradient, solver.msa_step)? {
            Some((d, _)) => d,
            None => Vector::zeros(eval.gradient.len()),
        },
    };
    if step.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("update direction is not finite".into()));
    }
    let next = ControlSequence::from_flat(&(u.flatten() - &step), u.control_dim())?;
    Ok(AgentUpdate {
        cost: eval.cost,
        gradient_norm,
        next: Some((next, step.norm())),
    })
}

/// Round loop over one window until every agent passes `stop`, or the cap.
fn run_window(
    net: &Network,
    solver: &SolverConfig,
    stop: StopRule,
    start: &Window,
    mpc_step: usize,
    exchange: &mut Exchange<'_>,
    execution: Execution,
) -> Result<WindowOutcome> {
    let mut window = start.clone();
    let mut round_costs = Vec::new();
    let mut gradient_norms = Vec::new();
    let mut converged = false;
    let mut rounds = 0;
    while rounds < solver.max_outer {
        let r = rounds;
        // phase 1
        let trajectories = rollout_all(net, &window, execution)?;
        let mut messages: Vec<RoundMessage> = trajectories
            .iter()
            .enumerate()
            .map(|(idx, t)| RoundMessage {
                sender: Sender::Agent(idx + 1),
                round: r,
                mpc_step,
                payload: t.clone(),
            })
            .collect();
        if let Some(l) = &window.leader {
            messages.push(RoundMessage {
                sender: Sender::Leader,
                round: r,
                mpc_step,
                payload: l.clone(),
            });
        }
        // phase 2
        let inboxes = exchange.deliver(net, &messages)?;
        // phase 3
        let updates = map_agents(net.n(), execution, |i| {
            agent_update(net, solver, stop, &window, &inboxes[i - 1], r, i)
                .map_err(|e| e.context(format_args!("agent {i}, round {r}")))
        })?;
        round_costs.push(updates.iter().map(|u| u.cost).sum());
        gradient_norms.push(updates.iter().map(|u| u.gradient_norm).fold(0.0, f64::max));

        match stop {
            StopRule::Gradient => {
                if updates.iter().all(|u| u.next.is_none()) {
                    converged = true;
                    break;
                }
                for (idx, upd) in updates.into_iter().enumerate() {
                    if let Some((next, _)) = upd.next {
                        window.controls[idx] = next;
                    }
                }
                rounds += 1;
            }
            StopRule::Step => {
                let mut all_small = true;
                for (idx, upd) in updates.into_iter().enumerate() {
                    let (next, size) = upd.next.expect("step rule always updates");
                    all_small &= size < solver.eps_step;
                    window.controls[idx] = next;
                }
                rounds += 1;
                if all_small {
                    converged = true;
                    break;
                }
            }
        }
    }

    let trajectories: Vec<StateTrajectory> = rollout_all(net, &window, execution)?
        .into_iter()
        .map(Arc::unwrap_or_clone)
        .collect();
    let leader_trajectory = window.leader.as_deref().cloned();
    let cost = cost::global_cost(
        &trajectories,
        &window.controls,
        &net.spec,
        &net.topology,
        leader_trajectory.as_ref(),
    )?;
    Ok(WindowOutcome {
        controls: window.controls,
        trajectories,
        leader_trajectory,
        rounds,
        converged,
        round_costs,
        gradient_norms,
        cost,
    })
}

/// Finite-horizon distributed solve: rounds of exchange and OCP updates until
/// every agent's gradient norm is below `eps_grad`. Requires a strongly
/// connected graph, or a spanning tree rooted at the leader when one is linked.
pub fn run_algorithm1(
    net: &Network,
    solver: &SolverConfig,
    horizon: usize,
    initial_states: Vec<Vector>,
    leader_state: Option<Vector>,
    execution: Execution,
) -> Result<WindowOutcome> {
    solver.validate()?;
    if horizon < 1 {
        return Err(Error::Argument("horizon must be at least 1".into()));
    }
    if net.topology.has_leader() {
        net.require_spanning_tree()?;
    } else {
        net.require_strong_connectivity()?;
    }
    net.check_states(&initial_states, leader_state.as_ref())?;
    let leader = match (&net.leader, leader_state) {
        (Some(l), Some(x)) => {
            let u = ControlSequence::new(vec![l.control.clone(); horizon])?;
            Some(Arc::new(dynamics::rollout(l.model.as_ref(), &x, &u, 0)?))
        }
        _ => None,
    };
    let window = Window {
        x0: initial_states,
        k0: 0,
        controls: net
            .models
            .iter()
            .map(|m| ControlSequence::zeros(horizon, m.control_dim()))
            .collect(),
        leader,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut last = BTreeMap::new();
    let mut deliveries = BTreeMap::new();
    let mut exchange = Exchange {
        drop_probability: 0.0,
        rng: &mut rng,
        last_received: &mut last,
        deliveries: &mut deliveries,
    };
    run_window(net, solver, StopRule::Gradient, &window, 0, &mut exchange, execution)
}

/// Receding-horizon leaderless consensus. Requires strong connectivity and no leader.
pub fn run_mpc_leaderless(
    net: &Network,
    solver: SolverConfig,
    mpc: MpcConfig,
    options: RunOptions,
    initial_states: Vec<Vector>,
) -> Result<RunResult> {
    if net.leader.is_some() {
        return Err(Error::Config(vec!["leaderless mode does not take a leader".into()]));
    }
    net.require_strong_connectivity()?;
    Session::new(net, solver, mpc, options, initial_states, None)?.run()
}

/// Receding-horizon leader-follower consensus (formation when offsets are
/// set). Requires the leader, when linked, to root a spanning tree.
pub fn run_mpc_leader_follower(
    net: &Network,
    solver: SolverConfig,
    mpc: MpcConfig,
    options: RunOptions,
    initial_states: Vec<Vector>,
    leader_state: Option<Vector>,
) -> Result<RunResult> {
    net.require_spanning_tree()?;
    Session::new(net, solver, mpc, options, initial_states, leader_state)?.run()
}
