//! Scenario files, shipped presets and run artifacts.
//!
//! A scenario is a TOML document. Every table rejects unknown keys, and
//! validation reports all violations together. See `docs/scenario.md` for
//! the field reference.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::coordinator::{
    self, consensus_error, Execution, GradientCheck, LeaderSpec, MpcConfig, Network, RunOptions, RunResult,
    Session, Window,
};
use crate::cost::{AgentWeights, CostSpec, EdgeWeights};
use crate::dynamics::{
    rollout, sine_benchmark_matrices, ControlSequence, Dynamics, Linear, Matrix, SineForcing, SineModel, TimeForcing, Unicycle, Vector,
};
use crate::error::{Error, Result};
use crate::graph::Topology;
use crate::solver::SolverConfig;

const PRESETS: &[(&str, &str)] = &[
    ("agv_rendezvous", include_str!("../scenarios/agv_rendezvous.toml")),
    ("leader_follower", include_str!("../scenarios/leader_follower.toml")),
    ("formation", include_str!("../scenarios/formation.toml")),
    ("scalar_chain", include_str!("../scenarios/scalar_chain.toml")),
];

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Weight matrix written as a scalar (`c I`), a diagonal, or full rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Weight {
    Scalar(f64),
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl Default for Weight {
    fn default() -> Self {
        Weight::Scalar(0.0)
    }
}

impl Weight {
    fn to_matrix(&self, dim: usize, name: &str, errors: &mut Vec<String>) -> Matrix {
        match self {
            Weight::Scalar(c) => Matrix::identity(dim, dim) * *c,
            Weight::Diagonal(d) => {
                if d.len() != dim {
                    errors.push(format!("{name} has {} diagonal entries, expected {dim}", d.len()));
                    return Matrix::zeros(dim, dim);
                }
                Matrix::from_diagonal(&Vector::from_column_slice(d))
            }
            Weight::Full(rows) => rows_to_matrix(rows, name, errors)
                .filter(|m| {
                    let ok = m.nrows() == dim && m.ncols() == dim;
                    if !ok {
                        errors.push(format!("{name} is {}x{}, expected {dim}x{dim}", m.nrows(), m.ncols()));
                    }
                    ok
                })
                .unwrap_or_else(|| Matrix::zeros(dim, dim)),
        }
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], name: &str, errors: &mut Vec<String>) -> Option<Matrix> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        errors.push(format!("{name} must be a non-empty rectangular array of rows"));
        return None;
    }
    Some(Matrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SineMode {
    ScalarSum,
    DiagB,
}

impl From<SineMode> for SineForcing {
    fn from(m: SineMode) -> Self {
        match m {
            SineMode::ScalarSum => SineForcing::ScalarSum,
            SineMode::DiagB => SineForcing::DiagB,
        }
    }
}

fn default_amplitude() -> f64 {
    0.01
}

fn default_time_amplitude() -> f64 {
    0.1
}

fn default_time_frequency() -> f64 {
    0.05
}

fn default_sine_mode() -> SineMode {
    SineMode::ScalarSum
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Unicycle {
        dt: f64,
    },
    Linear {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
    },
    LinearSine {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        a: Option<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        b: Option<Vec<f64>>,
        #[serde(default = "default_amplitude")]
        amplitude: f64,
        #[serde(default = "default_sine_mode")]
        forcing: SineMode,
    },
    LeaderSine {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        a: Option<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        b: Option<Vec<f64>>,
        #[serde(default = "default_amplitude")]
        amplitude: f64,
        #[serde(default = "default_sine_mode")]
        forcing: SineMode,
        #[serde(default = "default_time_amplitude")]
        time_amplitude: f64,
        #[serde(default = "default_time_frequency")]
        time_frequency: f64,
    },
}

impl ModelConfig {
    /// Fills the benchmark matrices into sine models that omit them.
    fn normalize(&mut self) {
        let (a0, b0) = sine_benchmark_matrices();
        let rows: Vec<Vec<f64>> = (0..a0.nrows()).map(|i| a0.row(i).iter().copied().collect()).collect();
        match self {
            ModelConfig::LinearSine { a, b, .. } | ModelConfig::LeaderSine { a, b, .. } => {
                a.get_or_insert_with(|| rows.clone());
                b.get_or_insert_with(|| b0.iter().copied().collect());
            }
            _ => {}
        }
    }

    fn build(&self, name: &str, errors: &mut Vec<String>) -> Option<Arc<dyn Dynamics>> {
        let sine = |a: &Option<Vec<Vec<f64>>>,
                    b: &Option<Vec<f64>>,
                    amplitude: f64,
                    forcing: SineMode,
                    time: Option<TimeForcing>,
                    errors: &mut Vec<String>|
         -> Option<Arc<dyn Dynamics>> {
            let a = rows_to_matrix(a.as_ref()?, &format!("{name}.a"), errors)?;
            let b = Vector::from_vec(b.clone()?);
            match SineModel::new(a, b, amplitude, forcing.into(), time) {
                Ok(m) => Some(Arc::new(m)),
                Err(e) => {
                    errors.push(format!("{name}: {e}"));
                    None
                }
            }
        };
        match self {
            ModelConfig::Unicycle { dt } => {
                if !(*dt > 0.0) || !dt.is_finite() {
                    errors.push(format!("{name}.dt must be positive, got {dt}"));
                    return None;
                }
                Some(Arc::new(Unicycle { dt: *dt }))
            }
            ModelConfig::Linear { a, b } => {
                let a = rows_to_matrix(a, &format!("{name}.a"), errors)?;
                let b = rows_to_matrix(b, &format!("{name}.b"), errors)?;
                match Linear::new(a, b) {
                    Ok(m) => Some(Arc::new(m)),
                    Err(e) => {
                        errors.push(format!("{name}: {e}"));
                        None
                    }
                }
            }
            ModelConfig::LinearSine {
                a,
                b,
                amplitude,
                forcing,
            } => sine(a, b, *amplitude, *forcing, None, errors),
            ModelConfig::LeaderSine {
                a,
                b,
                amplitude,
                forcing,
                time_amplitude,
                time_frequency,
            } => sine(
                a,
                b,
                *amplitude,
                *forcing,
                Some(TimeForcing {
                    amplitude: *time_amplitude,
                    frequency: *time_frequency,
                }),
                errors,
            ),
        }
    }
}

/// `[i, j]` or `[i, j, a_ij]`: agent `i` listens to agent `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EdgeEntry {
    Plain(usize, usize),
    Weighted(usize, usize, f64),
}

impl EdgeEntry {
    fn parts(&self) -> (usize, usize, f64) {
        match *self {
            EdgeEntry::Plain(i, j) => (i, j, 1.0),
            EdgeEntry::Weighted(i, j, a) => (i, j, a),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub n: usize,
    pub edges: Vec<EdgeEntry>,
    #[serde(default)]
    pub leader_links: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub state: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<Vec<f64>>,
    /// Replaces the shared `[model]` for this agent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    /// Replaces `cost.r` for this agent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Weight>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaderConfig {
    pub model: ModelConfig,
    pub state: Vec<f64>,
    /// Constant input; zero when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeOverride {
    pub i: usize,
    pub j: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Weight>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<Weight>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub q: Weight,
    pub r: Weight,
    #[serde(default)]
    pub d: Weight,
    #[serde(default)]
    pub w: Weight,
    #[serde(default)]
    pub e: Weight,
    /// State components whose errors are angle differences.
    #[serde(default)]
    pub wrapped_components: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edges: Vec<EdgeOverride>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiniteConfig {
    pub horizon: usize,
}

fn default_threshold() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Components entering the consensus error; all when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_components: Option<Vec<usize>>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            error_components: None,
            threshold: default_threshold(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// Seeds the message-drop stream; nothing else is random.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mpc: Option<MpcConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finite_horizon: Option<FiniteConfig>,
    #[serde(default)]
    pub metrics: MetricsConfig,
    pub topology: TopologyConfig,
    pub model: ModelConfig,
    pub cost: CostConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leader: Option<LeaderConfig>,
    pub agents: Vec<AgentConfig>,
}

/// Parses `text` with `key=value` overrides applied on the raw tree first.
pub fn parse_config(text: &str, origin: &str, overrides: &[String]) -> Result<ScenarioConfig> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(vec![format!("{origin}: {e}")]))?;
    for ov in overrides {
        apply_override(&mut table, ov)?;
    }
    let mut cfg: ScenarioConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(vec![format!("{origin}: {}", e.message())]))?;
    cfg.normalize();
    Ok(cfg)
}

/// Reads a scenario from a file path, or from a shipped preset when no such
/// file exists.
pub fn load_config(source: &str, overrides: &[String]) -> Result<ScenarioConfig> {
    let path = Path::new(source);
    if path.exists() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_config(&text, source, overrides)
    } else if let Some(text) = preset(source) {
        parse_config(text, source, overrides)
    } else {
        let names: Vec<&str> = preset_names().collect();
        Err(Error::Config(vec![format!(
            "`{source}` is neither a file nor a preset (presets: {})",
            names.join(", ")
        )]))
    }
}

pub fn load_scenario(source: &str) -> Result<Scenario> {
    load_config(source, &[])?.resolve()
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `dotted.path=value` override. Numeric segments index arrays;
/// missing tables are created.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(vec![format!("override `{spec}` is not of the form key=value")]))?;
    let segments: Vec<&str> = key.trim().split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(vec![format!("override key `{key}` has an empty segment")]));
    }
    let value = parse_value(raw.trim());
    let bad = |msg: &str| Error::Config(vec![format!("override `{key}`: {msg}")]);
    let (last, parents) = segments.split_last().expect("non-empty");
    let mut cursor: &mut toml::Value = {
        let first = parents.first().copied();
        match first {
            None => {
                table.insert((*last).to_string(), value);
                return Ok(());
            }
            Some(f) => table
                .entry(f.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new())),
        }
    };
    for seg in &parents[1..] {
        cursor = match cursor {
            toml::Value::Table(t) => t
                .entry(seg.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new())),
            toml::Value::Array(a) => {
                let idx: usize = seg.parse().map_err(|_| bad("array segment must be an index"))?;
                let len = a.len();
                a.get_mut(idx)
                    .ok_or_else(|| bad(&format!("index {idx} out of range (length {len})")))?
            }
            _ => return Err(bad(&format!("`{seg}` is inside a scalar"))),
        };
    }
    match cursor {
        toml::Value::Table(t) => {
            t.insert((*last).to_string(), value);
        }
        toml::Value::Array(a) => {
            let idx: usize = last.parse().map_err(|_| bad("array segment must be an index"))?;
            let len = a.len();
            *a.get_mut(idx)
                .ok_or_else(|| bad(&format!("index {idx} out of range (length {len})")))? = value;
        }
        _ => return Err(bad("parent is a scalar")),
    }
    Ok(())
}

/// How the scenario is solved.
#[derive(Debug, Clone, PartialEq)]
pub enum Mode {
    /// Receding horizon, leaderless or leader-follower.
    Mpc(MpcConfig),
    /// One distributed solve over a fixed horizon.
    Finite { horizon: usize },
}

/// A validated scenario ready to run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub network: Network,
    pub initial_states: Vec<Vector>,
    pub leader_state: Option<Vector>,
    pub mode: Mode,
}

impl ScenarioConfig {
    fn normalize(&mut self) {
        self.model.normalize();
        for a in &mut self.agents {
            if let Some(m) = a.model.as_mut() {
                m.normalize();
            }
        }
        if let Some(l) = self.leader.as_mut() {
            l.model.normalize();
        }
    }

    /// The resolved configuration as TOML; loading it back yields an equal
    /// configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config always serializes")
    }

    /// Cross-checks every section and builds the runtime objects.
    pub fn resolve(self) -> Result<Scenario> {
        let mut errors = Vec::new();
        let n = self.topology.n;
        if n < 2 {
            errors.push(format!("topology.n must be at least 2, got {n}"));
        }
        if self.agents.len() != n {
            errors.push(format!("topology.n is {n} but {} [[agents]] entries are given", self.agents.len()));
        }

        let mut seen = std::collections::BTreeSet::new();
        let mut edges = Vec::new();
        for e in &self.topology.edges {
            let (i, j, a) = e.parts();
            let mut ok = true;
            if i == 0 || i > n || j == 0 || j > n {
                errors.push(format!("edge ({i},{j}) references an agent outside 1..={n}"));
                ok = false;
            } else if i == j {
                errors.push(format!("edge ({i},{i}) is a self-loop"));
                ok = false;
            }
            if !(a > 0.0) || !a.is_finite() {
                errors.push(format!("edge ({i},{j}) needs a positive weight, got {a}"));
                ok = false;
            }
            if !seen.insert((i, j)) {
                errors.push(format!("edge ({i},{j}) is listed twice"));
                ok = false;
            }
            if ok {
                edges.push((i, j, a));
            }
        }
        for &l in &self.topology.leader_links {
            if l == 0 || l > n {
                errors.push(format!("leader link {l} is outside 1..={n}"));
            }
        }
        let has_links = !self.topology.leader_links.is_empty();
        match (&self.leader, has_links) {
            (None, true) => errors.push("topology.leader_links is non-empty but there is no [leader] section".into()),
            (Some(_), false) => errors.push("a [leader] section is given but topology.leader_links is empty".into()),
            _ => {}
        }

        let mut mode = None;
        match (&self.mpc, &self.finite_horizon) {
            (Some(_), Some(_)) => errors.push("give either [mpc] or [finite_horizon], not both".into()),
            (None, None) => errors.push("one of [mpc] or [finite_horizon] is required".into()),
            (Some(m), None) => {
                if let Err(Error::Config(list)) = m.validate() {
                    errors.extend(list);
                }
                mode = Some(Mode::Mpc(m.clone()));
            }
            (None, Some(f)) => {
                if f.horizon < 1 {
                    errors.push("finite_horizon.horizon must be at least 1".into());
                }
                mode = Some(Mode::Finite { horizon: f.horizon });
            }
        }
        if let Err(Error::Config(list)) = self.solver.validate() {
            errors.extend(list);
        }
        if !(self.metrics.threshold > 0.0) {
            errors.push(format!("metrics.threshold must be positive, got {}", self.metrics.threshold));
        }

        let shared = self.model.build("model", &mut errors);
        let mut models: Vec<Option<Arc<dyn Dynamics>>> = Vec::new();
        for (idx, a) in self.agents.iter().enumerate() {
            let m = match &a.model {
                Some(m) => m.build(&format!("agents[{idx}].model"), &mut errors),
                None => shared.clone(),
            };
            models.push(m);
        }
        let mut initial_states = Vec::new();
        let mut offsets = Vec::new();
        for (idx, (a, m)) in self.agents.iter().zip(&models).enumerate() {
            let agent = idx + 1;
            if let Some(m) = m {
                let p = m.state_dim();
                if a.state.len() != p {
                    errors.push(format!("agent {agent} state has {} entries, model `{}` needs {p}", a.state.len(), m.name()));
                }
                if let Some(o) = &a.offset {
                    if o.len() != p {
                        errors.push(format!("agent {agent} offset has {} entries, expected {p}", o.len()));
                    }
                }
                if let Some(mask) = &self.metrics.error_components {
                    if let Some(&k) = mask.iter().find(|&&k| k >= p) {
                        errors.push(format!("metrics.error_components entry {k} is out of range for agent {agent}"));
                    }
                }
                if let Some(&k) = self.cost.wrapped_components.iter().find(|&&k| k >= p) {
                    errors.push(format!("cost.wrapped_components entry {k} is out of range for agent {agent}"));
                }
            }
            initial_states.push(Vector::from_vec(a.state.clone()));
            offsets.push(a.offset.clone().map(Vector::from_vec));
        }
        if a_nonfinite(&self.agents) {
            errors.push("initial states and offsets must be finite".into());
        }

        let mut leader_spec = None;
        let mut leader_state = None;
        if let Some(l) = &self.leader {
            if let Some(model) = l.model.build("leader.model", &mut errors) {
                let control = Vector::from_vec(l.control.clone().unwrap_or_else(|| vec![0.0; model.control_dim()]));
                if l.state.len() != model.state_dim() {
                    errors.push(format!(
                        "leader state has {} entries, model `{}` needs {}",
                        l.state.len(),
                        model.name(),
                        model.state_dim()
                    ));
                }
                if control.len() != model.control_dim() {
                    errors.push(format!(
                        "leader control has {} entries, model `{}` takes {}",
                        control.len(),
                        model.name(),
                        model.control_dim()
                    ));
                }
                leader_state = Some(Vector::from_vec(l.state.clone()));
                leader_spec = Some(LeaderSpec { model, control });
            }
        }

        for ov in &self.cost.edges {
            if !seen.contains(&(ov.i, ov.j)) {
                errors.push(format!("cost.edges references edge ({},{}) which is not in the topology", ov.i, ov.j));
            }
        }

        if !errors.is_empty() || models.iter().any(Option::is_none) {
            return Err(Error::Config(errors));
        }
        let models: Vec<Arc<dyn Dynamics>> = models.into_iter().map(Option::unwrap).collect();
        let topology = Topology::new(n, edges, self.topology.leader_links.iter().copied())
            .map_err(|e| Error::Config(vec![e.to_string()]))?;

        let state_dims: Vec<usize> = models.iter().map(|m| m.state_dim()).collect();
        let control_dims: Vec<usize> = models.iter().map(|m| m.control_dim()).collect();
        let mut cost_edges = BTreeMap::new();
        for (i, j, _) in topology.edges() {
            let p = state_dims[i - 1];
            let ov = self.cost.edges.iter().find(|o| o.i == i && o.j == j);
            let q = ov.and_then(|o| o.q.as_ref()).unwrap_or(&self.cost.q);
            let d = ov.and_then(|o| o.d.as_ref()).unwrap_or(&self.cost.d);
            cost_edges.insert(
                (i, j),
                EdgeWeights {
                    q: q.to_matrix(p, &format!("Q({i},{j})"), &mut errors),
                    d: d.to_matrix(p, &format!("D({i},{j})"), &mut errors),
                },
            );
        }
        let mut agents = Vec::new();
        for (idx, a) in self.agents.iter().enumerate() {
            let agent = idx + 1;
            let (p, m) = (state_dims[idx], control_dims[idx]);
            let linked = topology.is_leader_linked(agent);
            agents.push(AgentWeights {
                r: a.r.as_ref().unwrap_or(&self.cost.r).to_matrix(m, &format!("R({agent})"), &mut errors),
                w: linked.then(|| self.cost.w.to_matrix(p, &format!("W({agent})"), &mut errors)),
                e: linked.then(|| self.cost.e.to_matrix(p, &format!("E({agent})"), &mut errors)),
                offset: offsets[idx].clone().unwrap_or_else(|| Vector::zeros(p)),
            });
        }
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        let spec = CostSpec::new(&topology, &state_dims, &control_dims, cost_edges, agents)?
            .with_wrapped_components(self.cost.wrapped_components.clone())?;
        let network = Network::new(topology, models, spec, leader_spec)?;
        Ok(Scenario {
            mode: mode.expect("checked above"),
            config: self,
            network,
            initial_states,
            leader_state,
        })
    }
}

fn a_nonfinite(agents: &[AgentConfig]) -> bool {
    agents.iter().any(|a| {
        a.state.iter().chain(a.offset.iter().flatten()).any(|v| !v.is_finite())
    })
}

impl Scenario {
    pub fn run_options(&self, execution: Execution) -> RunOptions {
        RunOptions {
            execution,
            seed: self.config.seed,
            error_components: self.config.metrics.error_components.clone(),
        }
    }

    /// Step-wise driver; only available in receding-horizon mode.
    pub fn session(&self, execution: Execution) -> Result<Session<'_>> {
        match &self.mode {
            Mode::Mpc(mpc) => Session::new(
                &self.network,
                self.config.solver.clone(),
                mpc.clone(),
                self.run_options(execution),
                self.initial_states.clone(),
                self.leader_state.clone(),
            ),
            Mode::Finite { .. } => Err(Error::Argument(
                "step-wise sessions need an [mpc] section".into(),
            )),
        }
    }

    /// Adjoint derivatives of `agent` against finite differences at the start
    /// of closed-loop step `t` (after `t` applied steps). Finite-horizon mode
    /// only has `t = 0`, evaluated at zero controls.
    pub fn gradient_check(&self, agent: usize, t: usize) -> Result<GradientCheck> {
        match &self.mode {
            Mode::Mpc(mpc) => {
                if t >= mpc.steps {
                    return Err(Error::Argument(format!("t = {t} is outside 0..{}", mpc.steps)));
                }
                let mut session = self.session(Execution::Sequential)?;
                for _ in 0..t {
                    session.step()?;
                }
                session.gradient_check(agent)
            }
            Mode::Finite { horizon } => {
                if t != 0 {
                    return Err(Error::Argument("finite-horizon scenarios only have t = 0".into()));
                }
                let leader = match (&self.network.leader, &self.leader_state) {
                    (Some(l), Some(x)) => {
                        let u = ControlSequence::new(vec![l.control.clone(); *horizon])?;
                        Some(Arc::new(rollout(l.model.as_ref(), x, &u, 0)?))
                    }
                    _ => None,
                };
                let window = Window {
                    x0: self.initial_states.clone(),
                    k0: 0,
                    controls: self
                        .network
                        .models
                        .iter()
                        .map(|m| ControlSequence::zeros(*horizon, m.control_dim()))
                        .collect(),
                    leader,
                };
                coordinator::gradient_check(&self.network, &window, agent)
            }
        }
    }

    /// Runs the scenario to completion. In finite-horizon mode the record
    /// holds the converged predicted trajectories, with a single entry in
    /// `window_costs`, `rounds` and `converged`.
    pub fn run(&self, execution: Execution) -> Result<RunResult> {
        let opts = self.run_options(execution);
        match &self.mode {
            Mode::Mpc(mpc) => {
                if self.network.leader.is_some() {
                    coordinator::run_mpc_leader_follower(
                        &self.network,
                        self.config.solver.clone(),
                        mpc.clone(),
                        opts,
                        self.initial_states.clone(),
                        self.leader_state.clone(),
                    )
                } else {
                    coordinator::run_mpc_leaderless(
                        &self.network,
                        self.config.solver.clone(),
                        mpc.clone(),
                        opts,
                        self.initial_states.clone(),
                    )
                }
            }
            Mode::Finite { horizon } => {
                let out = coordinator::run_algorithm1(
                    &self.network,
                    &self.config.solver,
                    *horizon,
                    self.initial_states.clone(),
                    self.leader_state.clone(),
                    execution,
                )?;
                let offsets: Vec<Vector> = (1..=self.network.n()).map(|i| self.network.spec.offset(i).clone()).collect();
                let errors = (0..=*horizon)
                    .map(|t| {
                        let xs: Vec<Vector> = out.trajectories.iter().map(|tr| tr.state(t).clone()).collect();
                        consensus_error(
                            &xs,
                            &self.network.topology,
                            &offsets,
                            opts.error_components.as_deref(),
                            out.leader_trajectory.as_ref().map(|l| l.state(t)),
                        )
                    })
                    .collect();
                Ok(RunResult {
                    states: out.trajectories.iter().map(|t| t.states().to_vec()).collect(),
                    controls: out.controls.iter().map(|u| u.controls().to_vec()).collect(),
                    leader_states: out.leader_trajectory.as_ref().map(|l| l.states().to_vec()),
                    errors,
                    window_costs: vec![out.cost],
                    rounds: vec![out.rounds],
                    converged: vec![out.converged],
                })
            }
        }
    }
}

/// Summary written to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub name: String,
    pub mode: String,
    /// Closed-loop steps (or horizon length in finite mode).
    pub steps: usize,
    pub final_max_error: f64,
    pub threshold: f64,
    /// First `t` from which the max error stays at or below the threshold.
    pub steps_to_threshold: Option<usize>,
    pub rounds: Vec<usize>,
    pub total_rounds: usize,
    pub converged: bool,
    pub nonconverged_steps: Vec<usize>,
    pub final_window_cost: f64,
}

/// Everything a run writes, held in memory so it can be compared.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub trajectories_csv: String,
    pub errors_csv: String,
    pub metrics: Metrics,
    pub config_toml: String,
}

pub const TRAJECTORIES_FILE: &str = "trajectories.csv";
pub const ERRORS_FILE: &str = "errors.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const TIMING_FILE: &str = "timing.json";

/// First index from which every value is at or below `threshold`.
pub fn steps_to_threshold(max_errors: &[f64], threshold: f64) -> Option<usize> {
    let mut first = None;
    for (t, &e) in max_errors.iter().enumerate() {
        if e <= threshold {
            first.get_or_insert(t);
        } else {
            first = None;
        }
    }
    first
}

fn push_row(out: &mut String, cells: &[String]) {
    out.push_str(&cells.join(","));
    out.push('\n');
}

/// Renders a run into its artifacts.
pub fn emit_results(result: &RunResult, scenario: &Scenario) -> RunArtifacts {
    let net = &scenario.network;
    let p = net.models.iter().map(|m| m.state_dim()).max().unwrap_or(0);
    let m = net.models.iter().map(|m| m.control_dim()).max().unwrap_or(0);
    let p_all = p.max(net.leader.as_ref().map_or(0, |l| l.model.state_dim()));
    let m_all = m.max(net.leader.as_ref().map_or(0, |l| l.model.control_dim()));

    let mut traj = String::new();
    let mut header = vec!["t".to_string(), "agent".to_string()];
    header.extend((0..p_all).map(|k| format!("x{k}")));
    header.extend((0..m_all).map(|k| format!("u{k}")));
    push_row(&mut traj, &header);
    let steps = result.states.first().map_or(0, |s| s.len());
    let row = |t: usize, who: String, x: &Vector, u: Option<&Vector>| {
        let mut cells = vec![t.to_string(), who];
        cells.extend((0..p_all).map(|k| x.get(k).map_or(String::new(), |v| v.to_string())));
        cells.extend((0..m_all).map(|k| u.and_then(|u| u.get(k)).map_or(String::new(), |v| v.to_string())));
        cells
    };
    for t in 0..steps {
        for (idx, xs) in result.states.iter().enumerate() {
            push_row(&mut traj, &row(t, (idx + 1).to_string(), &xs[t], result.controls[idx].get(t)));
        }
        if let (Some(ls), Some(l)) = (&result.leader_states, &net.leader) {
            let u = (t + 1 < steps).then_some(&l.control);
            push_row(&mut traj, &row(t, "l".into(), &ls[t], u));
        }
    }

    let mut errs = String::new();
    let mut header = vec!["t".to_string(), "pair".to_string(), "error".to_string()];
    header.extend((0..p_all).map(|k| format!("d{k}")));
    push_row(&mut errs, &header);
    let diff_cells = |d: &Vector| -> Vec<String> {
        (0..p_all).map(|k| d.get(k).map_or(String::new(), |v| v.abs().to_string())).collect()
    };
    for (t, e) in result.errors.iter().enumerate() {
        for &(i, j, v) in &e.edges {
            let d = (&result.states[i - 1][t] - net.spec.offset(i)) - (&result.states[j - 1][t] - net.spec.offset(j));
            let mut cells = vec![t.to_string(), format!("{i}-{j}"), v.to_string()];
            cells.extend(diff_cells(&d));
            push_row(&mut errs, &cells);
        }
        for &(i, v) in &e.leader {
            let xl = &result.leader_states.as_ref().expect("leader errors imply leader states")[t];
            let d = (&result.states[i - 1][t] - net.spec.offset(i)) - xl;
            let mut cells = vec![t.to_string(), format!("{i}-l"), v.to_string()];
            cells.extend(diff_cells(&d));
            push_row(&mut errs, &cells);
        }
    }

    let max_errors: Vec<f64> = result.errors.iter().map(|e| e.max).collect();
    let threshold = scenario.config.metrics.threshold;
    let metrics = Metrics {
        name: scenario.config.name.clone(),
        mode: match scenario.mode {
            Mode::Mpc(_) => "mpc".into(),
            Mode::Finite { .. } => "finite".into(),
        },
        steps: steps.saturating_sub(1),
        final_max_error: max_errors.last().copied().unwrap_or(0.0),
        threshold,
        steps_to_threshold: steps_to_threshold(&max_errors, threshold),
        rounds: result.rounds.clone(),
        total_rounds: result.rounds.iter().sum(),
        converged: result.all_converged(),
        nonconverged_steps: result
            .converged
            .iter()
            .enumerate()
            .filter(|(_, &c)| !c)
            .map(|(t, _)| t)
            .collect(),
        final_window_cost: result.window_costs.last().copied().unwrap_or(0.0),
    };
    RunArtifacts {
        trajectories_csv: traj,
        errors_csv: errs,
        metrics,
        config_toml: scenario.config.to_toml(),
    }
}

impl RunArtifacts {
    /// Writes the four deterministic files into `dir`, creating it.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let metrics = serde_json::to_string_pretty(&self.metrics)
            .map_err(|e| Error::Internal(format!("metrics serialization: {e}")))?;
        let files = [
            (TRAJECTORIES_FILE, self.trajectories_csv.as_str()),
            (ERRORS_FILE, self.errors_csv.as_str()),
            (METRICS_FILE, metrics.as_str()),
            (CONFIG_FILE, self.config_toml.as_str()),
        ];
        let mut written = Vec::new();
        for (name, body) in files {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Wall time goes to its own file so the other artifacts stay bit-exact.
pub fn write_timing(dir: &Path, wall_seconds: f64) -> Result<PathBuf> {
    let path = dir.join(TIMING_FILE);
    let body = serde_json::json!({ "wall_seconds": wall_seconds }).to_string();
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Rebuilds the per-step max error column from an `errors.csv` body.
pub fn max_errors_from_csv(csv: &str) -> Result<Vec<f64>> {
    let mut by_t: BTreeMap<usize, f64> = BTreeMap::new();
    let mut lines = csv.lines();
    let header = lines.next().ok_or_else(|| Error::Argument("errors.csv is empty".into()))?;
    let col = header
        .split(',')
        .position(|h| h == "error")
        .ok_or_else(|| Error::Argument("errors.csv has no `error` column".into()))?;
    for (n, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        let parse_err = || Error::Argument(format!("errors.csv line {}: malformed row", n + 2));
        let t: usize = cells.first().and_then(|c| c.parse().ok()).ok_or_else(parse_err)?;
        let v: f64 = cells.get(col).and_then(|c| c.parse().ok()).ok_or_else(parse_err)?;
        let slot = by_t.entry(t).or_insert(0.0);
        *slot = slot.max(v);
    }
    Ok(by_t.into_values().collect())
}

/// Renders the config echo shown by `check`.
pub fn describe(scenario: &Scenario) -> String {
    let mut s = String::new();
    let net = &scenario.network;
    let _ = writeln!(s, "scenario `{}`: {} agents, {} edges", scenario.config.name, net.n(), net.topology.edges().count());
    match &scenario.mode {
        Mode::Mpc(m) => {
            let _ = writeln!(s, "mode: receding horizon, N_p = {}, T = {}", m.horizon, m.steps);
        }
        Mode::Finite { horizon } => {
            let _ = writeln!(s, "mode: finite horizon, H = {horizon}");
        }
    }
    if net.leader.is_some() {
        let links: Vec<String> = net.topology.leader_links().iter().map(usize::to_string).collect();
        let _ = writeln!(s, "leader linked to: {}", links.join(", "));
    }
    s.push_str(&scenario.config.to_toml());
    s
}
