//! Directed communication topology.
//!
//! An edge `(i, j)` means agent `i` listens to agent `j` (`j` is in the
//! neighbor set of `i`), so information travels from `j` to `i`. Agents are
//! numbered `1..=n`; the leader, when present, is node `0`. It is never
//! optimized and only has out-edges towards the agents in `leader_links`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::error::{Error, Result};

/// Node index reserved for the leader.
pub const LEADER: usize = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    n: usize,
    edges: BTreeMap<(usize, usize), f64>,
    leader_links: BTreeSet<usize>,
}

impl Topology {
    /// Builds a topology from `(i, j, a_ij)` triples. Duplicate edges are
    /// rejected rather than merged.
    pub fn new(
        n: usize,
        edges: impl IntoIterator<Item = (usize, usize, f64)>,
        leader_links: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        if n < 2 {
            return Err(Error::Argument(format!("need at least 2 agents, got {n}")));
        }
        let mut map = BTreeMap::new();
        for (i, j, w) in edges {
            if i == 0 || i > n || j == 0 || j > n {
                return Err(Error::Argument(format!(
                    "edge ({i},{j}) references an agent outside 1..={n}"
                )));
            }
            if i == j {
                return Err(Error::Argument(format!("self-loop ({i},{i}) is not allowed")));
            }
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::Argument(format!(
                    "edge ({i},{j}) needs a positive finite weight, got {w}"
                )));
            }
            if map.insert((i, j), w).is_some() {
                return Err(Error::Argument(format!("duplicate edge ({i},{j})")));
            }
        }
        let mut links = BTreeSet::new();
        for i in leader_links {
            if i == 0 || i > n {
                return Err(Error::Argument(format!(
                    "leader link {i} is outside 1..={n}"
                )));
            }
            links.insert(i);
        }
        Ok(Self {
            n,
            edges: map,
            leader_links: links,
        })
    }

    /// Unit-weight convenience constructor.
    pub fn from_pairs(n: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        Self::new(n, pairs.iter().map(|&(i, j)| (i, j, 1.0)), [])
    }

    /// Every ordered pair of distinct agents, unit weights.
    pub fn complete(n: usize) -> Result<Self> {
        let edges = (1..=n).flat_map(|i| (1..=n).filter(move |&j| j != i).map(move |j| (i, j, 1.0)));
        Self::new(n, edges, [])
    }

    /// Bidirectional ring 1-2-...-n-1.
    pub fn ring(n: usize) -> Result<Self> {
        let mut edges = Vec::new();
        for i in 1..=n {
            let next = i % n + 1;
            edges.push((i, next, 1.0));
            edges.push((next, i, 1.0));
        }
        edges.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        edges.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
        Self::new(n, edges, [])
    }

    pub fn with_leader_links(mut self, links: impl IntoIterator<Item = usize>) -> Result<Self> {
        let rebuilt = Topology::new(
            self.n,
            self.edges.iter().map(|(&(i, j), &w)| (i, j, w)),
            links,
        )?;
        self.leader_links = rebuilt.leader_links;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.edges.iter().map(|(&(i, j), &w)| (i, j, w))
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains_key(&(i, j))
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.edges.get(&(i, j)).copied().unwrap_or(0.0)
    }

    pub fn leader_links(&self) -> &BTreeSet<usize> {
        &self.leader_links
    }

    pub fn has_leader(&self) -> bool {
        !self.leader_links.is_empty()
    }

    pub fn is_leader_linked(&self, i: usize) -> bool {
        self.leader_links.contains(&i)
    }

    fn check_agent(&self, i: usize) -> Result<()> {
        if i == 0 || i > self.n {
            Err(Error::Argument(format!("agent {i} is outside 1..={}", self.n)))
        } else {
            Ok(())
        }
    }

    /// Agents that `i` listens to, ascending.
    pub fn neighbors(&self, i: usize) -> Result<Vec<usize>> {
        self.check_agent(i)?;
        Ok(self
            .edges
            .range((i, 0)..=(i, usize::MAX))
            .map(|(&(_, j), _)| j)
            .collect())
    }

    /// Adjacency in the direction information flows: `from -> [to...]`.
    /// Index 0 is the leader.
    fn flow_adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n + 1];
        for &(i, j) in self.edges.keys() {
            adj[j].push(i);
        }
        for &i in &self.leader_links {
            adj[LEADER].push(i);
        }
        adj
    }

    fn reachable_from(adj: &[Vec<usize>], root: usize) -> Vec<bool> {
        let mut seen = vec![false; adj.len()];
        let mut queue = VecDeque::from([root]);
        seen[root] = true;
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        seen
    }

    /// First ordered pair `(from, to)` of agents with no directed information
    /// path from `from` to `to`, or `None` when the agent graph is strongly
    /// connected. The leader is ignored.
    pub fn unreachable_pair(&self) -> Option<(usize, usize)> {
        // Strong connectivity holds iff agent 1 reaches everyone and everyone
        // reaches agent 1: one forward and one reverse search.
        let mut forward = self.flow_adjacency();
        forward[LEADER].clear();
        let mut reverse = vec![Vec::new(); self.n + 1];
        for (v, outs) in forward.iter().enumerate() {
            for &w in outs {
                reverse[w].push(v);
            }
        }
        let fwd = Self::reachable_from(&forward, 1);
        if let Some(j) = (1..=self.n).find(|&j| !fwd[j]) {
            return Some((1, j));
        }
        let rev = Self::reachable_from(&reverse, 1);
        (1..=self.n).find(|&j| !rev[j]).map(|j| (j, 1))
    }

    pub fn is_strongly_connected(&self) -> bool {
        self.unreachable_pair().is_none()
    }

    /// Whether some node reaches every other node along the information flow.
    /// With leader links present the leader is the only possible root.
    pub fn has_spanning_tree(&self) -> bool {
        self.spanning_root().is_some()
    }

    /// A root of a spanning tree, if any (`0` denotes the leader).
    pub fn spanning_root(&self) -> Option<usize> {
        let adj = self.flow_adjacency();
        if self.has_leader() {
            let seen = Self::reachable_from(&adj, LEADER);
            return seen.iter().all(|&s| s).then_some(LEADER);
        }
        (1..=self.n).find(|&root| {
            let seen = Self::reachable_from(&adj, root);
            seen[1..].iter().all(|&s| s)
        })
    }
}
