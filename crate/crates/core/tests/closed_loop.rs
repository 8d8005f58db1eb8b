use concord_core::coordinator::{run_algorithm1, Execution, Sender};
use concord_core::scenario::{load_config, load_scenario, parse_config, steps_to_threshold};
use concord_core::solver::SolverConfig;

const STILL_LEADER: &str = r#"
name = "still"

[mpc]
horizon = 5
steps = 10

[topology]
n = 3
edges = [[2, 1], [3, 2]]
leader_links = [1]

[model]
kind = "linear"
a = [[1.0, 0.1], [0.0, 1.0]]
b = [[0.0], [0.1]]

[leader]
state = [0.5, 0.0]

[leader.model]
kind = "linear"
a = [[1.0, 0.1], [0.0, 1.0]]
b = [[0.0], [0.1]]

[cost]
q = 1.0
r = 1.0
w = 1.0

[[agents]]
state = [0.5, 0.0]

[[agents]]
state = [0.5, 0.0]

[[agents]]
state = [0.5, 0.0]
"#;

#[test]
fn messages_only_travel_along_edges() {
    let sc = load_config("formation", &["mpc.steps=5".into()]).unwrap().resolve().unwrap();
    let mut session = sc.session(Execution::Parallel).unwrap();
    for _ in 0..5 {
        session.step().unwrap();
    }
    let topo = &sc.network.topology;
    assert!(!session.deliveries().is_empty());
    for (&(receiver, sender), &count) in session.deliveries() {
        assert!(count > 0);
        match sender {
            Sender::Agent(j) => assert!(topo.has_edge(receiver, j), "{j} -> {receiver} is not an edge"),
            Sender::Leader => assert!(topo.is_leader_linked(receiver), "leader -> {receiver} is not linked"),
        }
    }
}

#[test]
fn followers_on_a_still_leader_stay_put() {
    let sc = parse_config(STILL_LEADER, "still", &[]).unwrap().resolve().unwrap();
    let res = sc.run(Execution::Sequential).unwrap();
    for us in &res.controls {
        for u in us {
            assert_eq!(u.amax(), 0.0);
        }
    }
    assert!(res.errors.iter().all(|e| e.max == 0.0));
    assert!(res.all_converged());
}

#[test]
fn formation_holds_its_shape() {
    let sc = load_scenario("formation").unwrap();
    let res = sc.run(Execution::Parallel).unwrap();
    let max: Vec<f64> = res.errors.iter().map(|e| e.max).collect();
    assert_eq!(res.steps(), 300);
    assert!(*max.last().unwrap() < 0.05, "final error {}", max.last().unwrap());
    assert!(steps_to_threshold(&max, 0.05).is_some());
}

#[test]
fn leader_follower_window_costs_shrink_before_tracking_settles() {
    let sc = load_scenario("leader_follower").unwrap();
    let res = sc.run(Execution::Parallel).unwrap();
    let costs = &res.window_costs;
    for k in 0..12 {
        assert!(costs[k + 1] <= costs[k], "window {k}: {} -> {}", costs[k], costs[k + 1]);
    }
    assert!(costs.last().unwrap() < &(costs[0] * 1e-3));
}

#[test]
fn algorithm1_lowers_the_global_cost_every_round() {
    let sc = load_scenario("agv_rendezvous").unwrap();
    let solver = SolverConfig {
        c: 2.0,
        max_outer: 50,
        ..sc.config.solver.clone()
    };
    let out = run_algorithm1(&sc.network, &solver, 8, sc.initial_states.clone(), None, Execution::Parallel).unwrap();
    let costs = &out.round_costs;
    assert!(costs.len() >= 2);
    for w in costs.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-9), "{} -> {}", w[0], w[1]);
    }
    assert!(out.cost < costs[0] * 0.5);
}

#[test]
fn scalar_chain_reaches_the_gradient_tolerance() {
    let sc = load_scenario("scalar_chain").unwrap();
    let res = sc.run(Execution::Sequential).unwrap();
    assert!(res.all_converged());
    assert_eq!(res.rounds.len(), 1);
    assert_eq!(res.states[0].len(), 11);
    let first = res.errors.first().unwrap().max;
    let last = res.errors.last().unwrap().max;
    assert!(last < first);
}

#[test]
fn baseline_runs_the_same_protocol() {
    let sc = load_config("scalar_chain", &["solver.method=\"msa\"".into(), "solver.max_outer=50".into()])
        .unwrap()
        .resolve()
        .unwrap();
    let res = sc.run(Execution::Sequential).unwrap();
    assert_eq!(res.rounds, vec![50]);
    assert!(!res.all_converged());
    assert!(res.window_costs[0].is_finite());
}
