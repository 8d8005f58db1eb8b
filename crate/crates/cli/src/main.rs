use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use concord_core::coordinator::Execution;
use concord_core::scenario::{self, Scenario};
use concord_core::solver::Method;
use concord_core::Error;

/// Distributed optimal consensus for nonlinear multi-agent systems.
#[derive(Parser)]
#[command(name = "concord", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Source {
    /// Scenario file, or the name of a shipped preset.
    scenario: String,
    /// Dotted-path override, e.g. `solver.c=2.0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its artifacts.
    Run {
        #[command(flatten)]
        source: Source,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed for the message-drop stream.
        #[arg(long)]
        seed: Option<u64>,
        /// Solve agents one after another instead of in parallel.
        #[arg(long)]
        sequential: bool,
    },
    /// Validate a scenario and print the resolved configuration.
    Check {
        #[command(flatten)]
        source: Source,
    },
    /// Compare adjoint derivatives with finite differences.
    Gradcheck {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        agent: usize,
        /// Closed-loop step at which to evaluate.
        #[arg(long, default_value_t = 0)]
        t: usize,
        /// Directory for gradient.csv and hessian.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare outer-iteration counts of the update rules.
    Bench {
        #[command(flatten)]
        source: Source,
        #[arg(long, value_delimiter = ',', default_value = "ocp,msa")]
        methods: Vec<Method>,
    },
}

const EXIT_CONFIG: u8 = 1;
const EXIT_NUMERIC: u8 = 2;
const EXIT_NONCONVERGED: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) | Error::Internal(_) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

fn default_out(scenario: &Scenario, sub: &str) -> PathBuf {
    if let Some(dir) = &scenario.config.output_dir {
        return PathBuf::from(dir);
    }
    let root = std::env::var_os("CONCORD_OUT_DIR").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(&scenario.config.name).join(sub)
}

fn load(source: &Source) -> Result<Scenario, Error> {
    scenario::load_config(&source.scenario, &source.set)?.resolve()
}

fn run(source: Source, out: Option<PathBuf>, seed: Option<u64>, sequential: bool) -> Result<u8, Error> {
    let mut cfg = scenario::load_config(&source.scenario, &source.set)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let sc = cfg.resolve()?;
    let dir = out.unwrap_or_else(|| default_out(&sc, "run"));
    let exec = if sequential { Execution::Sequential } else { Execution::Parallel };
    let start = Instant::now();
    let result = sc.run(exec)?;
    let wall = start.elapsed().as_secs_f64();
    let artifacts = scenario::emit_results(&result, &sc);
    artifacts.write(&dir)?;
    scenario::write_timing(&dir, wall)?;
    let m = &artifacts.metrics;
    println!("scenario:           {}", m.name);
    println!("steps:              {}", m.steps);
    println!("final max error:    {:.6e}", m.final_max_error);
    match m.steps_to_threshold {
        Some(t) => println!("steps to threshold: {t} (threshold {})", m.threshold),
        None => println!("steps to threshold: never (threshold {})", m.threshold),
    }
    println!("total rounds:       {}", m.total_rounds);
    println!("wall time:          {wall:.3} s");
    println!("artifacts:          {}", dir.display());
    if m.converged {
        Ok(0)
    } else {
        eprintln!(
            "warning: round cap hit at {} step(s): {:?}",
            m.nonconverged_steps.len(),
            &m.nonconverged_steps[..m.nonconverged_steps.len().min(10)]
        );
        Ok(EXIT_NONCONVERGED)
    }
}

fn gradcheck(source: Source, agent: usize, t: usize, out: Option<PathBuf>) -> Result<u8, Error> {
    let sc = load(&source)?;
    let check = sc.gradient_check(agent, t)?;
    let dir = out.unwrap_or_else(|| default_out(&sc, &format!("gradcheck_agent{agent}_t{t}")));
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;

    let mut g = String::from("index,adjoint,finite_difference,abs_error\n");
    for k in 0..check.gradient.len() {
        let (a, f) = (check.gradient[k], check.fd_gradient[k]);
        g.push_str(&format!("{k},{a},{f},{}\n", (a - f).abs()));
    }
    let mut h = String::from("row,col,adjoint,finite_difference,abs_error\n");
    for r in 0..check.hessian.nrows() {
        for c in 0..check.hessian.ncols() {
            let (a, f) = (check.hessian[(r, c)], check.fd_hessian[(r, c)]);
            h.push_str(&format!("{r},{c},{a},{f},{}\n", (a - f).abs()));
        }
    }
    for (name, body) in [("gradient.csv", g), ("hessian.csv", h)] {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    }
    let asym = (&check.hessian - check.hessian.transpose()).amax();
    println!("agent {agent}, step {t}");
    println!("gradient relative error: {:.3e}", check.gradient_error());
    println!("hessian relative error:  {:.3e}", check.hessian_error());
    println!("hessian asymmetry:       {asym:.3e}");
    println!("written to {}", dir.display());
    Ok(0)
}

fn bench(source: Source, methods: Vec<Method>) -> Result<u8, Error> {
    println!(
        "{:<8} {:>12} {:>12} {:>10} {:>16} {:>10}",
        "method", "total_iters", "max_per_step", "converged", "final_max_error", "wall_ms"
    );
    for method in methods {
        let mut cfg = scenario::load_config(&source.scenario, &source.set)?;
        cfg.solver.method = method;
        let sc = cfg.resolve()?;
        let start = Instant::now();
        let result = sc.run(Execution::Parallel)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        println!(
            "{:<8} {:>12} {:>12} {:>10} {:>16.6e} {:>10.1}",
            method.to_string(),
            result.rounds.iter().sum::<usize>(),
            result.rounds.iter().max().copied().unwrap_or(0),
            result.all_converged(),
            result.errors.last().map_or(0.0, |e| e.max),
            ms
        );
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run {
            source,
            out,
            seed,
            sequential,
        } => run(source, out, seed, sequential),
        Command::Check { source } => load(&source).map(|sc| {
            print!("{}", scenario::describe(&sc));
            0
        }),
        Command::Gradcheck { source, agent, t, out } => gradcheck(source, agent, t, out),
        Command::Bench { source, methods } => bench(source, methods),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
