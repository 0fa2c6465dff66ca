use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use num_complex::Complex;

use coalvar::agents::{AgentMode, Role};
use coalvar::baselines::{epsilon_decompose, select_epsilon};
use coalvar::grid::vq_sensitivity_at;
use coalvar::oracle::{snapshot_optimum, Member};
use coalvar::scenario::{
    generate_network, generate_profiles, parse_clock, run_batch, run_scenario, site_seed, write_outputs, Feeder,
    ProfileKind, ScenarioConfig, Simulation, MINUTE_S, STRATEGIES,
};

#[derive(Parser)]
#[command(name = "coalvar", version, about = "Coalition volt/VAR control on radial LV feeders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Proposed,
    Local,
    Centralized,
}

impl From<Strategy> for AgentMode {
    fn from(s: Strategy) -> Self {
        match s {
            Strategy::Proposed => AgentMode::Proposed,
            Strategy::Local => AgentMode::Local,
            Strategy::Centralized => AgentMode::Centralized,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario and write voltages, ratios, events and metrics.
    Run {
        /// Scenario file; the bundled feeder when omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, value_enum)]
        strategy: Option<Strategy>,
        #[arg(long)]
        seed: Option<u64>,
        /// Start of the simulated window, HH:MM.
        #[arg(long)]
        start: Option<String>,
        #[arg(long)]
        duration_s: Option<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Randomized scenarios under every strategy; one CSV row per run.
    Batch {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "batch.csv")]
        out: PathBuf,
    },
    /// Freeze the proposed protocol at a time of day and compare every
    /// coalition leader with the snapshot optimum.
    Oracle {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value = "15:00")]
        at: String,
        /// Ticks to run after freezing.
        #[arg(long, default_value_t = 200)]
        ticks: u64,
    },
    /// Epsilon-decomposition zones of the centralized scheme at a time of day.
    Baseline {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value = "15:00")]
        at: String,
        /// Fixed threshold; otherwise the smallest one that separates conflicts.
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Write the scenario's feeder as a network file.
    GenNetwork {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value = "feeder.net")]
        out: PathBuf,
    },
    /// Write per-site load and PV profiles as CSV.
    GenProfiles {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value = "profiles")]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<ScenarioConfig> {
    match path {
        Some(p) => ScenarioConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(ScenarioConfig::default()),
    }
}

fn feeder_of(cfg: &ScenarioConfig) -> Result<Feeder> {
    Ok(match &cfg.network.file {
        Some(p) => Feeder::load(p)?,
        None => generate_network(&cfg.network_spec())?,
    })
}

/// Runs the scenario from midnight-relative `at` and stops one tick in.
fn simulation_at(cfg: &ScenarioConfig, at: &str, mode: AgentMode, warm_s: f64) -> Result<Simulation> {
    let t = parse_clock(at)?;
    let mut cfg = cfg.clone();
    cfg.strategy = mode;
    cfg.start_s = (t - warm_s).max(0.0);
    cfg.duration_s = t - cfg.start_s + 3600.0;
    let warm = ((t - cfg.start_s) / cfg.tick_s).round() as u64;
    let mut sim = Simulation::new(cfg)?;
    sim.run_until(warm.max(1))?;
    Ok(sim)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run {
            scenario,
            strategy,
            seed,
            start,
            duration_s,
            out,
        } => {
            let mut cfg = load_config(scenario.as_deref())?;
            if let Some(s) = strategy {
                cfg.strategy = s.into();
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = start {
                cfg.start_s = parse_clock(&s)?;
            }
            if let Some(d) = duration_s {
                cfg.duration_s = d;
            }
            cfg.validate()?;
            let res = run_scenario(&cfg)?;
            write_outputs(&res, &out)?;
            println!("{}", res.metrics);
            println!("partition_violations={}", res.partition_violations);
            println!("outputs in {}", out.display());
        }
        Command::Batch { scenario, n, seed, out } => {
            let cfg = load_config(scenario.as_deref())?;
            let summary = run_batch(&cfg, n, seed)?;
            let mut w = csv::Writer::from_path(&out)?;
            w.write_record([
                "scenario",
                "strategy",
                "inverters",
                "lower_violation_min",
                "upper_violation_min",
                "max_u_spread",
                "saturation_min",
            ])?;
            for r in &summary.rows {
                let m = &r.metrics;
                w.write_record([
                    r.seed.to_string(),
                    r.strategy.as_str().to_string(),
                    r.inverters.to_string(),
                    m.lower_violation_min.to_string(),
                    m.upper_violation_min.to_string(),
                    m.max_u_spread.to_string(),
                    m.saturation_min.to_string(),
                ])?;
            }
            w.flush()?;
            println!("strategy      lower_min  upper_min  saturating");
            for s in STRATEGIES {
                let m = summary.mean(s);
                println!(
                    "{:<12} {:>10.3} {:>10.3} {:>10.0}%",
                    s.as_str(),
                    m.lower_violation_min,
                    m.upper_violation_min,
                    summary.saturation_share(s) * 100.0
                );
            }
        }
        Command::Oracle { scenario, at, ticks } => {
            let cfg = load_config(scenario.as_deref())?;
            let params = cfg.params;
            let mut sim = simulation_at(&cfg, &at, AgentMode::Proposed, 3600.0)?;
            sim.freeze();
            for _ in 0..ticks {
                sim.step()?;
            }
            let net = sim.feeder().network.clone();
            println!("leader  members  v_leader  u_leader  u_star  spread");
            for group in sim.coalitions() {
                let Some(leader) = group
                    .iter()
                    .copied()
                    .find(|id| sim.agent(*id).is_some_and(|a| a.state.role == Role::Leader))
                else {
                    continue;
                };
                let us: Vec<f64> = group
                    .iter()
                    .filter_map(|id| sim.agent(*id))
                    .map(|a| a.state.u)
                    .collect();
                let spread = us.iter().cloned().fold(f64::MIN, f64::max) - us.iter().cloned().fold(f64::MAX, f64::min);
                let mut inj = sim.base_injections().to_vec();
                for a in sim.agents() {
                    if !group.contains(&a.id()) {
                        inj[net.index_of(a.id())?] += net.kva_to_pu(Complex::new(0.0, a.state.q_out));
                    }
                }
                let members: Vec<Member<f64>> = group
                    .iter()
                    .filter_map(|id| sim.agent(*id))
                    .map(|a| Member {
                        id: a.id(),
                        q_max: a.state.q_max,
                    })
                    .collect();
                let u_star = match snapshot_optimum(&net, &members, leader, &params, &inj, sim.slack_v()) {
                    Ok(o) => format!("{:.4}", o.u_star),
                    Err(e) => format!("n/a ({e})"),
                };
                let a = sim.agent(leader).expect("leader exists");
                println!(
                    "{:>6} {:>8} {:>9.5} {:>9.4} {:>7} {:>7.1e}",
                    leader,
                    group.len(),
                    sim.solution().v_mag[net.index_of(leader)?],
                    a.state.u,
                    u_star,
                    spread
                );
            }
        }
        Command::Baseline { scenario, at, epsilon } => {
            let cfg = load_config(scenario.as_deref())?;
            let params = cfg.params;
            let sim = simulation_at(&cfg, &at, AgentMode::Local, 0.0)?;
            let net = &sim.feeder().network;
            let ids: Vec<_> = sim.agents().iter().map(|a| a.id()).collect();
            let a_vq = vq_sensitivity_at(net, sim.base_injections(), sim.slack_v(), &ids)?;
            let v: Vec<f64> = ids
                .iter()
                .map(|id| net.index_of(*id).map(|k| sim.solution().v_mag[k]))
                .collect::<Result<_, _>>()?;
            let eps = match epsilon {
                Some(e) => e,
                None => select_epsilon(&a_vq, &v, &params).unwrap_or_else(|e| {
                    println!("no threshold selected ({e}); using 0");
                    0.0
                }),
            };
            let part = epsilon_decompose(&a_vq, eps);
            println!("epsilon={eps:.4} zones={}", part.zones.len());
            for z in &part.zones {
                let names: Vec<String> = z.iter().map(|b| b.to_string()).collect();
                println!("  {}", names.join(" "));
            }
        }
        Command::GenNetwork { scenario, out } => {
            let cfg = load_config(scenario.as_deref())?;
            let feeder = feeder_of(&cfg)?;
            feeder.save(&out)?;
            println!(
                "{} buses, {} inverters -> {}",
                feeder.network.len(),
                feeder.inverters().len(),
                out.display()
            );
        }
        Command::GenProfiles { scenario, out } => {
            let cfg = load_config(scenario.as_deref())?;
            let feeder = feeder_of(&cfg)?;
            std::fs::create_dir_all(&out)?;
            let mut files = 0;
            for s in &feeder.sites {
                let mut emit = |kind: ProfileKind, rating: f64, suffix: &str| -> Result<()> {
                    if rating > 0.0 {
                        let p = generate_profiles(kind, MINUTE_S, site_seed(cfg.seed, s.bus.0, kind)).scaled(rating);
                        p.write_csv(&out.join(format!("{}_{suffix}.csv", s.bus)))?;
                        files += 1;
                    }
                    Ok(())
                };
                emit(s.profile, s.load_kw, "load")?;
                emit(ProfileKind::Pv, s.pv_kw, "pv")?;
            }
            if files == 0 {
                bail!("feeder has no sites");
            }
            println!("{files} profiles -> {}", out.display());
        }
    }
    Ok(())
}
