use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use v2g_core::bench::{self, PolicyFactory};
use v2g_core::dataset::{collect, OfflineDataset};
use v2g_core::dt::{self, DtAgent, DtConfig, DtPolicy};
use v2g_core::env::ObservationLayout;
use v2g_core::oracle::{self, OraclePolicy, OracleWeights, Schedule};
use v2g_core::par::thread_count;
use v2g_core::policies::{Bau, Cafap, Policy, PolicyKind, RandomPolicy};
use v2g_core::scenario::{self, GeneratorConfig};

/// Vehicle-to-grid smart-charging lab.
#[derive(Parser)]
#[command(name = "v2g", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic scenario generation.
    #[command(subcommand)]
    Scenario(ScenarioCmd),
    /// Perfect-information LP schedules.
    #[command(subcommand)]
    Oracle(OracleCmd),
    /// Offline trajectory datasets.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Decision Transformer training and evaluation.
    #[command(subcommand)]
    Dt(DtCmd),
    /// Policy comparison over a scenario suite.
    #[command(subcommand)]
    Bench(BenchCmd),
}

#[derive(Subcommand)]
enum ScenarioCmd {
    Gen {
        /// Generator config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file, or directory when `--count` is given.
        #[arg(long)]
        out: PathBuf,
        /// Write this many scenarios with consecutive seeds into `--out`.
        #[arg(long)]
        count: Option<u64>,
    },
}

#[derive(Subcommand)]
enum OracleCmd {
    Solve {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum DatasetCmd {
    Gen(DatasetGen),
    Merge {
        #[arg(required = true, num_args = 2..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print trajectory counts and return statistics.
    Info { file: PathBuf },
}

#[derive(Args)]
struct DatasetGen {
    #[arg(long)]
    policy: PolicyKind,
    #[arg(long)]
    n: usize,
    /// Scenario `i` uses generator seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Generator config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Required for `--policy dt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "auto")]
    target_return: String,
    /// Forecast steps in each observation.
    #[arg(long, default_value_t = 8)]
    lookahead: usize,
}

#[derive(Subcommand)]
enum DtCmd {
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Model and training config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scenarios: PathBuf,
        /// Return to condition on, or `auto` for slightly below the best training return.
        #[arg(long, default_value = "auto")]
        target_return: String,
    },
}

#[derive(Subcommand)]
enum BenchCmd {
    Run {
        /// Comma-separated list of cafap, bau, random, oracle, dt.
        #[arg(long, value_delimiter = ',', default_value = "cafap,bau,random,oracle")]
        policies: Vec<PolicyKind>,
        #[arg(long)]
        scenarios: PathBuf,
        /// Episodes per policy; scenarios are reused cyclically.
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "auto")]
        target_return: String,
        /// Base seed of the random policy.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn generator_config(path: Option<&Path>) -> Result<GeneratorConfig> {
    Ok(match path {
        Some(p) => GeneratorConfig::load(p)?,
        None => GeneratorConfig::default(),
    })
}

fn target(agent: &DtAgent, spec: &str) -> Result<f64> {
    if spec == "auto" {
        return Ok(agent.auto_target());
    }
    spec.parse().with_context(|| format!("target return must be a number or `auto`, got {spec:?}"))
}

fn load_agent(path: &Path, spec: &str) -> Result<(Arc<DtAgent>, f64)> {
    let agent = DtAgent::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let t = target(&agent, spec)?;
    Ok((Arc::new(agent), t))
}

fn scenario_gen(config: Option<PathBuf>, seed: u64, out: PathBuf, count: Option<u64>) -> Result<()> {
    let cfg = generator_config(config.as_deref())?;
    match count {
        None => {
            let sc = scenario::generate(&cfg.with_seed(seed))?;
            scenario::save(&sc, &out)?;
            println!("{}: {} sessions over {} steps", out.display(), sc.sessions.len(), sc.horizon);
        }
        Some(n) => {
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for s in seed..seed + n {
                let sc = scenario::generate(&cfg.with_seed(s))?;
                scenario::save(&sc, &out.join(format!("scenario_{s:05}.json")))?;
            }
            println!("{}: {n} scenarios", out.display());
        }
    }
    Ok(())
}

fn oracle_solve(scenario: PathBuf, out: PathBuf) -> Result<()> {
    let sc = scenario::load(&scenario)?;
    let plan = oracle::solve_scenario(&sc, &OracleWeights::default())?;
    Schedule::from_plan(&sc, &plan).save(&out)?;
    let unmet: f64 = plan.unmet.iter().sum();
    println!("objective {:.6} after {} simplex iterations, unmet energy {unmet:.6} kWh", plan.objective, plan.iterations);
    Ok(())
}

fn dataset_gen(a: DatasetGen) -> Result<()> {
    let cfg = generator_config(a.config.as_deref())?;
    let probe = scenario::generate(&cfg.with_seed(a.seed))?;
    let layout = ObservationLayout::new(probe.chargers.len(), a.lookahead);
    let agent = match (a.policy, &a.checkpoint) {
        (PolicyKind::Dt, Some(p)) => Some(load_agent(p, &a.target_return)?),
        (PolicyKind::Dt, None) => bail!("--policy dt needs --checkpoint"),
        _ => None,
    };
    let scenarios: Vec<_> = (0..a.n as u64).map(|i| scenario::generate(&cfg.with_seed(a.seed + i))).collect::<Result<_, _>>()?;
    let (kind, seed) = (a.policy, a.seed);
    let ds = collect(a.n, thread_count(), layout, kind, |i| scenarios[i].clone(), |i| -> Box<dyn Policy> {
        match kind {
            PolicyKind::Cafap => Box::new(Cafap),
            PolicyKind::Bau => Box::new(Bau::default()),
            PolicyKind::Random => Box::new(RandomPolicy::new(seed.wrapping_add(i as u64))),
            PolicyKind::Oracle => Box::new(OraclePolicy::default()),
            PolicyKind::Dt => {
                let (agent, t) = agent.clone().expect("checked above");
                Box::new(DtPolicy::new(agent, t))
            }
        }
    })?;
    ds.save(&a.out)?;
    println!("{}: {} {} trajectories, mean return {:.3}", a.out.display(), ds.len(), kind, ds.mean_return());
    Ok(())
}

fn dataset_merge(inputs: Vec<PathBuf>, out: PathBuf) -> Result<()> {
    let parts: Vec<OfflineDataset> = inputs.iter().map(|p| OfflineDataset::load(p).with_context(|| format!("loading {}", p.display()))).collect::<Result<_>>()?;
    let merged = OfflineDataset::merge(&parts.iter().collect::<Vec<_>>())?;
    merged.save(&out)?;
    println!("{}: {} trajectories", out.display(), merged.len());
    Ok(())
}

fn dataset_info(file: PathBuf) -> Result<()> {
    let ds = OfflineDataset::load(&file)?;
    println!("trajectories {} (obs {} / act {}), return scale {:.3}", ds.len(), ds.obs_dim(), ds.act_dim, ds.return_scale);
    for k in PolicyKind::ALL {
        let n = ds.count_by_source(k);
        if n > 0 {
            println!("  {k}: {n}");
        }
    }
    println!("mean return {:.3}, best {:.3}", ds.mean_return(), ds.best_return().unwrap_or(f64::NAN));
    Ok(())
}

fn dt_train(dataset: PathBuf, config: Option<PathBuf>, out: PathBuf) -> Result<()> {
    let ds = OfflineDataset::load(&dataset)?;
    let cfg: DtConfig = match config {
        Some(p) => {
            let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => DtConfig::default(),
    };
    let every = (cfg.steps / 20).max(1);
    let started = std::time::Instant::now();
    let (agent, report) = dt::train(&ds, cfg.clone(), |step, loss| {
        if step % every == 0 || step + 1 == cfg.steps {
            log::info!("step {step:>6} loss {loss:.6} lr {:.2e} ({:.0}s)", cfg.lr_at(step), started.elapsed().as_secs_f64());
        }
    })?;
    agent.save(&out)?;
    println!("{}: {} steps, final loss {:.6}, auto target {:.3}", out.display(), report.losses.len(), report.losses.last().copied().unwrap_or(f64::NAN), agent.auto_target());
    Ok(())
}

fn dt_eval(checkpoint: PathBuf, scenarios: PathBuf, target_return: String) -> Result<()> {
    let (agent, t) = load_agent(&checkpoint, &target_return)?;
    let suite = scenario::load_dir(&scenarios)?;
    if suite.is_empty() {
        bail!("no scenarios in {}", scenarios.display());
    }
    let results = v2g_core::par::map_indexed(suite.len(), thread_count(), |i| dt::rollout(agent.clone(), &suite[i], t));
    println!("scenario,reward,violation_kw,cash_flow");
    let mut rewards = Vec::new();
    for (sc, r) in suite.iter().zip(results) {
        let totals = r.with_context(|| format!("scenario {}", sc.id))?;
        println!("{},{},{},{}", sc.id, totals.reward, totals.violation, totals.cash_flow);
        rewards.push(totals.reward);
    }
    let s = bench::Stat::of(&rewards);
    let best = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    eprintln!("target {t:.3}: mean reward {:.3} ± {:.3}, best {best:.3}", s.mean, s.std);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn bench_run(policies: Vec<PolicyKind>, scenarios: PathBuf, episodes: Option<usize>, out: PathBuf, checkpoint: Option<PathBuf>, target_return: String, seed: u64) -> Result<ExitCode> {
    let suite = scenario::load_dir(&scenarios)?;
    bench::suite_chargers(&suite)?;
    let dt = match checkpoint {
        Some(p) => Some(load_agent(&p, &target_return)?),
        None if policies.contains(&PolicyKind::Dt) => bail!("--policies dt needs --checkpoint"),
        None => None,
    };
    let factory = PolicyFactory { dt, oracle: OracleWeights::default(), seed };
    let episodes = episodes.unwrap_or(suite.len());
    let threads = thread_count();
    let mut reports = Vec::new();
    for kind in policies {
        log::info!("running {kind} on {episodes} episodes with {threads} threads");
        reports.push(bench::run_suite(kind, &suite, episodes, &factory, threads)?);
    }
    let checks = bench::check_invariants(&reports, &suite);
    let summary = bench::emit_outputs(&reports, &checks, &out)?;
    print!("{}", std::fs::read_to_string(&summary)?);
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
    for c in &failed {
        eprintln!("invariant failed: {}: {}", c.name, c.detail);
    }
    if failed.is_empty() {
        eprintln!("all {} invariant checks passed", checks.len());
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::FAILURE)
    }
}

fn main() -> Result<ExitCode> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Scenario(ScenarioCmd::Gen { config, seed, out, count }) => scenario_gen(config, seed, out, count)?,
        Command::Oracle(OracleCmd::Solve { scenario, out }) => oracle_solve(scenario, out)?,
        Command::Dataset(DatasetCmd::Gen(a)) => dataset_gen(a)?,
        Command::Dataset(DatasetCmd::Merge { inputs, out }) => dataset_merge(inputs, out)?,
        Command::Dataset(DatasetCmd::Info { file }) => dataset_info(file)?,
        Command::Dt(DtCmd::Train { dataset, config, out }) => dt_train(dataset, config, out)?,
        Command::Dt(DtCmd::Eval { checkpoint, scenarios, target_return }) => dt_eval(checkpoint, scenarios, target_return)?,
        Command::Bench(BenchCmd::Run { policies, scenarios, episodes, out, checkpoint, target_return, seed }) => {
            return bench_run(policies, scenarios, episodes, out, checkpoint, target_return, seed)
        }
    }
    Ok(ExitCode::SUCCESS)
}
