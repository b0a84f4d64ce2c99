//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on failure.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 2 7`.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use v2g_core::bench::{run_suite, run_traced, PolicyFactory};
use v2g_core::dataset::{collect, Batch, OfflineDataset};
use v2g_core::dt::{self, DtAgent, DtConfig};
use v2g_core::env::{Env, ObservationLayout, RewardWeights, Scenario};
use v2g_core::graph::{GnnConfig, GnnEncoder, GraphBatch};
use v2g_core::numerics::gradcheck::{check_all_ops, check_params, projection_loss};
use v2g_core::numerics::{ComputeGraph, ParamStore};
use v2g_core::oracle::{enumerate_vertices, solve, solve_scenario, LinearProgram, LpStatus, OraclePolicy, OracleWeights, Schedule};
use v2g_core::par::{map_indexed, thread_count};
use v2g_core::policies::{run_episode, Bau, Cafap, Policy, PolicyKind, RandomPolicy};
use v2g_core::scenario::{generate, Feasibility, GeneratorConfig};

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

fn suite(feasibility: Feasibility, seeds: std::ops::Range<u64>) -> Vec<Scenario> {
    let cfg = GeneratorConfig { feasibility, ..Default::default() };
    seeds.map(|s| generate(&cfg.with_seed(s)).expect("generator")).collect()
}

fn autodiff() -> Verdict {
    let start = Instant::now();
    let ops = check_all_ops(11).expect("op checks run");
    let worst_op = ops.iter().max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error)).expect("ops checked");

    let cfg = GeneratorConfig { chargers: 3, horizon: 12, step_duration: 1.0, sojourn_min_steps: 2, sojourn_max_steps: 6, ..Default::default() };
    let layout = ObservationLayout::new(3, 3);
    let ds = collect(3, 1, layout, PolicyKind::Random, |i| generate(&cfg.with_seed(i as u64)).unwrap(), |i| Box::new(RandomPolicy::new(i as u64))).unwrap();
    let tiny = DtConfig { context: 3, d_model: 8, layers: 1, heads: 2, ff_width: 8, dropout: 0.0, gnn_hidden: 4, gnn_layers: 2, max_timestep: 12, ..Default::default() };
    let mut agent = DtAgent::new(&ds, tiny).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ids: Vec<_> = agent.params.ids().collect();
    for id in ids {
        if agent.params.name(id).ends_with(".b") {
            for v in agent.params.get_mut(id).data_mut() {
                *v = rng.random_range(0.05..0.3) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            }
        }
    }
    let batch = ds.sample_batch(&mut rng, 3, 3).unwrap();
    let model = agent.model.clone();
    let pipeline = check_params(&agent.params, usize::MAX, 0, |g, s| {
        let out = model.forward(g, s, &batch, None).map_err(|e| match e {
            dt::DtError::Numerics(n) => n,
            other => panic!("{other}"),
        })?;
        projection_loss(g, out, 3)
    })
    .unwrap();
    let elapsed = start.elapsed();
    let ok = ops.iter().all(|(_, r)| r.max_rel_error < 1e-4) && pipeline.max_rel_error < 1e-3 && within(elapsed, 60);
    verdict(
        ok,
        format!(
            "{} ops, worst {} rel {:.2e}; pipeline rel {:.2e} over {} entries; {:.1?}",
            ops.len(),
            worst_op.0,
            worst_op.1.max_rel_error,
            pipeline.max_rel_error,
            pipeline.checked,
            elapsed
        ),
    )
}

fn random_lp(rng: &mut ChaCha8Rng) -> LinearProgram {
    let n = rng.random_range(1..=6);
    let m = rng.random_range(1..=6);
    let mut lp = LinearProgram::new();
    for _ in 0..n {
        let lo = rng.random_range(-2.0..1.0);
        let hi = lo + rng.random_range(0.2..3.0);
        lp.add_var(rng.random_range(-1.0..1.0), lo, hi);
    }
    for _ in 0..m {
        let mut coeffs = Vec::new();
        for j in 0..n {
            if rng.random_bool(0.8) {
                coeffs.push((j, rng.random_range(-1.0..1.0)));
            }
        }
        lp.add_row(coeffs, rng.random_range(-1.0..2.0));
    }
    lp
}

fn simplex_vs_vertices() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst, mut mismatches, mut infeasible) = (0.0f64, 0, 0);
    for _ in 0..200 {
        let lp = random_lp(&mut rng);
        let sol = solve(&lp).expect("simplex runs");
        match (sol.status, enumerate_vertices(&lp)) {
            (LpStatus::Optimal, Some((obj, _))) => worst = worst.max((sol.objective - obj).abs()),
            (LpStatus::Infeasible, None) => infeasible += 1,
            _ => mismatches += 1,
        }
    }
    let elapsed = start.elapsed();
    verdict(
        mismatches == 0 && worst <= 1e-6 && within(elapsed, 60),
        format!("200 LPs ({infeasible} infeasible), max |Δobjective| {worst:.2e}, status mismatches {mismatches}; {elapsed:.1?}"),
    )
}

fn episode_cost(scenario: &Scenario, policy: &mut dyn Policy) -> (f64, f64) {
    let env = Env::new(scenario.clone(), RewardWeights::default()).unwrap();
    let end = run_episode(&env, policy, &ObservationLayout::new(0, 0), |_| {}).unwrap();
    (-end.totals.cash_flow, end.totals.violation)
}

fn oracle_dominance() -> Verdict {
    let start = Instant::now();
    let scenarios = suite(Feasibility::Grid, 3000..3020);
    let (mut worst_gap, mut worst_violation, mut worst_soc) = (f64::NEG_INFINITY, 0.0f64, 0.0f64);
    for sc in &scenarios {
        let plan = solve_scenario(sc, &OracleWeights::default()).expect("oracle solves");
        let mut replay = OraclePolicy::from_schedule(Schedule::from_plan(sc, &plan));
        let env = Env::new(sc.clone(), RewardWeights::default()).unwrap();
        let mut soc_dev = 0.0f64;
        let end = run_episode(&env, &mut replay, &ObservationLayout::new(0, 0), |rec| {
            for (e, ev) in sc.sessions.iter().enumerate() {
                if ev.is_connected_at(rec.t) {
                    soc_dev = soc_dev.max((rec.state.soc[e] - plan.soc[e][rec.t - ev.arrival_step]).abs());
                }
            }
        })
        .unwrap();
        let oracle = -end.totals.cash_flow;
        let (cafap, _) = episode_cost(sc, &mut Cafap);
        let (bau, _) = episode_cost(sc, &mut Bau::default());
        worst_gap = worst_gap.max(oracle - cafap.min(bau));
        worst_violation = worst_violation.max(end.totals.violation);
        worst_soc = worst_soc.max(soc_dev);
    }
    let elapsed = start.elapsed();
    verdict(
        worst_violation == 0.0 && worst_gap <= 1e-6 && worst_soc <= 1e-6 && within(elapsed, 300),
        format!(
            "20 grid-feasible scenarios: max violation {worst_violation}, max oracle - min(cafap, bau) cost {worst_gap:.3e} EUR, max SoC replay error {worst_soc:.2e} kWh; {elapsed:.1?}"
        ),
    )
}

fn cafap_satisfaction() -> Verdict {
    let mut details = Vec::new();
    let mut ok = true;
    for (name, f) in [("demands", Feasibility::Demands), ("grid", Feasibility::Grid)] {
        let scenarios = suite(f, 4000..4020);
        let report = run_suite(PolicyKind::Cafap, &scenarios, scenarios.len(), &PolicyFactory::default(), thread_count()).unwrap();
        let (mean, min) = (report.satisfaction().mean, report.satisfaction_min().unwrap_or(f64::NAN));
        let evs: usize = report.completed().map(|(_, _, t)| t.departures.len()).sum();
        ok &= report.failures() == 0 && mean == 100.0 && min == 100.0;
        details.push(format!("{name}: mean {mean}% min {min}% over {evs} EVs"));
    }
    verdict(ok, details.join("; "))
}

fn bau_compliance() -> Verdict {
    let mut scenarios = suite(Feasibility::Demands, 5000..5020);
    scenarios.extend(suite(Feasibility::Unconstrained, 5020..5040));
    let (mut steps, mut worst) = (0usize, f64::NEG_INFINITY);
    for sc in &scenarios {
        let (_, trace) = run_traced(sc, &mut Bau::default()).unwrap();
        for r in &trace.rows {
            steps += 1;
            worst = worst.max(r.requested_power - r.limit);
        }
    }
    let cafap_violation: f64 = scenarios.iter().map(|sc| episode_cost(sc, &mut Cafap).1).sum::<f64>() / scenarios.len() as f64;
    verdict(
        worst <= 1e-9,
        format!("{} episodes, {steps} steps, max requested - limit {worst:.3e} kW (cafap mean violation {cafap_violation:.1} kW)", scenarios.len()),
    )
}

fn env_invariants() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut steps, mut episodes, mut bound_failures, mut residual) = (0usize, 0usize, 0usize, 0.0f64);
    while steps < 100_000 {
        let cfg = GeneratorConfig {
            chargers: rng.random_range(1..=8),
            horizon: rng.random_range(8..=96),
            step_duration: [0.25, 0.5, 1.0][rng.random_range(0..3)],
            sojourn_min_steps: 1,
            sojourn_max_steps: rng.random_range(2..=40),
            charge_power: rng.random_range(3.0..50.0),
            discharge_power: rng.random_range(3.0..50.0),
            efficiency_charge: rng.random_range(0.7..=1.0),
            efficiency_discharge: rng.random_range(0.7..=1.0),
            feasibility: Feasibility::Unconstrained,
            seed: rng.random(),
            ..Default::default()
        };
        let sc = generate(&cfg).unwrap();
        let env = Env::new(sc.clone(), RewardWeights::default()).unwrap();
        let mut state = env.reset();
        while !env.is_done(&state) {
            let actions: Vec<f64> = (0..sc.chargers.len())
                .map(|_| match rng.random_range(0..4) {
                    0 => 1.0,
                    1 => -1.0,
                    _ => rng.random_range(-1.0..=1.0),
                })
                .collect();
            state = env.step(&state, &actions).unwrap().0;
            steps += 1;
            for (e, ev) in sc.sessions.iter().enumerate() {
                if !(ev.min_soc <= state.soc[e] && state.soc[e] <= ev.battery_capacity) {
                    bound_failures += 1;
                }
            }
        }
        for (e, ev) in sc.sessions.iter().enumerate() {
            let ch = &sc.chargers[ev.charger_id];
            let expected = ev.initial_soc + ch.efficiency_charge * state.energy_in[e] - state.energy_out[e] / ch.efficiency_discharge;
            residual = residual.max((state.soc[e] - expected).abs());
        }
        episodes += 1;
    }
    let elapsed = start.elapsed();
    verdict(
        bound_failures == 0 && residual < 1e-9,
        format!("{steps} steps over {episodes} episodes, SoC bound violations {bound_failures}, max conservation residual {residual:.2e} kWh; {elapsed:.1?}"),
    )
}

fn gnn_symmetry() -> Verdict {
    let layout = ObservationLayout::new(5, 4);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = GnnConfig { hidden: 16, layers: 2, d_model: 12 };
    let enc = GnnEncoder::new(&mut store, "gnn", layout, cfg, &mut rng);
    let encode = |obs: &[f64]| {
        let batch = GraphBatch::from_observations(&layout, obs, obs, 1);
        let mut g = ComputeGraph::new();
        let e = enc.encode(&mut g, &store, &batch).unwrap();
        (g.value(e.chargers).data().to_vec(), g.value(e.global).data().to_vec())
    };
    let (mut eq_err, mut inv_err) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let mut obs: Vec<f64> = (0..layout.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        for c in 0..5 {
            obs[layout.charger_block(c).start] = if rng.random_bool(0.6) { 1.0 } else { 0.0 };
        }
        let mut perm: Vec<usize> = (0..5).collect();
        for i in (1..5).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut permuted = obs.clone();
        for (new, &old) in perm.iter().enumerate() {
            permuted[layout.charger_block(new)].copy_from_slice(&obs[layout.charger_block(old)]);
        }
        let (c0, g0) = encode(&obs);
        let (c1, g1) = encode(&permuted);
        let d = cfg.d_model;
        for (new, &old) in perm.iter().enumerate() {
            for k in 0..d {
                eq_err = eq_err.max((c1[new * d + k] - c0[old * d + k]).abs());
            }
        }
        inv_err = g0.iter().zip(&g1).map(|(a, b)| (a - b).abs()).fold(inv_err, f64::max);
    }
    verdict(eq_err <= 1e-12 && inv_err <= 1e-12, format!("100 states: equivariance error {eq_err:.2e}, global invariance error {inv_err:.2e}"))
}

fn small_dt(seed: u64, steps: usize, dropout: f64) -> DtConfig {
    DtConfig {
        context: 8,
        d_model: 32,
        layers: 2,
        heads: 4,
        ff_width: 64,
        dropout,
        gnn_hidden: 32,
        gnn_layers: 2,
        batch_size: 16,
        steps,
        warmup_steps: 100,
        seed,
        ..Default::default()
    }
}

fn dt_causality_and_memorization() -> Verdict {
    let start = Instant::now();
    let cfg = GeneratorConfig::default();
    let layout = ObservationLayout::for_scenario(&generate(&cfg).unwrap());
    let ds = collect(1, 1, layout, PolicyKind::Oracle, |_| generate(&cfg.with_seed(7)).unwrap(), |_| Box::new(OraclePolicy::default())).unwrap();

    let probe = DtAgent::new(&ds, small_dt(3, 0, 0.0)).unwrap();
    let k = probe.model.config.context;
    let a = ds.act_dim;
    let mut base_batch = Batch::empty(1, k, ds.obs_dim(), a);
    ds.fill_window(&mut base_batch, 0, 0, 40);
    base_batch.action_mask.iter_mut().for_each(|m| *m = true);
    let base = probe.predict(&base_batch).unwrap();
    let (mut leaks, mut inert) = (0, 0);
    for t in 0..k {
        let mut perturbed = Vec::new();
        let mut b = base_batch.clone();
        b.actions[t * a] = -b.actions[t * a] + 0.5;
        perturbed.push(b);
        if t + 1 < k {
            let mut b = base_batch.clone();
            b.rtg[t + 1] += 0.3;
            perturbed.push(b);
            let mut b = base_batch.clone();
            let od = ds.obs_dim();
            b.states[(t + 1) * od + 1] += 0.7;
            perturbed.push(b);
        }
        for b in perturbed {
            let out = probe.predict(&b).unwrap();
            if out[..(t + 1) * a] != base[..(t + 1) * a] {
                leaks += 1;
            }
            if t + 1 < k && out[(t + 1) * a..] == base[(t + 1) * a..] {
                inert += 1;
            }
        }
    }
    let causal_time = start.elapsed();

    let (agent, report) = dt::train(&ds, small_dt(3, 2000, 0.0), |_, _| {}).unwrap();
    let mse = agent.dataset_mse(&ds).unwrap();
    let elapsed = start.elapsed();
    verdict(
        leaks == 0 && inert == 0 && mse < 1e-3 && within(elapsed, 600),
        format!(
            "K={k}: {leaks} leaks into earlier predictions, {inert} perturbations without downstream effect ({causal_time:.1?}); memorization MSE {mse:.2e} after {} steps (last batch loss {:.2e}); {elapsed:.1?}",
            report.losses.len(),
            report.losses.last().unwrap()
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

struct Datasets {
    optimal: OfflineDataset,
    random: OfflineDataset,
    mixed: OfflineDataset,
}

fn datasets() -> Datasets {
    let cfg = GeneratorConfig::default();
    let layout = ObservationLayout::for_scenario(&generate(&cfg).unwrap());
    let threads = thread_count();
    let optimal = collect(200, threads, layout, PolicyKind::Oracle, |i| generate(&cfg.with_seed(10_000 + i as u64)).unwrap(), |_| Box::new(OraclePolicy::default())).unwrap();
    let random = collect(200, threads, layout, PolicyKind::Random, |i| generate(&cfg.with_seed(20_000 + i as u64)).unwrap(), |i| Box::new(RandomPolicy::new(i as u64))).unwrap();
    let mixed = OfflineDataset::merge(&[&optimal, &random]).unwrap();
    Datasets { optimal, random, mixed }
}

fn end_to_end(data: &Datasets) -> Verdict {
    let start = Instant::now();
    let held = suite(Feasibility::Demands, 90_000..90_020);
    let threads = thread_count();
    let random_rewards = map_indexed(held.len(), threads, |i| {
        let env = Env::new(held[i].clone(), RewardWeights::default()).unwrap();
        let mut p = RandomPolicy::new(777 + i as u64);
        run_episode(&env, &mut p, &ObservationLayout::new(0, 0), |_| {}).unwrap().totals.reward
    });
    let random_mean = random_rewards.iter().sum::<f64>() / held.len() as f64;

    let evaluate = |ds: &OfflineDataset, seed: u64| -> (f64, f64) {
        let (agent, _) = dt::train(ds, small_dt(seed, 2000, 0.1), |_, _| {}).unwrap();
        let agent = Arc::new(agent);
        let target = agent.auto_target();
        let rewards = map_indexed(held.len(), threads, |i| dt::rollout(agent.clone(), &held[i], target).unwrap().reward);
        (rewards.iter().sum::<f64>() / rewards.len() as f64, rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    };
    let (mut mixed_mean, mut mixed_best, mut opt_best, mut lines) = (vec![], vec![], vec![], vec![]);
    for seed in 1..=3 {
        let (mm, mb) = evaluate(&data.mixed, seed);
        let (om, ob) = evaluate(&data.optimal, seed);
        lines.push(format!("seed {seed}: mixed mean {mm:.1} best {mb:.1}, optimal-only mean {om:.1} best {ob:.1}"));
        mixed_mean.push(mm);
        mixed_best.push(mb);
        opt_best.push(ob);
    }
    let (mm, mb, ob) = (median(mixed_mean), median(mixed_best), median(opt_best));
    let elapsed = start.elapsed();
    verdict(
        mm > random_mean && mb >= ob && within(elapsed, 1800),
        format!("random mean {random_mean:.1}; median mixed mean {mm:.1}, median best mixed {mb:.1} vs optimal-only {ob:.1} [{}]; {elapsed:.1?}", lines.join("; ")),
    )
}

fn dataset_ordering(data: &Datasets) -> Verdict {
    let (o, m, r) = (data.optimal.mean_return(), data.mixed.mean_return(), data.random.mean_return());
    verdict(o > m && m > r, format!("mean return optimal {o:.2} > mixed {m:.2} > random {r:.2} ({} / {} / {} trajectories)", data.optimal.len(), data.mixed.len(), data.random.len()))
}

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |i: usize| wanted.is_empty() || wanted.contains(&i);
    let names = [
        "autodiff correctness",
        "simplex vs vertex enumeration",
        "oracle dominance",
        "cafap satisfaction",
        "bau limit compliance",
        "environment invariants",
        "gnn permutation symmetry",
        "dt causality and memorization",
        "end-to-end learning signal",
        "dataset mean ordering",
    ];
    let mut data = None;
    let mut failed = 0;
    for (i, name) in names.iter().enumerate() {
        let id = i + 1;
        if !run(id) {
            continue;
        }
        let start = Instant::now();
        let v = match id {
            1 => autodiff(),
            2 => simplex_vs_vertices(),
            3 => oracle_dominance(),
            4 => cafap_satisfaction(),
            5 => bau_compliance(),
            6 => env_invariants(),
            7 => gnn_symmetry(),
            8 => dt_causality_and_memorization(),
            9 => end_to_end(data.get_or_insert_with(datasets)),
            _ => dataset_ordering(data.get_or_insert_with(datasets)),
        };
        if !v.passed {
            failed += 1;
        }
        println!("{} [{id:>2}] {name}: {} ({:.1?})", if v.passed { "PASS" } else { "FAIL" }, v.detail, start.elapsed());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
