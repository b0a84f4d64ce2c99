use std::sync::Arc;

use v2g_core::bench::{check_invariants, emit_outputs, run_suite, PolicyFactory};
use v2g_core::dataset::{collect, OfflineDataset};
use v2g_core::dt::{train, DtAgent, DtConfig};
use v2g_core::env::ObservationLayout;
use v2g_core::oracle::OraclePolicy;
use v2g_core::policies::{PolicyKind, RandomPolicy};
use v2g_core::scenario::{generate, load_dir, save, GeneratorConfig};

fn small() -> GeneratorConfig {
    GeneratorConfig { chargers: 3, horizon: 24, step_duration: 1.0, sojourn_min_steps: 3, sojourn_max_steps: 10, ..Default::default() }
}

#[test]
fn scenarios_to_datasets_to_model_to_bench() {
    let dir = tempfile::tempdir().unwrap();
    let suite_dir = dir.path().join("suite");
    std::fs::create_dir(&suite_dir).unwrap();
    for s in 0..3 {
        save(&generate(&small().with_seed(s)).unwrap(), &suite_dir.join(format!("s{s}.json"))).unwrap();
    }
    let suite = load_dir(&suite_dir).unwrap();
    assert_eq!(suite.len(), 3);

    let layout = ObservationLayout::new(3, 4);
    let opt = collect(6, 2, layout, PolicyKind::Oracle, |i| generate(&small().with_seed(100 + i as u64)).unwrap(), |_| Box::new(OraclePolicy::default())).unwrap();
    let rnd = collect(6, 2, layout, PolicyKind::Random, |i| generate(&small().with_seed(200 + i as u64)).unwrap(), |i| Box::new(RandomPolicy::new(i as u64))).unwrap();
    let (a, b) = (dir.path().join("opt.bin"), dir.path().join("rnd.bin"));
    opt.save(&a).unwrap();
    rnd.save(&b).unwrap();
    let merged = OfflineDataset::merge(&[&OfflineDataset::load(&a).unwrap(), &OfflineDataset::load(&b).unwrap()]).unwrap();
    assert_eq!(merged.len(), 12);
    assert_eq!(merged.count_by_source(PolicyKind::Oracle), 6);
    assert!(opt.mean_return() > rnd.mean_return());

    let cfg = DtConfig { context: 4, d_model: 16, layers: 1, heads: 2, ff_width: 32, gnn_hidden: 8, batch_size: 4, steps: 30, warmup_steps: 5, max_timestep: 24, ..Default::default() };
    let (agent, report) = train(&merged, cfg, |_, _| {}).unwrap();
    assert!(report.losses.iter().all(|l| l.is_finite()));
    let ckpt = dir.path().join("m.ckpt");
    agent.save(&ckpt).unwrap();
    let agent = Arc::new(DtAgent::load(&ckpt).unwrap());
    assert_eq!(agent.best_return, merged.best_return().unwrap());

    let factory = PolicyFactory { dt: Some((agent.clone(), agent.auto_target())), ..Default::default() };
    let reports: Vec<_> = PolicyKind::ALL.iter().map(|&k| run_suite(k, &suite, 4, &factory, 2).unwrap()).collect();
    let checks = check_invariants(&reports, &suite);
    assert!(checks.iter().all(|c| c.passed), "{checks:#?}");
    let out = dir.path().join("out");
    emit_outputs(&reports, &checks, &out).unwrap();
    for p in PolicyKind::ALL {
        assert!(out.join(p.as_str()).join("episode_3.svg").exists());
    }
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + PolicyKind::ALL.len());
}
