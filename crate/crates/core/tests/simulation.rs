use std::sync::Arc;

use flk_core::aggregation::{fedavg, select_clients_attempt};
use flk_core::config::{Aggregator, PerClient, Quorum, Scheme};
use flk_core::hooks::{HookEvent, HookRegistry, METRIC_HOOK_ERRORS, METRIC_TEST_ACC, METRIC_TEST_LOSS};
use flk_core::metrics::{MetricsSink, Scope};
use flk_core::orchestrator::artifact::encode_model;
use flk_core::orchestrator::{run_simulation, run_simulation_with, SimOptions, SimulationOutcome};
use flk_core::partition::FederatedData;
use flk_core::seed::{domain, sub_seed};
use flk_core::trainer::{evaluate, local_train, Task, TrainSettings};
use flk_core::types::{l2_norm, LocalUpdate, Payload};
use flk_core::{Error, ExperimentConfig, ParameterVector};

fn base_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 11;
    cfg.clients = 4;
    cfg.rounds = 5;
    cfg.client_fraction = 1.0;
    cfg.partition.scheme = Scheme::Dirichlet;
    cfg.partition.dirichlet_alpha = 0.5;
    cfg
}

fn simulate(cfg: &ExperimentConfig, threads: Option<usize>) -> SimulationOutcome {
    run_simulation_with(cfg, HookRegistry::from_config(cfg), SimOptions { threads }, None).unwrap()
}

fn metric_values(out: &SimulationOutcome) -> Vec<(u32, String, String, u64)> {
    let mut v: Vec<_> = out.records.iter().map(|r| (r.round, r.scope.clone(), r.name.clone(), r.value.to_bits())).collect();
    v.sort();
    v
}

fn plain(u: &LocalUpdate) -> &ParameterVector {
    u.plain().unwrap()
}

#[test]
fn serial_parallel_and_serialized_runs_agree() {
    let cfg = base_config();
    let serial = simulate(&cfg, None);
    let bytes = encode_model(&serial.final_model, &serial.digest);
    for threads in [2, 4] {
        let par = simulate(&cfg, Some(threads));
        assert_eq!(encode_model(&par.final_model, &par.digest), bytes, "P={threads}");
        assert_eq!(metric_values(&par), metric_values(&serial), "P={threads}");
    }
    let mut audited = cfg.clone();
    audited.comm.serialize_inproc = true;
    let out = simulate(&audited, Some(3));
    assert_eq!(encode_model(&out.final_model, &out.digest), bytes);
}

#[test]
fn history_has_one_model_per_round() {
    let cfg = base_config();
    let out = run_simulation(&cfg).unwrap();
    assert_eq!(out.history.len(), 6);
    let task = Task::from_config(&cfg);
    assert_eq!(out.history[0], task.init_params(sub_seed(cfg.seed, domain::INIT)));
    assert_eq!(out.history.last().unwrap(), &out.final_model);
}

#[test]
fn zero_rounds_returns_the_initial_model() {
    let mut cfg = base_config();
    cfg.rounds = 0;
    let out = run_simulation(&cfg).unwrap();
    assert_eq!(out.history.len(), 1);
    assert_eq!(out.final_model, out.history[0]);
    assert!(out.local_models.is_empty());
}

#[test]
fn single_client_federation_is_local_training() {
    let mut cfg = base_config();
    cfg.clients = 1;
    cfg.rounds = 4;
    cfg.local_epochs = 2;
    cfg.batch_size = 16;
    let out = run_simulation(&cfg).unwrap();
    let task = Task::from_config(&cfg);
    let train = FederatedData::from_config(&cfg).unwrap().client(0).train;
    let settings = TrainSettings::from_config(&cfg);
    let mut w = task.init_params(sub_seed(cfg.seed, domain::INIT));
    for round in 0..cfg.rounds {
        let u = local_train(&task, &w, &train, &settings, 0, round, cfg.seed).unwrap();
        w = plain(&u).clone();
        assert_eq!(out.history[round as usize + 1], w, "round {round}");
    }
}

#[test]
fn proximal_term_limits_drift_each_round() {
    let mut cfg = base_config();
    cfg.clients = 1;
    cfg.rounds = 4;
    cfg.local_epochs = 3;
    let out = run_simulation(&cfg).unwrap();
    let task = Task::from_config(&cfg);
    let train = FederatedData::from_config(&cfg).unwrap().client(0).train;
    for (round, global) in out.history[..cfg.rounds as usize].iter().enumerate() {
        let mut last = f64::INFINITY;
        for mu in [0.0, 0.1, 1.0, 10.0] {
            let s = TrainSettings { prox_mu: mu, ..TrainSettings::from_config(&cfg) };
            let u = local_train(&task, global, &train, &s, 0, round as u32, cfg.seed).unwrap();
            let drift = l2_norm(&plain(&u).sub(global).unwrap());
            assert!(drift <= last, "round {round} mu {mu}: {drift} > {last}");
            last = drift;
        }
    }
}

#[test]
fn eval_local_records_one_pair_per_participation() {
    let mut cfg = base_config();
    cfg.clients = 6;
    cfg.client_fraction = 0.5;
    cfg.partition.scheme = Scheme::Iid;
    let out = run_simulation(&cfg).unwrap();
    let expected: usize = (0..cfg.rounds).map(|t| select_clients_attempt(6, 0.5, t, cfg.seed, 0).len()).sum();
    assert_eq!(out.local_models.len(), expected);
    assert_eq!(out.metrics.find(METRIC_TEST_LOSS).len(), expected);
    assert_eq!(out.metrics.find(METRIC_TEST_ACC).len(), expected);

    let task = Task::from_config(&cfg);
    let data = FederatedData::from_config(&cfg).unwrap();
    for rec in &out.local_models {
        let direct = evaluate(&task, &rec.params, &data.client(rec.client_id).test).unwrap();
        let scope = Scope::Client(rec.client_id);
        assert_eq!(out.metrics.get(scope, rec.round, METRIC_TEST_LOSS), Some(direct.loss));
        assert_eq!(out.metrics.get(scope, rec.round, METRIC_TEST_ACC), Some(direct.accuracy));
    }
}

#[test]
fn read_only_hooks_leave_the_trajectory_alone() {
    let mut cfg = base_config();
    cfg.hooks.eval_local = true;
    let with = run_simulation(&cfg).unwrap();
    cfg.hooks.eval_local = false;
    let without = run_simulation(&cfg).unwrap();
    assert_eq!(with.history, without.history);
    assert!(without.metrics.find(METRIC_TEST_ACC).is_empty());
}

fn shutdown_config(shutdown: bool) -> ExperimentConfig {
    let mut cfg = base_config();
    cfg.rounds = 10;
    cfg.cost.enabled = true;
    cfg.cost.base_round_sec = PerClient::Each(vec![1.0, 1.0, 1.0, 10.0]);
    cfg.cost.spin_up_time_sec = 2.0;
    cfg.cost.shutdown_threshold_sec = 5.0;
    cfg.hooks.cost_shutdown = shutdown;
    cfg
}

#[test]
fn cost_aware_shutdown() {
    let baseline = run_simulation(&shutdown_config(false)).unwrap();
    let out = run_simulation(&shutdown_config(true)).unwrap();
    assert_eq!(out.final_model, baseline.final_model);
    assert!(baseline.terminations.is_empty());

    let mut seen: Vec<(u32, u32)> = out.terminations.iter().map(|t| (t.round, t.client_id)).collect();
    seen.sort();
    let expected: Vec<(u32, u32)> = (1..10).flat_map(|r| (0..3).map(move |c| (r, c))).collect();
    assert_eq!(seen, expected);
    for t in &out.terminations {
        // Fast clients stop one second into each ten-second round.
        assert_eq!(t.at, 10.0 * t.round as f64 + 1.0);
    }

    // Baseline: four instances up for 100 s. With shutdown each fast
    // instance is billed 10 s + 9 x 1 s of up-time and 8 spin-ups of 2 s.
    assert_eq!(baseline.end_time, 100.0);
    assert_eq!(baseline.costs.as_ref().unwrap().iter().sum::<f64>(), 400.0);
    let costs = out.costs.as_ref().unwrap();
    assert_eq!(costs, &vec![35.0, 35.0, 35.0, 100.0]);
    assert_eq!(out.metrics.get(Scope::Server, 10, "cost_total"), Some(205.0));
}

#[test]
fn homogeneous_speeds_never_shut_down() {
    let mut cfg = shutdown_config(true);
    cfg.cost.base_round_sec = PerClient::Uniform(3.0);
    let out = run_simulation(&cfg).unwrap();
    assert!(out.terminations.is_empty());
    let costs = out.costs.unwrap();
    assert!(costs.iter().all(|c| *c == 30.0));
}

#[test]
fn quorum_closes_without_the_straggler() {
    let mut cfg = base_config();
    cfg.clients = 3;
    cfg.rounds = 3;
    cfg.timing.quorum = Quorum::Count(2);
    cfg.cost.base_round_sec = PerClient::Each(vec![1.0, 2.0, 50.0]);
    let out = run_simulation(&cfg).unwrap();
    for t in 0..3 {
        assert_eq!(out.metrics.get(Scope::Server, t, "straggler_dropped"), Some(1.0));
        assert_eq!(out.metrics.get(Scope::Server, t, "round_duration"), Some(2.0));
    }
    let first: Vec<LocalUpdate> = out
        .local_models
        .iter()
        .filter(|m| m.round == 0 && m.client_id < 2)
        .map(|m| {
            let data = FederatedData::from_config(&cfg).unwrap();
            LocalUpdate {
                client_id: m.client_id,
                round: 0,
                sample_count: data.client(m.client_id).train.len() as u64,
                payload: Payload::Plain(m.params.clone()),
                train_loss: 0.0,
                wall_time_sec: 1.0,
                metrics: Default::default(),
            }
        })
        .collect();
    assert_eq!(first.len(), 2);
    assert_eq!(out.history[1], fedavg(&first).unwrap());
}

#[test]
fn timed_out_round_is_retried_with_a_new_selection() {
    let mut cfg = base_config();
    cfg.clients = 4;
    cfg.rounds = 1;
    cfg.client_fraction = 0.5;
    cfg.timing.round_timeout_sec = 20.0;
    cfg.cost.base_round_sec = PerClient::Each(vec![1.0, 1.0, 1.0, 1.0]);
    // Find a seed whose first selection has a client the retry does not.
    let (seed, slow) = (0..1000u64)
        .find_map(|s| {
            let a = select_clients_attempt(4, 0.5, 0, s, 0);
            let b = select_clients_attempt(4, 0.5, 0, s, 1);
            a.iter().find(|c| !b.contains(c)).map(|c| (s, *c))
        })
        .unwrap();
    cfg.seed = seed;
    let mut speeds = vec![1.0; 4];
    speeds[slow as usize] = 100.0;
    cfg.cost.base_round_sec = PerClient::Each(speeds);
    let out = run_simulation(&cfg).unwrap();
    let retry = select_clients_attempt(4, 0.5, 0, seed, 1);
    assert_eq!(out.metrics.get(Scope::Server, 0, "round_duration"), Some(1.0));
    let aggregated: Vec<u32> = out
        .metrics
        .find(METRIC_TEST_ACC)
        .into_iter()
        .filter_map(|(s, _, _)| match s {
            Scope::Client(c) => Some(c),
            Scope::Server => None,
        })
        .collect();
    assert_eq!(aggregated, retry);
    assert_eq!(out.end_time, 21.0);
}

#[test]
fn quorum_failure_after_retry_is_fatal() {
    let mut cfg = base_config();
    cfg.rounds = 2;
    cfg.timing.round_timeout_sec = 5.0;
    cfg.cost.base_round_sec = PerClient::Each(vec![1.0, 1.0, 1.0, 10.0]);
    match run_simulation(&cfg) {
        Err(Error::QuorumNotMet { round: 0, received: 3, required: 4 }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn secure_aggregation_tracks_plain_fedavg() {
    let plain_run = run_simulation(&base_config()).unwrap();
    let mut cfg = base_config();
    cfg.secagg.enabled = true;
    cfg.comm.auth_token = "mask-seed".into();
    let masked = run_simulation(&cfg).unwrap();
    let gap = plain_run
        .final_model
        .as_slice()
        .iter()
        .zip(masked.final_model.as_slice())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(gap <= 1e-4, "max gap {gap}");
    assert_ne!(plain_run.final_model, masked.final_model);
}

#[test]
fn differential_privacy_is_seeded() {
    let mut cfg = base_config();
    cfg.dp.enabled = true;
    cfg.dp.clip = 1.0;
    cfg.dp.epsilon = 2.0;
    let a = run_simulation(&cfg).unwrap();
    let b = simulate(&cfg, Some(4));
    assert_eq!(a.final_model, b.final_model);
    assert_ne!(a.final_model, run_simulation(&base_config()).unwrap().final_model);
}

#[test]
fn async_budget_counts_applications() {
    let mut cfg = base_config();
    cfg.clients = 3;
    cfg.aggregator = Aggregator::Async;
    cfg.async_budget = 10;
    cfg.cost.base_round_sec = PerClient::Each(vec![1.0, 2.5, 4.0]);
    let out = run_simulation(&cfg).unwrap();
    assert_eq!(out.history.len(), 11);
    assert_eq!(out.metrics.find("staleness").len(), 10);
    assert_eq!(out.metrics.find("accuracy").len(), 10);
    // Client 0 is fastest, so the first application has no staleness and
    // later ones from the slow client lag behind.
    assert_eq!(out.metrics.get(Scope::Server, 0, "staleness"), Some(0.0));
    assert!(out.metrics.find("staleness").iter().any(|(_, _, s)| *s > 0.0));
    assert_eq!(simulate(&cfg, Some(4)).final_model, out.final_model);
}

#[test]
fn single_client_async_is_mixed_sgd() {
    let mut cfg = base_config();
    cfg.clients = 1;
    cfg.aggregator = Aggregator::Async;
    cfg.async_budget = 2;
    cfg.async_alpha = 0.5;
    let out = run_simulation(&cfg).unwrap();
    let task = Task::from_config(&cfg);
    let train = FederatedData::from_config(&cfg).unwrap().client(0).train;
    let settings = TrainSettings::from_config(&cfg);
    let mut w = task.init_params(sub_seed(cfg.seed, domain::INIT));
    for t in 0..2u32 {
        let local = local_train(&task, &w, &train, &settings, 0, t, cfg.seed).unwrap();
        let next: Vec<f64> = w.as_slice().iter().zip(plain(&local).as_slice()).map(|(g, u)| 0.5 * g + 0.5 * u).collect();
        w = ParameterVector::new(next).unwrap();
        assert_eq!(out.history[t as usize + 1], w);
    }
}

#[test]
fn failing_hooks_are_counted_or_fatal() {
    let cfg = base_config();
    let mut hooks = HookRegistry::from_config(&cfg);
    hooks.register(HookEvent::AfterAggregation, "boom", 0, Arc::new(|_, _| Err("server boom".into())));
    hooks.register(HookEvent::BeforeModelUpload, "boom", 0, Arc::new(|_, _| Err("client boom".into())));
    let out = run_simulation_with(&cfg, hooks.clone(), SimOptions::default(), None).unwrap();
    for t in 0..cfg.rounds {
        // one server failure plus one per participating client
        assert_eq!(out.metrics.get(Scope::Server, t, METRIC_HOOK_ERRORS), Some(5.0));
    }
    assert_eq!(out.final_model, run_simulation(&cfg).unwrap().final_model);

    hooks.set_strict(true);
    match run_simulation_with(&cfg, hooks, SimOptions::default(), None) {
        Err(Error::Hook { .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn metrics_reach_the_sink_every_round() {
    use std::sync::Mutex;

    struct Shared(Arc<Mutex<Vec<u32>>>);
    impl MetricsSink for Shared {
        fn write(&mut self, records: &[flk_core::metrics::MetricRecord]) -> flk_core::Result<()> {
            self.0.lock().unwrap().extend(records.iter().map(|r| r.round));
            Ok(())
        }
    }

    let cfg = base_config();
    let rounds = Arc::new(Mutex::new(Vec::new()));
    let out = run_simulation_with(&cfg, HookRegistry::from_config(&cfg), SimOptions::default(), Some(Box::new(Shared(rounds.clone()))))
        .unwrap();
    let seen = rounds.lock().unwrap();
    assert_eq!(seen.len(), out.records.len());
    for t in 0..cfg.rounds {
        assert!(seen.contains(&t));
    }
}
