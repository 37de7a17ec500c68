use std::io::BufReader;
use std::net::{TcpListener, TcpStream};
use std::thread;
use std::time::Duration;

use flk_core::comm::codec::{read_frame, write_frame, Message, ERR_AUTH, ERR_SECAGG_DROPOUT};
use flk_core::comm::tcp::{ClientProxy, Fetched, RetryPolicy};
use flk_core::config::{Quorum, Scheme};
use flk_core::hooks::HookRegistry;
use flk_core::orchestrator::artifact::encode_model;
use flk_core::orchestrator::{run_client_at, run_simulation, Server};
use flk_core::{Error, ExperimentConfig};

fn config(clients: u32, rounds: u32) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 5;
    cfg.clients = clients;
    cfg.rounds = rounds;
    cfg.partition.scheme = Scheme::Dirichlet;
    cfg.comm.port = 0;
    cfg.comm.auth_token = "loopback-token".into();
    cfg
}

fn start_server(cfg: &ExperimentConfig) -> (String, thread::JoinHandle<flk_core::Result<flk_core::orchestrator::ServerOutcome>>) {
    let server = Server::bind(cfg, HookRegistry::from_config(cfg)).unwrap();
    let addr = server.local_addr().unwrap().to_string();
    (addr, thread::spawn(move || server.run()))
}

fn spawn_client(cfg: &ExperimentConfig, addr: &str, name: &str) -> thread::JoinHandle<flk_core::Result<flk_core::orchestrator::ClientOutcome>> {
    let (cfg, addr, name) = (cfg.clone(), addr.to_string(), name.to_string());
    thread::spawn(move || run_client_at(&cfg, &addr, &name, HookRegistry::from_config(&cfg), RetryPolicy::default()))
}

fn raw_exchange(stream: &mut TcpStream, msg: &Message) -> Option<Message> {
    write_frame(stream, msg).unwrap();
    read_frame(&mut BufReader::new(stream.try_clone().unwrap())).ok()
}

#[test]
fn loopback_run_matches_simulation() {
    let cfg = config(4, 5);
    let (addr, server) = start_server(&cfg);
    let clients: Vec<_> = (0..4).map(|i| spawn_client(&cfg, &addr, &i.to_string())).collect();
    for (i, c) in clients.into_iter().enumerate() {
        let out = c.join().unwrap().unwrap();
        assert_eq!(out.client_id, i as u32);
        assert_eq!(out.final_round, 5);
        assert_eq!(out.rounds_trained, 5);
    }
    let served = server.join().unwrap().unwrap();
    let simulated = run_simulation(&cfg).unwrap();
    assert_eq!(encode_model(&served.final_model, &served.digest), encode_model(&simulated.final_model, &simulated.digest));
    assert_eq!(served.history, simulated.history);
}

#[test]
fn wrong_token_is_rejected_and_closed() {
    let cfg = config(2, 1);
    let (addr, _server) = start_server(&cfg);
    let mut s = TcpStream::connect(&addr).unwrap();
    let reply = raw_exchange(&mut s, &Message::Register { auth_token: "nope".into(), client_name: "a".into() });
    assert!(matches!(reply, Some(Message::Error { code: ERR_AUTH, .. })), "{reply:?}");
    let mut reader = BufReader::new(s);
    assert!(read_frame(&mut reader).is_err(), "connection should be closed");

    let mut s = TcpStream::connect(&addr).unwrap();
    let reply = raw_exchange(&mut s, &Message::GetModel { client_id: 0 });
    assert!(matches!(reply, Some(Message::Error { code: ERR_AUTH, .. })), "{reply:?}");

    let mut proxy = ClientProxy::new(addr, "nope", "x");
    assert!(matches!(proxy.register(), Err(Error::Auth(_))));
}

#[test]
fn concurrent_registrations_get_distinct_ids() {
    let cfg = config(2, 1);
    let (addr, _server) = start_server(&cfg);
    let handles: Vec<_> = ["alpha", "beta"]
        .into_iter()
        .map(|name| {
            let addr = addr.clone();
            thread::spawn(move || ClientProxy::new(addr, "loopback-token", name).register().unwrap().0)
        })
        .collect();
    let mut ids: Vec<u32> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    ids.sort();
    assert_eq!(ids, vec![0, 1]);
}

#[test]
fn edited_config_is_refused_by_the_client() {
    let cfg = config(2, 1);
    let (addr, _server) = start_server(&cfg);
    let mut edited = cfg.clone();
    edited.learning_rate = 0.05;
    let result = run_client_at(&edited, &addr, "0", HookRegistry::new(), RetryPolicy::default());
    assert!(matches!(result, Err(Error::ConfigMismatch { .. })), "{result:?}");
}

#[test]
fn client_retries_until_the_server_is_up() {
    let mut cfg = config(1, 2);
    cfg.comm.port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{}", cfg.comm.port);
    let client = spawn_client(&cfg, &addr, "0");
    thread::sleep(Duration::from_millis(300));
    let (_, server) = start_server(&cfg);
    let out = client.join().unwrap().unwrap();
    assert_eq!(out.final_round, 2);
    server.join().unwrap().unwrap();
}

#[test]
fn proxy_rounds_increase_until_done() {
    let cfg = config(1, 2);
    let (addr, server) = start_server(&cfg);
    let mut proxy = ClientProxy::new(addr, "loopback-token", "solo");
    let (id, digest) = proxy.register().unwrap();
    assert_eq!((id, digest), (0, cfg.digest().0));
    let data = flk_core::partition::FederatedData::from_config(&cfg).unwrap().client(0);
    let task = flk_core::trainer::Task::from_config(&cfg);
    let settings = flk_core::trainer::TrainSettings::from_config(&cfg);
    let mut last = None;
    loop {
        match proxy.fetch_model().unwrap() {
            Fetched::Model { round, params, .. } => {
                assert!(last.is_none_or(|l| round > l));
                last = Some(round);
                let global = flk_core::ParameterVector::new(params).unwrap();
                let u = flk_core::trainer::local_train(&task, &global, &data.train, &settings, 0, round, cfg.seed).unwrap();
                proxy.submit_update(&u).unwrap();
            }
            Fetched::Done { final_round } => {
                assert_eq!(final_round, 2);
                break;
            }
        }
    }
    assert_eq!(last, Some(1));
    assert_eq!(proxy.fetch_model().unwrap(), Fetched::Done { final_round: 2 });
    server.join().unwrap().unwrap();
}

#[test]
fn secagg_dropout_fails_the_run_with_code_3() {
    let mut cfg = config(3, 1);
    cfg.secagg.enabled = true;
    cfg.timing.quorum = Quorum::Count(2);
    let (addr, server) = start_server(&cfg);
    let mut silent = ClientProxy::new(addr.clone(), "loopback-token", "2");
    silent.register().unwrap();
    let a = spawn_client(&cfg, &addr, "0");
    let b = spawn_client(&cfg, &addr, "1");
    let results = [a.join().unwrap(), b.join().unwrap()];
    assert!(
        results.iter().any(|r| matches!(r, Err(Error::Remote { code: ERR_SECAGG_DROPOUT, .. }))),
        "{results:?}"
    );
    assert!(matches!(server.join().unwrap(), Err(Error::SecaggDropout { missing }) if missing == vec![2]));
}
