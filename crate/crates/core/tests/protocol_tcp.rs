use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use qmix_core::batching::{batch_by_class, build_global_states, GlobalState, Strategy, WeightMode};
use qmix_core::classifier::TrainConfig;
use qmix_core::datagen::{gen_toy_pure, ToyParams};
use qmix_core::protocol::{
    client_send, client_write_offline, read_qgs_file, serve, train_on_globals, ClientConfig, ProtocolError, ServerConfig, TimeoutPolicy,
    TrainRequest,
};

fn globals() -> Vec<GlobalState> {
    let ds = gen_toy_pure(
        &ToyParams {
            e_s: 0.4,
            e_shift: 4.0,
            n_per_class: 40,
        },
        3,
    )
    .unwrap();
    let states = ds.densities().unwrap();
    let batches = batch_by_class(&states, &ds.labels(), Strategy::Random, 4, 3).unwrap();
    build_global_states(&batches, &states, WeightMode::Unit).unwrap()
}

fn request() -> TrainRequest {
    let mut config = TrainConfig::new(2, 1, 9);
    config.maxiter_per_epoch = 40;
    config.max_epochs = 3;
    config.patience = 2;
    TrainRequest { n_qubits: 2, config }
}

fn run_round(parts: Vec<Vec<GlobalState>>) -> (qmix_core::protocol::ModelResult, Vec<qmix_core::protocol::ModelResult>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let cfg = ServerConfig::new(parts.len(), Some(request()));
    let server = thread::spawn(move || serve(listener, &cfg).unwrap());
    let clients: Vec<_> = parts
        .into_iter()
        .enumerate()
        .map(|(i, g)| {
            let cfg = ClientConfig::new(i as u32 + 1, addr.clone());
            thread::spawn(move || client_send(&cfg, &g).unwrap())
        })
        .collect();
    let results = clients.into_iter().map(|c| c.join().unwrap().result.unwrap()).collect();
    (server.join().unwrap(), results)
}

#[test]
fn topologies_match_local_training() {
    let all = globals();
    let local = train_on_globals(&all, &request()).unwrap();

    let (one, delivered) = run_round(vec![all.clone()]);
    assert_eq!(one, local);
    assert_eq!(delivered, vec![local.clone()]);

    // client 1 holds the first half, client 2 the rest; aggregation restores the order
    let half = all.len() / 2;
    let (two, delivered) = run_round(vec![all[..half].to_vec(), all[half..].to_vec()]);
    assert_eq!(two, local);
    assert!(delivered.iter().all(|r| *r == local));
}

#[test]
fn offline_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let all = globals();
    let t = client_write_offline(7, dir.path(), &all).unwrap();
    assert_eq!(t.files.len(), all.len());
    assert!(t.files[0].file_name().unwrap().to_str().unwrap().starts_with("client7_batch0000"));
    for (f, g) in t.files.iter().zip(&all) {
        assert_eq!(&read_qgs_file(f).unwrap(), g);
    }
}

#[test]
fn unreachable_server_after_retries() {
    let addr = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().to_string()
    };
    let mut cfg = ClientConfig::new(1, addr);
    cfg.retries = 2;
    cfg.backoff = Duration::from_millis(5);
    match client_send(&cfg, &globals()) {
        Err(e @ ProtocolError::Unreachable { attempts: 3, .. }) => assert!(e.is_transport()),
        other => panic!("expected Unreachable, got {other:?}"),
    }
}

#[test]
fn missing_client_times_out() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let mut cfg = ServerConfig::new(2, Some(request()));
    cfg.client_timeout = Duration::from_millis(300);
    cfg.on_timeout = TimeoutPolicy::Abort;
    let server = thread::spawn(move || serve(listener, &cfg));
    let client = thread::spawn(move || client_send(&ClientConfig::new(1, addr), &globals()));
    assert!(matches!(
        server.join().unwrap(),
        Err(ProtocolError::ClientTimeout { got: 1, expected: 2 })
    ));
    assert!(matches!(client.join().unwrap(), Err(ProtocolError::Remote(_))));
}

#[test]
fn proceed_policy_trains_on_partial_aggregate() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let mut cfg = ServerConfig::new(2, Some(request()));
    cfg.client_timeout = Duration::from_millis(300);
    cfg.on_timeout = TimeoutPolicy::Proceed;
    let all = globals();
    let expected = train_on_globals(&all, &request()).unwrap();
    let server = thread::spawn(move || serve(listener, &cfg));
    let client = thread::spawn(move || client_send(&ClientConfig::new(1, addr), &all));
    assert_eq!(server.join().unwrap().unwrap(), expected);
    assert_eq!(client.join().unwrap().unwrap().result.unwrap(), expected);
}
