use std::sync::Arc;

use flintlet_client::{Client, ClientError};
use flintlet_core::api::{BenchRequest, ExplainRequest, GenRequest, Mode, Overrides, RunRequest};
use flintlet_core::harness::{FlintConfig, QueryId, Verdict};
use flintlet_core::store::ObjectStore;
use flintlet_server::AppState;

/// Starts a server on an ephemeral port in a background runtime.
fn spawn_server() -> (Client, tokio::sync::oneshot::Sender<()>) {
    let mut cfg = FlintConfig::default();
    cfg.harness.partitions = 4;
    cfg.limits.time_scale = 1e-3;
    let state = AppState::new(Arc::new(ObjectStore::in_memory()), cfg);
    let (addr_tx, addr_rx) = std::sync::mpsc::channel();
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            addr_tx.send(listener.local_addr().unwrap()).unwrap();
            flintlet_server::serve(listener, state, async {
                let _ = stop_rx.await;
            })
            .await
            .unwrap();
        });
    });
    let addr = addr_rx.recv().unwrap();
    (Client::new(format!("http://{addr}/")), stop_tx)
}

fn q(n: u8) -> QueryId {
    QueryId::new(n).unwrap()
}

#[test]
fn end_to_end() {
    let (client, _stop) = spawn_server();
    assert_eq!(client.health().unwrap().status, "ok");
    assert_eq!(client.config().unwrap().harness.partitions, 4);

    let summary = client
        .generate(&GenRequest {
            records: 1200,
            seed: 3,
            out: "flint-data/taxi".into(),
            parts: 2,
        })
        .unwrap();
    assert_eq!(summary.records, 1200);

    let run = client
        .run(&RunRequest {
            query: q(3),
            mode: Mode::Flint,
            overrides: Overrides::default(),
        })
        .unwrap();
    assert_eq!(run.verdict, Some(Verdict::Ok));
    assert!(run.cost.unwrap().total > 0.0);

    let report = client
        .bench(&BenchRequest {
            queries: vec![q(0), q(6)],
            overrides: Overrides::default(),
        })
        .unwrap();
    assert!(report.all_ok());
    assert_eq!(report.queries.len(), 2);

    let plan = client
        .explain(&ExplainRequest {
            query: q(0),
            overrides: Overrides::default(),
        })
        .unwrap();
    assert_eq!(plan.stages.len(), 1);
}

#[test]
fn api_errors_surface() {
    let (client, _stop) = spawn_server();
    let err = client
        .run(&RunRequest {
            query: q(1),
            mode: Mode::Local,
            overrides: Overrides {
                input: Some("nowhere/at-all".into()),
                ..Overrides::default()
            },
        })
        .unwrap_err();
    match err {
        ClientError::Api { status, error, .. } => {
            assert_eq!(status, 404);
            assert_eq!(error, "no_dataset");
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn unreachable_server() {
    let client = Client::new("http://127.0.0.1:1");
    assert!(matches!(
        client.health(),
        Err(ClientError::Transport { .. })
    ));
}
