use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use pumpsched_core::dataset::{behavioral_action, parse_trajectory, DemandTrace, DEFAULT_KW_TOLERANCE};
use pumpsched_core::env::Env;
use pumpsched_core::{Action, AppConfig};
use pumpsched_service::{serve, ServiceState};
use serde_json::{json, Value};
use tokio::net::TcpStream;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

struct Server {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    task: JoinHandle<std::io::Result<Vec<std::path::PathBuf>>>,
    http: reqwest::Client,
    _dir: tempfile::TempDir,
}

impl Server {
    async fn start(mut config: AppConfig) -> Self {
        let dir = tempfile::tempdir().unwrap();
        config.service.flush_dir = dir.path().to_path_buf();
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = oneshot::channel();
        let state = ServiceState::new(config);
        let task = tokio::spawn(serve(listener, state, async move {
            let _ = rx.await;
        }));
        Self {
            addr,
            stop: Some(tx),
            task,
            http: reqwest::Client::new(),
            _dir: dir,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    async fn create(&self, body: Value) -> (u16, Value) {
        let resp = self.http.post(self.url("/sessions")).json(&body).send().await.unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap())
    }

    async fn create_ok(&self, body: Value) -> (String, Value) {
        let (status, v) = self.create(body).await;
        assert_eq!(status, 201, "{v}");
        (v["session_id"].as_str().unwrap().to_string(), v)
    }

    async fn connect(&self, id: &str) -> Ws {
        connect_async(format!("ws://{}/sessions/{id}/stream", self.addr)).await.unwrap().0
    }

    async fn shutdown(mut self) -> Vec<std::path::PathBuf> {
        self.stop.take().unwrap().send(()).unwrap();
        tokio::time::timeout(Duration::from_secs(10), self.task)
            .await
            .expect("server stops")
            .unwrap()
            .unwrap()
    }
}

async fn recv(ws: &mut Ws) -> Value {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(10), ws.next())
            .await
            .expect("message within timeout")
            .expect("stream open")
            .unwrap();
        if let Message::Text(t) = msg {
            return serde_json::from_str(t.as_str()).unwrap();
        }
    }
}

async fn act(ws: &mut Ws, action: &str, seq: u64) -> Value {
    send(ws, json!({"v": 1, "kind": "act", "action": action, "seq": seq})).await;
    recv(ws).await
}

async fn send(ws: &mut Ws, v: Value) {
    ws.send(Message::Text(v.to_string().into())).await.unwrap();
}

fn zero_demand(minutes: usize) -> Value {
    json!({"v": 1, "kind": "create", "scenario": {"demand": vec![0.0; minutes]}})
}

#[tokio::test]
async fn health_reports_version() {
    let srv = Server::start(AppConfig::default()).await;
    let v: Value = srv.http.get(srv.url("/health")).send().await.unwrap().json().await.unwrap();
    assert_eq!(v["status"], "ok");
    assert_eq!(v["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(v["protocol"], 1);
    srv.shutdown().await;
}

#[tokio::test]
async fn create_list_and_reject() {
    let srv = Server::start(AppConfig::default()).await;
    let (a, created) = srv.create_ok(json!({"v": 1, "kind": "create"})).await;
    let (b, _) = srv.create_ok(json!({"v": 1, "kind": "create", "scenario": {"seed": 4}})).await;
    assert_ne!(a, b);
    assert_eq!(created["kind"], "created");
    assert_eq!(created["v"], 1);
    assert_eq!(created["observation"]["tank_level"], 52.0);

    let list: Value = srv.http.get(srv.url("/sessions")).send().await.unwrap().json().await.unwrap();
    let ids: Vec<&str> = list.as_array().unwrap().iter().map(|s| s["session_id"].as_str().unwrap()).collect();
    assert!(ids.contains(&a.as_str()) && ids.contains(&b.as_str()));

    let (status, err) = srv
        .create(json!({"v": 1, "kind": "create", "scenario": {"initial_level": 60.0}}))
        .await;
    assert_eq!(status, 400);
    assert_eq!(err["kind"], "error");
    assert_eq!(err["code"], "invalid_scenario");
    let (status, err) = srv.create(json!({"v": 7, "kind": "create"})).await;
    assert_eq!(status, 400);
    assert_eq!(err["code"], "unsupported_version");
    let list: Value = srv.http.get(srv.url("/sessions")).send().await.unwrap().json().await.unwrap();
    assert_eq!(list.as_array().unwrap().len(), 2);

    let resp = srv.http.get(srv.url(&format!("/sessions/{}/export", uuid::Uuid::nil()))).send().await.unwrap();
    assert_eq!(resp.status().as_u16(), 404);
    srv.shutdown().await;
}

#[tokio::test]
async fn act_round_trip_and_bad_action() {
    let srv = Server::start(AppConfig::default()).await;
    let (id, _) = srv.create_ok(zero_demand(10)).await;
    let mut ws = srv.connect(&id).await;

    let st = act(&mut ws, "NOP", 1).await;
    assert_eq!(st["kind"], "state");
    assert_eq!(st["seq"], 1);
    assert_eq!(st["observation"]["tank_level"], 52.0);
    assert_eq!(st["totals"]["steps"], 1);

    let err = act(&mut ws, "NP9", 2).await;
    assert_eq!(err["kind"], "error");
    assert_eq!(err["code"], "bad_action");
    assert_eq!(err["seq"], 2);

    send(&mut ws, json!({"v": 1, "kind": "act"})).await;
    assert_eq!(recv(&mut ws).await["code"], "bad_message");

    let st = act(&mut ws, "np2", 3).await;
    assert_eq!(st["totals"]["steps"], 2, "failed acts leave the env untouched");
    assert_eq!(st["action"], "NP2");
    assert_eq!(st["switches"], 1);
    assert!(st["info"]["kw"].as_f64().unwrap() > 0.0);
    assert!(st["observation"]["tank_level"].as_f64().unwrap() > 52.0);

    let empty = srv.create_ok(zero_demand(10)).await.0;
    let resp = srv.http.get(srv.url(&format!("/sessions/{empty}/export"))).send().await.unwrap();
    assert_eq!(resp.status().as_u16(), 409);
    srv.shutdown().await;
}

#[tokio::test]
async fn rapid_acts_serialize_in_order() {
    let srv = Server::start(AppConfig::default()).await;
    let (id, _) = srv.create_ok(json!({"v": 1, "kind": "create", "scenario": {"days": 1, "seed": 2}})).await;
    let mut ws = srv.connect(&id).await;
    let actions = ["NP1", "NP1", "NOP", "NP3", "NP4", "NP4", "NOP", "NP2"];
    for (i, a) in actions.iter().cycle().take(40).enumerate() {
        send(&mut ws, json!({"v": 1, "kind": "act", "action": a, "seq": i})).await;
    }
    for i in 0..40u64 {
        let st = recv(&mut ws).await;
        assert_eq!(st["seq"], i);
        assert_eq!(st["totals"]["steps"], i + 1);
    }
    srv.shutdown().await;
}

#[tokio::test]
async fn episode_rollover_is_reset_free() {
    let srv = Server::start(AppConfig::default()).await;
    let demand: Vec<f64> = (0..1500).map(|i| 150.0 + (i % 7) as f64).collect();
    let (id, _) = srv
        .create_ok(json!({"v": 1, "kind": "create", "scenario": {"demand": demand}}))
        .await;
    let mut ws = srv.connect(&id).await;
    let mut last_level = 0.0;
    for i in 0..1439u64 {
        let st = act(&mut ws, if i % 200 < 120 { "NP1" } else { "NOP" }, i).await;
        last_level = st["observation"]["tank_level"].as_f64().unwrap();
    }
    let st = act(&mut ws, "NOP", 1439).await;
    assert_eq!(st["info"]["episode_end"], true);
    assert_eq!(st["totals"]["episode"], 1);
    assert_eq!(st["observation"]["water_quality"], false);
    let end_level = st["observation"]["tank_level"].as_f64().unwrap();
    assert!((end_level - last_level).abs() < 0.01);
    let ep = recv(&mut ws).await;
    assert_eq!(ep["kind"], "episode_end");
    assert_eq!(ep["episode"], 0);
    assert_eq!(ep["steps"], 1440);

    let st = act(&mut ws, "NP2", 1440).await;
    assert_eq!(st["kind"], "state");
    assert_eq!(st["totals"]["step_in_episode"], 1);
    assert_eq!(st["observation"]["time_running"], json!([0, 1, 0, 0, 0]));
    srv.shutdown().await;
}

#[tokio::test]
async fn export_round_trips_and_inverts() {
    let srv = Server::start(AppConfig::default()).await;
    let (id, _) = srv.create_ok(json!({"v": 1, "kind": "create", "scenario": {"days": 2, "seed": 8}})).await;
    let mut ws = srv.connect(&id).await;
    let names = ["NP1", "NP2", "NP3", "NP4", "NOP"];
    let mut acted = Vec::new();
    let mut state = 12345u64;
    for i in 0..1440u64 {
        // Hold each action for a pseudo-random stretch.
        if i % 37 == 0 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        }
        let name = names[(state >> 33) as usize % 5];
        acted.push(name.parse::<Action>().unwrap());
        let st = act(&mut ws, name, i).await;
        assert_eq!(st["kind"], "state", "{st}");
    }
    assert_eq!(recv(&mut ws).await["kind"], "episode_end");

    let resp = srv.http.get(srv.url(&format!("/sessions/{id}/export"))).send().await.unwrap();
    assert_eq!(resp.status().as_u16(), 200);
    assert!(resp.headers()["content-disposition"].to_str().unwrap().contains(&id));
    let csv = resp.text().await.unwrap();
    let rows = parse_trajectory(csv.as_bytes()).unwrap();
    assert_eq!(rows.len(), 1440);
    let recorded: Vec<Action> = rows.iter().map(|r| r.action).collect();
    assert_eq!(recorded, acted);
    let inferred: Vec<Action> = rows
        .iter()
        .map(|r| behavioral_action(&r.record, DEFAULT_KW_TOLERANCE).action)
        .collect();
    assert_eq!(inferred, acted);

    send(&mut ws, json!({"v": 1, "kind": "export", "seq": 99})).await;
    let exported = recv(&mut ws).await;
    assert_eq!(exported["kind"], "exported");
    assert_eq!(exported["rows"], 1440);
    assert_eq!(exported["csv"].as_str().unwrap(), csv);
    srv.shutdown().await;
}

/// Sessions driven concurrently match a sequential run of the same scenario.
#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_sessions_are_linearizable_and_isolated() {
    let srv = Arc::new(Server::start(AppConfig::default()).await);
    let mut tasks = Vec::new();
    for k in 0..6u64 {
        let srv = srv.clone();
        tasks.push(tokio::spawn(async move {
            let (id, _) = srv
                .create_ok(json!({"v": 1, "kind": "create", "scenario": {"days": 1, "seed": k}}))
                .await;
            let mut ws = srv.connect(&id).await;
            let mut levels = Vec::new();
            let mut actions = Vec::new();
            for i in 0..300u64 {
                let a = Action::ALL[((i / (20 + k)) as usize + k as usize) % 5];
                actions.push(a);
                let st = act(&mut ws, a.name(), i).await;
                levels.push(st["observation"]["tank_level"].as_f64().unwrap());
            }
            (k, actions, levels)
        }));
    }

    // A misbehaving session alongside: garbage, exhausted trace, abrupt disconnect.
    let (bad, _) = srv.create_ok(zero_demand(3)).await;
    let mut ws = srv.connect(&bad).await;
    ws.send(Message::Text("{not json".into())).await.unwrap();
    assert_eq!(recv(&mut ws).await["code"], "bad_message");
    for i in 0..3 {
        act(&mut ws, "NP1", i).await;
    }
    let err = act(&mut ws, "NP1", 3).await;
    assert_eq!(err["code"], "simulation_error");
    drop(ws);

    let cfg = AppConfig::default();
    for t in tasks {
        let (k, actions, levels) = t.await.unwrap();
        let trace = pumpsched_core::dataset::synthesize_demand(1, k, &cfg.demand);
        let mut env = Env::new(cfg.hydraulics.clone(), cfg.reward, &cfg.env, trace).unwrap();
        env.reset(cfg.env.initial_level, 0).unwrap();
        for (a, level) in actions.iter().zip(&levels) {
            let out = env.step(*a).unwrap();
            assert_eq!(out.observation.tank_level, *level);
        }
    }
    let health: Value = srv.http.get(srv.url("/health")).send().await.unwrap().json().await.unwrap();
    assert_eq!(health["sessions"], 7);
    Arc::try_unwrap(srv).ok().unwrap().shutdown().await;
}

#[tokio::test]
async fn timed_clock_latches_last_action() {
    let srv = Server::start(AppConfig::default()).await;
    let (id, created) = srv
        .create_ok(json!({"v": 1, "kind": "create", "clock": {"mode": "timed", "minutes_per_second": 100.0}}))
        .await;
    assert_eq!(created["clock"]["mode"], "timed");
    let mut ws = srv.connect(&id).await;
    send(&mut ws, json!({"v": 1, "kind": "act", "action": "NP3", "seq": 1})).await;
    // The acknowledgement may interleave with ticks.
    let mut acked = false;
    let mut ticks_after = Vec::new();
    while ticks_after.len() < 5 {
        let m = recv(&mut ws).await;
        assert_eq!(m["kind"], "state");
        if m["latched"] == true {
            assert_eq!(m["seq"], 1);
            assert_eq!(m["action"], "NP3");
            acked = true;
        } else if acked {
            assert!(m["seq"].is_null());
            ticks_after.push(m["action"].as_str().unwrap().to_string());
        }
    }
    assert!(ticks_after.iter().all(|a| a == "NP3"), "{ticks_after:?}");
    srv.shutdown().await;
}

#[tokio::test]
async fn idle_sessions_expire_and_flush() {
    let mut cfg = AppConfig::default();
    cfg.service.session_ttl_secs = 1;
    let srv = Server::start(cfg).await;
    let (id, _) = srv.create_ok(zero_demand(10)).await;
    {
        let mut ws = srv.connect(&id).await;
        act(&mut ws, "NP4", 0).await;
        act(&mut ws, "NP4", 1).await;
        ws.close(None).await.unwrap();
    }
    let (keep, _) = srv.create_ok(zero_demand(10)).await;
    let path = srv._dir.path().join(format!("{id}.csv"));
    let mut waited = 0;
    while !path.exists() && waited < 60 {
        tokio::time::sleep(Duration::from_millis(100)).await;
        waited += 1;
    }
    assert!(path.exists(), "expired session was flushed");
    let rows = parse_trajectory(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    let resp = srv.http.get(srv.url(&format!("/sessions/{id}/export"))).send().await.unwrap();
    assert_eq!(resp.status().as_u16(), 404);
    // Sessions without steps expire without leaving a file.
    assert!(!srv._dir.path().join(format!("{keep}.csv")).exists());
    srv.shutdown().await;
}

#[tokio::test]
async fn shutdown_flushes_open_sessions() {
    let srv = Server::start(AppConfig::default()).await;
    let (id, _) = srv.create_ok(zero_demand(10)).await;
    let mut ws = srv.connect(&id).await;
    for i in 0..4 {
        act(&mut ws, "NP2", i).await;
    }
    let dir = srv._dir.path().to_path_buf();
    let trace = DemandTrace {
        start: AppConfig::default().demand.start,
        demand: vec![0.0; 10],
    };
    let flushed = {
        let stop = tokio::spawn(srv.shutdown_keep_dir());
        // The open stream is closed by the server.
        let mut closed = false;
        while let Ok(Some(msg)) = tokio::time::timeout(Duration::from_secs(5), ws.next()).await {
            if matches!(msg, Ok(Message::Close(_)) | Err(_)) {
                closed = true;
                break;
            }
        }
        assert!(closed);
        stop.await.unwrap()
    };
    assert_eq!(flushed.0, vec![dir.join(format!("{id}.csv"))]);
    let rows = parse_trajectory(std::fs::File::open(&flushed.0[0]).unwrap()).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].record.timestamp, trace.start);
}

impl Server {
    /// Shut down but hand the temporary directory back to the caller.
    async fn shutdown_keep_dir(mut self) -> (Vec<std::path::PathBuf>, tempfile::TempDir) {
        self.stop.take().unwrap().send(()).unwrap();
        let flushed = tokio::time::timeout(Duration::from_secs(10), self.task)
            .await
            .expect("server stops")
            .unwrap()
            .unwrap();
        (flushed, self._dir)
    }
}
