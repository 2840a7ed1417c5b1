use std::net::SocketAddr;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::{SinkExt, StreamExt};
use phrc::bridge::{router, BridgeOptions, BridgeStats, ServerMessage, StateFrame};
use phrc_core::control::kappa_from_force;
use phrc_core::Vec3;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::watch;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

type Client = WebSocketStream<MaybeTlsStream<TcpStream>>;

struct Server {
    addr: SocketAddr,
    stats: Arc<BridgeStats>,
    close: watch::Sender<bool>,
}

async fn start(opts: BridgeOptions) -> Server {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (close, rx) = watch::channel(false);
    let (app, stats) = router(opts, rx);
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    Server { addr, stats, close }
}

async fn connect(server: &Server) -> Client {
    connect_async(format!("ws://{}/ws", server.addr)).await.unwrap().0
}

async fn next_message(ws: &mut Client) -> Option<ServerMessage> {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(5), ws.next()).await.expect("frame within 5 s")?;
        match msg.ok()? {
            Message::Text(t) => return Some(serde_json::from_str(t.as_str()).expect("well-formed frame")),
            Message::Close(_) => return None,
            _ => continue,
        }
    }
}

async fn next_state(ws: &mut Client) -> StateFrame {
    loop {
        match next_message(ws).await.expect("session open") {
            ServerMessage::State(f) => return f,
            ServerMessage::Error { msg } => panic!("unexpected error frame: {msg}"),
        }
    }
}

async fn next_error(ws: &mut Client) -> String {
    loop {
        if let ServerMessage::Error { msg } = next_message(ws).await.expect("session open") {
            return msg;
        }
    }
}

async fn send(ws: &mut Client, text: &str) {
    ws.send(Message::Text(text.into())).await.unwrap();
}

async fn force(ws: &mut Client, f: [f64; 3]) {
    send(ws, &format!(r#"{{"type":"force","fx":{},"fy":{},"fz":{}}}"#, f[0], f[1], f[2])).await;
}

fn vec(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

fn assert_kappa_consistent(f: &StateFrame, alpha: f64) {
    assert_eq!(f.kappa, kappa_from_force(&vec(f.fh), alpha), "frame at t={}", f.t);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn kappa_follows_the_client_force() {
    let server = start(BridgeOptions::default()).await;
    let mut ws = connect(&server).await;

    for _ in 0..10 {
        let f = next_state(&mut ws).await;
        assert_eq!(f.kappa, 0.5);
        assert_eq!(f.fh, [0.0; 3]);
        assert_eq!(f.obstacles.len(), 1);
        assert!(f.pred_h.len() == 4 && f.pred_r.len() == 4, "12 predicted steps decimated by 3");
    }

    force(&mut ws, [0.0, 10.0, 0.0]).await;
    let mut raised = None;
    for _ in 0..2 {
        let f = next_state(&mut ws).await;
        assert_kappa_consistent(&f, 0.3);
        if f.kappa > 0.5 {
            raised = Some(f);
            break;
        }
    }
    let f = raised.expect("kappa rises within two frames");
    assert_eq!(f.fh, [0.0, 10.0, 0.0]);
    assert!((f.kappa - 0.95257).abs() < 1e-5);

    // Sustained drag, refreshed faster than the hold time.
    let until = Instant::now() + Duration::from_millis(600);
    while Instant::now() < until {
        force(&mut ws, [0.0, 10.0, 0.0]).await;
        let f = next_state(&mut ws).await;
        assert_kappa_consistent(&f, 0.3);
        assert!(f.kappa > 0.9);
    }

    // Without updates the force is released after the hold time.
    tokio::time::sleep(Duration::from_millis(300)).await;
    let mut released = false;
    for _ in 0..20 {
        let f = next_state(&mut ws).await;
        assert_kappa_consistent(&f, 0.3);
        if f.kappa == 0.5 {
            released = true;
            break;
        }
    }
    assert!(released);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn force_is_clamped_and_alpha_configurable() {
    let server = start(BridgeOptions::default()).await;
    let mut ws = connect(&server).await;
    next_state(&mut ws).await;

    force(&mut ws, [300.0, 400.0, 0.0]).await;
    let f = loop {
        let f = next_state(&mut ws).await;
        if f.kappa > 0.5 {
            break f;
        }
    };
    assert!((vec(f.fh).norm() - 20.0).abs() < 1e-12);
    assert!((f.fh[0] / f.fh[1] - 0.75).abs() < 1e-12);

    send(&mut ws, r#"{"type":"config","alpha":0.1}"#).await;
    force(&mut ws, [10.0, 0.0, 0.0]).await;
    let expected = 1.0 / (1.0 + (-1.0f64).exp());
    let mut seen = false;
    for _ in 0..10 {
        let f = next_state(&mut ws).await;
        if f.fh == [10.0, 0.0, 0.0] && (f.kappa - expected).abs() < 1e-12 {
            seen = true;
            break;
        }
    }
    assert!(seen, "alpha 0.1 applied");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn malformed_messages_get_error_frames() {
    let server = start(BridgeOptions::default()).await;
    let mut ws = connect(&server).await;
    next_state(&mut ws).await;

    for (text, needle) in [
        ("not json", "malformed"),
        (r#"{"type":"force","fx":1}"#, "malformed"),
        (r#"{"type":"teleport"}"#, "malformed"),
        (r#"{"type":"reset","scenario":"mars"}"#, "unknown scenario"),
        (r#"{"type":"config","alpha":-1}"#, "alpha"),
    ] {
        send(&mut ws, text).await;
        let msg = next_error(&mut ws).await;
        assert!(msg.contains(needle), "{text} -> {msg}");
    }
    ws.send(Message::Binary(vec![1, 2, 3].into())).await.unwrap();
    assert!(next_error(&mut ws).await.contains("binary"));

    // The session is still alive and unchanged.
    let f = next_state(&mut ws).await;
    assert_eq!(f.kappa, 0.5);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn reset_switches_scenario() {
    let server = start(BridgeOptions::default()).await;
    let mut ws = connect(&server).await;
    let mut t = 0.0;
    for _ in 0..10 {
        t = next_state(&mut ws).await.t;
    }
    assert!(t > 0.2);
    send(&mut ws, r#"{"type":"reset","scenario":"free"}"#).await;
    let f = loop {
        let f = next_state(&mut ws).await;
        if f.obstacles.is_empty() {
            break f;
        }
    };
    assert!(f.t < 0.1, "restarted at t = {}", f.t);
    assert_eq!(f.x, [0.0, 0.0, 0.2]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn streams_at_the_frame_rate() {
    let server = start(BridgeOptions::default()).await;
    let mut ws = connect(&server).await;
    let first = next_state(&mut ws).await.t;
    let started = Instant::now();
    let mut frames = 0;
    let mut last = first;
    while started.elapsed() < Duration::from_secs(2) {
        let f = next_state(&mut ws).await;
        assert!(f.t > last);
        last = f.t;
        frames += 1;
    }
    let rate = frames as f64 / started.elapsed().as_secs_f64();
    assert!(rate >= 25.0, "{rate:.1} frames/s");
    // Simulated time advances with wall time.
    let sim_rate = (last - first) / started.elapsed().as_secs_f64();
    assert!(sim_rate > 0.8 && sim_rate < 1.2, "simulated {sim_rate:.2} s per s");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn idle_sessions_are_reaped() {
    let opts = BridgeOptions {
        liveness: Duration::from_millis(300),
        ..BridgeOptions::default()
    };
    let server = start(opts).await;
    let mut ws = connect(&server).await;
    next_state(&mut ws).await;
    assert_eq!(server.stats.active.load(Ordering::SeqCst), 1);
    let started = Instant::now();
    let mut timed_out = false;
    while let Some(m) = next_message(&mut ws).await {
        if let ServerMessage::Error { msg } = m {
            timed_out |= msg.contains("liveness");
        }
    }
    assert!(timed_out);
    assert!(started.elapsed() < Duration::from_secs(2));
    let deadline = Instant::now() + Duration::from_secs(2);
    while server.stats.active.load(Ordering::SeqCst) != 0 {
        assert!(Instant::now() < deadline, "session not reaped");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }

    // A client that goes away is reaped as well, and reconnecting works.
    let ws = connect(&server).await;
    drop(ws);
    let mut ws = connect(&server).await;
    next_state(&mut ws).await;
    assert_eq!(server.stats.opened.load(Ordering::SeqCst), 3);
    let deadline = Instant::now() + Duration::from_secs(2);
    while server.stats.active.load(Ordering::SeqCst) != 1 {
        assert!(Instant::now() < deadline, "dropped session not reaped");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn shutdown_closes_sessions() {
    let server = start(BridgeOptions::default()).await;
    let mut ws = connect(&server).await;
    next_state(&mut ws).await;
    server.close.send(true).unwrap();
    while next_message(&mut ws).await.is_some() {}
    let deadline = Instant::now() + Duration::from_secs(2);
    while server.stats.active.load(Ordering::SeqCst) != 0 {
        assert!(Instant::now() < deadline);
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn serves_static_assets() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>sandbox</html>").unwrap();
    let opts = BridgeOptions {
        static_dir: Some(dir.path().to_path_buf()),
        ..BridgeOptions::default()
    };
    let server = start(opts).await;
    let get = |path: &'static str| async move {
        let mut s = TcpStream::connect(server.addr).await.unwrap();
        s.write_all(format!("GET {path} HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").as_bytes())
            .await
            .unwrap();
        let mut body = String::new();
        s.read_to_string(&mut body).await.unwrap();
        body
    };
    let index = get("/").await;
    assert!(index.starts_with("HTTP/1.1 200"), "{index}");
    assert!(index.contains("<html>sandbox</html>"));
    assert!(get("/missing.js").await.starts_with("HTTP/1.1 404"));
}
