//! Realtime sandbox: each websocket session drives its own closed-loop
//! simulation with the client acting as the human partner.
//!
//! Client → server text frames:
//! `{"type":"force","fx":..,"fy":..,"fz":..}`, `{"type":"reset","scenario":name}`,
//! `{"type":"config","alpha":..}`.
//! Server → client: `state` frames at `frame_hz` and `{"type":"error","msg":..}`.

use std::future::Future;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{mpsc as std_mpsc, Arc};
use std::thread;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use phrc_core::control::ControllerConfig;
use phrc_core::sim::{ClosedLoop, EpisodeOptions, KappaMode, PhrcAccumulator, PhrcMetrics, Scenario, TickRecord};
use phrc_core::Vec3;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::{mpsc, watch};
use tower_http::services::ServeDir;

use crate::predictors::PredictorPair;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct BridgeOptions {
    pub predictors: PredictorPair,
    pub config: ControllerConfig,
    /// Scenario a session starts in.
    pub scenario: Scenario,
    pub window_stride: usize,
    pub static_dir: Option<PathBuf>,
    /// A session without any client message for this long is closed.
    pub liveness: Duration,
    /// A client force is applied for this long after it arrives, then zero.
    pub force_hold: Duration,
    pub frame_hz: u32,
    /// Keep every n-th predicted point in state frames.
    pub pred_decimation: usize,
    pub seed: u64,
}

impl Default for BridgeOptions {
    fn default() -> Self {
        Self {
            predictors: PredictorPair::constant_velocity(),
            config: ControllerConfig::default(),
            scenario: Scenario::standard(0),
            window_stride: 1,
            static_dir: None,
            liveness: Duration::from_secs(10),
            force_hold: Duration::from_millis(200),
            frame_hz: 30,
            pred_decimation: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum ClientMessage {
    Force { fx: f64, fy: f64, fz: f64 },
    Reset { scenario: Option<String> },
    Config { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleView {
    pub center: [f64; 3],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsView {
    pub theta: Option<f64>,
    pub iasst: Option<f64>,
    pub mu: Option<f64>,
    pub work: f64,
}

impl From<PhrcMetrics> for MetricsView {
    fn from(m: PhrcMetrics) -> Self {
        Self {
            theta: m.theta,
            iasst: m.iasst,
            mu: m.mu,
            work: m.work,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    pub t: f64,
    pub x: [f64; 3],
    pub v: [f64; 3],
    pub fh: [f64; 3],
    pub fr: [f64; 3],
    pub kappa: f64,
    pub yref: [f64; 6],
    pub pred_h: Vec<[f64; 3]>,
    pub pred_r: Vec<[f64; 3]>,
    pub obstacles: Vec<ObstacleView>,
    pub metrics: MetricsView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ServerMessage {
    State(StateFrame),
    Error { msg: String },
}

impl ServerMessage {
    fn to_text(&self) -> String {
        serde_json::to_string(self).expect("frames hold plain data")
    }

    fn error(msg: impl Into<String>) -> String {
        Self::Error { msg: msg.into() }.to_text()
    }
}

/// Session counters, shared with whoever started the server.
#[derive(Debug, Default)]
pub struct BridgeStats {
    pub opened: AtomicU64,
    pub active: AtomicUsize,
}

struct Shared {
    opts: BridgeOptions,
    stats: Arc<BridgeStats>,
    closing: watch::Receiver<bool>,
}

/// Requests from ingress to the control loop other than force.
enum Control {
    Reset(Scenario),
    Alpha(f64),
}

fn arr3(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Build the router; flipping `closing` to true ends every session.
pub fn router(opts: BridgeOptions, closing: watch::Receiver<bool>) -> (Router, Arc<BridgeStats>) {
    let stats = Arc::new(BridgeStats::default());
    let static_dir = opts.static_dir.clone();
    let shared = Arc::new(Shared {
        opts,
        stats: stats.clone(),
        closing,
    });
    let app = Router::new().route("/ws", get(upgrade)).with_state(shared);
    let app = match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    };
    (app, stats)
}

/// Serve until `shutdown` resolves.
pub async fn serve(listener: TcpListener, opts: BridgeOptions, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<()> {
    let (close_tx, close_rx) = watch::channel(false);
    let (app, _) = router(opts, close_rx);
    axum::serve(listener, app)
        .with_graceful_shutdown(async move {
            shutdown.await;
            let _ = close_tx.send(true);
        })
        .await
        .map_err(|e| Error::Bridge(e.to_string()))
}

async fn upgrade(ws: WebSocketUpgrade, State(shared): State<Arc<Shared>>) -> Response {
    ws.on_upgrade(move |socket| session(socket, shared))
}

async fn session(socket: WebSocket, shared: Arc<Shared>) {
    let id = shared.stats.opened.fetch_add(1, Ordering::SeqCst);
    shared.stats.active.fetch_add(1, Ordering::SeqCst);
    let (mut sink, mut stream) = socket.split();
    let (out_tx, mut out_rx) = mpsc::channel::<String>(16);
    let (force_tx, force_rx) = watch::channel::<Option<(Vec3, Instant)>>(None);
    let (ctl_tx, ctl_rx) = std_mpsc::channel::<Control>();
    let stop = Arc::new(AtomicBool::new(false));

    let loop_handle = {
        let opts = shared.opts.clone();
        let out = out_tx.clone();
        let stop = stop.clone();
        thread::Builder::new()
            .name(format!("phrc-session-{id}"))
            .spawn(move || control_loop(&opts, force_rx, ctl_rx, out, stop))
    };
    let writer = tokio::spawn(async move {
        while let Some(text) = out_rx.recv().await {
            if sink.send(Message::Text(text.into())).await.is_err() {
                return;
            }
        }
        let _ = sink.close().await;
    });

    if let Err(e) = &loop_handle {
        let _ = out_tx.send(ServerMessage::error(format!("cannot start session: {e}"))).await;
    } else {
        let mut closing = shared.closing.clone();
        let f_max = shared.opts.scenario.f_max;
        loop {
            let next = tokio::select! {
                r = tokio::time::timeout(shared.opts.liveness, stream.next()) => r,
                _ = closing.wait_for(|c| *c) => break,
            };
            let msg = match next {
                Err(_) => {
                    let _ = out_tx.try_send(ServerMessage::error("liveness timeout"));
                    break;
                }
                Ok(None) | Ok(Some(Err(_))) => break,
                Ok(Some(Ok(m))) => m,
            };
            let text = match msg {
                Message::Text(t) => t,
                Message::Close(_) => break,
                Message::Ping(_) | Message::Pong(_) => continue,
                Message::Binary(_) => {
                    let _ = out_tx.try_send(ServerMessage::error("binary frames are not supported"));
                    continue;
                }
            };
            match serde_json::from_str::<ClientMessage>(text.as_str()) {
                Ok(ClientMessage::Force { fx, fy, fz }) => {
                    let f = Vec3::new(fx, fy, fz);
                    if !f.iter().all(|c| c.is_finite()) {
                        let _ = out_tx.try_send(ServerMessage::error("force must be finite"));
                        continue;
                    }
                    let f = if f.norm() > f_max { f * (f_max / f.norm()) } else { f };
                    force_tx.send_replace(Some((f, Instant::now())));
                }
                Ok(ClientMessage::Reset { scenario }) => {
                    let name = scenario.as_deref();
                    match name.map_or_else(|| Some(shared.opts.scenario.clone()), Scenario::preset) {
                        Some(s) => {
                            force_tx.send_replace(None);
                            let _ = ctl_tx.send(Control::Reset(s));
                        }
                        None => {
                            let _ = out_tx.try_send(ServerMessage::error(format!(
                                "unknown scenario `{}` (presets: free, standard, standard-<seed>)",
                                name.unwrap_or_default()
                            )));
                        }
                    }
                }
                Ok(ClientMessage::Config { alpha }) => {
                    if alpha > 0.0 && alpha.is_finite() {
                        let _ = ctl_tx.send(Control::Alpha(alpha));
                    } else {
                        let _ = out_tx.try_send(ServerMessage::error(format!("alpha must be > 0, got {alpha}")));
                    }
                }
                Err(e) => {
                    let _ = out_tx.try_send(ServerMessage::error(format!("malformed message: {e}")));
                }
            }
        }
    }

    stop.store(true, Ordering::SeqCst);
    drop(out_tx);
    if let Ok(handle) = loop_handle {
        let _ = tokio::task::spawn_blocking(move || handle.join()).await;
    }
    let _ = writer.await;
    shared.stats.active.fetch_sub(1, Ordering::SeqCst);
}

fn state_frame(rec: &TickRecord, sim: &ClosedLoop<'_>, metrics: PhrcMetrics, decimation: usize) -> StateFrame {
    let thin = |p: &phrc_core::intent::Prediction| -> Vec<[f64; 3]> {
        p.steps.iter().step_by(decimation.max(1)).map(|s| arr3(&s.pos)).collect()
    };
    let (pred_r, pred_h) = sim.predictions().map_or((Vec::new(), Vec::new()), |(r, h)| (thin(r), thin(h)));
    StateFrame {
        t: rec.t,
        x: arr3(&rec.x),
        v: arr3(&rec.v),
        fh: arr3(&rec.f_h),
        fr: arr3(&rec.f_r),
        kappa: rec.kappa,
        yref: rec.y_ref.into(),
        pred_h,
        pred_r,
        obstacles: sim
            .scenario()
            .obstacles
            .iter()
            .map(|o| ObstacleView {
                center: arr3(&o.center),
                radius: o.radius,
            })
            .collect(),
        metrics: metrics.into(),
    }
}

/// The per-session 100 Hz loop. Returns when `stop` is set or the client
/// side of the frame channel is gone.
fn control_loop(
    opts: &BridgeOptions,
    force: watch::Receiver<Option<(Vec3, Instant)>>,
    control: std_mpsc::Receiver<Control>,
    out: mpsc::Sender<String>,
    stop: Arc<AtomicBool>,
) {
    let robot = opts.predictors.robot.clone();
    let human = opts.predictors.human.clone();
    let episode = EpisodeOptions {
        kappa_mode: KappaMode::Adaptive,
        window_stride: opts.window_stride,
        record_predictions: false,
    };
    let mut config = opts.config;
    let mut scenario = opts.scenario.clone();
    let period = Duration::from_secs_f64(config.control_dt());
    let control_hz = config.control_hz.round().max(1.0) as u64;
    let frame_hz = u64::from(opts.frame_hz.max(1));

    'episode: loop {
        let mut sim = match ClosedLoop::new(scenario.clone(), config, &*robot, &*human, episode, opts.seed) {
            Ok(s) => s,
            Err(e) => {
                let _ = out.blocking_send(ServerMessage::error(format!("cannot start scenario: {e}")));
                return;
            }
        };
        let mut metrics = PhrcAccumulator::new(true);
        let mut clock = Instant::now();
        let mut tick: u64 = 0;
        loop {
            if stop.load(Ordering::SeqCst) {
                return;
            }
            while let Ok(c) = control.try_recv() {
                match c {
                    Control::Reset(s) => {
                        scenario = s;
                        continue 'episode;
                    }
                    Control::Alpha(a) => match sim.allocator_mut().set_alpha(a) {
                        Ok(()) => config.alpha = a,
                        Err(e) => {
                            let _ = out.try_send(ServerMessage::error(e.to_string()));
                        }
                    },
                }
            }
            let f_h = match *force.borrow() {
                Some((f, at)) if at.elapsed() <= opts.force_hold => f,
                _ => Vec3::zeros(),
            };
            let rec = match sim.step(Some(f_h)) {
                Ok(r) => r,
                Err(e) => {
                    let _ = out.try_send(ServerMessage::error(format!("simulation restarted: {e}")));
                    continue 'episode;
                }
            };
            metrics.push(&rec.x, &rec.f_h, &rec.f_r);
            let due = tick == 0 || (tick * frame_hz) / control_hz != ((tick - 1) * frame_hz) / control_hz;
            if due {
                let frame = ServerMessage::State(state_frame(&rec, &sim, metrics.metrics(), opts.pred_decimation));
                if let Err(mpsc::error::TrySendError::Closed(_)) = out.try_send(frame.to_text()) {
                    return;
                }
            }
            tick += 1;
            let next = clock + period * tick as u32;
            let now = Instant::now();
            if next > now {
                thread::sleep(next - now);
            } else if now - next > 10 * period {
                // Far behind (e.g. the host stalled): resynchronize instead of bursting.
                clock = now - period * tick as u32;
            }
        }
    }
}
