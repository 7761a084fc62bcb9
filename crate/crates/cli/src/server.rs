//! Live WebSocket service.
//!
//! A dedicated thread owns the [`Session`] and ticks it at 30 Hz. Connections
//! talk to it only through channels: commands go in over one queue, and every
//! subscriber gets its own unbounded frame queue, so a slow client never sees
//! gaps and never stalls the simulation.

use std::fs::File;
use std::io::BufWriter;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc as std_mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot};

use charctl_core::session::{
    ClientMessage, Controller, Mailbox, ServerMessage, Session, TraceRecord, TraceWriter,
};
use charctl_core::sim::CONTROL_HZ;

enum Event {
    Subscribe(u64, mpsc::UnboundedSender<String>),
    Unsubscribe(u64),
    Command(ClientMessage),
}

#[derive(Clone)]
struct AppState {
    events: std_mpsc::Sender<Event>,
    next_id: Arc<std::sync::atomic::AtomicU64>,
}

pub struct ServeOptions {
    pub trace: Option<PathBuf>,
    /// Stop after this many ticks; `None` runs until shutdown.
    pub max_ticks: Option<u64>,
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    shutdown: Option<oneshot::Sender<()>>,
    ticker: Option<JoinHandle<Result<()>>>,
    http: Option<tokio::task::JoinHandle<()>>,
}

impl ServerHandle {
    /// Stops the tick loop and the listener; flushes the trace.
    pub async fn shutdown(mut self) -> Result<()> {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(h) = self.http.take() {
            let _ = h.await;
        }
        match self.ticker.take() {
            Some(t) => tokio::task::spawn_blocking(move || t.join())
                .await?
                .map_err(|_| anyhow::anyhow!("tick thread panicked"))?,
            None => Ok(()),
        }
    }

    /// Waits for the tick loop to end on its own (`max_ticks`) or fail.
    pub async fn wait(mut self) -> Result<()> {
        let t = self.ticker.take().expect("ticker present");
        let res = tokio::task::spawn_blocking(move || t.join())
            .await?
            .map_err(|_| anyhow::anyhow!("tick thread panicked"))?;
        self.stop.store(true, Ordering::SeqCst);
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(h) = self.http.take() {
            let _ = h.await;
        }
        res
    }
}

/// Binds the routes on `listener` and starts the tick thread.
pub async fn start(
    listener: TcpListener,
    ctrl: Controller,
    session: Session,
    opts: ServeOptions,
) -> Result<ServerHandle> {
    let addr = listener.local_addr()?;
    let (ev_tx, ev_rx) = std_mpsc::channel();
    let stop = Arc::new(AtomicBool::new(false));
    let trace = match &opts.trace {
        Some(p) => Some(TraceWriter::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating trace {}", p.display()))?,
        ))),
        None => None,
    };
    let ticker = {
        let stop = stop.clone();
        let max = opts.max_ticks;
        std::thread::Builder::new()
            .name("tick".into())
            .spawn(move || tick_loop(ctrl, session, ev_rx, stop, trace, max))?
    };
    let state = AppState {
        events: ev_tx,
        next_id: Arc::new(std::sync::atomic::AtomicU64::new(0)),
    };
    let app = Router::new().route("/ws", get(ws_handler)).with_state(state);
    let (sd_tx, sd_rx) = oneshot::channel::<()>();
    let http = tokio::spawn(async move {
        let r = axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = sd_rx.await;
            })
            .await;
        if let Err(e) = r {
            log::error!("server: {e}");
        }
    });
    log::info!("serving on ws://{addr}/ws");
    Ok(ServerHandle {
        addr,
        stop,
        shutdown: Some(sd_tx),
        ticker: Some(ticker),
        http: Some(http),
    })
}

fn tick_loop(
    ctrl: Controller,
    mut session: Session,
    events: std_mpsc::Receiver<Event>,
    stop: Arc<AtomicBool>,
    mut trace: Option<TraceWriter<BufWriter<File>>>,
    max_ticks: Option<u64>,
) -> Result<()> {
    let period = Duration::from_secs_f64(1.0 / CONTROL_HZ);
    let mut subscribers: Vec<(u64, mpsc::UnboundedSender<String>)> = Vec::new();
    let mut mailbox = Mailbox::default();
    if let Some(t) = trace.as_mut() {
        t.record(&TraceRecord::Start {
            world: session.world.clone(),
            skill_command: session.skill_command.clone(),
            task_command: session.task_command.clone(),
        })?;
    }
    let mut next = Instant::now();
    let mut done = 0u64;
    while !stop.load(Ordering::SeqCst) && max_ticks.is_none_or(|m| done < m) {
        while let Ok(ev) = events.try_recv() {
            match ev {
                Event::Subscribe(id, tx) => subscribers.push((id, tx)),
                Event::Unsubscribe(id) => subscribers.retain(|(i, _)| *i != id),
                Event::Command(m) => mailbox.post(m),
            }
        }
        let pending = mailbox.take();
        if let Some(t) = trace.as_mut() {
            let before_tick = session.world.tick;
            for message in pending
                .skill
                .iter()
                .map(|s| ClientMessage::SkillCommand { text: s.clone() })
                .chain(pending.task.iter().map(|s| ClientMessage::TaskCommand { text: s.clone() }))
            {
                t.record(&TraceRecord::Command { before_tick, message })?;
            }
        }
        let out = session.tick(&ctrl, pending)?;
        if let Some(t) = trace.as_mut() {
            t.record(&TraceRecord::Frame(out.frame.clone()))?;
        }
        let mut msgs: Vec<String> = out
            .rejected
            .into_iter()
            .map(|msg| ServerMessage::Error { msg }.to_json())
            .collect();
        msgs.push(ServerMessage::Frame(out.frame).to_json());
        subscribers.retain(|(_, tx)| msgs.iter().all(|m| tx.send(m.clone()).is_ok()));
        done += 1;

        next += period;
        let now = Instant::now();
        if next > now {
            std::thread::sleep(next - now);
        } else if now - next > period * 5 {
            // Far behind (e.g. the process was suspended): resynchronise.
            next = now;
        }
    }
    if let Some(t) = trace.as_mut() {
        t.flush()?;
    }
    Ok(())
}

async fn ws_handler(ws: WebSocketUpgrade, State(state): State<AppState>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| client(socket, state))
}

async fn client(socket: WebSocket, state: AppState) {
    let id = state.next_id.fetch_add(1, Ordering::SeqCst);
    let (tx, mut rx) = mpsc::unbounded_channel::<String>();
    if state.events.send(Event::Subscribe(id, tx.clone())).is_err() {
        return;
    }
    let (mut sink, mut stream) = socket.split();
    let writer = tokio::spawn(async move {
        while let Some(m) = rx.recv().await {
            if sink.send(Message::Text(m.into())).await.is_err() {
                break;
            }
        }
    });
    while let Some(Ok(msg)) = stream.next().await {
        match msg {
            Message::Text(text) => match ClientMessage::parse(text.as_str()) {
                Ok(cmd) => {
                    if state.events.send(Event::Command(cmd)).is_err() {
                        break;
                    }
                }
                Err(e) => {
                    let _ = tx.send(ServerMessage::Error { msg: e.to_string() }.to_json());
                }
            },
            Message::Binary(_) => {
                let _ = tx.send(
                    ServerMessage::Error {
                        msg: "binary messages are not supported".into(),
                    }
                    .to_json(),
                );
            }
            Message::Close(_) => break,
            _ => {}
        }
    }
    let _ = state.events.send(Event::Unsubscribe(id));
    drop(tx);
    writer.abort();
}
