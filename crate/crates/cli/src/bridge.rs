//! Operator bridge: the simulated rig behind a socket.
//!
//! One listener serves both plain TCP clients, which exchange raw frames,
//! and WebSocket clients on `/link`, which get one frame per text message.
//! A single simulation thread owns the mission and the session; connection
//! threads only decode and forward frames and write back whatever the
//! simulation queues for them.

use std::collections::BTreeMap;
use std::io::{self, ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use log::{debug, info, warn};
use paintrig_core::controller::{Command, Event};
use paintrig_core::mission::Mission;
use paintrig_core::protocol::{
    self, event_body, ClientId, Frame, FrameDecoder, FrameError, Gate, Response, Session,
};
use paintrig_core::scenario::Scenario;
use tungstenite::handshake::server::{ErrorResponse, Request, Response as WsResponse};
use tungstenite::{HandshakeError, Message, WebSocket};

/// WebSocket path carrying the frame protocol.
pub const LINK_PATH: &str = "/link";

const POLL: Duration = Duration::from_millis(5);
const SNIFF_TIMEOUT: Duration = Duration::from_millis(250);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServeOptions {
    /// Simulated seconds per real second.
    pub speed: f64,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self { speed: 1.0 }
    }
}

enum ToSim {
    Connected { id: ClientId, outbox: Sender<String> },
    Frame { id: ClientId, frame: Result<Frame, FrameError> },
    Gone { id: ClientId },
}

/// Serves until the session owner aborts and then disconnects.
pub fn serve(listener: TcpListener, scenario: Scenario, opts: ServeOptions) -> Result<()> {
    let mission = Mission::unlogged(scenario).context("building the mission")?;
    let stop = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel();

    let sim = {
        let stop = Arc::clone(&stop);
        thread::Builder::new()
            .name("sim".into())
            .spawn(move || {
                let result = SimLoop::new(mission, opts).run(rx, &stop);
                stop.store(true, Ordering::SeqCst);
                result
            })?
    };

    listener.set_nonblocking(true)?;
    let next_id = AtomicU64::new(1);
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let id = next_id.fetch_add(1, Ordering::Relaxed);
                info!("client {id} connected from {peer}");
                let tx = tx.clone();
                let stop = Arc::clone(&stop);
                thread::Builder::new()
                    .name(format!("client-{id}"))
                    .spawn(move || {
                        if let Err(e) = client(stream, id, tx.clone(), &stop) {
                            debug!("client {id}: {e:#}");
                        }
                        let _ = tx.send(ToSim::Gone { id });
                        info!("client {id} disconnected");
                    })?;
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => warn!("accept failed: {e}"),
        }
    }
    drop(tx);
    sim.join().map_err(|_| anyhow::anyhow!("simulation thread panicked"))?
}

/// Binds `addr`; a busy port is reported with the address in context.
pub fn bind(addr: SocketAddr) -> Result<TcpListener> {
    TcpListener::bind(addr).with_context(|| format!("cannot listen on {addr}"))
}

struct SimLoop {
    mission: Mission,
    session: Session,
    clients: BTreeMap<ClientId, Sender<String>>,
    abort_pending: bool,
    tick: Duration,
}

fn line(body: &str) -> String {
    Frame::new(body).map(|f| f.to_line()).unwrap_or_default()
}

impl SimLoop {
    fn new(mission: Mission, opts: ServeOptions) -> Self {
        let dt = f64::from(mission.controller().config().dt_ms) / 1000.0;
        let speed = if opts.speed > 0.0 && opts.speed.is_finite() { opts.speed } else { 1.0 };
        Self {
            mission,
            session: Session::new(),
            clients: BTreeMap::new(),
            abort_pending: false,
            tick: Duration::from_secs_f64(dt / speed),
        }
    }

    fn send(&mut self, id: ClientId, text: String) {
        if let Some(out) = self.clients.get(&id) {
            if out.send(text).is_err() {
                self.clients.remove(&id);
            }
        }
    }

    fn broadcast(&mut self, text: &str) {
        self.clients.retain(|_, out| out.send(text.to_string()).is_ok());
    }

    fn broadcast_events(&mut self, events: &[Event]) {
        for e in events {
            if let Some(body) = event_body(e) {
                self.broadcast(&line(&body));
            }
        }
    }

    /// Returns false once the server should shut down.
    fn handle(&mut self, msg: ToSim) -> bool {
        match msg {
            ToSim::Connected { id, outbox } => {
                self.clients.insert(id, outbox);
            }
            ToSim::Frame { id, frame } => {
                if let Err(e) = &frame {
                    debug!("client {id}: {e}");
                }
                match self.session.handle(id, frame.as_ref()) {
                    Gate::Reply(r) => self.send(id, line(&r.body())),
                    Gate::Forward(cmd) => self.apply(id, &cmd),
                }
            }
            ToSim::Gone { id } => {
                self.clients.remove(&id);
                if self.session.disconnect(id) && self.abort_pending {
                    info!("owner disconnected after ABORT, shutting down");
                    return false;
                }
            }
        }
        true
    }

    fn apply(&mut self, id: ClientId, cmd: &Command) {
        let events = self.mission.command(cmd);
        let acked = events.iter().any(|e| matches!(e, Event::Ack { .. }));
        for e in &events {
            if let Some(r) = Response::from_event(e) {
                self.send(id, line(&r.body()));
            }
        }
        self.broadcast_events(&events);
        // Mode changes from commands are pushed at once rather than waiting
        // for the next periodic sample.
        if events.iter().any(|e| matches!(e, Event::Transition { .. })) {
            let t = protocol::encode_telemetry(&self.mission.telemetry()).to_line();
            self.broadcast(&t);
        }
        if acked {
            match cmd {
                Command::Abort => self.abort_pending = true,
                Command::Start => self.abort_pending = false,
                Command::GetStatus => {
                    let t = protocol::encode_telemetry(&self.mission.telemetry()).to_line();
                    self.send(id, t);
                }
                _ => {}
            }
        }
    }

    fn run(mut self, rx: Receiver<ToSim>, stop: &AtomicBool) -> Result<()> {
        let mut deadline = Instant::now();
        loop {
            if stop.load(Ordering::SeqCst) {
                return Ok(());
            }
            // Wait out the rest of the tick while serving inbound frames.
            loop {
                let now = Instant::now();
                let msg = if now >= deadline {
                    match rx.try_recv() {
                        Ok(m) => Some(m),
                        Err(mpsc::TryRecvError::Empty) => None,
                        Err(mpsc::TryRecvError::Disconnected) => return Ok(()),
                    }
                } else {
                    match rx.recv_timeout(deadline - now) {
                        Ok(m) => Some(m),
                        Err(RecvTimeoutError::Timeout) => None,
                        Err(RecvTimeoutError::Disconnected) => return Ok(()),
                    }
                };
                match msg {
                    Some(m) => {
                        if !self.handle(m) {
                            return Ok(());
                        }
                    }
                    None if Instant::now() >= deadline => break,
                    None => {}
                }
            }
            let report = self.mission.step()?;
            self.broadcast_events(&report.events);
            if let Some(t) = report.telemetry {
                self.broadcast(&protocol::encode_telemetry(&t).to_line());
            }
            deadline += self.tick;
            // Don't try to catch up after a long stall.
            let now = Instant::now();
            if deadline + self.tick * 10 < now {
                deadline = now;
            }
        }
    }
}

/// Peeks at the first bytes to tell a WebSocket upgrade from raw frames.
fn is_http(stream: &TcpStream) -> io::Result<bool> {
    stream.set_read_timeout(Some(SNIFF_TIMEOUT))?;
    let start = Instant::now();
    let mut buf = [0u8; 4];
    loop {
        match stream.peek(&mut buf) {
            Ok(0) => return Ok(false),
            Ok(n) => {
                if !b"GET ".starts_with(&buf[..n]) {
                    return Ok(false);
                }
                if n == 4 {
                    return Ok(true);
                }
            }
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => return Ok(false),
            Err(e) => return Err(e),
        }
        if start.elapsed() > SNIFF_TIMEOUT {
            return Ok(false);
        }
        thread::sleep(POLL);
    }
}

fn client(stream: TcpStream, id: ClientId, tx: Sender<ToSim>, stop: &AtomicBool) -> Result<()> {
    stream.set_nodelay(true)?;
    let (out_tx, out_rx) = mpsc::channel();
    let http = is_http(&stream)?;
    if tx.send(ToSim::Connected { id, outbox: out_tx }).is_err() {
        return Ok(());
    }
    if http {
        websocket_client(stream, id, &tx, &out_rx, stop)
    } else {
        raw_client(stream, id, &tx, &out_rx, stop)
    }
}

fn forward(tx: &Sender<ToSim>, id: ClientId, dec: &mut FrameDecoder, bytes: &[u8]) -> bool {
    dec.feed(bytes)
        .into_iter()
        .all(|frame| tx.send(ToSim::Frame { id, frame }).is_ok())
}

fn raw_client(
    mut stream: TcpStream,
    id: ClientId,
    tx: &Sender<ToSim>,
    outbox: &Receiver<String>,
    stop: &AtomicBool,
) -> Result<()> {
    stream.set_read_timeout(Some(POLL))?;
    let mut dec = FrameDecoder::new();
    let mut buf = [0u8; 1024];
    while !stop.load(Ordering::SeqCst) {
        match stream.read(&mut buf) {
            Ok(0) => return Ok(()),
            Ok(n) => {
                if !forward(tx, id, &mut dec, &buf[..n]) {
                    return Ok(());
                }
            }
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(e) => return Err(e.into()),
        }
        let mut wrote = false;
        while let Ok(text) = outbox.try_recv() {
            stream.write_all(text.as_bytes())?;
            wrote = true;
        }
        if wrote {
            stream.flush()?;
        }
    }
    Ok(())
}

fn websocket_client(
    stream: TcpStream,
    id: ClientId,
    tx: &Sender<ToSim>,
    outbox: &Receiver<String>,
    stop: &AtomicBool,
) -> Result<()> {
    stream.set_read_timeout(None)?;
    let check_path = |req: &Request, resp: WsResponse| -> Result<WsResponse, ErrorResponse> {
        if req.uri().path() == LINK_PATH {
            Ok(resp)
        } else {
            let mut err = ErrorResponse::new(Some(format!("no endpoint at {}; use {LINK_PATH}\n", req.uri().path())));
            *err.status_mut() = tungstenite::http::StatusCode::NOT_FOUND;
            Err(err)
        }
    };
    let mut ws: WebSocket<TcpStream> = match tungstenite::accept_hdr(stream, check_path) {
        Ok(ws) => ws,
        Err(HandshakeError::Failure(e)) => return Err(e.into()),
        Err(HandshakeError::Interrupted(_)) => anyhow::bail!("handshake interrupted"),
    };
    ws.get_ref().set_read_timeout(Some(POLL))?;
    let mut dec = FrameDecoder::new();
    while !stop.load(Ordering::SeqCst) {
        match ws.read() {
            Ok(Message::Text(text)) => {
                let mut bytes = text.into_bytes();
                if bytes.last() != Some(&b'\n') {
                    bytes.push(b'\n');
                }
                if !forward(tx, id, &mut dec, &bytes) {
                    return Ok(());
                }
            }
            Ok(Message::Binary(bytes)) => {
                if !forward(tx, id, &mut dec, &bytes) {
                    return Ok(());
                }
            }
            Ok(Message::Close(_)) => {
                // Let tungstenite finish the closing handshake.
                let _ = ws.flush();
                return Ok(());
            }
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(e.into()),
        }
        let mut wrote = false;
        while let Ok(text) = outbox.try_recv() {
            ws.write(Message::Text(text))?;
            wrote = true;
        }
        if wrote {
            match ws.flush() {
                Ok(()) => {}
                Err(tungstenite::Error::Io(e)) if e.kind() == ErrorKind::WouldBlock => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(())
}
