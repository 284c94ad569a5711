//! Live network runtime: real sockets around the sans-IO cores.
//!
//! [`OrchestratorService`] owns a TCP listener for worker sessions and
//! a unix control socket for operator commands, and drives
//! [`OrchestratorCore`] from a handful of threads: one accepting, one
//! blocking reader per connection, one ticker for heartbeats and
//! dispatch, and one per control client. All shared state sits behind
//! a single mutex; frame writes happen under it, which serializes
//! writers and is comfortably fast for rosters of tens of workers.
//!
//! [`run_worker`] is the agent half: an outer reconnect loop around a
//! nonblocking session that accumulates frames, answers control
//! messages, and lets the [`Worker`] fire probes on time.
//!
//! Both halves stamp times as microseconds since the UNIX epoch.
//! Fire times travel as absolute values, so orchestrator and workers
//! must share a timebase; wall clocks are the only one available
//! across machines, and the heartbeat skew check watches how well
//! they actually agree.
//!
//! The control protocol is line-delimited JSON over the unix socket:
//! one [`ControlRequest`] in, a stream of [`ControlResponse`] lines
//! back. `measure` streams every forwarded reply as it arrives and
//! finishes with the run summary.

use std::collections::{BTreeMap, VecDeque};
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::domain::{MeasurementSpec, ProbeReply, TargetAddress, VantagePoint, WorkerId};
use crate::orchestrator::{
    ConnId, OrchestratorCore, OrchestratorEvent, RunPhase, RunSummary,
};
use crate::wire::{write_frame, Envelope, FrameBuffer, WireError};
use crate::worker::{ProbeTransport, Worker, WorkerCore};

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error("config: {0}")]
    Config(String),
    /// The far end of a control socket reported failure or vanished.
    #[error("control: {0}")]
    Remote(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Microseconds since the UNIX epoch; the live plane's shared clock.
pub fn epoch_us() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_micros() as u64)
        .unwrap_or(0)
}

/// One operator command, one line of JSON on the control socket.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum ControlRequest {
    /// Start a run and stream its results back on this connection.
    Measure { spec: MeasurementSpec, targets: Vec<TargetAddress> },
    Status,
}

/// One line of JSON back to the control client.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ControlResponse {
    Started { measurement_id: u32 },
    Result { reply: ProbeReply },
    Done { summary: RunSummary },
    Status { summary: Option<RunSummary>, workers_connected: Vec<WorkerId> },
    Error { message: String },
}

enum SinkEvent {
    Result(Box<ProbeReply>),
    Done(Box<RunSummary>),
}

pub struct ServiceConfig {
    /// TCP address worker sessions connect to; port 0 picks one.
    pub listen: String,
    /// Unix socket path for control clients. A stale file from a dead
    /// process is reclaimed at startup.
    pub control_socket: PathBuf,
    pub auth_token: String,
    /// Override for the post-send drain window.
    pub drain_window_us: Option<u64>,
    pub tick_interval: Duration,
    /// Print run lifecycle events to stdout, one JSON object per line.
    pub log_lifecycle: bool,
}

impl ServiceConfig {
    pub fn new(
        listen: impl Into<String>,
        control_socket: impl Into<PathBuf>,
        auth_token: impl Into<String>,
    ) -> ServiceConfig {
        ServiceConfig {
            listen: listen.into(),
            control_socket: control_socket.into(),
            auth_token: auth_token.into(),
            drain_window_us: None,
            tick_interval: Duration::from_millis(25),
            log_lifecycle: false,
        }
    }
}

struct State {
    core: OrchestratorCore,
    streams: BTreeMap<ConnId, TcpStream>,
    /// Live `measure` command, if one is streaming.
    sink: Option<mpsc::Sender<SinkEvent>>,
    log_lifecycle: bool,
}

struct Shared {
    state: Mutex<State>,
    stop: AtomicBool,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        // A panicking holder poisons the mutex; the state itself is
        // still consistent enough to shut down with.
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// Applies core events in order, following each forced close or write
/// failure through the disconnect bookkeeping it triggers.
fn apply(state: &mut State, now_us: u64, events: Vec<OrchestratorEvent>) {
    let mut queue: VecDeque<OrchestratorEvent> = events.into();
    while let Some(event) = queue.pop_front() {
        match event {
            OrchestratorEvent::Send { conn, envelope } => {
                let Some(stream) = state.streams.get_mut(&conn) else { continue };
                if write_frame(stream, &envelope).is_err() {
                    let _ = stream.shutdown(Shutdown::Both);
                    state.streams.remove(&conn);
                    queue.extend(state.core.handle_disconnect(conn, now_us));
                }
            }
            OrchestratorEvent::Close { conn } => {
                // Shut the socket; the reader thread wakes on it and
                // reports the disconnect back.
                if let Some(stream) = state.streams.get(&conn) {
                    let _ = stream.shutdown(Shutdown::Both);
                }
            }
            OrchestratorEvent::Result(reply) => {
                if let Some(sink) = &state.sink {
                    if sink.send(SinkEvent::Result(Box::new(reply))).is_err() {
                        state.sink = None;
                    }
                }
            }
            OrchestratorEvent::Log(value) => {
                if state.log_lifecycle {
                    println!("{value}");
                }
            }
        }
    }
}

/// The live orchestrator: accepts worker sessions, serves the control
/// socket, and keeps the core ticking until [`stop`](Self::stop).
pub struct OrchestratorService {
    shared: Arc<Shared>,
    local_addr: SocketAddr,
    control_path: PathBuf,
    threads: Vec<JoinHandle<()>>,
    /// Reader and control-client threads, spawned as sessions arrive.
    session_threads: Arc<Mutex<Vec<JoinHandle<()>>>>,
    control_streams: Arc<Mutex<Vec<UnixStream>>>,
}

impl OrchestratorService {
    pub fn start(config: ServiceConfig) -> Result<OrchestratorService, RuntimeError> {
        let listener = TcpListener::bind(&config.listen)
            .map_err(|e| RuntimeError::Config(format!("cannot listen on {}: {e}", config.listen)))?;
        listener.set_nonblocking(true)?;
        let local_addr = listener.local_addr()?;

        let _ = std::fs::remove_file(&config.control_socket);
        let control = UnixListener::bind(&config.control_socket).map_err(|e| {
            RuntimeError::Config(format!(
                "cannot bind control socket {}: {e}",
                config.control_socket.display()
            ))
        })?;
        control.set_nonblocking(true)?;

        let mut core = OrchestratorCore::new(&config.auth_token);
        if let Some(us) = config.drain_window_us {
            core.set_drain_window_us(us);
        }
        let shared = Arc::new(Shared {
            state: Mutex::new(State {
                core,
                streams: BTreeMap::new(),
                sink: None,
                log_lifecycle: config.log_lifecycle,
            }),
            stop: AtomicBool::new(false),
        });
        let session_threads = Arc::new(Mutex::new(Vec::new()));
        let control_streams = Arc::new(Mutex::new(Vec::new()));

        let mut threads = Vec::new();
        threads.push(spawn_acceptor(listener, Arc::clone(&shared), Arc::clone(&session_threads)));
        threads.push(spawn_ticker(Arc::clone(&shared), config.tick_interval));
        threads.push(spawn_control(
            control,
            Arc::clone(&shared),
            Arc::clone(&session_threads),
            Arc::clone(&control_streams),
        ));

        Ok(OrchestratorService {
            shared,
            local_addr,
            control_path: config.control_socket,
            threads,
            session_threads,
            control_streams,
        })
    }

    /// Where workers connect; useful when the config said port 0.
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn control_path(&self) -> &Path {
        &self.control_path
    }

    /// Stops every thread, closes every session, removes the control
    /// socket file. Idempotent in effect; consumes the service.
    pub fn stop(mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        {
            let state = self.shared.lock();
            for stream in state.streams.values() {
                let _ = stream.shutdown(Shutdown::Both);
            }
        }
        for stream in self.control_streams.lock().unwrap_or_else(|e| e.into_inner()).drain(..) {
            let _ = stream.shutdown(Shutdown::Both);
        }
        for handle in self.threads.drain(..) {
            let _ = handle.join();
        }
        let sessions: Vec<JoinHandle<()>> = {
            let mut guard = self.session_threads.lock().unwrap_or_else(|e| e.into_inner());
            guard.drain(..).collect()
        };
        for handle in sessions {
            let _ = handle.join();
        }
        let _ = std::fs::remove_file(&self.control_path);
    }
}

fn spawn_acceptor(
    listener: TcpListener,
    shared: Arc<Shared>,
    session_threads: Arc<Mutex<Vec<JoinHandle<()>>>>,
) -> JoinHandle<()> {
    thread::spawn(move || {
        let mut next_conn = 1u64;
        while !shared.stop.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let conn = ConnId(next_conn);
                    next_conn += 1;
                    let _ = stream.set_nonblocking(false);
                    let _ = stream.set_nodelay(true);
                    // A worker that stops reading must not wedge the
                    // whole service behind one blocked write.
                    let _ = stream.set_write_timeout(Some(Duration::from_secs(5)));
                    let reader = match stream.try_clone() {
                        Ok(r) => r,
                        Err(_) => continue,
                    };
                    {
                        let mut state = shared.lock();
                        state.core.handle_connect(conn, epoch_us());
                        state.streams.insert(conn, stream);
                    }
                    let shared2 = Arc::clone(&shared);
                    let handle = thread::spawn(move || read_session(reader, conn, &shared2));
                    session_threads.lock().unwrap_or_else(|e| e.into_inner()).push(handle);
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(10));
                }
                Err(_) => thread::sleep(Duration::from_millis(10)),
            }
        }
    })
}

/// Blocking frame reader for one worker session. Wakes on socket
/// shutdown and settles the disconnect.
fn read_session(mut stream: TcpStream, conn: ConnId, shared: &Shared) {
    loop {
        match crate::wire::read_frame(&mut stream) {
            Ok(Some(envelope)) => {
                let now = epoch_us();
                let mut state = shared.lock();
                let events = state.core.handle_frame(conn, envelope, now);
                apply(&mut state, now, events);
            }
            Ok(None) | Err(_) => break,
        }
    }
    let now = epoch_us();
    let mut state = shared.lock();
    if let Some(s) = state.streams.remove(&conn) {
        let _ = s.shutdown(Shutdown::Both);
    }
    let events = state.core.handle_disconnect(conn, now);
    apply(&mut state, now, events);
}

fn spawn_ticker(shared: Arc<Shared>, interval: Duration) -> JoinHandle<()> {
    thread::spawn(move || {
        while !shared.stop.load(Ordering::SeqCst) {
            {
                let now = epoch_us();
                let mut state = shared.lock();
                let events = state.core.tick(now);
                apply(&mut state, now, events);
                if state.sink.is_some() && state.core.run_phase() == Some(RunPhase::Done) {
                    if let Some(summary) = state.core.summary() {
                        if let Some(sink) = state.sink.take() {
                            let _ = sink.send(SinkEvent::Done(Box::new(summary)));
                        }
                    }
                }
            }
            thread::sleep(interval);
        }
    })
}

fn spawn_control(
    listener: UnixListener,
    shared: Arc<Shared>,
    session_threads: Arc<Mutex<Vec<JoinHandle<()>>>>,
    control_streams: Arc<Mutex<Vec<UnixStream>>>,
) -> JoinHandle<()> {
    thread::spawn(move || {
        while !shared.stop.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let _ = stream.set_nonblocking(false);
                    if let Ok(clone) = stream.try_clone() {
                        control_streams.lock().unwrap_or_else(|e| e.into_inner()).push(clone);
                    }
                    let shared2 = Arc::clone(&shared);
                    let handle = thread::spawn(move || serve_control_client(stream, &shared2));
                    session_threads.lock().unwrap_or_else(|e| e.into_inner()).push(handle);
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(10));
                }
                Err(_) => thread::sleep(Duration::from_millis(10)),
            }
        }
    })
}

fn respond(stream: &mut UnixStream, response: &ControlResponse) -> io::Result<()> {
    let line = serde_json::to_string(response)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    writeln!(stream, "{line}")?;
    stream.flush()
}

fn serve_control_client(stream: UnixStream, shared: &Shared) {
    let mut writer = match stream.try_clone() {
        Ok(w) => w,
        Err(_) => return,
    };
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    loop {
        line.clear();
        match reader.read_line(&mut line) {
            Ok(0) | Err(_) => return,
            Ok(_) => {}
        }
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let request: ControlRequest = match serde_json::from_str(text) {
            Ok(r) => r,
            Err(e) => {
                let _ = respond(&mut writer, &ControlResponse::Error {
                    message: format!("bad request: {e}"),
                });
                continue;
            }
        };
        match request {
            ControlRequest::Status => {
                let state = shared.lock();
                let response = ControlResponse::Status {
                    summary: state.core.summary(),
                    workers_connected: state.core.connected_workers(),
                };
                drop(state);
                if respond(&mut writer, &response).is_err() {
                    return;
                }
            }
            ControlRequest::Measure { spec, targets } => {
                if !stream_measurement(&mut writer, shared, spec, targets) {
                    return;
                }
            }
        }
    }
}

/// Runs one measurement for a control client, streaming results as
/// they arrive. Returns false when the client went away.
fn stream_measurement(
    writer: &mut UnixStream,
    shared: &Shared,
    spec: MeasurementSpec,
    targets: Vec<TargetAddress>,
) -> bool {
    let measurement_id = spec.measurement_id;
    let rx = {
        let now = epoch_us();
        let mut state = shared.lock();
        if state.sink.is_some() {
            drop(state);
            return respond(writer, &ControlResponse::Error {
                message: "a measurement is already streaming to another client".into(),
            })
            .is_ok();
        }
        match state.core.start_run(spec, targets, now) {
            Ok(events) => {
                apply(&mut state, now, events);
                let (tx, rx) = mpsc::channel();
                state.sink = Some(tx);
                rx
            }
            Err(e) => {
                drop(state);
                return respond(writer, &ControlResponse::Error { message: e.to_string() })
                    .is_ok();
            }
        }
    };
    if respond(writer, &ControlResponse::Started { measurement_id }).is_err() {
        shared.lock().sink = None;
        return false;
    }
    loop {
        match rx.recv_timeout(Duration::from_millis(200)) {
            Ok(SinkEvent::Result(reply)) => {
                if respond(writer, &ControlResponse::Result { reply: *reply }).is_err() {
                    shared.lock().sink = None;
                    return false;
                }
            }
            Ok(SinkEvent::Done(summary)) => {
                return respond(writer, &ControlResponse::Done { summary: *summary }).is_ok();
            }
            Err(RecvTimeoutError::Timeout) => {
                if shared.stop.load(Ordering::SeqCst) {
                    shared.lock().sink = None;
                    return false;
                }
            }
            // The ticker dropped the sender without a Done; the
            // service is tearing down.
            Err(RecvTimeoutError::Disconnected) => {
                return false;
            }
        }
    }
}

/// Sends one command and hands every response line to `on_event`
/// until the run finishes; returns its summary.
pub fn control_measure(
    socket: &Path,
    spec: MeasurementSpec,
    targets: Vec<TargetAddress>,
    mut on_event: impl FnMut(&ControlResponse),
) -> Result<RunSummary, RuntimeError> {
    let mut stream = UnixStream::connect(socket)?;
    let request = serde_json::to_string(&ControlRequest::Measure { spec, targets })?;
    writeln!(stream, "{request}")?;
    stream.flush()?;
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(RuntimeError::Remote(
                "control stream ended before the run finished".into(),
            ));
        }
        let response: ControlResponse = serde_json::from_str(line.trim())?;
        on_event(&response);
        match response {
            ControlResponse::Done { summary } => return Ok(summary),
            ControlResponse::Error { message } => return Err(RuntimeError::Remote(message)),
            ControlResponse::Started { .. }
            | ControlResponse::Result { .. }
            | ControlResponse::Status { .. } => {}
        }
    }
}

/// One status round-trip.
pub fn control_status(socket: &Path) -> Result<ControlResponse, RuntimeError> {
    let mut stream = UnixStream::connect(socket)?;
    let request = serde_json::to_string(&ControlRequest::Status)?;
    writeln!(stream, "{request}")?;
    stream.flush()?;
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    if reader.read_line(&mut line)? == 0 {
        return Err(RuntimeError::Remote("no status reply".into()));
    }
    Ok(serde_json::from_str(line.trim())?)
}

pub struct WorkerAgentConfig {
    pub orchestrator: String,
    pub vp: VantagePoint,
    pub auth_token: String,
    pub reconnect_delay: Duration,
    pub tick_interval: Duration,
}

impl WorkerAgentConfig {
    pub fn new(
        orchestrator: impl Into<String>,
        vp: VantagePoint,
        auth_token: impl Into<String>,
    ) -> WorkerAgentConfig {
        WorkerAgentConfig {
            orchestrator: orchestrator.into(),
            vp,
            auth_token: auth_token.into(),
            reconnect_delay: Duration::from_secs(1),
            tick_interval: Duration::from_millis(5),
        }
    }
}

fn frame_bytes(envelope: &Envelope) -> Result<Vec<u8>, WireError> {
    let mut buf = Vec::new();
    write_frame(&mut buf, envelope)?;
    Ok(buf)
}

/// write_all for a nonblocking socket: short sleeps ride out a full
/// send buffer instead of dropping mid-frame.
fn write_all_nb(stream: &mut TcpStream, bytes: &[u8]) -> io::Result<()> {
    let mut off = 0;
    while off < bytes.len() {
        match stream.write(&bytes[off..]) {
            Ok(0) => return Err(io::Error::new(io::ErrorKind::WriteZero, "socket closed")),
            Ok(n) => off += n,
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(1));
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

fn send_envelopes(stream: &mut TcpStream, envelopes: &[Envelope]) -> Result<(), RuntimeError> {
    for envelope in envelopes {
        let bytes = frame_bytes(envelope)?;
        write_all_nb(stream, &bytes)?;
    }
    Ok(())
}

/// The worker agent: keeps one session to the orchestrator alive,
/// reconnecting with the same core so unacknowledged results are
/// resent. Runs until `stop` is set.
pub fn run_worker<T: ProbeTransport>(
    config: &WorkerAgentConfig,
    transport: T,
    stop: &AtomicBool,
) -> Result<(), RuntimeError> {
    let core = WorkerCore::new(config.vp.clone(), config.auth_token.clone());
    let mut worker = Worker::new(core, transport);
    while !stop.load(Ordering::SeqCst) {
        let mut stream = match TcpStream::connect(&config.orchestrator) {
            Ok(s) => s,
            Err(_) => {
                sleep_until_stop(config.reconnect_delay, stop);
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        if stream.set_nonblocking(true).is_err() {
            continue;
        }
        if send_envelopes(&mut stream, &worker.core.connect()).is_err() {
            sleep_until_stop(config.reconnect_delay, stop);
            continue;
        }
        if run_session(&mut worker, &mut stream, config, stop).is_err() {
            // Fall through to reconnect.
        }
        if !stop.load(Ordering::SeqCst) {
            sleep_until_stop(config.reconnect_delay, stop);
        }
    }
    Ok(())
}

/// One connected session; returns when the socket dies or stop is set.
fn run_session<T: ProbeTransport>(
    worker: &mut Worker<T>,
    stream: &mut TcpStream,
    config: &WorkerAgentConfig,
    stop: &AtomicBool,
) -> Result<(), RuntimeError> {
    let mut frames = FrameBuffer::new();
    let mut buf = [0u8; 8192];
    while !stop.load(Ordering::SeqCst) {
        loop {
            match stream.read(&mut buf) {
                Ok(0) => return Ok(()),
                Ok(n) => {
                    frames.push(&buf[..n]);
                    while let Some(envelope) = frames.next_frame()? {
                        let out = worker.handle_control(envelope, epoch_us());
                        send_envelopes(stream, &out)?;
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        let out = worker.tick(epoch_us());
        send_envelopes(stream, &out)?;
        thread::sleep(config.tick_interval);
    }
    Ok(())
}

fn sleep_until_stop(total: Duration, stop: &AtomicBool) {
    let step = Duration::from_millis(25);
    let mut slept = Duration::ZERO;
    while slept < total && !stop.load(Ordering::SeqCst) {
        thread::sleep(step.min(total - slept));
        slept += step;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{IpVersion, Protocol, SourceMode, DEFAULT_TCP_DST_PORT};
    use crate::probecodec::{synthesize_reply, EncodedProbe};
    use crate::worker::{Capture, TransportError};
    use std::net::IpAddr;

    /// Answers every probe out of its own buffer after a tiny delay,
    /// like a perfectly responsive unicast target.
    struct EchoTransport {
        queue: VecDeque<Capture>,
        delay_us: u64,
    }

    impl EchoTransport {
        fn new() -> EchoTransport {
            EchoTransport { queue: VecDeque::new(), delay_us: 2_000 }
        }
    }

    impl ProbeTransport for EchoTransport {
        fn send(&mut self, probe: &EncodedProbe, _source: IpAddr) -> Result<(), TransportError> {
            self.queue.push_back(Capture {
                payload: synthesize_reply(probe, None),
                src: probe.target.address(),
                rx_time_us: probe.tx_time_us + self.delay_us,
            });
            Ok(())
        }

        fn recv_ready(&mut self, now_us: u64) -> Vec<Capture> {
            let mut out = Vec::new();
            while self.queue.front().is_some_and(|c| c.rx_time_us <= now_us) {
                out.push(self.queue.pop_front().expect("peeked"));
            }
            out
        }
    }

    fn vp(id: u16) -> VantagePoint {
        VantagePoint {
            worker_id: WorkerId(id),
            name: format!("vp{id}"),
            lat: 0.0,
            lon: 0.0,
            unicast_address: "127.0.0.1".parse().unwrap(),
            anycast_address: "127.0.0.1".parse().unwrap(),
        }
    }

    fn service(dir: &Path) -> OrchestratorService {
        let mut config = ServiceConfig::new("127.0.0.1:0", dir.join("control.sock"), "tk-live");
        config.drain_window_us = Some(250_000);
        config.tick_interval = Duration::from_millis(10);
        OrchestratorService::start(config).expect("service starts")
    }

    fn spawn_worker(
        id: u16,
        addr: SocketAddr,
        token: &str,
        stop: Arc<AtomicBool>,
    ) -> JoinHandle<()> {
        let mut config = WorkerAgentConfig::new(addr.to_string(), vp(id), token);
        config.reconnect_delay = Duration::from_millis(100);
        thread::spawn(move || {
            run_worker(&config, EchoTransport::new(), &stop).expect("worker loop");
        })
    }

    fn wait_for_workers(socket: &Path, want: usize) {
        for _ in 0..200 {
            if let Ok(ControlResponse::Status { workers_connected, .. }) = control_status(socket) {
                if workers_connected.len() >= want {
                    return;
                }
            }
            thread::sleep(Duration::from_millis(25));
        }
        panic!("workers never connected");
    }

    #[test]
    fn measure_streams_every_echo_back_through_the_control_socket() {
        let dir = tempfile::tempdir().unwrap();
        let service = service(dir.path());
        let addr = service.local_addr();
        let socket = service.control_path().to_path_buf();

        let stop = Arc::new(AtomicBool::new(false));
        let workers = vec![
            spawn_worker(1, addr, "tk-live", Arc::clone(&stop)),
            spawn_worker(2, addr, "tk-live", Arc::clone(&stop)),
        ];
        wait_for_workers(&socket, 2);

        match control_status(&socket).unwrap() {
            ControlResponse::Status { summary, .. } => assert!(summary.is_none()),
            other => panic!("unexpected response: {other:?}"),
        }

        let spec = MeasurementSpec {
            measurement_id: 7,
            protocol: Protocol::Icmp,
            ip_version: IpVersion::V4,
            source_mode: SourceMode::Unicast,
            rate_pps: 500,
            worker_offset_ms: 10,
            workers: vec![WorkerId(1), WorkerId(2)],
            dns_probe_domain: None,
            tcp_dst_port: DEFAULT_TCP_DST_PORT,
        };
        let targets: Vec<TargetAddress> = ["192.0.2.1", "192.0.2.2", "192.0.2.3"]
            .iter()
            .map(|t| TargetAddress::of_address(t.parse().unwrap()))
            .collect();

        let mut results = Vec::new();
        let summary = control_measure(&socket, spec, targets, |event| {
            if let ControlResponse::Result { reply } = event {
                results.push(reply.clone());
            }
        })
        .expect("measurement finishes");

        // Unicast echoes: each worker hears exactly its own probes.
        assert_eq!(summary.phase, RunPhase::Done);
        assert_eq!(summary.targets_total, 3);
        assert_eq!(summary.results_forwarded, 6);
        assert_eq!(results.len(), 6);
        for id in [WorkerId(1), WorkerId(2)] {
            let totals = &summary.per_worker[&id];
            assert_eq!(totals.targets_sent, 3, "worker {id:?}");
            assert_eq!(totals.results_received, 3, "worker {id:?}");
            assert_eq!(
                results.iter().filter(|r| r.tx_worker == id && r.rx_worker == id).count(),
                3
            );
        }
        for reply in &results {
            assert!(reply.rx_time_us > reply.tx_time_us);
        }

        stop.store(true, Ordering::SeqCst);
        for handle in workers {
            handle.join().unwrap();
        }
        service.stop();
        assert!(!socket.exists(), "stop removes the control socket");
    }

    #[test]
    fn wrong_token_never_joins_the_roster() {
        let dir = tempfile::tempdir().unwrap();
        let service = service(dir.path());
        let addr = service.local_addr();
        let socket = service.control_path().to_path_buf();

        let stop = Arc::new(AtomicBool::new(false));
        let worker = spawn_worker(9, addr, "wrong-token", Arc::clone(&stop));

        // Give it several connect attempts; the roster must stay empty.
        for _ in 0..10 {
            thread::sleep(Duration::from_millis(60));
            match control_status(&socket).unwrap() {
                ControlResponse::Status { workers_connected, .. } => {
                    assert!(workers_connected.is_empty())
                }
                other => panic!("unexpected response: {other:?}"),
            }
        }

        stop.store(true, Ordering::SeqCst);
        worker.join().unwrap();
        service.stop();
    }
}
