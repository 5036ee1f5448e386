//! TCP pool of backend worker processes.
//!
//! Clients speak the ordinary frame protocol plus three session frames:
//! `(acquire id)` or `(acquire id :fresh)` answers `(session id sid)`,
//! `(release id sid)` answers `(ret id :ok nil)`, and `(stats id)` reports
//! pool counters. `ld` and `get-global` frames carrying a sid as their last
//! element go to the worker leased under that sid; its `out` frames are
//! relayed under the client's request id.
//!
//! Workers are leased exclusively and are not reset on release; `:fresh`
//! restarts the worker before handing it out. A monitor thread replaces dead
//! workers and invalidates their sids.

use std::collections::{HashMap, HashSet};
use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use num_traits::ToPrimitive;
use thiserror::Error;

use crate::bridge::Session;
use crate::output::StreamClass;
use crate::sexpr::SExpr;
use crate::transport::{
    Connection, Frame, Link, PoolFault, Reply, Request, RetStatus, TransportConfig, TransportError,
};

const MONITOR_INTERVAL: Duration = Duration::from_millis(25);

#[derive(Debug, Clone)]
pub struct PoolConfig {
    pub worker_count: usize,
    pub backend_command: Vec<String>,
    pub listen_address: String,
    pub max_acquire_wait: Duration,
    pub transport: TransportConfig,
}

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("invalid pool configuration: {0}")]
    Config(String),
    #[error("cannot listen: {0}")]
    Io(#[from] io::Error),
    #[error("cannot start worker: {0}")]
    Worker(#[from] TransportError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LeaseState {
    Free,
    Leased(String),
    Dead,
}

struct Worker {
    conn: Option<Arc<Mutex<Connection>>>,
    alive: Arc<AtomicBool>,
    pid: Option<u32>,
    lease: LeaseState,
    respawning: bool,
    last_released: u64,
    generation: u64,
}

impl Worker {
    fn new(conn: Connection, generation: u64) -> Worker {
        Worker {
            alive: conn.liveness(),
            pid: conn.pid(),
            conn: Some(Arc::new(Mutex::new(conn))),
            lease: LeaseState::Free,
            respawning: false,
            last_released: 0,
            generation,
        }
    }

    fn install(&mut self, conn: Connection) {
        self.alive = conn.liveness();
        self.pid = conn.pid();
        self.conn = Some(Arc::new(Mutex::new(conn)));
        self.generation += 1;
    }
}

struct PoolState {
    workers: Vec<Worker>,
    sessions: HashMap<String, usize>,
    next_sid: u64,
    clock: u64,
    restarts: u64,
    shutting_down: bool,
}

impl PoolState {
    /// Marks a worker dead and invalidates its sids. Returns its connection
    /// so the caller can drop it outside the lock.
    fn retire(&mut self, idx: usize) -> Option<Arc<Mutex<Connection>>> {
        let w = &mut self.workers[idx];
        if w.lease == LeaseState::Dead {
            return w.conn.take();
        }
        log::warn!("worker {idx} (pid {:?}) is dead", w.pid);
        w.lease = LeaseState::Dead;
        self.sessions.retain(|_, i| *i != idx);
        self.workers[idx].conn.take()
    }

    /// Least recently released free worker, ties by index.
    fn pick_free(&self) -> Option<usize> {
        self.workers
            .iter()
            .enumerate()
            .filter(|(_, w)| w.lease == LeaseState::Free && w.alive.load(Ordering::SeqCst))
            .min_by_key(|(i, w)| (w.last_released, *i))
            .map(|(i, _)| i)
    }

    fn lease(&mut self, idx: usize) -> String {
        self.next_sid += 1;
        let sid = format!("s{}", self.next_sid);
        self.workers[idx].lease = LeaseState::Leased(sid.clone());
        self.sessions.insert(sid.clone(), idx);
        sid
    }

    fn release(&mut self, sid: &str) -> bool {
        let Some(idx) = self.sessions.remove(sid) else {
            return false;
        };
        self.clock += 1;
        let w = &mut self.workers[idx];
        if w.lease == LeaseState::Leased(sid.to_string()) {
            w.lease = LeaseState::Free;
            w.last_released = self.clock;
        }
        true
    }

    fn stats(&self) -> PoolStats {
        PoolStats {
            workers: self.workers.len(),
            live: self
                .workers
                .iter()
                .filter(|w| w.lease != LeaseState::Dead && w.alive.load(Ordering::SeqCst))
                .count(),
            leased: self
                .workers
                .iter()
                .filter(|w| matches!(w.lease, LeaseState::Leased(_)))
                .count(),
            restarts: self.restarts,
        }
    }
}

struct Shared {
    state: Mutex<PoolState>,
    changed: Condvar,
    config: PoolConfig,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, PoolState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn spawn_worker(&self) -> Result<Connection, TransportError> {
        Connection::spawn_stdio(&self.config.backend_command, &self.config.transport)
    }
}

/// Pool counters as reported by `(stats id)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolStats {
    pub workers: usize,
    pub live: usize,
    pub leased: usize,
    pub restarts: u64,
}

impl PoolStats {
    fn to_sexpr(self) -> SExpr {
        SExpr::List(vec![
            SExpr::kw("workers"),
            SExpr::int(self.workers as u64),
            SExpr::kw("live"),
            SExpr::int(self.live as u64),
            SExpr::kw("leased"),
            SExpr::int(self.leased as u64),
            SExpr::kw("restarts"),
            SExpr::int(self.restarts),
        ])
    }

    fn from_sexpr(e: &SExpr) -> Option<PoolStats> {
        let items = e.as_list()?;
        let get = |key: &str| -> Option<u64> {
            items
                .chunks(2)
                .find(|p| p.len() == 2 && p[0].as_keyword() == Some(key))
                .and_then(|p| p[1].as_integer())
                .and_then(|n| n.to_u64())
        };
        Some(PoolStats {
            workers: get("workers")? as usize,
            live: get("live")? as usize,
            leased: get("leased")? as usize,
            restarts: get("restarts")?,
        })
    }
}

/// A running pool server.
pub struct PoolServer {
    shared: Arc<Shared>,
    local_addr: SocketAddr,
    accept: Option<JoinHandle<()>>,
    monitor: Option<JoinHandle<()>>,
}

impl PoolServer {
    /// Spawns all workers, binds the listener and starts serving on
    /// background threads.
    pub fn start(config: PoolConfig) -> Result<PoolServer, PoolError> {
        if config.worker_count == 0 {
            return Err(PoolError::Config("worker_count must be at least 1".into()));
        }
        if config.backend_command.is_empty() {
            return Err(PoolError::Config("empty backend command".into()));
        }
        let mut workers = Vec::with_capacity(config.worker_count);
        for _ in 0..config.worker_count {
            let conn = Connection::spawn_stdio(&config.backend_command, &config.transport)?;
            workers.push(Worker::new(conn, 0));
        }
        let listener = TcpListener::bind(&config.listen_address)?;
        let local_addr = listener.local_addr()?;
        log::info!("pool of {} workers listening on {local_addr}", config.worker_count);
        let shared = Arc::new(Shared {
            state: Mutex::new(PoolState {
                workers,
                sessions: HashMap::new(),
                next_sid: 0,
                clock: 0,
                restarts: 0,
                shutting_down: false,
            }),
            changed: Condvar::new(),
            config,
        });

        let monitor_shared = Arc::clone(&shared);
        let monitor = thread::Builder::new()
            .name("pool-monitor".into())
            .spawn(move || monitor_loop(&monitor_shared))?;
        let accept_shared = Arc::clone(&shared);
        let accept = thread::Builder::new()
            .name("pool-accept".into())
            .spawn(move || accept_loop(listener, accept_shared))?;
        Ok(PoolServer {
            shared,
            local_addr,
            accept: Some(accept),
            monitor: Some(monitor),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn stats(&self) -> PoolStats {
        self.shared.lock().stats()
    }

    /// Pids of the worker processes, by worker index.
    pub fn worker_pids(&self) -> Vec<Option<u32>> {
        self.shared.lock().workers.iter().map(|w| w.pid).collect()
    }

    /// Blocks until the server shuts down.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    /// Stops accepting clients and terminates all workers.
    pub fn shutdown(&mut self) {
        let conns: Vec<_> = {
            let mut st = self.shared.lock();
            if st.shutting_down {
                return;
            }
            st.shutting_down = true;
            st.workers.iter_mut().filter_map(|w| w.conn.take()).collect()
        };
        self.shared.changed.notify_all();
        // wake the accept loop
        let _ = TcpStream::connect(self.local_addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        if let Some(h) = self.monitor.take() {
            let _ = h.join();
        }
        drop(conns);
    }
}

impl Drop for PoolServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Runs a pool server in the foreground.
pub fn serve(config: PoolConfig) -> Result<(), PoolError> {
    PoolServer::start(config)?.wait();
    Ok(())
}

fn monitor_loop(shared: &Shared) {
    loop {
        let mut to_respawn = Vec::new();
        let mut to_drop = Vec::new();
        {
            let mut st = shared.lock();
            if st.shutting_down {
                return;
            }
            for idx in 0..st.workers.len() {
                let w = &st.workers[idx];
                if w.lease != LeaseState::Dead && !w.alive.load(Ordering::SeqCst) {
                    to_drop.extend(st.retire(idx));
                }
                let w = &mut st.workers[idx];
                if w.lease == LeaseState::Dead && !w.respawning {
                    w.respawning = true;
                    to_drop.extend(w.conn.take());
                    to_respawn.push(idx);
                }
            }
        }
        if !to_respawn.is_empty() {
            shared.changed.notify_all();
        }
        drop(to_drop);
        for idx in to_respawn {
            let spawned = shared.spawn_worker();
            let mut st = shared.lock();
            let w = &mut st.workers[idx];
            w.respawning = false;
            match spawned {
                Ok(conn) => {
                    w.install(conn);
                    w.lease = LeaseState::Free;
                    log::info!("worker {idx} restarted as pid {:?}", w.pid);
                    st.restarts += 1;
                    drop(st);
                    shared.changed.notify_all();
                }
                Err(e) => log::error!("cannot restart worker {idx}: {e}"),
            }
        }
        thread::sleep(MONITOR_INTERVAL);
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    for stream in listener.incoming() {
        if shared.lock().shutting_down {
            return;
        }
        match stream {
            Ok(stream) => {
                let shared = Arc::clone(&shared);
                let spawned = thread::Builder::new()
                    .name("pool-client".into())
                    .spawn(move || serve_client(stream, &shared));
                if let Err(e) = spawned {
                    log::error!("cannot start client thread: {e}");
                }
            }
            Err(e) => log::warn!("accept failed: {e}"),
        }
    }
}

fn ret(id: u64, status: RetStatus, payload: SExpr) -> Frame {
    Frame::Ret { id, status, payload }
}

fn fault(id: u64, fault: PoolFault) -> Frame {
    ret(id, RetStatus::Error, SExpr::kw(fault.keyword()))
}

struct ClientWriter {
    stream: TcpStream,
    broken: bool,
}

impl ClientWriter {
    fn send(&mut self, frame: &Frame) {
        if self.broken {
            return;
        }
        if let Err(e) = self.stream.write_all(frame.encode().as_bytes()) {
            log::debug!("client write failed: {e}");
            self.broken = true;
        }
    }
}

fn serve_client(stream: TcpStream, shared: &Shared) {
    stream.set_nodelay(true).ok();
    let reader = match stream.try_clone() {
        Ok(s) => BufReader::new(s),
        Err(e) => {
            log::warn!("cannot clone client stream: {e}");
            return;
        }
    };
    let mut writer = ClientWriter { stream, broken: false };
    let mut owned: HashSet<String> = HashSet::new();
    for line in reader.lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        match Frame::decode(&line) {
            Ok(frame) => handle_client_frame(frame, shared, &mut writer, &mut owned),
            Err(e) => match e.id {
                Some(id) => writer.send(&ret(id, RetStatus::Error, SExpr::kw("protocol"))),
                None => log::warn!("client sent an unusable frame: {e}"),
            },
        }
        if writer.broken {
            break;
        }
    }
    if !owned.is_empty() {
        let mut st = shared.lock();
        for sid in &owned {
            st.release(sid);
        }
        drop(st);
        shared.changed.notify_all();
    }
}

fn handle_client_frame(frame: Frame, shared: &Shared, writer: &mut ClientWriter, owned: &mut HashSet<String>) {
    match frame {
        Frame::Ping { id } => writer.send(&Frame::Pong { id }),
        Frame::Stats { id } => {
            let stats = shared.lock().stats();
            writer.send(&ret(id, RetStatus::Ok, stats.to_sexpr()));
        }
        Frame::Acquire { id, fresh } => match acquire(shared, fresh) {
            Ok(session) => {
                owned.insert(session.clone());
                writer.send(&Frame::Session { id, session });
            }
            Err(f) => writer.send(&fault(id, f)),
        },
        Frame::Release { id, session } => {
            let released = shared.lock().release(&session);
            if released {
                owned.remove(&session);
                shared.changed.notify_all();
                writer.send(&ret(id, RetStatus::Ok, SExpr::nil()));
            } else {
                writer.send(&fault(id, PoolFault::UnknownSession));
            }
        }
        Frame::Ld {
            id,
            forms,
            options,
            session,
        } => forward(shared, writer, id, session, Request::ld(forms, options)),
        Frame::GetGlobal { id, symbol, session } => {
            forward(shared, writer, id, session, Request::get_global(symbol))
        }
        other => writer.send(&ret(other.id(), RetStatus::Error, SExpr::kw("protocol"))),
    }
}

fn acquire(shared: &Shared, fresh: bool) -> Result<String, PoolFault> {
    let deadline = Instant::now() + shared.config.max_acquire_wait;
    let mut st = shared.lock();
    let (idx, sid) = loop {
        if st.shutting_down {
            return Err(PoolFault::PoolExhausted);
        }
        if let Some(idx) = st.pick_free() {
            let sid = st.lease(idx);
            break (idx, sid);
        }
        let now = Instant::now();
        if now >= deadline {
            return Err(PoolFault::PoolExhausted);
        }
        st = shared
            .changed
            .wait_timeout(st, deadline - now)
            .unwrap_or_else(|e| e.into_inner())
            .0;
    };
    if !fresh {
        return Ok(sid);
    }
    // The lease keeps everyone else away while the process is replaced.
    let old = st.workers[idx].conn.take();
    drop(st);
    drop(old);
    let spawned = shared.spawn_worker();
    let mut st = shared.lock();
    match spawned {
        Ok(conn) => {
            st.workers[idx].install(conn);
            st.restarts += 1;
            Ok(sid)
        }
        Err(e) => {
            log::error!("cannot restart worker {idx} for a fresh lease: {e}");
            st.retire(idx);
            Err(PoolFault::WorkerDied)
        }
    }
}

fn forward(shared: &Shared, writer: &mut ClientWriter, id: u64, session: Option<String>, request: Request) {
    let Some(sid) = session else {
        writer.send(&fault(id, PoolFault::UnknownSession));
        return;
    };
    let target = {
        let st = shared.lock();
        st.sessions.get(&sid).and_then(|&idx| {
            let w = &st.workers[idx];
            match (&w.lease, &w.conn) {
                (LeaseState::Leased(s), Some(conn)) if *s == sid => Some((idx, w.generation, Arc::clone(conn))),
                _ => None,
            }
        })
    };
    let Some((idx, generation, conn)) = target else {
        writer.send(&fault(id, PoolFault::UnknownSession));
        return;
    };
    let result = {
        let mut conn = conn.lock().unwrap_or_else(|e| e.into_inner());
        conn.roundtrip(request, &mut |class: StreamClass, text: &str| {
            writer.send(&Frame::Out {
                id,
                class,
                text: text.to_string(),
            })
        })
    };
    let failure = match result {
        Ok(Reply::Ret { status, payload }) => {
            writer.send(&ret(id, status, payload));
            return;
        }
        Ok(other) => {
            log::warn!("worker {idx} answered a forwarded request with {other:?}");
            PoolFault::WorkerDied
        }
        Err(TransportError::Timeout(_)) => PoolFault::Timeout,
        Err(e) => {
            log::warn!("worker {idx} failed: {e}");
            PoolFault::WorkerDied
        }
    };
    let stale = {
        let mut st = shared.lock();
        if st.workers[idx].generation == generation {
            st.retire(idx)
        } else {
            None
        }
    };
    drop(stale);
    drop(conn);
    writer.send(&fault(id, failure));
}

/// Client handle to a pool server. Clones share one connection.
#[derive(Clone)]
pub struct PoolClient {
    conn: Arc<Mutex<Connection>>,
}

impl std::fmt::Debug for PoolClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PoolClient").finish_non_exhaustive()
    }
}

fn fault_of(payload: &SExpr) -> Option<PoolFault> {
    payload.as_keyword().and_then(PoolFault::from_keyword)
}

impl PoolClient {
    pub fn connect(address: &str, config: &TransportConfig) -> Result<PoolClient, TransportError> {
        Ok(PoolClient {
            conn: Arc::new(Mutex::new(Connection::connect_tcp(address, config)?)),
        })
    }

    fn request(
        &self,
        request: Request,
        on_output: &mut dyn FnMut(StreamClass, &str),
    ) -> Result<Reply, TransportError> {
        let mut conn = self.conn.lock().unwrap_or_else(|e| e.into_inner());
        match conn.roundtrip(request, on_output)? {
            Reply::Ret {
                status: RetStatus::Error,
                payload,
            } if fault_of(&payload).is_some() => Err(TransportError::Pool(fault_of(&payload).unwrap())),
            reply => Ok(reply),
        }
    }

    fn acquire_with(&self, fresh: bool) -> Result<String, TransportError> {
        match self.request(Request::Acquire { fresh }, &mut |_, _| {})? {
            Reply::Session(sid) => Ok(sid),
            other => Err(TransportError::Protocol(format!("unexpected reply to acquire: {other:?}"))),
        }
    }

    pub fn acquire(&self) -> Result<String, TransportError> {
        self.acquire_with(false)
    }

    /// Acquires a worker that has just been restarted.
    pub fn acquire_fresh(&self) -> Result<String, TransportError> {
        self.acquire_with(true)
    }

    pub fn release(&self, sid: &str) -> Result<(), TransportError> {
        match self.request(
            Request::Release {
                session: sid.to_string(),
            },
            &mut |_, _| {},
        )? {
            Reply::Ret {
                status: RetStatus::Ok, ..
            } => Ok(()),
            other => Err(TransportError::Protocol(format!("unexpected reply to release: {other:?}"))),
        }
    }

    /// Sends an `ld` or `get-global` request under `sid`.
    pub fn submit(
        &self,
        sid: &str,
        request: Request,
        on_output: &mut dyn FnMut(StreamClass, &str),
    ) -> Result<Reply, TransportError> {
        self.request(request.with_session(sid), on_output)
    }

    pub fn stats(&self) -> Result<PoolStats, TransportError> {
        match self.request(Request::Stats, &mut |_, _| {})? {
            Reply::Ret {
                status: RetStatus::Ok,
                payload,
            } => PoolStats::from_sexpr(&payload)
                .ok_or_else(|| TransportError::Protocol(format!("malformed stats {payload}"))),
            other => Err(TransportError::Protocol(format!("unexpected reply to stats: {other:?}"))),
        }
    }

    /// A bridge session running against the worker leased under `sid`.
    pub fn session(&self, sid: &str) -> Session {
        Session::new(Box::new(PooledLink {
            client: self.clone(),
            sid: sid.to_string(),
        }))
    }

    pub fn is_alive(&self) -> bool {
        Link::is_alive(&*self.conn.lock().unwrap_or_else(|e| e.into_inner()))
    }
}

/// Carries bridge requests over a pool lease.
pub struct PooledLink {
    client: PoolClient,
    sid: String,
}

impl PooledLink {
    pub fn sid(&self) -> &str {
        &self.sid
    }
}

impl Link for PooledLink {
    fn roundtrip(
        &mut self,
        request: Request,
        on_output: &mut dyn FnMut(StreamClass, &str),
    ) -> Result<Reply, TransportError> {
        self.client.submit(&self.sid, request, on_output)
    }

    fn is_alive(&self) -> bool {
        self.client.is_alive()
    }
}
