//! Newline-framed S-expression transport to prover backends.
//!
//! Each frame is one canonically printed [`SExpr`] followed by `\n`.
//! Requests carry a per-connection id that strictly increases; a request is
//! answered by zero or more `out` frames and then exactly one terminal frame
//! (`ret`, `pong` or `session`) with the same id. Only one request is ever
//! in flight on a connection.
//!
//! ```text
//! -> (ld 7 ((assign r 5)) (:standard-co :emit :ld-error-action :error))
//! <- (out 7 :comment-window "hi\n")
//! <- (ret 7 :ok :eof)
//! ```
//!
//! Pool servers add `(acquire <id> [:fresh])`, `(release <id> <sid>)`,
//! `(stats <id>)` and accept `ld`/`get-global` with a trailing session id.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use num_traits::ToPrimitive;
use thiserror::Error;

use crate::output::StreamClass;
use crate::sexpr::{print_sexpr, Reader, SExpr};

pub const DEADLINE_ENV: &str = "PROVER_BRIDGE_DEADLINE_MS";
pub const DEFAULT_DEADLINE: Duration = Duration::from_secs(30);
pub const DEFAULT_HANDSHAKE_DEADLINE: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetStatus {
    Ok,
    Error,
}

impl RetStatus {
    fn keyword(self) -> &'static str {
        match self {
            RetStatus::Ok => "ok",
            RetStatus::Error => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Ld {
        id: u64,
        forms: Vec<SExpr>,
        options: Vec<SExpr>,
        session: Option<String>,
    },
    GetGlobal {
        id: u64,
        symbol: SExpr,
        session: Option<String>,
    },
    Ping {
        id: u64,
    },
    Acquire {
        id: u64,
        fresh: bool,
    },
    Release {
        id: u64,
        session: String,
    },
    Stats {
        id: u64,
    },
    Out {
        id: u64,
        class: StreamClass,
        text: String,
    },
    Ret {
        id: u64,
        status: RetStatus,
        payload: SExpr,
    },
    Pong {
        id: u64,
    },
    Session {
        id: u64,
        session: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed frame: {message}")]
pub struct FrameError {
    pub message: String,
    /// Request id, when it could be recovered from the malformed frame.
    pub id: Option<u64>,
}

impl Frame {
    pub fn id(&self) -> u64 {
        match self {
            Frame::Ld { id, .. }
            | Frame::GetGlobal { id, .. }
            | Frame::Ping { id }
            | Frame::Acquire { id, .. }
            | Frame::Release { id, .. }
            | Frame::Stats { id }
            | Frame::Out { id, .. }
            | Frame::Ret { id, .. }
            | Frame::Pong { id }
            | Frame::Session { id, .. } => *id,
        }
    }

    pub fn to_sexpr(&self) -> SExpr {
        let head = |name: &str, id: u64| vec![SExpr::sym(name), SExpr::int(id)];
        let items = match self {
            Frame::Ld {
                id,
                forms,
                options,
                session,
            } => {
                let mut v = head("ld", *id);
                v.push(SExpr::list(forms.clone()));
                v.push(SExpr::list(options.clone()));
                v.extend(session.iter().map(|s| SExpr::text(s.as_str())));
                v
            }
            Frame::GetGlobal {
                id,
                symbol,
                session,
            } => {
                let mut v = head("get-global", *id);
                v.push(symbol.clone());
                v.extend(session.iter().map(|s| SExpr::text(s.as_str())));
                v
            }
            Frame::Ping { id } => head("ping", *id),
            Frame::Acquire { id, fresh } => {
                let mut v = head("acquire", *id);
                if *fresh {
                    v.push(SExpr::kw("fresh"));
                }
                v
            }
            Frame::Release { id, session } => {
                let mut v = head("release", *id);
                v.push(SExpr::text(session.as_str()));
                v
            }
            Frame::Stats { id } => head("stats", *id),
            Frame::Out { id, class, text } => {
                let mut v = head("out", *id);
                v.push(SExpr::kw(class.keyword()));
                v.push(SExpr::text(text.as_str()));
                v
            }
            Frame::Ret {
                id,
                status,
                payload,
            } => {
                let mut v = head("ret", *id);
                v.push(SExpr::kw(status.keyword()));
                v.push(payload.clone());
                v
            }
            Frame::Pong { id } => head("pong", *id),
            Frame::Session { id, session } => {
                let mut v = head("session", *id);
                v.push(SExpr::text(session.as_str()));
                v
            }
        };
        SExpr::List(items)
    }

    pub fn from_sexpr(e: &SExpr) -> Result<Frame, FrameError> {
        let bad = |message: String, id: Option<u64>| FrameError { message, id };
        let items = match e {
            SExpr::List(items) if items.len() >= 2 => items,
            _ => return Err(bad(format!("expected (tag id ...), got {e}"), None)),
        };
        let tag = items[0]
            .symbol_name()
            .ok_or_else(|| bad(format!("frame tag must be a symbol: {}", items[0]), None))?;
        let id = items[1]
            .as_integer()
            .and_then(|n| n.to_u64())
            .filter(|&n| n > 0)
            .ok_or_else(|| bad(format!("frame id must be a positive integer: {}", items[1]), None))?;
        let rest = &items[2..];
        let bad = |message: &str| FrameError {
            message: format!("{tag}: {message}"),
            id: Some(id),
        };
        let session_arg = |e: Option<&SExpr>| -> Result<Option<String>, FrameError> {
            match e {
                None => Ok(None),
                Some(SExpr::Text(s)) => Ok(Some(s.clone())),
                Some(_) => Err(bad("session id must be a string")),
            }
        };
        let list_arg = |e: &SExpr, what: &str| -> Result<Vec<SExpr>, FrameError> {
            e.as_list()
                .map(|l| l.to_vec())
                .ok_or_else(|| bad(&format!("{what} must be a list")))
        };

        let frame = match (tag, rest) {
            ("ld", [forms, options]) | ("ld", [forms, options, _]) => Frame::Ld {
                id,
                forms: list_arg(forms, "forms")?,
                options: list_arg(options, "options")?,
                session: session_arg(rest.get(2))?,
            },
            ("get-global", [symbol]) | ("get-global", [symbol, _]) => {
                if !matches!(symbol, SExpr::Symbol { .. }) {
                    return Err(bad("argument must be a symbol"));
                }
                Frame::GetGlobal {
                    id,
                    symbol: symbol.clone(),
                    session: session_arg(rest.get(1))?,
                }
            }
            ("ping", []) => Frame::Ping { id },
            ("acquire", []) => Frame::Acquire { id, fresh: false },
            ("acquire", [SExpr::Keyword(k)]) if k == "fresh" => Frame::Acquire { id, fresh: true },
            ("release", [SExpr::Text(s)]) => Frame::Release {
                id,
                session: s.clone(),
            },
            ("stats", []) => Frame::Stats { id },
            ("out", [SExpr::Keyword(k), SExpr::Text(text)]) => Frame::Out {
                id,
                class: StreamClass::from_keyword(k)
                    .ok_or_else(|| bad(&format!("unknown stream class :{k}")))?,
                text: text.clone(),
            },
            ("ret", [SExpr::Keyword(k), payload]) => Frame::Ret {
                id,
                status: match k.as_str() {
                    "ok" => RetStatus::Ok,
                    "error" => RetStatus::Error,
                    _ => return Err(bad(&format!("unknown status :{k}"))),
                },
                payload: payload.clone(),
            },
            ("pong", []) => Frame::Pong { id },
            ("session", [SExpr::Text(s)]) => Frame::Session {
                id,
                session: s.clone(),
            },
            _ => return Err(bad("unrecognized frame shape")),
        };
        Ok(frame)
    }

    /// One wire line, including the trailing newline.
    pub fn encode(&self) -> String {
        let mut line = print_sexpr(&self.to_sexpr());
        line.push('\n');
        line
    }

    pub fn decode(line: &str) -> Result<Frame, FrameError> {
        let mut reader = Reader::new(line);
        let e = match reader.next_sexpr() {
            Some(Ok(e)) => e,
            Some(Err(err)) => {
                return Err(FrameError {
                    message: err.to_string(),
                    id: None,
                })
            }
            None => {
                return Err(FrameError {
                    message: "empty frame".into(),
                    id: None,
                })
            }
        };
        let frame = Frame::from_sexpr(&e)?;
        if !reader.at_end() {
            return Err(FrameError {
                message: "trailing data after frame".into(),
                id: Some(frame.id()),
            });
        }
        Ok(frame)
    }
}

/// A request before an id has been assigned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Ld {
        forms: Vec<SExpr>,
        options: Vec<SExpr>,
        session: Option<String>,
    },
    GetGlobal {
        symbol: SExpr,
        session: Option<String>,
    },
    Ping,
    Acquire {
        fresh: bool,
    },
    Release {
        session: String,
    },
    Stats,
}

impl Request {
    pub fn ld(forms: Vec<SExpr>, options: Vec<SExpr>) -> Request {
        Request::Ld {
            forms,
            options,
            session: None,
        }
    }

    pub fn get_global(symbol: SExpr) -> Request {
        Request::GetGlobal {
            symbol,
            session: None,
        }
    }

    pub fn with_session(self, sid: &str) -> Request {
        match self {
            Request::Ld { forms, options, .. } => Request::Ld {
                forms,
                options,
                session: Some(sid.to_string()),
            },
            Request::GetGlobal { symbol, .. } => Request::GetGlobal {
                symbol,
                session: Some(sid.to_string()),
            },
            other => other,
        }
    }

    pub fn into_frame(self, id: u64) -> Frame {
        match self {
            Request::Ld {
                forms,
                options,
                session,
            } => Frame::Ld {
                id,
                forms,
                options,
                session,
            },
            Request::GetGlobal { symbol, session } => Frame::GetGlobal {
                id,
                symbol,
                session,
            },
            Request::Ping => Frame::Ping { id },
            Request::Acquire { fresh } => Frame::Acquire { id, fresh },
            Request::Release { session } => Frame::Release { id, session },
            Request::Stats => Frame::Stats { id },
        }
    }
}

/// Terminal response to a request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reply {
    Ret { status: RetStatus, payload: SExpr },
    Pong,
    Session(String),
}

/// Errors a pool server reports in place of a backend answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PoolFault {
    WorkerDied,
    UnknownSession,
    PoolExhausted,
    Timeout,
}

impl PoolFault {
    pub fn keyword(&self) -> &'static str {
        match self {
            PoolFault::WorkerDied => "worker-died",
            PoolFault::UnknownSession => "unknown-session",
            PoolFault::PoolExhausted => "pool-exhausted",
            PoolFault::Timeout => "timeout",
        }
    }

    pub fn from_keyword(k: &str) -> Option<PoolFault> {
        [
            PoolFault::WorkerDied,
            PoolFault::UnknownSession,
            PoolFault::PoolExhausted,
            PoolFault::Timeout,
        ]
        .into_iter()
        .find(|f| f.keyword() == k)
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("failed to spawn backend `{command}`: {source}")]
    Spawn { command: String, source: io::Error },
    #[error("failed to connect to {address}: {source}")]
    Connect { address: String, source: io::Error },
    #[error("backend did not answer the handshake within {0:?}")]
    HandshakeTimeout(Duration),
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("backend died")]
    BackendDied,
    #[error("pool error :{}", .0.keyword())]
    Pool(PoolFault),
}

#[derive(Debug, Clone, Copy)]
pub struct TransportConfig {
    pub request_deadline: Duration,
    pub handshake_deadline: Duration,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            request_deadline: DEFAULT_DEADLINE,
            handshake_deadline: DEFAULT_HANDSHAKE_DEADLINE,
        }
    }
}

impl TransportConfig {
    /// Defaults, with the request deadline taken from
    /// `PROVER_BRIDGE_DEADLINE_MS` when set.
    pub fn from_env() -> Self {
        let mut cfg = TransportConfig::default();
        if let Some(ms) = std::env::var(DEADLINE_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<u64>().ok())
        {
            cfg.request_deadline = Duration::from_millis(ms);
        }
        cfg
    }
}

/// Anything that can carry a bridge request to a backend.
pub trait Link: Send {
    fn roundtrip(
        &mut self,
        request: Request,
        on_output: &mut dyn FnMut(StreamClass, &str),
    ) -> Result<Reply, TransportError>;

    fn is_alive(&self) -> bool;
}

enum Incoming {
    Frame(Frame),
    Malformed(FrameError),
    Closed,
}

/// One framed connection to a backend: a child process over stdio, a TCP
/// peer, or an in-process miniprover thread.
pub struct Connection {
    writer: Option<Box<dyn Write + Send>>,
    incoming: mpsc::Receiver<Incoming>,
    next_id: u64,
    deadline: Duration,
    alive: Arc<AtomicBool>,
    dead: bool,
    child: Option<Child>,
    socket: Option<TcpStream>,
    label: String,
}

impl std::fmt::Debug for Connection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Connection")
            .field("label", &self.label)
            .field("next_id", &self.next_id)
            .field("dead", &self.dead)
            .finish_non_exhaustive()
    }
}

impl Connection {
    /// Wraps an already-open byte stream pair. Does not handshake.
    pub fn from_streams(
        reader: Box<dyn Read + Send>,
        writer: Box<dyn Write + Send>,
        label: impl Into<String>,
        config: &TransportConfig,
    ) -> Connection {
        let label = label.into();
        let alive = Arc::new(AtomicBool::new(true));
        let (tx, rx) = mpsc::channel();
        let flag = Arc::clone(&alive);
        let thread_label = label.clone();
        thread::Builder::new()
            .name(format!("frames:{thread_label}"))
            .spawn(move || read_frames(reader, tx, flag, &thread_label))
            .expect("spawn frame reader thread");
        Connection {
            writer: Some(writer),
            incoming: rx,
            next_id: 1,
            deadline: config.request_deadline,
            alive,
            dead: false,
            child: None,
            socket: None,
            label,
        }
    }

    /// Starts `argv` with piped stdin/stdout and waits for it to answer a
    /// `ping`.
    pub fn spawn_stdio(argv: &[String], config: &TransportConfig) -> Result<Connection, TransportError> {
        let command = argv.join(" ");
        let (program, args) = argv.split_first().ok_or_else(|| TransportError::Spawn {
            command: command.clone(),
            source: io::Error::new(io::ErrorKind::InvalidInput, "empty command"),
        })?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| TransportError::Spawn {
                command: command.clone(),
                source,
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let label = format!("pid {}", child.id());
        let mut conn = Connection::from_streams(Box::new(stdout), Box::new(stdin), label, config);
        conn.child = Some(child);
        conn.handshake(config.handshake_deadline)?;
        Ok(conn)
    }

    pub fn connect_tcp(address: &str, config: &TransportConfig) -> Result<Connection, TransportError> {
        let connect_err = |source| TransportError::Connect {
            address: address.to_string(),
            source,
        };
        let addrs: Vec<_> = address.to_socket_addrs().map_err(connect_err)?.collect();
        let stream = TcpStream::connect(&addrs[..]).map_err(connect_err)?;
        stream.set_nodelay(true).ok();
        let reader = stream.try_clone().map_err(connect_err)?;
        let socket = stream.try_clone().map_err(connect_err)?;
        let mut conn = Connection::from_streams(
            Box::new(reader),
            Box::new(stream),
            format!("tcp {address}"),
            config,
        );
        conn.socket = Some(socket);
        conn.handshake(config.handshake_deadline)?;
        Ok(conn)
    }

    /// A miniprover served from a thread of this process over OS pipes.
    pub fn in_process(config: &TransportConfig) -> Result<Connection, TransportError> {
        let pipe_err = |source| TransportError::Spawn {
            command: "in-process miniprover".into(),
            source,
        };
        let (req_rx, req_tx) = io::pipe().map_err(pipe_err)?;
        let (resp_rx, resp_tx) = io::pipe().map_err(pipe_err)?;
        thread::Builder::new()
            .name("miniprover".into())
            .spawn(move || {
                if let Err(e) = crate::miniprover::serve(BufReader::new(req_rx), resp_tx) {
                    log::debug!("in-process miniprover stopped: {e}");
                }
            })
            .map_err(pipe_err)?;
        let mut conn =
            Connection::from_streams(Box::new(resp_rx), Box::new(req_tx), "in-process", config);
        conn.handshake(config.handshake_deadline)?;
        Ok(conn)
    }

    fn handshake(&mut self, deadline: Duration) -> Result<(), TransportError> {
        let saved = std::mem::replace(&mut self.deadline, deadline);
        let result = self.roundtrip(Request::Ping, &mut |_, _| {});
        self.deadline = saved;
        match result {
            Ok(Reply::Pong) => Ok(()),
            Ok(other) => Err(TransportError::Protocol(format!(
                "expected pong to handshake, got {other:?}"
            ))),
            Err(TransportError::Timeout(d)) => Err(TransportError::HandshakeTimeout(d)),
            Err(e) => Err(e),
        }
    }

    pub fn set_deadline(&mut self, deadline: Duration) {
        self.deadline = deadline;
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// OS process id of a spawned backend.
    pub fn pid(&self) -> Option<u32> {
        self.child.as_ref().map(|c| c.id())
    }

    /// Flag cleared by the reader thread once the peer closes its end.
    pub fn liveness(&self) -> Arc<AtomicBool> {
        Arc::clone(&self.alive)
    }

    /// The reader thread holds its own handle, so dropping the writer
    /// alone would leave a TCP peer waiting.
    fn close_socket(&mut self) {
        if let Some(socket) = self.socket.take() {
            let _ = socket.shutdown(std::net::Shutdown::Both);
        }
    }

    fn mark_dead(&mut self) {
        self.dead = true;
        self.writer = None;
        self.close_socket();
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }

    /// Sends one request and waits for its terminal frame, passing `out`
    /// frames to `on_output` as they arrive.
    pub fn roundtrip(
        &mut self,
        request: Request,
        on_output: &mut dyn FnMut(StreamClass, &str),
    ) -> Result<Reply, TransportError> {
        if self.dead || !self.alive.load(Ordering::SeqCst) {
            self.dead = true;
            return Err(TransportError::BackendDied);
        }
        let id = self.next_id;
        self.next_id += 1;
        let line = request.into_frame(id).encode();
        let written = match self.writer.as_mut() {
            Some(w) => w.write_all(line.as_bytes()).and_then(|_| w.flush()),
            None => Err(io::ErrorKind::BrokenPipe.into()),
        };
        if let Err(e) = written {
            log::debug!("{}: write failed: {e}", self.label);
            self.mark_dead();
            return Err(TransportError::BackendDied);
        }

        let started = Instant::now();
        loop {
            let remaining = self.deadline.saturating_sub(started.elapsed());
            let incoming = match self.incoming.recv_timeout(remaining) {
                Ok(incoming) => incoming,
                Err(RecvTimeoutError::Timeout) => {
                    self.mark_dead();
                    return Err(TransportError::Timeout(self.deadline));
                }
                Err(RecvTimeoutError::Disconnected) => Incoming::Closed,
            };
            let frame = match incoming {
                Incoming::Frame(f) => f,
                Incoming::Malformed(e) => {
                    self.mark_dead();
                    return Err(TransportError::Protocol(e.to_string()));
                }
                Incoming::Closed => {
                    self.mark_dead();
                    return Err(TransportError::BackendDied);
                }
            };
            if frame.id() != id {
                self.mark_dead();
                return Err(TransportError::Protocol(format!(
                    "expected a response to request {id}, got a frame for {}",
                    frame.id()
                )));
            }
            match frame {
                Frame::Out { class, text, .. } => on_output(class, &text),
                Frame::Ret { status, payload, .. } => return Ok(Reply::Ret { status, payload }),
                Frame::Pong { .. } => return Ok(Reply::Pong),
                Frame::Session { session, .. } => return Ok(Reply::Session(session)),
                other => {
                    self.mark_dead();
                    return Err(TransportError::Protocol(format!(
                        "unexpected request frame from backend: {}",
                        other.to_sexpr()
                    )));
                }
            }
        }
    }
}

impl Link for Connection {
    fn roundtrip(
        &mut self,
        request: Request,
        on_output: &mut dyn FnMut(StreamClass, &str),
    ) -> Result<Reply, TransportError> {
        Connection::roundtrip(self, request, on_output)
    }

    fn is_alive(&self) -> bool {
        !self.dead && self.alive.load(Ordering::SeqCst)
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        // Closing stdin lets a well-behaved backend exit on EOF.
        self.writer = None;
        self.close_socket();
        if let Some(mut child) = self.child.take() {
            let until = Instant::now() + Duration::from_millis(200);
            loop {
                match child.try_wait() {
                    Ok(Some(_)) => return,
                    Ok(None) if Instant::now() < until => thread::sleep(Duration::from_millis(5)),
                    _ => break,
                }
            }
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn read_frames(
    reader: Box<dyn Read + Send>,
    tx: mpsc::Sender<Incoming>,
    alive: Arc<AtomicBool>,
    label: &str,
) {
    let mut reader = BufReader::new(reader);
    let mut line = String::new();
    loop {
        line.clear();
        match reader.read_line(&mut line) {
            Ok(0) => break,
            Ok(_) => {
                let trimmed = line.trim_end_matches(['\n', '\r']);
                if trimmed.trim().is_empty() {
                    continue;
                }
                let msg = match Frame::decode(trimmed) {
                    Ok(f) => Incoming::Frame(f),
                    Err(e) => Incoming::Malformed(e),
                };
                if tx.send(msg).is_err() {
                    return;
                }
            }
            Err(e) => {
                log::debug!("{label}: read failed: {e}");
                break;
            }
        }
    }
    alive.store(false, Ordering::SeqCst);
    let _ = tx.send(Incoming::Closed);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sexpr::read_sexpr;
    use proptest::prelude::*;

    fn f(s: &str) -> Frame {
        Frame::decode(s).unwrap()
    }

    #[test]
    fn decodes_every_frame_kind() {
        assert_eq!(
            f("(ld 3 ((assign r 5)) (:ld-error-action :error))"),
            Frame::Ld {
                id: 3,
                forms: vec![read_sexpr("(assign r 5)").unwrap()],
                options: vec![SExpr::kw("ld-error-action"), SExpr::kw("error")],
                session: None,
            }
        );
        assert_eq!(
            f("(get-global 2 r \"s1\")"),
            Frame::GetGlobal {
                id: 2,
                symbol: SExpr::sym("r"),
                session: Some("s1".into())
            }
        );
        assert_eq!(f("(ping 1)"), Frame::Ping { id: 1 });
        assert_eq!(f("(acquire 4 :fresh)"), Frame::Acquire { id: 4, fresh: true });
        assert_eq!(
            f("(out 5 :proofs-co \"x\\n\")"),
            Frame::Out {
                id: 5,
                class: StreamClass::ProofsCo,
                text: "x\n".into()
            }
        );
        assert_eq!(
            f("(ret 6 :error :unbound-global)"),
            Frame::Ret {
                id: 6,
                status: RetStatus::Error,
                payload: SExpr::kw("unbound-global")
            }
        );
        assert_eq!(f("(ld 7 nil nil)").id(), 7);
    }

    #[test]
    fn malformed_frames_report_recoverable_ids() {
        assert_eq!(Frame::decode("(bogus 9 x)").unwrap_err().id, Some(9));
        assert_eq!(Frame::decode("(ret 0 :ok nil)").unwrap_err().id, None);
        assert_eq!(Frame::decode("(ping").unwrap_err().id, None);
        assert_eq!(Frame::decode("(ping 1) (ping 2)").unwrap_err().id, Some(1));
        assert!(Frame::decode("(out 1 :stderr \"x\")").is_err());
    }

    #[test]
    fn encode_is_a_single_line() {
        let frame = Frame::Out {
            id: 1,
            class: StreamClass::CommentWindow,
            text: "line one\nline two\n".into(),
        };
        let line = frame.encode();
        assert_eq!(line.matches('\n').count(), 1);
        assert!(line.ends_with('\n'));
        assert_eq!(Frame::decode(line.trim_end()).unwrap(), frame);
    }

    #[test]
    fn request_ids_increase() {
        let mut conn = Connection::in_process(&TransportConfig::default()).unwrap();
        for _ in 0..3 {
            assert_eq!(conn.roundtrip(Request::Ping, &mut |_, _| {}).unwrap(), Reply::Pong);
        }
        // the handshake used id 1
        assert_eq!(conn.next_id, 5);
    }

    fn scripted_peer(lines: &'static [&'static str], hold_open: bool) -> Connection {
        // a fake backend that reads one request and replays `lines`
        let (req_rx, req_tx) = io::pipe().unwrap();
        let (resp_rx, mut resp_tx) = io::pipe().unwrap();
        thread::spawn(move || {
            let mut rd = BufReader::new(req_rx);
            let mut buf = String::new();
            let _ = rd.read_line(&mut buf);
            for l in lines {
                resp_tx.write_all(l.as_bytes()).unwrap();
                resp_tx.write_all(b"\n").unwrap();
            }
            if hold_open {
                let _ = rd.read_line(&mut buf);
            }
        });
        Connection::from_streams(
            Box::new(resp_rx),
            Box::new(req_tx),
            "scripted",
            &TransportConfig::default(),
        )
    }

    #[test]
    fn out_frames_then_ret() {
        let mut conn = scripted_peer(
            &[
                "(out 1 :comment-window \"a\")",
            "(out 1 :proofs-co \"b\")",
            "(ret 1 :ok :eof)",
            ],
            true,
        );
        let mut seen = Vec::new();
        let reply = conn
            .roundtrip(Request::ld(vec![], vec![]), &mut |c, t| seen.push((c, t.to_string())))
            .unwrap();
        assert_eq!(
            reply,
            Reply::Ret {
                status: RetStatus::Ok,
                payload: SExpr::kw("eof")
            }
        );
        assert_eq!(
            seen,
            vec![
                (StreamClass::CommentWindow, "a".to_string()),
                (StreamClass::ProofsCo, "b".to_string())
            ]
        );
    }

    #[test]
    fn mismatched_id_is_a_protocol_error() {
        let mut conn = scripted_peer(&["(ret 2 :ok :eof)"], true);
        let err = conn.roundtrip(Request::Ping, &mut |_, _| {}).unwrap_err();
        assert!(matches!(err, TransportError::Protocol(_)), "{err}");
        // the connection is unusable afterwards
        assert!(matches!(
            conn.roundtrip(Request::Ping, &mut |_, _| {}),
            Err(TransportError::BackendDied)
        ));
    }

    #[test]
    fn peer_closing_mid_request_is_backend_died() {
        let mut conn = scripted_peer(&["(out 1 :standard-co \"partial\")"], false);
        let err = conn.roundtrip(Request::Ping, &mut |_, _| {}).unwrap_err();
        assert!(matches!(err, TransportError::BackendDied), "{err}");
        let started = Instant::now();
        assert!(matches!(
            conn.roundtrip(Request::Ping, &mut |_, _| {}),
            Err(TransportError::BackendDied)
        ));
        assert!(started.elapsed() < Duration::from_millis(100));
    }

    #[test]
    fn timeout_poisons_the_connection() {
        let mut conn = scripted_peer(&[], true);
        conn.set_deadline(Duration::from_millis(100));
        let err = conn.roundtrip(Request::Ping, &mut |_, _| {}).unwrap_err();
        assert!(matches!(err, TransportError::Timeout(_)), "{err}");
        assert!(matches!(
            conn.roundtrip(Request::Ping, &mut |_, _| {}),
            Err(TransportError::BackendDied)
        ));
    }

    #[test]
    fn spawn_nonexistent_binary() {
        let err = Connection::spawn_stdio(
            &["/nonexistent/prover-backend".to_string()],
            &TransportConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, TransportError::Spawn { .. }));
    }

    #[test]
    fn refused_tcp_connection() {
        // bind then drop to get a port with nothing listening
        let port = std::net::TcpListener::bind("127.0.0.1:0")
            .unwrap()
            .local_addr()
            .unwrap()
            .port();
        let err = Connection::connect_tcp(&format!("127.0.0.1:{port}"), &TransportConfig::default())
            .unwrap_err();
        assert!(matches!(err, TransportError::Connect { .. }));
    }

    fn arb_frame() -> impl Strategy<Value = Frame> {
        let sexpr = crate::sexpr::tests::arb_sexpr();
        let id = 1..u64::MAX;
        let class = prop::sample::select(StreamClass::ALL.to_vec());
        prop_oneof![
            (id.clone(), prop::collection::vec(sexpr.clone(), 0..3), prop::option::of("[a-z0-9-]{1,8}"))
                .prop_map(|(id, forms, session)| Frame::Ld {
                    id,
                    forms,
                    options: vec![SExpr::kw("ld-error-action"), SExpr::kw("error")],
                    session
                }),
            (id.clone(), class, any::<String>()).prop_map(|(id, class, text)| Frame::Out {
                id,
                class,
                text
            }),
            (id.clone(), any::<bool>(), sexpr).prop_map(|(id, ok, payload)| Frame::Ret {
                id,
                status: if ok { RetStatus::Ok } else { RetStatus::Error },
                payload
            }),
            id.prop_map(|id| Frame::Pong { id }),
        ]
    }

    proptest! {
        #[test]
        fn frames_round_trip(frame in arb_frame()) {
            let line = frame.encode();
            prop_assert_eq!(line.matches('\n').count(), 1);
            prop_assert_eq!(Frame::decode(line.trim_end_matches('\n')).unwrap(), frame);
        }
    }
}
