//! Command-line driver.
//!
//! Exit codes: 0 when every call succeeded, 1 when some call returned a
//! non-nil `erp`, 2 for usage errors, 3 when the backend failed.

use std::ffi::OsString;
use std::io::{self, BufRead, Write};
use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bridge::{BridgeError, BridgeOptions, QueryResult, Session};
use crate::pool::{PoolClient, PoolConfig};
use crate::sexpr::{read_all, SExpr};
use crate::transport::TransportConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERP: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;

pub const BACKEND_ENV: &str = "PROVER_BRIDGE_BACKEND";

#[derive(Debug, Parser)]
#[command(name = "prover-bridge", version, about = "Evaluate forms on a prover backend")]
pub struct Cli {
    /// Backend command line, or tcp://HOST:PORT for a pool server.
    /// Defaults to this binary's own miniprover.
    #[arg(long, env = BACKEND_ENV, global = true)]
    pub backend: Option<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate one form and print `(erp val)`.
    Eval {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        form: String,
        #[command(flatten)]
        flags: CallFlags,
    },
    /// Run a file of `(mode form)` lines.
    Script {
        file: PathBuf,
        #[command(flatten)]
        flags: CallFlags,
    },
    /// Read `(mode form)` lines from stdin interactively.
    Repl {
        #[command(flatten)]
        flags: CallFlags,
    },
    /// Serve a pool of backend workers over TCP.
    Pool {
        #[arg(long, default_value_t = 4)]
        workers: usize,
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        #[arg(long, default_value_t = 5000)]
        max_wait_ms: u64,
    },
    /// Run the bundled miniprover on stdin/stdout.
    Miniprover,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Compute,
    Query,
    Event,
}

impl Mode {
    fn from_symbol(e: &SExpr) -> Option<Mode> {
        match e.symbol_name()? {
            "compute" => Some(Mode::Compute),
            "query" => Some(Mode::Query),
            "event" => Some(Mode::Event),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CallFlags {
    /// Suppress prover output during each call.
    #[arg(long)]
    pub quiet: bool,
    /// Print a `(captured "...")` line with the prover output.
    #[arg(long)]
    pub capture_output: bool,
    /// Step limit for query and event calls.
    #[arg(long)]
    pub step_limit: Option<u64>,
}

impl CallFlags {
    fn options(&self) -> BridgeOptions {
        BridgeOptions {
            quiet: self.quiet,
            capture_output: self.capture_output,
            prover_step_limit: self.step_limit,
            extra_ld_options: Vec::new(),
        }
    }
}

enum Failure {
    Usage(String),
    Backend(String),
}

impl From<BridgeError> for Failure {
    fn from(e: BridgeError) -> Failure {
        match e {
            BridgeError::Usage(msg) => Failure::Usage(msg),
            other => Failure::Backend(other.to_string()),
        }
    }
}

struct Backend {
    session: Session,
    lease: Option<(PoolClient, String)>,
}

impl Backend {
    fn open(target: Option<&str>) -> Result<Backend, Failure> {
        let config = TransportConfig::from_env();
        let mut backend = match target.map(str::trim).filter(|s| !s.is_empty()) {
            Some(target) if target.starts_with("tcp://") => {
                let addr = &target["tcp://".len()..];
                let client = PoolClient::connect(addr, &config).map_err(|e| Failure::Backend(e.to_string()))?;
                let sid = client.acquire().map_err(|e| Failure::Backend(e.to_string()))?;
                Backend {
                    session: client.session(&sid),
                    lease: Some((client, sid)),
                }
            }
            target => {
                let argv = backend_argv(target)?;
                Backend {
                    session: Session::spawn(&argv, &config)?,
                    lease: None,
                }
            }
        };
        // keep stdout for result lines
        backend.session.set_passthrough(Box::new(io::stderr()));
        Ok(backend)
    }
}

impl Drop for Backend {
    fn drop(&mut self) {
        if let Some((client, sid)) = self.lease.take() {
            let _ = client.release(&sid);
        }
    }
}

/// Splits a backend command line; `None` gives this binary in miniprover
/// mode.
fn backend_argv(target: Option<&str>) -> Result<Vec<String>, Failure> {
    match target {
        Some(s) => match shlex::split(s) {
            Some(argv) if !argv.is_empty() => Ok(argv),
            _ => Err(Failure::Usage(format!("cannot parse backend command `{s}`"))),
        },
        None => {
            let exe = std::env::current_exe()
                .map_err(|e| Failure::Backend(format!("cannot locate own executable: {e}")))?;
            Ok(vec![exe.to_string_lossy().into_owned(), "miniprover".into()])
        }
    }
}

fn parse_one(text: &str) -> Result<SExpr, String> {
    let mut forms = read_all(text).map_err(|e| e.to_string())?;
    match forms.len() {
        1 => Ok(forms.pop().unwrap()),
        0 => Err("no form given".into()),
        n => Err(format!("expected one form, got {n}")),
    }
}

/// A `(mode form)` line.
fn parse_call(line: &str) -> Result<(Mode, SExpr), String> {
    let e = parse_one(line)?;
    match e.as_list() {
        Some([mode, form]) => Mode::from_symbol(mode)
            .map(|m| (m, form.clone()))
            .ok_or_else(|| format!("unknown mode {mode}; expected compute, query or event")),
        _ => Err(format!("expected (mode form), got {e}")),
    }
}

fn is_blank(line: &str) -> bool {
    let t = line.trim();
    t.is_empty() || t.starts_with(';')
}

fn call(session: &mut Session, mode: Mode, form: &SExpr, opts: &BridgeOptions) -> Result<QueryResult, BridgeError> {
    match mode {
        Mode::Compute => session.compute(form, opts),
        Mode::Query => session.query(form, opts),
        Mode::Event => session.event(form, opts),
    }
}

fn captured_line(text: &str) -> String {
    format!("{}", SExpr::List(vec![SExpr::sym("captured"), SExpr::text(text)]))
}

fn run_calls(
    backend: &mut Backend,
    calls: &[(Mode, SExpr)],
    flags: &CallFlags,
    out: &mut dyn Write,
) -> Result<i32, Failure> {
    let opts = flags.options();
    let mut code = EXIT_OK;
    let mut captured = String::new();
    for (mode, form) in calls {
        let result = call(&mut backend.session, *mode, form, &opts)?;
        if flags.capture_output {
            captured.push_str(&backend.session.get_captured_output());
        }
        writeln!(out, "{result}").map_err(|e| Failure::Backend(e.to_string()))?;
        if result.erp() {
            code = EXIT_ERP;
        }
    }
    if flags.capture_output {
        writeln!(out, "{}", captured_line(&captured)).map_err(|e| Failure::Backend(e.to_string()))?;
    }
    Ok(code)
}

fn run_repl(backend: &mut Backend, flags: &CallFlags, out: &mut dyn Write) -> Result<i32, Failure> {
    let opts = flags.options();
    let stdin = io::stdin();
    let io_err = |e: io::Error| Failure::Backend(e.to_string());
    for line in stdin.lock().lines() {
        let line = line.map_err(io_err)?;
        if is_blank(&line) {
            continue;
        }
        match line.trim() {
            ":quit" | ":q" => break,
            ":quiet on" => backend.session.set_quiet_mode(true),
            ":quiet off" => backend.session.set_quiet_mode(false),
            ":captured" => writeln!(out, "{}", captured_line(&backend.session.get_captured_output())).map_err(io_err)?,
            _ => match parse_call(&line) {
                Ok((mode, form)) => {
                    let result = call(&mut backend.session, mode, &form, &opts)?;
                    writeln!(out, "{result}").map_err(io_err)?;
                    if flags.capture_output {
                        let text = backend.session.get_captured_output();
                        writeln!(out, "{}", captured_line(&text)).map_err(io_err)?;
                    }
                }
                Err(msg) => eprintln!("error: {msg}"),
            },
        }
        for w in backend.session.take_warnings() {
            eprintln!("warning: {w}");
        }
        out.flush().map_err(io_err)?;
    }
    Ok(EXIT_OK)
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<i32, Failure> {
    match cli.command {
        Command::Eval { mode, form, flags } => {
            let form = parse_one(&form).map_err(Failure::Usage)?;
            let mut backend = Backend::open(cli.backend.as_deref())?;
            run_calls(&mut backend, &[(mode, form)], &flags, out)
        }
        Command::Script { file, flags } => {
            let text = std::fs::read_to_string(&file)
                .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", file.display())))?;
            let calls = text
                .lines()
                .enumerate()
                .filter(|(_, l)| !is_blank(l))
                .map(|(n, l)| parse_call(l).map_err(|msg| Failure::Usage(format!("{}:{}: {msg}", file.display(), n + 1))))
                .collect::<Result<Vec<_>, _>>()?;
            let mut backend = Backend::open(cli.backend.as_deref())?;
            run_calls(&mut backend, &calls, &flags, out)
        }
        Command::Repl { flags } => {
            let mut backend = Backend::open(cli.backend.as_deref())?;
            run_repl(&mut backend, &flags, out)
        }
        Command::Pool {
            workers,
            listen,
            max_wait_ms,
        } => {
            let config = PoolConfig {
                worker_count: workers,
                backend_command: backend_argv(cli.backend.as_deref())?,
                listen_address: listen,
                max_acquire_wait: Duration::from_millis(max_wait_ms),
                transport: TransportConfig::from_env(),
            };
            let server = crate::pool::PoolServer::start(config).map_err(|e| match e {
                crate::pool::PoolError::Config(msg) => Failure::Usage(msg),
                other => Failure::Backend(other.to_string()),
            })?;
            eprintln!("listening on {}", server.local_addr());
            server.wait();
            Ok(EXIT_OK)
        }
        Command::Miniprover => match crate::miniprover::serve_stdio() {
            Ok(()) => Ok(EXIT_OK),
            Err(e) => Err(Failure::Backend(e.to_string())),
        },
    }
}

/// Parses `args` (including the program name) and runs the command,
/// writing result lines to stdout. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match dispatch(cli, &mut out) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("prover-bridge: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Backend(msg)) => {
            eprintln!("prover-bridge: backend failure: {msg}");
            EXIT_BACKEND
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn call_lines() {
        let (mode, form) = parse_call("(query (mv nil 1 state))").unwrap();
        assert_eq!(mode, Mode::Query);
        assert_eq!(form.to_string(), "(mv nil 1 state)");
        assert!(parse_call("(frob 1)").is_err());
        assert!(parse_call("(compute 1 2)").is_err());
        assert!(parse_call("(compute 1) (compute 2)").is_err());
        assert!(is_blank("  ; note"));
    }

    #[test]
    fn captured_line_is_an_sexpr() {
        let line = captured_line("a \"b\"\n");
        assert_eq!(line, "(captured \"a \\\"b\\\"\\n\")");
        assert_eq!(parse_one(&line).unwrap().as_list().unwrap()[1], SExpr::text("a \"b\"\n"));
    }

    #[test]
    fn backend_specs() {
        assert!(matches!(backend_argv(Some("a 'b c'")), Ok(v) if v == ["a", "b c"]));
        assert!(matches!(backend_argv(Some("'open")), Err(Failure::Usage(_))));
        assert!(matches!(backend_argv(None), Ok(v) if v[1] == "miniprover"));
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["prover-bridge", "eval", "--form", "1"]), EXIT_USAGE);
        assert_eq!(run(["prover-bridge", "eval", "--mode", "compute", "--form", "(1"]), EXIT_USAGE);
        assert_eq!(run(["prover-bridge", "frobnicate"]), EXIT_USAGE);
    }
}
