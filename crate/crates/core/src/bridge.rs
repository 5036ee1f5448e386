//! The three-call interface: `compute`, `query` and `event`.
//!
//! Every call wraps the user's form, runs it through one `ld` request on the
//! backend and, for `compute` and `query`, reads the stashed result back from
//! a state global with a second request. The outcome is always a
//! [`QueryResult`]; a backend that is gone is reported as a [`BridgeError`]
//! instead.

use std::fmt;
use std::io::Write;

use num_traits::ToPrimitive;
use thiserror::Error;

use crate::miniprover::{Value, DEFAULT_STEP_LIMIT};
use crate::output::{HookRegistry, OutputControl, QuietHook, SinkPolicy, StreamClass};
use crate::sexpr::SExpr;
use crate::transport::{Connection, Link, Reply, Request, RetStatus, TransportConfig, TransportError};

/// Option keys that are consumed by the bridge and never forwarded to `ld`.
pub const RESERVED_OPTIONS: [&str; 6] = [
    "quiet",
    "capture-output",
    "prover-step-limit",
    "standard-co",
    "proofs-co",
    "ld-error-action",
];

/// Top-level operators that modify the world; `query` warns about them.
const EVENT_OPERATORS: [&str; 4] = ["defconst", "defun", "defaults-set", "thm"];

/// The `(erp val)` outcome of a bridge call. `val` is nil whenever `erp` is
/// set.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QueryResult {
    erp: bool,
    val: SExpr,
}

impl QueryResult {
    pub fn success(val: SExpr) -> QueryResult {
        QueryResult { erp: false, val }
    }

    pub fn failure() -> QueryResult {
        QueryResult {
            erp: true,
            val: SExpr::nil(),
        }
    }

    pub fn erp(&self) -> bool {
        self.erp
    }

    pub fn val(&self) -> &SExpr {
        &self.val
    }

    pub fn into_val(self) -> SExpr {
        self.val
    }

    pub fn to_sexpr(&self) -> SExpr {
        SExpr::List(vec![SExpr::bool(self.erp), self.val.clone()])
    }
}

impl fmt::Display for QueryResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_sexpr())
    }
}

/// Realized output signature: one marker per returned value, `None` for an
/// ordinary object or the stobj name.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OutputSignature(Vec<Option<String>>);

impl OutputSignature {
    pub fn new(markers: Vec<Option<String>>) -> OutputSignature {
        assert!(!markers.is_empty(), "an output signature has at least one position");
        OutputSignature(markers)
    }

    pub fn of_values(vals: &[Value]) -> OutputSignature {
        OutputSignature::new(
            vals.iter()
                .map(|v| match v {
                    Value::Ordinary(_) => None,
                    Value::Stobj(name) => Some(name.clone()),
                })
                .collect(),
        )
    }

    /// `[nil, nil, state]`
    pub fn error_triple() -> OutputSignature {
        OutputSignature(vec![None, None, Some("state".into())])
    }

    pub fn markers(&self) -> &[Option<String>] {
        &self.0
    }

    pub fn is_error_triple(&self) -> bool {
        *self == OutputSignature::error_triple()
    }

    pub fn is_single_ordinary(&self) -> bool {
        self.0 == [None]
    }
}

impl fmt::Display for OutputSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = self.0.iter().map(|m| m.as_deref().unwrap_or("nil")).collect();
        write!(f, "({})", parts.join(" "))
    }
}

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("session is dead")]
    SessionDead,
    #[error("usage: {0}")]
    Usage(String),
    #[error("backend misbehaved: {0}")]
    Backend(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BridgeOptions {
    pub quiet: bool,
    pub capture_output: bool,
    /// `None` means the backend's `step-limit` default.
    pub prover_step_limit: Option<u64>,
    /// Further `ld` options, as a plist.
    pub extra_ld_options: Vec<SExpr>,
}

impl BridgeOptions {
    pub fn new() -> BridgeOptions {
        BridgeOptions::default()
    }

    pub fn quiet(mut self, on: bool) -> Self {
        self.quiet = on;
        self
    }

    pub fn capture_output(mut self, on: bool) -> Self {
        self.capture_output = on;
        self
    }

    pub fn step_limit(mut self, limit: u64) -> Self {
        self.prover_step_limit = Some(limit);
        self
    }

    pub fn extra_ld_options(mut self, plist: Vec<SExpr>) -> Self {
        self.extra_ld_options = plist;
        self
    }

    /// Reads `:quiet`, `:capture-output` and `:prover-step-limit` from a
    /// plist; every other non-reserved entry becomes an extra `ld` option.
    pub fn from_plist(plist: &[SExpr]) -> Result<BridgeOptions, BridgeError> {
        check_plist(plist)?;
        let mut opts = BridgeOptions::default();
        for pair in plist.chunks(2) {
            match pair[0].as_keyword() {
                Some("quiet") => opts.quiet = !pair[1].is_nil(),
                Some("capture-output") => opts.capture_output = !pair[1].is_nil(),
                Some("prover-step-limit") => {
                    opts.prover_step_limit = match &pair[1] {
                        v if v.is_nil() => None,
                        SExpr::Integer(n) => Some(n.to_u64().ok_or_else(|| {
                            BridgeError::Usage(format!(":prover-step-limit must be a nonnegative integer, got {n}"))
                        })?),
                        other => {
                            return Err(BridgeError::Usage(format!(
                                ":prover-step-limit must be a nonnegative integer, got {other}"
                            )))
                        }
                    }
                }
                _ => {}
            }
        }
        opts.extra_ld_options = strip_reserved_options(plist)?;
        Ok(opts)
    }
}

fn check_plist(plist: &[SExpr]) -> Result<(), BridgeError> {
    if !plist.len().is_multiple_of(2) {
        return Err(BridgeError::Usage(format!(
            "option list has an odd number of elements ({})",
            plist.len()
        )));
    }
    if let Some(bad) = plist.iter().step_by(2).find(|k| k.as_keyword().is_none()) {
        return Err(BridgeError::Usage(format!("option key {bad} is not a keyword")));
    }
    Ok(())
}

/// Removes every reserved key (and its value), keeping the survivors in
/// order.
pub fn strip_reserved_options(plist: &[SExpr]) -> Result<Vec<SExpr>, BridgeError> {
    check_plist(plist)?;
    Ok(plist
        .chunks(2)
        .filter(|pair| !RESERVED_OPTIONS.contains(&pair[0].as_keyword().unwrap_or_default()))
        .flatten()
        .cloned()
        .collect())
}

/// `(assign R form)`
pub fn wrap_compute_form(result_var: &SExpr, form: &SExpr) -> SExpr {
    SExpr::List(vec![SExpr::sym("assign"), result_var.clone(), form.clone()])
}

fn stash_triple(result_var: &SExpr, form: &SExpr) -> SExpr {
    SExpr::List(vec![
        SExpr::sym("mv-let"),
        SExpr::List(vec![SExpr::sym("erp"), SExpr::sym("val"), SExpr::sym("state")]),
        form.clone(),
        SExpr::List(vec![
            SExpr::sym("assign"),
            result_var.clone(),
            SExpr::List(vec![SExpr::sym("list"), SExpr::sym("erp"), SExpr::sym("val")]),
        ]),
    ])
}

fn with_step_limit(limit: u64, form: SExpr) -> SExpr {
    SExpr::List(vec![SExpr::sym("with-prover-step-limit"), SExpr::int(limit), form])
}

/// `(with-prover-step-limit L (mv-let (erp val state) form (assign R (list erp val))))`
pub fn wrap_query_form(result_var: &SExpr, form: &SExpr, limit: u64) -> SExpr {
    with_step_limit(limit, stash_triple(result_var, form))
}

/// `(with-prover-step-limit L form)`
pub fn wrap_event_form(form: &SExpr, limit: u64) -> SExpr {
    with_step_limit(limit, form.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CallKind {
    Compute,
    Query,
    Event,
}

fn suppress_all() -> Vec<SExpr> {
    let mut opts = Vec::new();
    for class in StreamClass::ALL {
        opts.push(SExpr::kw(class.keyword()));
        opts.push(SExpr::kw("suppress"));
    }
    opts.push(SExpr::kw("ld-error-action"));
    opts.push(SExpr::kw("error"));
    opts
}

/// A bridge session bound to one backend.
pub struct Session {
    link: Box<dyn Link>,
    output: OutputControl,
    hooks: HookRegistry,
    result_var: SExpr,
    dead: bool,
    warnings: Vec<String>,
}

impl fmt::Debug for Session {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Session")
            .field("output", &self.output)
            .field("hooks", &self.hooks)
            .field("dead", &self.dead)
            .finish_non_exhaustive()
    }
}

impl Session {
    pub fn new(link: Box<dyn Link>) -> Session {
        Session {
            link,
            output: OutputControl::default(),
            hooks: HookRegistry::default(),
            result_var: SExpr::pkg_sym("prover-bridge-internal", "command-result"),
            dead: false,
            warnings: Vec::new(),
        }
    }

    /// Spawns a stdio backend from an argv.
    pub fn spawn(argv: &[String], config: &TransportConfig) -> Result<Session, BridgeError> {
        Ok(Session::new(Box::new(Connection::spawn_stdio(argv, config)?)))
    }

    /// A session against a miniprover running on a thread of this process.
    pub fn in_process(config: &TransportConfig) -> Result<Session, BridgeError> {
        Ok(Session::new(Box::new(Connection::in_process(config)?)))
    }

    pub fn set_passthrough(&mut self, dest: Box<dyn Write + Send>) {
        self.output.set_passthrough(dest);
    }

    pub fn is_alive(&self) -> bool {
        !self.dead && self.link.is_alive()
    }

    pub fn result_var(&self) -> &SExpr {
        &self.result_var
    }

    pub fn compute(&mut self, form: &SExpr, opts: &BridgeOptions) -> Result<QueryResult, BridgeError> {
        self.call(CallKind::Compute, form, opts)
    }

    /// Evaluates a form that returns an error triple. Whether the world
    /// changes is not checked; top-level event operators only produce a
    /// warning.
    pub fn query(&mut self, form: &SExpr, opts: &BridgeOptions) -> Result<QueryResult, BridgeError> {
        let head = form.as_list().and_then(|l| l.first()).and_then(SExpr::symbol_name);
        if let Some(op) = head.filter(|op| EVENT_OPERATORS.contains(op)) {
            self.warn(format!("query called with the event operator {op}; the world may change"));
        }
        self.call(CallKind::Query, form, opts)
    }

    pub fn event(&mut self, form: &SExpr, opts: &BridgeOptions) -> Result<QueryResult, BridgeError> {
        self.call(CallKind::Event, form, opts)
    }

    fn call(&mut self, kind: CallKind, form: &SExpr, opts: &BridgeOptions) -> Result<QueryResult, BridgeError> {
        if !self.is_alive() {
            self.dead = true;
            return Err(BridgeError::SessionDead);
        }
        let extras = strip_reserved_options(&opts.extra_ld_options)?;
        let temp_quiet = opts.quiet && !self.output.quiet_mode();
        if temp_quiet {
            self.set_quiet_mode(true);
        }
        let result = self.run_call(kind, form, opts, extras);
        if temp_quiet {
            self.set_quiet_mode(false);
        }
        result
    }

    fn run_call(
        &mut self,
        kind: CallKind,
        form: &SExpr,
        opts: &BridgeOptions,
        extras: Vec<SExpr>,
    ) -> Result<QueryResult, BridgeError> {
        self.output.begin_call(opts.capture_output);
        let limit = match (kind, opts.prover_step_limit) {
            (CallKind::Compute, _) => 0,
            (_, Some(limit)) => limit,
            (_, None) => self.get_prover_step_limit()?,
        };
        let wrapped = match kind {
            CallKind::Compute => wrap_compute_form(&self.result_var, form),
            CallKind::Query => wrap_query_form(&self.result_var, form, limit),
            CallKind::Event => wrap_event_form(form, limit),
        };
        let mut options = extras;
        let mut quiet_everywhere = true;
        for class in StreamClass::ALL {
            let suppress = self.output.current_policy(class) == SinkPolicy::Discard;
            quiet_everywhere &= suppress;
            options.push(SExpr::kw(class.keyword()));
            options.push(SExpr::kw(if suppress { "suppress" } else { "emit" }));
        }
        options.push(SExpr::kw("ld-error-action"));
        options.push(SExpr::kw("error"));
        if quiet_everywhere {
            for flag in ["ld-pre-eval-print", "ld-post-eval-print", "ld-verbose"] {
                options.push(SExpr::kw(flag));
                options.push(SExpr::nil());
            }
        }

        let ld_ok = self.run_ld(wrapped, options, true)?;
        match kind {
            CallKind::Event => Ok(if ld_ok {
                QueryResult::success(SExpr::nil())
            } else {
                QueryResult::failure()
            }),
            _ if !ld_ok => Ok(QueryResult::failure()),
            CallKind::Compute => Ok(QueryResult::success(self.fetch_result()?)),
            CallKind::Query => {
                let stashed = self.fetch_result()?;
                match stashed.as_list() {
                    Some([erp, val]) if erp.is_nil() => Ok(QueryResult::success(val.clone())),
                    Some([_, _]) => Ok(QueryResult::failure()),
                    _ => Err(BridgeError::Backend(format!("malformed stashed result {stashed}"))),
                }
            }
        }
    }

    fn roundtrip(&mut self, request: Request, route: bool) -> Result<Reply, BridgeError> {
        let output = &mut self.output;
        let reply = self.link.roundtrip(request, &mut |class, text| {
            if route {
                output.route_output(class, text)
            }
        });
        reply.map_err(|e| {
            self.dead = true;
            BridgeError::from(e)
        })
    }

    /// True iff `ld` returned `:eof`.
    fn run_ld(&mut self, form: SExpr, options: Vec<SExpr>, route: bool) -> Result<bool, BridgeError> {
        match self.roundtrip(Request::ld(vec![form], options), route)? {
            Reply::Ret {
                status: RetStatus::Ok,
                payload,
            } => Ok(payload.as_keyword() == Some("eof")),
            Reply::Ret {
                status: RetStatus::Error,
                payload,
            } => {
                if payload.as_keyword() == Some("protocol") {
                    return Err(BridgeError::Backend("backend rejected the ld request".into()));
                }
                log::debug!("ld failed: {payload}");
                Ok(false)
            }
            other => Err(BridgeError::Backend(format!("unexpected reply to ld: {other:?}"))),
        }
    }

    fn fetch_result(&mut self) -> Result<SExpr, BridgeError> {
        match self.roundtrip(Request::get_global(self.result_var.clone()), false)? {
            Reply::Ret {
                status: RetStatus::Ok,
                payload,
            } => Ok(payload),
            other => Err(BridgeError::Backend(format!(
                "result variable unreadable after a successful ld: {other:?}"
            ))),
        }
    }

    /// Evaluates a single-valued form with all output suppressed and the
    /// capture buffer untouched. `None` if the form failed.
    fn internal_compute(&mut self, form: &SExpr) -> Result<Option<SExpr>, BridgeError> {
        let wrapped = wrap_compute_form(&self.result_var, form);
        if self.run_ld(wrapped, suppress_all(), false)? {
            self.fetch_result().map(Some)
        } else {
            Ok(None)
        }
    }

    /// Evaluates an error-triple form with all output suppressed. `false`
    /// if it failed.
    fn internal_query(&mut self, form: &SExpr) -> Result<bool, BridgeError> {
        let wrapped = stash_triple(&self.result_var, form);
        if !self.run_ld(wrapped, suppress_all(), false)? {
            return Ok(false);
        }
        let stashed = self.fetch_result()?;
        Ok(matches!(stashed.as_list(), Some([erp, _]) if erp.is_nil()))
    }

    /// The backend's `step-limit` default, or the built-in default if it is
    /// unset or not a nonnegative integer.
    pub fn get_prover_step_limit(&mut self) -> Result<u64, BridgeError> {
        let form = SExpr::List(vec![SExpr::sym("defaults-get"), SExpr::sym("step-limit")]);
        Ok(match self.internal_compute(&form)? {
            Some(SExpr::Integer(n)) => n.to_u64().unwrap_or(DEFAULT_STEP_LIMIT),
            _ => DEFAULT_STEP_LIMIT,
        })
    }

    pub fn quiet_mode(&self) -> bool {
        self.output.quiet_mode()
    }

    /// Switches quiet mode. When the state changes, the matching hooks run
    /// in registration order first. A failing hook form is recorded as a
    /// warning and the state flips regardless.
    pub fn set_quiet_mode(&mut self, on: bool) {
        if self.output.quiet_mode() == on {
            return;
        }
        for (name, hook) in self.hooks.hooks_for(on) {
            let forms = hook(&mut HookContext { session: self });
            for form in forms {
                match self.internal_query(&form) {
                    Ok(true) => {}
                    Ok(false) => self.warn(format!("quiet-mode hook {name}: {form} failed")),
                    Err(e) => self.warn(format!("quiet-mode hook {name}: {form}: {e}")),
                }
            }
        }
        self.output.set_quiet_flag(on);
    }

    /// Capture for every subsequent call, not just those that ask for it.
    pub fn set_capture_output(&mut self, on: bool) {
        self.output.set_capture_default(on);
    }

    /// Text captured during the last call; reading clears it.
    pub fn get_captured_output(&mut self) -> String {
        self.output.get_captured_output()
    }

    pub fn add_quiet_mode_on_hook(&mut self, name: &str, hook: QuietHook) {
        self.hooks.add_on_hook(name, hook);
    }

    pub fn add_quiet_mode_off_hook(&mut self, name: &str, hook: QuietHook) {
        self.hooks.add_off_hook(name, hook);
    }

    pub fn remove_hook(&mut self, name: &str) {
        self.hooks.remove(name);
    }

    pub fn hook_names(&self) -> Vec<&str> {
        self.hooks.names()
    }

    /// Warnings recorded since the last call to this method.
    pub fn take_warnings(&mut self) -> Vec<String> {
        std::mem::take(&mut self.warnings)
    }

    fn warn(&mut self, msg: String) {
        log::warn!("{msg}");
        self.warnings.push(msg);
    }
}

/// What a quiet-mode hook can see: read-only backend queries that print
/// nothing and leave the capture buffer alone.
pub struct HookContext<'a> {
    session: &'a mut Session,
}

impl HookContext<'_> {
    /// Value of a single-valued form, `None` if it failed.
    pub fn compute(&mut self, form: &SExpr) -> Result<Option<SExpr>, BridgeError> {
        self.session.internal_compute(form)
    }

    /// A defaults-table entry; nil if unset.
    pub fn defaults_get(&mut self, key: &str) -> Result<SExpr, BridgeError> {
        let form = SExpr::List(vec![SExpr::sym("defaults-get"), SExpr::sym(key)]);
        Ok(self.compute(&form)?.unwrap_or_else(SExpr::nil))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sexpr::read_sexpr;
    use std::sync::{Arc, Mutex};

    fn f(s: &str) -> SExpr {
        read_sexpr(s).unwrap()
    }

    #[derive(Clone, Default)]
    struct Sink(Arc<Mutex<Vec<u8>>>);

    impl Write for Sink {
        fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
            self.0.lock().unwrap().extend_from_slice(buf);
            Ok(buf.len())
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }

    impl Sink {
        fn take(&self) -> String {
            String::from_utf8(std::mem::take(&mut *self.0.lock().unwrap())).unwrap()
        }
    }

    fn session() -> (Session, Sink) {
        let mut s = Session::in_process(&TransportConfig::default()).unwrap();
        let sink = Sink::default();
        s.set_passthrough(Box::new(sink.clone()));
        (s, sink)
    }

    fn ok(v: &str) -> QueryResult {
        QueryResult::success(f(v))
    }

    #[test]
    fn strip_examples() {
        let strip = |s: &str| strip_reserved_options(f(s).as_list().unwrap()).unwrap();
        assert_eq!(strip("(:quiet t :ld-pre-eval-print t)"), f("(:ld-pre-eval-print t)").as_list().unwrap());
        assert!(strip("()").is_empty());
        assert!(strip("(:standard-co x :proofs-co y)").is_empty());
        assert!(matches!(
            strip_reserved_options(f("(:quiet)").as_list().unwrap()),
            Err(BridgeError::Usage(_))
        ));
        assert!(matches!(
            strip_reserved_options(f("(quiet t)").as_list().unwrap()),
            Err(BridgeError::Usage(_))
        ));
    }

    #[test]
    fn options_from_plist() {
        let o = BridgeOptions::from_plist(f("(:quiet t :a 1 :prover-step-limit 9 :capture-output nil)").as_list().unwrap())
            .unwrap();
        assert_eq!(
            o,
            BridgeOptions::new().quiet(true).step_limit(9).extra_ld_options(vec![SExpr::kw("a"), SExpr::int(1)])
        );
        assert!(BridgeOptions::from_plist(f("(:prover-step-limit -1)").as_list().unwrap()).is_err());
    }

    #[test]
    fn wrapping_forms() {
        let r = SExpr::sym("r");
        assert_eq!(wrap_compute_form(&r, &f("(+ 1 2)")), f("(assign r (+ 1 2))"));
        assert_eq!(
            wrap_query_form(&r, &f("q"), 7),
            f("(with-prover-step-limit 7 (mv-let (erp val state) q (assign r (list erp val))))")
        );
        assert_eq!(wrap_event_form(&f("e"), 3), f("(with-prover-step-limit 3 e)"));
    }

    #[test]
    fn compute_examples() {
        let (mut s, _) = session();
        let o = BridgeOptions::new();
        assert_eq!(s.compute(&f("(+ 1 2)"), &o).unwrap(), ok("3"));
        assert_eq!(s.compute(&f("(mv 1 2)"), &o).unwrap(), QueryResult::failure());
        assert_eq!(s.compute(&f("unbound-var"), &o).unwrap(), QueryResult::failure());
        assert_eq!(s.compute(&f("state"), &o).unwrap(), QueryResult::failure());
    }

    #[test]
    fn query_examples() {
        let (mut s, _) = session();
        let o = BridgeOptions::new();
        assert_eq!(s.query(&f("(mv nil 42 state)"), &o).unwrap(), ok("42"));
        assert_eq!(s.query(&f("(er soft 'top \"boom\")"), &o).unwrap(), QueryResult::failure());
        assert_eq!(s.query(&f("(+ 1 2)"), &o).unwrap(), QueryResult::failure());
        assert!(s.take_warnings().is_empty());
        s.query(&f("(defconst *q* 1)"), &o).unwrap();
        assert_eq!(s.take_warnings().len(), 1);
    }

    #[test]
    fn event_examples() {
        let (mut s, _) = session();
        let o = BridgeOptions::new();
        assert_eq!(s.event(&f("(defconst *k* 5)"), &o).unwrap(), ok("nil"));
        assert_eq!(s.compute(&f("*k*"), &o).unwrap(), ok("5"));
        assert_eq!(s.event(&f("(defconst *bad* (mv 1 2))"), &o).unwrap(), QueryResult::failure());
        assert_eq!(s.compute(&f("(world-fingerprint)"), &o).unwrap(), ok("((defconst *k* 5))"));
        assert_eq!(s.event(&f("(thm (< 1 2))"), &o.clone().step_limit(1)).unwrap(), QueryResult::failure());
        assert_eq!(s.event(&f("(+ 1 2)"), &o).unwrap(), QueryResult::failure());
    }

    #[test]
    fn step_limit_defaults() {
        let (mut s, _) = session();
        assert_eq!(s.get_prover_step_limit().unwrap(), DEFAULT_STEP_LIMIT);
        s.event(&f("(defaults-set step-limit 50)"), &BridgeOptions::new()).unwrap();
        assert_eq!(s.get_prover_step_limit().unwrap(), 50);
        let failed = s
            .event(
                &f("(mv-let (e v state) (defaults-set step-limit 7) (er soft 'x \"no\"))"),
                &BridgeOptions::new(),
            )
            .unwrap();
        assert!(failed.erp());
        assert_eq!(s.get_prover_step_limit().unwrap(), 50);
    }

    #[test]
    fn capture_and_passthrough() {
        let (mut s, sink) = session();
        let form = f("(prog2$ (cw \"hi~%\") (mv nil 1 state))");
        s.query(&form, &BridgeOptions::new().capture_output(true)).unwrap();
        assert_eq!(sink.take(), "hi\n");
        assert_eq!(s.get_captured_output(), "hi\n");
        assert_eq!(s.get_captured_output(), "");

        s.query(&form, &BridgeOptions::new().capture_output(true)).unwrap();
        s.query(&f("(mv nil 2 state)"), &BridgeOptions::new()).unwrap();
        assert_eq!(s.get_captured_output(), "");
        sink.take();

        s.query(&form, &BridgeOptions::new().quiet(true)).unwrap();
        assert_eq!(sink.take(), "");
        assert!(!s.quiet_mode());
    }

    #[test]
    fn hooks_run_once_per_change_in_order() {
        let (mut s, _) = session();
        let trace = Arc::new(Mutex::new(Vec::new()));
        for name in ["a", "b"] {
            let t = trace.clone();
            s.add_quiet_mode_on_hook(
                name,
                Arc::new(move |_: &mut HookContext<'_>| {
                    t.lock().unwrap().push(name);
                    Vec::new()
                }),
            );
        }
        s.set_quiet_mode(true);
        s.set_quiet_mode(true);
        assert_eq!(*trace.lock().unwrap(), ["a", "b"]);
        s.set_quiet_mode(false);
        s.set_quiet_mode(true);
        assert_eq!(*trace.lock().unwrap(), ["a", "b", "a", "b"]);
    }

    #[test]
    fn failing_hook_warns_and_still_flips() {
        let (mut s, _) = session();
        s.add_quiet_mode_on_hook("bad", Arc::new(|_: &mut HookContext<'_>| vec![f("(no-such-op)")]));
        s.set_quiet_mode(true);
        assert!(s.quiet_mode());
        assert_eq!(s.take_warnings().len(), 1);
    }

    #[test]
    fn verbosity_hooks_save_and_restore() {
        let (mut s, _) = session();
        let saved = Arc::new(Mutex::new(SExpr::nil()));
        let on_saved = saved.clone();
        s.add_quiet_mode_on_hook(
            "verbosity",
            Arc::new(move |ctx: &mut HookContext<'_>| {
                *on_saved.lock().unwrap() = ctx.defaults_get("verbosity-level").unwrap();
                vec![f("(defaults-set verbosity-level 0)")]
            }),
        );
        let off_saved = saved.clone();
        s.add_quiet_mode_off_hook(
            "verbosity",
            Arc::new(move |_: &mut HookContext<'_>| {
                let v = off_saved.lock().unwrap().clone();
                vec![SExpr::List(vec![SExpr::sym("defaults-set"), SExpr::sym("verbosity-level"), v])]
            }),
        );
        let read = |s: &mut Session| s.compute(&f("(defaults-get verbosity-level)"), &BridgeOptions::new()).unwrap();
        s.event(&f("(defaults-set verbosity-level 7)"), &BridgeOptions::new()).unwrap();
        assert_eq!(read(&mut s), ok("7"));
        s.set_quiet_mode(true);
        assert_eq!(read(&mut s), ok("0"));
        s.set_quiet_mode(false);
        assert_eq!(read(&mut s), ok("7"));
        assert!(s.take_warnings().is_empty());
    }

    #[test]
    fn globals_survive_failed_events() {
        let (mut s, _) = session();
        let o = BridgeOptions::new();
        let r = s
            .event(&f("(mv-let (e v state) (assign keep 11) (er soft 'x \"fail\"))"), &o)
            .unwrap();
        assert!(r.erp());
        assert_eq!(s.compute(&f("(@ keep)"), &o).unwrap(), ok("11"));
    }
}
