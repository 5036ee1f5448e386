//! A miniature REPL-style prover backend.
//!
//! The miniprover implements just enough of an ACL2-like top level to make
//! the bridge contract observable: a small term evaluator with multiple
//! values and a single stobj (`state`), error triples, soft and hard errors,
//! an append-only event world that is reverted when an `ld` fails, a table
//! of state globals that is never reverted, per-stream output with
//! suppression directives, and step-limited evaluation.
//!
//! It is not a theorem prover. `thm` evaluates its (closed) body and
//! succeeds iff the result is non-nil.
//!
//! Run it as a subprocess with `prover-bridge miniprover`; it then speaks
//! the frame protocol of [`crate::transport`] on stdin/stdout.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, BufRead, Write};
use std::sync::Arc;
use std::time::Duration;

use num_bigint::BigInt;
use num_traits::{ToPrimitive, Zero};

use crate::bridge::OutputSignature;
use crate::output::StreamClass;
use crate::sexpr::{print_sexpr, SExpr};
use crate::transport::{Frame, RetStatus};

/// Built-in `step-limit` entry of a fresh defaults table.
pub const DEFAULT_STEP_LIMIT: u64 = 100_000;
/// Built-in `verbosity-level` entry of a fresh defaults table.
pub const DEFAULT_VERBOSITY: i64 = 1;
/// Maximum nesting of user-defined function calls.
pub const MAX_CALL_DEPTH: usize = 10_000;

const EVENT_OPS: [&str; 4] = ["defconst", "defun", "defaults-set", "thm"];

const BUILTINS: &[&str] = &[
    "quote",
    "if",
    "mv",
    "mv-let",
    "prog2$",
    "with-prover-step-limit",
    "@",
    "boundp-global",
    "assign",
    "er",
    "cw",
    "fms",
    "list",
    "+",
    "-",
    "*",
    "<",
    "equal",
    "not",
    "defaults-get",
    "defconst",
    "defun",
    "defaults-set",
    "thm",
    "world-fingerprint",
    "backend-pid",
    "sleep-ms",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Value {
    Ordinary(SExpr),
    /// A single-threaded object; only `state` exists.
    Stobj(String),
}

impl Value {
    pub fn state() -> Value {
        Value::Stobj("state".into())
    }

    pub fn is_stobj(&self) -> bool {
        matches!(self, Value::Stobj(_))
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Ordinary(e) => write!(f, "{e}"),
            Value::Stobj(name) => write!(f, "<{name}>"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvalOutcome {
    /// One or more values; more than one is a multiple value.
    Values(Vec<Value>),
    /// An error triple whose first component is non-nil.
    SoftError { ctx: SExpr, msg: String },
    HardError(String),
    StepLimitExceeded,
}

impl EvalOutcome {
    /// Realized output signature, for outcomes that produced values.
    pub fn signature(&self) -> Option<OutputSignature> {
        match self {
            EvalOutcome::Values(vals) => Some(OutputSignature::of_values(vals)),
            EvalOutcome::SoftError { .. } => Some(OutputSignature::error_triple()),
            _ => None,
        }
    }

    /// True for an error triple `(nil v state)`.
    pub fn is_successful_triple(&self) -> bool {
        match self {
            EvalOutcome::Values(vals) => {
                OutputSignature::of_values(vals).is_error_triple()
                    && matches!(&vals[0], Value::Ordinary(e) if e.is_nil())
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Defconst,
    Defun,
    Table,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub kind: EventKind,
    pub name: SExpr,
    /// The event as recorded, with evaluated values substituted.
    pub definition: SExpr,
}

#[derive(Debug)]
struct FunctionDef {
    params: Vec<SExpr>,
    body: SExpr,
}

/// The revertible event store plus the defaults table.
#[derive(Debug, Clone)]
pub struct World {
    events: Vec<Event>,
    constants: BTreeMap<SExpr, SExpr>,
    functions: BTreeMap<SExpr, Arc<FunctionDef>>,
    defaults: BTreeMap<String, SExpr>,
}

/// A point the world can be reverted to.
#[derive(Debug, Clone)]
pub struct WorldSnapshot {
    event_count: usize,
    defaults: BTreeMap<String, SExpr>,
}

impl Default for World {
    fn default() -> Self {
        let mut defaults = BTreeMap::new();
        defaults.insert("step-limit".to_string(), SExpr::int(DEFAULT_STEP_LIMIT));
        defaults.insert("verbosity-level".to_string(), SExpr::int(DEFAULT_VERBOSITY));
        World {
            events: Vec::new(),
            constants: BTreeMap::new(),
            functions: BTreeMap::new(),
            defaults,
        }
    }
}

impl World {
    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn defaults_get(&self, key: &str) -> Option<&SExpr> {
        self.defaults.get(key)
    }

    /// Ordered list of recorded event definitions.
    pub fn fingerprint(&self) -> SExpr {
        SExpr::list(self.events.iter().map(|e| e.definition.clone()).collect())
    }

    pub fn is_defined(&self, name: &SExpr) -> bool {
        self.constants.contains_key(name) || self.functions.contains_key(name)
    }

    pub fn snapshot(&self) -> WorldSnapshot {
        WorldSnapshot {
            event_count: self.events.len(),
            defaults: self.defaults.clone(),
        }
    }

    pub fn revert(&mut self, snap: &WorldSnapshot) {
        for ev in self.events.drain(snap.event_count..) {
            match ev.kind {
                EventKind::Defconst => {
                    self.constants.remove(&ev.name);
                }
                EventKind::Defun => {
                    self.functions.remove(&ev.name);
                }
                EventKind::Table => {}
            }
        }
        self.defaults = snap.defaults.clone();
    }

    fn push(&mut self, ev: Event) {
        self.events.push(ev);
    }
}

/// State globals. Never reverted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GlobalsTable {
    map: BTreeMap<SExpr, SExpr>,
}

impl GlobalsTable {
    pub fn get(&self, name: &SExpr) -> Option<&SExpr> {
        self.map.get(name)
    }

    pub fn insert(&mut self, name: SExpr, value: SExpr) {
        self.map.insert(name, value);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

enum Abort {
    Hard(String),
    StepLimit,
}

type Vals = Vec<Value>;
type Env = Vec<(SExpr, Value)>;

fn hard<T>(msg: impl Into<String>) -> Result<T, Abort> {
    Err(Abort::Hard(msg.into()))
}

fn ord(e: SExpr) -> Value {
    Value::Ordinary(e)
}

fn triple(erp: bool, val: SExpr) -> Vals {
    vec![ord(SExpr::bool(erp)), ord(val), Value::state()]
}

fn is_builtin(name: &str) -> bool {
    BUILTINS.contains(&name)
}

struct Evaluator<'a> {
    world: &'a mut World,
    globals: &'a mut GlobalsTable,
    out: &'a mut dyn FnMut(StreamClass, &str),
    emit: [bool; 3],
    remaining: Option<u64>,
    steps: u64,
    depth: usize,
    last_soft: Option<(SExpr, String)>,
}

impl Evaluator<'_> {
    fn print(&mut self, class: StreamClass, text: &str) {
        if self.emit[class.index()] && !text.is_empty() {
            (self.out)(class, text);
        }
    }

    fn step(&mut self) -> Result<(), Abort> {
        if let Some(left) = self.remaining {
            if left == 0 {
                return Err(Abort::StepLimit);
            }
            self.remaining = Some(left - 1);
        }
        self.steps += 1;
        Ok(())
    }

    fn eval(&mut self, e: &SExpr, env: &mut Env) -> Result<Vals, Abort> {
        stacker::maybe_grow(64 * 1024, 4 * 1024 * 1024, || self.eval_inner(e, env))
    }

    fn eval_single(&mut self, e: &SExpr, env: &mut Env) -> Result<Value, Abort> {
        let mut vals = self.eval(e, env)?;
        if vals.len() != 1 {
            return hard(format!("expected a single value from {e}, got {} values", vals.len()));
        }
        Ok(vals.pop().unwrap())
    }

    fn eval_ordinary(&mut self, e: &SExpr, env: &mut Env) -> Result<SExpr, Abort> {
        match self.eval_single(e, env)? {
            Value::Ordinary(v) => Ok(v),
            Value::Stobj(name) => hard(format!("stobj {name} appears where an ordinary object is expected in {e}")),
        }
    }

    fn eval_integer(&mut self, e: &SExpr, env: &mut Env, op: &str) -> Result<BigInt, Abort> {
        match self.eval_ordinary(e, env)? {
            SExpr::Integer(n) => Ok(n),
            other => hard(format!("guard violation: {op} expects integers, got {other}")),
        }
    }

    fn eval_inner(&mut self, e: &SExpr, env: &mut Env) -> Result<Vals, Abort> {
        self.step()?;
        match e {
            SExpr::Integer(_) | SExpr::Text(_) | SExpr::Keyword(_) => Ok(vec![ord(e.clone())]),
            SExpr::Symbol { name, .. } => match name.as_str() {
                "t" => Ok(vec![ord(SExpr::t())]),
                "nil" => Ok(vec![ord(SExpr::nil())]),
                _ => self.lookup(e, env),
            },
            SExpr::List(items) if items.is_empty() => Ok(vec![ord(SExpr::nil())]),
            SExpr::List(items) => match &items[0] {
                head @ SExpr::Symbol { name, .. } => self.apply(name, head, &items[1..], env),
                other => hard(format!("illegal function call: {other} is not a symbol")),
            },
        }
    }

    fn lookup(&mut self, sym: &SExpr, env: &Env) -> Result<Vals, Abort> {
        if let Some((_, v)) = env.iter().rev().find(|(k, _)| k == sym) {
            return Ok(vec![v.clone()]);
        }
        if sym.is_sym_named("state") {
            return Ok(vec![Value::state()]);
        }
        if let Some(v) = self.world.constants.get(sym) {
            return Ok(vec![ord(v.clone())]);
        }
        hard(format!("unbound variable {sym}"))
    }

    fn arity(op: &str, args: &[SExpr], n: usize) -> Result<(), Abort> {
        if args.len() != n {
            return hard(format!("{op} takes {n} argument(s), got {}", args.len()));
        }
        Ok(())
    }

    fn apply(&mut self, name: &str, head: &SExpr, args: &[SExpr], env: &mut Env) -> Result<Vals, Abort> {
        match name {
            "quote" => {
                Self::arity(name, args, 1)?;
                Ok(vec![ord(args[0].clone())])
            }
            "if" => {
                Self::arity(name, args, 3)?;
                let test = self.eval_ordinary(&args[0], env)?;
                let branch = if test.is_nil() { &args[2] } else { &args[1] };
                self.eval(branch, env)
            }
            "mv" => {
                if args.len() < 2 {
                    return hard("mv needs at least two arguments");
                }
                args.iter().map(|a| self.eval_single(a, env)).collect()
            }
            "mv-let" => self.mv_let(args, env),
            "prog2$" => {
                Self::arity(name, args, 2)?;
                self.eval(&args[0], env)?;
                self.eval(&args[1], env)
            }
            "with-prover-step-limit" => {
                Self::arity(name, args, 2)?;
                let limit = self.eval_integer(&args[0], env, name)?;
                if limit < BigInt::zero() {
                    return hard("step limit must be nonnegative");
                }
                let limit = limit.to_u64().unwrap_or(u64::MAX);
                let outer = self.remaining;
                self.remaining = Some(outer.map_or(limit, |o| o.min(limit)));
                let before = self.steps;
                let result = self.eval(&args[1], env);
                let used = self.steps - before;
                self.remaining = outer.map(|o| o.saturating_sub(used));
                result
            }
            "@" => {
                Self::arity(name, args, 1)?;
                let key = global_name(&args[0])?;
                match self.globals.get(&key) {
                    Some(v) => Ok(vec![ord(v.clone())]),
                    None => hard(format!("unbound state global {key}")),
                }
            }
            "boundp-global" => {
                Self::arity(name, args, 2)?;
                let key = global_name(&args[0])?;
                if !self.eval_single(&args[1], env)?.is_stobj() {
                    return hard("boundp-global expects state as its second argument");
                }
                Ok(vec![ord(SExpr::bool(self.globals.get(&key).is_some()))])
            }
            "assign" => {
                Self::arity(name, args, 2)?;
                let key = match &args[0] {
                    s @ SExpr::Symbol { .. } => s.clone(),
                    other => return hard(format!("assign expects a symbol, got {other}")),
                };
                let v = match self.eval_single(&args[1], env)? {
                    Value::Ordinary(v) => v,
                    Value::Stobj(s) => return hard(format!("cannot assign the stobj {s} to {key}")),
                };
                self.globals.insert(key, v.clone());
                Ok(triple(false, v))
            }
            "er" => self.er(args, env),
            "cw" | "fms" => {
                if args.is_empty() {
                    return hard(format!("{name} needs a format string"));
                }
                let text = self.format_call(args, env)?;
                let class = if name == "cw" {
                    StreamClass::CommentWindow
                } else {
                    StreamClass::StandardCo
                };
                self.print(class, &text);
                Ok(vec![ord(SExpr::nil())])
            }
            "list" => {
                let items = args
                    .iter()
                    .map(|a| self.eval_ordinary(a, env))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(vec![ord(SExpr::list(items))])
            }
            "+" | "*" => {
                let mut acc = if name == "+" { BigInt::from(0) } else { BigInt::from(1) };
                for a in args {
                    let n = self.eval_integer(a, env, name)?;
                    if name == "+" {
                        acc += n;
                    } else {
                        acc *= n;
                    }
                }
                Ok(vec![ord(SExpr::Integer(acc))])
            }
            "-" => match args {
                [a] => Ok(vec![ord(SExpr::Integer(-self.eval_integer(a, env, name)?))]),
                [a, b] => {
                    let a = self.eval_integer(a, env, name)?;
                    let b = self.eval_integer(b, env, name)?;
                    Ok(vec![ord(SExpr::Integer(a - b))])
                }
                _ => hard("- takes one or two arguments"),
            },
            "<" => {
                Self::arity(name, args, 2)?;
                let a = self.eval_integer(&args[0], env, name)?;
                let b = self.eval_integer(&args[1], env, name)?;
                Ok(vec![ord(SExpr::bool(a < b))])
            }
            "equal" => {
                Self::arity(name, args, 2)?;
                let a = self.eval_ordinary(&args[0], env)?;
                let b = self.eval_ordinary(&args[1], env)?;
                Ok(vec![ord(SExpr::bool(a == b))])
            }
            "not" => {
                Self::arity(name, args, 1)?;
                let a = self.eval_ordinary(&args[0], env)?;
                Ok(vec![ord(SExpr::bool(a.is_nil()))])
            }
            "defaults-get" => {
                Self::arity(name, args, 1)?;
                let key = defaults_key(&args[0])?;
                Ok(vec![ord(self.world.defaults_get(&key).cloned().unwrap_or_else(SExpr::nil))])
            }
            "defconst" => self.defconst(args, env),
            "defun" => self.defun(args),
            "defaults-set" => self.defaults_set(args, env),
            "thm" => self.thm(args, env),
            "world-fingerprint" => {
                Self::arity(name, args, 0)?;
                Ok(vec![ord(self.world.fingerprint())])
            }
            "backend-pid" => {
                Self::arity(name, args, 0)?;
                Ok(vec![ord(SExpr::int(std::process::id()))])
            }
            "sleep-ms" => {
                Self::arity(name, args, 1)?;
                let ms = self.eval_integer(&args[0], env, name)?;
                std::thread::sleep(Duration::from_millis(ms.to_u64().unwrap_or(0)));
                Ok(vec![ord(SExpr::nil())])
            }
            _ => self.call_user(head, args, env),
        }
    }

    fn mv_let(&mut self, args: &[SExpr], env: &mut Env) -> Result<Vals, Abort> {
        Self::arity("mv-let", args, 3)?;
        let vars = match args[0].as_list() {
            Some(vars) if vars.len() >= 2 && vars.iter().all(is_variable) => vars,
            _ => return hard(format!("mv-let expects a list of at least two variables, got {}", args[0])),
        };
        let vals = self.eval(&args[1], env)?;
        if vals.len() != vars.len() {
            return hard(format!(
                "mv-let expected {} values from {}, got {}",
                vars.len(),
                args[1],
                vals.len()
            ));
        }
        let base = env.len();
        for (var, val) in vars.iter().zip(vals) {
            check_binding(var, &val)?;
            env.push((var.clone(), val));
        }
        let result = self.eval(&args[2], env);
        env.truncate(base);
        result
    }

    fn format_call(&mut self, args: &[SExpr], env: &mut Env) -> Result<String, Abort> {
        let fmt = match self.eval_ordinary(&args[0], env)? {
            SExpr::Text(s) => s,
            other => return hard(format!("format string expected, got {other}")),
        };
        let vals = args[1..]
            .iter()
            .map(|a| self.eval_ordinary(a, env))
            .collect::<Result<Vec<_>, _>>()?;
        format_message(&fmt, &vals)
    }

    fn soft_error(&mut self, ctx: SExpr, msg: String) -> Vals {
        self.print(StreamClass::StandardCo, &format!("ACL2 Error in {ctx}: {msg}\n"));
        self.last_soft = Some((ctx, msg));
        triple(true, SExpr::nil())
    }

    fn er(&mut self, args: &[SExpr], env: &mut Env) -> Result<Vals, Abort> {
        if args.len() < 3 {
            return hard("er takes a severity, a context and a format string");
        }
        let soft = match args[0].symbol_name() {
            Some("soft") => true,
            Some("hard") => false,
            _ => return hard(format!("unknown er severity {}", args[0])),
        };
        let ctx = self.eval_ordinary(&args[1], env)?;
        let msg = self.format_call(&args[2..], env)?;
        if soft {
            Ok(self.soft_error(ctx, msg))
        } else {
            hard(format!("{ctx}: {msg}"))
        }
    }

    fn defconst(&mut self, args: &[SExpr], env: &mut Env) -> Result<Vals, Abort> {
        Self::arity("defconst", args, 2)?;
        let name = event_name(&args[0])?;
        let ctx = SExpr::List(vec![SExpr::sym("defconst"), name.clone()]);
        if self.world.is_defined(&name) || is_builtin(name.symbol_name().unwrap_or_default()) {
            return Ok(self.soft_error(ctx, format!("{name} is already defined")));
        }
        let value = match self.eval_single(&args[1], env)? {
            Value::Ordinary(v) => v,
            Value::Stobj(s) => return hard(format!("defconst body returned the stobj {s}")),
        };
        self.world.constants.insert(name.clone(), value.clone());
        self.world.push(Event {
            kind: EventKind::Defconst,
            name: name.clone(),
            definition: SExpr::List(vec![SExpr::sym("defconst"), name.clone(), value]),
        });
        Ok(triple(false, name))
    }

    fn defun(&mut self, args: &[SExpr]) -> Result<Vals, Abort> {
        Self::arity("defun", args, 3)?;
        let name = event_name(&args[0])?;
        let params = match args[1].as_list() {
            Some(ps) if ps.iter().all(is_variable) => ps.to_vec(),
            _ => return hard(format!("defun parameters must be a list of variables, got {}", args[1])),
        };
        for (i, p) in params.iter().enumerate() {
            if params[..i].contains(p) {
                return hard(format!("duplicate parameter {p}"));
            }
        }
        let ctx = SExpr::List(vec![SExpr::sym("defun"), name.clone()]);
        if self.world.is_defined(&name) || is_builtin(name.symbol_name().unwrap_or_default()) {
            return Ok(self.soft_error(ctx, format!("{name} is already defined")));
        }
        let body = args[2].clone();
        self.world.functions.insert(
            name.clone(),
            Arc::new(FunctionDef {
                params: params.clone(),
                body: body.clone(),
            }),
        );
        self.world.push(Event {
            kind: EventKind::Defun,
            name: name.clone(),
            definition: SExpr::List(vec![SExpr::sym("defun"), name.clone(), SExpr::list(params), body]),
        });
        Ok(triple(false, name))
    }

    fn defaults_set(&mut self, args: &[SExpr], env: &mut Env) -> Result<Vals, Abort> {
        Self::arity("defaults-set", args, 2)?;
        let key = defaults_key(&args[0])?;
        let value = self.eval_ordinary(&args[1], env)?;
        if matches!(key.as_str(), "step-limit" | "verbosity-level")
            && !matches!(&value, SExpr::Integer(n) if *n >= BigInt::zero())
        {
            let ctx = SExpr::List(vec![SExpr::sym("defaults-set"), SExpr::sym(key.as_str())]);
            return Ok(self.soft_error(ctx, format!("{key} must be a nonnegative integer, got {value}")));
        }
        self.world.defaults.insert(key.clone(), value.clone());
        self.world.push(Event {
            kind: EventKind::Table,
            name: SExpr::kw(key.as_str()),
            definition: SExpr::List(vec![
                SExpr::sym("defaults-set"),
                SExpr::sym(key.as_str()),
                value.clone(),
            ]),
        });
        Ok(triple(false, value))
    }

    fn thm(&mut self, args: &[SExpr], env: &mut Env) -> Result<Vals, Abort> {
        Self::arity("thm", args, 1)?;
        let verbose = matches!(
            self.world.defaults_get("verbosity-level"),
            Some(SExpr::Integer(n)) if *n > BigInt::zero()
        );
        if verbose {
            self.print(StreamClass::ProofsCo, &format!("Proof attempt for {}\n", args[0]));
        }
        let holds = !self.eval_ordinary(&args[0], env)?.is_nil();
        if holds {
            if verbose {
                self.print(StreamClass::ProofsCo, "Q.E.D.\n");
            }
            Ok(triple(false, SExpr::kw("proved")))
        } else {
            if verbose {
                self.print(StreamClass::ProofsCo, "Proof failed.\n");
            }
            let ctx = SExpr::List(vec![SExpr::sym("thm"), args[0].clone()]);
            Ok(self.soft_error(ctx, "the conjecture evaluated to nil".into()))
        }
    }

    fn call_user(&mut self, head: &SExpr, args: &[SExpr], env: &mut Env) -> Result<Vals, Abort> {
        let def = match self.world.functions.get(head) {
            Some(def) => Arc::clone(def),
            None => return hard(format!("undefined function {head}")),
        };
        if def.params.len() != args.len() {
            return hard(format!(
                "{head} takes {} argument(s), got {}",
                def.params.len(),
                args.len()
            ));
        }
        let mut frame = Env::with_capacity(args.len());
        for (param, arg) in def.params.iter().zip(args) {
            let val = self.eval_single(arg, env)?;
            check_binding(param, &val)?;
            frame.push((param.clone(), val));
        }
        if self.depth >= MAX_CALL_DEPTH {
            return hard(format!("call depth limit {MAX_CALL_DEPTH} exceeded in {head}"));
        }
        self.depth += 1;
        let result = self.eval(&def.body, &mut frame);
        self.depth -= 1;
        result
    }
}

fn is_variable(e: &SExpr) -> bool {
    matches!(e.symbol_name(), Some(n) if n != "t" && n != "nil")
}

/// `state` must bind the stobj and nothing else may.
fn check_binding(var: &SExpr, val: &Value) -> Result<(), Abort> {
    match (var.is_sym_named("state"), val) {
        (true, Value::Stobj(_)) | (false, Value::Ordinary(_)) => Ok(()),
        (true, Value::Ordinary(v)) => hard(format!("the ordinary object {v} appears where the stobj state is expected")),
        (false, Value::Stobj(s)) => hard(format!("the stobj {s} is bound to the ordinary variable {var}")),
    }
}

fn event_name(e: &SExpr) -> Result<SExpr, Abort> {
    if is_variable(e) {
        Ok(e.clone())
    } else {
        hard(format!("an event name must be a symbol, got {e}"))
    }
}

/// A global name is written bare or quoted.
fn global_name(e: &SExpr) -> Result<SExpr, Abort> {
    match e {
        SExpr::Symbol { .. } => Ok(e.clone()),
        SExpr::List(items) if items.len() == 2 && items[0].is_sym_named("quote") => match &items[1] {
            s @ SExpr::Symbol { .. } => Ok(s.clone()),
            _ => hard(format!("a state global name must be a symbol, got {e}")),
        },
        _ => hard(format!("a state global name must be a symbol, got {e}")),
    }
}

fn defaults_key(e: &SExpr) -> Result<String, Abort> {
    match e {
        SExpr::Keyword(k) => Ok(k.clone()),
        _ => global_name(e).map(|s| s.symbol_name().unwrap_or_default().to_string()),
    }
}

/// Expands `~x` / `~xN` (print an argument), `~%` (newline) and `~~`.
fn format_message(fmt: &str, args: &[SExpr]) -> Result<String, Abort> {
    let mut out = String::new();
    let mut next_arg = 0;
    let mut chars = fmt.chars().peekable();
    while let Some(c) = chars.next() {
        if c != '~' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('%') => out.push('\n'),
            Some('~') => out.push('~'),
            Some('x') => {
                let idx = match chars.peek().and_then(|d| d.to_digit(10)) {
                    Some(d) => {
                        chars.next();
                        d as usize
                    }
                    None => {
                        next_arg += 1;
                        next_arg - 1
                    }
                };
                match args.get(idx) {
                    Some(a) => out.push_str(&print_sexpr(a)),
                    None => return hard(format!("format directive ~x{idx} has no argument")),
                }
            }
            Some(other) => return hard(format!("unsupported format directive ~{other}")),
            None => return hard("format string ends with ~"),
        }
    }
    Ok(out)
}

/// Where an `ld` stopped, if it did.
fn failure_reason(outcome: &EvalOutcome) -> Option<(&'static str, String)> {
    match outcome {
        o if o.is_successful_triple() => None,
        EvalOutcome::Values(vals) => Some((
            "not-error-triple",
            format!(
                "ACL2 Error: expected an error triple, got {}\n",
                OutputSignature::of_values(vals)
            ),
        )),
        // already printed by `er soft`
        EvalOutcome::SoftError { .. } => Some(("soft-error", String::new())),
        EvalOutcome::HardError(reason) => Some(("hard-error", format!("HARD ACL2 ERROR: {reason}\n"))),
        EvalOutcome::StepLimitExceeded => Some(("step-limit", "ACL2 Error: the step limit has been exceeded\n".into())),
    }
}

/// Per-class emit flags from an `ld` option plist.
fn channel_directives(options: &[SExpr]) -> Result<[bool; 3], String> {
    if !options.len().is_multiple_of(2) {
        return Err("odd-length option plist".into());
    }
    let mut emit = [true; 3];
    for pair in options.chunks(2) {
        let key = pair[0]
            .as_keyword()
            .ok_or_else(|| format!("option key {} is not a keyword", pair[0]))?;
        if let Some(class) = StreamClass::from_keyword(key) {
            emit[class.index()] = match pair[1].as_keyword() {
                Some("emit") => true,
                Some("suppress") => false,
                _ => return Err(format!("bad directive {} for :{key}", pair[1])),
            };
        } else if key == "ld-error-action" && pair[1].as_keyword() != Some("error") {
            log::debug!("ignoring :ld-error-action {}; only :error is supported", pair[1]);
        }
    }
    Ok(emit)
}

/// Miniprover state: world, globals and the step count of the last
/// evaluation.
#[derive(Debug, Default)]
pub struct Machine {
    world: World,
    globals: GlobalsTable,
    last_steps: u64,
}

impl Machine {
    pub fn new() -> Machine {
        Machine::default()
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn globals(&self) -> &GlobalsTable {
        &self.globals
    }

    /// Evaluator steps used by the most recent evaluation.
    pub fn last_steps(&self) -> u64 {
        self.last_steps
    }

    fn run(
        &mut self,
        form: &SExpr,
        budget: Option<u64>,
        emit: [bool; 3],
        out: &mut dyn FnMut(StreamClass, &str),
    ) -> EvalOutcome {
        let mut ev = Evaluator {
            world: &mut self.world,
            globals: &mut self.globals,
            out,
            emit,
            remaining: budget,
            steps: 0,
            depth: 0,
            last_soft: None,
        };
        let result = ev.eval(form, &mut Vec::new());
        self.last_steps = ev.steps;
        let last_soft = ev.last_soft.take();
        match result {
            Ok(vals) => {
                let sig = OutputSignature::of_values(&vals);
                let failed_triple = sig.is_error_triple()
                    && matches!(&vals[0], Value::Ordinary(e) if !e.is_nil());
                if failed_triple {
                    let (ctx, msg) = last_soft.unwrap_or((SExpr::nil(), String::new()));
                    EvalOutcome::SoftError { ctx, msg }
                } else {
                    EvalOutcome::Values(vals)
                }
            }
            Err(Abort::Hard(reason)) => EvalOutcome::HardError(reason),
            Err(Abort::StepLimit) => EvalOutcome::StepLimitExceeded,
        }
    }

    /// Evaluates `form` with a step budget (`None` for unlimited). Events
    /// inside `form` modify the world and are not reverted here.
    pub fn eval_form(
        &mut self,
        form: &SExpr,
        budget: Option<u64>,
        out: &mut dyn FnMut(StreamClass, &str),
    ) -> EvalOutcome {
        self.run(form, budget, [true; 3], out)
    }

    /// Runs a single event form, reverting the world if it fails.
    pub fn apply_event(&mut self, form: &SExpr, out: &mut dyn FnMut(StreamClass, &str)) -> EvalOutcome {
        let is_event = form
            .as_list()
            .and_then(|items| items.first())
            .and_then(SExpr::symbol_name)
            .is_some_and(|op| EVENT_OPS.contains(&op));
        if !is_event {
            return EvalOutcome::HardError(format!("not an event form: {form}"));
        }
        let snap = self.world.snapshot();
        let outcome = self.eval_form(form, None, out);
        if !outcome.is_successful_triple() {
            self.world.revert(&snap);
        }
        outcome
    }

    /// The `ld` loop: every form must return an error triple with a nil
    /// error flag. The first form that does not stops the loop, the world
    /// reverts to its state before the call, and the status is `:error`
    /// with a reason keyword. Globals are never reverted.
    pub fn run_ld(
        &mut self,
        forms: &[SExpr],
        options: &[SExpr],
        out: &mut dyn FnMut(StreamClass, &str),
    ) -> (RetStatus, SExpr) {
        let emit = match channel_directives(options) {
            Ok(emit) => emit,
            Err(msg) => {
                log::warn!("ld: {msg}");
                return (RetStatus::Error, SExpr::kw("bad-options"));
            }
        };
        let snap = self.world.snapshot();
        for form in forms {
            let outcome = self.run(form, None, emit, out);
            if let Some((reason, message)) = failure_reason(&outcome) {
                if !message.is_empty() && emit[StreamClass::StandardCo.index()] {
                    out(StreamClass::StandardCo, &message);
                }
                self.world.revert(&snap);
                return (RetStatus::Error, SExpr::kw(reason));
            }
        }
        (RetStatus::Ok, SExpr::kw("eof"))
    }

    /// Answers one request frame through `send`.
    pub fn handle_frame(&mut self, frame: Frame, send: &mut dyn FnMut(Frame)) {
        let protocol_error = |id| Frame::Ret {
            id,
            status: RetStatus::Error,
            payload: SExpr::kw("protocol"),
        };
        match frame {
            Frame::Ping { id } => send(Frame::Pong { id }),
            Frame::Ld {
                id,
                forms,
                options,
                session: None,
            } => {
                let (status, payload) = self.run_ld(&forms, &options, &mut |class, text| {
                    send(Frame::Out {
                        id,
                        class,
                        text: text.to_string(),
                    })
                });
                send(Frame::Ret { id, status, payload });
            }
            Frame::GetGlobal {
                id,
                symbol,
                session: None,
            } => send(match self.globals.get(&symbol) {
                Some(v) => Frame::Ret {
                    id,
                    status: RetStatus::Ok,
                    payload: v.clone(),
                },
                None => Frame::Ret {
                    id,
                    status: RetStatus::Error,
                    payload: SExpr::kw("unbound-global"),
                },
            }),
            other => send(protocol_error(other.id())),
        }
    }
}

/// Serves request frames from `input` until EOF.
pub fn serve<R: BufRead, W: Write>(input: R, mut output: W) -> io::Result<()> {
    let mut machine = Machine::new();
    let mut write_error: Option<io::Error> = None;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut send = |frame: Frame| {
            if write_error.is_none() {
                if let Err(e) = output
                    .write_all(frame.encode().as_bytes())
                    .and_then(|_| output.flush())
                {
                    write_error = Some(e);
                }
            }
        };
        match Frame::decode(&line) {
            Ok(frame) => machine.handle_frame(frame, &mut send),
            Err(e) => match e.id {
                Some(id) => send(Frame::Ret {
                    id,
                    status: RetStatus::Error,
                    payload: SExpr::kw("protocol"),
                }),
                None => eprintln!("miniprover: ignoring {e}"),
            },
        }
        if let Some(e) = write_error.take() {
            return Err(e);
        }
    }
    Ok(())
}

pub fn serve_stdio() -> io::Result<()> {
    let stdin = io::stdin();
    let stdout = io::stdout();
    serve(stdin.lock(), stdout.lock())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sexpr::read_sexpr;
    use proptest::prelude::*;

    fn form(s: &str) -> SExpr {
        read_sexpr(s).unwrap()
    }

    fn eval(m: &mut Machine, s: &str) -> EvalOutcome {
        m.eval_form(&form(s), None, &mut |_, _| {})
    }

    fn ints(ns: &[i64]) -> Vec<Value> {
        ns.iter().map(|&n| ord(SExpr::int(n))).collect()
    }

    fn ld(m: &mut Machine, forms: &[&str]) -> (RetStatus, SExpr) {
        let forms: Vec<_> = forms.iter().map(|s| form(s)).collect();
        m.run_ld(&forms, &[], &mut |_, _| {})
    }

    #[test]
    fn conditional_signature_depends_on_globals() {
        let mut m = Machine::new();
        let src = "(if (boundp-global foo state) (@ foo) (mv 1 state))";
        assert_eq!(eval(&mut m, src), EvalOutcome::Values(vec![ord(SExpr::int(1)), Value::state()]));
        assert!(eval(&mut m, "(assign foo 7)").is_successful_triple());
        assert_eq!(eval(&mut m, src), EvalOutcome::Values(ints(&[7])));
    }

    #[test]
    fn stash_through_mv_let() {
        let mut m = Machine::new();
        let out = eval(&mut m, "(mv-let (erp val state) (assign r 5) (assign out (list erp val)))");
        assert!(out.is_successful_triple(), "{out:?}");
        assert_eq!(m.globals().get(&SExpr::sym("out")), Some(&form("(nil 5)")));
        assert_eq!(m.globals().get(&SExpr::sym("r")), Some(&SExpr::int(5)));
    }

    #[test]
    fn step_budget_exhaustion() {
        let mut m = Machine::new();
        ld(&mut m, &["(defun down (n) (if (< 0 n) (down (- n 1)) 0))"]);
        let out = m.eval_form(&form("(down 100)"), Some(10), &mut |_, _| {});
        assert_eq!(out, EvalOutcome::StepLimitExceeded);
        assert!(matches!(eval(&mut m, "(down 100)"), EvalOutcome::Values(_)));
    }

    #[test]
    fn exact_step_boundary() {
        let mut m = Machine::new();
        let f = form("(+ 1 (* 2 3))");
        m.eval_form(&f, None, &mut |_, _| {});
        let cost = m.last_steps();
        // (+ 1 (* 2 3)): the call, 1, the inner call, 2, 3
        assert_eq!(cost, 5);
        assert!(matches!(m.eval_form(&f, Some(cost), &mut |_, _| {}), EvalOutcome::Values(_)));
        assert_eq!(m.eval_form(&f, Some(cost - 1), &mut |_, _| {}), EvalOutcome::StepLimitExceeded);
    }

    #[test]
    fn nested_step_limit_charges_outer_budget() {
        let mut m = Machine::new();
        // inner limit is generous but the outer budget is not
        let f = form("(with-prover-step-limit 1000 (+ 1 2 3 4))");
        assert_eq!(m.eval_form(&f, Some(4), &mut |_, _| {}), EvalOutcome::StepLimitExceeded);
        assert!(matches!(m.eval_form(&f, Some(7), &mut |_, _| {}), EvalOutcome::Values(_)));
        let g = form("(with-prover-step-limit 2 (+ 1 2 3 4))");
        assert_eq!(eval(&mut m, "(with-prover-step-limit 2 (+ 1 2 3 4))"), EvalOutcome::StepLimitExceeded);
        assert!(matches!(m.eval_form(&g, None, &mut |_, _| {}), EvalOutcome::StepLimitExceeded));
    }

    #[test]
    fn hard_errors() {
        let mut m = Machine::new();
        for src in [
            "unbound-var",
            "(no-such-fn 1)",
            "(mv-let (a b) (mv 1 2 3) a)",
            "(@ never-set)",
            "(assign x state)",
            "(+ 1 'a)",
            "(er hard 'top \"bad ~x0\" 3)",
            "(mv-let (a state) (mv 1 2) a)",
            "(mv-let (a b) (mv 1 state) a)",
            "((lambda (x) x) 1)",
            "(cw \"~q\")",
        ] {
            assert!(matches!(eval(&mut m, src), EvalOutcome::HardError(_)), "{src}");
        }
    }

    #[test]
    fn soft_error_prints_to_standard_co() {
        let mut m = Machine::new();
        let mut seen = Vec::new();
        let out = m.eval_form(&form("(er soft 'top \"boom ~x0\" 42)"), None, &mut |c, t| {
            seen.push((c, t.to_string()))
        });
        assert_eq!(
            out,
            EvalOutcome::SoftError {
                ctx: SExpr::sym("top"),
                msg: "boom 42".into()
            }
        );
        assert_eq!(seen, vec![(StreamClass::StandardCo, "ACL2 Error in top: boom 42\n".to_string())]);
    }

    #[test]
    fn cw_formats() {
        let mut m = Machine::new();
        let mut text = String::new();
        let out = m.eval_form(
            &form("(cw \"a ~x1 b ~x0~%~~\" 'x \"y\")"),
            None,
            &mut |c, t| {
                assert_eq!(c, StreamClass::CommentWindow);
                text.push_str(t)
            },
        );
        assert_eq!(out, EvalOutcome::Values(vec![ord(SExpr::nil())]));
        assert_eq!(text, "a \"y\" b x\n~");
    }

    #[test]
    fn events_extend_world() {
        let mut m = Machine::new();
        assert!(m.apply_event(&form("(defconst *k* 5)"), &mut |_, _| {}).is_successful_triple());
        assert_eq!(m.world().events().len(), 1);
        assert_eq!(eval(&mut m, "*k*"), EvalOutcome::Values(ints(&[5])));

        let again = m.apply_event(&form("(defconst *k* 6)"), &mut |_, _| {});
        assert!(matches!(again, EvalOutcome::SoftError { .. }));
        assert_eq!(m.world().events().len(), 1);
        assert_eq!(eval(&mut m, "*k*"), EvalOutcome::Values(ints(&[5])));

        let bad = m.apply_event(&form("(defconst *bad* (mv 1 2))"), &mut |_, _| {});
        assert!(matches!(bad, EvalOutcome::HardError(_)));
        assert_eq!(m.world().events().len(), 1);

        assert!(matches!(
            m.apply_event(&form("(+ 1 2)"), &mut |_, _| {}),
            EvalOutcome::HardError(_)
        ));
    }

    #[test]
    fn builtins_cannot_be_redefined() {
        let mut m = Machine::new();
        assert!(matches!(
            m.apply_event(&form("(defun list (x) x)"), &mut |_, _| {}),
            EvalOutcome::SoftError { .. }
        ));
    }

    #[test]
    fn thm_prints_to_proofs_co_when_verbose() {
        let mut m = Machine::new();
        let mut proofs = String::new();
        let out = m.apply_event(&form("(thm (< 1 2))"), &mut |c, t| {
            if c == StreamClass::ProofsCo {
                proofs.push_str(t)
            }
        });
        assert!(out.is_successful_triple());
        assert_eq!(proofs, "Proof attempt for (< 1 2)\nQ.E.D.\n");

        ld(&mut m, &["(defaults-set verbosity-level 0)"]);
        let mut any = false;
        let out = m.apply_event(&form("(thm (< 2 1))"), &mut |c, _| any |= c == StreamClass::ProofsCo);
        assert!(matches!(out, EvalOutcome::SoftError { .. }));
        assert!(!any);
    }

    #[test]
    fn ld_success_and_globals() {
        let mut m = Machine::new();
        assert_eq!(ld(&mut m, &["(assign r 5)"]), (RetStatus::Ok, SExpr::kw("eof")));
        assert_eq!(m.globals().get(&SExpr::sym("r")), Some(&SExpr::int(5)));
    }

    #[test]
    fn ld_failure_reverts_world_but_not_globals() {
        let mut m = Machine::new();
        let (status, reason) = ld(&mut m, &["(defconst *a* 1)", "(bad-op)"]);
        assert_eq!((status, reason), (RetStatus::Error, SExpr::kw("hard-error")));
        assert!(m.world().events().is_empty());
        assert!(matches!(eval(&mut m, "*a*"), EvalOutcome::HardError(_)));

        let (status, _) = ld(&mut m, &["(assign r 5)", "(bad-op)"]);
        assert_eq!(status, RetStatus::Error);
        assert_eq!(m.globals().get(&SExpr::sym("r")), Some(&SExpr::int(5)));
    }

    #[test]
    fn ld_requires_error_triples() {
        let mut m = Machine::new();
        assert_eq!(ld(&mut m, &["(+ 1 2)"]).1, SExpr::kw("not-error-triple"));
        assert_eq!(ld(&mut m, &["(mv nil 1 state)"]).0, RetStatus::Ok);
        assert_eq!(ld(&mut m, &["(mv t 1 state)"]).1, SExpr::kw("soft-error"));
        assert_eq!(
            ld(&mut m, &["(with-prover-step-limit 1 (thm (< 1 2)))"]).1,
            SExpr::kw("step-limit")
        );
    }

    #[test]
    fn ld_directives_suppress_at_source() {
        let mut m = Machine::new();
        let opts = form("(:comment-window :suppress :standard-co :emit :ld-error-action :error)");
        let mut seen = Vec::new();
        let forms = [form("(prog2$ (cw \"hidden\") (prog2$ (fms \"shown\") (mv nil 1 state)))")];
        let (status, _) = m.run_ld(&forms, opts.as_list().unwrap(), &mut |c, t| {
            seen.push((c, t.to_string()))
        });
        assert_eq!(status, RetStatus::Ok);
        assert_eq!(seen, vec![(StreamClass::StandardCo, "shown".to_string())]);

        let bad = form("(:comment-window :loud)");
        assert_eq!(m.run_ld(&forms, bad.as_list().unwrap(), &mut |_, _| {}).1, SExpr::kw("bad-options"));
    }

    #[test]
    fn defaults_table_and_reversion() {
        let mut m = Machine::new();
        assert_eq!(
            eval(&mut m, "(defaults-get step-limit)"),
            EvalOutcome::Values(ints(&[DEFAULT_STEP_LIMIT as i64]))
        );
        ld(&mut m, &["(defaults-set step-limit 50)"]);
        assert_eq!(eval(&mut m, "(defaults-get step-limit)"), EvalOutcome::Values(ints(&[50])));
        let (status, _) = ld(
            &mut m,
            &["(mv-let (e v state) (defaults-set step-limit 7) (er soft 'top \"no\"))"],
        );
        assert_eq!(status, RetStatus::Error);
        assert_eq!(eval(&mut m, "(defaults-get :step-limit)"), EvalOutcome::Values(ints(&[50])));
        assert!(matches!(
            eval(&mut m, "(defaults-set step-limit -1)"),
            EvalOutcome::SoftError { .. }
        ));
    }

    #[test]
    fn deep_recursion_does_not_overflow() {
        let mut m = Machine::new();
        ld(&mut m, &["(defun down (n) (if (< 0 n) (down (- n 1)) 0))"]);
        assert_eq!(eval(&mut m, "(down 5000)"), EvalOutcome::Values(ints(&[0])));
        assert!(matches!(eval(&mut m, "(down 20000)"), EvalOutcome::HardError(_)));
    }

    #[test]
    fn serve_answers_frames() {
        let input = "(ping 1)\n(ld 2 ((assign r 5)) nil)\n(get-global 3 r)\n(get-global 4 missing)\ngarbage(\n(frob 5)\n";
        let mut output = Vec::new();
        serve(input.as_bytes(), &mut output).unwrap();
        let lines: Vec<_> = String::from_utf8(output).unwrap().lines().map(String::from).collect();
        assert_eq!(
            lines,
            vec![
                "(pong 1)",
                "(ret 2 :ok :eof)",
                "(ret 3 :ok 5)",
                "(ret 4 :error :unbound-global)",
                "(ret 5 :error :protocol)",
            ]
        );
    }

    // Random event sequences with injected failures.
    #[derive(Debug, Clone)]
    enum Step {
        Good(String),
        Bad(String),
        Assign(String, i64),
    }

    fn arb_steps() -> impl Strategy<Value = Vec<Step>> {
        let step = (0..6u8, 0..1000i64).prop_map(|(kind, n)| match kind {
            0 => Step::Good(format!("(defconst *c{n}* {n})")),
            1 => Step::Good(format!("(defun f{n} (x) (+ x {n}))")),
            2 => Step::Good(format!("(defaults-set verbosity-level {})", n % 3)),
            3 => Step::Bad(format!("(mv-let (e v state) (defconst *d{n}* 1) (er soft 'inj \"x\"))")),
            4 => Step::Bad(format!("(mv-let (e v state) (assign g{n} {n}) (undefined-{n}))")),
            _ => Step::Assign(format!("h{n}"), n),
        });
        prop::collection::vec(step, 1..12)
    }

    proptest! {
        #[test]
        fn failing_ld_reverts_exactly(steps in arb_steps()) {
            let mut m = Machine::new();
            let mut assigned = Vec::new();
            for step in steps {
                let before = m.world().fingerprint();
                let before_defaults = m.world().defaults.clone();
                match step {
                    Step::Good(src) => { ld(&mut m, &[&src]); }
                    Step::Bad(src) => {
                        let (status, _) = ld(&mut m, &[&src]);
                        prop_assert_eq!(status, RetStatus::Error);
                        prop_assert_eq!(m.world().fingerprint(), before);
                        prop_assert_eq!(&m.world().defaults, &before_defaults);
                    }
                    Step::Assign(name, n) => {
                        ld(&mut m, &[&format!("(assign {name} {n})")]);
                        assigned.push((name, n));
                    }
                }
                for (name, n) in &assigned {
                    prop_assert_eq!(m.globals().get(&SExpr::sym(name.as_str())), Some(&SExpr::int(*n)));
                }
            }
        }

        #[test]
        fn step_monotonicity(n in 0..40i64, extra in 0..50u64) {
            let mut m = Machine::new();
            ld(&mut m, &["(defun down (n) (if (< 0 n) (down (- n 1)) n))"]);
            let f = form(&format!("(down {n})"));
            let free = m.eval_form(&f, None, &mut |_, _| {});
            let cost = m.last_steps();
            prop_assert_eq!(m.eval_form(&f, Some(cost + extra), &mut |_, _| {}), free);
            if cost > extra {
                prop_assert_eq!(
                    m.eval_form(&f, Some(cost - extra - 1), &mut |_, _| {}),
                    EvalOutcome::StepLimitExceeded
                );
            }
        }

        #[test]
        fn signature_marks_state_positions(mask in prop::collection::vec(any::<bool>(), 2..5)) {
            let args: Vec<String> = mask
                .iter()
                .enumerate()
                .map(|(i, &st)| if st { "state".to_string() } else { i.to_string() })
                .collect();
            let mut m = Machine::new();
            let out = eval(&mut m, &format!("(mv {})", args.join(" ")));
            let sig = out.signature().unwrap();
            let expect: Vec<Option<String>> = mask.iter().map(|&st| st.then(|| "state".to_string())).collect();
            prop_assert_eq!(sig.markers(), &expect[..]);
        }

        #[test]
        fn evaluation_is_deterministic(a in -50i64..50, b in 0i64..20, soft in any::<bool>()) {
            let src = if soft {
                format!("(prog2$ (cw \"~x0 ~x1~%\" {a} {b}) (er soft 'ctx \"v ~x0\" {a}))")
            } else {
                format!("(prog2$ (cw \"~x0~%\" {a}) (mv nil (* {a} {b}) state))")
            };
            let run = || {
                let mut m = Machine::new();
                let mut bytes = String::new();
                let out = m.eval_form(&form(&src), Some(1000), &mut |_, t| bytes.push_str(t));
                (out, bytes, m.last_steps())
            };
            prop_assert_eq!(run(), run());
        }
    }
}
