//! Bridge between a host program and a REPL-style theorem prover running as
//! a subprocess: the three-call `compute`/`query`/`event` interface, output
//! control with quiet-mode hooks, a newline-framed S-expression wire
//! protocol, a miniature prover backend and a TCP worker pool.

pub mod bridge;
pub mod cli;
pub mod miniprover;
pub mod output;
pub mod pool;
pub mod sexpr;
pub mod transport;

pub use bridge::{BridgeError, BridgeOptions, HookContext, OutputSignature, QueryResult, Session};
pub use pool::{PoolClient, PoolConfig, PoolServer};
pub use output::{policy_for, SinkPolicy, StreamClass};
pub use sexpr::{print_sexpr, read_sexpr, SExpr};
