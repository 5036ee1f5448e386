//! Output routing for prover streams.
//!
//! The backend tags every chunk of printed text with the stream it was
//! written to. A session decides, per call, whether each chunk is dropped,
//! buffered, printed, or both, from two flags: whether quiet mode is on and
//! whether output capture is on.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use crate::bridge::HookContext;
use crate::sexpr::SExpr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StreamClass {
    CommentWindow,
    StandardCo,
    ProofsCo,
}

impl StreamClass {
    pub const ALL: [StreamClass; 3] = [
        StreamClass::CommentWindow,
        StreamClass::StandardCo,
        StreamClass::ProofsCo,
    ];

    /// Keyword name used on the wire.
    pub fn keyword(self) -> &'static str {
        match self {
            StreamClass::CommentWindow => "comment-window",
            StreamClass::StandardCo => "standard-co",
            StreamClass::ProofsCo => "proofs-co",
        }
    }

    pub fn from_keyword(name: &str) -> Option<StreamClass> {
        StreamClass::ALL.into_iter().find(|c| c.keyword() == name)
    }

    pub(crate) fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for StreamClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SinkPolicy {
    Passthrough,
    /// Dropped; the backend is told not to produce it at all.
    Discard,
    Capture,
    CaptureAndPassthrough,
}

impl SinkPolicy {
    pub fn captures(self) -> bool {
        matches!(self, SinkPolicy::Capture | SinkPolicy::CaptureAndPassthrough)
    }

    pub fn passes_through(self) -> bool {
        matches!(self, SinkPolicy::Passthrough | SinkPolicy::CaptureAndPassthrough)
    }
}

/// Policy table. The same for all three stream classes.
pub fn policy_for(_class: StreamClass, quiet: bool, capture: bool) -> SinkPolicy {
    match (quiet, capture) {
        (false, false) => SinkPolicy::Passthrough,
        (true, false) => SinkPolicy::Discard,
        (false, true) => SinkPolicy::CaptureAndPassthrough,
        (true, true) => SinkPolicy::Capture,
    }
}

/// Captured output, in arrival order.
#[derive(Debug, Default, Clone)]
pub struct CaptureBuffer {
    segments: Vec<(StreamClass, String)>,
}

impl CaptureBuffer {
    pub fn push(&mut self, class: StreamClass, text: &str) {
        self.segments.push((class, text.to_string()));
    }

    pub fn segments(&self) -> &[(StreamClass, String)] {
        &self.segments
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn clear(&mut self) {
        self.segments.clear();
    }

    /// Concatenated text; empties the buffer.
    pub fn take_text(&mut self) -> String {
        let text = self.segments.iter().map(|(_, t)| t.as_str()).collect();
        self.segments.clear();
        text
    }
}

/// Per-session output state: quiet flag, capture flags, the capture buffer
/// and the passthrough destination.
pub struct OutputControl {
    quiet: bool,
    capture_default: bool,
    capture_active: bool,
    buffer: CaptureBuffer,
    passthrough: Option<Box<dyn Write + Send>>,
}

impl fmt::Debug for OutputControl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OutputControl")
            .field("quiet", &self.quiet)
            .field("capture_default", &self.capture_default)
            .field("capture_active", &self.capture_active)
            .field("buffer", &self.buffer)
            .finish_non_exhaustive()
    }
}

impl Default for OutputControl {
    fn default() -> Self {
        OutputControl::new(Box::new(std::io::stdout()))
    }
}

impl OutputControl {
    pub fn new(passthrough: Box<dyn Write + Send>) -> Self {
        OutputControl {
            quiet: false,
            capture_default: false,
            capture_active: false,
            buffer: CaptureBuffer::default(),
            passthrough: Some(passthrough),
        }
    }

    pub fn set_passthrough(&mut self, dest: Box<dyn Write + Send>) {
        self.passthrough = Some(dest);
    }

    pub fn quiet_mode(&self) -> bool {
        self.quiet
    }

    pub(crate) fn set_quiet_flag(&mut self, on: bool) {
        self.quiet = on;
    }

    pub fn capture_default(&self) -> bool {
        self.capture_default
    }

    pub fn set_capture_default(&mut self, on: bool) {
        self.capture_default = on;
    }

    /// Starts a bridge call: drops anything still buffered and fixes the
    /// capture flag for the duration of the call.
    pub fn begin_call(&mut self, capture: bool) {
        self.buffer.clear();
        self.capture_active = capture || self.capture_default;
    }

    pub fn current_policy(&self, class: StreamClass) -> SinkPolicy {
        policy_for(class, self.quiet, self.capture_active)
    }

    pub fn route_output(&mut self, class: StreamClass, text: &str) {
        let policy = self.current_policy(class);
        if policy.captures() {
            self.buffer.push(class, text);
        }
        if policy.passes_through() {
            let failed = match self.passthrough.as_mut() {
                Some(dest) => dest
                    .write_all(text.as_bytes())
                    .and_then(|_| dest.flush())
                    .is_err(),
                None => false,
            };
            if failed {
                log::debug!("passthrough destination closed; discarding further output");
                self.passthrough = None;
            }
        }
    }

    pub fn buffer(&self) -> &CaptureBuffer {
        &self.buffer
    }

    pub fn get_captured_output(&mut self) -> String {
        self.buffer.take_text()
    }
}

/// A quiet-mode hook. It may inspect the backend through the context and
/// returns forms to evaluate on the backend.
pub type QuietHook = Arc<dyn Fn(&mut HookContext<'_>) -> Vec<SExpr> + Send + Sync>;

#[derive(Clone)]
struct HookEntry {
    name: String,
    on: Option<QuietHook>,
    off: Option<QuietHook>,
}

/// Named quiet-mode hooks in registration order.
#[derive(Clone, Default)]
pub struct HookRegistry {
    entries: Vec<HookEntry>,
}

impl fmt::Debug for HookRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries(self.entries.iter().map(|e| {
                (
                    &e.name,
                    e.on.is_some(),
                    e.off.is_some(),
                )
            }))
            .finish()
    }
}

impl HookRegistry {
    fn entry_mut(&mut self, name: &str) -> &mut HookEntry {
        let pos = match self.entries.iter().position(|e| e.name == name) {
            Some(pos) => pos,
            None => {
                self.entries.push(HookEntry {
                    name: name.to_string(),
                    on: None,
                    off: None,
                });
                self.entries.len() - 1
            }
        };
        &mut self.entries[pos]
    }

    pub fn add_on_hook(&mut self, name: &str, hook: QuietHook) {
        self.entry_mut(name).on = Some(hook);
    }

    pub fn add_off_hook(&mut self, name: &str, hook: QuietHook) {
        self.entry_mut(name).off = Some(hook);
    }

    /// No-op for unknown names.
    pub fn remove(&mut self, name: &str) {
        self.entries.retain(|e| e.name != name);
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Hooks to run when quiet mode turns on (`true`) or off (`false`).
    pub fn hooks_for(&self, on: bool) -> Vec<(String, QuietHook)> {
        self.entries
            .iter()
            .filter_map(|e| {
                let hook = if on { &e.on } else { &e.off };
                hook.clone().map(|h| (e.name.clone(), h))
            })
            .collect()
    }
}
