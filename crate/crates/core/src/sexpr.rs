//! S-expression values, reader and canonical printer.
//!
//! Every value that crosses a boundary in this crate (prover forms, wire
//! frames, call results) is an [`SExpr`]. The reader is deliberately small:
//! integers, strings, keywords, optionally package-qualified symbols, proper
//! lists and `'x` quote sugar. It never evaluates anything and refuses every
//! reader macro (`#.`, `#'`, backquote, ...).
//!
//! Printing is canonical: single spaces between list items, strings escaped
//! so a printed value never contains a raw newline. `read(print(e)) == e`
//! holds for every value whose symbol and keyword names are valid tokens
//! (see [`is_valid_symbol_name`]).

use std::fmt;

use num_bigint::BigInt;
use thiserror::Error;

/// A non-circular S-expression.
///
/// `nil` doubles as the empty list. Build lists with [`SExpr::list`], which
/// maps an empty vector to the `nil` symbol, so that the empty list has a
/// single representation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SExpr {
    Symbol {
        package: Option<String>,
        name: String,
    },
    Keyword(String),
    Integer(BigInt),
    Text(String),
    List(Vec<SExpr>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    EmptyInput,
    UnexpectedEof,
    UnbalancedClose,
    UnterminatedString,
    BadEscape(char),
    DottedPair,
    InvalidToken(String),
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseErrorKind::EmptyInput => write!(f, "empty input"),
            ParseErrorKind::UnexpectedEof => write!(f, "unexpected end of input"),
            ParseErrorKind::UnbalancedClose => write!(f, "unbalanced `)`"),
            ParseErrorKind::UnterminatedString => write!(f, "unterminated string"),
            ParseErrorKind::BadEscape(c) => write!(f, "bad escape `\\{c}`"),
            ParseErrorKind::DottedPair => write!(f, "dotted pairs are not supported"),
            ParseErrorKind::InvalidToken(t) => write!(f, "invalid token `{t}`"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReadError {
    #[error("parse error at byte {offset}: {kind}")]
    Parse { offset: usize, kind: ParseErrorKind },
    #[error("reader macro `{syntax}` rejected at byte {offset}")]
    ReaderMacroRejected { offset: usize, syntax: String },
}

impl SExpr {
    pub fn sym(name: impl Into<String>) -> SExpr {
        SExpr::Symbol {
            package: None,
            name: name.into(),
        }
    }

    pub fn pkg_sym(package: impl Into<String>, name: impl Into<String>) -> SExpr {
        SExpr::Symbol {
            package: Some(package.into()),
            name: name.into(),
        }
    }

    pub fn kw(name: impl Into<String>) -> SExpr {
        SExpr::Keyword(name.into())
    }

    pub fn int(n: impl Into<BigInt>) -> SExpr {
        SExpr::Integer(n.into())
    }

    pub fn text(s: impl Into<String>) -> SExpr {
        SExpr::Text(s.into())
    }

    /// Builds a list; the empty list is the symbol `nil`.
    pub fn list(items: Vec<SExpr>) -> SExpr {
        if items.is_empty() {
            SExpr::nil()
        } else {
            SExpr::List(items)
        }
    }

    pub fn nil() -> SExpr {
        SExpr::sym("nil")
    }

    pub fn t() -> SExpr {
        SExpr::sym("t")
    }

    pub fn bool(b: bool) -> SExpr {
        if b {
            SExpr::t()
        } else {
            SExpr::nil()
        }
    }

    pub fn quote(e: SExpr) -> SExpr {
        SExpr::List(vec![SExpr::sym("quote"), e])
    }

    /// True for the unqualified symbol `nil` and for an empty `List`.
    pub fn is_nil(&self) -> bool {
        match self {
            SExpr::Symbol {
                package: None,
                name,
            } => name == "nil",
            SExpr::List(items) => items.is_empty(),
            _ => false,
        }
    }

    /// True if this is a symbol with the given name, in any package.
    pub fn is_sym_named(&self, want: &str) -> bool {
        matches!(self, SExpr::Symbol { name, .. } if name == want)
    }

    pub fn symbol_name(&self) -> Option<&str> {
        match self {
            SExpr::Symbol { name, .. } => Some(name),
            _ => None,
        }
    }

    pub fn as_keyword(&self) -> Option<&str> {
        match self {
            SExpr::Keyword(k) => Some(k),
            _ => None,
        }
    }

    pub fn as_integer(&self) -> Option<&BigInt> {
        match self {
            SExpr::Integer(n) => Some(n),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            SExpr::Text(s) => Some(s),
            _ => None,
        }
    }

    /// List items; `nil` is the empty list. `None` for atoms.
    pub fn as_list(&self) -> Option<&[SExpr]> {
        match self {
            SExpr::List(items) => Some(items),
            e if e.is_nil() => Some(&[]),
            _ => None,
        }
    }

    pub fn is_atom(&self) -> bool {
        !matches!(self, SExpr::List(items) if !items.is_empty())
    }
}

impl From<i64> for SExpr {
    fn from(n: i64) -> Self {
        SExpr::int(n)
    }
}

impl From<&str> for SExpr {
    fn from(s: &str) -> Self {
        SExpr::text(s)
    }
}

impl fmt::Display for SExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        write_sexpr(&mut out, self);
        f.write_str(&out)
    }
}

/// Canonical rendering of `e`.
pub fn print_sexpr(e: &SExpr) -> String {
    let mut out = String::new();
    write_sexpr(&mut out, e);
    out
}

fn write_sexpr(out: &mut String, e: &SExpr) {
    match e {
        SExpr::Symbol { package, name } => {
            if let Some(p) = package {
                out.push_str(p);
                out.push_str("::");
            }
            out.push_str(name);
        }
        SExpr::Keyword(k) => {
            out.push(':');
            out.push_str(k);
        }
        SExpr::Integer(n) => out.push_str(&n.to_string()),
        SExpr::Text(s) => {
            out.push('"');
            for c in s.chars() {
                match c {
                    '"' => out.push_str("\\\""),
                    '\\' => out.push_str("\\\\"),
                    '\n' => out.push_str("\\n"),
                    '\r' => out.push_str("\\r"),
                    '\t' => out.push_str("\\t"),
                    c => out.push(c),
                }
            }
            out.push('"');
        }
        SExpr::List(items) if items.is_empty() => out.push_str("nil"),
        SExpr::List(items) => {
            out.push('(');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                write_sexpr(out, item);
            }
            out.push(')');
        }
    }
}

/// Reads the first complete S-expression in `input`. Trailing text is
/// ignored; use [`Reader`] to consume several values.
pub fn read_sexpr(input: &str) -> Result<SExpr, ReadError> {
    let mut reader = Reader::new(input);
    match reader.next_sexpr() {
        Some(r) => r,
        None => Err(ReadError::Parse {
            offset: reader.pos,
            kind: ParseErrorKind::EmptyInput,
        }),
    }
}

/// Reads every S-expression in `input`.
pub fn read_all(input: &str) -> Result<Vec<SExpr>, ReadError> {
    Reader::new(input).collect()
}

/// Whether `name` prints as a bare token that reads back as the same symbol
/// (or keyword name).
pub fn is_valid_symbol_name(name: &str) -> bool {
    !name.is_empty()
        && name != "."
        && !name.starts_with('#')
        && !name.contains(':')
        && !name.chars().any(is_delimiter)
        && !looks_like_integer(name)
}

fn is_delimiter(c: char) -> bool {
    c.is_whitespace() || matches!(c, '(' | ')' | '"' | '\'' | ';' | '`' | ',' | '|')
}

fn looks_like_integer(tok: &str) -> bool {
    let digits = tok.strip_prefix(['+', '-']).unwrap_or(tok);
    !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit())
}

/// Incremental reader over a string holding zero or more S-expressions.
pub struct Reader<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(src: &'a str) -> Self {
        Reader { src, pos: 0 }
    }

    /// Byte offset of the next unread character.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// True once only whitespace and comments remain.
    pub fn at_end(&mut self) -> bool {
        self.skip_trivia();
        self.pos >= self.src.len()
    }

    pub fn next_sexpr(&mut self) -> Option<Result<SExpr, ReadError>> {
        if self.at_end() {
            return None;
        }
        Some(self.read_expr())
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn skip_trivia(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.bump();
            } else if c == ';' {
                while let Some(c) = self.bump() {
                    if c == '\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn err(&self, offset: usize, kind: ParseErrorKind) -> ReadError {
        ReadError::Parse { offset, kind }
    }

    fn read_expr(&mut self) -> Result<SExpr, ReadError> {
        self.skip_trivia();
        let start = self.pos;
        let c = match self.peek() {
            Some(c) => c,
            None => return Err(self.err(start, ParseErrorKind::UnexpectedEof)),
        };
        match c {
            '(' => {
                self.bump();
                self.read_list_tail(start)
            }
            ')' => Err(self.err(start, ParseErrorKind::UnbalancedClose)),
            '\'' => {
                self.bump();
                self.skip_trivia();
                if self.peek().is_none() {
                    return Err(self.err(self.pos, ParseErrorKind::UnexpectedEof));
                }
                Ok(SExpr::quote(self.read_expr()?))
            }
            '"' => {
                self.bump();
                self.read_string(start)
            }
            '#' | '`' | ',' => {
                let syntax: String = self.src[start..].chars().take(2).collect();
                Err(ReadError::ReaderMacroRejected {
                    offset: start,
                    syntax,
                })
            }
            '|' => Err(self.err(start, ParseErrorKind::InvalidToken("|".into()))),
            _ => self.read_atom(start),
        }
    }

    fn read_list_tail(&mut self, open: usize) -> Result<SExpr, ReadError> {
        let mut items = Vec::new();
        loop {
            self.skip_trivia();
            match self.peek() {
                None => return Err(self.err(open, ParseErrorKind::UnexpectedEof)),
                Some(')') => {
                    self.bump();
                    return Ok(SExpr::list(items));
                }
                Some(_) => items.push(self.read_expr()?),
            }
        }
    }

    fn read_string(&mut self, open: usize) -> Result<SExpr, ReadError> {
        let mut s = String::new();
        loop {
            let at = self.pos;
            match self.bump() {
                None => return Err(self.err(open, ParseErrorKind::UnterminatedString)),
                Some('"') => return Ok(SExpr::Text(s)),
                Some('\\') => match self.bump() {
                    Some('"') => s.push('"'),
                    Some('\\') => s.push('\\'),
                    Some('n') => s.push('\n'),
                    Some('r') => s.push('\r'),
                    Some('t') => s.push('\t'),
                    Some(other) => return Err(self.err(at, ParseErrorKind::BadEscape(other))),
                    None => return Err(self.err(open, ParseErrorKind::UnterminatedString)),
                },
                Some(c) => s.push(c),
            }
        }
    }

    fn read_atom(&mut self, start: usize) -> Result<SExpr, ReadError> {
        while let Some(c) = self.peek() {
            if is_delimiter(c) {
                break;
            }
            self.bump();
        }
        let tok = &self.src[start..self.pos];
        let invalid = || self.err(start, ParseErrorKind::InvalidToken(tok.to_string()));

        if tok == "." {
            return Err(self.err(start, ParseErrorKind::DottedPair));
        }
        if looks_like_integer(tok) {
            let n: BigInt = tok.parse().map_err(|_| invalid())?;
            return Ok(SExpr::Integer(n));
        }
        if let Some(name) = tok.strip_prefix(':') {
            if name.is_empty() || name.contains(':') {
                return Err(invalid());
            }
            return Ok(SExpr::Keyword(name.to_string()));
        }
        if let Some((pkg, name)) = tok.split_once(':') {
            let name = name.strip_prefix(':').unwrap_or(name);
            if pkg.is_empty() || name.is_empty() || name.contains(':') {
                return Err(invalid());
            }
            return Ok(SExpr::pkg_sym(pkg, name));
        }
        Ok(SExpr::sym(tok))
    }
}

impl Iterator for Reader<'_> {
    type Item = Result<SExpr, ReadError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_sexpr()
    }
}
