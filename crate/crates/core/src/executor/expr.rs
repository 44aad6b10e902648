//! The built-in evaluator language (`expr`).
//!
//! A program is a single definition:
//!
//! ```text
//! evaluate(r) = matches(r.text, '√π|sqrt\(pi\)') or contains(lower(r.text), "sqrt(pi)")
//! ```
//!
//! The interpreter has no statements, loops, or host access: the only
//! operations are the pure functions in [`FUNCTIONS`] over strings, numbers,
//! booleans and the response record. Every program therefore terminates.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Mutex;

use regex::Regex;
use thiserror::Error;

/// Every function a program can call. This list is the language's entire
/// capability surface.
pub const FUNCTIONS: &[&str] = &[
    "contains",
    "matches",
    "len",
    "lower",
    "upper",
    "trim",
    "starts_with",
    "ends_with",
    "number",
    "words",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExprError {
    #[error("syntax error at {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("runtime error: {0}")]
    Runtime(String),
}

fn syntax<T>(offset: usize, message: impl Into<String>) -> Result<T, ExprError> {
    Err(ExprError::Syntax { offset, message: message.into() })
}

fn runtime<T>(message: impl Into<String>) -> Result<T, ExprError> {
    Err(ExprError::Runtime(message.into()))
}

// ---- lexer ----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Str(String),
    Num(f64),
    LParen,
    RParen,
    Comma,
    Dot,
    Assign,
    Op(&'static str),
}

fn lex(src: &str) -> Result<Vec<(usize, Tok)>, ExprError> {
    let mut out = Vec::new();
    let chars: Vec<(usize, char)> = src.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (at, c) = chars[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '#' => {
                while i < chars.len() && chars[i].1 != '\n' {
                    i += 1;
                }
            }
            '(' => { out.push((at, Tok::LParen)); i += 1; }
            ')' => { out.push((at, Tok::RParen)); i += 1; }
            ',' => { out.push((at, Tok::Comma)); i += 1; }
            '.' => { out.push((at, Tok::Dot)); i += 1; }
            '+' | '-' | '*' | '/' => {
                let op = match c { '+' => "+", '-' => "-", '*' => "*", _ => "/" };
                out.push((at, Tok::Op(op)));
                i += 1;
            }
            '=' | '!' | '<' | '>' => {
                let next = chars.get(i + 1).map(|&(_, c)| c);
                let (tok, width) = match (c, next) {
                    ('=', Some('=')) => (Tok::Op("=="), 2),
                    ('!', Some('=')) => (Tok::Op("!="), 2),
                    ('<', Some('=')) => (Tok::Op("<="), 2),
                    ('>', Some('=')) => (Tok::Op(">="), 2),
                    ('<', _) => (Tok::Op("<"), 1),
                    ('>', _) => (Tok::Op(">"), 1),
                    ('=', _) => (Tok::Assign, 1),
                    _ => return syntax(at, "unexpected '!'; use not"),
                };
                out.push((at, tok));
                i += width;
            }
            '"' => {
                let mut s = String::new();
                i += 1;
                loop {
                    let Some(&(_, c)) = chars.get(i) else { return syntax(at, "unterminated string") };
                    i += 1;
                    match c {
                        '"' => break,
                        '\\' => {
                            let Some(&(_, e)) = chars.get(i) else { return syntax(at, "unterminated string") };
                            i += 1;
                            s.push(match e {
                                'n' => '\n',
                                't' => '\t',
                                other => other,
                            });
                        }
                        other => s.push(other),
                    }
                }
                out.push((at, Tok::Str(s)));
            }
            '\'' => {
                let mut s = String::new();
                i += 1;
                loop {
                    let Some(&(_, c)) = chars.get(i) else { return syntax(at, "unterminated string") };
                    i += 1;
                    if c == '\'' {
                        break;
                    }
                    s.push(c);
                }
                out.push((at, Tok::Str(s)));
            }
            c if c.is_ascii_digit() => {
                let start = i;
                while i < chars.len() && (chars[i].1.is_ascii_digit() || chars[i].1 == '.') {
                    i += 1;
                }
                let text: String = chars[start..i].iter().map(|&(_, c)| c).collect();
                match text.parse() {
                    Ok(n) => out.push((at, Tok::Num(n))),
                    Err(_) => return syntax(at, format!("bad number {text}")),
                }
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].1.is_alphanumeric() || chars[i].1 == '_') {
                    i += 1;
                }
                out.push((at, Tok::Ident(chars[start..i].iter().map(|&(_, c)| c).collect())));
            }
            other => return syntax(at, format!("unexpected character {other:?}")),
        }
    }
    Ok(out)
}

// ---- syntax tree ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Expr {
    Str(String),
    Num(f64),
    Bool(bool),
    Param,
    Field(Box<Expr>, String),
    Call(String, Vec<Expr>),
    Unary(&'static str, Box<Expr>),
    Binary(&'static str, Box<Expr>, Box<Expr>),
    If(Box<Expr>, Box<Expr>, Box<Expr>),
}

const KEYWORDS: &[&str] = &["and", "or", "not", "if", "then", "else", "true", "false"];

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
    param: String,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map(|(o, _)| *o).unwrap_or(self.end)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(_, t)| t.clone());
        self.pos += 1;
        t
    }

    fn expect(&mut self, want: &Tok, what: &str) -> Result<(), ExprError> {
        let at = self.offset();
        match self.next() {
            Some(ref t) if t == want => Ok(()),
            _ => syntax(at, format!("expected {what}")),
        }
    }

    fn keyword(&mut self, kw: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Ident(s)) if s == kw) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn program(&mut self) -> Result<Expr, ExprError> {
        if !self.keyword("evaluate") {
            return syntax(self.offset(), "program must start with evaluate(<name>) =");
        }
        self.expect(&Tok::LParen, "'('")?;
        let at = self.offset();
        match self.next() {
            Some(Tok::Ident(name)) if !KEYWORDS.contains(&name.as_str()) => self.param = name,
            _ => return syntax(at, "expected a parameter name"),
        }
        self.expect(&Tok::RParen, "')'")?;
        self.expect(&Tok::Assign, "'='")?;
        let body = self.expr()?;
        if self.pos < self.toks.len() {
            return syntax(self.offset(), "unexpected trailing input");
        }
        Ok(body)
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        if self.keyword("if") {
            let cond = self.expr()?;
            if !self.keyword("then") {
                return syntax(self.offset(), "expected then");
            }
            let a = self.expr()?;
            if !self.keyword("else") {
                return syntax(self.offset(), "expected else");
            }
            let b = self.expr()?;
            return Ok(Expr::If(Box::new(cond), Box::new(a), Box::new(b)));
        }
        self.or()
    }

    fn or(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.and()?;
        while self.keyword("or") {
            lhs = Expr::Binary("or", Box::new(lhs), Box::new(self.and()?));
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.not()?;
        while self.keyword("and") {
            lhs = Expr::Binary("and", Box::new(lhs), Box::new(self.not()?));
        }
        Ok(lhs)
    }

    fn not(&mut self) -> Result<Expr, ExprError> {
        if self.keyword("not") {
            return Ok(Expr::Unary("not", Box::new(self.not()?)));
        }
        self.cmp()
    }

    fn cmp(&mut self) -> Result<Expr, ExprError> {
        let lhs = self.add()?;
        if let Some(Tok::Op(op @ ("==" | "!=" | "<" | "<=" | ">" | ">="))) = self.peek().cloned() {
            self.pos += 1;
            return Ok(Expr::Binary(op, Box::new(lhs), Box::new(self.add()?)));
        }
        Ok(lhs)
    }

    fn add(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.mul()?;
        while let Some(Tok::Op(op @ ("+" | "-"))) = self.peek().cloned() {
            self.pos += 1;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(self.mul()?));
        }
        Ok(lhs)
    }

    fn mul(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Op(op @ ("*" | "/"))) = self.peek().cloned() {
            self.pos += 1;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(self.unary()?));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if let Some(Tok::Op("-")) = self.peek() {
            self.pos += 1;
            return Ok(Expr::Unary("-", Box::new(self.unary()?)));
        }
        self.postfix()
    }

    fn postfix(&mut self) -> Result<Expr, ExprError> {
        let mut e = self.primary()?;
        while let Some(Tok::Dot) = self.peek() {
            self.pos += 1;
            let at = self.offset();
            match self.next() {
                Some(Tok::Ident(name)) => e = Expr::Field(Box::new(e), name),
                _ => return syntax(at, "expected a field name after '.'"),
            }
        }
        Ok(e)
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        let at = self.offset();
        match self.next() {
            Some(Tok::Num(n)) => Ok(Expr::Num(n)),
            Some(Tok::Str(s)) => Ok(Expr::Str(s)),
            Some(Tok::LParen) => {
                let e = self.expr()?;
                self.expect(&Tok::RParen, "')'")?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => match name.as_str() {
                "true" => Ok(Expr::Bool(true)),
                "false" => Ok(Expr::Bool(false)),
                _ if name == self.param => Ok(Expr::Param),
                _ if matches!(self.peek(), Some(Tok::LParen)) => {
                    if !FUNCTIONS.contains(&name.as_str()) {
                        return syntax(at, format!("unknown function {name}"));
                    }
                    self.pos += 1;
                    let mut args = Vec::new();
                    if !matches!(self.peek(), Some(Tok::RParen)) {
                        loop {
                            args.push(self.expr()?);
                            if matches!(self.peek(), Some(Tok::Comma)) {
                                self.pos += 1;
                            } else {
                                break;
                            }
                        }
                    }
                    self.expect(&Tok::RParen, "')'")?;
                    check_arity(&name, args.len(), at)?;
                    if name == "matches" {
                        if let Some(Expr::Str(pattern)) = args.get(1) {
                            if let Err(e) = compile_pattern(pattern) {
                                return syntax(at, format!("invalid regex: {e}"));
                            }
                        }
                    }
                    Ok(Expr::Call(name, args))
                }
                _ => syntax(at, format!("unknown name {name}")),
            },
            _ => syntax(at, "expected an expression"),
        }
    }
}

fn check_arity(name: &str, n: usize, at: usize) -> Result<(), ExprError> {
    let want = match name {
        "contains" | "matches" | "starts_with" | "ends_with" => 2,
        _ => 1,
    };
    if n == want {
        Ok(())
    } else {
        syntax(at, format!("{name} takes {want} argument(s), got {n}"))
    }
}

/// Makes Python-style patterns acceptable to the `regex` crate: a `{` that
/// does not start a `{m}`, `{m,}` or `{m,n}` quantifier is a literal brace.
pub fn python_compatible_pattern(pattern: &str) -> String {
    let chars: Vec<char> = pattern.chars().collect();
    let mut out = String::with_capacity(pattern.len());
    let mut i = 0;
    let mut literal_open = 0usize;
    while i < chars.len() {
        let c = chars[i];
        if c == '\\' {
            out.push(c);
            if let Some(&n) = chars.get(i + 1) {
                out.push(n);
            }
            i += 2;
            continue;
        }
        if c == '{' {
            let rest: String = chars[i + 1..].iter().collect();
            let is_quantifier = rest
                .find('}')
                .map(|end| {
                    let body = &rest[..end];
                    let mut parts = body.splitn(2, ',');
                    let a = parts.next().unwrap_or("");
                    let b = parts.next();
                    !a.is_empty()
                        && a.chars().all(|c| c.is_ascii_digit())
                        && b.is_none_or(|b| b.chars().all(|c| c.is_ascii_digit()))
                })
                .unwrap_or(false);
            if !is_quantifier {
                out.push_str("\\{");
                literal_open += 1;
                i += 1;
                continue;
            }
        }
        if c == '}' && literal_open > 0 {
            out.push_str("\\}");
            literal_open -= 1;
            i += 1;
            continue;
        }
        out.push(c);
        i += 1;
    }
    out
}

fn compile_pattern(pattern: &str) -> Result<Regex, regex::Error> {
    Regex::new(pattern).or_else(|_| Regex::new(&python_compatible_pattern(pattern)))
}

// ---- evaluation -----------------------------------------------------------

/// The response record a program sees as its parameter.
#[derive(Debug, Clone, Copy)]
pub struct ResponseView<'a> {
    pub text: &'a str,
    pub model: &'a str,
    pub vars: &'a BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Bool(bool),
    Number(f64),
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Bool(b) => write!(f, "{b}"),
            Outcome::Number(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone)]
enum Val<'a> {
    Str(String),
    Num(f64),
    Bool(bool),
    Record(ResponseView<'a>),
    Vars(&'a BTreeMap<String, String>),
}

impl Val<'_> {
    fn type_name(&self) -> &'static str {
        match self {
            Val::Str(_) => "string",
            Val::Num(_) => "number",
            Val::Bool(_) => "boolean",
            Val::Record(_) => "record",
            Val::Vars(_) => "vars",
        }
    }
}

/// A parsed program, reusable across responses.
#[derive(Debug)]
pub struct Program {
    body: Expr,
    regexes: Mutex<BTreeMap<String, Regex>>,
}

impl Program {
    pub fn parse(src: &str) -> Result<Program, ExprError> {
        let toks = lex(src)?;
        let mut p = Parser { toks, pos: 0, end: src.len(), param: String::new() };
        let body = p.program()?;
        Ok(Program { body, regexes: Mutex::new(BTreeMap::new()) })
    }

    /// Whether the program returns a boolean, when that is known without
    /// running it.
    pub fn returns_boolean(&self) -> Option<bool> {
        fn kind(e: &Expr) -> Option<bool> {
            match e {
                Expr::Bool(_) | Expr::Unary("not", _) => Some(true),
                Expr::Binary("and" | "or" | "==" | "!=" | "<" | "<=" | ">" | ">=", _, _) => Some(true),
                Expr::Binary("-" | "*" | "/", _, _) | Expr::Unary(_, _) | Expr::Num(_) => Some(false),
                Expr::Binary(_, a, b) => match (kind(a), kind(b)) {
                    (Some(false), Some(false)) => Some(false),
                    _ => None,
                },
                Expr::Call(name, _) => match name.as_str() {
                    "contains" | "matches" | "starts_with" | "ends_with" => Some(true),
                    "len" | "words" | "number" => Some(false),
                    _ => None,
                },
                Expr::If(_, a, b) => {
                    let (a, b) = (kind(a), kind(b));
                    if a == b {
                        a
                    } else {
                        None
                    }
                }
                _ => None,
            }
        }
        kind(&self.body)
    }

    pub fn evaluate(&self, response: ResponseView<'_>) -> Result<Outcome, ExprError> {
        match self.eval(&self.body, response)? {
            Val::Bool(b) => Ok(Outcome::Bool(b)),
            Val::Num(n) => Ok(Outcome::Number(n)),
            other => runtime(format!("evaluate must return a boolean or number, got {}", other.type_name())),
        }
    }

    fn eval<'a>(&self, e: &Expr, r: ResponseView<'a>) -> Result<Val<'a>, ExprError> {
        Ok(match e {
            Expr::Str(s) => Val::Str(s.clone()),
            Expr::Num(n) => Val::Num(*n),
            Expr::Bool(b) => Val::Bool(*b),
            Expr::Param => Val::Record(r),
            Expr::Field(base, name) => match (self.eval(base, r)?, name.as_str()) {
                (Val::Record(rec), "text") => Val::Str(rec.text.to_owned()),
                (Val::Record(rec), "model") => Val::Str(rec.model.to_owned()),
                (Val::Record(rec), "vars") => Val::Vars(rec.vars),
                (Val::Vars(vars), key) => match vars.get(key) {
                    Some(v) => Val::Str(v.clone()),
                    None => return runtime(format!("no variable named {key}")),
                },
                (other, key) => return runtime(format!("{} has no field {key}", other.type_name())),
            },
            Expr::Unary("not", inner) => Val::Bool(!self.truthy(inner, r)?),
            Expr::Unary(_, inner) => Val::Num(-self.num(inner, r)?),
            Expr::Binary("and", a, b) => Val::Bool(self.truthy(a, r)? && self.truthy(b, r)?),
            Expr::Binary("or", a, b) => Val::Bool(self.truthy(a, r)? || self.truthy(b, r)?),
            Expr::Binary(op, a, b) => {
                let (a, b) = (self.eval(a, r)?, self.eval(b, r)?);
                binary(op, a, b)?
            }
            Expr::If(c, a, b) => {
                if self.truthy(c, r)? {
                    self.eval(a, r)?
                } else {
                    self.eval(b, r)?
                }
            }
            Expr::Call(name, args) => {
                let args: Vec<Val> = args.iter().map(|a| self.eval(a, r)).collect::<Result<_, _>>()?;
                self.call(name, args)?
            }
        })
    }

    fn truthy(&self, e: &Expr, r: ResponseView<'_>) -> Result<bool, ExprError> {
        match self.eval(e, r)? {
            Val::Bool(b) => Ok(b),
            other => runtime(format!("expected boolean, got {}", other.type_name())),
        }
    }

    fn num(&self, e: &Expr, r: ResponseView<'_>) -> Result<f64, ExprError> {
        match self.eval(e, r)? {
            Val::Num(n) => Ok(n),
            other => runtime(format!("expected number, got {}", other.type_name())),
        }
    }

    fn call<'a>(&self, name: &str, args: Vec<Val<'a>>) -> Result<Val<'a>, ExprError> {
        let text = |v: &Val| match v {
            Val::Str(s) => Ok(s.clone()),
            other => runtime(format!("{name} expects text, got {}", other.type_name())),
        };
        Ok(match name {
            "contains" => Val::Bool(text(&args[0])?.contains(&text(&args[1])?)),
            "starts_with" => Val::Bool(text(&args[0])?.starts_with(&text(&args[1])?)),
            "ends_with" => Val::Bool(text(&args[0])?.ends_with(&text(&args[1])?)),
            "matches" => {
                let (subject, pattern) = (text(&args[0])?, text(&args[1])?);
                let mut cache = self.regexes.lock().unwrap();
                if !cache.contains_key(&pattern) {
                    let re = compile_pattern(&pattern)
                        .map_err(|e| ExprError::Runtime(format!("invalid regex: {e}")))?;
                    cache.insert(pattern.clone(), re);
                }
                Val::Bool(cache[&pattern].is_match(&subject))
            }
            "len" => Val::Num(text(&args[0])?.chars().count() as f64),
            "words" => Val::Num(text(&args[0])?.split_whitespace().count() as f64),
            "lower" => Val::Str(text(&args[0])?.to_lowercase()),
            "upper" => Val::Str(text(&args[0])?.to_uppercase()),
            "trim" => Val::Str(text(&args[0])?.trim().to_owned()),
            "number" => {
                let s = text(&args[0])?;
                match s.trim().parse::<f64>() {
                    Ok(n) => Val::Num(n),
                    Err(_) => return runtime(format!("cannot convert {s:?} to a number")),
                }
            }
            other => return runtime(format!("unknown function {other}")),
        })
    }
}

fn binary<'a>(op: &str, a: Val<'a>, b: Val<'a>) -> Result<Val<'a>, ExprError> {
    Ok(match (op, a, b) {
        ("+", Val::Num(x), Val::Num(y)) => Val::Num(x + y),
        ("+", Val::Str(x), Val::Str(y)) => Val::Str(x + &y),
        ("-", Val::Num(x), Val::Num(y)) => Val::Num(x - y),
        ("*", Val::Num(x), Val::Num(y)) => Val::Num(x * y),
        ("/", Val::Num(_), Val::Num(0.0)) => return runtime("division by zero"),
        ("/", Val::Num(x), Val::Num(y)) => Val::Num(x / y),
        ("==", a, b) => Val::Bool(equal(&a, &b)?),
        ("!=", a, b) => Val::Bool(!equal(&a, &b)?),
        (op @ ("<" | "<=" | ">" | ">="), Val::Num(x), Val::Num(y)) => Val::Bool(match op {
            "<" => x < y,
            "<=" => x <= y,
            ">" => x > y,
            _ => x >= y,
        }),
        (op @ ("<" | "<=" | ">" | ">="), Val::Str(x), Val::Str(y)) => Val::Bool(match op {
            "<" => x < y,
            "<=" => x <= y,
            ">" => x > y,
            _ => x >= y,
        }),
        (op, a, b) => {
            return runtime(format!("cannot apply {op} to {} and {}", a.type_name(), b.type_name()))
        }
    })
}

fn equal(a: &Val, b: &Val) -> Result<bool, ExprError> {
    match (a, b) {
        (Val::Str(x), Val::Str(y)) => Ok(x == y),
        (Val::Num(x), Val::Num(y)) => Ok(x == y),
        (Val::Bool(x), Val::Bool(y)) => Ok(x == y),
        _ => runtime(format!("cannot compare {} with {}", a.type_name(), b.type_name())),
    }
}
