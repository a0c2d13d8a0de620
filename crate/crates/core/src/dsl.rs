//! Expression language for system definitions.
//!
//! Expressions are trees over numeric literals, the time variable `t`, state
//! variables `x1..xn`, the unary functions `neg, sin, cos, exp, ln, sqrt,
//! atan, abs`, and the binary operators `+ - * / ^`. Standard infix
//! precedence (`^` above unary minus above `* /` above `+ -`), left
//! associativity except `^` which is right associative, parentheses and
//! function-call syntax `f(e)`. Whitespace is insignificant.
//!
//! Evaluation follows IEEE-754 double semantics except that division by zero
//! and domain violations (`ln` of a non-positive value, `sqrt` of a negative
//! value, fractional powers of negative bases) are reported as [`EvalError`]s
//! instead of silently producing infinities or NaNs.
//!
//! [`diff_expr`] returns exact symbolic derivatives; repeated application
//! yields higher orders. `abs` is parseable but rejected by differentiation.
//! Derivative trees are constant-folded (literal arithmetic and neutral /
//! absorbing elements) but not otherwise simplified.

use std::fmt;

use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Sin,
    Cos,
    Exp,
    Ln,
    Sqrt,
    Atan,
    Abs,
}

impl UnaryOp {
    fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Exp => "exp",
            UnaryOp::Ln => "ln",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Atan => "atan",
            UnaryOp::Abs => "abs",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "neg" => UnaryOp::Neg,
            "sin" => UnaryOp::Sin,
            "cos" => UnaryOp::Cos,
            "exp" => UnaryOp::Exp,
            "ln" => UnaryOp::Ln,
            "sqrt" => UnaryOp::Sqrt,
            "atan" => UnaryOp::Atan,
            "abs" => UnaryOp::Abs,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

/// Parsed expression tree. `Var(i)` is the 0-based index of `x{i+1}`.
#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Num(f64),
    Time,
    Var(usize),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
}

/// Evaluation environment; `x.len()` must equal the declared dimension.
#[derive(Clone, Copy, Debug)]
pub struct Env<'a> {
    pub t: f64,
    pub x: &'a [f64],
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("parse error at position {pos}: expected {expected}, found {found}")]
    Syntax { pos: usize, expected: String, found: String },
    #[error("unknown identifier `{name}` at position {pos}")]
    UnknownIdentifier { name: String, pos: usize },
    #[error("variable x{index} exceeds declared dimension {dim} (position {pos})")]
    Dimension { index: usize, dim: usize, pos: usize },
}

impl ParseError {
    pub fn position(&self) -> usize {
        match self {
            ParseError::Syntax { pos, .. }
            | ParseError::UnknownIdentifier { pos, .. }
            | ParseError::Dimension { pos, .. } => *pos,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("division by zero in `{subexpr}`")]
    DivisionByZero { subexpr: String },
    #[error("domain violation in `{subexpr}`: {detail}")]
    Domain { subexpr: String, detail: String },
    #[error("non-finite result in `{subexpr}`")]
    NonFinite { subexpr: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("`abs` is not differentiable")]
    NonDifferentiable,
}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(v) => format!("number `{v}`"),
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Star => "`*`".into(),
            Tok::Slash => "`/`".into(),
            Tok::Caret => "`^`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
        }
    }
}

struct Lexed {
    tok: Tok,
    pos: usize,
}

fn lex(src: &str) -> Result<Vec<Lexed>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\r' | '\n' => i += 1,
            '+' => { out.push(Lexed { tok: Tok::Plus, pos: i }); i += 1; }
            '-' => { out.push(Lexed { tok: Tok::Minus, pos: i }); i += 1; }
            '*' => { out.push(Lexed { tok: Tok::Star, pos: i }); i += 1; }
            '/' => { out.push(Lexed { tok: Tok::Slash, pos: i }); i += 1; }
            '^' => { out.push(Lexed { tok: Tok::Caret, pos: i }); i += 1; }
            '(' => { out.push(Lexed { tok: Tok::LParen, pos: i }); i += 1; }
            ')' => { out.push(Lexed { tok: Tok::RParen, pos: i }); i += 1; }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                // Optional exponent: e/E [+-]? digits.
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &src[start..i];
                let value: f64 = text.parse().map_err(|_| ParseError::Syntax {
                    pos: start,
                    expected: "a number".into(),
                    found: format!("`{text}`"),
                })?;
                out.push(Lexed { tok: Tok::Num(value), pos: start });
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                out.push(Lexed { tok: Tok::Ident(src[start..i].to_string()), pos: start });
            }
            other => {
                return Err(ParseError::Syntax {
                    pos: i,
                    expected: "a token".into(),
                    found: format!("`{other}`"),
                })
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

struct Parser {
    toks: Vec<Lexed>,
    i: usize,
    n: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.i).map(|l| &l.tok)
    }

    fn pos(&self) -> usize {
        self.toks.get(self.i).map_or(self.end, |l| l.pos)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.i).map(|l| l.tok.clone());
        if t.is_some() {
            self.i += 1;
        }
        t
    }

    fn found(&self) -> String {
        self.peek().map_or("end of input".into(), |t| t.describe())
    }

    fn syntax(&self, expected: &str) -> ParseError {
        ParseError::Syntax { pos: self.pos(), expected: expected.into(), found: self.found() }
    }

    // expr := term (('+' | '-') term)*
    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.bump();
                    lhs = Expr::Binary(BinOp::Add, Box::new(lhs), Box::new(self.term()?));
                }
                Some(Tok::Minus) => {
                    self.bump();
                    lhs = Expr::Binary(BinOp::Sub, Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    // term := unary (('*' | '/') unary)*
    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.bump();
                    lhs = Expr::Binary(BinOp::Mul, Box::new(lhs), Box::new(self.unary()?));
                }
                Some(Tok::Slash) => {
                    self.bump();
                    lhs = Expr::Binary(BinOp::Div, Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    // unary := '-' unary | power
    fn unary(&mut self) -> Result<Expr, ParseError> {
        if matches!(self.peek(), Some(Tok::Minus)) {
            self.bump();
            return Ok(Expr::Unary(UnaryOp::Neg, Box::new(self.unary()?)));
        }
        self.power()
    }

    // power := atom ('^' unary)?   (right associative, binds above unary '-')
    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if matches!(self.peek(), Some(Tok::Caret)) {
            self.bump();
            let exp = self.unary()?;
            return Ok(Expr::Binary(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let pos = self.pos();
        let found = self.found();
        match self.bump() {
            Some(Tok::Num(v)) => Ok(Expr::Num(v)),
            Some(Tok::LParen) => {
                let e = self.expr()?;
                if matches!(self.peek(), Some(Tok::RParen)) {
                    self.bump();
                    Ok(e)
                } else {
                    Err(self.syntax("`)`"))
                }
            }
            Some(Tok::Ident(name)) => self.ident(name, pos),
            _ => Err(ParseError::Syntax { pos, expected: "an operand".into(), found }),
        }
    }

    fn ident(&mut self, name: String, pos: usize) -> Result<Expr, ParseError> {
        if name == "t" {
            return Ok(Expr::Time);
        }
        if let Some(idx) = parse_var_index(&name) {
            if idx == 0 || idx > self.n {
                return Err(ParseError::Dimension { index: idx, dim: self.n, pos });
            }
            return Ok(Expr::Var(idx - 1));
        }
        if let Some(op) = UnaryOp::from_name(&name) {
            if !matches!(self.peek(), Some(Tok::LParen)) {
                return Err(self.syntax("`(` after function name"));
            }
            self.bump();
            let arg = self.expr()?;
            if !matches!(self.peek(), Some(Tok::RParen)) {
                return Err(self.syntax("`)`"));
            }
            self.bump();
            return Ok(Expr::Unary(op, Box::new(arg)));
        }
        Err(ParseError::UnknownIdentifier { name, pos })
    }
}

fn parse_var_index(name: &str) -> Option<usize> {
    let rest = name.strip_prefix('x')?;
    if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    rest.parse().ok()
}

/// Parse `text` against declared state dimension `n`.
pub fn parse_expr(text: &str, n: usize) -> Result<Expr, ParseError> {
    let toks = lex(text)?;
    let mut p = Parser { toks, i: 0, n, end: text.len() };
    let e = p.expr()?;
    if p.peek().is_some() {
        return Err(p.syntax("end of input or an operator"));
    }
    Ok(e)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Evaluate `e` in `env`. Domain violations are errors, never silent ±inf/NaN.
pub fn eval_expr(e: &Expr, env: &Env) -> Result<f64, EvalError> {
    let v = eval_inner(e, env)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(EvalError::NonFinite { subexpr: e.to_string() })
    }
}

fn eval_inner(e: &Expr, env: &Env) -> Result<f64, EvalError> {
    match e {
        Expr::Num(v) => Ok(*v),
        Expr::Time => Ok(env.t),
        Expr::Var(i) => Ok(env.x[*i]),
        Expr::Unary(op, a) => {
            let v = eval_inner(a, env)?;
            let r = match op {
                UnaryOp::Neg => -v,
                UnaryOp::Sin => v.sin(),
                UnaryOp::Cos => v.cos(),
                UnaryOp::Exp => v.exp(),
                UnaryOp::Ln => {
                    if v <= 0.0 {
                        return Err(EvalError::Domain {
                            subexpr: e.to_string(),
                            detail: format!("ln of non-positive value {v}"),
                        });
                    }
                    v.ln()
                }
                UnaryOp::Sqrt => {
                    if v < 0.0 {
                        return Err(EvalError::Domain {
                            subexpr: e.to_string(),
                            detail: format!("sqrt of negative value {v}"),
                        });
                    }
                    v.sqrt()
                }
                UnaryOp::Atan => v.atan(),
                UnaryOp::Abs => v.abs(),
            };
            if r.is_finite() { Ok(r) } else { Err(EvalError::NonFinite { subexpr: e.to_string() }) }
        }
        Expr::Binary(op, a, b) => {
            let va = eval_inner(a, env)?;
            let vb = eval_inner(b, env)?;
            let r = match op {
                BinOp::Add => va + vb,
                BinOp::Sub => va - vb,
                BinOp::Mul => va * vb,
                BinOp::Div => {
                    if vb == 0.0 {
                        return Err(EvalError::DivisionByZero { subexpr: e.to_string() });
                    }
                    va / vb
                }
                BinOp::Pow => {
                    let r = va.powf(vb);
                    if r.is_nan() {
                        return Err(EvalError::Domain {
                            subexpr: e.to_string(),
                            detail: format!("{va}^{vb} is undefined"),
                        });
                    }
                    r
                }
            };
            if r.is_finite() { Ok(r) } else { Err(EvalError::NonFinite { subexpr: e.to_string() }) }
        }
    }
}

// ---------------------------------------------------------------------------
// Symbolic differentiation
// ---------------------------------------------------------------------------

/// Differentiation variable: time or the 0-based state index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiffVar {
    Time,
    X(usize),
}

/// Exact symbolic derivative of `e` with respect to `var`.
pub fn diff_expr(e: &Expr, var: DiffVar) -> Result<Expr, DiffError> {
    Ok(match e {
        Expr::Num(_) => Expr::Num(0.0),
        Expr::Time => Expr::Num(if var == DiffVar::Time { 1.0 } else { 0.0 }),
        Expr::Var(i) => Expr::Num(if var == DiffVar::X(*i) { 1.0 } else { 0.0 }),
        Expr::Unary(op, a) => {
            let da = diff_expr(a, var)?;
            match op {
                UnaryOp::Neg => neg(da),
                UnaryOp::Sin => mul(un(UnaryOp::Cos, (**a).clone()), da),
                UnaryOp::Cos => neg(mul(un(UnaryOp::Sin, (**a).clone()), da)),
                UnaryOp::Exp => mul(un(UnaryOp::Exp, (**a).clone()), da),
                UnaryOp::Ln => div(da, (**a).clone()),
                UnaryOp::Sqrt => div(da, mul(Expr::Num(2.0), un(UnaryOp::Sqrt, (**a).clone()))),
                UnaryOp::Atan => div(
                    da,
                    add(Expr::Num(1.0), pow((**a).clone(), Expr::Num(2.0))),
                ),
                UnaryOp::Abs => return Err(DiffError::NonDifferentiable),
            }
        }
        Expr::Binary(op, a, b) => {
            let u = (**a).clone();
            let v = (**b).clone();
            let du = diff_expr(a, var)?;
            let dv = diff_expr(b, var)?;
            match op {
                BinOp::Add => add(du, dv),
                BinOp::Sub => sub(du, dv),
                BinOp::Mul => add(mul(du, v.clone()), mul(u.clone(), dv)),
                BinOp::Div => div(
                    sub(mul(du, v.clone()), mul(u.clone(), dv)),
                    pow(v, Expr::Num(2.0)),
                ),
                BinOp::Pow => match (&u, &v) {
                    // Constant exponent: c * u^(c-1) * u'.
                    (_, Expr::Num(c)) => mul(
                        mul(Expr::Num(*c), pow(u.clone(), Expr::Num(c - 1.0))),
                        du,
                    ),
                    // Constant base: c^v * ln(c) * v'.
                    (Expr::Num(c), _) => mul(
                        mul(pow(u.clone(), v.clone()), Expr::Num(c.ln())),
                        dv,
                    ),
                    // General u^v * (v' ln u + v u'/u).
                    _ => mul(
                        pow(u.clone(), v.clone()),
                        add(mul(dv, un(UnaryOp::Ln, u.clone())), mul(v, div(du, u))),
                    ),
                },
            }
        }
    })
}

// Folding constructors: literal arithmetic plus neutral/absorbing elements.

fn is_zero(e: &Expr) -> bool {
    matches!(e, Expr::Num(v) if *v == 0.0)
}

fn is_one(e: &Expr) -> bool {
    matches!(e, Expr::Num(v) if *v == 1.0)
}

fn add(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(x), Expr::Num(y)) if (x + y).is_finite() => Expr::Num(x + y),
        _ if is_zero(&a) => b,
        _ if is_zero(&b) => a,
        _ => Expr::Binary(BinOp::Add, Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(x), Expr::Num(y)) if (x - y).is_finite() => Expr::Num(x - y),
        _ if is_zero(&b) => a,
        _ if is_zero(&a) => neg(b),
        _ => Expr::Binary(BinOp::Sub, Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(x), Expr::Num(y)) if (x * y).is_finite() => Expr::Num(x * y),
        _ if is_zero(&a) || is_zero(&b) => Expr::Num(0.0),
        _ if is_one(&a) => b,
        _ if is_one(&b) => a,
        _ => Expr::Binary(BinOp::Mul, Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(x), Expr::Num(y)) if *y != 0.0 && (x / y).is_finite() => Expr::Num(x / y),
        _ if is_zero(&a) && !is_zero(&b) => Expr::Num(0.0),
        _ if is_one(&b) => a,
        _ => Expr::Binary(BinOp::Div, Box::new(a), Box::new(b)),
    }
}

fn pow(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(x), Expr::Num(y)) if x.powf(*y).is_finite() => Expr::Num(x.powf(*y)),
        _ if is_one(&b) => a,
        _ if is_zero(&b) => Expr::Num(1.0),
        _ => Expr::Binary(BinOp::Pow, Box::new(a), Box::new(b)),
    }
}

fn neg(a: Expr) -> Expr {
    match &a {
        Expr::Num(v) => Expr::Num(-v),
        Expr::Unary(UnaryOp::Neg, inner) => (**inner).clone(),
        _ => Expr::Unary(UnaryOp::Neg, Box::new(a)),
    }
}

fn un(op: UnaryOp, a: Expr) -> Expr {
    if let Expr::Num(v) = &a {
        let r = match op {
            UnaryOp::Neg => -v,
            UnaryOp::Sin => v.sin(),
            UnaryOp::Cos => v.cos(),
            UnaryOp::Exp => v.exp(),
            UnaryOp::Ln => v.ln(),
            UnaryOp::Sqrt => v.sqrt(),
            UnaryOp::Atan => v.atan(),
            UnaryOp::Abs => v.abs(),
        };
        if r.is_finite() {
            return Expr::Num(r);
        }
    }
    Expr::Unary(op, Box::new(a))
}

// ---------------------------------------------------------------------------
// Pretty printing
// ---------------------------------------------------------------------------

fn prec(e: &Expr) -> u8 {
    match e {
        Expr::Binary(BinOp::Add | BinOp::Sub, ..) => 1,
        Expr::Binary(BinOp::Mul | BinOp::Div, ..) => 2,
        Expr::Unary(UnaryOp::Neg, _) => 3,
        Expr::Num(v) if v.is_sign_negative() => 3,
        Expr::Binary(BinOp::Pow, ..) => 4,
        _ => 6,
    }
}

fn fmt_at(e: &Expr, f: &mut fmt::Formatter<'_>, min_prec: u8) -> fmt::Result {
    let p = prec(e);
    let parens = p < min_prec;
    if parens {
        write!(f, "(")?;
    }
    match e {
        Expr::Num(v) => write!(f, "{v}")?,
        Expr::Time => write!(f, "t")?,
        Expr::Var(i) => write!(f, "x{}", i + 1)?,
        Expr::Unary(UnaryOp::Neg, a) => {
            write!(f, "-")?;
            fmt_at(a, f, 2)?;
        }
        Expr::Unary(op, a) => {
            write!(f, "{}(", op.name())?;
            fmt_at(a, f, 0)?;
            write!(f, ")")?;
        }
        Expr::Binary(op, a, b) => {
            let (sym, lp, rp) = match op {
                BinOp::Add => ("+", 1, 2),
                BinOp::Sub => ("-", 1, 2),
                BinOp::Mul => ("*", 2, 3),
                BinOp::Div => ("/", 2, 3),
                BinOp::Pow => ("^", 5, 4),
            };
            fmt_at(a, f, lp)?;
            write!(f, " {sym} ")?;
            fmt_at(b, f, rp)?;
        }
    }
    if parens {
        write!(f, ")")?;
    }
    Ok(())
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt_at(self, f, 0)
    }
}
