//! Expression language for dynamics and running costs.
//!
//! ```text
//! expr   := term (('+'|'-') term)*
//! term   := factor (('*'|'/') factor)*
//! factor := base ('^' int)?
//! base   := number | ident | func '(' expr ')' | '(' expr ')' | '-' factor
//! ```
//!
//! Identifiers are `x1..xn`, `u1..um` and the functions `sin cos exp tanh ln
//! cosh`. Division is only allowed by constant subexpressions, so every
//! parsed expression is analytic wherever its function calls are.

use std::fmt;

use thiserror::Error;

use crate::monomial_tensor::TensorAlgebra;
use crate::power_series::{compose_univariate, mul_scalar, PowerSeries, ScalarSeries, SeriesError};
use crate::univariate::UnivariateFn;

/// Source location of a node: byte range plus 1-based line/column of its start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub line: usize,
    pub col: usize,
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}, column {}", self.line, self.col)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("{span}: syntax error: {msg}")]
    Syntax { span: Span, msg: String },
    #[error("{span}: unknown identifier `{name}`")]
    UnknownIdentifier { span: Span, name: String },
    #[error("{span}: `{name}` takes exactly one argument")]
    Arity { span: Span, name: String },
    #[error("{span}: division by a non-constant expression")]
    NonConstantDivisor { span: Span },
    #[error("{span}: division by zero")]
    DivisionByZero { span: Span },
    #[error("{span}: exponent must be a positive integer literal")]
    BadExponent { span: Span },
    #[error("{span}: `{found}` is out of range (model has {limit})")]
    IndexOutOfRange { span: Span, found: String, limit: usize },
    #[error("{span}: input appears in an expression that must depend on the state only")]
    InputInStateExpr { span: Span },
    #[error("{span}: term is not affine in the inputs: `{snippet}`")]
    NotAffine { span: Span, snippet: String },
    #[error("{span}: {source}")]
    Series { span: Span, source: SeriesError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Tanh,
    Ln,
    Cosh,
}

impl Func {
    const ALL: [Func; 6] = [Func::Sin, Func::Cos, Func::Exp, Func::Tanh, Func::Ln, Func::Cosh];

    pub fn name(self) -> &'static str {
        self.univariate().name()
    }

    pub fn univariate(self) -> UnivariateFn {
        match self {
            Func::Sin => UnivariateFn::Sin,
            Func::Cos => UnivariateFn::Cos,
            Func::Exp => UnivariateFn::Exp,
            Func::Tanh => UnivariateFn::Tanh,
            Func::Ln => UnivariateFn::Ln,
            Func::Cosh => UnivariateFn::Cosh,
        }
    }

    fn from_name(s: &str) -> Option<Func> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExprKind {
    Num(f64),
    /// `x{i+1}`
    State(usize),
    /// `u{i+1}`
    Input(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, u32),
    Call(Func, Box<Expr>),
}

/// Equality ignores spans.
#[derive(Debug, Clone)]
pub struct Expr {
    pub kind: ExprKind,
    pub span: Span,
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
    }
}

impl Expr {
    pub fn new(kind: ExprKind) -> Self {
        Self {
            kind,
            span: Span::default(),
        }
    }

    fn spanned(kind: ExprKind, span: Span) -> Self {
        Self { kind, span }
    }

    pub fn num(v: f64) -> Self {
        Self::new(ExprKind::Num(v))
    }

    pub fn state(i: usize) -> Self {
        Self::new(ExprKind::State(i))
    }

    pub fn sum(a: Expr, b: Expr) -> Self {
        Self::new(ExprKind::Add(Box::new(a), Box::new(b)))
    }

    pub fn product(a: Expr, b: Expr) -> Self {
        Self::new(ExprKind::Mul(Box::new(a), Box::new(b)))
    }

    pub fn negated(a: Expr) -> Self {
        Self::new(ExprKind::Neg(Box::new(a)))
    }

    /// `Σ_j c_j e_j`, skipping zero weights; an all-zero combination is `0`.
    pub fn linear_combination(terms: &[(f64, Expr)]) -> Self {
        let mut acc: Option<Expr> = None;
        for (c, e) in terms {
            if *c == 0.0 {
                continue;
            }
            let term = if *c == 1.0 {
                e.clone()
            } else {
                Expr::product(Expr::num(*c), e.clone())
            };
            acc = Some(match acc {
                None => term,
                Some(a) => Expr::sum(a, term),
            });
        }
        acc.unwrap_or_else(|| Expr::num(0.0))
    }

    fn children(&self) -> Vec<&Expr> {
        match &self.kind {
            ExprKind::Num(_) | ExprKind::State(_) | ExprKind::Input(_) => vec![],
            ExprKind::Neg(a) | ExprKind::Pow(a, _) | ExprKind::Call(_, a) => vec![a],
            ExprKind::Add(a, b) | ExprKind::Sub(a, b) | ExprKind::Mul(a, b) | ExprKind::Div(a, b) => {
                vec![a, b]
            }
        }
    }

    /// Largest state and input index used (1-based; 0 when absent).
    pub fn max_indices(&self) -> (usize, usize) {
        let own = match self.kind {
            ExprKind::State(i) => (i + 1, 0),
            ExprKind::Input(i) => (0, i + 1),
            _ => (0, 0),
        };
        self.children().into_iter().fold(own, |(a, b), c| {
            let (ca, cb) = c.max_indices();
            (a.max(ca), b.max(cb))
        })
    }

    pub fn has_input(&self) -> bool {
        matches!(self.kind, ExprKind::Input(_)) || self.children().iter().any(|c| c.has_input())
    }

    pub fn has_variable(&self) -> bool {
        matches!(self.kind, ExprKind::Input(_) | ExprKind::State(_))
            || self.children().iter().any(|c| c.has_variable())
    }

    /// Rejects variables with indices beyond `n` states or `m` inputs.
    pub fn check_dims(&self, n: usize, m: usize) -> Result<(), ExprError> {
        match self.kind {
            ExprKind::State(i) if i >= n => {
                return Err(ExprError::IndexOutOfRange {
                    span: self.span,
                    found: format!("x{}", i + 1),
                    limit: n,
                })
            }
            ExprKind::Input(i) if i >= m => {
                return Err(ExprError::IndexOutOfRange {
                    span: self.span,
                    found: format!("u{}", i + 1),
                    limit: m,
                })
            }
            _ => {}
        }
        self.children().into_iter().try_for_each(|c| c.check_dims(n, m))
    }

    /// Value of a variable-free expression.
    pub fn const_value(&self) -> Option<f64> {
        if self.has_variable() {
            None
        } else {
            Some(self.eval(&[], &[]))
        }
    }

    /// Point evaluation; indices beyond the slices read as zero.
    pub fn eval(&self, x: &[f64], u: &[f64]) -> f64 {
        match &self.kind {
            ExprKind::Num(v) => *v,
            ExprKind::State(i) => x.get(*i).copied().unwrap_or(0.0),
            ExprKind::Input(i) => u.get(*i).copied().unwrap_or(0.0),
            ExprKind::Neg(a) => -a.eval(x, u),
            ExprKind::Add(a, b) => a.eval(x, u) + b.eval(x, u),
            ExprKind::Sub(a, b) => a.eval(x, u) - b.eval(x, u),
            ExprKind::Mul(a, b) => a.eval(x, u) * b.eval(x, u),
            ExprKind::Div(a, b) => a.eval(x, u) / b.eval(x, u),
            ExprKind::Pow(a, p) => a.eval(x, u).powi(*p as i32),
            ExprKind::Call(f, a) => f.univariate().eval(a.eval(x, u)),
        }
    }

    /// Replaces every `x_i` by `map[i]`.
    pub fn substitute_states(&self, map: &[Expr]) -> Expr {
        let sub = |e: &Expr| Box::new(e.substitute_states(map));
        let kind = match &self.kind {
            ExprKind::State(i) => return map[*i].clone(),
            ExprKind::Num(_) | ExprKind::Input(_) => self.kind.clone(),
            ExprKind::Neg(a) => ExprKind::Neg(sub(a)),
            ExprKind::Add(a, b) => ExprKind::Add(sub(a), sub(b)),
            ExprKind::Sub(a, b) => ExprKind::Sub(sub(a), sub(b)),
            ExprKind::Mul(a, b) => ExprKind::Mul(sub(a), sub(b)),
            ExprKind::Div(a, b) => ExprKind::Div(sub(a), sub(b)),
            ExprKind::Pow(a, p) => ExprKind::Pow(sub(a), *p),
            ExprKind::Call(f, a) => ExprKind::Call(*f, sub(a)),
        };
        Expr::spanned(kind, self.span)
    }

    /// Truncated Taylor series about the origin in the state variables.
    pub fn to_series(&self, alg: &TensorAlgebra, order: usize) -> Result<ScalarSeries, ExprError> {
        let wrap = |source: SeriesError| ExprError::Series {
            span: self.span,
            source,
        };
        Ok(match &self.kind {
            ExprKind::Num(v) => PowerSeries::constant(alg, &[*v], order),
            ExprKind::State(i) => {
                if *i >= alg.n() {
                    return Err(ExprError::IndexOutOfRange {
                        span: self.span,
                        found: format!("x{}", i + 1),
                        limit: alg.n(),
                    });
                }
                PowerSeries::variable(alg, *i, order)
            }
            ExprKind::Input(_) => return Err(ExprError::InputInStateExpr { span: self.span }),
            ExprKind::Neg(a) => a.to_series(alg, order)?.scale(-1.0),
            ExprKind::Add(a, b) => a
                .to_series(alg, order)?
                .add(&b.to_series(alg, order)?)
                .map_err(wrap)?,
            ExprKind::Sub(a, b) => a
                .to_series(alg, order)?
                .sub(&b.to_series(alg, order)?)
                .map_err(wrap)?,
            ExprKind::Mul(a, b) => {
                if let Some(c) = a.const_value() {
                    b.to_series(alg, order)?.scale(c)
                } else if let Some(c) = b.const_value() {
                    a.to_series(alg, order)?.scale(c)
                } else {
                    let sa = a.to_series(alg, order)?;
                    let sb = b.to_series(alg, order)?;
                    mul_scalar(alg, &sa, &sb, order).map_err(wrap)?
                }
            }
            ExprKind::Div(a, b) => {
                let d = b
                    .const_value()
                    .ok_or(ExprError::NonConstantDivisor { span: b.span })?;
                if d == 0.0 {
                    return Err(ExprError::DivisionByZero { span: b.span });
                }
                a.to_series(alg, order)?.scale(1.0 / d)
            }
            ExprKind::Pow(a, p) => {
                let base = a.to_series(alg, order)?;
                let mut result: Option<ScalarSeries> = None;
                let mut sq = base;
                let mut e = *p;
                // binary exponentiation
                loop {
                    if e & 1 == 1 {
                        result = Some(match result {
                            None => sq.clone(),
                            Some(r) => mul_scalar(alg, &r, &sq, order).map_err(wrap)?,
                        });
                    }
                    e >>= 1;
                    if e == 0 {
                        break;
                    }
                    sq = mul_scalar(alg, &sq, &sq, order).map_err(wrap)?;
                }
                result.expect("exponent is positive")
            }
            ExprKind::Call(f, a) => {
                let inner = a.to_series(alg, order)?;
                let c = inner.coeff(0)[(0, 0)];
                let outer = f.univariate().taylor(c, order).map_err(wrap)?;
                let mut shifted = inner;
                shifted.coeff_mut(0)[(0, 0)] = 0.0;
                compose_univariate(alg, &outer, &shifted, order).map_err(wrap)?
            }
        })
    }

    /// Splits an expression affine in the inputs into `f + Σ_i g_i u_i`.
    ///
    /// `None` entries are identically zero. A product of two input-dependent
    /// factors, a power or function of an input, or an input in a divisor is
    /// reported at the offending subtree.
    pub fn split_affine(&self, m: usize) -> Result<AffineSplit, ExprError> {
        let not_affine = |e: &Expr| ExprError::NotAffine {
            span: e.span,
            snippet: e.to_string(),
        };
        let ex = |k: ExprKind| Expr::spanned(k, self.span);
        let map2 = |a: Option<Expr>, b: Option<Expr>, mk: fn(Box<Expr>, Box<Expr>) -> ExprKind, neg_b: bool| {
            match (a, b) {
                (None, None) => None,
                (Some(a), None) => Some(a),
                (None, Some(b)) => Some(if neg_b {
                    ex(ExprKind::Neg(Box::new(b)))
                } else {
                    b
                }),
                (Some(a), Some(b)) => Some(ex(mk(Box::new(a), Box::new(b)))),
            }
        };
        Ok(match &self.kind {
            ExprKind::Num(v) => AffineSplit {
                f: (*v != 0.0).then(|| self.clone()),
                g: vec![None; m],
            },
            ExprKind::State(_) => AffineSplit {
                f: Some(self.clone()),
                g: vec![None; m],
            },
            ExprKind::Input(i) => {
                if *i >= m {
                    return Err(ExprError::IndexOutOfRange {
                        span: self.span,
                        found: format!("u{}", i + 1),
                        limit: m,
                    });
                }
                let mut g = vec![None; m];
                g[*i] = Some(Expr::spanned(ExprKind::Num(1.0), self.span));
                AffineSplit { f: None, g }
            }
            ExprKind::Neg(a) => {
                let s = a.split_affine(m)?;
                let neg = |e: Option<Expr>| e.map(|e| ex(ExprKind::Neg(Box::new(e))));
                AffineSplit {
                    f: neg(s.f),
                    g: s.g.into_iter().map(neg).collect(),
                }
            }
            ExprKind::Add(a, b) | ExprKind::Sub(a, b) => {
                let is_sub = matches!(self.kind, ExprKind::Sub(..));
                let mk: fn(Box<Expr>, Box<Expr>) -> ExprKind =
                    if is_sub { ExprKind::Sub } else { ExprKind::Add };
                let (sa, sb) = (a.split_affine(m)?, b.split_affine(m)?);
                AffineSplit {
                    f: map2(sa.f, sb.f, mk, is_sub),
                    g: sa
                        .g
                        .into_iter()
                        .zip(sb.g)
                        .map(|(x, y)| map2(x, y, mk, is_sub))
                        .collect(),
                }
            }
            ExprKind::Mul(a, b) => {
                let (ua, ub) = (a.has_input(), b.has_input());
                if ua && ub {
                    return Err(not_affine(self));
                }
                let (lin, coef, lin_left) = if ua { (a, b, true) } else { (b, a, false) };
                if !ua && !ub {
                    return Ok(AffineSplit {
                        f: Some(self.clone()),
                        g: vec![None; m],
                    });
                }
                let s = lin.split_affine(m)?;
                let times = |e: Option<Expr>| {
                    e.map(|e| {
                        if lin_left {
                            ex(ExprKind::Mul(Box::new(e), coef.clone()))
                        } else {
                            ex(ExprKind::Mul(coef.clone(), Box::new(e)))
                        }
                    })
                };
                AffineSplit {
                    f: times(s.f),
                    g: s.g.into_iter().map(times).collect(),
                }
            }
            ExprKind::Div(a, b) => {
                if b.has_input() {
                    return Err(not_affine(self));
                }
                let s = a.split_affine(m)?;
                let over = |e: Option<Expr>| e.map(|e| ex(ExprKind::Div(Box::new(e), b.clone())));
                AffineSplit {
                    f: over(s.f),
                    g: s.g.into_iter().map(over).collect(),
                }
            }
            ExprKind::Pow(a, p) => {
                if !a.has_input() {
                    AffineSplit {
                        f: Some(self.clone()),
                        g: vec![None; m],
                    }
                } else if *p == 1 {
                    a.split_affine(m)?
                } else {
                    return Err(not_affine(self));
                }
            }
            ExprKind::Call(..) => {
                if self.has_input() {
                    return Err(not_affine(self));
                }
                AffineSplit {
                    f: Some(self.clone()),
                    g: vec![None; m],
                }
            }
        })
    }
}

/// `expr = f + Σ_i g[i]·u_i`; `None` stands for zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineSplit {
    pub f: Option<Expr>,
    pub g: Vec<Option<Expr>>,
}

/// Fully parenthesized form that parses back to the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ExprKind::Num(v) => {
                if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) {
                    write!(f, "(-{})", -v)
                } else {
                    write!(f, "{v}")
                }
            }
            ExprKind::State(i) => write!(f, "x{}", i + 1),
            ExprKind::Input(i) => write!(f, "u{}", i + 1),
            ExprKind::Neg(a) => write!(f, "(-{a})"),
            ExprKind::Add(a, b) => write!(f, "({a} + {b})"),
            ExprKind::Sub(a, b) => write!(f, "({a} - {b})"),
            ExprKind::Mul(a, b) => write!(f, "({a} * {b})"),
            ExprKind::Div(a, b) => write!(f, "({a} / {b})"),
            ExprKind::Pow(a, p) => write!(f, "({a}^{p})"),
            ExprKind::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
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
    Comma,
    End,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    span: Span,
    /// Original text, kept to validate integer exponents.
    text: String,
}

fn lex(src: &str) -> Result<Vec<Token>, ExprError> {
    let mut out = Vec::new();
    let mut line = 1;
    let mut col = 1;
    let mut it = src.char_indices().peekable();
    while let Some(&(start, ch)) = it.peek() {
        let span_at = |end: usize, line: usize, col: usize| Span {
            start,
            end,
            line,
            col,
        };
        if ch == '\n' {
            it.next();
            line += 1;
            col = 1;
            continue;
        }
        if ch.is_whitespace() {
            it.next();
            col += 1;
            continue;
        }
        let single = match ch {
            '+' => Some(Tok::Plus),
            '-' | '\u{2212}' => Some(Tok::Minus),
            '*' => Some(Tok::Star),
            '/' => Some(Tok::Slash),
            '^' => Some(Tok::Caret),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            ',' => Some(Tok::Comma),
            _ => None,
        };
        if let Some(tok) = single {
            it.next();
            out.push(Token {
                tok,
                span: span_at(start + ch.len_utf8(), line, col),
                text: ch.to_string(),
            });
            col += 1;
            continue;
        }
        if ch.is_ascii_digit() || ch == '.' {
            let mut end = start;
            let mut prev = ' ';
            while let Some(&(i, c)) = it.peek() {
                let exp_sign = (c == '+' || c == '-') && (prev == 'e' || prev == 'E');
                if c.is_ascii_digit() || c == '.' || c == 'e' || c == 'E' || exp_sign {
                    end = i + c.len_utf8();
                    prev = c;
                    it.next();
                } else {
                    break;
                }
            }
            let text = &src[start..end];
            let span = span_at(end, line, col);
            let v: f64 = text.parse().map_err(|_| ExprError::Syntax {
                span,
                msg: format!("malformed number `{text}`"),
            })?;
            out.push(Token {
                tok: Tok::Num(v),
                span,
                text: text.to_string(),
            });
            col += text.chars().count();
            continue;
        }
        if ch.is_ascii_alphabetic() || ch == '_' {
            let mut end = start;
            while let Some(&(i, c)) = it.peek() {
                if c.is_ascii_alphanumeric() || c == '_' {
                    end = i + 1;
                    it.next();
                } else {
                    break;
                }
            }
            let text = &src[start..end];
            out.push(Token {
                tok: Tok::Ident(text.to_string()),
                span: span_at(end, line, col),
                text: text.to_string(),
            });
            col += text.len();
            continue;
        }
        return Err(ExprError::Syntax {
            span: span_at(start + ch.len_utf8(), line, col),
            msg: format!("unexpected character `{ch}`"),
        });
    }
    out.push(Token {
        tok: Tok::End,
        span: Span {
            start: src.len(),
            end: src.len(),
            line,
            col,
        },
        text: String::new(),
    });
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

fn join(a: Span, b: Span) -> Span {
    Span {
        start: a.start,
        end: b.end,
        line: a.line,
        col: a.col,
    }
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<Token, ExprError> {
        let t = self.bump();
        if t.tok == tok {
            Ok(t)
        } else {
            Err(ExprError::Syntax {
                span: t.span,
                msg: format!("expected {what}, found {}", describe(&t)),
            })
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let kind: fn(Box<Expr>, Box<Expr>) -> ExprKind = match self.peek().tok {
                Tok::Plus => ExprKind::Add,
                Tok::Minus => ExprKind::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            let span = join(lhs.span, rhs.span);
            lhs = Expr::spanned(kind(Box::new(lhs), Box::new(rhs)), span);
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.factor()?;
        loop {
            let is_div = match self.peek().tok {
                Tok::Star => false,
                Tok::Slash => true,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.factor()?;
            let span = join(lhs.span, rhs.span);
            lhs = if is_div {
                match rhs.const_value() {
                    None => return Err(ExprError::NonConstantDivisor { span: rhs.span }),
                    Some(0.0) => return Err(ExprError::DivisionByZero { span: rhs.span }),
                    Some(_) => Expr::spanned(ExprKind::Div(Box::new(lhs), Box::new(rhs)), span),
                }
            } else {
                Expr::spanned(ExprKind::Mul(Box::new(lhs), Box::new(rhs)), span)
            };
        }
    }

    fn factor(&mut self) -> Result<Expr, ExprError> {
        let base = self.base()?;
        if self.peek().tok != Tok::Caret {
            return Ok(base);
        }
        self.bump();
        let t = self.bump();
        let p = match t.tok {
            Tok::Num(_) if t.text.bytes().all(|b| b.is_ascii_digit()) => t.text.parse::<u32>().ok(),
            _ => None,
        };
        match p {
            Some(p) if p > 0 => {
                let span = join(base.span, t.span);
                Ok(Expr::spanned(ExprKind::Pow(Box::new(base), p), span))
            }
            _ => Err(ExprError::BadExponent { span: t.span }),
        }
    }

    fn base(&mut self) -> Result<Expr, ExprError> {
        let t = self.bump();
        match t.tok {
            Tok::Num(v) => Ok(Expr::spanned(ExprKind::Num(v), t.span)),
            Tok::Minus => {
                let inner = self.factor()?;
                let span = join(t.span, inner.span);
                Ok(Expr::spanned(ExprKind::Neg(Box::new(inner)), span))
            }
            Tok::LParen => {
                let inner = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Tok::Ident(ref name) => {
                if let Some(func) = Func::from_name(name) {
                    self.expect(Tok::LParen, &format!("`(` after `{name}`"))?;
                    if self.peek().tok == Tok::RParen {
                        return Err(ExprError::Arity {
                            span: t.span,
                            name: name.clone(),
                        });
                    }
                    let arg = self.expr()?;
                    if self.peek().tok == Tok::Comma {
                        return Err(ExprError::Arity {
                            span: t.span,
                            name: name.clone(),
                        });
                    }
                    let close = self.expect(Tok::RParen, "`)`")?;
                    return Ok(Expr::spanned(ExprKind::Call(func, Box::new(arg)), join(t.span, close.span)));
                }
                variable(name)
                    .map(|k| Expr::spanned(k, t.span))
                    .ok_or(ExprError::UnknownIdentifier {
                        span: t.span,
                        name: name.clone(),
                    })
            }
            _ => Err(ExprError::Syntax {
                span: t.span,
                msg: format!("expected a number, variable, function or `(`, found {}", describe(&t)),
            }),
        }
    }
}

fn variable(name: &str) -> Option<ExprKind> {
    let (head, digits) = name.split_at(1);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || digits.starts_with('0') {
        return None;
    }
    let idx: usize = digits.parse().ok()?;
    match head {
        "x" => Some(ExprKind::State(idx - 1)),
        "u" => Some(ExprKind::Input(idx - 1)),
        _ => None,
    }
}

fn describe(t: &Token) -> String {
    match t.tok {
        Tok::End => "end of input".into(),
        _ => format!("`{}`", t.text),
    }
}

pub fn parse(src: &str) -> Result<Expr, ExprError> {
    let mut p = Parser {
        toks: lex(src)?,
        pos: 0,
    };
    let e = p.expr()?;
    let t = p.peek();
    if t.tok != Tok::End {
        return Err(ExprError::Syntax {
            span: t.span,
            msg: format!("unexpected {}", describe(t)),
        });
    }
    Ok(e)
}
