//! A tiny arithmetic expression grammar for scenario data.
//!
//! Supported: numeric constants, `pi`, variables `x1..x9`, `t`, `z`,
//! `+ - * /`, integer powers `^`, and the functions `sin`, `cos`, `sqrt`,
//! `bump`, `step5`. Everything the grammar can produce is smooth wherever
//! `sqrt` stays away from zero, and the grammar is closed under
//! differentiation, so gradients are exact.
//!
//! `bump(u)` is the compactly supported C^2 kernel `(1-u^2)^3` on |u| < 1,
//! zero outside. `step5(u)` is the C^2 quintic plateau: 1 for u <= 0,
//! 0 for u >= 1, `1 - (10u^3 - 15u^4 + 6u^5)` in between. Both are used to
//! cut scenario data off smoothly outside the computational box.
//!
//! Derivatives of the cutoffs are carried by a `Gated` node that evaluates
//! its payload only inside the cutoff's open support. Outside, the payload
//! is not touched at all, so a cutoff can mask expressions (like `sqrt`
//! kinks) that are only well behaved where the cutoff is nonzero. The gate
//! commutes with differentiation up to second order, which is exactly the
//! regularity the C^2 cutoffs provide.

use crate::error::{MfgError, Result};
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    /// Spatial coordinate, zero-based index (displayed as `x1`, `x2`, ...).
    X(usize),
    T,
    Z,
}

/// Support region used by [`Expr::Gated`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    /// |u| < 1 (interior of `bump`'s support).
    Bump,
    /// 0 < u < 1 (transition band of `step5`).
    Step5,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Sqrt(Box<Expr>),
    Bump(Box<Expr>),
    Step5(Box<Expr>),
    /// `Gated(u, gate, inner)`: `inner` where `u` is inside `gate`'s region,
    /// 0 elsewhere (`inner` is not evaluated outside).
    Gated(Box<Expr>, Gate, Box<Expr>),
}

/// Evaluation point for an expression.
#[derive(Debug, Clone, Copy)]
pub struct EvalCtx<'a> {
    pub x: &'a [f64],
    pub t: f64,
    pub z: f64,
}

impl<'a> EvalCtx<'a> {
    pub fn space(x: &'a [f64]) -> Self {
        EvalCtx { x, t: 0.0, z: 0.0 }
    }
    pub fn space_time(x: &'a [f64], t: f64) -> Self {
        EvalCtx { x, t, z: 0.0 }
    }
}

fn boxed(e: Expr) -> Box<Expr> {
    Box::new(e)
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr> {
        Parser::new(src)?.parse_full()
    }

    pub fn zero() -> Expr {
        Expr::Const(0.0)
    }

    pub fn eval(&self, ctx: &EvalCtx) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(Var::X(i)) => ctx.x.get(*i).copied().unwrap_or(f64::NAN),
            Expr::Var(Var::T) => ctx.t,
            Expr::Var(Var::Z) => ctx.z,
            Expr::Neg(e) => -e.eval(ctx),
            Expr::Add(a, b) => a.eval(ctx) + b.eval(ctx),
            Expr::Sub(a, b) => a.eval(ctx) - b.eval(ctx),
            Expr::Mul(a, b) => a.eval(ctx) * b.eval(ctx),
            Expr::Div(a, b) => a.eval(ctx) / b.eval(ctx),
            Expr::Pow(e, n) => e.eval(ctx).powi(*n),
            Expr::Sin(e) => e.eval(ctx).sin(),
            Expr::Cos(e) => e.eval(ctx).cos(),
            Expr::Sqrt(e) => e.eval(ctx).sqrt(),
            Expr::Bump(e) => {
                let u = e.eval(ctx);
                if u.abs() < 1.0 {
                    let w = 1.0 - u * u;
                    w * w * w
                } else {
                    0.0
                }
            }
            Expr::Step5(e) => {
                let u = e.eval(ctx);
                if u <= 0.0 {
                    1.0
                } else if u >= 1.0 {
                    0.0
                } else {
                    1.0 - u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
                }
            }
            Expr::Gated(u, gate, inner) => {
                let uv = u.eval(ctx);
                let inside = match gate {
                    Gate::Bump => uv.abs() < 1.0,
                    Gate::Step5 => uv > 0.0 && uv < 1.0,
                };
                if inside {
                    inner.eval(ctx)
                } else {
                    0.0
                }
            }
        }
    }

    /// Exact derivative with respect to `var`, simplified.
    pub fn diff(&self, var: Var) -> Expr {
        let d = match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Var(v) => Expr::Const(if *v == var { 1.0 } else { 0.0 }),
            Expr::Neg(e) => Expr::Neg(boxed(e.diff(var))),
            Expr::Add(a, b) => Expr::Add(boxed(a.diff(var)), boxed(b.diff(var))),
            Expr::Sub(a, b) => Expr::Sub(boxed(a.diff(var)), boxed(b.diff(var))),
            Expr::Mul(a, b) => Expr::Add(
                boxed(Expr::Mul(boxed(a.diff(var)), b.clone())),
                boxed(Expr::Mul(a.clone(), boxed(b.diff(var)))),
            ),
            Expr::Div(a, b) => Expr::Div(
                boxed(Expr::Sub(
                    boxed(Expr::Mul(boxed(a.diff(var)), b.clone())),
                    boxed(Expr::Mul(a.clone(), boxed(b.diff(var)))),
                )),
                boxed(Expr::Pow(b.clone(), 2)),
            ),
            Expr::Pow(e, n) => Expr::Mul(
                boxed(Expr::Mul(
                    boxed(Expr::Const(f64::from(*n))),
                    boxed(Expr::Pow(e.clone(), n - 1)),
                )),
                boxed(e.diff(var)),
            ),
            Expr::Sin(e) => Expr::Mul(boxed(Expr::Cos(e.clone())), boxed(e.diff(var))),
            Expr::Cos(e) => Expr::Neg(boxed(Expr::Mul(
                boxed(Expr::Sin(e.clone())),
                boxed(e.diff(var)),
            ))),
            Expr::Sqrt(e) => Expr::Div(
                boxed(e.diff(var)),
                boxed(Expr::Mul(
                    boxed(Expr::Const(2.0)),
                    boxed(Expr::Sqrt(e.clone())),
                )),
            ),
            // bump' = -6u(1-u^2)^2 u', nonzero only inside the support.
            Expr::Bump(e) => {
                let u = e.clone();
                let w = Expr::Sub(boxed(Expr::Const(1.0)), boxed(Expr::Pow(u.clone(), 2)));
                let payload = Expr::Mul(
                    boxed(Expr::Mul(
                        boxed(Expr::Const(-6.0)),
                        boxed(Expr::Mul((*u).clone().into(), boxed(Expr::Pow(boxed(w), 2)))),
                    )),
                    boxed(e.diff(var)),
                );
                Expr::Gated(u, Gate::Bump, boxed(payload))
            }
            // step5' = -30 u^2 (1-u)^2 u' on the transition band.
            Expr::Step5(e) => {
                let u = e.clone();
                let w = Expr::Sub(boxed(Expr::Const(1.0)), u.clone());
                let payload = Expr::Mul(
                    boxed(Expr::Mul(
                        boxed(Expr::Const(-30.0)),
                        boxed(Expr::Mul(
                            boxed(Expr::Pow(u.clone(), 2)),
                            boxed(Expr::Pow(boxed(w), 2)),
                        )),
                    )),
                    boxed(e.diff(var)),
                );
                Expr::Gated(u, Gate::Step5, boxed(payload))
            }
            // The payload of a gate vanishes at the gate boundary (C^2
            // cutoffs), so differentiation passes under the gate.
            Expr::Gated(u, gate, inner) => Expr::Gated(u.clone(), *gate, boxed(inner.diff(var))),
        };
        d.simplified()
    }

    /// Structural constant-zero test (post-simplification).
    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 0.0)
    }

    pub fn uses(&self, var: Var) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Var(v) => *v == var,
            Expr::Neg(e) | Expr::Sin(e) | Expr::Cos(e) | Expr::Sqrt(e) | Expr::Bump(e)
            | Expr::Step5(e) => e.uses(var),
            Expr::Pow(e, _) => e.uses(var),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.uses(var) || b.uses(var)
            }
            Expr::Gated(u, _, inner) => u.uses(var) || inner.uses(var),
        }
    }

    /// Largest zero-based spatial index referenced, if any.
    pub fn max_x_index(&self) -> Option<usize> {
        let merge = |a: Option<usize>, b: Option<usize>| match (a, b) {
            (Some(i), Some(j)) => Some(i.max(j)),
            (i, j) => i.or(j),
        };
        match self {
            Expr::Const(_) => None,
            Expr::Var(Var::X(i)) => Some(*i),
            Expr::Var(_) => None,
            Expr::Neg(e) | Expr::Sin(e) | Expr::Cos(e) | Expr::Sqrt(e) | Expr::Bump(e)
            | Expr::Step5(e) => e.max_x_index(),
            Expr::Pow(e, _) => e.max_x_index(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                merge(a.max_x_index(), b.max_x_index())
            }
            Expr::Gated(u, _, inner) => merge(u.max_x_index(), inner.max_x_index()),
        }
    }

    pub fn uses_sqrt(&self) -> bool {
        match self {
            Expr::Sqrt(_) => true,
            Expr::Const(_) | Expr::Var(_) => false,
            Expr::Neg(e) | Expr::Sin(e) | Expr::Cos(e) | Expr::Bump(e) | Expr::Step5(e) => {
                e.uses_sqrt()
            }
            Expr::Pow(e, _) => e.uses_sqrt(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.uses_sqrt() || b.uses_sqrt()
            }
            Expr::Gated(u, _, inner) => u.uses_sqrt() || inner.uses_sqrt(),
        }
    }

    /// Constant folding and unit/zero elision. Keeps derivatives compact.
    pub fn simplified(self) -> Expr {
        use Expr::*;
        match self {
            Neg(e) => match e.simplified() {
                Const(c) => Const(-c),
                Neg(inner) => *inner,
                e => Neg(boxed(e)),
            },
            Add(a, b) => match (a.simplified(), b.simplified()) {
                (Const(x), Const(y)) => Const(x + y),
                (Const(c), e) | (e, Const(c)) if c == 0.0 => e,
                (a, b) => Add(boxed(a), boxed(b)),
            },
            Sub(a, b) => match (a.simplified(), b.simplified()) {
                (Const(x), Const(y)) => Const(x - y),
                (e, Const(c)) if c == 0.0 => e,
                (Const(c), e) if c == 0.0 => Neg(boxed(e)).simplified(),
                (a, b) => Sub(boxed(a), boxed(b)),
            },
            Mul(a, b) => match (a.simplified(), b.simplified()) {
                (Const(x), Const(y)) => Const(x * y),
                (Const(c), _) | (_, Const(c)) if c == 0.0 => Const(0.0),
                (Const(c), e) | (e, Const(c)) if c == 1.0 => e,
                (a, b) => Mul(boxed(a), boxed(b)),
            },
            Div(a, b) => match (a.simplified(), b.simplified()) {
                (Const(x), Const(y)) if y != 0.0 => Const(x / y),
                (e, Const(c)) if c == 1.0 => e,
                (a, b) => Div(boxed(a), boxed(b)),
            },
            Pow(e, n) => match (e.simplified(), n) {
                (_, 0) => Const(1.0),
                (e, 1) => e,
                (Const(c), n) => Const(c.powi(n)),
                (e, n) => Pow(boxed(e), n),
            },
            Sin(e) => match e.simplified() {
                Const(c) => Const(c.sin()),
                e => Sin(boxed(e)),
            },
            Cos(e) => match e.simplified() {
                Const(c) => Const(c.cos()),
                e => Cos(boxed(e)),
            },
            Sqrt(e) => match e.simplified() {
                Const(c) => Const(c.sqrt()),
                e => Sqrt(boxed(e)),
            },
            Bump(e) => Bump(boxed(e.simplified())),
            Step5(e) => Step5(boxed(e.simplified())),
            Gated(u, gate, inner) => match inner.simplified() {
                Const(c) if c == 0.0 => Const(0.0),
                inner => Gated(boxed(u.simplified()), gate, boxed(inner)),
            },
            other => other,
        }
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::X(i) => write!(f, "x{}", i + 1),
            Var::T => write!(f, "t"),
            Var::Z => write!(f, "z"),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Add(a, b) => write!(f, "({a}+{b})"),
            Expr::Sub(a, b) => write!(f, "({a}-{b})"),
            Expr::Mul(a, b) => write!(f, "({a}*{b})"),
            Expr::Div(a, b) => write!(f, "({a}/{b})"),
            Expr::Pow(e, n) => write!(f, "({e}^{n})"),
            Expr::Sin(e) => write!(f, "sin({e})"),
            Expr::Cos(e) => write!(f, "cos({e})"),
            Expr::Sqrt(e) => write!(f, "sqrt({e})"),
            Expr::Bump(e) => write!(f, "bump({e})"),
            Expr::Step5(e) => write!(f, "step5({e})"),
            // Only produced by diff; not re-parseable, and never serialized.
            Expr::Gated(u, gate, inner) => write!(f, "<gate {gate:?} {u}: {inner}>"),
        }
    }
}

/// Serialize as source text so configs stay hand-editable.
impl Serialize for Expr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let src = String::deserialize(d)?;
        Expr::parse(&src).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
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

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn new(src: &str) -> Result<Parser> {
        let mut tokens = Vec::new();
        let bytes: Vec<char> = src.chars().collect();
        let mut i = 0;
        while i < bytes.len() {
            let c = bytes[i];
            match c {
                ' ' | '\t' | '\n' | '\r' => i += 1,
                '+' => {
                    tokens.push(Token::Plus);
                    i += 1;
                }
                '-' | '−' => {
                    tokens.push(Token::Minus);
                    i += 1;
                }
                '*' | '×' => {
                    tokens.push(Token::Star);
                    i += 1;
                }
                '/' | '÷' => {
                    tokens.push(Token::Slash);
                    i += 1;
                }
                '^' => {
                    tokens.push(Token::Caret);
                    i += 1;
                }
                '(' => {
                    tokens.push(Token::LParen);
                    i += 1;
                }
                ')' => {
                    tokens.push(Token::RParen);
                    i += 1;
                }
                c if c.is_ascii_digit() || c == '.' => {
                    let start = i;
                    while i < bytes.len()
                        && (bytes[i].is_ascii_digit()
                            || bytes[i] == '.'
                            || bytes[i] == 'e'
                            || bytes[i] == 'E'
                            || ((bytes[i] == '+' || bytes[i] == '-')
                                && i > start
                                && (bytes[i - 1] == 'e' || bytes[i - 1] == 'E')))
                    {
                        i += 1;
                    }
                    let text: String = bytes[start..i].iter().collect();
                    let v: f64 = text
                        .parse()
                        .map_err(|_| MfgError::Expr(format!("bad number literal `{text}`")))?;
                    tokens.push(Token::Num(v));
                }
                c if c.is_ascii_alphabetic() => {
                    let start = i;
                    while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == '_') {
                        i += 1;
                    }
                    tokens.push(Token::Ident(bytes[start..i].iter().collect()));
                }
                other => {
                    return Err(MfgError::Expr(format!("unexpected character `{other}`")));
                }
            }
        }
        Ok(Parser { tokens, pos: 0 })
    }

    fn parse_full(mut self) -> Result<Expr> {
        let e = self.expr()?;
        if self.pos != self.tokens.len() {
            return Err(MfgError::Expr("trailing input after expression".into()));
        }
        Ok(e.simplified())
    }

    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(tok) = self.peek() {
            match tok {
                Token::Plus => {
                    self.next();
                    lhs = Expr::Add(boxed(lhs), boxed(self.term()?));
                }
                Token::Minus => {
                    self.next();
                    lhs = Expr::Sub(boxed(lhs), boxed(self.term()?));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.factor()?;
        while let Some(tok) = self.peek() {
            match tok {
                Token::Star => {
                    self.next();
                    lhs = Expr::Mul(boxed(lhs), boxed(self.factor()?));
                }
                Token::Slash => {
                    self.next();
                    lhs = Expr::Div(boxed(lhs), boxed(self.factor()?));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Expr> {
        let base = self.unary()?;
        if matches!(self.peek(), Some(Token::Caret)) {
            self.next();
            let neg = if matches!(self.peek(), Some(Token::Minus)) {
                self.next();
                true
            } else {
                false
            };
            match self.next() {
                Some(Token::Num(v)) if v.fract() == 0.0 && v.abs() <= i32::MAX as f64 => {
                    let n = v as i32;
                    Ok(Expr::Pow(boxed(base), if neg { -n } else { n }))
                }
                _ => Err(MfgError::Expr(
                    "exponent must be an integer literal".into(),
                )),
            }
        } else {
            Ok(base)
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if matches!(self.peek(), Some(Token::Minus)) {
            self.next();
            return Ok(Expr::Neg(boxed(self.unary()?)));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr> {
        match self.next() {
            Some(Token::Num(v)) => Ok(Expr::Const(v)),
            Some(Token::LParen) => {
                let e = self.expr()?;
                match self.next() {
                    Some(Token::RParen) => Ok(e),
                    _ => Err(MfgError::Expr("missing closing parenthesis".into())),
                }
            }
            Some(Token::Ident(name)) => {
                if matches!(self.peek(), Some(Token::LParen)) {
                    self.next();
                    let arg = self.expr()?;
                    match self.next() {
                        Some(Token::RParen) => {}
                        _ => return Err(MfgError::Expr("missing closing parenthesis".into())),
                    }
                    let arg = boxed(arg);
                    match name.as_str() {
                        "sin" => Ok(Expr::Sin(arg)),
                        "cos" => Ok(Expr::Cos(arg)),
                        "sqrt" => Ok(Expr::Sqrt(arg)),
                        "bump" => Ok(Expr::Bump(arg)),
                        "step5" => Ok(Expr::Step5(arg)),
                        other => Err(MfgError::Expr(format!("unknown function `{other}`"))),
                    }
                } else {
                    match name.as_str() {
                        "t" => Ok(Expr::Var(Var::T)),
                        "z" => Ok(Expr::Var(Var::Z)),
                        "pi" => Ok(Expr::Const(std::f64::consts::PI)),
                        other => {
                            if let Some(rest) = other.strip_prefix('x') {
                                if let Ok(i) = rest.parse::<usize>() {
                                    if (1..=9).contains(&i) {
                                        return Ok(Expr::Var(Var::X(i - 1)));
                                    }
                                }
                            }
                            Err(MfgError::Expr(format!("unknown identifier `{other}`")))
                        }
                    }
                }
            }
            other => Err(MfgError::Expr(format!("unexpected token {other:?}"))),
        }
    }
}
