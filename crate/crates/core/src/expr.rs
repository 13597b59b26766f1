//! Coefficient expression language.
//!
//! Coefficients `b(x, j)`, `sigma(x, j)`, `c(x, j)` and the envelope functions
//! of an Itô model are written as small closed-form expressions in one real
//! variable `x`. The grammar is
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?
//! atom   := number | 'x' | 'pi' | 'e'
//!         | func '(' expr (',' expr)* ')'
//!         | '(' expr ')'
//! func   := 'exp' | 'log' | 'sqrt' | 'abs'      (one argument)
//!         | 'min' | 'max' | 'pow'              (two arguments)
//! number := digits ['.' digits] [('e' | 'E') ['+' | '-'] digits]
//! ```
//!
//! `^` is right associative and binds tighter than unary minus, so `-x^2`
//! is `-(x^2)` and `2^3^2` is `2^(3^2)`.
//!
//! Evaluation never yields NaN or an infinity: poles, logarithms of
//! non-positive numbers, fractional powers of negative numbers and overflow
//! are all reported as [`EvalError`]s.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Constant {
    Pi,
    E,
}

impl Constant {
    pub fn value(self) -> f64 {
        match self {
            Constant::Pi => std::f64::consts::PI,
            Constant::E => std::f64::consts::E,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Constant::Pi => "pi",
            Constant::E => "e",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Exp,
    Log,
    Sqrt,
    Abs,
    Min,
    Max,
    Pow,
}

impl Func {
    pub fn arity(self) -> usize {
        match self {
            Func::Exp | Func::Log | Func::Sqrt | Func::Abs => 1,
            Func::Min | Func::Max | Func::Pow => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
            Func::Pow => "pow",
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "min" => Func::Min,
            "max" => Func::Max,
            "pow" => Func::Pow,
            _ => return None,
        })
    }
}

/// Abstract syntax tree of a coefficient expression.
///
/// Numeric literals are always finite and non-negative; negative values are
/// represented as `Neg(Num(..))`, the same shape the parser produces, so that
/// printing and re-parsing any tree gives back the identical tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var,
    Const(Constant),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: expected {}", expected.join(" or "))]
    Syntax {
        offset: usize,
        expected: Vec<String>,
    },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("function `{name}` at byte {offset} takes {expected} argument(s), got {got}")]
    Arity {
        name: String,
        offset: usize,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("domain error in `{subexpr}` at x = {x}: {reason}")]
    Domain {
        subexpr: String,
        x: f64,
        reason: &'static str,
    },
    #[error("overflow in `{subexpr}` at x = {x}")]
    Overflow { subexpr: String, x: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("grid point {index}: {source}")]
pub struct SampleError {
    pub index: usize,
    #[source]
    pub source: EvalError,
}

pub fn parse(source: &str) -> Result<Expr, ParseError> {
    let tokens = tokenize(source)?;
    let mut p = Parser {
        tokens,
        pos: 0,
        end: source.len(),
    };
    let e = p.expr()?;
    if p.pos != p.tokens.len() {
        return Err(p.unexpected(&["operator", "end of input"]));
    }
    Ok(e)
}

// ---------------------------------------------------------------------------
// Lexer

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
}

fn tokenize(src: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'+' => out.push((Tok::Plus, start)),
            b'-' => out.push((Tok::Minus, start)),
            b'*' => out.push((Tok::Star, start)),
            b'/' => out.push((Tok::Slash, start)),
            b'^' => out.push((Tok::Caret, start)),
            b'(' => out.push((Tok::LParen, start)),
            b')' => out.push((Tok::RParen, start)),
            b',' => out.push((Tok::Comma, start)),
            b'0'..=b'9' | b'.' => {
                let mut j = i;
                while j < bytes.len() && bytes[j].is_ascii_digit() {
                    j += 1;
                }
                if j < bytes.len() && bytes[j] == b'.' {
                    j += 1;
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                }
                // exponent only when digits follow, otherwise `e` is an identifier
                if j < bytes.len() && (bytes[j] == b'e' || bytes[j] == b'E') {
                    let mut k = j + 1;
                    if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
                        k += 1;
                    }
                    if k < bytes.len() && bytes[k].is_ascii_digit() {
                        while k < bytes.len() && bytes[k].is_ascii_digit() {
                            k += 1;
                        }
                        j = k;
                    }
                }
                let text = &src[i..j];
                let v: f64 = text.parse().map_err(|_| ParseError::Syntax {
                    offset: start,
                    expected: vec!["number".into()],
                })?;
                if !v.is_finite() {
                    return Err(ParseError::Syntax {
                        offset: start,
                        expected: vec!["finite number".into()],
                    });
                }
                out.push((Tok::Num(v), start));
                i = j;
                continue;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let mut j = i;
                while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_') {
                    j += 1;
                }
                out.push((Tok::Ident(src[i..j].to_string()), start));
                i = j;
                continue;
            }
            _ => {
                return Err(ParseError::Syntax {
                    offset: start,
                    expected: vec!["number".into(), "identifier".into(), "operator".into()],
                })
            }
        }
        i += 1;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parser

struct Parser {
    tokens: Vec<(Tok, usize)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|(t, _)| t)
    }

    fn offset(&self) -> usize {
        self.tokens
            .get(self.pos)
            .map(|(_, o)| *o)
            .unwrap_or(self.end)
    }

    fn unexpected(&self, expected: &[&str]) -> ParseError {
        ParseError::Syntax {
            offset: self.offset(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn eat(&mut self, t: &Tok) -> bool {
        if self.peek() == Some(t) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Plus) => BinOp::Add,
                Some(Tok::Minus) => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Star) => BinOp::Mul,
                Some(Tok::Slash) => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat(&Tok::Minus) {
            let inner = self.unary()?;
            return Ok(Expr::Neg(Box::new(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.eat(&Tok::Caret) {
            let exp = self.unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let offset = self.offset();
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Expr::Num(v))
            }
            Some(Tok::LParen) => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(&Tok::RParen) {
                    return Err(self.unexpected(&["`)`"]));
                }
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                match name.as_str() {
                    "x" => return Ok(Expr::Var),
                    "pi" => return Ok(Expr::Const(Constant::Pi)),
                    "e" => return Ok(Expr::Const(Constant::E)),
                    _ => {}
                }
                let Some(func) = Func::from_name(&name) else {
                    return Err(ParseError::UnknownIdentifier { name, offset });
                };
                if !self.eat(&Tok::LParen) {
                    return Err(self.unexpected(&["`(`"]));
                }
                let mut args = vec![self.expr()?];
                while self.eat(&Tok::Comma) {
                    args.push(self.expr()?);
                }
                if !self.eat(&Tok::RParen) {
                    return Err(self.unexpected(&["`,`", "`)`"]));
                }
                if args.len() != func.arity() {
                    return Err(ParseError::Arity {
                        name,
                        offset,
                        expected: func.arity(),
                        got: args.len(),
                    });
                }
                Ok(Expr::Call(func, args))
            }
            _ => Err(self.unexpected(&["number", "`x`", "function", "`(`"])),
        }
    }
}

// ---------------------------------------------------------------------------
// Printing

const PREC_ADD: u8 = 1;
const PREC_MUL: u8 = 2;
const PREC_NEG: u8 = 3;
const PREC_POW: u8 = 4;
const PREC_ATOM: u8 = 5;

impl Expr {
    fn prec(&self) -> u8 {
        match self {
            Expr::Bin(BinOp::Add | BinOp::Sub, ..) => PREC_ADD,
            Expr::Bin(BinOp::Mul | BinOp::Div, ..) => PREC_MUL,
            Expr::Neg(_) => PREC_NEG,
            Expr::Bin(BinOp::Pow, ..) => PREC_POW,
            _ => PREC_ATOM,
        }
    }

    fn write_at(&self, f: &mut fmt::Formatter<'_>, min_prec: u8) -> fmt::Result {
        if self.prec() < min_prec {
            write!(f, "(")?;
            self.write_at(f, 0)?;
            return write!(f, ")");
        }
        match self {
            Expr::Num(v) => write!(f, "{v}"),
            Expr::Var => write!(f, "x"),
            Expr::Const(c) => write!(f, "{}", c.name()),
            Expr::Neg(e) => {
                write!(f, "-")?;
                e.write_at(f, PREC_NEG)
            }
            Expr::Bin(op, a, b) => match op {
                BinOp::Add | BinOp::Sub => {
                    a.write_at(f, PREC_ADD)?;
                    write!(f, " {} ", if *op == BinOp::Add { '+' } else { '-' })?;
                    b.write_at(f, PREC_MUL)
                }
                BinOp::Mul | BinOp::Div => {
                    a.write_at(f, PREC_MUL)?;
                    write!(f, "{}", if *op == BinOp::Mul { '*' } else { '/' })?;
                    b.write_at(f, PREC_NEG)
                }
                BinOp::Pow => {
                    a.write_at(f, PREC_ATOM)?;
                    write!(f, "^")?;
                    b.write_at(f, PREC_NEG)
                }
            },
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    a.write_at(f, 0)?;
                }
                write!(f, ")")
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.write_at(f, 0)
    }
}

impl std::str::FromStr for Expr {
    type Err = ParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse(s)
    }
}

impl Serialize for Expr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse(&s).map_err(serde::de::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Evaluation

fn pow_checked(a: f64, b: f64) -> Result<f64, &'static str> {
    if a == 0.0 && b < 0.0 {
        return Err("zero raised to a negative power");
    }
    if a < 0.0 && b.fract() != 0.0 {
        return Err("negative base with non-integer exponent");
    }
    Ok(a.powf(b))
}

impl Expr {
    /// Evaluates the expression at `x`.
    pub fn eval(&self, x: f64) -> Result<f64, EvalError> {
        if !x.is_finite() {
            return Err(EvalError::Domain {
                subexpr: "x".into(),
                x,
                reason: "non-finite argument",
            });
        }
        self.eval_tree(x)
    }

    fn eval_tree(&self, x: f64) -> Result<f64, EvalError> {
        let domain = |reason| EvalError::Domain {
            subexpr: self.to_string(),
            x,
            reason,
        };
        let v = match self {
            Expr::Num(v) => *v,
            Expr::Var => x,
            Expr::Const(c) => c.value(),
            Expr::Neg(e) => -e.eval_tree(x)?,
            Expr::Bin(op, a, b) => {
                let a = a.eval_tree(x)?;
                let b = b.eval_tree(x)?;
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            return Err(domain("division by zero"));
                        }
                        a / b
                    }
                    BinOp::Pow => pow_checked(a, b).map_err(domain)?,
                }
            }
            Expr::Call(func, args) => {
                let a = args[0].eval_tree(x)?;
                match func {
                    Func::Exp => a.exp(),
                    Func::Log => {
                        if a <= 0.0 {
                            return Err(domain("logarithm of a non-positive number"));
                        }
                        a.ln()
                    }
                    Func::Sqrt => {
                        if a < 0.0 {
                            return Err(domain("square root of a negative number"));
                        }
                        a.sqrt()
                    }
                    Func::Abs => a.abs(),
                    Func::Min => a.min(args[1].eval_tree(x)?),
                    Func::Max => a.max(args[1].eval_tree(x)?),
                    Func::Pow => pow_checked(a, args[1].eval_tree(x)?).map_err(domain)?,
                }
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::Overflow {
                subexpr: self.to_string(),
                x,
            })
        }
    }

    /// Evaluates on every grid point, reporting the first failing index.
    pub fn differentiable_sample(&self, grid: &[f64]) -> Result<Vec<f64>, SampleError> {
        grid.iter()
            .enumerate()
            .map(|(index, &x)| self.eval(x).map_err(|source| SampleError { index, source }))
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Num(v) if *v == 0.0)
    }

    /// True when the expression does not depend on `x`.
    pub fn is_constant(&self) -> bool {
        match self {
            Expr::Var => false,
            Expr::Num(_) | Expr::Const(_) => true,
            Expr::Neg(e) => e.is_constant(),
            Expr::Bin(_, a, b) => a.is_constant() && b.is_constant(),
            Expr::Call(_, args) => args.iter().all(Expr::is_constant),
        }
    }

    pub fn compile(&self) -> Compiled {
        Compiled::new(self)
    }
}

// ---------------------------------------------------------------------------
// Smart constructors with exact simplifications.
//
// Every rewrite below is an identity wherever the unsimplified expression is
// defined, so `b + (-(b/s))*s` collapses to an exact zero drift.

pub fn num(v: f64) -> Expr {
    assert!(v.is_finite(), "literal must be finite");
    if v < 0.0 {
        Expr::Neg(Box::new(Expr::Num(-v)))
    } else {
        Expr::Num(v.abs())
    }
}

pub fn var() -> Expr {
    Expr::Var
}

pub fn neg(a: Expr) -> Expr {
    match a {
        Expr::Num(0.0) => Expr::Num(0.0),
        Expr::Neg(inner) => *inner,
        other => Expr::Neg(Box::new(other)),
    }
}

pub fn add(a: Expr, b: Expr) -> Expr {
    if a.is_zero() {
        return b;
    }
    if b.is_zero() {
        return a;
    }
    if let Expr::Neg(nb) = &b {
        if **nb == a {
            return Expr::Num(0.0);
        }
        return Expr::Bin(BinOp::Sub, Box::new(a), nb.clone());
    }
    if let Expr::Neg(na) = &a {
        if **na == b {
            return Expr::Num(0.0);
        }
    }
    Expr::Bin(BinOp::Add, Box::new(a), Box::new(b))
}

pub fn sub(a: Expr, b: Expr) -> Expr {
    if b.is_zero() {
        return a;
    }
    if a == b {
        return Expr::Num(0.0);
    }
    if a.is_zero() {
        return neg(b);
    }
    Expr::Bin(BinOp::Sub, Box::new(a), Box::new(b))
}

pub fn mul(a: Expr, b: Expr) -> Expr {
    if a.is_zero() || b.is_zero() {
        return Expr::Num(0.0);
    }
    if a == Expr::Num(1.0) {
        return b;
    }
    if b == Expr::Num(1.0) {
        return a;
    }
    // (u/v)*v and v*(u/v)
    if let Expr::Bin(BinOp::Div, u, v) = &a {
        if **v == b {
            return (**u).clone();
        }
    }
    if let Expr::Bin(BinOp::Div, u, v) = &b {
        if **v == a {
            return (**u).clone();
        }
    }
    // (-w)*v -> -(w*v), so the quotient rule above can fire
    if let Expr::Neg(w) = &a {
        return neg(mul((**w).clone(), b));
    }
    if let Expr::Neg(w) = &b {
        return neg(mul(a, (**w).clone()));
    }
    Expr::Bin(BinOp::Mul, Box::new(a), Box::new(b))
}

pub fn div(a: Expr, b: Expr) -> Expr {
    if a.is_zero() {
        return Expr::Num(0.0);
    }
    if b == Expr::Num(1.0) {
        return a;
    }
    if a == b {
        return Expr::Num(1.0);
    }
    Expr::Bin(BinOp::Div, Box::new(a), Box::new(b))
}

pub fn pow(a: Expr, b: Expr) -> Expr {
    Expr::Bin(BinOp::Pow, Box::new(a), Box::new(b))
}

// ---------------------------------------------------------------------------
// Stack-machine form used in hot simulation loops.

#[derive(Debug, Clone, Copy)]
enum Op {
    Num(f64),
    X,
    Neg,
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Exp,
    Log,
    Sqrt,
    Abs,
    Min,
    Max,
}

const STACK_LIMIT: usize = 32;

/// Flattened expression. Semantics are bit-identical to [`Expr::eval`];
/// on any failure the tree evaluator is rerun to produce the detailed error.
#[derive(Debug, Clone)]
pub struct Compiled {
    ops: Vec<Op>,
    depth: usize,
    tree: Expr,
}

impl Compiled {
    fn new(e: &Expr) -> Self {
        let mut ops = Vec::new();
        let mut depth = 0;
        let mut cur = 0;
        emit(e, &mut ops, &mut cur, &mut depth);
        Compiled {
            ops,
            depth,
            tree: e.clone(),
        }
    }

    pub fn expr(&self) -> &Expr {
        &self.tree
    }

    #[inline]
    pub fn eval(&self, x: f64) -> Result<f64, EvalError> {
        if self.depth <= STACK_LIMIT && x.is_finite() {
            if let Some(v) = self.run(x) {
                return Ok(v);
            }
        }
        self.tree.eval(x)
    }

    #[inline]
    fn run(&self, x: f64) -> Option<f64> {
        let mut st = [0.0f64; STACK_LIMIT];
        let mut sp = 0usize;
        for op in &self.ops {
            match *op {
                Op::Num(v) => {
                    st[sp] = v;
                    sp += 1;
                }
                Op::X => {
                    st[sp] = x;
                    sp += 1;
                }
                Op::Neg => st[sp - 1] = -st[sp - 1],
                Op::Exp => st[sp - 1] = st[sp - 1].exp(),
                Op::Log => {
                    let a = st[sp - 1];
                    if a <= 0.0 {
                        return None;
                    }
                    st[sp - 1] = a.ln();
                }
                Op::Sqrt => {
                    let a = st[sp - 1];
                    if a < 0.0 {
                        return None;
                    }
                    st[sp - 1] = a.sqrt();
                }
                Op::Abs => st[sp - 1] = st[sp - 1].abs(),
                _ => {
                    sp -= 1;
                    let b = st[sp];
                    let a = st[sp - 1];
                    st[sp - 1] = match *op {
                        Op::Add => a + b,
                        Op::Sub => a - b,
                        Op::Mul => a * b,
                        Op::Div => {
                            if b == 0.0 {
                                return None;
                            }
                            a / b
                        }
                        Op::Pow => pow_checked(a, b).ok()?,
                        Op::Min => a.min(b),
                        Op::Max => a.max(b),
                        _ => unreachable!(),
                    };
                }
            }
            if !st[sp - 1].is_finite() {
                return None;
            }
        }
        Some(st[0])
    }
}

fn emit(e: &Expr, ops: &mut Vec<Op>, cur: &mut usize, depth: &mut usize) {
    let mut push = |ops: &mut Vec<Op>, op: Op, cur: &mut usize| {
        ops.push(op);
        *cur += 1;
        *depth = (*depth).max(*cur);
    };
    match e {
        Expr::Num(v) => push(ops, Op::Num(*v), cur),
        Expr::Const(c) => push(ops, Op::Num(c.value()), cur),
        Expr::Var => push(ops, Op::X, cur),
        Expr::Neg(a) => {
            emit(a, ops, cur, depth);
            ops.push(Op::Neg);
        }
        Expr::Bin(op, a, b) => {
            emit(a, ops, cur, depth);
            emit(b, ops, cur, depth);
            ops.push(match op {
                BinOp::Add => Op::Add,
                BinOp::Sub => Op::Sub,
                BinOp::Mul => Op::Mul,
                BinOp::Div => Op::Div,
                BinOp::Pow => Op::Pow,
            });
            *cur -= 1;
        }
        Expr::Call(func, args) => {
            for a in args {
                emit(a, ops, cur, depth);
            }
            ops.push(match func {
                Func::Exp => Op::Exp,
                Func::Log => Op::Log,
                Func::Sqrt => Op::Sqrt,
                Func::Abs => Op::Abs,
                Func::Min => Op::Min,
                Func::Max => Op::Max,
                Func::Pow => Op::Pow,
            });
            *cur -= args.len() - 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(s: &str, x: f64) -> f64 {
        parse(s).unwrap().eval(x).unwrap()
    }

    #[test]
    fn basic_values() {
        assert_eq!(ev("x^2", 3.0), 9.0);
        assert_eq!(ev("x", 5.0), 5.0);
        assert_eq!(ev("x^1.5", 4.0), 8.0);
        assert_eq!(ev("exp(0)", 0.0), 1.0);
        let v = ev("x^(2*0.75)", 2.0);
        assert!((v - 2f64.powf(1.5)).abs() < 1e-15);
        assert!((v - 2.828427).abs() < 1e-6);
    }

    #[test]
    fn fractional_power_matches_reference_on_grid() {
        let e = parse("x^1.5").unwrap();
        for i in 0..200 {
            let x = 0.05 * i as f64;
            assert_eq!(e.eval(x).unwrap(), x.powf(1.5));
        }
    }

    #[test]
    fn precedence() {
        assert_eq!(ev("2+3*4", 0.0), 14.0);
        assert_eq!(ev("-x^2", 3.0), -9.0);
        assert_eq!(ev("2^3^2", 0.0), 512.0);
        assert_eq!(ev("x^-1", 4.0), 0.25);
        assert_eq!(ev("8/2/2", 0.0), 2.0);
        assert_eq!(ev("1-2-3", 0.0), -4.0);
        assert_eq!(ev("2*-3", 0.0), -6.0);
    }

    #[test]
    fn functions_and_constants() {
        assert_eq!(ev("min(x, 2)", 3.0), 2.0);
        assert_eq!(ev("max(x, 2)", 3.0), 3.0);
        assert_eq!(ev("pow(x, 3)", 2.0), 8.0);
        assert_eq!(ev("abs(-x)", 2.0), 2.0);
        assert_eq!(ev("sqrt(x)", 9.0), 3.0);
        assert_eq!(ev("log(e)", 0.0), 1.0);
        assert_eq!(ev("pi", 0.0), std::f64::consts::PI);
        assert_eq!(ev("1.5e2", 0.0), 150.0);
        assert_eq!(ev("2E-1", 0.0), 0.2);
    }

    #[test]
    fn domain_errors() {
        let e = parse("1/x").unwrap();
        assert!(matches!(e.eval(0.0), Err(EvalError::Domain { .. })));
        assert!(matches!(
            parse("log(x)").unwrap().eval(-1.0),
            Err(EvalError::Domain { .. })
        ));
        assert!(matches!(
            parse("log(x)").unwrap().eval(0.0),
            Err(EvalError::Domain { .. })
        ));
        assert!(matches!(
            parse("x^-1").unwrap().eval(0.0),
            Err(EvalError::Domain { .. })
        ));
        assert!(matches!(
            parse("x^0.5").unwrap().eval(-1.0),
            Err(EvalError::Domain { .. })
        ));
        assert!(matches!(
            parse("sqrt(x)").unwrap().eval(-1.0),
            Err(EvalError::Domain { .. })
        ));
        assert!(matches!(
            parse("exp(x)").unwrap().eval(1000.0),
            Err(EvalError::Overflow { .. })
        ));
        // negative base with integer exponent is fine
        assert_eq!(ev("x^3", -2.0), -8.0);
    }

    #[test]
    fn domain_error_names_subexpression() {
        let err = parse("x + log(x - 1)").unwrap().eval(0.5).unwrap_err();
        match err {
            EvalError::Domain { subexpr, x, .. } => {
                assert_eq!(subexpr, "log(x - 1)");
                assert_eq!(x, 0.5);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn syntax_errors() {
        match parse("x +") {
            Err(ParseError::Syntax { offset, .. }) => assert_eq!(offset, 3),
            other => panic!("{other:?}"),
        }
        match parse("2 * foo(x)") {
            Err(ParseError::UnknownIdentifier { name, offset }) => {
                assert_eq!(name, "foo");
                assert_eq!(offset, 4);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse("min(x)"), Err(ParseError::Arity { .. })));
        assert!(matches!(parse("(x"), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse("x x"), Err(ParseError::Syntax { .. })));
        assert!(matches!(
            parse("x $ 2"),
            Err(ParseError::Syntax { offset: 2, .. })
        ));
        assert!(matches!(
            parse(""),
            Err(ParseError::Syntax { offset: 0, .. })
        ));
    }

    #[test]
    fn sample_reports_grid_index() {
        let e = parse("1/x").unwrap();
        let err = e.differentiable_sample(&[1.0, 2.0, 0.0, 3.0]).unwrap_err();
        assert_eq!(err.index, 2);
        assert_eq!(
            e.differentiable_sample(&[1.0, 2.0]).unwrap(),
            vec![1.0, 0.5]
        );
    }

    #[test]
    fn simplifying_constructors() {
        let b = parse("0.1*x").unwrap();
        let s = parse("x^1.5").unwrap();
        let c = neg(div(b.clone(), s.clone()));
        assert_eq!(add(b.clone(), mul(c, s.clone())), num(0.0));
        assert_eq!(mul(num(0.0), s.clone()), num(0.0));
        assert_eq!(add(b.clone(), num(0.0)), b);
        assert_eq!(div(s.clone(), s.clone()), num(1.0));
        assert_eq!(num(-2.0), parse("-2").unwrap());
        assert_eq!(neg(neg(var())), var());
    }

    #[test]
    fn compiled_matches_tree() {
        for src in [
            "x^2 + 3*x - 1",
            "exp(-x)*sqrt(abs(x))",
            "min(x, 1)/max(x, 0.5)",
            "-x^1.5",
        ] {
            let e = parse(src).unwrap();
            let c = e.compile();
            for i in 0..50 {
                let x = 0.1 + 0.2 * i as f64;
                assert_eq!(c.eval(x).unwrap().to_bits(), e.eval(x).unwrap().to_bits());
            }
        }
        let c = parse("1/(x-1)").unwrap().compile();
        assert!(c.eval(1.0).is_err());
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0.0f64..1e6).prop_map(Expr::Num),
            Just(Expr::Var),
            Just(Expr::Const(Constant::Pi)),
            Just(Expr::Const(Constant::E)),
        ];
        leaf.prop_recursive(5, 48, 3, |inner| {
            prop_oneof![
                inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
                (
                    prop_oneof![
                        Just(BinOp::Add),
                        Just(BinOp::Sub),
                        Just(BinOp::Mul),
                        Just(BinOp::Div),
                        Just(BinOp::Pow)
                    ],
                    inner.clone(),
                    inner.clone()
                )
                    .prop_map(|(op, a, b)| Expr::Bin(op, Box::new(a), Box::new(b))),
                (
                    prop_oneof![
                        Just(Func::Exp),
                        Just(Func::Log),
                        Just(Func::Sqrt),
                        Just(Func::Abs)
                    ],
                    inner.clone()
                )
                    .prop_map(|(f, a)| Expr::Call(f, vec![a])),
                (
                    prop_oneof![Just(Func::Min), Just(Func::Max), Just(Func::Pow)],
                    inner.clone(),
                    inner
                )
                    .prop_map(|(f, a, b)| Expr::Call(f, vec![a, b])),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(e in arb_expr()) {
            let printed = e.to_string();
            let back = parse(&printed).unwrap();
            prop_assert_eq!(&back, &e);
            prop_assert_eq!(parse(&back.to_string()).unwrap(), back);
        }

        #[test]
        fn evaluation_is_pure_and_never_nan(e in arb_expr(), x in -10.0f64..10.0) {
            let a = e.eval(x);
            let b = e.eval(x);
            prop_assert_eq!(&a, &b);
            if let Ok(v) = a {
                prop_assert!(v.is_finite());
                let c = e.compile().eval(x).unwrap();
                prop_assert_eq!(c.to_bits(), v.to_bits());
            }
        }
    }
}
