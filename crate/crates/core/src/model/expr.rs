//! Small arithmetic expression language with symbolic differentiation.
//!
//! Grammar: `+ - * / ^`, unary minus, parentheses, numeric literals,
//! identifiers (states, parameters or named constants) and the functions
//! `sin cos tan exp ln sqrt`.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Ln,
    Sqrt,
}

impl Func {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "exp" => Func::Exp,
            "ln" | "log" => Func::Ln,
            "sqrt" => Func::Sqrt,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Exp => "exp",
            Func::Ln => "ln",
            Func::Sqrt => "sqrt",
        }
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Func::Sin => v.sin(),
            Func::Cos => v.cos(),
            Func::Tan => v.tan(),
            Func::Exp => v.exp(),
            Func::Ln => v.ln(),
            Func::Sqrt => v.sqrt(),
        }
    }
}

/// Differentiation variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    State(usize),
    Param(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    State(usize),
    Param(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

/// Names that identifiers resolve against.
#[derive(Debug, Clone, Default)]
pub struct ExprContext {
    pub states: Vec<String>,
    pub params: Vec<String>,
    pub constants: BTreeMap<String, f64>,
}

impl ExprContext {
    fn resolve(&self, name: &str) -> Option<Expr> {
        if let Some(i) = self.states.iter().position(|s| s == name) {
            return Some(Expr::State(i));
        }
        if let Some(j) = self.params.iter().position(|s| s == name) {
            return Some(Expr::Param(j));
        }
        self.constants.get(name).map(|&v| Expr::Const(v))
    }
}

fn is_const(e: &Expr, v: f64) -> bool {
    matches!(e, Expr::Const(c) if *c == v)
}

// Constructors with light constant folding, so derivative trees stay small.
fn add(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x + y),
        _ if is_const(&a, 0.0) => b,
        _ if is_const(&b, 0.0) => a,
        _ => Expr::Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x - y),
        _ if is_const(&b, 0.0) => a,
        _ if is_const(&a, 0.0) => neg(b),
        _ => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x * y),
        _ if is_const(&a, 0.0) || is_const(&b, 0.0) => Expr::Const(0.0),
        _ if is_const(&a, 1.0) => b,
        _ if is_const(&b, 1.0) => a,
        _ => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x / y),
        _ if is_const(&a, 0.0) => Expr::Const(0.0),
        _ if is_const(&b, 1.0) => a,
        _ => Expr::Div(Box::new(a), Box::new(b)),
    }
}

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Const(x) => Expr::Const(-x),
        Expr::Neg(inner) => *inner,
        other => Expr::Neg(Box::new(other)),
    }
}

fn pow(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x.powf(*y)),
        _ if is_const(&b, 0.0) => Expr::Const(1.0),
        _ if is_const(&b, 1.0) => a,
        _ => Expr::Pow(Box::new(a), Box::new(b)),
    }
}

fn call(f: Func, a: Expr) -> Expr {
    match a {
        Expr::Const(x) => Expr::Const(f.apply(x)),
        other => Expr::Call(f, Box::new(other)),
    }
}

impl Expr {
    pub fn parse(src: &str, ctx: &ExprContext) -> Result<Expr> {
        let tokens = tokenize(src)?;
        let mut parser = Parser {
            tokens: &tokens,
            pos: 0,
            ctx,
            src,
        };
        let e = parser.expr()?;
        if parser.pos != tokens.len() {
            return Err(parser.error("unexpected trailing input"));
        }
        Ok(e)
    }

    pub fn eval(&self, x: &[f64], p: &[f64]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::State(i) => x[*i],
            Expr::Param(j) => p[*j],
            Expr::Neg(a) => -a.eval(x, p),
            Expr::Add(a, b) => a.eval(x, p) + b.eval(x, p),
            Expr::Sub(a, b) => a.eval(x, p) - b.eval(x, p),
            Expr::Mul(a, b) => a.eval(x, p) * b.eval(x, p),
            Expr::Div(a, b) => a.eval(x, p) / b.eval(x, p),
            Expr::Pow(a, b) => {
                let base = a.eval(x, p);
                match **b {
                    Expr::Const(c) if c.fract() == 0.0 && c.abs() < 64.0 => base.powi(c as i32),
                    _ => base.powf(b.eval(x, p)),
                }
            }
            Expr::Call(f, a) => f.apply(a.eval(x, p)),
        }
    }

    pub fn is_zero(&self) -> bool {
        is_const(self, 0.0)
    }

    pub fn diff(&self, v: Var) -> Expr {
        match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::State(i) => Expr::Const(if v == Var::State(*i) { 1.0 } else { 0.0 }),
            Expr::Param(j) => Expr::Const(if v == Var::Param(*j) { 1.0 } else { 0.0 }),
            Expr::Neg(a) => neg(a.diff(v)),
            Expr::Add(a, b) => add(a.diff(v), b.diff(v)),
            Expr::Sub(a, b) => sub(a.diff(v), b.diff(v)),
            Expr::Mul(a, b) => add(
                mul(a.diff(v), (**b).clone()),
                mul((**a).clone(), b.diff(v)),
            ),
            Expr::Div(a, b) => {
                // (a'b − ab') / b²
                let num = sub(
                    mul(a.diff(v), (**b).clone()),
                    mul((**a).clone(), b.diff(v)),
                );
                div(num, pow((**b).clone(), Expr::Const(2.0)))
            }
            Expr::Pow(a, b) => {
                let da = a.diff(v);
                let db = b.diff(v);
                if db.is_zero() {
                    // b a^(b−1) a'
                    let reduced = pow((**a).clone(), sub((**b).clone(), Expr::Const(1.0)));
                    mul(mul((**b).clone(), reduced), da)
                } else {
                    // a^b (b' ln a + b a'/a)
                    let term = add(
                        mul(db, call(Func::Ln, (**a).clone())),
                        div(mul((**b).clone(), da), (**a).clone()),
                    );
                    mul(self.clone(), term)
                }
            }
            Expr::Call(f, a) => {
                let da = a.diff(v);
                if da.is_zero() {
                    return Expr::Const(0.0);
                }
                let inner = (**a).clone();
                let outer = match f {
                    Func::Sin => call(Func::Cos, inner),
                    Func::Cos => neg(call(Func::Sin, inner)),
                    Func::Tan => div(Expr::Const(1.0), pow(call(Func::Cos, inner), Expr::Const(2.0))),
                    Func::Exp => self.clone(),
                    Func::Ln => div(Expr::Const(1.0), inner),
                    Func::Sqrt => div(Expr::Const(0.5), self.clone()),
                };
                mul(outer, da)
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::State(i) => write!(f, "x[{i}]"),
            Expr::Param(j) => write!(f, "p[{j}]"),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(a, b) => write!(f, "({a} ^ {b})"),
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Op(char),
}

fn tokenize(src: &str) -> Result<Vec<(usize, Token)>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            // exponent part
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v = text
                .parse::<f64>()
                .map_err(|_| Error::Expression(format!("bad number `{text}` in `{src}`")))?;
            out.push((start, Token::Num(v)));
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push((start, Token::Ident(chars[start..i].iter().collect())));
        } else if "+-*/^(),".contains(c) {
            out.push((i, Token::Op(c)));
            i += 1;
        } else {
            return Err(Error::Expression(format!(
                "unexpected character `{c}` at {i} in `{src}`"
            )));
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: &'a [(usize, Token)],
    pos: usize,
    ctx: &'a ExprContext,
    src: &'a str,
}

impl Parser<'_> {
    fn error(&self, msg: &str) -> Error {
        let at = self
            .tokens
            .get(self.pos)
            .map(|(o, _)| *o)
            .unwrap_or(self.src.len());
        Error::Expression(format!("{msg} at offset {at} in `{}`", self.src))
    }

    fn peek_op(&self) -> Option<char> {
        match self.tokens.get(self.pos) {
            Some((_, Token::Op(c))) => Some(*c),
            _ => None,
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.peek_op() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(&format!("expected `{c}`")))
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(op @ ('+' | '-')) = self.peek_op() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if op == '+' { add(lhs, rhs) } else { sub(lhs, rhs) };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while let Some(op @ ('*' | '/')) = self.peek_op() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = if op == '*' { mul(lhs, rhs) } else { div(lhs, rhs) };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        match self.peek_op() {
            Some('-') => {
                self.pos += 1;
                Ok(neg(self.unary()?))
            }
            Some('+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if self.peek_op() == Some('^') {
            self.pos += 1;
            // right associative, binds tighter than unary minus on the left
            let exp = self.unary()?;
            return Ok(pow(base, exp));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        let Some((_, tok)) = self.tokens.get(self.pos) else {
            return Err(self.error("unexpected end of expression"));
        };
        match tok {
            Token::Num(v) => {
                self.pos += 1;
                Ok(Expr::Const(*v))
            }
            Token::Op('(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Token::Ident(name) => {
                self.pos += 1;
                if self.peek_op() == Some('(') {
                    let func = Func::from_name(name)
                        .ok_or_else(|| self.error(&format!("unknown function `{name}`")))?;
                    self.pos += 1;
                    let arg = self.expr()?;
                    self.expect(')')?;
                    return Ok(call(func, arg));
                }
                self.ctx
                    .resolve(name)
                    .ok_or_else(|| Error::Expression(format!("unknown identifier `{name}` in `{}`", self.src)))
            }
            Token::Op(c) => Err(self.error(&format!("unexpected `{c}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ctx() -> ExprContext {
        ExprContext {
            states: vec!["x1".into(), "x2".into()],
            params: vec!["Pm".into(), "M".into()],
            constants: [("D".to_string(), 0.5)].into_iter().collect(),
        }
    }

    #[test]
    fn parses_swing_equation() {
        let e = Expr::parse("(Pm - sin(x1) - D*x2)/M", &ctx()).unwrap();
        let v = e.eval(&[0.5, 1.5], &[0.5, 0.1]);
        assert!((v - (0.5 - 0.5f64.sin() - 0.75) / 0.1).abs() < 1e-14);
    }

    #[test]
    fn precedence_and_power() {
        let c = ctx();
        assert_eq!(Expr::parse("2 + 3*4", &c).unwrap().eval(&[], &[]), 14.0);
        assert_eq!(Expr::parse("-2^2", &c).unwrap().eval(&[], &[]), -4.0);
        assert_eq!(Expr::parse("2^3^2", &c).unwrap().eval(&[], &[]), 512.0);
        assert_eq!(Expr::parse("1e-3 * 2E2", &c).unwrap().eval(&[], &[]), 0.2);
    }

    #[test]
    fn rejects_unknown_names() {
        assert!(Expr::parse("y + 1", &ctx()).is_err());
        assert!(Expr::parse("foo(x1)", &ctx()).is_err());
        assert!(Expr::parse("x1 +", &ctx()).is_err());
        assert!(Expr::parse("(x1", &ctx()).is_err());
        assert!(Expr::parse("x1 $ 2", &ctx()).is_err());
    }

    #[test]
    fn derivative_of_swing_equation() {
        let e = Expr::parse("(Pm - sin(x1) - D*x2)/M", &ctx()).unwrap();
        let d = e.diff(Var::State(0));
        assert!((d.eval(&[0.3, 0.0], &[0.5, 0.1]) + 0.3f64.cos() / 0.1).abs() < 1e-12);
        let dm = e.diff(Var::Param(1));
        let f = e.eval(&[0.3, 0.2], &[0.5, 0.1]);
        assert!((dm.eval(&[0.3, 0.2], &[0.5, 0.1]) + f / 0.1).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn symbolic_derivative_matches_central_difference(x1 in -2.0f64..2.0, x2 in 0.2f64..2.0, pm in -1.0f64..1.0) {
            let c = ctx();
            let srcs = [
                "x1^3 - 2*x1*x2 + Pm",
                "exp(-x1*x2) * cos(Pm*x1)",
                "sqrt(x2) + ln(x2 + 1) / (1 + x1^2)",
                "x2^x1 + tan(x1/4)",
            ];
            for src in srcs {
                let e = Expr::parse(src, &c).unwrap();
                for (v, idx) in [(Var::State(0), 0usize), (Var::State(1), 1)] {
                    let d = e.diff(v).eval(&[x1, x2], &[pm, 0.1]);
                    let h = 1e-6;
                    let mut xp = [x1, x2];
                    let mut xm = [x1, x2];
                    xp[idx] += h;
                    xm[idx] -= h;
                    let fd = (e.eval(&xp, &[pm, 0.1]) - e.eval(&xm, &[pm, 0.1])) / (2.0 * h);
                    prop_assert!((d - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "{src}: {d} vs {fd}");
                }
            }
        }
    }
}
