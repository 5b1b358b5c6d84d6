//! Scalar expression language used for gains, storage functions, vector
//! fields, densities and inputs.
//!
//! Grammar (lowest to highest precedence):
//!
//! ```text
//! sum     := product (('+' | '-') product)*
//! product := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := atom ('^' unary)?          // right-associative
//! atom    := number | ident | ident '(' args ')' | '(' sum ')'
//! ```
//!
//! Identifiers resolve against a [`Schema`] fixed at parse time, so every
//! variable in a parsed [`Expr`] carries the slot it reads from.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("syntax error at byte {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("unknown identifier `{0}`")]
    UnknownIdentifier(String),
    #[error("function `{func}` takes {expected} argument(s), got {got}")]
    Arity {
        func: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("variable schema is empty")]
    EmptySchema,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub enum EvalError {
    #[error("domain error in `{op}` at argument {arg}")]
    Domain { op: &'static str, arg: f64 },
    #[error("no binding for variable `{0}`")]
    Unbound(String),
}

/// Ordered list of variable names an expression may reference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    names: Vec<String>,
}

impl Schema {
    pub fn new<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            names: names.into_iter().map(Into::into).collect(),
        }
    }

    /// `{s}`, the argument of a comparison function.
    pub fn scalar() -> Self {
        Self::new(["s"])
    }

    /// `{x<first>, ..., x<first+len-1>}` (1-based names).
    pub fn state_block(first: usize, len: usize) -> Self {
        Self::new((first..first + len).map(|i| format!("x{i}")))
    }

    /// `{x1..xn, u1..um, t}`, the layout every vector field is evaluated in.
    pub fn field(n: usize, m: usize) -> Self {
        let mut names: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
        names.extend((1..=m).map(|i| format!("u{i}")));
        names.push("t".to_string());
        Self { names }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinaryOp {
    fn symbol(self) -> char {
        match self {
            BinaryOp::Add => '+',
            BinaryOp::Sub => '-',
            BinaryOp::Mul => '*',
            BinaryOp::Div => '/',
            BinaryOp::Pow => '^',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
}

/// Builtin functions with their fixed arities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Ln,
    Sqrt,
    Abs,
    Min,
    Max,
    Tanh,
    Sign,
}

impl Func {
    const ALL: [Func; 11] = [
        Func::Sin,
        Func::Cos,
        Func::Tan,
        Func::Exp,
        Func::Ln,
        Func::Sqrt,
        Func::Abs,
        Func::Min,
        Func::Max,
        Func::Tanh,
        Func::Sign,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Exp => "exp",
            Func::Ln => "ln",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
            Func::Tanh => "tanh",
            Func::Sign => "sign",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }

    pub fn from_name(name: &str) -> Option<Func> {
        Self::ALL.iter().copied().find(|f| f.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Number(f64),
    Var { name: String, slot: usize },
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

/// Named variable bindings for [`Expr::eval_env`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Env(BTreeMap<String, f64>);

impl Env {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.0.insert(name.to_string(), value);
        self
    }

    pub fn set(&mut self, name: &str, value: f64) {
        self.0.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.get(name).copied()
    }
}

impl<'a> FromIterator<(&'a str, f64)> for Env {
    fn from_iter<T: IntoIterator<Item = (&'a str, f64)>>(iter: T) -> Self {
        Env(iter.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
    }
}

/// Parse `text` with identifiers restricted to `schema`.
pub fn parse(text: &str, schema: &Schema) -> Result<Expr, ParseError> {
    if schema.is_empty() {
        return Err(ParseError::EmptySchema);
    }
    let tokens = lex(text)?;
    let mut parser = Parser {
        tokens,
        pos: 0,
        schema,
        end: text.len(),
    };
    let expr = parser.sum()?;
    if let Some((tok, at)) = parser.tokens.get(parser.pos) {
        return Err(ParseError::Syntax {
            position: *at,
            message: format!("unexpected {tok}"),
        });
    }
    Ok(expr)
}

impl Expr {
    /// Evaluate with variables bound positionally in schema order.
    pub fn eval(&self, vars: &[f64]) -> Result<f64, EvalError> {
        match self {
            Expr::Number(v) => Ok(*v),
            Expr::Var { name, slot } => vars.get(*slot).copied().ok_or_else(|| EvalError::Unbound(name.clone())),
            Expr::Unary(UnaryOp::Neg, e) => Ok(-e.eval(vars)?),
            Expr::Binary(op, l, r) => binary(*op, l.eval(vars)?, r.eval(vars)?),
            Expr::Call(f, args) => match args.as_slice() {
                [a] => call1(*f, a.eval(vars)?),
                [a, b] => call2(*f, a.eval(vars)?, b.eval(vars)?),
                _ => unreachable!("arity checked at parse time"),
            },
        }
    }

    /// Evaluate with variables looked up by name.
    pub fn eval_env(&self, env: &Env) -> Result<f64, EvalError> {
        match self {
            Expr::Number(v) => Ok(*v),
            Expr::Var { name, .. } => env.get(name).ok_or_else(|| EvalError::Unbound(name.clone())),
            Expr::Unary(UnaryOp::Neg, e) => Ok(-e.eval_env(env)?),
            Expr::Binary(op, l, r) => binary(*op, l.eval_env(env)?, r.eval_env(env)?),
            Expr::Call(f, args) => match args.as_slice() {
                [a] => call1(*f, a.eval_env(env)?),
                [a, b] => call2(*f, a.eval_env(env)?, b.eval_env(env)?),
                _ => unreachable!("arity checked at parse time"),
            },
        }
    }

    /// Replace every variable with `replacement` (used for composing
    /// single-argument functions).
    pub fn substitute(&self, replacement: &Expr) -> Expr {
        match self {
            Expr::Number(v) => Expr::Number(*v),
            Expr::Var { .. } => replacement.clone(),
            Expr::Unary(op, e) => Expr::Unary(*op, Box::new(e.substitute(replacement))),
            Expr::Binary(op, l, r) => Expr::Binary(
                *op,
                Box::new(l.substitute(replacement)),
                Box::new(r.substitute(replacement)),
            ),
            Expr::Call(f, args) => Expr::Call(*f, args.iter().map(|a| a.substitute(replacement)).collect()),
        }
    }

    /// Largest slot referenced, if any.
    pub fn max_slot(&self) -> Option<usize> {
        match self {
            Expr::Number(_) => None,
            Expr::Var { slot, .. } => Some(*slot),
            Expr::Unary(_, e) => e.max_slot(),
            Expr::Binary(_, l, r) => l.max_slot().max(r.max_slot()),
            Expr::Call(_, args) => args.iter().filter_map(Expr::max_slot).max(),
        }
    }
}

fn binary(op: BinaryOp, a: f64, b: f64) -> Result<f64, EvalError> {
    match op {
        BinaryOp::Add => Ok(a + b),
        BinaryOp::Sub => Ok(a - b),
        BinaryOp::Mul => Ok(a * b),
        BinaryOp::Div => {
            if b == 0.0 {
                Err(EvalError::Domain { op: "/", arg: b })
            } else {
                Ok(a / b)
            }
        }
        BinaryOp::Pow => {
            let v = libm::pow(a, b);
            if v.is_nan() && !a.is_nan() && !b.is_nan() {
                Err(EvalError::Domain { op: "^", arg: a })
            } else {
                Ok(v)
            }
        }
    }
}

fn call1(f: Func, x: f64) -> Result<f64, EvalError> {
    Ok(match f {
        Func::Sin => libm::sin(x),
        Func::Cos => libm::cos(x),
        Func::Tan => libm::tan(x),
        Func::Exp => libm::exp(x),
        Func::Ln => {
            if x < 0.0 {
                return Err(EvalError::Domain { op: "ln", arg: x });
            }
            libm::log(x)
        }
        Func::Sqrt => {
            if x < 0.0 {
                return Err(EvalError::Domain { op: "sqrt", arg: x });
            }
            libm::sqrt(x)
        }
        Func::Abs => libm::fabs(x),
        Func::Tanh => libm::tanh(x),
        // sign(0) = 0
        Func::Sign => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                x
            }
        }
        Func::Min | Func::Max => unreachable!("binary builtin"),
    })
}

fn call2(f: Func, a: f64, b: f64) -> Result<f64, EvalError> {
    Ok(match f {
        Func::Min => libm::fmin(a, b),
        Func::Max => libm::fmax(a, b),
        _ => unreachable!("unary builtin"),
    })
}

/// Fully parenthesised rendering that [`parse`] reads back to an
/// equivalent tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Number(v) => {
                if v.is_sign_negative() {
                    write!(f, "(-{:?})", -v)
                } else {
                    write!(f, "{v:?}")
                }
            }
            Expr::Var { name, .. } => f.write_str(name),
            Expr::Unary(UnaryOp::Neg, e) => write!(f, "(-{e})"),
            Expr::Binary(op, l, r) => write!(f, "({l} {} {r})", op.symbol()),
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Num(v) => write!(f, "number {v}"),
            Token::Ident(s) => write!(f, "identifier `{s}`"),
            Token::Op(c) => write!(f, "`{c}`"),
            Token::LParen => f.write_str("`(`"),
            Token::RParen => f.write_str("`)`"),
            Token::Comma => f.write_str("`,`"),
        }
    }
}

fn lex(text: &str) -> Result<Vec<(Token, usize)>, ParseError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => i += 1,
            b'+' | b'-' | b'*' | b'/' | b'^' => {
                out.push((Token::Op(c as char), i));
                i += 1;
            }
            b'(' => {
                out.push((Token::LParen, i));
                i += 1;
            }
            b')' => {
                out.push((Token::RParen, i));
                i += 1;
            }
            b',' => {
                out.push((Token::Comma, i));
                i += 1;
            }
            b'0'..=b'9' | b'.' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        while j < bytes.len() && bytes[j].is_ascii_digit() {
                            j += 1;
                        }
                        i = j;
                    }
                }
                let lit = &text[start..i];
                let v: f64 = lit.parse().map_err(|_| ParseError::Syntax {
                    position: start,
                    message: format!("malformed number `{lit}`"),
                })?;
                out.push((Token::Num(v), start));
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((Token::Ident(text[start..i].to_string()), start));
            }
            _ => {
                let ch = text[i..].chars().next().unwrap_or('?');
                return Err(ParseError::Syntax {
                    position: i,
                    message: format!("unexpected character `{ch}`"),
                });
            }
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<(Token, usize)>,
    pos: usize,
    schema: &'a Schema,
    end: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(t, _)| t)
    }

    fn here(&self) -> usize {
        self.tokens.get(self.pos).map_or(self.end, |(_, at)| *at)
    }

    fn eat_op(&mut self, ops: &[char]) -> Option<char> {
        match self.peek() {
            Some(Token::Op(c)) if ops.contains(c) => {
                let c = *c;
                self.pos += 1;
                Some(c)
            }
            _ => None,
        }
    }

    fn expect(&mut self, want: Token) -> Result<(), ParseError> {
        if self.peek() == Some(&want) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.unexpected(&format!("expected {want}")))
        }
    }

    fn unexpected(&self, message: &str) -> ParseError {
        let found = match self.peek() {
            Some(t) => format!("{t}"),
            None => "end of input".to_string(),
        };
        ParseError::Syntax {
            position: self.here(),
            message: format!("{message}, found {found}"),
        }
    }

    fn sum(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.product()?;
        while let Some(c) = self.eat_op(&['+', '-']) {
            let op = if c == '+' { BinaryOp::Add } else { BinaryOp::Sub };
            let rhs = self.product()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn product(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while let Some(c) = self.eat_op(&['*', '/']) {
            let op = if c == '*' { BinaryOp::Mul } else { BinaryOp::Div };
            let rhs = self.unary()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat_op(&['-']).is_some() {
            return Ok(Expr::Unary(UnaryOp::Neg, Box::new(self.unary()?)));
        }
        if self.eat_op(&['+']).is_some() {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.eat_op(&['^']).is_some() {
            let exp = self.unary()?;
            return Ok(Expr::Binary(BinaryOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let Some((tok, at)) = self.tokens.get(self.pos).cloned() else {
            return Err(self.unexpected("expected an operand"));
        };
        match tok {
            Token::Num(v) => {
                self.pos += 1;
                Ok(Expr::Number(v))
            }
            Token::LParen => {
                self.pos += 1;
                let inner = self.sum()?;
                self.expect(Token::RParen)?;
                Ok(inner)
            }
            Token::Ident(name) => {
                self.pos += 1;
                if let Some(func) = Func::from_name(&name) {
                    if self.peek() != Some(&Token::LParen) {
                        return Err(ParseError::Syntax {
                            position: at,
                            message: format!("function `{name}` must be called with `(`"),
                        });
                    }
                    self.pos += 1;
                    let mut args = Vec::new();
                    if self.peek() != Some(&Token::RParen) {
                        args.push(self.sum()?);
                        while self.peek() == Some(&Token::Comma) {
                            self.pos += 1;
                            args.push(self.sum()?);
                        }
                    }
                    self.expect(Token::RParen)?;
                    if args.len() != func.arity() {
                        return Err(ParseError::Arity {
                            func: func.name(),
                            expected: func.arity(),
                            got: args.len(),
                        });
                    }
                    return Ok(Expr::Call(func, args));
                }
                if name == "pi" {
                    return Ok(Expr::Number(core::f64::consts::PI));
                }
                match self.schema.slot(&name) {
                    Some(slot) => Ok(Expr::Var { name, slot }),
                    None => Err(ParseError::UnknownIdentifier(name)),
                }
            }
            _ => Err(self.unexpected("expected an operand")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::PI;

    fn s() -> Schema {
        Schema::scalar()
    }

    fn var_s() -> Expr {
        Expr::Var {
            name: "s".into(),
            slot: 0,
        }
    }

    fn ev(text: &str, vars: &[f64]) -> f64 {
        parse(text, &s()).unwrap().eval(vars).unwrap()
    }

    #[test]
    fn single_identifier() {
        assert_eq!(parse("s", &s()).unwrap(), var_s());
    }

    #[test]
    fn grammar_shape() {
        let e = parse("s + 0.1*sin(pi*s)", &s()).unwrap();
        let expected = Expr::Binary(
            BinaryOp::Add,
            Box::new(var_s()),
            Box::new(Expr::Binary(
                BinaryOp::Mul,
                Box::new(Expr::Number(0.1)),
                Box::new(Expr::Call(
                    Func::Sin,
                    alloc::vec![Expr::Binary(
                        BinaryOp::Mul,
                        Box::new(Expr::Number(PI)),
                        Box::new(var_s())
                    )],
                )),
            )),
        );
        assert_eq!(e, expected);
    }

    #[test]
    fn unknown_identifier() {
        let schema = Schema::new(["x1", "x2"]);
        assert_eq!(parse("x3", &schema), Err(ParseError::UnknownIdentifier("x3".into())));
    }

    #[test]
    fn arity_and_syntax_errors() {
        assert!(matches!(
            parse("min(s)", &s()),
            Err(ParseError::Arity {
                func: "min",
                expected: 2,
                got: 1
            })
        ));
        assert!(matches!(parse("s +", &s()), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse("(s", &s()), Err(ParseError::Syntax { .. })));
        assert!(matches!(
            parse("s s", &s()),
            Err(ParseError::Syntax { position: 2, .. })
        ));
        assert!(matches!(parse("sin s", &s()), Err(ParseError::Syntax { .. })));
        assert!(matches!(
            parse("s # 2", &s()),
            Err(ParseError::Syntax { position: 2, .. })
        ));
        assert_eq!(
            parse("s", &Schema::new::<[&str; 0], &str>([])),
            Err(ParseError::EmptySchema)
        );
    }

    #[test]
    fn evaluation_examples() {
        assert_eq!(ev("2*s", &[3.0]), 6.0);
        assert_eq!(ev("s^2", &[2.0]), 4.0);
        assert!((ev("s + 0.1*sin(pi*s)", &[0.5]) - 0.6).abs() <= 1e-12);
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("2+3*4", &[0.0]), 14.0);
        assert_eq!(ev("2^3^2", &[0.0]), 512.0);
        assert_eq!(ev("-s^2", &[3.0]), -9.0);
        assert_eq!(ev("2^-1", &[0.0]), 0.5);
        assert_eq!(ev("8/4/2", &[0.0]), 1.0);
        assert_eq!(ev("1.5e2 + 2E-1", &[0.0]), 150.2);
    }

    #[test]
    fn builtins() {
        assert_eq!(ev("sign(s)", &[0.0]), 0.0);
        assert_eq!(ev("sign(s)", &[-2.0]), -1.0);
        assert_eq!(ev("max(s, 1) + min(s, 1)", &[3.0]), 4.0);
        assert_eq!(ev("abs(s)", &[-2.5]), 2.5);
        assert!((ev("ln(exp(s))", &[1.7]) - 1.7).abs() < 1e-15);
        assert!((ev("tanh(s) - tan(s) + cos(s)", &[0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn domain_errors() {
        let e = |t: &str, v: f64| parse(t, &s()).unwrap().eval(&[v]);
        assert!(matches!(e("ln(s)", -1.0), Err(EvalError::Domain { op: "ln", .. })));
        assert!(matches!(e("sqrt(s)", -1.0), Err(EvalError::Domain { op: "sqrt", .. })));
        assert!(matches!(e("1/s", 0.0), Err(EvalError::Domain { op: "/", .. })));
        assert!(e("sqrt(s)", 0.0).is_ok());
    }

    #[test]
    fn env_evaluation_and_unbound() {
        let schema = Schema::field(2, 1);
        let e = parse("x1*u1 + x2 - t", &schema).unwrap();
        let env: Env = [("x1", 2.0), ("x2", 1.0), ("u1", 3.0), ("t", 0.5)]
            .into_iter()
            .collect();
        assert_eq!(e.eval_env(&env).unwrap(), 6.5);
        assert_eq!(e.eval(&[2.0, 1.0, 3.0, 0.5]).unwrap(), 6.5);
        assert_eq!(
            e.eval_env(&Env::new().with("x1", 1.0)),
            Err(EvalError::Unbound("u1".into()))
        );
    }

    #[test]
    fn substitution_composes() {
        let outer = parse("s^2", &s()).unwrap();
        let inner = parse("s + 1", &s()).unwrap();
        assert_eq!(outer.substitute(&inner).eval(&[2.0]).unwrap(), 9.0);
    }

    #[test]
    fn display_reparses() {
        let e = parse("-s^2 + 3*(s - -1.5e-7)/max(s, 2)", &s()).unwrap();
        let back = parse(&e.to_string(), &s()).unwrap();
        for v in [0.3, -2.0, 17.0] {
            assert_eq!(e.eval(&[v]).unwrap().to_bits(), back.eval(&[v]).unwrap().to_bits());
        }
    }
}
