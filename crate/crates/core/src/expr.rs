//! Scalar expressions over `x`, `u` and `w`.
//!
//! Grammar (whitespace-insensitive):
//!
//! ```text
//! expr     := term (('+' | '-') term)*
//! term     := unary (('*' | '/') unary)*
//! unary    := '-' unary | power
//! power    := atom ('^' exponent)?
//! exponent := INTEGER ('^' exponent)?
//! atom     := NUMBER | 'x' | 'u' | 'w' | func '(' expr (',' expr)* ')' | '(' expr ')'
//! func     := 'abs' | 'min' | 'max'
//! ```
//!
//! `^` binds tighter than unary minus (`-x^2` is `-(x^2)`) and is
//! right-associative; exponents are nonnegative integer literals and are
//! evaluated as repeated multiplication, left to right.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    X,
    U,
    W,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Abs,
    Min,
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, u32),
    Call(Func, Vec<Expr>),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseErrorKind {
    #[error("unexpected character {0:?}")]
    UnexpectedChar(char),
    #[error("expected {expected}, found {found}")]
    Unexpected {
        expected: &'static str,
        found: String,
    },
    #[error("unknown identifier {0:?}")]
    UnknownIdentifier(String),
    #[error("exponent must be a nonnegative integer literal")]
    InvalidExponent,
    #[error("division by literal zero")]
    DivisionByZero,
    #[error("{name} takes {expected} argument(s), got {got}")]
    Arity {
        name: &'static str,
        expected: &'static str,
        got: usize,
    },
    #[error("malformed number {0:?}")]
    InvalidNumber(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("parse error at byte {offset}: {kind}")]
pub struct ParseError {
    pub offset: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum EvalError {
    #[error("division by zero during evaluation")]
    DivisionByZero,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64, String),
    Ident(String),
    Op(char),
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(_, s) => format!("number {s}"),
            Tok::Ident(s) => format!("identifier {s:?}"),
            Tok::Op(c) => format!("{c:?}"),
            Tok::End => "end of input".into(),
        }
    }
}

fn lex(src: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
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
            let text = &src[start..i];
            let value = text.parse::<f64>().map_err(|_| ParseError {
                offset: start,
                kind: ParseErrorKind::InvalidNumber(text.into()),
            })?;
            out.push((start, Tok::Num(value, text.into())));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((start, Tok::Ident(src[start..i].into())));
        } else if "+-*/^(),".contains(c) {
            out.push((i, Tok::Op(c)));
            i += 1;
        } else {
            let ch = src[i..].chars().next().unwrap_or(c);
            return Err(ParseError {
                offset: i,
                kind: ParseErrorKind::UnexpectedChar(ch),
            });
        }
    }
    out.push((src.len(), Tok::End));
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].1
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].0
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].1.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, kind: ParseErrorKind) -> ParseError {
        ParseError {
            offset: self.offset(),
            kind,
        }
    }

    fn unexpected(&self, expected: &'static str) -> ParseError {
        self.error(ParseErrorKind::Unexpected {
            expected,
            found: self.peek().describe(),
        })
    }

    fn eat(&mut self, op: char) -> bool {
        if *self.peek() == Tok::Op(op) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Tok::Op('+') => BinOp::Add,
                Tok::Op('-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Op('*') => BinOp::Mul,
                Tok::Op('/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let at = self.offset();
            let rhs = self.unary()?;
            if op == BinOp::Div && is_literal_zero(&rhs) {
                return Err(ParseError {
                    offset: at,
                    kind: ParseErrorKind::DivisionByZero,
                });
            }
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat('-') {
            Ok(Expr::Neg(Box::new(self.unary()?)))
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.eat('^') {
            let n = self.exponent()?;
            Ok(Expr::Pow(Box::new(base), n))
        } else {
            Ok(base)
        }
    }

    fn exponent(&mut self) -> Result<u32, ParseError> {
        let n = match self.peek() {
            Tok::Num(v, _) if v.fract() == 0.0 && *v >= 0.0 && *v <= u32::MAX as f64 => *v as u32,
            _ => return Err(self.error(ParseErrorKind::InvalidExponent)),
        };
        let at = self.offset();
        self.bump();
        if self.eat('^') {
            let e = self.exponent()?;
            n.checked_pow(e).ok_or(ParseError {
                offset: at,
                kind: ParseErrorKind::InvalidExponent,
            })
        } else {
            Ok(n)
        }
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let at = self.offset();
        match self.peek().clone() {
            Tok::Num(v, _) => {
                self.bump();
                Ok(Expr::Num(v))
            }
            Tok::Op('(') => {
                self.bump();
                let e = self.expr()?;
                if !self.eat(')') {
                    return Err(self.unexpected("')'"));
                }
                Ok(e)
            }
            Tok::Ident(name) => {
                self.bump();
                match name.as_str() {
                    "x" => Ok(Expr::Var(Var::X)),
                    "u" => Ok(Expr::Var(Var::U)),
                    "w" => Ok(Expr::Var(Var::W)),
                    "abs" | "min" | "max" => self.call(&name, at),
                    _ => Err(ParseError {
                        offset: at,
                        kind: ParseErrorKind::UnknownIdentifier(name),
                    }),
                }
            }
            _ => Err(self.unexpected("an operand")),
        }
    }

    fn call(&mut self, name: &str, at: usize) -> Result<Expr, ParseError> {
        if !self.eat('(') {
            return Err(self.unexpected("'(' after function name"));
        }
        let mut args = vec![self.expr()?];
        while self.eat(',') {
            args.push(self.expr()?);
        }
        if !self.eat(')') {
            return Err(self.unexpected("')' or ','"));
        }
        let (func, fname, ok, expected) = match name {
            "abs" => (Func::Abs, "abs", args.len() == 1, "1"),
            "min" => (Func::Min, "min", args.len() >= 2, "at least 2"),
            _ => (Func::Max, "max", args.len() >= 2, "at least 2"),
        };
        if !ok {
            return Err(ParseError {
                offset: at,
                kind: ParseErrorKind::Arity {
                    name: fname,
                    expected,
                    got: args.len(),
                },
            });
        }
        Ok(Expr::Call(func, args))
    }
}

fn is_literal_zero(e: &Expr) -> bool {
    match e {
        Expr::Num(v) => *v == 0.0,
        Expr::Neg(inner) => is_literal_zero(inner),
        _ => false,
    }
}

/// Parses an expression.
pub fn parse(src: &str) -> Result<Expr, ParseError> {
    let mut p = Parser {
        toks: lex(src)?,
        pos: 0,
    };
    let e = p.expr()?;
    if *p.peek() != Tok::End {
        return Err(p.unexpected("an operator or end of input"));
    }
    Ok(e)
}

impl FromStr for Expr {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, ParseError> {
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
        let src = String::deserialize(d)?;
        parse(&src).map_err(serde::de::Error::custom)
    }
}

impl Expr {
    pub fn eval(&self, x: f64, u: f64, w: f64) -> Result<f64, EvalError> {
        Ok(match self {
            Expr::Num(v) => *v,
            Expr::Var(Var::X) => x,
            Expr::Var(Var::U) => u,
            Expr::Var(Var::W) => w,
            Expr::Neg(e) => -e.eval(x, u, w)?,
            Expr::Bin(op, a, b) => {
                let a = a.eval(x, u, w)?;
                let b = b.eval(x, u, w)?;
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            return Err(EvalError::DivisionByZero);
                        }
                        a / b
                    }
                }
            }
            Expr::Pow(base, n) => {
                let b = base.eval(x, u, w)?;
                match n {
                    0 => 1.0,
                    _ => (1..*n).fold(b, |acc, _| acc * b),
                }
            }
            Expr::Call(f, args) => {
                let first = args[0].eval(x, u, w)?;
                match f {
                    Func::Abs => first.abs(),
                    Func::Min => args[1..]
                        .iter()
                        .try_fold(first, |m, a| a.eval(x, u, w).map(|v| m.min(v)))?,
                    Func::Max => args[1..]
                        .iter()
                        .try_fold(first, |m, a| a.eval(x, u, w).map(|v| m.max(v)))?,
                }
            }
        })
    }

    /// Whether `var` occurs anywhere in the expression.
    pub fn uses(&self, var: Var) -> bool {
        match self {
            Expr::Num(_) => false,
            Expr::Var(v) => *v == var,
            Expr::Neg(e) | Expr::Pow(e, _) => e.uses(var),
            Expr::Bin(_, a, b) => a.uses(var) || b.uses(var),
            Expr::Call(_, args) => args.iter().any(|a| a.uses(var)),
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
            Expr::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
            Expr::Neg(_) => 3,
            Expr::Pow(..) => 4,
            Expr::Num(v) if *v < 0.0 || v.is_sign_negative() => 3,
            _ => 5,
        }
    }
}

fn write_child(f: &mut fmt::Formatter<'_>, e: &Expr, min_prec: u8) -> fmt::Result {
    if e.precedence() < min_prec {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v}"),
            Expr::Var(Var::X) => f.write_str("x"),
            Expr::Var(Var::U) => f.write_str("u"),
            Expr::Var(Var::W) => f.write_str("w"),
            Expr::Neg(e) => {
                f.write_str("-")?;
                write_child(f, e, 3)
            }
            Expr::Bin(op, a, b) => {
                let (sym, p) = match op {
                    BinOp::Add => ("+", 1),
                    BinOp::Sub => ("-", 1),
                    BinOp::Mul => ("*", 2),
                    BinOp::Div => ("/", 2),
                };
                write_child(f, a, p)?;
                write!(f, " {sym} ")?;
                write_child(f, b, p + 1)
            }
            Expr::Pow(b, n) => {
                write_child(f, b, 5)?;
                write!(f, "^{n}")
            }
            Expr::Call(func, args) => {
                let name = match func {
                    Func::Abs => "abs",
                    Func::Min => "min",
                    Func::Max => "max",
                };
                write!(f, "{name}(")?;
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

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn var(v: Var) -> Box<Expr> {
        Box::new(Expr::Var(v))
    }

    #[test]
    fn parses_example_dynamics() {
        let e = parse("(u - x)^2 + w").unwrap();
        let expected = Expr::Bin(
            BinOp::Add,
            Box::new(Expr::Pow(
                Box::new(Expr::Bin(BinOp::Sub, var(Var::U), var(Var::X))),
                2,
            )),
            var(Var::W),
        );
        assert_eq!(e, expected);
        assert_eq!(parse("x").unwrap(), Expr::Var(Var::X));
        assert_eq!(
            parse("(u - x)^4").unwrap(),
            Expr::Pow(Box::new(Expr::Bin(BinOp::Sub, var(Var::U), var(Var::X))), 4)
        );
    }

    #[test]
    fn evaluates() {
        let e = parse("(u - x)^2 + w").unwrap();
        assert_eq!(e.eval(7.0, 7.0, 0.5).unwrap(), 0.5);
        assert_eq!(parse("x + u*w").unwrap().eval(1.0, 2.0, 3.0).unwrap(), 7.0);
        assert_eq!(
            parse("(u - x)^4").unwrap().eval(0.0, 1.0, 0.0).unwrap(),
            1.0
        );
        assert_eq!(parse("x^0").unwrap().eval(0.0, 0.0, 0.0).unwrap(), 1.0);
        assert_eq!(
            parse("max(x, u, -w)")
                .unwrap()
                .eval(1.0, 2.0, -3.0)
                .unwrap(),
            3.0
        );
        assert_eq!(
            parse("abs(min(x, u))")
                .unwrap()
                .eval(-4.0, 2.0, 0.0)
                .unwrap(),
            4.0
        );
        assert_eq!(
            parse("1e-1 * 10").unwrap().eval(0.0, 0.0, 0.0).unwrap(),
            1.0
        );
    }

    #[test]
    fn precedence_and_associativity() {
        let e = |s: &str| parse(s).unwrap().eval(2.0, 3.0, 0.0).unwrap();
        assert_eq!(e("-x^2"), -4.0);
        assert_eq!(e("x - u - 1"), -2.0);
        assert_eq!(e("x / u * 3"), 2.0);
        assert_eq!(e("1 + x * u"), 7.0);
        assert_eq!(e("x^2^3"), 256.0);
        assert_eq!(e("(-x)^2"), 4.0);
    }

    #[test]
    fn runtime_division_by_zero() {
        let e = parse("x / u").unwrap();
        assert_eq!(e.eval(1.0, 0.0, 0.0), Err(EvalError::DivisionByZero));
    }

    #[test]
    fn errors_carry_offsets() {
        let err = parse("x + y").unwrap_err();
        assert_eq!(err.offset, 4);
        assert!(matches!(err.kind, ParseErrorKind::UnknownIdentifier(_)));

        let err = parse("x^1.5").unwrap_err();
        assert_eq!((err.offset, err.kind), (2, ParseErrorKind::InvalidExponent));
        assert_eq!(
            parse("x^-2").unwrap_err().kind,
            ParseErrorKind::InvalidExponent
        );
        assert_eq!(
            parse("x^(2)").unwrap_err().kind,
            ParseErrorKind::InvalidExponent
        );
        assert_eq!(
            parse("x^u").unwrap_err().kind,
            ParseErrorKind::InvalidExponent
        );

        let err = parse("x / 0").unwrap_err();
        assert_eq!((err.offset, err.kind), (4, ParseErrorKind::DivisionByZero));
        assert_eq!(
            parse("x / (-0.0)").unwrap_err().kind,
            ParseErrorKind::DivisionByZero
        );

        assert_eq!(parse("(x + u").unwrap_err().offset, 6);
        assert_eq!(
            parse("x $ u").unwrap_err().kind,
            ParseErrorKind::UnexpectedChar('$')
        );
        assert_eq!(parse("x u").unwrap_err().offset, 2);
        assert_eq!(parse("").unwrap_err().offset, 0);
        assert!(matches!(
            parse("min(x)").unwrap_err().kind,
            ParseErrorKind::Arity { name: "min", .. }
        ));
        assert!(matches!(
            parse("1.2.3").unwrap_err().kind,
            ParseErrorKind::InvalidNumber(_)
        ));
    }

    #[test]
    fn display_is_minimal() {
        let cases = [
            ("(u - x)^2 + w", "(u - x)^2 + w"),
            ("x - (u - w)", "x - (u - w)"),
            ("(x - u) - w", "x - u - w"),
            ("-(x^2)", "-x^2"),
            ("(-x)^2", "(-x)^2"),
            ("(x^2)^3", "(x^2)^3"),
            ("x / (u * w)", "x / (u * w)"),
            ("- -x", "--x"),
        ];
        for (src, printed) in cases {
            assert_eq!(parse(src).unwrap().to_string(), printed);
        }
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0u32..2000).prop_map(|n| Expr::Num(n as f64 / 8.0)),
            (0.0f64..1e6).prop_map(Expr::Num),
            prop_oneof![Just(Var::X), Just(Var::U), Just(Var::W)].prop_map(Expr::Var),
        ];
        leaf.prop_recursive(6, 48, 3, |inner| {
            prop_oneof![
                inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
                (
                    prop_oneof![
                        Just(BinOp::Add),
                        Just(BinOp::Sub),
                        Just(BinOp::Mul),
                        Just(BinOp::Div)
                    ],
                    inner.clone(),
                    inner.clone()
                )
                    .prop_filter("no literal zero divisor", |(op, _, b)| {
                        *op != BinOp::Div || !is_literal_zero(b)
                    })
                    .prop_map(|(op, a, b)| Expr::Bin(op, Box::new(a), Box::new(b))),
                (inner.clone(), 0u32..6).prop_map(|(e, n)| Expr::Pow(Box::new(e), n)),
                inner.clone().prop_map(|e| Expr::Call(Func::Abs, vec![e])),
                (
                    prop_oneof![Just(Func::Min), Just(Func::Max)],
                    prop::collection::vec(inner, 2..4)
                )
                    .prop_map(|(f, args)| Expr::Call(f, args)),
            ]
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn print_parse_round_trip(e in arb_expr()) {
            let printed = e.to_string();
            let reparsed = parse(&printed).unwrap();
            prop_assert_eq!(&reparsed, &e);
            prop_assert_eq!(reparsed.to_string(), printed);
        }

        #[test]
        fn matches_hand_coded_example(x in -10.0f64..10.0, u in -10.0f64..10.0, w in -1.0f64..1.0) {
            let dynamics = parse("(u - x)^2 + w").unwrap();
            let cost = parse("(u - x)^4").unwrap();
            let d = u - x;
            prop_assert_eq!(dynamics.eval(x, u, w).unwrap().to_bits(), (d * d + w).to_bits());
            prop_assert_eq!(cost.eval(x, u, w).unwrap().to_bits(), (d * d * d * d).to_bits());
        }
    }
}
