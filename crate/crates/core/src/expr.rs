//! Closed-form coefficient expressions.
//!
//! Every coefficient of a problem (drift, diffusion, driver ingredients,
//! terminal function, control weights) is an expression tree over the
//! variables `t`, `x` and `y`. Expressions are parsed from config strings or
//! assembled programmatically with the arithmetic operators.
//!
//! Grammar (usual precedence, `^` is right associative and binds tighter
//! than unary minus):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?
//! primary := number | 't' | 'x' | 'y' | 'pi' | 'e' | func '(' expr ')' | '(' expr ')'
//! func    := exp | ln | sin | cos | tanh | sqrt | abs
//! ```

use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("column {column}: {message}")]
pub struct ExprError {
    /// 1-based column inside the expression text.
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    T,
    X,
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Ln,
    Sin,
    Cos,
    Tanh,
    Sqrt,
    Abs,
}

impl Func {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "exp" => Func::Exp,
            "ln" => Func::Ln,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tanh" => Func::Tanh,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Ln => "ln",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tanh => "tanh",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
        }
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Func::Exp => v.exp(),
            Func::Ln => v.ln(),
            Func::Sin => v.sin(),
            Func::Cos => v.cos(),
            Func::Tanh => v.tanh(),
            Func::Sqrt => v.sqrt(),
            Func::Abs => v.abs(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

/// Values bound to the expression variables during evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Vars {
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

impl Vars {
    pub fn tx(t: f64, x: f64) -> Self {
        Vars { t, x, y: 0.0 }
    }

    pub fn ty(t: f64, y: f64) -> Self {
        Vars { t, x: 0.0, y }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

impl Expr {
    pub fn parse(text: &str) -> Result<Expr, ExprError> {
        let tokens = tokenize(text)?;
        let mut parser = Parser { tokens, pos: 0, len: text.chars().count() };
        let expr = parser.expr()?;
        if let Some(tok) = parser.peek() {
            return Err(ExprError {
                column: tok.column,
                message: format!("unexpected {}", tok.kind.describe()),
            });
        }
        Ok(expr.fold())
    }

    pub fn constant(c: f64) -> Expr {
        Expr::Const(c)
    }

    pub fn t() -> Expr {
        Expr::Var(Var::T)
    }

    pub fn x() -> Expr {
        Expr::Var(Var::X)
    }

    pub fn y() -> Expr {
        Expr::Var(Var::Y)
    }

    pub fn call(func: Func, arg: Expr) -> Expr {
        Expr::Call(func, Box::new(arg)).fold()
    }

    pub fn powi(self, n: i32) -> Expr {
        Expr::Bin(BinOp::Pow, Box::new(self), Box::new(Expr::Const(n as f64))).fold()
    }

    pub fn eval(&self, v: Vars) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(Var::T) => v.t,
            Expr::Var(Var::X) => v.x,
            Expr::Var(Var::Y) => v.y,
            Expr::Neg(a) => -a.eval(v),
            Expr::Call(f, a) => f.apply(a.eval(v)),
            Expr::Bin(op, a, b) => {
                let (a, b) = (a.eval(v), b.eval(v));
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                    BinOp::Pow => pow(a, b),
                }
            }
        }
    }

    /// Evaluates a field of `(t, x)`.
    pub fn at(&self, t: f64, x: f64) -> f64 {
        self.eval(Vars::tx(t, x))
    }

    /// Evaluates a function of time only.
    pub fn at_t(&self, t: f64) -> f64 {
        self.eval(Vars::tx(t, 0.0))
    }

    pub fn depends_on(&self, var: Var) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Var(v) => *v == var,
            Expr::Neg(a) | Expr::Call(_, a) => a.depends_on(var),
            Expr::Bin(_, a, b) => a.depends_on(var) || b.depends_on(var),
        }
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self {
            Expr::Const(c) => Some(*c),
            _ => None,
        }
    }

    /// Folds constant subtrees.
    pub fn fold(self) -> Expr {
        match self {
            Expr::Neg(a) => match a.fold() {
                Expr::Const(c) => Expr::Const(-c),
                other => Expr::Neg(Box::new(other)),
            },
            Expr::Call(f, a) => match a.fold() {
                Expr::Const(c) => Expr::Const(f.apply(c)),
                other => Expr::Call(f, Box::new(other)),
            },
            Expr::Bin(op, a, b) => {
                let (a, b) = (a.fold(), b.fold());
                if let (Expr::Const(_), Expr::Const(_)) = (&a, &b) {
                    return Expr::Const(Expr::Bin(op, Box::new(a), Box::new(b)).eval(Vars::default()));
                }
                match (op, a.as_constant(), b.as_constant()) {
                    (BinOp::Add, Some(z), _) if z == 0.0 => return b,
                    (BinOp::Add | BinOp::Sub, _, Some(z)) if z == 0.0 => return a,
                    (BinOp::Mul, Some(o), _) if o == 1.0 => return b,
                    // coefficients are finite, so a zero factor kills the term
                    (BinOp::Mul, Some(z), _) | (BinOp::Mul, _, Some(z)) if z == 0.0 => return Expr::Const(0.0),
                    (BinOp::Sub, Some(z), _) if z == 0.0 => return Expr::Neg(Box::new(b)).fold(),
                    (BinOp::Mul | BinOp::Div | BinOp::Pow, _, Some(o)) if o == 1.0 => return a,
                    _ => {}
                }
                Expr::Bin(op, Box::new(a), Box::new(b))
            }
            other => other,
        }
    }
}

fn pow(a: f64, b: f64) -> f64 {
    if b == 2.0 {
        a * a
    } else if b.fract() == 0.0 && b.abs() <= 64.0 {
        a.powi(b as i32)
    } else {
        a.powf(b)
    }
}

impl From<f64> for Expr {
    fn from(c: f64) -> Self {
        Expr::Const(c)
    }
}

macro_rules! bin_op {
    ($trait:ident, $method:ident, $op:expr) => {
        impl $trait for Expr {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                Expr::Bin($op, Box::new(self), Box::new(rhs)).fold()
            }
        }
        impl $trait<f64> for Expr {
            type Output = Expr;
            fn $method(self, rhs: f64) -> Expr {
                Expr::Bin($op, Box::new(self), Box::new(Expr::Const(rhs))).fold()
            }
        }
        impl $trait<Expr> for f64 {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                Expr::Bin($op, Box::new(Expr::Const(self)), Box::new(rhs)).fold()
            }
        }
    };
}

bin_op!(Add, add, BinOp::Add);
bin_op!(Sub, sub, BinOp::Sub);
bin_op!(Mul, mul, BinOp::Mul);
bin_op!(Div, div, BinOp::Div);

impl Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::Neg(Box::new(self)).fold()
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Var(Var::T) => write!(f, "t"),
            Expr::Var(Var::X) => write!(f, "x"),
            Expr::Var(Var::Y) => write!(f, "y"),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
            Expr::Bin(op, a, b) => {
                let sym = match op {
                    BinOp::Add => "+",
                    BinOp::Sub => "-",
                    BinOp::Mul => "*",
                    BinOp::Div => "/",
                    BinOp::Pow => "^",
                };
                write!(f, "({a}{sym}{b})")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TokenKind {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
}

impl TokenKind {
    fn describe(&self) -> String {
        match self {
            TokenKind::Num(v) => format!("number {v}"),
            TokenKind::Ident(s) => format!("identifier '{s}'"),
            TokenKind::Op(c) => format!("operator '{c}'"),
            TokenKind::LParen => "'('".into(),
            TokenKind::RParen => "')'".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokenKind,
    column: usize,
}

fn tokenize(text: &str) -> Result<Vec<Token>, ExprError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let column = i + 1;
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            // exponent part, e.g. 1e-3
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
            let lit: String = chars[start..i].iter().collect();
            let value = lit.parse::<f64>().map_err(|_| ExprError {
                column,
                message: format!("malformed number '{lit}'"),
            })?;
            out.push(Token { kind: TokenKind::Num(value), column });
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Token { kind: TokenKind::Ident(chars[start..i].iter().collect()), column });
        } else if "+-*/^".contains(c) {
            out.push(Token { kind: TokenKind::Op(c), column });
            i += 1;
        } else if c == '(' {
            out.push(Token { kind: TokenKind::LParen, column });
            i += 1;
        } else if c == ')' {
            out.push(Token { kind: TokenKind::RParen, column });
            i += 1;
        } else {
            return Err(ExprError { column, message: format!("unexpected character '{c}'") });
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    len: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn eof_error(&self, what: &str) -> ExprError {
        ExprError { column: self.len + 1, message: format!("expected {what}, found end of expression") }
    }

    fn eat_op(&mut self, ops: &str) -> Option<char> {
        match self.peek() {
            Some(Token { kind: TokenKind::Op(c), .. }) if ops.contains(*c) => {
                let c = *c;
                self.pos += 1;
                Some(c)
            }
            _ => None,
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        while let Some(op) = self.eat_op("+-") {
            let rhs = self.term()?;
            let op = if op == '+' { BinOp::Add } else { BinOp::Sub };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        while let Some(op) = self.eat_op("*/") {
            let rhs = self.unary()?;
            let op = if op == '*' { BinOp::Mul } else { BinOp::Div };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.eat_op("-").is_some() {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        if self.eat_op("+").is_some() {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.primary()?;
        if self.eat_op("^").is_some() {
            let exponent = self.unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        let tok = self.peek().cloned().ok_or_else(|| self.eof_error("an operand"))?;
        self.pos += 1;
        match tok.kind {
            TokenKind::Num(v) => Ok(Expr::Const(v)),
            TokenKind::LParen => {
                let inner = self.expr()?;
                self.close_paren()?;
                Ok(inner)
            }
            TokenKind::Ident(name) => match name.as_str() {
                "t" => Ok(Expr::Var(Var::T)),
                "x" => Ok(Expr::Var(Var::X)),
                "y" => Ok(Expr::Var(Var::Y)),
                "pi" => Ok(Expr::Const(std::f64::consts::PI)),
                "e" => Ok(Expr::Const(std::f64::consts::E)),
                other => {
                    let func = Func::from_name(other).ok_or_else(|| ExprError {
                        column: tok.column,
                        message: format!("unknown identifier '{other}'"),
                    })?;
                    match self.peek() {
                        Some(Token { kind: TokenKind::LParen, .. }) => self.pos += 1,
                        Some(t) => {
                            return Err(ExprError {
                                column: t.column,
                                message: format!("expected '(' after '{other}'"),
                            })
                        }
                        None => return Err(self.eof_error("'('")),
                    }
                    let arg = self.expr()?;
                    self.close_paren()?;
                    Ok(Expr::Call(func, Box::new(arg)))
                }
            },
            other => Err(ExprError { column: tok.column, message: format!("unexpected {}", other.describe()) }),
        }
    }

    fn close_paren(&mut self) -> Result<(), ExprError> {
        match self.peek() {
            Some(Token { kind: TokenKind::RParen, .. }) => {
                self.pos += 1;
                Ok(())
            }
            Some(t) => Err(ExprError { column: t.column, message: format!("expected ')', found {}", t.kind.describe()) }),
            None => Err(self.eof_error("')'")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(s: &str, t: f64, x: f64) -> f64 {
        Expr::parse(s).unwrap().at(t, x)
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("1+2*3", 0.0, 0.0), 7.0);
        assert_eq!(ev("2^3^2", 0.0, 0.0), 512.0);
        assert_eq!(ev("-x^2", 0.0, 3.0), -9.0);
        assert_eq!(ev("(1+x)*(1-x)", 0.0, 2.0), -3.0);
        assert_eq!(ev("8/4/2", 0.0, 0.0), 1.0);
        assert_eq!(ev("1e-3*1000", 0.0, 0.0), 1.0);
    }

    #[test]
    fn functions_and_variables() {
        assert!((ev("ln(e)", 0.0, 0.0) - 1.0).abs() < 1e-15);
        assert!((ev("tanh(1-t)", 0.25, 0.0) - 0.75f64.tanh()).abs() < 1e-15);
        assert_eq!(ev("abs(x)+sqrt(4)", 0.0, -3.0), 5.0);
        let e = Expr::parse("y*t").unwrap();
        assert_eq!(e.eval(Vars { t: 2.0, x: 0.0, y: 3.0 }), 6.0);
    }

    #[test]
    fn constants_are_folded() {
        assert_eq!(Expr::parse("2*3+1").unwrap(), Expr::Const(7.0));
        let e = Expr::x() * 2.0 - 1.0;
        assert_eq!(e.at(0.0, 4.0), 7.0);
        assert!(!e.depends_on(Var::T));
    }

    #[test]
    fn dangling_operator_is_rejected() {
        let err = Expr::parse("1+").unwrap_err();
        assert_eq!(err.column, 3);
    }

    #[test]
    fn unknown_identifier_reports_column() {
        let err = Expr::parse("2*foo(x)").unwrap_err();
        assert_eq!(err.column, 3);
        assert!(Expr::parse("x)").is_err());
        assert!(Expr::parse("sin x").is_err());
        assert!(Expr::parse("3 $ 4").is_err());
    }
}
