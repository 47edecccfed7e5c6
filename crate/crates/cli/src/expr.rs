//! Small arithmetic expression language for user-defined potentials,
//! constraints and metrics in scenario files.
//!
//! Supports `+ - * / ^`, unary minus, parentheses, float literals, the
//! constants `pi` and `e`, the usual elementary functions, and whatever
//! variable names the caller declares (`q1..qk`, `v1..vk`, `r1..rn`,
//! `phi11..phinn`). Errors carry the byte column within the expression.

use std::collections::HashMap;
use std::fmt;

#[derive(Debug, Clone)]
pub struct ExprError {
    pub message: String,
    /// 1-based column within the expression string.
    pub column: usize,
}

impl fmt::Display for ExprError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (column {})", self.message, self.column)
    }
}

impl std::error::Error for ExprError {}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Token {
    Number(f64),
    Ident(usize, usize), // byte span into the source
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
    tokens: Vec<(Token, usize)>,
}

impl<'a> Lexer<'a> {
    fn run(src: &'a str) -> Result<Vec<(Token, usize)>, ExprError> {
        let mut lex = Lexer {
            src,
            pos: 0,
            tokens: Vec::new(),
        };
        lex.tokenize()?;
        Ok(lex.tokens)
    }

    fn tokenize(&mut self) -> Result<(), ExprError> {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() {
            let c = bytes[self.pos] as char;
            let start = self.pos;
            match c {
                ' ' | '\t' | '\r' | '\n' => {
                    self.pos += 1;
                }
                '+' => self.push(Token::Plus, start),
                '-' => self.push(Token::Minus, start),
                '*' => self.push(Token::Star, start),
                '/' => self.push(Token::Slash, start),
                '^' => self.push(Token::Caret, start),
                '(' => self.push(Token::LParen, start),
                ')' => self.push(Token::RParen, start),
                ',' => self.push(Token::Comma, start),
                '0'..='9' | '.' => {
                    let mut end = self.pos;
                    let mut seen_exp = false;
                    while end < bytes.len() {
                        let d = bytes[end] as char;
                        if d.is_ascii_digit() || d == '.' {
                            end += 1;
                        } else if (d == 'e' || d == 'E') && !seen_exp {
                            seen_exp = true;
                            end += 1;
                            if end < bytes.len() && (bytes[end] == b'+' || bytes[end] == b'-') {
                                end += 1;
                            }
                        } else {
                            break;
                        }
                    }
                    let text = &self.src[self.pos..end];
                    let value: f64 = text.parse().map_err(|_| ExprError {
                        message: format!("malformed number `{text}`"),
                        column: start + 1,
                    })?;
                    self.tokens.push((Token::Number(value), start));
                    self.pos = end;
                }
                'a'..='z' | 'A'..='Z' | '_' => {
                    let mut end = self.pos;
                    while end < bytes.len() {
                        let d = bytes[end] as char;
                        if d.is_ascii_alphanumeric() || d == '_' {
                            end += 1;
                        } else {
                            break;
                        }
                    }
                    self.tokens.push((Token::Ident(self.pos, end), start));
                    self.pos = end;
                }
                other => {
                    return Err(ExprError {
                        message: format!("unexpected character `{other}`"),
                        column: start + 1,
                    })
                }
            }
        }
        Ok(())
    }

    fn push(&mut self, t: Token, at: usize) {
        self.tokens.push((t, at));
        self.pos += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func {
    Sin,
    Cos,
    Tan,
    Asin,
    Acos,
    Atan,
    Atan2,
    Sinh,
    Cosh,
    Tanh,
    Exp,
    Ln,
    Log10,
    Sqrt,
    Abs,
    Sign,
    Floor,
    Ceil,
    Min,
    Max,
    Pow,
}

impl Func {
    fn from_name(name: &str) -> Option<(Self, usize)> {
        Some(match name {
            "sin" => (Self::Sin, 1),
            "cos" => (Self::Cos, 1),
            "tan" => (Self::Tan, 1),
            "asin" => (Self::Asin, 1),
            "acos" => (Self::Acos, 1),
            "atan" => (Self::Atan, 1),
            "atan2" => (Self::Atan2, 2),
            "sinh" => (Self::Sinh, 1),
            "cosh" => (Self::Cosh, 1),
            "tanh" => (Self::Tanh, 1),
            "exp" => (Self::Exp, 1),
            "ln" => (Self::Ln, 1),
            "log" | "log10" => (Self::Log10, 1),
            "sqrt" => (Self::Sqrt, 1),
            "abs" => (Self::Abs, 1),
            "sign" => (Self::Sign, 1),
            "floor" => (Self::Floor, 1),
            "ceil" => (Self::Ceil, 1),
            "min" => (Self::Min, 2),
            "max" => (Self::Max, 2),
            "pow" => (Self::Pow, 2),
            _ => return None,
        })
    }

    fn apply(self, args: &[f64]) -> f64 {
        match self {
            Self::Sin => args[0].sin(),
            Self::Cos => args[0].cos(),
            Self::Tan => args[0].tan(),
            Self::Asin => args[0].asin(),
            Self::Acos => args[0].acos(),
            Self::Atan => args[0].atan(),
            Self::Atan2 => args[0].atan2(args[1]),
            Self::Sinh => args[0].sinh(),
            Self::Cosh => args[0].cosh(),
            Self::Tanh => args[0].tanh(),
            Self::Exp => args[0].exp(),
            Self::Ln => args[0].ln(),
            Self::Log10 => args[0].log10(),
            Self::Sqrt => args[0].sqrt(),
            Self::Abs => args[0].abs(),
            Self::Sign => args[0].signum(),
            Self::Floor => args[0].floor(),
            Self::Ceil => args[0].ceil(),
            Self::Min => args[0].min(args[1]),
            Self::Max => args[0].max(args[1]),
            Self::Pow => args[0].powf(args[1]),
        }
    }
}

#[derive(Debug, Clone)]
enum Node {
    Const(f64),
    Var(usize),
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

impl Node {
    fn eval(&self, vars: &[f64]) -> f64 {
        match self {
            Node::Const(c) => *c,
            Node::Var(i) => vars[*i],
            Node::Neg(a) => -a.eval(vars),
            Node::Add(a, b) => a.eval(vars) + b.eval(vars),
            Node::Sub(a, b) => a.eval(vars) - b.eval(vars),
            Node::Mul(a, b) => a.eval(vars) * b.eval(vars),
            Node::Div(a, b) => a.eval(vars) / b.eval(vars),
            Node::Pow(a, b) => a.eval(vars).powf(b.eval(vars)),
            Node::Call(f, args) => {
                let values: Vec<f64> = args.iter().map(|a| a.eval(vars)).collect();
                f.apply(&values)
            }
        }
    }
}

/// A parsed expression bound to a fixed variable layout.
#[derive(Debug, Clone)]
pub struct CompiledExpr {
    root: Node,
    pub n_vars: usize,
    pub source: String,
}

impl CompiledExpr {
    pub fn eval(&self, vars: &[f64]) -> f64 {
        debug_assert!(vars.len() >= self.n_vars);
        self.root.eval(vars)
    }
}

struct Parser<'a> {
    src: &'a str,
    tokens: Vec<(Token, usize)>,
    cursor: usize,
    vars: &'a HashMap<String, usize>,
}

impl<'a> Parser<'a> {
    fn error_at(&self, message: impl Into<String>, fallback: usize) -> ExprError {
        let column = self
            .tokens
            .get(self.cursor)
            .map(|(_, at)| at + 1)
            .unwrap_or(fallback.max(1));
        ExprError {
            message: message.into(),
            column,
        }
    }

    fn peek(&self) -> Option<Token> {
        self.tokens.get(self.cursor).map(|(t, _)| *t)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.peek();
        if t.is_some() {
            self.cursor += 1;
        }
        t
    }

    fn expect(&mut self, t: Token, what: &str) -> Result<(), ExprError> {
        if self.peek() == Some(t) {
            self.cursor += 1;
            Ok(())
        } else {
            Err(self.error_at(format!("expected {what}"), self.src.len()))
        }
    }

    // precedence climbing: addsub < muldiv < unary < power < atom
    fn parse_expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.parse_term()?;
        loop {
            match self.peek() {
                Some(Token::Plus) => {
                    self.cursor += 1;
                    lhs = Node::Add(Box::new(lhs), Box::new(self.parse_term()?));
                }
                Some(Token::Minus) => {
                    self.cursor += 1;
                    lhs = Node::Sub(Box::new(lhs), Box::new(self.parse_term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn parse_term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.parse_unary()?;
        loop {
            match self.peek() {
                Some(Token::Star) => {
                    self.cursor += 1;
                    lhs = Node::Mul(Box::new(lhs), Box::new(self.parse_unary()?));
                }
                Some(Token::Slash) => {
                    self.cursor += 1;
                    lhs = Node::Div(Box::new(lhs), Box::new(self.parse_unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn parse_unary(&mut self) -> Result<Node, ExprError> {
        match self.peek() {
            Some(Token::Minus) => {
                self.cursor += 1;
                Ok(Node::Neg(Box::new(self.parse_unary()?)))
            }
            Some(Token::Plus) => {
                self.cursor += 1;
                self.parse_unary()
            }
            _ => self.parse_power(),
        }
    }

    fn parse_power(&mut self) -> Result<Node, ExprError> {
        let base = self.parse_atom()?;
        if self.peek() == Some(Token::Caret) {
            self.cursor += 1;
            // right associative; unary binds tighter on the exponent side
            let exponent = self.parse_unary()?;
            Ok(Node::Pow(Box::new(base), Box::new(exponent)))
        } else {
            Ok(base)
        }
    }

    fn parse_atom(&mut self) -> Result<Node, ExprError> {
        match self.next() {
            Some(Token::Number(v)) => Ok(Node::Const(v)),
            Some(Token::LParen) => {
                let inner = self.parse_expr()?;
                self.expect(Token::RParen, "`)`")?;
                Ok(inner)
            }
            Some(Token::Ident(a, b)) => {
                let name = &self.src[a..b];
                if self.peek() == Some(Token::LParen) {
                    let (func, arity) = Func::from_name(name).ok_or_else(|| ExprError {
                        message: format!("unknown function `{name}`"),
                        column: a + 1,
                    })?;
                    self.cursor += 1;
                    let mut args = vec![self.parse_expr()?];
                    while self.peek() == Some(Token::Comma) {
                        self.cursor += 1;
                        args.push(self.parse_expr()?);
                    }
                    self.expect(Token::RParen, "`)`")?;
                    if args.len() != arity {
                        return Err(ExprError {
                            message: format!(
                                "function `{name}` takes {arity} argument(s), got {}",
                                args.len()
                            ),
                            column: a + 1,
                        });
                    }
                    Ok(Node::Call(func, args))
                } else {
                    match name {
                        "pi" => Ok(Node::Const(std::f64::consts::PI)),
                        "e" => Ok(Node::Const(std::f64::consts::E)),
                        _ => {
                            let idx = self.vars.get(name).ok_or_else(|| ExprError {
                                message: format!("unknown variable `{name}`"),
                                column: a + 1,
                            })?;
                            Ok(Node::Var(*idx))
                        }
                    }
                }
            }
            other => Err(ExprError {
                message: match other {
                    Some(_) => "unexpected token".into(),
                    None => "unexpected end of expression".into(),
                },
                column: self
                    .tokens
                    .get(self.cursor.saturating_sub(1))
                    .map(|(_, at)| at + 1)
                    .unwrap_or(self.src.len().max(1)),
            }),
        }
    }
}

/// Parse an expression against a variable layout (`name -> slot`).
pub fn compile(src: &str, vars: &HashMap<String, usize>) -> Result<CompiledExpr, ExprError> {
    let tokens = Lexer::run(src)?;
    if tokens.is_empty() {
        return Err(ExprError {
            message: "empty expression".into(),
            column: 1,
        });
    }
    let mut parser = Parser {
        src,
        tokens,
        cursor: 0,
        vars,
    };
    let root = parser.parse_expr()?;
    if parser.cursor != parser.tokens.len() {
        return Err(parser.error_at("trailing input after expression", src.len()));
    }
    let n_vars = vars.values().max().map(|m| m + 1).unwrap_or(0);
    Ok(CompiledExpr {
        root,
        n_vars,
        source: src.to_string(),
    })
}

/// Standard layout `q1..qk` (and `v1..vk` when `with_velocities`).
pub fn phase_variables(k: usize, with_velocities: bool) -> HashMap<String, usize> {
    let mut map = HashMap::new();
    for i in 0..k {
        map.insert(format!("q{}", i + 1), i);
    }
    if with_velocities {
        for i in 0..k {
            map.insert(format!("v{}", i + 1), k + i);
        }
    }
    map
}

/// Layout `r1..rn`, `phi11..phinn` for affine potentials.
pub fn affine_variables(n: usize) -> HashMap<String, usize> {
    let mut map = HashMap::new();
    for i in 0..n {
        map.insert(format!("r{}", i + 1), i);
    }
    for i in 0..n {
        for j in 0..n {
            map.insert(format!("phi{}{}", i + 1, j + 1), n + i * n + j);
        }
    }
    map
}
