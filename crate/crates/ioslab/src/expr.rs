//! Scalar arithmetic expressions over named variables.
//!
//! Expressions are what configuration files are written in: vector fields,
//! output maps, Lyapunov candidates, and comparison functions are all small
//! closed-form formulas such as `-(2*x2+u)/(1+x1^2)`. The module parses ASCII
//! text into an immutable tree, evaluates it with IEEE doubles (reporting
//! division by zero, `ln` of a non-positive number, and similar problems as
//! domain errors carrying the offending source span), and produces symbolic
//! derivatives for the smooth primitives.
//!
//! Grammar (standard precedence, `^` right-associative and binding tighter
//! than unary minus):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?
//! atom   := number | variable | func '(' expr ')' | '(' expr ')'
//! func   := neg | abs | exp | ln | sqrt | sin | cos
//! ```
//!
//! `abs` is evaluable but deliberately not symbolically differentiable;
//! callers that need gradients of formulas containing `abs` route through a
//! finite-difference path instead.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Byte range of a node in the original source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    fn join(self, other: Span) -> Span {
        Span {
            start: self.start.min(other.start),
            end: self.end.max(other.end),
        }
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Abs,
    Exp,
    Ln,
    Sqrt,
    Sin,
    Cos,
}

impl UnaryOp {
    fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "-",
            UnaryOp::Abs => "abs",
            UnaryOp::Exp => "exp",
            UnaryOp::Ln => "ln",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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

/// Errors produced while parsing, evaluating, or differentiating expressions.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum ExprError {
    #[error("syntax error at offset {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("undeclared variable `{name}` at offset {pos}")]
    UndeclaredVariable { name: String, pos: usize },
    #[error("domain error at {span}: {msg}")]
    Domain { span: Span, msg: String },
    #[error("`abs` at {span} has no symbolic derivative; use the finite-difference path")]
    NonDifferentiable { span: Span },
    #[error("no value bound for variable `{name}`")]
    MissingBinding { name: String },
    #[error("expected {expected} variable values, got {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("unknown variable `{name}`")]
    UnknownVariable { name: String },
}

#[derive(Debug, Clone)]
enum NodeKind {
    Const(f64),
    Var(usize),
    Unary(UnaryOp, Box<Node>),
    Binary(BinaryOp, Box<Node>, Box<Node>),
}

#[derive(Debug, Clone)]
struct Node {
    kind: NodeKind,
    span: Span,
}

/// Flattened postfix form of a tree, evaluated with an explicit stack.
/// Rebuilt whenever a tree is constructed; evaluation is the hot path
/// (grid sweeps and ODE right-hand sides), tree walks are not.
#[derive(Debug, Clone)]
struct Program {
    code: Vec<Instr>,
    max_stack: usize,
}

#[derive(Debug, Clone, Copy)]
enum Instr {
    Const(f64),
    Load(usize),
    Un(UnaryOp, Span),
    Bin(BinaryOp, Span),
}

/// An immutable parsed expression over a fixed list of variables.
///
/// Values are safe to share across threads; evaluation has no interior state.
#[derive(Debug, Clone)]
pub struct Expr {
    root: Node,
    vars: Arc<[String]>,
    program: Program,
    printed: String,
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        self.printed == other.printed && self.vars == other.vars
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.printed)
    }
}

impl serde::Serialize for Expr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.printed)
    }
}

impl Expr {
    /// Parses `text` over the declared variable list.
    ///
    /// Any identifier that is not a function name must appear in `variables`;
    /// otherwise the parse fails with the undeclared name and its position.
    pub fn parse<S: AsRef<str>>(text: &str, variables: &[S]) -> Result<Expr, ExprError> {
        let vars: Arc<[String]> = variables
            .iter()
            .map(|s| s.as_ref().to_string())
            .collect::<Vec<_>>()
            .into();
        if text.trim().is_empty() {
            return Err(ExprError::Syntax {
                pos: 0,
                msg: "empty expression".into(),
            });
        }
        let tokens = tokenize(text)?;
        let mut parser = Parser {
            tokens: &tokens,
            pos: 0,
            vars: &vars,
        };
        let root = parser.parse_expr()?;
        match parser.peek() {
            Some(tok) => Err(ExprError::Syntax {
                pos: tok.pos,
                msg: format!("unexpected `{}`", tok.text),
            }),
            None => Ok(Expr::from_node(root, vars)),
        }
    }

    /// Builds the constant expression `c` (no variables).
    pub fn constant(c: f64) -> Expr {
        Expr::from_node(
            Node {
                kind: NodeKind::Const(c),
                span: Span { start: 0, end: 0 },
            },
            Vec::<String>::new().into(),
        )
    }

    fn from_node(root: Node, vars: Arc<[String]>) -> Expr {
        let program = compile(&root);
        let printed = print_node(&root, &vars);
        Expr {
            root,
            vars,
            program,
            printed,
        }
    }

    /// The declared variable list, in evaluation order.
    pub fn variables(&self) -> &[String] {
        &self.vars
    }

    /// Evaluates with variable values given in declaration order.
    pub fn eval(&self, values: &[f64]) -> Result<f64, ExprError> {
        if values.len() != self.vars.len() {
            return Err(ExprError::ArityMismatch {
                expected: self.vars.len(),
                got: values.len(),
            });
        }
        let mut stack = [0.0f64; 16];
        if self.program.max_stack <= 16 {
            self.eval_on(values, &mut stack[..])
        } else {
            let mut stack = vec![0.0; self.program.max_stack];
            self.eval_on(values, &mut stack[..])
        }
    }

    fn eval_on(&self, values: &[f64], stack: &mut [f64]) -> Result<f64, ExprError> {
        let mut top = 0usize;
        for instr in &self.program.code {
            match *instr {
                Instr::Const(c) => {
                    stack[top] = c;
                    top += 1;
                }
                Instr::Load(i) => {
                    stack[top] = values[i];
                    top += 1;
                }
                Instr::Un(op, span) => {
                    let a = stack[top - 1];
                    stack[top - 1] = apply_unary(op, a, span)?;
                }
                Instr::Bin(op, span) => {
                    let b = stack[top - 1];
                    let a = stack[top - 2];
                    top -= 1;
                    stack[top - 1] = apply_binary(op, a, b, span)?;
                }
            }
        }
        let out = stack[0];
        if out.is_finite() {
            Ok(out)
        } else {
            Err(ExprError::Domain {
                span: self.root.span,
                msg: format!("non-finite result {out}"),
            })
        }
    }

    /// Evaluates with a name-to-value environment. All declared variables
    /// must be bound.
    pub fn eval_env(&self, env: &HashMap<String, f64>) -> Result<f64, ExprError> {
        let mut values = Vec::with_capacity(self.vars.len());
        for name in self.vars.iter() {
            match env.get(name) {
                Some(v) => values.push(*v),
                None => {
                    return Err(ExprError::MissingBinding { name: name.clone() });
                }
            }
        }
        self.eval(&values)
    }

    /// Symbolic partial derivative with respect to `var`.
    ///
    /// Fails on `abs` (nonsmooth); every other primitive has an exact rule.
    pub fn differentiate(&self, var: &str) -> Result<Expr, ExprError> {
        let index = self
            .vars
            .iter()
            .position(|v| v == var)
            .ok_or_else(|| ExprError::UnknownVariable { name: var.into() })?;
        let d = derive(&self.root, index)?;
        Ok(Expr::from_node(d, self.vars.clone()))
    }

    /// Derivatives with respect to every declared variable, in order.
    pub fn gradient(&self) -> Result<Vec<Expr>, ExprError> {
        let names: Vec<String> = self.vars.to_vec();
        names.iter().map(|n| self.differentiate(n)).collect()
    }

    /// Canonical printed form; `parse(print(e))` evaluates identically and
    /// printing is a fixpoint.
    pub fn print(&self) -> &str {
        &self.printed
    }

    /// True if the expression contains an `abs` node (no symbolic gradient).
    pub fn contains_abs(&self) -> bool {
        fn walk(n: &Node) -> bool {
            match &n.kind {
                NodeKind::Const(_) | NodeKind::Var(_) => false,
                NodeKind::Unary(op, a) => *op == UnaryOp::Abs || walk(a),
                NodeKind::Binary(_, a, b) => walk(a) || walk(b),
            }
        }
        walk(&self.root)
    }
}

fn apply_unary(op: UnaryOp, a: f64, span: Span) -> Result<f64, ExprError> {
    let v = match op {
        UnaryOp::Neg => -a,
        UnaryOp::Abs => a.abs(),
        UnaryOp::Exp => a.exp(),
        UnaryOp::Ln => {
            if a <= 0.0 {
                return Err(ExprError::Domain {
                    span,
                    msg: format!("ln of non-positive value {a}"),
                });
            }
            a.ln()
        }
        UnaryOp::Sqrt => {
            if a < 0.0 {
                return Err(ExprError::Domain {
                    span,
                    msg: format!("sqrt of negative value {a}"),
                });
            }
            a.sqrt()
        }
        UnaryOp::Sin => a.sin(),
        UnaryOp::Cos => a.cos(),
    };
    Ok(v)
}

fn apply_binary(op: BinaryOp, a: f64, b: f64, span: Span) -> Result<f64, ExprError> {
    let v = match op {
        BinaryOp::Add => a + b,
        BinaryOp::Sub => a - b,
        BinaryOp::Mul => a * b,
        BinaryOp::Div => {
            if b == 0.0 {
                return Err(ExprError::Domain {
                    span,
                    msg: "division by zero".into(),
                });
            }
            a / b
        }
        BinaryOp::Pow => {
            let b_integral = b.fract() == 0.0 && b.abs() < 9.0e15;
            if a < 0.0 && !b_integral {
                return Err(ExprError::Domain {
                    span,
                    msg: format!("negative base {a} with non-integer exponent {b}"),
                });
            }
            if a == 0.0 && b < 0.0 {
                return Err(ExprError::Domain {
                    span,
                    msg: format!("zero base with negative exponent {b}"),
                });
            }
            a.powf(b)
        }
    };
    Ok(v)
}

fn compile(root: &Node) -> Program {
    fn emit(n: &Node, code: &mut Vec<Instr>, depth: usize, max: &mut usize) {
        match &n.kind {
            NodeKind::Const(c) => {
                code.push(Instr::Const(*c));
                *max = (*max).max(depth + 1);
            }
            NodeKind::Var(i) => {
                code.push(Instr::Load(*i));
                *max = (*max).max(depth + 1);
            }
            NodeKind::Unary(op, a) => {
                emit(a, code, depth, max);
                code.push(Instr::Un(*op, n.span));
            }
            NodeKind::Binary(op, a, b) => {
                emit(a, code, depth, max);
                emit(b, code, depth + 1, max);
                code.push(Instr::Bin(*op, n.span));
            }
        }
    }
    let mut code = Vec::new();
    let mut max = 0;
    emit(root, &mut code, 0, &mut max);
    Program {
        code,
        max_stack: max,
    }
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Token {
    text: String,
    pos: usize,
    kind: TokenKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum TokenKind {
    Number(f64),
    Ident,
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

fn tokenize(text: &str) -> Result<Vec<Token>, ExprError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0usize;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let kind = match c {
            '+' => Some(TokenKind::Plus),
            '-' => Some(TokenKind::Minus),
            '*' => Some(TokenKind::Star),
            '/' => Some(TokenKind::Slash),
            '^' => Some(TokenKind::Caret),
            '(' => Some(TokenKind::LParen),
            ')' => Some(TokenKind::RParen),
            _ => None,
        };
        if let Some(kind) = kind {
            out.push(Token {
                text: c.to_string(),
                pos: start,
                kind,
            });
            i += 1;
            continue;
        }
        if c.is_ascii_digit() || c == '.' {
            let mut j = i;
            while j < bytes.len() && (bytes[j].is_ascii_digit() || bytes[j] == b'.') {
                j += 1;
            }
            // exponent part: e or E, optional sign, digits
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
            let lit = &text[i..j];
            let value: f64 = lit.parse().map_err(|_| ExprError::Syntax {
                pos: start,
                msg: format!("malformed number `{lit}`"),
            })?;
            out.push(Token {
                text: lit.to_string(),
                pos: start,
                kind: TokenKind::Number(value),
            });
            i = j;
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let mut j = i;
            while j < bytes.len()
                && ((bytes[j] as char).is_ascii_alphanumeric() || bytes[j] == b'_')
            {
                j += 1;
            }
            out.push(Token {
                text: text[i..j].to_string(),
                pos: start,
                kind: TokenKind::Ident,
            });
            i = j;
            continue;
        }
        return Err(ExprError::Syntax {
            pos: start,
            msg: format!("unexpected character `{c}`"),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
    vars: &'a [String],
}

const FUNCTIONS: [(&str, UnaryOp); 6] = [
    ("abs", UnaryOp::Abs),
    ("exp", UnaryOp::Exp),
    ("ln", UnaryOp::Ln),
    ("sqrt", UnaryOp::Sqrt),
    ("sin", UnaryOp::Sin),
    ("cos", UnaryOp::Cos),
];

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&'a Token> {
        self.tokens.get(self.pos)
    }

    fn bump(&mut self) -> Option<&'a Token> {
        let t = self.tokens.get(self.pos);
        self.pos += 1;
        t
    }

    fn end_pos(&self) -> usize {
        self.tokens
            .last()
            .map(|t| t.pos + t.text.len())
            .unwrap_or(0)
    }

    fn parse_expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.parse_term()?;
        while let Some(tok) = self.peek() {
            let op = match tok.kind {
                TokenKind::Plus => BinaryOp::Add,
                TokenKind::Minus => BinaryOp::Sub,
                _ => break,
            };
            self.bump();
            let rhs = self.parse_term()?;
            let span = lhs.span.join(rhs.span);
            lhs = Node {
                kind: NodeKind::Binary(op, Box::new(lhs), Box::new(rhs)),
                span,
            };
        }
        Ok(lhs)
    }

    fn parse_term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.parse_unary()?;
        while let Some(tok) = self.peek() {
            let op = match tok.kind {
                TokenKind::Star => BinaryOp::Mul,
                TokenKind::Slash => BinaryOp::Div,
                _ => break,
            };
            self.bump();
            let rhs = self.parse_unary()?;
            let span = lhs.span.join(rhs.span);
            lhs = Node {
                kind: NodeKind::Binary(op, Box::new(lhs), Box::new(rhs)),
                span,
            };
        }
        Ok(lhs)
    }

    fn parse_unary(&mut self) -> Result<Node, ExprError> {
        if let Some(tok) = self.peek() {
            if tok.kind == TokenKind::Minus {
                let start = tok.pos;
                self.bump();
                let inner = self.parse_unary()?;
                let span = Span {
                    start,
                    end: inner.span.end,
                };
                return Ok(Node {
                    kind: NodeKind::Unary(UnaryOp::Neg, Box::new(inner)),
                    span,
                });
            }
        }
        self.parse_power()
    }

    fn parse_power(&mut self) -> Result<Node, ExprError> {
        let base = self.parse_atom()?;
        if let Some(tok) = self.peek() {
            if tok.kind == TokenKind::Caret {
                self.bump();
                // right-associative, exponent may carry a sign
                let exponent = self.parse_unary()?;
                let span = base.span.join(exponent.span);
                return Ok(Node {
                    kind: NodeKind::Binary(BinaryOp::Pow, Box::new(base), Box::new(exponent)),
                    span,
                });
            }
        }
        Ok(base)
    }

    fn parse_atom(&mut self) -> Result<Node, ExprError> {
        let tok = match self.bump() {
            Some(t) => t,
            None => {
                return Err(ExprError::Syntax {
                    pos: self.end_pos(),
                    msg: "unexpected end of input".into(),
                });
            }
        };
        match tok.kind {
            TokenKind::Number(v) => Ok(Node {
                kind: NodeKind::Const(v),
                span: Span {
                    start: tok.pos,
                    end: tok.pos + tok.text.len(),
                },
            }),
            TokenKind::LParen => {
                let inner = self.parse_expr()?;
                self.expect_rparen()?;
                Ok(inner)
            }
            TokenKind::Ident => {
                let name = tok.text.as_str();
                if let Some((_, op)) = FUNCTIONS.iter().find(|(f, _)| *f == name) {
                    let lp = self.bump();
                    match lp {
                        Some(t) if t.kind == TokenKind::LParen => {}
                        _ => {
                            return Err(ExprError::Syntax {
                                pos: tok.pos + tok.text.len(),
                                msg: format!("expected `(` after `{name}`"),
                            });
                        }
                    }
                    let arg = self.parse_expr()?;
                    let close = self.expect_rparen()?;
                    Ok(Node {
                        kind: NodeKind::Unary(*op, Box::new(arg)),
                        span: Span {
                            start: tok.pos,
                            end: close,
                        },
                    })
                } else if let Some(idx) = self.vars.iter().position(|v| v == name) {
                    Ok(Node {
                        kind: NodeKind::Var(idx),
                        span: Span {
                            start: tok.pos,
                            end: tok.pos + tok.text.len(),
                        },
                    })
                } else {
                    Err(ExprError::UndeclaredVariable {
                        name: name.to_string(),
                        pos: tok.pos,
                    })
                }
            }
            _ => Err(ExprError::Syntax {
                pos: tok.pos,
                msg: format!("unexpected `{}`", tok.text),
            }),
        }
    }

    fn expect_rparen(&mut self) -> Result<usize, ExprError> {
        match self.bump() {
            Some(t) if t.kind == TokenKind::RParen => Ok(t.pos + 1),
            Some(t) => Err(ExprError::Syntax {
                pos: t.pos,
                msg: format!("expected `)`, found `{}`", t.text),
            }),
            None => Err(ExprError::Syntax {
                pos: self.end_pos(),
                msg: "expected `)`, found end of input".into(),
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// Symbolic differentiation
// ---------------------------------------------------------------------------

fn constant(c: f64, span: Span) -> Node {
    Node {
        kind: NodeKind::Const(c),
        span,
    }
}

fn as_const(n: &Node) -> Option<f64> {
    match n.kind {
        NodeKind::Const(c) => Some(c),
        _ => None,
    }
}

fn neg(a: Node) -> Node {
    let span = a.span;
    match a.kind {
        NodeKind::Const(c) => constant(-c, span),
        NodeKind::Unary(UnaryOp::Neg, inner) => *inner,
        _ => Node {
            kind: NodeKind::Unary(UnaryOp::Neg, Box::new(a)),
            span,
        },
    }
}

fn add(a: Node, b: Node) -> Node {
    let span = a.span.join(b.span);
    match (as_const(&a), as_const(&b)) {
        (Some(x), Some(y)) if (x + y).is_finite() => return constant(x + y, span),
        (Some(0.0), _) => return b,
        (_, Some(0.0)) => return a,
        _ => {}
    }
    Node {
        kind: NodeKind::Binary(BinaryOp::Add, Box::new(a), Box::new(b)),
        span,
    }
}

fn sub(a: Node, b: Node) -> Node {
    let span = a.span.join(b.span);
    match (as_const(&a), as_const(&b)) {
        (Some(x), Some(y)) if (x - y).is_finite() => return constant(x - y, span),
        (_, Some(0.0)) => return a,
        (Some(0.0), _) => return neg(b),
        _ => {}
    }
    Node {
        kind: NodeKind::Binary(BinaryOp::Sub, Box::new(a), Box::new(b)),
        span,
    }
}

fn mul(a: Node, b: Node) -> Node {
    let span = a.span.join(b.span);
    match (as_const(&a), as_const(&b)) {
        (Some(x), Some(y)) if (x * y).is_finite() => return constant(x * y, span),
        (Some(0.0), _) | (_, Some(0.0)) => return constant(0.0, span),
        (Some(1.0), _) => return b,
        (_, Some(1.0)) => return a,
        _ => {}
    }
    Node {
        kind: NodeKind::Binary(BinaryOp::Mul, Box::new(a), Box::new(b)),
        span,
    }
}

fn div(a: Node, b: Node) -> Node {
    let span = a.span.join(b.span);
    if let (Some(x), Some(y)) = (as_const(&a), as_const(&b)) {
        if y != 0.0 && (x / y).is_finite() {
            return constant(x / y, span);
        }
    }
    if as_const(&a) == Some(0.0) {
        return constant(0.0, span);
    }
    if as_const(&b) == Some(1.0) {
        return a;
    }
    Node {
        kind: NodeKind::Binary(BinaryOp::Div, Box::new(a), Box::new(b)),
        span,
    }
}

fn pow(a: Node, b: Node) -> Node {
    let span = a.span.join(b.span);
    if as_const(&b) == Some(1.0) {
        return a;
    }
    if as_const(&b) == Some(0.0) {
        return constant(1.0, span);
    }
    Node {
        kind: NodeKind::Binary(BinaryOp::Pow, Box::new(a), Box::new(b)),
        span,
    }
}

fn unary(op: UnaryOp, a: Node) -> Node {
    let span = a.span;
    Node {
        kind: NodeKind::Unary(op, Box::new(a)),
        span,
    }
}

fn derive(n: &Node, var: usize) -> Result<Node, ExprError> {
    let span = n.span;
    let d = match &n.kind {
        NodeKind::Const(_) => constant(0.0, span),
        NodeKind::Var(i) => constant(if *i == var { 1.0 } else { 0.0 }, span),
        NodeKind::Unary(op, a) => {
            let da = derive(a, var)?;
            match op {
                UnaryOp::Neg => neg(da),
                UnaryOp::Abs => {
                    return Err(ExprError::NonDifferentiable { span });
                }
                UnaryOp::Exp => mul(unary(UnaryOp::Exp, (**a).clone()), da),
                UnaryOp::Ln => div(da, (**a).clone()),
                UnaryOp::Sqrt => div(
                    da,
                    mul(constant(2.0, span), unary(UnaryOp::Sqrt, (**a).clone())),
                ),
                UnaryOp::Sin => mul(unary(UnaryOp::Cos, (**a).clone()), da),
                UnaryOp::Cos => neg(mul(unary(UnaryOp::Sin, (**a).clone()), da)),
            }
        }
        NodeKind::Binary(op, a, b) => {
            match op {
                BinaryOp::Add => add(derive(a, var)?, derive(b, var)?),
                BinaryOp::Sub => sub(derive(a, var)?, derive(b, var)?),
                BinaryOp::Mul => add(
                    mul(derive(a, var)?, (**b).clone()),
                    mul((**a).clone(), derive(b, var)?),
                ),
                BinaryOp::Div => {
                    // (a/b)' = (a'·b − a·b') / b²
                    let da = derive(a, var)?;
                    let db = derive(b, var)?;
                    div(
                        sub(mul(da, (**b).clone()), mul((**a).clone(), db)),
                        pow((**b).clone(), constant(2.0, span)),
                    )
                }
                BinaryOp::Pow => {
                    let da = derive(a, var)?;
                    if let Some(c) = as_const(b) {
                        // (a^c)' = c·a^(c−1)·a'
                        mul(
                            mul(constant(c, span), pow((**a).clone(), constant(c - 1.0, span))),
                            da,
                        )
                    } else {
                        // (a^b)' = a^b · (b'·ln a + b·a'/a)
                        let db = derive(b, var)?;
                        mul(
                            pow((**a).clone(), (**b).clone()),
                            add(
                                mul(db, unary(UnaryOp::Ln, (**a).clone())),
                                div(mul((**b).clone(), da), (**a).clone()),
                            ),
                        )
                    }
                }
            }
        }
    };
    Ok(d)
}

// ---------------------------------------------------------------------------
// Printing
// ---------------------------------------------------------------------------

const PREC_ADD: u8 = 1;
const PREC_MUL: u8 = 2;
const PREC_NEG: u8 = 3;
const PREC_POW: u8 = 4;
const PREC_ATOM: u8 = 5;

fn node_prec(n: &Node) -> u8 {
    match &n.kind {
        NodeKind::Const(c) if *c < 0.0 || (*c == 0.0 && c.is_sign_negative()) => PREC_NEG,
        NodeKind::Const(_) | NodeKind::Var(_) => PREC_ATOM,
        NodeKind::Unary(UnaryOp::Neg, _) => PREC_NEG,
        NodeKind::Unary(..) => PREC_ATOM,
        NodeKind::Binary(BinaryOp::Add | BinaryOp::Sub, ..) => PREC_ADD,
        NodeKind::Binary(BinaryOp::Mul | BinaryOp::Div, ..) => PREC_MUL,
        NodeKind::Binary(BinaryOp::Pow, ..) => PREC_POW,
    }
}

fn print_node(n: &Node, vars: &[String]) -> String {
    let mut out = String::new();
    emit_node(n, vars, &mut out);
    out
}

fn emit_child(child: &Node, vars: &[String], needs_parens: bool, out: &mut String) {
    if needs_parens {
        out.push('(');
        emit_node(child, vars, out);
        out.push(')');
    } else {
        emit_node(child, vars, out);
    }
}

fn emit_node(n: &Node, vars: &[String], out: &mut String) {
    match &n.kind {
        NodeKind::Const(c) => {
            out.push_str(&format!("{c}"));
        }
        NodeKind::Var(i) => out.push_str(&vars[*i]),
        NodeKind::Unary(UnaryOp::Neg, a) => {
            out.push('-');
            emit_child(a, vars, node_prec(a) < PREC_NEG, out);
        }
        NodeKind::Unary(op, a) => {
            out.push_str(op.name());
            out.push('(');
            emit_node(a, vars, out);
            out.push(')');
        }
        NodeKind::Binary(op, a, b) => {
            let prec = node_prec(n);
            match op {
                BinaryOp::Pow => {
                    // right-associative: parenthesize left at equal precedence
                    emit_child(a, vars, node_prec(a) <= prec, out);
                    out.push('^');
                    emit_child(b, vars, node_prec(b) < prec, out);
                }
                _ => {
                    emit_child(a, vars, node_prec(a) < prec, out);
                    out.push(op.symbol());
                    emit_child(b, vars, node_prec(b) <= prec, out);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars3() -> [&'static str; 3] {
        ["x1", "x2", "u"]
    }

    #[test]
    fn counterexample_rhs_evaluates() {
        let e = Expr::parse("-(2*x2+u)/(1+x1^2)", &vars3()).unwrap();
        let v = e.eval(&[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(v, -2.0);
        let v = e.eval(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(v, -1.5);
    }

    #[test]
    fn square_at_zero() {
        let e = Expr::parse("x2^2", &vars3()).unwrap();
        assert_eq!(e.eval(&[5.0, 0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn malformed_input_position() {
        let err = Expr::parse("2*+x", &["x"]).unwrap_err();
        match err {
            ExprError::Syntax { pos, .. } => assert_eq!(pos, 2),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn undeclared_variable_reported() {
        let err = Expr::parse("x+y", &["x"]).unwrap_err();
        match err {
            ExprError::UndeclaredVariable { name, pos } => {
                assert_eq!(name, "y");
                assert_eq!(pos, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn division_by_zero_is_domain_error() {
        let e = Expr::parse("1/x", &["x"]).unwrap();
        assert!(matches!(
            e.eval(&[0.0]).unwrap_err(),
            ExprError::Domain { .. }
        ));
    }

    #[test]
    fn ln_nonpositive_is_domain_error() {
        let e = Expr::parse("ln(x)", &["x"]).unwrap();
        assert!(matches!(e.eval(&[0.0]), Err(ExprError::Domain { .. })));
        assert!(matches!(e.eval(&[-1.0]), Err(ExprError::Domain { .. })));
        assert!((e.eval(&[1.0]).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn pow_domain_rules() {
        let e = Expr::parse("x^2.5", &["x"]).unwrap();
        assert!(matches!(e.eval(&[-1.0]), Err(ExprError::Domain { .. })));
        assert!(e.eval(&[0.0]).unwrap() == 0.0);
        let int_pow = Expr::parse("x^3", &["x"]).unwrap();
        assert_eq!(int_pow.eval(&[-2.0]).unwrap(), -8.0);
    }

    #[test]
    fn derivative_of_square() {
        let e = Expr::parse("x2^2", &vars3()).unwrap();
        let d = e.differentiate("x2").unwrap();
        assert!((d.eval(&[0.0, 3.0, 0.0]).unwrap() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn derivative_of_counterexample_rhs_wrt_x1() {
        // d/dx1 of −(2x2+u)/(1+x1²) = 2(2x2+u)x1/(1+x1²)²; at (1,1,0) this is 1.
        let e = Expr::parse("-(2*x2+u)/(1+x1^2)", &vars3()).unwrap();
        let d = e.differentiate("x1").unwrap();
        assert!((d.eval(&[1.0, 1.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn derivative_of_constant_is_zero() {
        let e = Expr::parse("3.5", &vars3()).unwrap();
        let d = e.differentiate("x1").unwrap();
        assert_eq!(d.eval(&[9.0, 9.0, 9.0]).unwrap(), 0.0);
    }

    #[test]
    fn abs_refuses_symbolic_derivative() {
        let e = Expr::parse("abs(x)", &["x"]).unwrap();
        assert!(matches!(
            e.differentiate("x"),
            Err(ExprError::NonDifferentiable { .. })
        ));
        assert_eq!(e.eval(&[-2.0]).unwrap(), 2.0);
    }

    #[test]
    fn print_parse_print_fixpoint() {
        let cases = [
            "-(2*x2+u)/(1+x1^2)",
            "x1^2+x2^2",
            "2^-3",
            "-x1^2",
            "(x1+x2)*u",
            "exp(-(x1*x1))",
            "x1-(x2-u)",
            "x1^(x2^2)",
            "(x1^x2)^2",
            "sqrt(abs(x2))*(1+x1^2)",
        ];
        for text in cases {
            let once = Expr::parse(text, &vars3()).unwrap();
            let printed = once.print().to_string();
            let twice = Expr::parse(&printed, &vars3()).unwrap();
            assert_eq!(printed, twice.print(), "not a fixpoint for `{text}`");
            // printed form evaluates identically
            let pt = [0.7, -1.3, 0.4];
            match (once.eval(&pt), twice.eval(&pt)) {
                (Ok(a), Ok(b)) => assert_eq!(a, b),
                (Err(_), Err(_)) => {}
                other => panic!("eval mismatch for `{text}`: {other:?}"),
            }
        }
    }

    #[test]
    fn eval_env_roundtrip() {
        let e = Expr::parse("x*y", &["x", "y"]).unwrap();
        let mut env = HashMap::new();
        env.insert("x".to_string(), 3.0);
        env.insert("y".to_string(), 4.0);
        assert_eq!(e.eval_env(&env).unwrap(), 12.0);
        env.remove("y");
        assert!(matches!(
            e.eval_env(&env),
            Err(ExprError::MissingBinding { .. })
        ));
    }
}
