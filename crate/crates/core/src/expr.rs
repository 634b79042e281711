//! Scalar expression language used by scenario files.
//!
//! Expressions are built from numeric literals, the variables `t`, `s` and
//! `x1..xn`, the binary operators `+ - * / ^`, unary minus, parentheses and
//! the functions `sin cos exp ln abs sqrt` (one argument) and `min max` (two
//! arguments). `^` binds tighter than `*` and `/`, which bind tighter than `+`
//! and `-`; `^` is right-associative and unary minus binds looser than `^`, so
//! `-x1^2` is `-(x1^2)`.
//!
//! Evaluation never yields a silent NaN: division by zero, `ln`/`sqrt` outside
//! their domain and any non-finite intermediate are reported as errors.

use std::fmt;

use crate::error::{Error, Position, Result};

/// Default step for central-difference gradients.
pub const DEFAULT_GRAD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    T,
    S,
    /// Zero-based state component (`x1` is `X(0)`).
    X(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Ln,
    Abs,
    Sqrt,
    Min,
    Max,
}

impl Func {
    fn lookup(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "ln" => Func::Ln,
            "abs" => Func::Abs,
            "sqrt" => Func::Sqrt,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Ln => "ln",
            Func::Abs => "abs",
            Func::Sqrt => "sqrt",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub enum NodeKind {
    Lit(f64),
    Var(Var),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

/// AST node annotated with the source position it was parsed from.
///
/// Equality is structural and ignores positions.
#[derive(Debug, Clone)]
pub struct Node {
    pub kind: NodeKind,
    pub pos: Position,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        match (&self.kind, &other.kind) {
            (NodeKind::Lit(a), NodeKind::Lit(b)) => a.to_bits() == b.to_bits(),
            (NodeKind::Var(a), NodeKind::Var(b)) => a == b,
            (NodeKind::Neg(a), NodeKind::Neg(b)) => a == b,
            (NodeKind::Bin(o1, l1, r1), NodeKind::Bin(o2, l2, r2)) => o1 == o2 && l1 == l2 && r1 == r2,
            (NodeKind::Call(f1, a1), NodeKind::Call(f2, a2)) => f1 == f2 && a1 == a2,
            _ => false,
        }
    }
}

impl Node {
    pub fn new(kind: NodeKind) -> Self {
        Node {
            kind,
            pos: Position { line: 1, column: 1 },
        }
    }

    fn visit_vars(&self, out: &mut impl FnMut(Var)) {
        match &self.kind {
            NodeKind::Lit(_) => {}
            NodeKind::Var(v) => out(*v),
            NodeKind::Neg(a) => a.visit_vars(out),
            NodeKind::Bin(_, l, r) => {
                l.visit_vars(out);
                r.visit_vars(out);
            }
            NodeKind::Call(_, args) => args.iter().for_each(|a| a.visit_vars(out)),
        }
    }

    fn eval(&self, ctx: &Ctx<'_>) -> Result<f64> {
        let v = match &self.kind {
            NodeKind::Lit(v) => *v,
            NodeKind::Var(Var::T) => ctx.t,
            NodeKind::Var(Var::S) => ctx.s.ok_or(Error::FastTimeOutsideJump)?,
            NodeKind::Var(Var::X(i)) => *ctx
                .x
                .get(*i)
                .ok_or_else(|| Error::invalid(format!("state has {} components, x{} requested", ctx.x.len(), i + 1)))?,
            NodeKind::Neg(a) => -a.eval(ctx)?,
            NodeKind::Bin(op, l, r) => {
                let a = l.eval(ctx)?;
                let b = r.eval(ctx)?;
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            return Err(Error::eval(format!("division by zero at {}", self.pos)));
                        }
                        a / b
                    }
                    BinOp::Pow => a.powf(b),
                }
            }
            NodeKind::Call(func, args) => {
                let a = args[0].eval(ctx)?;
                match func {
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Exp => a.exp(),
                    Func::Abs => a.abs(),
                    Func::Ln => {
                        if a <= 0.0 {
                            return Err(Error::eval(format!("ln of nonpositive value {a} at {}", self.pos)));
                        }
                        a.ln()
                    }
                    Func::Sqrt => {
                        if a < 0.0 {
                            return Err(Error::eval(format!("sqrt of negative value {a} at {}", self.pos)));
                        }
                        a.sqrt()
                    }
                    Func::Min => a.min(args[1].eval(ctx)?),
                    Func::Max => a.max(args[1].eval(ctx)?),
                }
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::eval(format!("non-finite result at {}", self.pos)))
        }
    }
}

struct Ctx<'a> {
    t: f64,
    x: &'a [f64],
    s: Option<f64>,
}

/// A parsed expression over `t`, `s` and `x1..xn`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    root: Node,
    n: usize,
}

impl Expr {
    pub fn parse(source: &str, n: usize) -> Result<Expr> {
        if source.trim().is_empty() {
            return Err(Error::Syntax {
                pos: Position { line: 1, column: 1 },
                message: "empty expression".into(),
            });
        }
        let tokens = lex(source)?;
        let mut p = Parser { tokens, idx: 0, n };
        let root = p.expr()?;
        if let Some(tok) = p.peek() {
            return Err(Error::Syntax {
                pos: tok.pos,
                message: format!("unexpected {}", tok.kind.describe()),
            });
        }
        Ok(Expr { root, n })
    }

    pub fn constant(value: f64) -> Expr {
        Expr {
            root: Node::new(NodeKind::Lit(value)),
            n: 0,
        }
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn dimension(&self) -> usize {
        self.n
    }

    pub fn uses_s(&self) -> bool {
        self.uses(|v| v == Var::S)
    }

    pub fn uses_t(&self) -> bool {
        self.uses(|v| v == Var::T)
    }

    pub fn uses_x(&self) -> bool {
        self.uses(|v| matches!(v, Var::X(_)))
    }

    fn uses(&self, pred: impl Fn(Var) -> bool) -> bool {
        let mut hit = false;
        self.root.visit_vars(&mut |v| hit |= pred(v));
        hit
    }

    /// Evaluates at `(t, x)` and, inside a jump, fast time `s`.
    pub fn eval(&self, t: f64, x: &[f64], s: Option<f64>) -> Result<f64> {
        self.root.eval(&Ctx { t, x, s })
    }

    /// Central-difference gradient with respect to `x`, `t` held fixed.
    pub fn grad(&self, t: f64, x: &[f64], h: f64) -> Result<Vec<f64>> {
        central_gradient(|p| self.eval(t, p, None), x, h)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.root)
    }
}

/// Canonical form: every operator application is parenthesized, literals use
/// the shortest round-trip representation.
impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            NodeKind::Lit(v) => write!(f, "{v:?}"),
            NodeKind::Var(Var::T) => write!(f, "t"),
            NodeKind::Var(Var::S) => write!(f, "s"),
            NodeKind::Var(Var::X(i)) => write!(f, "x{}", i + 1),
            NodeKind::Neg(a) => write!(f, "(-{a})"),
            NodeKind::Bin(op, l, r) => write!(f, "({l} {} {r})", op.symbol()),
            NodeKind::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

/// Central differences of a scalar function, one probe pair per component.
pub fn central_gradient(mut fun: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = fun(&probe).map_err(|e| probe_error(e, &probe))?;
        probe[i] = x[i] - h;
        let minus = fun(&probe).map_err(|e| probe_error(e, &probe))?;
        probe[i] = x[i];
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

fn probe_error(e: Error, probe: &[f64]) -> Error {
    Error::eval(format!("{e} (gradient probe at {probe:?})"))
}

#[derive(Debug, Clone, PartialEq)]
enum TokKind {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
}

impl TokKind {
    fn describe(&self) -> String {
        match self {
            TokKind::Num(v) => format!("number {v}"),
            TokKind::Ident(s) => format!("identifier `{s}`"),
            TokKind::Op(c) => format!("operator `{c}`"),
            TokKind::LParen => "`(`".into(),
            TokKind::RParen => "`)`".into(),
            TokKind::Comma => "`,`".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokKind,
    pos: Position,
}

fn lex(src: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = src.chars().collect();
    let mut tokens = Vec::new();
    let (mut line, mut col) = (1usize, 1usize);
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let pos = Position { line, column: col };
        if c == '\n' {
            line += 1;
            col = 1;
            i += 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        let start = i;
        let kind = if c.is_ascii_digit() || c == '.' {
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v: f64 = text.parse().map_err(|_| Error::Syntax {
                pos,
                message: format!("malformed number `{text}`"),
            })?;
            TokKind::Num(v)
        } else if c.is_ascii_alphabetic() || c == '_' {
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            TokKind::Ident(chars[start..i].iter().collect())
        } else {
            i += 1;
            match c {
                '+' | '-' | '*' | '/' | '^' => TokKind::Op(c),
                '(' => TokKind::LParen,
                ')' => TokKind::RParen,
                ',' => TokKind::Comma,
                _ => {
                    return Err(Error::Syntax {
                        pos,
                        message: format!("unexpected character `{c}`"),
                    })
                }
            }
        };
        col += i - start;
        tokens.push(Token { kind, pos });
    }
    Ok(tokens)
}

struct Parser {
    tokens: Vec<Token>,
    idx: usize,
    n: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.idx)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.idx).cloned();
        self.idx += 1;
        t
    }

    fn end_pos(&self) -> Position {
        self.tokens
            .last()
            .map(|t| Position {
                line: t.pos.line,
                column: t.pos.column + 1,
            })
            .unwrap_or(Position { line: 1, column: 1 })
    }

    fn eat_op(&mut self, ops: &[char]) -> Option<(char, Position)> {
        match self.peek() {
            Some(Token {
                kind: TokKind::Op(c),
                pos,
            }) if ops.contains(c) => {
                let out = (*c, *pos);
                self.idx += 1;
                Some(out)
            }
            _ => None,
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        while let Some((c, pos)) = self.eat_op(&['+', '-']) {
            let rhs = self.term()?;
            let op = if c == '+' { BinOp::Add } else { BinOp::Sub };
            lhs = Node {
                kind: NodeKind::Bin(op, Box::new(lhs), Box::new(rhs)),
                pos,
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        while let Some((c, pos)) = self.eat_op(&['*', '/']) {
            let rhs = self.unary()?;
            let op = if c == '*' { BinOp::Mul } else { BinOp::Div };
            lhs = Node {
                kind: NodeKind::Bin(op, Box::new(lhs), Box::new(rhs)),
                pos,
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node> {
        if let Some((c, pos)) = self.eat_op(&['-', '+']) {
            let inner = self.unary()?;
            return Ok(if c == '-' {
                Node {
                    kind: NodeKind::Neg(Box::new(inner)),
                    pos,
                }
            } else {
                inner
            });
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.primary()?;
        if let Some((_, pos)) = self.eat_op(&['^']) {
            let exp = self.unary()?;
            return Ok(Node {
                kind: NodeKind::Bin(BinOp::Pow, Box::new(base), Box::new(exp)),
                pos,
            });
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Node> {
        let end = self.end_pos();
        let tok = self.next().ok_or(Error::Syntax {
            pos: end,
            message: "unexpected end of expression".into(),
        })?;
        let pos = tok.pos;
        match tok.kind {
            TokKind::Num(v) => Ok(Node {
                kind: NodeKind::Lit(v),
                pos,
            }),
            TokKind::LParen => {
                let inner = self.expr()?;
                self.expect_rparen()?;
                Ok(inner)
            }
            TokKind::Ident(name) => {
                if matches!(self.peek().map(|t| &t.kind), Some(TokKind::LParen)) {
                    self.idx += 1;
                    let func = Func::lookup(&name).ok_or_else(|| Error::Syntax {
                        pos,
                        message: format!("unknown function `{name}`"),
                    })?;
                    let mut args = Vec::new();
                    if !matches!(self.peek().map(|t| &t.kind), Some(TokKind::RParen)) {
                        loop {
                            args.push(self.expr()?);
                            if matches!(self.peek().map(|t| &t.kind), Some(TokKind::Comma)) {
                                self.idx += 1;
                            } else {
                                break;
                            }
                        }
                    }
                    self.expect_rparen()?;
                    if args.len() != func.arity() {
                        return Err(Error::Arity {
                            name,
                            pos,
                            expected: func.arity(),
                            got: args.len(),
                        });
                    }
                    return Ok(Node {
                        kind: NodeKind::Call(func, args),
                        pos,
                    });
                }
                let var = self.variable(&name, pos)?;
                Ok(Node {
                    kind: NodeKind::Var(var),
                    pos,
                })
            }
            other => Err(Error::Syntax {
                pos,
                message: format!("unexpected {}", other.describe()),
            }),
        }
    }

    fn variable(&self, name: &str, pos: Position) -> Result<Var> {
        match name {
            "t" => return Ok(Var::T),
            "s" => return Ok(Var::S),
            _ => {}
        }
        let unbound = || Error::UnboundVariable {
            name: name.to_string(),
            pos,
            n: self.n,
        };
        let idx: usize = name
            .strip_prefix('x')
            .filter(|d| !d.is_empty() && d.chars().all(|c| c.is_ascii_digit()))
            .and_then(|d| d.parse().ok())
            .ok_or_else(unbound)?;
        if idx == 0 || idx > self.n {
            return Err(unbound());
        }
        Ok(Var::X(idx - 1))
    }

    fn expect_rparen(&mut self) -> Result<()> {
        let end = self.end_pos();
        match self.next() {
            Some(Token {
                kind: TokKind::RParen, ..
            }) => Ok(()),
            Some(tok) => Err(Error::Syntax {
                pos: tok.pos,
                message: format!("expected `)`, found {}", tok.kind.describe()),
            }),
            None => Err(Error::Syntax {
                pos: end,
                message: "expected `)`".into(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lit(v: f64) -> Node {
        Node::new(NodeKind::Lit(v))
    }

    fn x(i: usize) -> Node {
        Node::new(NodeKind::Var(Var::X(i)))
    }

    #[test]
    fn parses_subtraction() {
        let e = Expr::parse("x1 - 1", 1).unwrap();
        let want = Node::new(NodeKind::Bin(BinOp::Sub, Box::new(x(0)), Box::new(lit(1.0))));
        assert_eq!(e.root(), &want);
    }

    #[test]
    fn parses_viability_gain() {
        let e = Expr::parse("0.5 - x1", 1).unwrap();
        assert_eq!(e.eval(0.0, &[0.0], None).unwrap(), 0.5);
        assert_eq!(e.eval(0.0, &[1.0], None).unwrap(), -0.5);
    }

    #[test]
    fn out_of_range_state_is_unbound() {
        let err = Expr::parse("x3 + 1", 2).unwrap_err();
        assert!(
            matches!(err, Error::UnboundVariable { ref name, n: 2, .. } if name == "x3"),
            "{err}"
        );
        assert!(matches!(Expr::parse("x0", 2), Err(Error::UnboundVariable { .. })));
        assert!(matches!(Expr::parse("y", 2), Err(Error::UnboundVariable { .. })));
    }

    #[test]
    fn precedence_and_associativity() {
        let e = Expr::parse("2^3^2", 0).unwrap();
        assert_eq!(e.eval(0.0, &[], None).unwrap(), 512.0);
        let e = Expr::parse("-x1^2", 1).unwrap();
        assert_eq!(e.eval(0.0, &[3.0], None).unwrap(), -9.0);
        let e = Expr::parse("1 + 2 * 3 - 4 / 2", 0).unwrap();
        assert_eq!(e.eval(0.0, &[], None).unwrap(), 5.0);
        let e = Expr::parse("2^-1", 0).unwrap();
        assert_eq!(e.eval(0.0, &[], None).unwrap(), 0.5);
        let e = Expr::parse("10 - 4 - 3", 0).unwrap();
        assert_eq!(e.eval(0.0, &[], None).unwrap(), 3.0);
    }

    #[test]
    fn evaluates_examples() {
        let e = Expr::parse("x1 - 1", 1).unwrap();
        assert_eq!(e.eval(0.0, &[3.0], None).unwrap(), 2.0);
        let e = Expr::parse("exp(t)", 0).unwrap();
        assert!((e.eval(1.0, &[], None).unwrap() - std::f64::consts::E).abs() < 1e-15);
        let e = Expr::parse("max(x1, 2) + min(1, sqrt(4))", 1).unwrap();
        assert_eq!(e.eval(0.0, &[5.0], None).unwrap(), 6.0);
    }

    #[test]
    fn domain_errors_are_reported() {
        let e = Expr::parse("1/x1", 1).unwrap();
        let err = e.eval(0.0, &[0.0], None).unwrap_err();
        assert!(err.to_string().contains("division by zero"), "{err}");
        assert!(Expr::parse("ln(x1)", 1).unwrap().eval(0.0, &[0.0], None).is_err());
        assert!(Expr::parse("sqrt(x1)", 1).unwrap().eval(0.0, &[-1.0], None).is_err());
        assert!(Expr::parse("(-1)^0.5", 0).unwrap().eval(0.0, &[], None).is_err());
        assert!(Expr::parse("exp(1000)", 0).unwrap().eval(0.0, &[], None).is_err());
    }

    #[test]
    fn fast_time_requires_jump_context() {
        let e = Expr::parse("x1 * (1 + s)", 1).unwrap();
        assert!(e.uses_s());
        assert_eq!(e.eval(0.0, &[2.0], None), Err(Error::FastTimeOutsideJump));
        assert_eq!(e.eval(0.0, &[2.0], Some(0.5)).unwrap(), 3.0);
    }

    #[test]
    fn syntax_errors_carry_position() {
        match Expr::parse("x1 +\n  * 2", 1) {
            Err(Error::Syntax { pos, .. }) => assert_eq!(pos, Position { line: 2, column: 3 }),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(Expr::parse("(x1", 1), Err(Error::Syntax { .. })));
        assert!(matches!(Expr::parse("", 1), Err(Error::Syntax { .. })));
        assert!(matches!(Expr::parse("foo(1)", 1), Err(Error::Syntax { .. })));
        assert!(matches!(Expr::parse("x1 $ 2", 1), Err(Error::Syntax { .. })));
    }

    #[test]
    fn arity_is_checked() {
        let err = Expr::parse("sin(1, 2)", 0).unwrap_err();
        assert!(matches!(
            err,
            Error::Arity {
                expected: 1,
                got: 2,
                ..
            }
        ));
        assert!(matches!(
            Expr::parse("max(1)", 0),
            Err(Error::Arity {
                expected: 2,
                got: 1,
                ..
            })
        ));
    }

    #[test]
    fn gradients_of_constraint_examples() {
        let e = Expr::parse("(x1-0.5)^2 - 0.25", 1).unwrap();
        let g = e.grad(0.0, &[1.0], DEFAULT_GRAD_STEP).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-6);
        let e = Expr::parse("x1^2 - 1", 1).unwrap();
        let g = e.grad(0.0, &[-1.0], DEFAULT_GRAD_STEP).unwrap();
        assert!((g[0] + 2.0).abs() < 1e-6);
        let e = Expr::parse("x1 + x2", 2).unwrap();
        let g = e.grad(0.0, &[0.0, 0.0], DEFAULT_GRAD_STEP).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-9 && (g[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gradient_probe_failure_names_location() {
        let e = Expr::parse("ln(x1)", 1).unwrap();
        let err = e.grad(0.0, &[1e-7], 1e-6).unwrap_err();
        assert!(err.to_string().contains("gradient probe"), "{err}");
    }

    #[test]
    fn canonical_print_reparses() {
        let e = Expr::parse("-x1^2 + 3*sin(t)/(x2 - 1e-7) - max(s, 2)", 2).unwrap();
        let printed = e.to_string();
        assert_eq!(Expr::parse(&printed, 2).unwrap(), e);
    }
}
