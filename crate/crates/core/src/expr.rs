//! Small arithmetic expression language used by config files.
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' (('-')* power))?      right-associative
//! atom   := number | 'pi' | var | func '(' expr ')' | '(' expr ')'
//! ```
//!
//! Variables are `z1..z3`, `zp1..zp3`, `x1..x3`, `xi1..xi3` and `r`; functions
//! are `sin cos exp sqrt abs`. Each use site restricts the admissible variables
//! so that unknown identifiers fail at parse time with a span.

use std::fmt;

use crate::error::{Error, Result, Span};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    Z1,
    Z2,
    Z3,
    Zp1,
    Zp2,
    Zp3,
    X1,
    X2,
    X3,
    Xi1,
    Xi2,
    Xi3,
    R,
}

impl Var {
    pub const ALL: [Var; 13] = [
        Var::Z1,
        Var::Z2,
        Var::Z3,
        Var::Zp1,
        Var::Zp2,
        Var::Zp3,
        Var::X1,
        Var::X2,
        Var::X3,
        Var::Xi1,
        Var::Xi2,
        Var::Xi3,
        Var::R,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Var::Z1 => "z1",
            Var::Z2 => "z2",
            Var::Z3 => "z3",
            Var::Zp1 => "zp1",
            Var::Zp2 => "zp2",
            Var::Zp3 => "zp3",
            Var::X1 => "x1",
            Var::X2 => "x2",
            Var::X3 => "x3",
            Var::Xi1 => "xi1",
            Var::Xi2 => "xi2",
            Var::Xi3 => "xi3",
            Var::R => "r",
        }
    }

    fn from_name(s: &str) -> Option<Var> {
        Var::ALL.iter().copied().find(|v| v.name() == s)
    }

    fn slot(self) -> usize {
        self as usize
    }
}

/// Set of variables admissible at a use site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarSet(u16);

impl VarSet {
    pub const ALL: VarSet = VarSet(0x1fff);
    /// Coefficient expressions: `z1..z3`, `zp1..zp3`.
    pub const COEFFICIENT: VarSet = VarSet(0b11_1111);
    /// Cell-only expressions (separable factors): `z1..z3`.
    pub const CELL: VarSet = VarSet(0b111);
    /// Kernel expressions: `xi1..xi3`, `r`.
    pub const KERNEL: VarSet = VarSet(0b1_1110_0000_0000);
    /// Radial profiles: `r`.
    pub const RADIAL: VarSet = VarSet(0b1_0000_0000_0000);
    /// Macroscopic fields: `x1..x3`.
    pub const MACRO: VarSet = VarSet(0b1_1100_0000);

    pub fn contains(self, v: Var) -> bool {
        self.0 & (1 << v.slot()) != 0
    }
}

/// Variable bindings for evaluation. Unbound slots evaluate to an error.
#[derive(Debug, Clone, Copy)]
pub struct Env {
    values: [f64; 13],
    bound: u16,
}

impl Default for Env {
    fn default() -> Self {
        Self::new()
    }
}

impl Env {
    pub fn new() -> Self {
        Self {
            values: [0.0; 13],
            bound: 0,
        }
    }

    pub fn set(&mut self, v: Var, value: f64) -> &mut Self {
        self.values[v.slot()] = value;
        self.bound |= 1 << v.slot();
        self
    }

    pub fn with_z(mut self, z: [f64; 3], zp: [f64; 3]) -> Self {
        self.set(Var::Z1, z[0])
            .set(Var::Z2, z[1])
            .set(Var::Z3, z[2])
            .set(Var::Zp1, zp[0])
            .set(Var::Zp2, zp[1])
            .set(Var::Zp3, zp[2]);
        self
    }

    pub fn with_xi(mut self, xi: [f64; 3]) -> Self {
        let r = (xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2]).sqrt();
        self.set(Var::Xi1, xi[0])
            .set(Var::Xi2, xi[1])
            .set(Var::Xi3, xi[2])
            .set(Var::R, r);
        self
    }

    pub fn with_r(mut self, r: f64) -> Self {
        self.set(Var::R, r);
        self
    }

    pub fn with_x(mut self, x: [f64; 3]) -> Self {
        self.set(Var::X1, x[0]).set(Var::X2, x[1]).set(Var::X3, x[2]);
        self
    }

    fn get(&self, v: Var) -> Option<f64> {
        (self.bound & (1 << v.slot()) != 0).then(|| self.values[v.slot()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func {
    Sin,
    Cos,
    Exp,
    Sqrt,
    Abs,
}

impl Func {
    fn from_name(s: &str) -> Option<Func> {
        Some(match s {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            _ => return None,
        })
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Func::Sin => x.sin(),
            Func::Cos => x.cos(),
            Func::Exp => x.exp(),
            Func::Sqrt => x.sqrt(),
            Func::Abs => x.abs(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone)]
enum Node {
    Num(f64),
    Var(Var, Span),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>, Span),
    Call(Func, Box<Node>, Span),
}

/// A parsed expression together with its source text.
#[derive(Clone)]
pub struct Expression {
    source: String,
    root: Node,
}

impl fmt::Debug for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expression({:?})", self.source)
    }
}

impl PartialEq for Expression {
    fn eq(&self, other: &Self) -> bool {
        self.source == other.source
    }
}

impl Expression {
    /// Parses with every grammar variable admissible.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with(text, VarSet::ALL)
    }

    pub fn parse_with(text: &str, vars: VarSet) -> Result<Self> {
        let tokens = tokenize(text)?;
        let mut p = Parser {
            tokens: &tokens,
            pos: 0,
            vars,
            len: text.len(),
        };
        let root = p.expr()?;
        if let Some(t) = p.peek() {
            return Err(Error::Parse {
                span: t.span,
                message: format!("unexpected {}", t.kind.describe()),
            });
        }
        Ok(Self {
            source: text.to_string(),
            root,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn eval(&self, env: &Env) -> Result<f64> {
        let v = eval_node(&self.root, env).map_err(|(span, msg)| Error::Eval {
            source_text: self.source.clone(),
            message: format!("{msg} at {span}"),
        })?;
        if !v.is_finite() {
            return Err(Error::Eval {
                source_text: self.source.clone(),
                message: format!("non-finite result {v}"),
            });
        }
        Ok(v)
    }

    /// True when the expression references `v`.
    pub fn uses(&self, v: Var) -> bool {
        fn walk(n: &Node, v: Var) -> bool {
            match n {
                Node::Num(_) => false,
                Node::Var(w, _) => *w == v,
                Node::Neg(a) | Node::Call(_, a, _) => walk(a, v),
                Node::Bin(_, a, b, _) => walk(a, v) || walk(b, v),
            }
        }
        walk(&self.root, v)
    }
}

type EvalResult = std::result::Result<f64, (Span, String)>;

fn eval_node(n: &Node, env: &Env) -> EvalResult {
    Ok(match n {
        Node::Num(x) => *x,
        Node::Var(v, span) => env
            .get(*v)
            .ok_or_else(|| (*span, format!("variable `{}` is not bound here", v.name())))?,
        Node::Neg(a) => -eval_node(a, env)?,
        Node::Call(f, a, span) => {
            let v = f.apply(eval_node(a, env)?);
            if v.is_nan() {
                return Err((*span, "argument outside the function's domain".to_string()));
            }
            v
        }
        Node::Bin(op, a, b, span) => {
            let x = eval_node(a, env)?;
            let y = eval_node(b, env)?;
            match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                BinOp::Div => {
                    if y == 0.0 {
                        return Err((*span, "division by zero".to_string()));
                    }
                    x / y
                }
                BinOp::Pow => x.powf(y),
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
enum TokenKind {
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

impl TokenKind {
    fn describe(&self) -> String {
        match self {
            TokenKind::Num(x) => format!("number {x}"),
            TokenKind::Ident(s) => format!("identifier `{s}`"),
            TokenKind::Plus => "`+`".into(),
            TokenKind::Minus => "`-`".into(),
            TokenKind::Star => "`*`".into(),
            TokenKind::Slash => "`/`".into(),
            TokenKind::Caret => "`^`".into(),
            TokenKind::LParen => "`(`".into(),
            TokenKind::RParen => "`)`".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokenKind,
    span: Span,
}

fn tokenize(text: &str) -> Result<Vec<Token>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        let single = match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'+' => Some(TokenKind::Plus),
            b'-' => Some(TokenKind::Minus),
            b'*' => Some(TokenKind::Star),
            b'/' => Some(TokenKind::Slash),
            b'^' => Some(TokenKind::Caret),
            b'(' => Some(TokenKind::LParen),
            b')' => Some(TokenKind::RParen),
            _ => None,
        };
        if let Some(kind) = single {
            i += 1;
            out.push(Token {
                kind,
                span: Span::new(start, i),
            });
            continue;
        }
        if c.is_ascii_digit() || c == b'.' {
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
            let s = &text[start..i];
            let value: f64 = s.parse().map_err(|_| Error::Parse {
                span: Span::new(start, i),
                message: format!("malformed number `{s}`"),
            })?;
            out.push(Token {
                kind: TokenKind::Num(value),
                span: Span::new(start, i),
            });
            continue;
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Token {
                kind: TokenKind::Ident(text[start..i].to_string()),
                span: Span::new(start, i),
            });
            continue;
        }
        // Non-ASCII or stray punctuation: report the whole UTF-8 character.
        let ch_len = text[start..].chars().next().map_or(1, char::len_utf8);
        return Err(Error::Parse {
            span: Span::new(start, start + ch_len),
            message: format!("unexpected character `{}`", &text[start..start + ch_len]),
        });
    }
    Ok(out)
}

// Nesting limit keeps adversarial inputs from exhausting the stack.
const MAX_DEPTH: usize = 200;

struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
    vars: VarSet,
    len: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn bump(&mut self) -> Option<&Token> {
        let t = self.tokens.get(self.pos);
        self.pos += 1;
        t
    }

    fn eof_span(&self) -> Span {
        Span::new(self.len, self.len)
    }

    fn check_depth(&self, depth: usize) -> Result<()> {
        if depth > MAX_DEPTH {
            let span = self.peek().map_or(self.eof_span(), |t| t.span);
            return Err(Error::Parse {
                span,
                message: "expression nested too deeply".into(),
            });
        }
        Ok(())
    }

    fn expr(&mut self) -> Result<Node> {
        self.expr_at(0)
    }

    fn expr_at(&mut self, depth: usize) -> Result<Node> {
        self.check_depth(depth)?;
        let mut lhs = self.term(depth)?;
        while let Some(t) = self.peek() {
            let op = match t.kind {
                TokenKind::Plus => BinOp::Add,
                TokenKind::Minus => BinOp::Sub,
                _ => break,
            };
            let span = t.span;
            self.pos += 1;
            let rhs = self.term(depth)?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs), span);
        }
        Ok(lhs)
    }

    fn term(&mut self, depth: usize) -> Result<Node> {
        let mut lhs = self.unary(depth)?;
        while let Some(t) = self.peek() {
            let op = match t.kind {
                TokenKind::Star => BinOp::Mul,
                TokenKind::Slash => BinOp::Div,
                _ => break,
            };
            let span = t.span;
            self.pos += 1;
            let rhs = self.unary(depth)?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs), span);
        }
        Ok(lhs)
    }

    fn unary(&mut self, depth: usize) -> Result<Node> {
        self.check_depth(depth)?;
        if matches!(self.peek().map(|t| &t.kind), Some(TokenKind::Minus)) {
            self.pos += 1;
            return Ok(Node::Neg(Box::new(self.unary(depth + 1)?)));
        }
        self.power(depth)
    }

    fn power(&mut self, depth: usize) -> Result<Node> {
        self.check_depth(depth)?;
        let base = self.atom(depth)?;
        if let Some(t) = self.peek() {
            if t.kind == TokenKind::Caret {
                let span = t.span;
                self.pos += 1;
                // Exponent may carry its own sign: 2^-1.
                let exponent = self.unary(depth + 1)?;
                return Ok(Node::Bin(
                    BinOp::Pow,
                    Box::new(base),
                    Box::new(exponent),
                    span,
                ));
            }
        }
        Ok(base)
    }

    fn atom(&mut self, depth: usize) -> Result<Node> {
        let eof = self.eof_span();
        let vars = self.vars;
        let Some(tok) = self.bump().cloned() else {
            return Err(Error::Parse {
                span: eof,
                message: "unexpected end of expression".into(),
            });
        };
        match tok.kind {
            TokenKind::Num(x) => Ok(Node::Num(x)),
            TokenKind::LParen => {
                let inner = self.expr_at(depth + 1)?;
                self.expect_close(tok.span)?;
                Ok(inner)
            }
            TokenKind::Ident(name) => {
                if name == "pi" {
                    return Ok(Node::Num(std::f64::consts::PI));
                }
                if let Some(f) = Func::from_name(&name) {
                    let open = match self.bump() {
                        Some(t) if t.kind == TokenKind::LParen => t.span,
                        _ => {
                            return Err(Error::Parse {
                                span: tok.span,
                                message: format!("function `{name}` must be followed by `(`"),
                            })
                        }
                    };
                    let arg = self.expr_at(depth + 1)?;
                    self.expect_close(open)?;
                    return Ok(Node::Call(f, Box::new(arg), tok.span));
                }
                match Var::from_name(&name) {
                    Some(v) if vars.contains(v) => Ok(Node::Var(v, tok.span)),
                    Some(v) => Err(Error::Parse {
                        span: tok.span,
                        message: format!("variable `{}` is not allowed here", v.name()),
                    }),
                    None => Err(Error::Parse {
                        span: tok.span,
                        message: format!("unknown identifier `{name}`"),
                    }),
                }
            }
            other => Err(Error::Parse {
                span: tok.span,
                message: format!("unexpected {}", other.describe()),
            }),
        }
    }

    fn expect_close(&mut self, open: Span) -> Result<()> {
        match self.peek() {
            Some(t) if t.kind == TokenKind::RParen => {
                self.pos += 1;
                Ok(())
            }
            Some(t) => Err(Error::Parse {
                span: t.span,
                message: format!("expected `)` to close `(` at {open}, found {}", t.kind.describe()),
            }),
            None => Err(Error::Parse {
                span: open,
                message: "unclosed parenthesis".into(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(text: &str) -> f64 {
        Expression::parse(text).unwrap().eval(&Env::new()).unwrap()
    }

    #[test]
    fn power_is_right_associative() {
        assert_eq!(eval("2^3^2"), 512.0);
    }

    #[test]
    fn precedence() {
        assert_eq!(eval("1 + 2 * 3"), 7.0);
        assert_eq!(eval("-2^2"), -4.0);
        assert_eq!(eval("2^-1"), 0.5);
        assert_eq!(eval("8 / 2 / 2"), 2.0);
        assert_eq!(eval("1 - 2 - 3"), -4.0);
        assert_eq!(eval("--3"), 3.0);
        assert_eq!(eval("1.5e2"), 150.0);
    }

    #[test]
    fn functions_and_pi() {
        assert!((eval("sin(pi/2)") - 1.0).abs() < 1e-15);
        assert_eq!(eval("abs(-2) + sqrt(16) + exp(0) + cos(0)"), 8.0);
    }

    #[test]
    fn ratio_of_kernel_variables() {
        let e = Expression::parse_with("xi1/r", VarSet::KERNEL).unwrap();
        let v = e.eval(&Env::new().with_xi([3.0, 4.0, 0.0])).unwrap();
        assert!((v - 0.6).abs() < 1e-15);
    }

    #[test]
    fn unclosed_paren_points_at_opening() {
        let text = "1 + 0.5*sin(2*pi*z1";
        match Expression::parse(text) {
            Err(Error::Parse { span, .. }) => assert_eq!(&text[span.start..span.end], "("),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_identifier_has_span() {
        match Expression::parse("1 + foo") {
            Err(Error::Parse { span, message }) => {
                assert_eq!(span, Span::new(4, 7));
                assert!(message.contains("foo"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn disallowed_variable_rejected() {
        assert!(matches!(
            Expression::parse_with("xi1 + z1", VarSet::KERNEL),
            Err(Error::Parse { span, .. }) if span == Span::new(6, 8)
        ));
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let e = Expression::parse("1/(z1 - z1)").unwrap();
        let env = Env::new().with_z([0.2; 3], [0.0; 3]);
        assert!(matches!(e.eval(&env), Err(Error::Eval { .. })));
    }

    #[test]
    fn unbound_variable_is_an_eval_error() {
        let e = Expression::parse("x1").unwrap();
        assert!(e.eval(&Env::new()).is_err());
    }

    #[test]
    fn trailing_garbage_rejected() {
        assert!(Expression::parse("1 2").is_err());
        assert!(Expression::parse("").is_err());
        assert!(Expression::parse("sin 2").is_err());
        assert!(Expression::parse("(1))").is_err());
    }

    #[test]
    fn deep_nesting_is_rejected_not_overflowed() {
        let text = "(".repeat(10_000) + "1" + &")".repeat(10_000);
        assert!(Expression::parse(&text).is_err());
        let text = "-".repeat(10_000) + "1";
        assert!(Expression::parse(&text).is_err());
    }
}
