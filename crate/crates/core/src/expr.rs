//! Scalar expressions in the torus coordinate `x` and the fast variable `m`.
//!
//! Grammar (whitespace is ignored between tokens):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' primary)*
//! primary := number | 'x' | 'm' | 'pi' | func '(' expr ')' | '(' expr ')'
//! func    := 'sin' | 'cos' | 'exp' | 'tanh' | 'sqrt' | 'abs'
//! number  := digits ['.' digits] [('e' | 'E') ['+' | '-'] digits]
//! ```
//!
//! `^` binds tighter than unary minus, so `-2^2` is `-(2^2)`. All binary
//! levels associate to the left, including `^`. A negative exponent must be
//! parenthesized: `2^(-1)`.

use std::f64::consts::PI;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("empty expression")]
    Empty,
    #[error("syntax error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown identifier '{name}' at position {pos}")]
    UnknownIdentifier { pos: usize, name: String },
    #[error("domain error in '{expr}': {reason}")]
    Domain { expr: String, reason: String },
    #[error("non-finite input ({x}, {m})")]
    NonFiniteInput { x: f64, m: f64 },
    #[error("'{source_text}' is not 1-periodic in x: deviation {deviation:e} at x={x}, m={m} exceeds {tol:e}")]
    NotPeriodic {
        source_text: String,
        deviation: f64,
        x: f64,
        m: f64,
        tol: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    X,
    M,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Sin,
    Cos,
    Exp,
    Tanh,
    Sqrt,
    Abs,
}

impl UnaryOp {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => Self::Sin,
            "cos" => Self::Cos,
            "exp" => Self::Exp,
            "tanh" => Self::Tanh,
            "sqrt" => Self::Sqrt,
            "abs" => Self::Abs,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Self::Neg => "-",
            Self::Sin => "sin",
            Self::Cos => "cos",
            Self::Exp => "exp",
            Self::Tanh => "tanh",
            Self::Sqrt => "sqrt",
            Self::Abs => "abs",
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
            Self::Add => '+',
            Self::Sub => '-',
            Self::Mul => '*',
            Self::Div => '/',
            Self::Pow => '^',
        }
    }
}

/// Expression tree. Built by [`parse_expression`]; never mutated afterwards.
#[derive(Debug, Clone, PartialEq)]
pub enum ExprNode {
    Const(f64),
    Var(Var),
    Unary(UnaryOp, Box<ExprNode>),
    Binary(BinaryOp, Box<ExprNode>, Box<ExprNode>),
}

impl ExprNode {
    /// Evaluates with `x` taken as is (no torus reduction).
    pub fn eval(&self, x: f64, m: f64) -> Result<f64, ExprError> {
        match self {
            ExprNode::Const(c) => Ok(*c),
            ExprNode::Var(Var::X) => Ok(x),
            ExprNode::Var(Var::M) => Ok(m),
            ExprNode::Unary(op, arg) => {
                let a = arg.eval(x, m)?;
                let v = match op {
                    UnaryOp::Neg => -a,
                    UnaryOp::Sin => a.sin(),
                    UnaryOp::Cos => a.cos(),
                    UnaryOp::Exp => a.exp(),
                    UnaryOp::Tanh => a.tanh(),
                    UnaryOp::Sqrt => {
                        if a < 0.0 {
                            return Err(self.domain(format!("sqrt of negative value {a}")));
                        }
                        a.sqrt()
                    }
                    UnaryOp::Abs => a.abs(),
                };
                self.finite(v)
            }
            ExprNode::Binary(op, lhs, rhs) => {
                let a = lhs.eval(x, m)?;
                let b = rhs.eval(x, m)?;
                let v = match op {
                    BinaryOp::Add => a + b,
                    BinaryOp::Sub => a - b,
                    BinaryOp::Mul => a * b,
                    BinaryOp::Div => {
                        if b == 0.0 {
                            return Err(self.domain("division by zero".to_string()));
                        }
                        a / b
                    }
                    BinaryOp::Pow => a.powf(b),
                };
                self.finite(v)
            }
        }
    }

    fn finite(&self, v: f64) -> Result<f64, ExprError> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.domain(format!("non-finite result {v}")))
        }
    }

    fn domain(&self, reason: String) -> ExprError {
        ExprError::Domain {
            expr: self.to_string(),
            reason,
        }
    }

    pub fn depends_on(&self, var: Var) -> bool {
        match self {
            ExprNode::Const(_) => false,
            ExprNode::Var(v) => *v == var,
            ExprNode::Unary(_, a) => a.depends_on(var),
            ExprNode::Binary(_, a, b) => a.depends_on(var) || b.depends_on(var),
        }
    }
}

/// Fully parenthesized rendering; parsing it back yields the same tree
/// up to `Neg(Const)` for negative constants.
impl fmt::Display for ExprNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExprNode::Const(c) => {
                if *c < 0.0 {
                    write!(f, "(-{:?})", -c)
                } else {
                    write!(f, "{c:?}")
                }
            }
            ExprNode::Var(Var::X) => f.write_str("x"),
            ExprNode::Var(Var::M) => f.write_str("m"),
            ExprNode::Unary(UnaryOp::Neg, a) => write!(f, "(-{a})"),
            ExprNode::Unary(op, a) => write!(f, "{}({a})", op.name()),
            ExprNode::Binary(op, a, b) => write!(f, "({a}{}{b})", op.symbol()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
}

fn tokenize(text: &str) -> Result<Vec<(usize, Tok)>, ExprError> {
    let bytes = text.as_bytes();
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
            let lit = &text[start..i];
            let v: f64 = lit.parse().map_err(|_| ExprError::Syntax {
                pos: start,
                msg: format!("malformed number '{lit}'"),
            })?;
            out.push((start, Tok::Num(v)));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((start, Tok::Ident(text[start..i].to_string())));
        } else {
            let tok = match c {
                '+' | '-' | '*' | '/' | '^' => Tok::Op(c),
                '(' => Tok::LParen,
                ')' => Tok::RParen,
                _ => {
                    return Err(ExprError::Syntax {
                        pos: i,
                        msg: format!("unexpected character '{c}'"),
                    })
                }
            };
            out.push((i, tok));
            i += c.len_utf8();
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |(p, _)| *p)
    }

    fn unexpected(&self) -> ExprError {
        let msg = match self.toks.get(self.pos) {
            Some((_, t)) => format!("unexpected token {}", describe(t)),
            None => "unexpected end of input".to_string(),
        };
        ExprError::Syntax {
            pos: self.offset(),
            msg,
        }
    }

    fn expr(&mut self) -> Result<ExprNode, ExprError> {
        let mut lhs = self.term()?;
        while let Some(Tok::Op(c @ ('+' | '-'))) = self.peek() {
            let op = if *c == '+' { BinaryOp::Add } else { BinaryOp::Sub };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = ExprNode::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<ExprNode, ExprError> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Op(c @ ('*' | '/'))) = self.peek() {
            let op = if *c == '*' { BinaryOp::Mul } else { BinaryOp::Div };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = ExprNode::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<ExprNode, ExprError> {
        if let Some(Tok::Op('-')) = self.peek() {
            self.pos += 1;
            let arg = self.unary()?;
            return Ok(ExprNode::Unary(UnaryOp::Neg, Box::new(arg)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<ExprNode, ExprError> {
        let mut lhs = self.primary()?;
        while let Some(Tok::Op('^')) = self.peek() {
            self.pos += 1;
            let rhs = self.primary()?;
            lhs = ExprNode::Binary(BinaryOp::Pow, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn primary(&mut self) -> Result<ExprNode, ExprError> {
        let start = self.offset();
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(ExprNode::Const(v))
            }
            Some(Tok::LParen) => {
                self.pos += 1;
                let inner = self.expr()?;
                self.close_paren(start)?;
                Ok(inner)
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                match name.as_str() {
                    "x" => Ok(ExprNode::Var(Var::X)),
                    "m" => Ok(ExprNode::Var(Var::M)),
                    "pi" => Ok(ExprNode::Const(PI)),
                    _ => {
                        let op = UnaryOp::from_name(&name).ok_or_else(|| {
                            ExprError::UnknownIdentifier {
                                pos: start,
                                name: name.clone(),
                            }
                        })?;
                        if self.peek() != Some(&Tok::LParen) {
                            return Err(ExprError::Syntax {
                                pos: self.offset(),
                                msg: format!("function '{name}' requires parentheses"),
                            });
                        }
                        let open = self.offset();
                        self.pos += 1;
                        let arg = self.expr()?;
                        self.close_paren(open)?;
                        Ok(ExprNode::Unary(op, Box::new(arg)))
                    }
                }
            }
            _ => Err(self.unexpected()),
        }
    }

    fn close_paren(&mut self, open: usize) -> Result<(), ExprError> {
        match self.peek() {
            Some(Tok::RParen) => {
                self.pos += 1;
                Ok(())
            }
            None => Err(ExprError::Syntax {
                pos: open,
                msg: "unbalanced '('".to_string(),
            }),
            Some(_) => Err(self.unexpected()),
        }
    }
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Num(v) => format!("number {v}"),
        Tok::Ident(s) => format!("'{s}'"),
        Tok::Op(c) => format!("'{c}'"),
        Tok::LParen => "'('".to_string(),
        Tok::RParen => "')'".to_string(),
    }
}

/// Parses `text` into an expression tree.
pub fn parse_expression(text: &str) -> Result<ExprNode, ExprError> {
    if text.trim().is_empty() {
        return Err(ExprError::Empty);
    }
    let toks = tokenize(text)?;
    let mut p = Parser {
        toks,
        pos: 0,
        end: text.len(),
    };
    let root = p.expr()?;
    if p.pos != p.toks.len() {
        return Err(p.unexpected());
    }
    Ok(root)
}

/// Default validation grid for x-periodicity.
pub const PERIODICITY_GRID: usize = 64;
pub const PERIODICITY_TOL: f64 = 1e-9;
/// Fast-variable probe values used by the periodicity and constancy checks.
pub const PROBE_M: [f64; 5] = [-3.0, -1.0, 0.0, 1.0, 3.0];

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicityReport {
    pub max_deviation: f64,
    pub worst_x: f64,
    pub worst_m: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Immutable coefficient function of `(x, m)`.
///
/// When built with [`CoefficientFn::periodic`] the torus coordinate is
/// reduced modulo 1 before evaluation, so callers may pass real-line states.
#[derive(Debug, Clone)]
pub struct CoefficientFn {
    root: ExprNode,
    source: String,
    x_periodic: bool,
    uses_x: bool,
    uses_m: bool,
}

impl CoefficientFn {
    /// Parses a plain (non-periodic) function, e.g. a potential derivative or
    /// a test function.
    pub fn parse(text: &str) -> Result<Self, ExprError> {
        let root = parse_expression(text)?;
        Ok(Self {
            uses_x: root.depends_on(Var::X),
            uses_m: root.depends_on(Var::M),
            root,
            source: text.trim().to_string(),
            x_periodic: false,
        })
    }

    /// Parses a diffusion coefficient: it must pass the numeric
    /// periodicity check on the default grid.
    pub fn periodic(text: &str) -> Result<Self, ExprError> {
        let mut f = Self::parse(text)?;
        let report = check_periodicity(&f, PERIODICITY_GRID, PERIODICITY_TOL)?;
        if !report.passed {
            return Err(ExprError::NotPeriodic {
                source_text: f.source,
                deviation: report.max_deviation,
                x: report.worst_x,
                m: report.worst_m,
                tol: report.tol,
            });
        }
        f.x_periodic = true;
        Ok(f)
    }

    pub fn root(&self) -> &ExprNode {
        &self.root
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn is_x_periodic(&self) -> bool {
        self.x_periodic
    }

    pub fn depends_on(&self, var: Var) -> bool {
        match var {
            Var::X => self.uses_x,
            Var::M => self.uses_m,
        }
    }

    #[inline]
    pub fn eval(&self, x: f64, m: f64) -> Result<f64, ExprError> {
        if !x.is_finite() || !m.is_finite() {
            return Err(ExprError::NonFiniteInput { x, m });
        }
        let x = if self.x_periodic { x.rem_euclid(1.0) } else { x };
        self.root.eval(x, m)
    }

    /// Numeric constancy test in `m` over the x-grid and probe set.
    pub fn is_constant_in_m(&self) -> Result<bool, ExprError> {
        if !self.uses_m {
            return Ok(true);
        }
        for i in 0..PERIODICITY_GRID {
            let x = i as f64 / PERIODICITY_GRID as f64;
            let base = self.root.eval(x, PROBE_M[0])?;
            for &m in &PROBE_M[1..] {
                if (self.root.eval(x, m)? - base).abs() > 1e-12 * (1.0 + base.abs()) {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }
}

/// Evaluates `|f(x, m) - f(x + 1, m)|` over `grid_size` points of `[0, 1)`
/// and the fixed probe set in `m`, without torus reduction.
pub fn check_periodicity(
    f: &CoefficientFn,
    grid_size: usize,
    tol: f64,
) -> Result<PeriodicityReport, ExprError> {
    assert!(grid_size >= 8, "periodicity grid needs at least 8 points");
    let mut report = PeriodicityReport {
        max_deviation: 0.0,
        worst_x: 0.0,
        worst_m: PROBE_M[0],
        tol,
        passed: true,
    };
    for i in 0..grid_size {
        let x = i as f64 / grid_size as f64;
        for &m in &PROBE_M {
            let d = (f.root.eval(x, m)? - f.root.eval(x + 1.0, m)?).abs();
            if d > report.max_deviation {
                report.max_deviation = d;
                report.worst_x = x;
                report.worst_m = m;
            }
        }
    }
    report.passed = report.max_deviation <= tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(text: &str, x: f64, m: f64) -> Result<f64, ExprError> {
        CoefficientFn::parse(text)?.eval(x, m)
    }

    #[test]
    fn precedence() {
        assert_eq!(eval("1+2*3", 0.0, 0.0).unwrap(), 7.0);
        assert_eq!(eval("(1+2)*3", 0.0, 0.0).unwrap(), 9.0);
        assert_eq!(eval("-2^2", 0.0, 0.0).unwrap(), -4.0);
        assert_eq!(eval("2^3^2", 0.0, 0.0).unwrap(), 64.0);
        assert_eq!(eval("8/4/2", 0.0, 0.0).unwrap(), 1.0);
        assert_eq!(eval("5-3-1", 0.0, 0.0).unwrap(), 1.0);
        assert_eq!(eval("2*-m", 0.0, 3.0).unwrap(), -6.0);
        assert_eq!(eval("1.5e2 + 2E-1", 0.0, 0.0).unwrap(), 150.2);
    }

    #[test]
    fn grammar_shape() {
        let tree = parse_expression("2+sin(m)").unwrap();
        assert_eq!(
            tree,
            ExprNode::Binary(
                BinaryOp::Add,
                Box::new(ExprNode::Const(2.0)),
                Box::new(ExprNode::Unary(UnaryOp::Sin, Box::new(ExprNode::Var(Var::M))))
            )
        );
    }

    #[test]
    fn syntax_errors_carry_position() {
        match parse_expression("2+*m") {
            Err(ExprError::Syntax { pos, .. }) => assert_eq!(pos, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_expression("(1+m"),
            Err(ExprError::Syntax { pos: 0, .. })
        ));
        assert!(matches!(
            parse_expression("1+m)"),
            Err(ExprError::Syntax { pos: 3, .. })
        ));
        assert!(matches!(parse_expression("sin m"), Err(ExprError::Syntax { .. })));
        assert!(matches!(parse_expression("   "), Err(ExprError::Empty)));
        assert!(matches!(parse_expression("1 $ 2"), Err(ExprError::Syntax { pos: 2, .. })));
        assert!(matches!(
            parse_expression("y+1"),
            Err(ExprError::UnknownIdentifier { pos: 0, .. })
        ));
        assert!(matches!(
            parse_expression("2*log(m)"),
            Err(ExprError::UnknownIdentifier { pos: 2, .. })
        ));
    }

    #[test]
    fn evaluation_examples() {
        assert_eq!(eval("x*m", 0.5, 2.0).unwrap(), 1.0);
        assert_eq!(eval("2+sin(m)", 0.3, 0.0).unwrap(), 2.0);
        assert_eq!(eval("abs(m) + sqrt(4) + tanh(0) + exp(0) + cos(0)", 0.0, -1.0).unwrap(), 5.0);
        assert!((eval("pi", 0.0, 0.0).unwrap() - PI).abs() == 0.0);
    }

    #[test]
    fn domain_errors_name_subexpression() {
        match eval("1/(m-1)", 0.0, 1.0) {
            Err(ExprError::Domain { expr, reason }) => {
                assert_eq!(expr, "(1.0/(m-1.0))");
                assert!(reason.contains("division by zero"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(eval("sqrt(m)", 0.0, -1.0), Err(ExprError::Domain { .. })));
        assert!(matches!(eval("(-1)^0.5", 0.0, 0.0), Err(ExprError::Domain { .. })));
        assert!(matches!(eval("exp(m)", 0.0, 1e4), Err(ExprError::Domain { .. })));
        assert!(matches!(eval("m", 0.0, f64::NAN), Err(ExprError::NonFiniteInput { .. })));
    }

    #[test]
    fn periodicity_examples() {
        let p = |s: &str| check_periodicity(&CoefficientFn::parse(s).unwrap(), 64, 1e-9).unwrap();
        assert!(p("sin(2*pi*x)").passed);
        let lin = p("x");
        assert!(!lin.passed);
        assert!((lin.max_deviation - 1.0).abs() < 1e-15);
        assert!(p("2+sin(m)").passed);
        assert!(p("0.5+0.25*sin(2*pi*x)*cos(m)").passed);
        assert!(CoefficientFn::periodic("x*m").is_err());
    }

    #[test]
    fn periodic_functions_wrap_x() {
        let f = CoefficientFn::periodic("sin(2*pi*x)+x-x").unwrap();
        let g = CoefficientFn::parse("x").unwrap();
        assert_eq!(f.eval(0.25, 0.0).unwrap(), f.eval(3.25, 0.0).unwrap());
        assert_eq!(f.eval(-0.75, 0.0).unwrap(), f.eval(0.25, 0.0).unwrap());
        assert_eq!(g.eval(3.25, 0.0).unwrap(), 3.25);
    }

    #[test]
    fn constancy_in_m() {
        assert!(CoefficientFn::parse("3").unwrap().is_constant_in_m().unwrap());
        assert!(CoefficientFn::parse("sin(2*pi*x)+m-m").unwrap().is_constant_in_m().unwrap());
        assert!(!CoefficientFn::parse("2+sin(m)").unwrap().is_constant_in_m().unwrap());
    }
}
