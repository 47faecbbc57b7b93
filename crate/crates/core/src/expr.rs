//! Scalar expressions in `x` and `y`: parsing, evaluation and symbolic
//! differentiation.
//!
//! Grammar (standard precedence, `^` binds tighter than unary minus and is
//! right-associative):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?
//! primary := number | 'x' | 'y' | 'pi' | 'e' | func '(' expr (',' expr)* ')' | '(' expr ')'
//! ```

use std::fmt;
use std::str::FromStr;

use crate::error::{FemError, Result};
use crate::mesh::Point;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Var {
    X,
    Y,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Abs,
    Min,
    Max,
    /// 0 for negative arguments, 1 otherwise.
    Step,
}

impl Func {
    fn lookup(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => Self::Sin,
            "cos" => Self::Cos,
            "exp" => Self::Exp,
            "log" | "ln" => Self::Log,
            "sqrt" => Self::Sqrt,
            "abs" => Self::Abs,
            "min" => Self::Min,
            "max" => Self::Max,
            "step" => Self::Step,
            _ => return None,
        })
    }

    fn arity(self) -> usize {
        match self {
            Self::Min | Self::Max => 2,
            _ => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Sin => "sin",
            Self::Cos => "cos",
            Self::Exp => "exp",
            Self::Log => "log",
            Self::Sqrt => "sqrt",
            Self::Abs => "abs",
            Self::Min => "min",
            Self::Max => "max",
            Self::Step => "step",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

fn step(t: f64) -> f64 {
    if t < 0.0 {
        0.0
    } else {
        1.0
    }
}

// Smart constructors folding constants and trivial identities, so that
// derivatives of polynomial data stay small.
fn num(v: f64) -> Expr {
    Expr::Num(v)
}

fn add(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(p), Expr::Num(q)) => num(p + q),
        (Expr::Num(z), _) if *z == 0.0 => b,
        (_, Expr::Num(z)) if *z == 0.0 => a,
        _ => Expr::Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(p), Expr::Num(q)) => num(p - q),
        (_, Expr::Num(z)) if *z == 0.0 => a,
        (Expr::Num(z), _) if *z == 0.0 => neg(b),
        _ => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(p), Expr::Num(q)) => num(p * q),
        (Expr::Num(z), _) | (_, Expr::Num(z)) if *z == 0.0 => num(0.0),
        (Expr::Num(o), _) if *o == 1.0 => b,
        (_, Expr::Num(o)) if *o == 1.0 => a,
        _ => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(p), Expr::Num(q)) if *q != 0.0 => num(p / q),
        (Expr::Num(z), _) if *z == 0.0 => num(0.0),
        (_, Expr::Num(o)) if *o == 1.0 => a,
        _ => Expr::Div(Box::new(a), Box::new(b)),
    }
}

fn pow(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(p), Expr::Num(q)) => num(p.powf(*q)),
        (_, Expr::Num(z)) if *z == 0.0 => num(1.0),
        (_, Expr::Num(o)) if *o == 1.0 => a,
        _ => Expr::Pow(Box::new(a), Box::new(b)),
    }
}

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Num(v) => num(-v),
        Expr::Neg(inner) => *inner,
        other => Expr::Neg(Box::new(other)),
    }
}

fn call(f: Func, args: Vec<Expr>) -> Expr {
    if args.iter().all(|a| matches!(a, Expr::Num(_))) {
        let v = Expr::Call(f, args).eval([0.0, 0.0]);
        return num(v);
    }
    Expr::Call(f, args)
}

impl Expr {
    pub fn constant(v: f64) -> Self {
        num(v)
    }

    pub fn parse(src: &str) -> Result<Self> {
        let mut p = Parser {
            src: src.as_bytes(),
            pos: 0,
        };
        let e = p.expr()?;
        p.skip_ws();
        if p.pos < p.src.len() {
            return Err(p.error("unexpected trailing input"));
        }
        Ok(e)
    }

    pub fn eval(&self, at: Point) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Var(Var::X) => at[0],
            Expr::Var(Var::Y) => at[1],
            Expr::Neg(a) => -a.eval(at),
            Expr::Add(a, b) => a.eval(at) + b.eval(at),
            Expr::Sub(a, b) => a.eval(at) - b.eval(at),
            Expr::Mul(a, b) => a.eval(at) * b.eval(at),
            Expr::Div(a, b) => a.eval(at) / b.eval(at),
            Expr::Pow(a, b) => {
                let (base, exp) = (a.eval(at), b.eval(at));
                if exp.fract() == 0.0 && exp.abs() < 64.0 {
                    base.powi(exp as i32)
                } else {
                    base.powf(exp)
                }
            }
            Expr::Call(f, args) => {
                let a = args[0].eval(at);
                match f {
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Exp => a.exp(),
                    Func::Log => a.ln(),
                    Func::Sqrt => a.sqrt(),
                    Func::Abs => a.abs(),
                    Func::Step => step(a),
                    Func::Min => a.min(args[1].eval(at)),
                    Func::Max => a.max(args[1].eval(at)),
                }
            }
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            Expr::Num(_) => true,
            Expr::Var(_) => false,
            Expr::Neg(a) => a.is_constant(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) | Expr::Pow(a, b) => {
                a.is_constant() && b.is_constant()
            }
            Expr::Call(_, args) => args.iter().all(Expr::is_constant),
        }
    }

    /// Symbolic derivative. `abs`, `min`, `max` and `step` are differentiated
    /// almost everywhere (the derivative of `step` is taken as zero).
    pub fn diff(&self, var: Var) -> Result<Expr> {
        Ok(match self {
            Expr::Num(_) => num(0.0),
            Expr::Var(v) => num(if *v == var { 1.0 } else { 0.0 }),
            Expr::Neg(a) => neg(a.diff(var)?),
            Expr::Add(a, b) => add(a.diff(var)?, b.diff(var)?),
            Expr::Sub(a, b) => sub(a.diff(var)?, b.diff(var)?),
            Expr::Mul(a, b) => add(
                mul(a.diff(var)?, (**b).clone()),
                mul((**a).clone(), b.diff(var)?),
            ),
            Expr::Div(a, b) => div(
                sub(
                    mul(a.diff(var)?, (**b).clone()),
                    mul((**a).clone(), b.diff(var)?),
                ),
                pow((**b).clone(), num(2.0)),
            ),
            Expr::Pow(a, b) => {
                let (da, db) = (a.diff(var)?, b.diff(var)?);
                if let Expr::Num(n) = **b {
                    mul(mul(num(n), pow((**a).clone(), num(n - 1.0))), da)
                } else if matches!(db, Expr::Num(z) if z == 0.0) {
                    let exp = (**b).clone();
                    mul(mul(exp.clone(), pow((**a).clone(), sub(exp, num(1.0)))), da)
                } else {
                    // a^b (b' ln a + b a'/a)
                    mul(
                        self.clone(),
                        add(
                            mul(db, call(Func::Log, vec![(**a).clone()])),
                            div(mul((**b).clone(), da), (**a).clone()),
                        ),
                    )
                }
            }
            Expr::Call(f, args) => {
                let a = &args[0];
                let da = a.diff(var)?;
                match f {
                    Func::Sin => mul(call(Func::Cos, vec![a.clone()]), da),
                    Func::Cos => neg(mul(call(Func::Sin, vec![a.clone()]), da)),
                    Func::Exp => mul(call(Func::Exp, vec![a.clone()]), da),
                    Func::Log => div(da, a.clone()),
                    Func::Sqrt => div(da, mul(num(2.0), call(Func::Sqrt, vec![a.clone()]))),
                    Func::Abs => mul(
                        sub(mul(num(2.0), call(Func::Step, vec![a.clone()])), num(1.0)),
                        da,
                    ),
                    Func::Step => num(0.0),
                    Func::Min | Func::Max => {
                        let b = &args[1];
                        let db = b.diff(var)?;
                        let sel = if *f == Func::Min {
                            call(Func::Step, vec![sub(b.clone(), a.clone())])
                        } else {
                            call(Func::Step, vec![sub(a.clone(), b.clone())])
                        };
                        add(mul(sel.clone(), da), mul(sub(num(1.0), sel), db))
                    }
                }
            }
        })
    }
}

impl FromStr for Expr {
    type Err = FemError;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => {
                if *v < 0.0 {
                    write!(f, "({v:?})")
                } else {
                    write!(f, "{v:?}")
                }
            }
            Expr::Var(Var::X) => write!(f, "x"),
            Expr::Var(Var::Y) => write!(f, "y"),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(a, b) => write!(f, "({a} ^ {b})"),
            Expr::Call(func, args) => {
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

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: &str) -> FemError {
        FemError::Parse {
            offset: self.pos,
            message: message.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                lhs = add(lhs, self.term()?);
            } else if self.eat(b'-') {
                lhs = sub(lhs, self.term()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(b'*') {
                lhs = mul(lhs, self.unary()?);
            } else if self.eat(b'/') {
                lhs = div(lhs, self.unary()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat(b'-') {
            return Ok(neg(self.unary()?));
        }
        if self.eat(b'+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.primary()?;
        if self.eat(b'^') {
            return Ok(pow(base, self.unary()?));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr> {
        match self.peek() {
            None => Err(self.error("unexpected end of input")),
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.error("expected ')'"));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.identifier(),
            Some(_) => Err(self.error("unexpected character")),
        }
    }

    fn number(&mut self) -> Result<Expr> {
        let start = self.pos;
        let s = self.src;
        let digits = |p: &mut usize| {
            while *p < s.len() && s[*p].is_ascii_digit() {
                *p += 1;
            }
        };
        digits(&mut self.pos);
        if self.pos < s.len() && s[self.pos] == b'.' {
            self.pos += 1;
            digits(&mut self.pos);
        }
        if self.pos < s.len() && (s[self.pos] == b'e' || s[self.pos] == b'E') {
            let mut p = self.pos + 1;
            if p < s.len() && (s[p] == b'+' || s[p] == b'-') {
                p += 1;
            }
            if p < s.len() && s[p].is_ascii_digit() {
                digits(&mut p);
                self.pos = p;
            }
        }
        let text = std::str::from_utf8(&s[start..self.pos]).expect("ascii");
        text.parse::<f64>().map(num).map_err(|_| FemError::Parse {
            offset: start,
            message: format!("malformed number '{text}'"),
        })
    }

    fn identifier(&mut self) -> Result<Expr> {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        match name {
            "x" => return Ok(Expr::Var(Var::X)),
            "y" => return Ok(Expr::Var(Var::Y)),
            "pi" => return Ok(num(std::f64::consts::PI)),
            "e" => return Ok(num(std::f64::consts::E)),
            _ => {}
        }
        let Some(func) = Func::lookup(name) else {
            return Err(FemError::Parse {
                offset: start,
                message: format!("unknown identifier '{name}'"),
            });
        };
        if !self.eat(b'(') {
            return Err(self.error(&format!("expected '(' after {name}")));
        }
        let mut args = vec![self.expr()?];
        while self.eat(b',') {
            args.push(self.expr()?);
        }
        if !self.eat(b')') {
            return Err(self.error("expected ')' or ','"));
        }
        if args.len() != func.arity() {
            return Err(FemError::Parse {
                offset: start,
                message: format!("{name} takes {} argument(s), got {}", func.arity(), args.len()),
            });
        }
        Ok(call(func, args))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn ev(s: &str, x: f64, y: f64) -> f64 {
        Expr::parse(s).unwrap().eval([x, y])
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("1 + 2 * 3", 0.0, 0.0), 7.0);
        assert_eq!(ev("2 ^ 3 ^ 2", 0.0, 0.0), 512.0);
        assert_eq!(ev("-2 ^ 2", 0.0, 0.0), -4.0);
        assert_eq!(ev("2 ^ -1", 0.0, 0.0), 0.5);
        assert_eq!(ev("8 / 2 / 2", 0.0, 0.0), 2.0);
        assert_eq!(ev("1 - 2 - 3", 0.0, 0.0), -4.0);
        assert_eq!(ev("(x + y) * 2", 1.0, 2.0), 6.0);
        assert_eq!(ev("1.5e1 + .5", 0.0, 0.0), 15.5);
        assert!(Expr::parse("2e").is_err());
        assert!((ev("2*e", 0.0, 0.0) - 2.0 * std::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn functions_and_constants() {
        assert!((ev("sin(pi/2)", 0.0, 0.0) - 1.0).abs() < 1e-15);
        assert!((ev("e", 0.0, 0.0) - std::f64::consts::E).abs() < 1e-15);
        assert_eq!(ev("step(x - 0.5)", 0.4, 0.0), 0.0);
        assert_eq!(ev("step(x - 0.5)", 0.5, 0.0), 1.0);
        assert_eq!(ev("min(x, y) + max(x, y)", 1.0, 3.0), 4.0);
        assert_eq!(ev("abs(-3) + sqrt(16)", 0.0, 0.0), 7.0);
        assert!((ev("log(exp(2))", 0.0, 0.0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn parse_errors_carry_offsets() {
        let cases = [("1 + ", 4), ("sin(x", 5), ("foo(x)", 0), ("1 $ 2", 2), ("(1", 2), ("max(1)", 0)];
        for (src, off) in cases {
            match Expr::parse(src) {
                Err(FemError::Parse { offset, .. }) => assert_eq!(offset, off, "{src}"),
                other => panic!("{src}: {other:?}"),
            }
        }
    }

    #[test]
    fn derivatives_match_closed_forms() {
        let u = Expr::parse("sin(pi*x)*sin(pi*y)*exp(x*y)").unwrap();
        let ux = u.diff(Var::X).unwrap();
        let uxy = ux.diff(Var::Y).unwrap();
        let (x, y) = (0.3, 0.7);
        let (s, c) = ((PI * x).sin(), (PI * x).cos());
        let (t, d) = ((PI * y).sin(), (PI * y).cos());
        let ex = (x * y).exp();
        let want_x = (PI * c * t + y * s * t) * ex;
        assert!((ux.eval([x, y]) - want_x).abs() < 1e-13);
        let want_xy = ex * (PI * PI * c * d + PI * x * c * t + t * s + y * PI * s * d + x * y * s * t);
        assert!((uxy.eval([x, y]) - want_xy).abs() < 1e-12);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let srcs = [
            "x^3*y - y^2/x",
            "sqrt(1 + x*x) * cos(y)",
            "x^y",
            "abs(x - 0.2) + min(x, y) * max(x, 2*y)",
            "log(1 + x + y) / (2 + sin(x))",
        ];
        let h = 1e-6;
        for src in srcs {
            let e = Expr::parse(src).unwrap();
            for var in [Var::X, Var::Y] {
                let d = e.diff(var).unwrap();
                let p = [0.63, 0.41];
                let (mut a, mut b) = (p, p);
                let k = if var == Var::X { 0 } else { 1 };
                a[k] += h;
                b[k] -= h;
                let fd = (e.eval(a) - e.eval(b)) / (2.0 * h);
                assert!((d.eval(p) - fd).abs() < 1e-7, "{src} {var:?}");
            }
        }
    }

    #[test]
    fn constants_fold() {
        let e = Expr::parse("2*3 + x*0 + cos(0)").unwrap();
        assert_eq!(e, Expr::Num(7.0));
        assert!(Expr::parse("x^2").unwrap().diff(Var::X).unwrap().diff(Var::X).unwrap().is_constant());
        let d = Expr::parse("3*x + 1").unwrap().diff(Var::X).unwrap();
        assert_eq!(d, Expr::Num(3.0));
    }

    #[test]
    fn display_round_trips() {
        for src in ["sin(pi*x)*sin(pi*y)", "-x^2 + 2/(1+y)", "max(x, -y) - 1e-3"] {
            let e = Expr::parse(src).unwrap();
            let again = Expr::parse(&e.to_string()).unwrap();
            for p in [[0.1, 0.2], [0.7, 0.9]] {
                assert_eq!(e.eval(p).to_bits(), again.eval(p).to_bits(), "{src}");
            }
        }
    }
}
