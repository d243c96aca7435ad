//! Lexer and Pratt parser for mean-function expressions.
//!
//! Grammar: numbers (with optional scientific exponent), identifiers,
//! binary + - * / ^ with standard precedence (^ right-associative and
//! binding tighter than unary minus), parentheses, and the single-argument
//! functions exp, log, sqrt, sinh, cosh, tanh. Identifiers must resolve
//! against the declared parameter and covariate lists.

use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("syntax error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown identifier `{name}` at position {pos}")]
    UnknownIdentifier { pos: usize, name: String },
    #[error("unknown function `{name}` at position {pos}")]
    UnknownFunction { pos: usize, name: String },
    #[error("function `{name}` at position {pos} takes exactly one argument")]
    Arity { pos: usize, name: String },
    #[error("name `{name}` is declared more than once across parameters and covariates")]
    DuplicateName { name: String },
    #[error("name `{name}` collides with a built-in function")]
    ReservedName { name: String },
    #[error("`{name}` is not a valid identifier")]
    InvalidName { name: String },
    #[error("a model needs at least one parameter")]
    NoParameters,
    #[error("model text is empty")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Func {
    Exp,
    Log,
    Sqrt,
    Sinh,
    Cosh,
    Tanh,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "sinh" => Func::Sinh,
            "cosh" => Func::Cosh,
            "tanh" => Func::Tanh,
            _ => return None,
        })
    }

    pub(crate) fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Sinh => "sinh",
            Func::Cosh => "cosh",
            Func::Tanh => "tanh",
        }
    }
}

pub(crate) fn is_function_name(name: &str) -> bool {
    Func::from_name(name).is_some()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    pub(crate) fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }
}

/// Expression tree. Parameters and covariates are stored by index into
/// the owning model's name lists.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Expr {
    Num(f64),
    Param(usize),
    Covar(usize),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
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

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn tokens(text: &'a str) -> Result<Vec<(usize, Tok)>, ParseError> {
        let mut lx = Lexer {
            src: text.as_bytes(),
            pos: 0,
        };
        let mut out = Vec::new();
        while let Some(t) = lx.next_token()? {
            out.push(t);
        }
        Ok(out)
    }

    fn next_token(&mut self) -> Result<Option<(usize, Tok)>, ParseError> {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if self.pos >= self.src.len() {
            return Ok(None);
        }
        let start = self.pos;
        let c = self.src[self.pos];
        let tok = match c {
            b'+' => {
                self.pos += 1;
                Tok::Plus
            }
            b'-' => {
                self.pos += 1;
                Tok::Minus
            }
            b'*' => {
                self.pos += 1;
                Tok::Star
            }
            b'/' => {
                self.pos += 1;
                Tok::Slash
            }
            b'^' => {
                self.pos += 1;
                Tok::Caret
            }
            b'(' => {
                self.pos += 1;
                Tok::LParen
            }
            b')' => {
                self.pos += 1;
                Tok::RParen
            }
            b'0'..=b'9' | b'.' => self.lex_number(start)?,
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while self.pos < self.src.len()
                    && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
                {
                    self.pos += 1;
                }
                let name = std::str::from_utf8(&self.src[start..self.pos])
                    .expect("identifier bytes are ascii")
                    .to_owned();
                Tok::Ident(name)
            }
            other => {
                return Err(ParseError::Syntax {
                    pos: start,
                    msg: format!("unexpected character `{}`", other as char),
                })
            }
        };
        Ok(Some((start, tok)))
    }

    fn lex_number(&mut self, start: usize) -> Result<Tok, ParseError> {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos < self.src.len() && self.src[self.pos] == b'.' {
            self.pos += 1;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
        }
        if self.pos < self.src.len() && (self.src[self.pos] | 0x20) == b'e' {
            let mark = self.pos;
            self.pos += 1;
            if self.pos < self.src.len() && (self.src[self.pos] == b'+' || self.src[self.pos] == b'-')
            {
                self.pos += 1;
            }
            if self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            } else {
                // not an exponent after all (e.g. "2*exp(x)" split wrongly)
                self.pos = mark;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("number bytes are ascii");
        text.parse::<f64>().map(Tok::Num).map_err(|_| ParseError::Syntax {
            pos: start,
            msg: format!("malformed number `{text}`"),
        })
    }
}

/// How identifiers are resolved during a parse.
pub(crate) enum Resolver<'a> {
    /// Both lists declared up front; anything else is an error.
    Declared {
        params: &'a [String],
        covariates: &'a [String],
    },
    /// Parameters declared; any other identifier becomes a covariate in
    /// order of first appearance (used by the CLI, which learns covariate
    /// names from the model text and then looks them up in the CSV header).
    InferCovariates {
        params: &'a [String],
        covariates: &'a mut Vec<String>,
    },
}

impl Resolver<'_> {
    fn resolve(&mut self, pos: usize, name: &str) -> Result<Expr, ParseError> {
        let params = match self {
            Resolver::Declared { params, .. } => params,
            Resolver::InferCovariates { params, .. } => params,
        };
        if let Some(i) = params.iter().position(|p| p == name) {
            return Ok(Expr::Param(i));
        }
        match self {
            Resolver::Declared { covariates, .. } => covariates
                .iter()
                .position(|c| c == name)
                .map(|i| Ok(Expr::Covar(i)))
                .unwrap_or_else(|| {
                    Err(ParseError::UnknownIdentifier {
                        pos,
                        name: name.to_owned(),
                    })
                }),
            Resolver::InferCovariates { covariates, .. } => {
                let i = match covariates.iter().position(|c| c == name) {
                    Some(i) => i,
                    None => {
                        covariates.push(name.to_owned());
                        covariates.len() - 1
                    }
                };
                Ok(Expr::Covar(i))
            }
        }
    }
}

struct Parser<'a, 'r> {
    toks: &'a [(usize, Tok)],
    i: usize,
    end: usize,
    resolver: &'a mut Resolver<'r>,
}

pub(crate) fn parse(text: &str, resolver: &mut Resolver) -> Result<Expr, ParseError> {
    if text.trim().is_empty() {
        return Err(ParseError::Empty);
    }
    let toks = Lexer::tokens(text)?;
    let mut p = Parser {
        toks: &toks,
        i: 0,
        end: text.len(),
        resolver,
    };
    let expr = p.expr(0)?;
    if p.i < p.toks.len() {
        return Err(ParseError::Syntax {
            pos: p.toks[p.i].0,
            msg: "unexpected trailing input".into(),
        });
    }
    Ok(expr)
}

impl Parser<'_, '_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.i).map(|(_, t)| t)
    }

    fn bump(&mut self) -> Option<(usize, Tok)> {
        let t = self.toks.get(self.i).cloned();
        self.i += 1;
        t
    }

    fn expect_rparen(&mut self, open_pos: usize) -> Result<(), ParseError> {
        match self.bump() {
            Some((_, Tok::RParen)) => Ok(()),
            Some((pos, _)) => Err(ParseError::Syntax {
                pos,
                msg: "expected `)`".into(),
            }),
            None => Err(ParseError::Syntax {
                pos: open_pos,
                msg: "unclosed `(`".into(),
            }),
        }
    }

    fn expr(&mut self, min_bp: u8) -> Result<Expr, ParseError> {
        let mut lhs = self.atom()?;
        loop {
            let (op, lbp, rbp) = match self.peek() {
                Some(Tok::Plus) => (BinOp::Add, 1, 2),
                Some(Tok::Minus) => (BinOp::Sub, 1, 2),
                Some(Tok::Star) => (BinOp::Mul, 3, 4),
                Some(Tok::Slash) => (BinOp::Div, 3, 4),
                Some(Tok::Caret) => (BinOp::Pow, 8, 7), // right-associative
                _ => break,
            };
            if lbp < min_bp {
                break;
            }
            self.bump();
            let rhs = self.expr(rbp)?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        match self.bump() {
            Some((_, Tok::Num(v))) => Ok(Expr::Num(v)),
            Some((pos, Tok::Ident(name))) => {
                if matches!(self.peek(), Some(Tok::LParen)) {
                    let func = Func::from_name(&name).ok_or(ParseError::UnknownFunction {
                        pos,
                        name: name.clone(),
                    })?;
                    let (open_pos, _) = self.bump().expect("peeked LParen");
                    if matches!(self.peek(), Some(Tok::RParen)) {
                        return Err(ParseError::Arity { pos, name });
                    }
                    let arg = self.expr(0)?;
                    self.expect_rparen(open_pos)?;
                    Ok(Expr::Call(func, Box::new(arg)))
                } else {
                    self.resolver.resolve(pos, &name)
                }
            }
            // unary minus binds tighter than * but looser than ^,
            // so -a^b parses as -(a^b)
            Some((_, Tok::Minus)) => Ok(Expr::Neg(Box::new(self.expr(6)?))),
            Some((pos, Tok::LParen)) => {
                let inner = self.expr(0)?;
                self.expect_rparen(pos)?;
                Ok(inner)
            }
            Some((pos, t)) => Err(ParseError::Syntax {
                pos,
                msg: format!("unexpected token `{t:?}`"),
            }),
            None => Err(ParseError::Syntax {
                pos: self.end,
                msg: "unexpected end of input".into(),
            }),
        }
    }
}

/// Fully parenthesized canonical form. Reparsing the output reproduces
/// the tree exactly; numeric literals print with enough digits to
/// round-trip bitwise.
pub(crate) struct DisplayExpr<'a> {
    pub expr: &'a Expr,
    pub params: &'a [String],
    pub covariates: &'a [String],
}

impl fmt::Display for DisplayExpr<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_expr(f, self.expr, self.params, self.covariates)
    }
}

fn write_expr(
    f: &mut fmt::Formatter<'_>,
    e: &Expr,
    params: &[String],
    covars: &[String],
) -> fmt::Result {
    match e {
        Expr::Num(v) => write!(f, "{v}"),
        Expr::Param(i) => f.write_str(&params[*i]),
        Expr::Covar(i) => f.write_str(&covars[*i]),
        Expr::Neg(inner) => {
            f.write_str("(-")?;
            write_expr(f, inner, params, covars)?;
            f.write_str(")")
        }
        Expr::Bin(op, l, r) => {
            f.write_str("(")?;
            write_expr(f, l, params, covars)?;
            write!(f, " {} ", op.symbol())?;
            write_expr(f, r, params, covars)?;
            f.write_str(")")
        }
        Expr::Call(func, arg) => {
            write!(f, "{}(", func.name())?;
            write_expr(f, arg, params, covars)?;
            f.write_str(")")
        }
    }
}

pub(crate) fn contains_param(e: &Expr) -> bool {
    match e {
        Expr::Num(_) | Expr::Covar(_) => false,
        Expr::Param(_) => true,
        Expr::Neg(inner) => contains_param(inner),
        Expr::Bin(_, l, r) => contains_param(l) || contains_param(r),
        Expr::Call(_, arg) => contains_param(arg),
    }
}

/// Structural classification used to decide whether OLS can supply
/// starting values: an expression is affine when it is a sum of terms,
/// each either parameter-free or of the form (parameter × parameter-free
/// factor), with no parameter inside a nonlinear function, product of
/// parameters, denominator, or exponent.
pub(crate) fn is_affine_in_params(e: &Expr) -> bool {
    classify(e) != Shape::Nonlinear
}

#[derive(PartialEq, Clone, Copy)]
enum Shape {
    Const,
    Affine,
    Nonlinear,
}

fn classify(e: &Expr) -> Shape {
    match e {
        Expr::Num(_) | Expr::Covar(_) => Shape::Const,
        Expr::Param(_) => Shape::Affine,
        Expr::Neg(inner) => classify(inner),
        Expr::Bin(BinOp::Add, l, r) | Expr::Bin(BinOp::Sub, l, r) => {
            match (classify(l), classify(r)) {
                (Shape::Nonlinear, _) | (_, Shape::Nonlinear) => Shape::Nonlinear,
                (Shape::Const, Shape::Const) => Shape::Const,
                _ => Shape::Affine,
            }
        }
        Expr::Bin(BinOp::Mul, l, r) => match (classify(l), classify(r)) {
            (Shape::Const, Shape::Const) => Shape::Const,
            (Shape::Affine, Shape::Const) | (Shape::Const, Shape::Affine) => Shape::Affine,
            _ => Shape::Nonlinear,
        },
        Expr::Bin(BinOp::Div, l, r) => match (classify(l), classify(r)) {
            (Shape::Const, Shape::Const) => Shape::Const,
            (Shape::Affine, Shape::Const) => Shape::Affine,
            _ => Shape::Nonlinear,
        },
        Expr::Bin(BinOp::Pow, l, r) => {
            if classify(l) == Shape::Const && classify(r) == Shape::Const {
                Shape::Const
            } else {
                Shape::Nonlinear
            }
        }
        Expr::Call(_, arg) => {
            if classify(arg) == Shape::Const {
                Shape::Const
            } else {
                Shape::Nonlinear
            }
        }
    }
}
