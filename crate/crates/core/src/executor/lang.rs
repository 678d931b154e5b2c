//! The reference module language: a single pure expression over the window
//! `xs` and parameters `p_<key>`.
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?
//! primary := number | ident | ident '(' [expr (',' expr)*] ')' | '(' expr ')'
//! ```
//!
//! `^` binds tighter than unary minus and is right associative, so `-2^2`
//! is `-4` and `2^3^2` is `512`. `#` starts a comment that runs to the end of
//! the line.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Maximum nesting depth accepted by the parser. Each operator in a chain
/// such as `a + b + c` counts as one level.
pub const MAX_DEPTH: usize = 256;

/// 1-based source position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pos {
    pub line: u32,
    pub column: u32,
}

impl Pos {
    pub const START: Pos = Pos { line: 1, column: 1 };
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub line: u32,
    pub column: u32,
    pub message: String,
}

impl Diagnostic {
    pub fn at(pos: Pos, message: impl Into<String>) -> Self {
        Self {
            line: pos.line,
            column: pos.column,
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.line, self.column, self.message)
    }
}

/// Whitelisted functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Mean,
    Median,
    Sum,
    Count,
    Min,
    Max,
    Sd,
    Abs,
    Sqrt,
    First,
    Last,
}

impl Func {
    fn lookup(name: &str) -> Option<Func> {
        Some(match name {
            "mean" => Func::Mean,
            "median" => Func::Median,
            "sum" => Func::Sum,
            "count" => Func::Count,
            "min" => Func::Min,
            "max" => Func::Max,
            "sd" => Func::Sd,
            "abs" => Func::Abs,
            "sqrt" => Func::Sqrt,
            "first" => Func::First,
            "last" => Func::Last,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Mean => "mean",
            Func::Median => "median",
            Func::Sum => "sum",
            Func::Count => "count",
            Func::Min => "min",
            Func::Max => "max",
            Func::Sd => "sd",
            Func::Abs => "abs",
            Func::Sqrt => "sqrt",
            Func::First => "first",
            Func::Last => "last",
        }
    }

    /// Scalar functions take exactly one number; the rest reduce a list.
    pub fn is_scalar(self) -> bool {
        matches!(self, Func::Abs | Func::Sqrt)
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

impl BinOp {
    pub fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExprKind {
    Num(f64),
    Window,
    Param(String),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    pub kind: ExprKind,
    pub pos: Pos,
}

/// A parsed module that passed the static checks.
#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub root: Expr,
}

impl Program {
    /// Parses and statically checks `code`, returning every diagnostic found.
    pub fn parse(code: &str) -> Result<Program, Vec<Diagnostic>> {
        let tokens = lex(code).map_err(|d| vec![d])?;
        let mut parser = Parser {
            tokens,
            at: 0,
            depth: 0,
            diagnostics: Vec::new(),
        };
        let root = parser.parse_program().map_err(|d| vec![d])?;
        if parser.diagnostics.is_empty() {
            Ok(Program { root })
        } else {
            Err(parser.diagnostics)
        }
    }

    /// Parameter keys referenced as `p_<key>`, in first-use order.
    pub fn param_keys(&self) -> Vec<String> {
        fn walk(e: &Expr, out: &mut Vec<String>) {
            match &e.kind {
                ExprKind::Param(k) => {
                    if !out.contains(k) {
                        out.push(k.clone());
                    }
                }
                ExprKind::Neg(inner) => walk(inner, out),
                ExprKind::Binary(_, l, r) => {
                    walk(l, out);
                    walk(r, out);
                }
                ExprKind::Call(_, args) => args.iter().for_each(|a| walk(a, out)),
                ExprKind::Num(_) | ExprKind::Window => {}
            }
        }
        let mut out = Vec::new();
        walk(&self.root, &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Num(n) => write!(f, "number {n}"),
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Op(c) => write!(f, "`{c}`"),
            Tok::LParen => f.write_str("`(`"),
            Tok::RParen => f.write_str("`)`"),
            Tok::Comma => f.write_str("`,`"),
            Tok::Eof => f.write_str("end of input"),
        }
    }
}

fn lex(code: &str) -> Result<Vec<(Tok, Pos)>, Diagnostic> {
    let chars: Vec<char> = code.chars().collect();
    let mut tokens = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1u32, 1u32);
    while i < chars.len() {
        let c = chars[i];
        let pos = Pos { line, column: col };
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c == '#' {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        let tok = if c.is_ascii_digit()
            || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit()))
        {
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
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
            let text: String = chars[start..i].iter().collect();
            match text.parse::<f64>() {
                Ok(n) if n.is_finite() => Tok::Num(n),
                _ => return Err(Diagnostic::at(pos, format!("invalid number `{text}`"))),
            }
        } else if c.is_ascii_alphabetic() || c == '_' {
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            Tok::Ident(chars[start..i].iter().collect())
        } else {
            i += 1;
            match c {
                '+' | '-' | '*' | '/' | '^' => Tok::Op(c),
                '(' => Tok::LParen,
                ')' => Tok::RParen,
                ',' => Tok::Comma,
                _ => return Err(Diagnostic::at(pos, format!("unexpected character `{c}`"))),
            }
        };
        col += (i - start) as u32;
        tokens.push((tok, pos));
    }
    tokens.push((Tok::Eof, Pos { line, column: col }));
    Ok(tokens)
}

struct Parser {
    tokens: Vec<(Tok, Pos)>,
    at: usize,
    depth: usize,
    /// Non-fatal findings (unknown names, arity); syntax errors abort instead.
    diagnostics: Vec<Diagnostic>,
}

type PResult<T> = Result<T, Diagnostic>;

impl Parser {
    fn peek(&self) -> &(Tok, Pos) {
        &self.tokens[self.at]
    }

    fn bump(&mut self) -> (Tok, Pos) {
        let t = self.tokens[self.at].clone();
        if self.at + 1 < self.tokens.len() {
            self.at += 1;
        }
        t
    }

    fn parse_program(&mut self) -> PResult<Expr> {
        if self.peek().0 == Tok::Eof {
            return Err(Diagnostic::at(
                self.peek().1,
                "empty module: expected an expression",
            ));
        }
        let e = self.expr()?;
        let (tok, pos) = self.peek().clone();
        if tok != Tok::Eof {
            return Err(Diagnostic::at(
                pos,
                format!("unexpected {tok} after expression"),
            ));
        }
        Ok(e)
    }

    fn enter(&mut self, pos: Pos) -> PResult<()> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            Err(Diagnostic::at(
                pos,
                format!("expression nested deeper than {MAX_DEPTH} levels"),
            ))
        } else {
            Ok(())
        }
    }

    fn expr(&mut self) -> PResult<Expr> {
        let mut lhs = self.term()?;
        let base = self.depth;
        while let (Tok::Op(c @ ('+' | '-')), pos) = self.peek().clone() {
            self.bump();
            self.enter(pos)?;
            let rhs = self.term()?;
            let op = if c == '+' { BinOp::Add } else { BinOp::Sub };
            lhs = Expr {
                kind: ExprKind::Binary(op, Box::new(lhs), Box::new(rhs)),
                pos,
            };
        }
        self.depth = base;
        Ok(lhs)
    }

    fn term(&mut self) -> PResult<Expr> {
        let mut lhs = self.unary()?;
        let base = self.depth;
        while let (Tok::Op(c @ ('*' | '/')), pos) = self.peek().clone() {
            self.bump();
            self.enter(pos)?;
            let rhs = self.unary()?;
            let op = if c == '*' { BinOp::Mul } else { BinOp::Div };
            lhs = Expr {
                kind: ExprKind::Binary(op, Box::new(lhs), Box::new(rhs)),
                pos,
            };
        }
        self.depth = base;
        Ok(lhs)
    }

    fn unary(&mut self) -> PResult<Expr> {
        let pos = self.peek().1;
        self.enter(pos)?;
        let out = if self.peek().0 == Tok::Op('-') {
            self.bump();
            let inner = self.unary()?;
            Expr {
                kind: ExprKind::Neg(Box::new(inner)),
                pos,
            }
        } else {
            self.power()?
        };
        self.depth -= 1;
        Ok(out)
    }

    fn power(&mut self) -> PResult<Expr> {
        let base = self.primary()?;
        if let (Tok::Op('^'), pos) = self.peek().clone() {
            self.bump();
            let exp = self.unary()?;
            return Ok(Expr {
                kind: ExprKind::Binary(BinOp::Pow, Box::new(base), Box::new(exp)),
                pos,
            });
        }
        Ok(base)
    }

    fn primary(&mut self) -> PResult<Expr> {
        let (tok, pos) = self.bump();
        match tok {
            Tok::Num(n) => Ok(Expr {
                kind: ExprKind::Num(n),
                pos,
            }),
            Tok::LParen => {
                self.enter(pos)?;
                let inner = self.expr()?;
                self.expect(Tok::RParen, "`)` to close `(`")?;
                self.depth -= 1;
                Ok(inner)
            }
            Tok::Ident(name) if self.peek().0 == Tok::LParen => {
                self.bump();
                self.enter(pos)?;
                let mut args = Vec::new();
                if self.peek().0 != Tok::RParen {
                    loop {
                        args.push(self.expr()?);
                        if self.peek().0 == Tok::Comma {
                            self.bump();
                        } else {
                            break;
                        }
                    }
                }
                self.expect(Tok::RParen, "`,` or `)` in argument list")?;
                self.depth -= 1;
                let Some(func) = Func::lookup(&name) else {
                    self.diagnostics
                        .push(Diagnostic::at(pos, format!("unknown function {name}")));
                    return Ok(Expr {
                        kind: ExprKind::Num(0.0),
                        pos,
                    });
                };
                if func.is_scalar() && args.len() != 1 {
                    self.diagnostics.push(Diagnostic::at(
                        pos,
                        format!(
                            "{} takes exactly 1 argument, got {}",
                            func.name(),
                            args.len()
                        ),
                    ));
                } else if args.is_empty() {
                    self.diagnostics.push(Diagnostic::at(
                        pos,
                        format!("{} needs at least 1 argument", func.name()),
                    ));
                }
                Ok(Expr {
                    kind: ExprKind::Call(func, args),
                    pos,
                })
            }
            Tok::Ident(name) => {
                if name == "xs" {
                    Ok(Expr {
                        kind: ExprKind::Window,
                        pos,
                    })
                } else if let Some(key) = name.strip_prefix("p_").filter(|k| !k.is_empty()) {
                    Ok(Expr {
                        kind: ExprKind::Param(key.to_owned()),
                        pos,
                    })
                } else {
                    self.diagnostics
                        .push(Diagnostic::at(pos, format!("unknown identifier {name}")));
                    Ok(Expr {
                        kind: ExprKind::Num(0.0),
                        pos,
                    })
                }
            }
            other => Err(Diagnostic::at(
                pos,
                format!("expected an expression, found {other}"),
            )),
        }
    }

    fn expect(&mut self, want: Tok, what: &str) -> PResult<()> {
        let (tok, pos) = self.peek().clone();
        if tok == want {
            self.bump();
            Ok(())
        } else {
            Err(Diagnostic::at(pos, format!("expected {what}, found {tok}")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn messages(code: &str) -> Vec<String> {
        Program::parse(code)
            .unwrap_err()
            .into_iter()
            .map(|d| d.message)
            .collect()
    }

    #[test]
    fn parses_precedence() {
        let p = Program::parse("1 + 2 * 3").unwrap();
        assert!(matches!(p.root.kind, ExprKind::Binary(BinOp::Add, _, _)));
        let p = Program::parse("-2^2").unwrap();
        assert!(matches!(p.root.kind, ExprKind::Neg(_)));
    }

    #[test]
    fn unknown_identifier() {
        assert_eq!(messages("mean(ys)"), ["unknown identifier ys"]);
    }

    #[test]
    fn reports_all_unknown_names() {
        let d = Program::parse("foo(xs) + bar + p_").unwrap_err();
        let msgs: Vec<_> = d.iter().map(|d| d.message.as_str()).collect();
        assert_eq!(
            msgs,
            [
                "unknown function foo",
                "unknown identifier bar",
                "unknown identifier p_"
            ]
        );
        assert_eq!((d[1].line, d[1].column), (1, 11));
    }

    #[test]
    fn positions_span_lines() {
        let d = Program::parse("# comment\nmean(xs) +\n  zz").unwrap_err();
        assert_eq!((d[0].line, d[0].column), (3, 3));
    }

    #[test]
    fn syntax_errors() {
        assert!(messages("mean(xs")[0].contains("expected"));
        assert!(messages("1 +")[0].contains("expected an expression"));
        assert!(messages("1 2")[0].contains("unexpected"));
        assert!(messages("")[0].contains("empty module"));
        assert!(messages("1 $ 2")[0].contains("unexpected character"));
        assert!(messages("sqrt(1, 2)")[0].contains("exactly 1 argument"));
        assert!(messages("sum()")[0].contains("at least 1 argument"));
    }

    #[test]
    fn deep_nesting_is_a_diagnostic_not_a_crash() {
        let code = format!("{}1{}", "(".repeat(10_000), ")".repeat(10_000));
        assert!(messages(&code)[0].contains("nested deeper"));
        let code = format!("{}1", "-".repeat(10_000));
        assert!(messages(&code)[0].contains("nested deeper"));
        let code = vec!["1"; 10_000].join("+");
        assert!(messages(&code)[0].contains("nested deeper"));
        assert!(Program::parse(
            &vec!["xs"; 100]
                .iter()
                .map(|x| format!("sum({x})"))
                .collect::<Vec<_>>()
                .join("+")
        )
        .is_ok());
    }

    #[test]
    fn param_keys_in_order() {
        let p = Program::parse("p_b + p_a * p_b").unwrap();
        assert_eq!(p.param_keys(), ["b", "a"]);
    }

    #[test]
    fn numbers() {
        for (src, v) in [("1.5e2", 150.0), (".5", 0.5), ("2E-1", 0.2), ("7", 7.0)] {
            assert_eq!(
                Program::parse(src).unwrap().root.kind,
                ExprKind::Num(v),
                "{src}"
            );
        }
        assert!(Program::parse("1.2.3").is_err());
    }
}
