//! Restricted arithmetic programs.
//!
//! Generated QA pairs carry a short Python snippet that computes the answer.
//! Rather than executing arbitrary code, programs are parsed into a small
//! grammar and evaluated here:
//!
//! ```text
//! program := statement ((NEWLINE | ';') statement)*
//! statement := IDENT '=' expr | expr
//! expr := term (('+' | '-') term)*
//! term := unary (('*' | '/') unary)*
//! unary := ('-' | '+') unary | primary
//! primary := NUMBER | IDENT | IDENT '(' args ')' | '(' expr ')'
//! ```
//!
//! Calls are limited to `round`, `abs`, `min`, `max` and `print` (identity).
//! Comments (`#`) and line breaks inside parentheses are allowed. Anything
//! else is rejected as [`ProgramError::SyntaxUnsupported`].

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProgramError {
    #[error("unsupported syntax at line {line}: {message}")]
    SyntaxUnsupported { line: usize, message: String },
    #[error("undefined identifier `{0}`")]
    UndefinedIdentifier(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("result is not a finite number")]
    NonFinite,
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
    Round,
    Abs,
    Min,
    Max,
    Print,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Number { value: f64, literal: String },
    Ident(String),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Statement {
    Assign(String, Expr),
    Expr(Expr),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub statements: Vec<Statement>,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64, String),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
    Assign,
    End,
}

const RESERVED: &[&str] = &[
    "import", "from", "def", "class", "return", "if", "else", "elif", "for", "while", "lambda", "with", "try",
    "except", "raise", "yield", "global", "nonlocal", "del", "pass", "assert", "async", "await", "and", "or",
    "not", "in", "is", "True", "False", "None", "exec", "eval", "open", "__import__",
];

fn unsupported(line: usize, message: impl Into<String>) -> ProgramError {
    ProgramError::SyntaxUnsupported {
        line,
        message: message.into(),
    }
}

fn lex(source: &str) -> Result<Vec<(Tok, usize)>, ProgramError> {
    let chars: Vec<char> = source.chars().collect();
    let mut toks = Vec::new();
    let mut i = 0;
    let mut line = 1;
    let mut depth = 0usize;
    while i < chars.len() {
        let c = chars[i];
        match c {
            '#' => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
            }
            '\n' | ';' => {
                if depth == 0 {
                    toks.push((Tok::End, line));
                }
                if c == '\n' {
                    line += 1;
                }
                i += 1;
            }
            '\\' if chars.get(i + 1) == Some(&'\n') => {
                line += 1;
                i += 2;
            }
            c if c.is_whitespace() => i += 1,
            '0'..='9' | '.' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.' || chars[i] == '_') {
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
                let literal: String = chars[start..i].iter().collect();
                let cleaned = literal.replace('_', "");
                let value: f64 = cleaned
                    .parse()
                    .map_err(|_| unsupported(line, format!("malformed number {literal:?}")))?;
                if i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    return Err(unsupported(line, format!("unexpected character after number {literal:?}")));
                }
                toks.push((Tok::Num(value, cleaned), line));
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let name: String = chars[start..i].iter().collect();
                if RESERVED.contains(&name.as_str()) {
                    return Err(unsupported(line, format!("`{name}` is not allowed")));
                }
                toks.push((Tok::Ident(name), line));
            }
            '+' | '-' | '*' | '/' => {
                let next = chars.get(i + 1).copied();
                if (c == '*' && next == Some('*')) || (c == '/' && next == Some('/')) {
                    return Err(unsupported(line, format!("operator `{c}{c}` is not supported")));
                }
                if next == Some('=') {
                    return Err(unsupported(line, "augmented assignment is not supported"));
                }
                toks.push((Tok::Op(c), line));
                i += 1;
            }
            '(' => {
                depth += 1;
                toks.push((Tok::LParen, line));
                i += 1;
            }
            ')' => {
                depth = depth.saturating_sub(1);
                toks.push((Tok::RParen, line));
                i += 1;
            }
            ',' => {
                toks.push((Tok::Comma, line));
                i += 1;
            }
            '=' => {
                if chars.get(i + 1) == Some(&'=') {
                    return Err(unsupported(line, "comparison is not supported"));
                }
                toks.push((Tok::Assign, line));
                i += 1;
            }
            other => return Err(unsupported(line, format!("unexpected character {other:?}"))),
        }
    }
    toks.push((Tok::End, line));
    Ok(toks)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn line(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].0.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn at_eof(&self) -> bool {
        self.pos + 1 >= self.toks.len()
    }

    fn program(&mut self) -> Result<Program, ProgramError> {
        let mut statements = Vec::new();
        loop {
            while *self.peek() == Tok::End && !self.at_eof() {
                self.bump();
            }
            if self.at_eof() {
                break;
            }
            statements.push(self.statement()?);
            match self.peek() {
                Tok::End => {}
                other => return Err(unsupported(self.line(), format!("unexpected token {other:?}"))),
            }
        }
        if statements.is_empty() {
            return Err(unsupported(1, "empty program"));
        }
        Ok(Program { statements })
    }

    fn statement(&mut self) -> Result<Statement, ProgramError> {
        if let Tok::Ident(name) = self.peek().clone() {
            if self.toks.get(self.pos + 1).map(|t| &t.0) == Some(&Tok::Assign) {
                self.bump();
                self.bump();
                return Ok(Statement::Assign(name, self.expr()?));
            }
        }
        Ok(Statement::Expr(self.expr()?))
    }

    fn expr(&mut self) -> Result<Expr, ProgramError> {
        let mut lhs = self.term()?;
        while let Tok::Op(c @ ('+' | '-')) = *self.peek() {
            self.bump();
            let rhs = self.term()?;
            let op = if c == '+' { BinOp::Add } else { BinOp::Sub };
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ProgramError> {
        let mut lhs = self.unary()?;
        while let Tok::Op(c @ ('*' | '/')) = *self.peek() {
            self.bump();
            let rhs = self.unary()?;
            let op = if c == '*' { BinOp::Mul } else { BinOp::Div };
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ProgramError> {
        match self.peek() {
            Tok::Op('-') => {
                self.bump();
                Ok(Expr::Neg(Box::new(self.unary()?)))
            }
            Tok::Op('+') => {
                self.bump();
                self.unary()
            }
            _ => self.primary(),
        }
    }

    fn primary(&mut self) -> Result<Expr, ProgramError> {
        let line = self.line();
        match self.bump() {
            Tok::Num(value, literal) => Ok(Expr::Number { value, literal }),
            Tok::Ident(name) => {
                if *self.peek() != Tok::LParen {
                    return Ok(Expr::Ident(name));
                }
                let func = match name.as_str() {
                    "round" => Func::Round,
                    "abs" => Func::Abs,
                    "min" => Func::Min,
                    "max" => Func::Max,
                    "print" => Func::Print,
                    other => return Err(unsupported(line, format!("call to `{other}` is not supported"))),
                };
                self.bump();
                let mut args = Vec::new();
                if *self.peek() != Tok::RParen {
                    loop {
                        args.push(self.expr()?);
                        match self.bump() {
                            Tok::Comma => continue,
                            Tok::RParen => break,
                            other => return Err(unsupported(line, format!("expected `,` or `)`, found {other:?}"))),
                        }
                    }
                } else {
                    self.bump();
                }
                let arity_ok = match func {
                    Func::Round => (1..=2).contains(&args.len()),
                    Func::Abs | Func::Print => args.len() == 1,
                    Func::Min | Func::Max => !args.is_empty(),
                };
                if !arity_ok {
                    return Err(unsupported(line, format!("wrong number of arguments to `{name}`")));
                }
                if func == Func::Round && args.len() == 2 && !matches!(args[1], Expr::Number { .. }) {
                    return Err(unsupported(line, "round() digits must be a literal"));
                }
                Ok(Expr::Call(func, args))
            }
            Tok::LParen => {
                let e = self.expr()?;
                match self.bump() {
                    Tok::RParen => Ok(e),
                    other => Err(unsupported(line, format!("expected `)`, found {other:?}"))),
                }
            }
            other => Err(unsupported(line, format!("unexpected token {other:?}"))),
        }
    }
}

pub fn parse_program(source: &str) -> Result<Program, ProgramError> {
    let toks = lex(source)?;
    Parser { toks, pos: 0 }.program()
}

/// Rounds half away from zero at `digits` decimals.
///
/// Values within a relative 1e-9 of a half step are treated as exact halves,
/// so `1.005` rounds to `1.01` despite its binary representation.
pub fn round_half_away(x: f64, digits: i32) -> f64 {
    if !x.is_finite() {
        return x;
    }
    let scale = 10f64.powi(digits);
    let scaled = x.abs() * scale;
    let floor = scaled.floor();
    let frac = scaled - floor;
    let rounded = if (frac - 0.5).abs() <= 1e-9 * scaled.max(1.0) || frac > 0.5 {
        floor + 1.0
    } else {
        floor
    };
    (rounded / scale).copysign(x)
}

fn eval_expr(e: &Expr, env: &BTreeMap<String, f64>) -> Result<f64, ProgramError> {
    let v = match e {
        Expr::Number { value, .. } => *value,
        Expr::Ident(name) => *env
            .get(name)
            .ok_or_else(|| ProgramError::UndefinedIdentifier(name.clone()))?,
        Expr::Neg(inner) => -eval_expr(inner, env)?,
        Expr::Binary(op, l, r) => {
            let a = eval_expr(l, env)?;
            let b = eval_expr(r, env)?;
            match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::Div => {
                    if b == 0.0 {
                        return Err(ProgramError::DivisionByZero);
                    }
                    a / b
                }
            }
        }
        Expr::Call(func, args) => {
            let vals = args.iter().map(|a| eval_expr(a, env)).collect::<Result<Vec<_>, _>>()?;
            match func {
                Func::Round => round_half_away(vals[0], vals.get(1).map(|d| *d as i32).unwrap_or(0)),
                Func::Abs => vals[0].abs(),
                Func::Min => vals.iter().copied().fold(f64::INFINITY, f64::min),
                Func::Max => vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                Func::Print => vals[0],
            }
        }
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ProgramError::NonFinite)
    }
}

impl Program {
    /// Value of the last statement, before final rounding.
    pub fn evaluate_raw(&self) -> Result<f64, ProgramError> {
        let mut env = BTreeMap::new();
        let mut last = None;
        for stmt in &self.statements {
            match stmt {
                Statement::Assign(name, e) => {
                    let v = eval_expr(e, &env)?;
                    env.insert(name.clone(), v);
                    last = Some(v);
                }
                Statement::Expr(e) => last = Some(eval_expr(e, &env)?),
            }
        }
        last.ok_or(ProgramError::NonFinite)
    }

    /// Numeric literals that stand for data, in source order. The digit
    /// argument of `round` is excluded.
    pub fn operand_literals(&self) -> Vec<String> {
        fn walk(e: &Expr, out: &mut Vec<String>) {
            match e {
                Expr::Number { literal, .. } => out.push(literal.clone()),
                Expr::Ident(_) => {}
                Expr::Neg(inner) => walk(inner, out),
                Expr::Binary(_, l, r) => {
                    walk(l, out);
                    walk(r, out);
                }
                Expr::Call(Func::Round, args) => walk(&args[0], out),
                Expr::Call(_, args) => args.iter().for_each(|a| walk(a, out)),
            }
        }
        let mut out = Vec::new();
        for s in &self.statements {
            match s {
                Statement::Assign(_, e) | Statement::Expr(e) => walk(e, &mut out),
            }
        }
        out
    }
}

/// Final program value, rounded half away from zero to two decimals.
pub fn eval_program(program: &Program) -> Result<f64, ProgramError> {
    Ok(round_half_away(program.evaluate_raw()?, 2))
}
