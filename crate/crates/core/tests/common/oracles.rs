//! Independent reference implementations used to cross-check the crate.
//!
//! Nothing here calls into the code under test: programs are generated as
//! trees, rendered to source and evaluated directly; sparse scores are
//! computed by brute force from raw token lists.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::Rng;

// ---------------------------------------------------------------------------
// Arithmetic programs

#[derive(Debug, Clone)]
pub enum Node {
    Lit(String),
    Var(String),
    Neg(Box<Node>),
    Bin(char, Box<Node>, Box<Node>),
    Abs(Box<Node>),
    Min(Vec<Node>),
    Max(Vec<Node>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum OracleError {
    DivisionByZero,
    NonFinite,
}

#[derive(Debug, Clone)]
pub struct GenProgram {
    /// `(Some(name), expr)` is an assignment, `(None, expr)` a bare expression.
    pub statements: Vec<(Option<String>, Node)>,
}

const VAR_NAMES: [&str; 8] = ["a", "b", "rev", "cogs", "ebitda_2023", "total_assets", "x1", "debt"];

fn literal(rng: &mut impl Rng) -> String {
    let int = match rng.random_range(0..10) {
        0 => 0,
        1..=3 => rng.random_range(1..10),
        4..=6 => rng.random_range(10..1000),
        _ => rng.random_range(1000..100_000),
    };
    match rng.random_range(0..3) {
        0 => int.to_string(),
        1 => format!("{int}.{}", rng.random_range(0..10)),
        _ => format!("{int}.{:02}", rng.random_range(0..100)),
    }
}

fn gen_node(rng: &mut impl Rng, depth: u32, vars: &[String]) -> Node {
    if depth == 0 || rng.random_bool(0.25) {
        return if !vars.is_empty() && rng.random_bool(0.35) {
            Node::Var(vars.choose(rng).unwrap().clone())
        } else {
            Node::Lit(literal(rng))
        };
    }
    let d = depth - 1;
    match rng.random_range(0..12) {
        0 => Node::Neg(Box::new(gen_node(rng, d, vars))),
        1 => Node::Abs(Box::new(gen_node(rng, d, vars))),
        2 => Node::Min((0..rng.random_range(2..=3)).map(|_| gen_node(rng, d, vars)).collect()),
        3 => Node::Max((0..rng.random_range(2..=3)).map(|_| gen_node(rng, d, vars)).collect()),
        n => {
            let op = ['+', '-', '*', '/'][n as usize % 4];
            Node::Bin(op, Box::new(gen_node(rng, d, vars)), Box::new(gen_node(rng, d, vars)))
        }
    }
}

/// A random program of one to five statements. Later statements may refer
/// to variables assigned earlier.
pub fn gen_program(rng: &mut impl Rng) -> GenProgram {
    let n = rng.random_range(1..=5);
    let mut vars: Vec<String> = Vec::new();
    let mut statements = Vec::new();
    for i in 0..n {
        let depth = rng.random_range(1..=4);
        let expr = gen_node(rng, depth, &vars);
        let last = i + 1 == n;
        if !last || rng.random_bool(0.3) {
            let name = VAR_NAMES.choose(rng).unwrap().to_string();
            if !vars.contains(&name) {
                vars.push(name.clone());
            }
            statements.push((Some(name), expr));
        } else {
            statements.push((None, expr));
        }
    }
    GenProgram { statements }
}

fn precedence(n: &Node) -> u8 {
    match n {
        Node::Bin('+' | '-', ..) => 1,
        Node::Bin(..) => 2,
        Node::Neg(_) => 3,
        _ => 4,
    }
}

/// Renders with the fewest parentheses the precedence rules allow. The
/// right operand of a same-level operator is bracketed, since `a - (b - c)`
/// and `a - b - c` differ.
pub fn render(n: &Node) -> String {
    fn wrap(n: &Node, min: u8) -> String {
        let s = render(n);
        if precedence(n) < min {
            format!("({s})")
        } else {
            s
        }
    }
    fn list(items: &[Node]) -> String {
        items.iter().map(render).collect::<Vec<_>>().join(", ")
    }
    match n {
        Node::Lit(s) | Node::Var(s) => s.clone(),
        Node::Neg(inner) => format!("-{}", wrap(inner, 3)),
        Node::Bin(op, l, r) => {
            let p = precedence(n);
            format!("{} {op} {}", wrap(l, p), wrap(r, p + 1))
        }
        Node::Abs(inner) => format!("abs({})", render(inner)),
        Node::Min(items) => format!("min({})", list(items)),
        Node::Max(items) => format!("max({})", list(items)),
    }
}

pub fn render_program(p: &GenProgram) -> String {
    p.statements
        .iter()
        .map(|(name, e)| match name {
            Some(v) => format!("{v} = {}", render(e)),
            None => render(e),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn eval_node(n: &Node, env: &[(String, f64)]) -> Result<f64, OracleError> {
    let v = match n {
        Node::Lit(s) => s.parse::<f64>().expect("generated literal parses"),
        Node::Var(name) => env.iter().rev().find(|(k, _)| k == name).expect("assigned before use").1,
        Node::Neg(inner) => -eval_node(inner, env)?,
        Node::Bin(op, l, r) => {
            let a = eval_node(l, env)?;
            let b = eval_node(r, env)?;
            match op {
                '+' => a + b,
                '-' => a - b,
                '*' => a * b,
                _ if b == 0.0 => return Err(OracleError::DivisionByZero),
                _ => a / b,
            }
        }
        Node::Abs(inner) => eval_node(inner, env)?.abs(),
        Node::Min(items) | Node::Max(items) => {
            let vals = items.iter().map(|i| eval_node(i, env)).collect::<Result<Vec<_>, _>>()?;
            let pick_min = matches!(n, Node::Min(_));
            let mut best = vals[0];
            for v in &vals[1..] {
                if (pick_min && *v < best) || (!pick_min && *v > best) {
                    best = *v;
                }
            }
            best
        }
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(OracleError::NonFinite)
    }
}

/// Value of the last statement.
pub fn eval_generated(p: &GenProgram) -> Result<f64, OracleError> {
    let mut env: Vec<(String, f64)> = Vec::new();
    let mut last = 0.0;
    for (name, e) in &p.statements {
        last = eval_node(e, &env)?;
        if let Some(v) = name {
            env.push((v.clone(), last));
        }
    }
    Ok(last)
}

// ---------------------------------------------------------------------------
// Sparse retrieval

#[derive(Debug, Clone)]
pub struct OracleUnit {
    pub id: String,
    pub page: u32,
    pub text: String,
}

#[derive(Debug, Clone, Copy)]
pub enum OracleScheme {
    Tfidf,
    Bm25 { k1: f64, b: f64 },
}

/// Lowercased runs of alphanumeric characters.
pub fn terms(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Scores every unit against every distinct query term from scratch, keeps
/// positive scores and orders by score, page, then id.
pub fn oracle_rank(units: &[OracleUnit], query: &str, scheme: OracleScheme, k: usize) -> Vec<(String, u32, f64)> {
    let docs: Vec<Vec<String>> = units.iter().map(|u| terms(&u.text)).collect();
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(|d| d.len() as f64).sum::<f64>() / n;
    let query: BTreeSet<String> = terms(query).into_iter().collect();
    let mut ranked = Vec::new();
    for (u, doc) in units.iter().zip(&docs) {
        let mut score = 0.0;
        for q in &query {
            let tf = doc.iter().filter(|t| *t == q).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let df = docs.iter().filter(|d| d.contains(q)).count() as f64;
            score += match scheme {
                OracleScheme::Tfidf => tf * (n / df).ln(),
                OracleScheme::Bm25 { k1, b } => {
                    let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                    let dl = doc.len() as f64;
                    idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * dl / avgdl))
                }
            };
        }
        if score > 0.0 {
            ranked.push((u.id.clone(), u.page, score));
        }
    }
    ranked.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then_with(|| a.0.cmp(&b.0))
    });
    ranked.truncate(k);
    ranked
}

const WORDS: [&str; 12] = [
    "revenue", "interest", "ebitda", "debt", "assets", "cash", "lease", "margin", "equity", "note", "tax", "loan",
];

/// A random corpus of up to `max_units` units over a small vocabulary, so
/// that ties and zero-idf terms are common. Several units may share a page
/// and ids are not in page order.
pub fn random_corpus(rng: &mut impl Rng, max_units: usize) -> Vec<OracleUnit> {
    let n = rng.random_range(1..=max_units);
    let vocab = &WORDS[..rng.random_range(2..=WORDS.len())];
    let mut ids: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        ids.swap(i, rng.random_range(0..=i));
    }
    (0..n)
        .map(|i| {
            let len = rng.random_range(0..12);
            let text = (0..len).map(|_| *vocab.choose(rng).unwrap()).collect::<Vec<_>>().join(" ");
            OracleUnit {
                id: format!("u{:03}", ids[i]),
                page: rng.random_range(1..=(n as u32 / 2).max(1)),
                text,
            }
        })
        .collect()
}

pub fn random_query(rng: &mut impl Rng) -> String {
    let n = rng.random_range(1..=4);
    (0..n)
        .map(|_| if rng.random_bool(0.1) { "absent" } else { WORDS.choose(rng).unwrap() })
        .collect::<Vec<_>>()
        .join(" ")
}
