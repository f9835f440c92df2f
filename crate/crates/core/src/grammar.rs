//! The arithmetic-expressions domain: a 12-token vocabulary, fixed-length
//! token sequences, validity parsing, seeded sampling, evaluation, and the
//! symbolic-regression objective.
//!
//! The accepted language is
//!
//! ```text
//! S -> T ((+ | * | /) T)*
//! T -> sin ( S ) | exp ( S ) | ( S ) | x | 1 | 2 | 3
//! ```
//!
//! followed only by PAD tokens up to the fixed sequence length.

use crate::linalg::Matrix;
use rand::Rng;
use thiserror::Error;

/// Fixed sequence length L.
pub const SEQ_LEN: usize = 16;
/// Vocabulary size D.
pub const VOCAB_SIZE: usize = 12;

/// Magnitude bound beyond which expression evaluation reports overflow.
const EVAL_OVERFLOW: f64 = 1e10;
/// Cap applied to the mean-squared error inside [`objective`].
const MSE_CAP: f64 = 1e10;
/// Number of grid points (inclusive endpoints) for the objective.
const GRID_POINTS: usize = 1000;
const GRID_LO: f64 = -10.0;
const GRID_HI: f64 = 10.0;

const SAMPLE_RETRIES: usize = 100;

#[derive(Debug, Error)]
pub enum GrammarError {
    #[error("unknown token name {0:?}")]
    UnknownToken(String),
    #[error("expression has {got} tokens, limit is {limit}")]
    TooManyTokens { got: usize, limit: usize },
    #[error("probability matrix must be {expected_rows}x{expected_cols}, got {rows}x{cols}")]
    ShapeMismatch {
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("sampling failed to produce a valid expression in {0} retries")]
    SamplingBudget(usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One vocabulary symbol. Ids are fixed: PAD=0, x, 1, 2, 3, +, *, /, (, ),
/// sin, exp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Token {
    Pad = 0,
    X = 1,
    One = 2,
    Two = 3,
    Three = 4,
    Plus = 5,
    Star = 6,
    Slash = 7,
    LParen = 8,
    RParen = 9,
    Sin = 10,
    Exp = 11,
}

impl Token {
    pub const ALL: [Token; VOCAB_SIZE] = [
        Token::Pad,
        Token::X,
        Token::One,
        Token::Two,
        Token::Three,
        Token::Plus,
        Token::Star,
        Token::Slash,
        Token::LParen,
        Token::RParen,
        Token::Sin,
        Token::Exp,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Token> {
        Token::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Token::Pad => "PAD",
            Token::X => "x",
            Token::One => "1",
            Token::Two => "2",
            Token::Three => "3",
            Token::Plus => "+",
            Token::Star => "*",
            Token::Slash => "/",
            Token::LParen => "(",
            Token::RParen => ")",
            Token::Sin => "sin",
            Token::Exp => "exp",
        }
    }

    pub fn from_name(name: &str) -> Option<Token> {
        Token::ALL.iter().copied().find(|t| t.name() == name)
    }
}

/// Fixed-length sequence of token ids; PAD may appear anywhere, validity is
/// the parser's concern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    tokens: [Token; SEQ_LEN],
}

impl TokenSequence {
    pub fn new(tokens: [Token; SEQ_LEN]) -> Self {
        TokenSequence { tokens }
    }

    pub fn all_pad() -> Self {
        TokenSequence {
            tokens: [Token::Pad; SEQ_LEN],
        }
    }

    /// Builds a sequence from leading tokens, padding with PAD to length L.
    pub fn from_tokens(tokens: &[Token]) -> Result<Self, GrammarError> {
        if tokens.len() > SEQ_LEN {
            return Err(GrammarError::TooManyTokens {
                got: tokens.len(),
                limit: SEQ_LEN,
            });
        }
        let mut seq = [Token::Pad; SEQ_LEN];
        seq[..tokens.len()].copy_from_slice(tokens);
        Ok(TokenSequence { tokens: seq })
    }

    /// Parses a space-separated token string, e.g. `"sin ( x ) + x"`.
    pub fn from_text(text: &str) -> Result<Self, GrammarError> {
        let mut tokens = Vec::new();
        for word in text.split_whitespace() {
            let tok = Token::from_name(word)
                .ok_or_else(|| GrammarError::UnknownToken(word.to_string()))?;
            tokens.push(tok);
        }
        Self::from_tokens(&tokens)
    }

    /// Space-separated token names without the PAD suffix.
    pub fn to_text(&self) -> String {
        let end = self
            .tokens
            .iter()
            .rposition(|t| *t != Token::Pad)
            .map_or(0, |i| i + 1);
        self.tokens[..end]
            .iter()
            .map(|t| t.name())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn tokens(&self) -> &[Token; SEQ_LEN] {
        &self.tokens
    }

    pub fn ids(&self) -> [usize; SEQ_LEN] {
        let mut ids = [0usize; SEQ_LEN];
        for (i, t) in self.tokens.iter().enumerate() {
            ids[i] = t.id();
        }
        ids
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryFunc {
    Sin,
    Exp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Leaf {
    Var,
    One,
    Two,
    Three,
}

/// Parsed expression tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExpressionAst {
    Binary {
        op: BinaryOp,
        left: Box<ExpressionAst>,
        right: Box<ExpressionAst>,
    },
    Unary {
        func: UnaryFunc,
        child: Box<ExpressionAst>,
    },
    Leaf(Leaf),
}

struct Parser<'a> {
    tokens: &'a [Token; SEQ_LEN],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<Token> {
        self.tokens.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<Token> {
        let t = self.peek();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, t: Token) -> Option<()> {
        if self.peek() == Some(t) {
            self.pos += 1;
            Some(())
        } else {
            None
        }
    }

    // S -> T ((+ | * | /) T)*, left-associative.
    fn parse_s(&mut self) -> Option<ExpressionAst> {
        let mut ast = self.parse_t()?;
        loop {
            let op = match self.peek() {
                Some(Token::Plus) => BinaryOp::Add,
                Some(Token::Star) => BinaryOp::Mul,
                Some(Token::Slash) => BinaryOp::Div,
                _ => break,
            };
            self.pos += 1;
            let rhs = self.parse_t()?;
            ast = ExpressionAst::Binary {
                op,
                left: Box::new(ast),
                right: Box::new(rhs),
            };
        }
        Some(ast)
    }

    fn parse_t(&mut self) -> Option<ExpressionAst> {
        match self.bump()? {
            Token::Sin => {
                self.expect(Token::LParen)?;
                let inner = self.parse_s()?;
                self.expect(Token::RParen)?;
                Some(ExpressionAst::Unary {
                    func: UnaryFunc::Sin,
                    child: Box::new(inner),
                })
            }
            Token::Exp => {
                self.expect(Token::LParen)?;
                let inner = self.parse_s()?;
                self.expect(Token::RParen)?;
                Some(ExpressionAst::Unary {
                    func: UnaryFunc::Exp,
                    child: Box::new(inner),
                })
            }
            Token::LParen => {
                let inner = self.parse_s()?;
                self.expect(Token::RParen)?;
                Some(inner)
            }
            Token::X => Some(ExpressionAst::Leaf(Leaf::Var)),
            Token::One => Some(ExpressionAst::Leaf(Leaf::One)),
            Token::Two => Some(ExpressionAst::Leaf(Leaf::Two)),
            Token::Three => Some(ExpressionAst::Leaf(Leaf::Three)),
            _ => None,
        }
    }
}

/// Parses a token sequence. Returns `None` for anything outside the
/// grammar, including an all-PAD sequence and any PAD before a non-PAD
/// token.
pub fn parse(seq: &TokenSequence) -> Option<ExpressionAst> {
    if seq.tokens[0] == Token::Pad {
        return None;
    }
    let mut parser = Parser {
        tokens: &seq.tokens,
        pos: 0,
    };
    let ast = parser.parse_s()?;
    // Only PAD may follow a complete parse.
    if seq.tokens[parser.pos..].iter().all(|t| *t == Token::Pad) {
        Some(ast)
    } else {
        None
    }
}

pub fn is_valid(seq: &TokenSequence) -> bool {
    parse(seq).is_some()
}

/// Result of evaluating an expression at a point: a finite value or an
/// overflow sentinel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalResult {
    Value(f64),
    Overflow,
}

impl EvalResult {
    fn guard(v: f64) -> EvalResult {
        if v.is_finite() && v.abs() <= EVAL_OVERFLOW {
            EvalResult::Value(v)
        } else {
            EvalResult::Overflow
        }
    }
}

/// Recursive evaluation; any intermediate with magnitude above 1e10 or any
/// non-finite intermediate propagates [`EvalResult::Overflow`].
pub fn evaluate(ast: &ExpressionAst, x: f64) -> EvalResult {
    match ast {
        ExpressionAst::Leaf(Leaf::Var) => EvalResult::guard(x),
        ExpressionAst::Leaf(Leaf::One) => EvalResult::Value(1.0),
        ExpressionAst::Leaf(Leaf::Two) => EvalResult::Value(2.0),
        ExpressionAst::Leaf(Leaf::Three) => EvalResult::Value(3.0),
        ExpressionAst::Unary { func, child } => match evaluate(child, x) {
            EvalResult::Overflow => EvalResult::Overflow,
            EvalResult::Value(v) => match func {
                UnaryFunc::Sin => EvalResult::guard(v.sin()),
                UnaryFunc::Exp => EvalResult::guard(v.exp()),
            },
        },
        ExpressionAst::Binary { op, left, right } => {
            let l = match evaluate(left, x) {
                EvalResult::Value(v) => v,
                EvalResult::Overflow => return EvalResult::Overflow,
            };
            let r = match evaluate(right, x) {
                EvalResult::Value(v) => v,
                EvalResult::Overflow => return EvalResult::Overflow,
            };
            let v = match op {
                BinaryOp::Add => l + r,
                BinaryOp::Mul => l * r,
                BinaryOp::Div => l / r,
            };
            EvalResult::guard(v)
        }
    }
}

/// The regression target `1/3 + x + sin(x * x)`.
pub fn target_value(x: f64) -> f64 {
    1.0 / 3.0 + x + (x * x).sin()
}

/// Token form of the target expression.
pub fn target_sequence() -> TokenSequence {
    TokenSequence::from_text("1 / 3 + x + sin ( x * x )").expect("target tokens")
}

/// Inclusive evaluation grid of 1000 equally spaced points on [-10, 10].
pub fn objective_grid() -> impl Iterator<Item = f64> {
    (0..GRID_POINTS)
        .map(|i| GRID_LO + (GRID_HI - GRID_LO) * i as f64 / (GRID_POINTS - 1) as f64)
}

/// Symbolic-regression objective `-log(1 + MSE)` against the target over
/// the fixed grid; `None` when the sequence is not a valid expression. Any
/// overflow on the grid, or an MSE above 1e10, clamps the MSE to 1e10.
pub fn objective(seq: &TokenSequence) -> Option<f64> {
    let ast = parse(seq)?;
    let mut acc = 0.0;
    let mut overflow = false;
    for x in objective_grid() {
        match evaluate(&ast, x) {
            EvalResult::Value(v) => {
                let diff = v - target_value(x);
                acc += diff * diff;
            }
            EvalResult::Overflow => {
                overflow = true;
                break;
            }
        }
    }
    let mse = if overflow {
        MSE_CAP
    } else {
        (acc / GRID_POINTS as f64).min(MSE_CAP)
    };
    Some(-(1.0 + mse).ln())
}

/// Samples a valid expression of at most `max_tokens` tokens. Production
/// probabilities are biased toward terminals as the remaining budget
/// shrinks; generation retries (up to 100 times) if it overruns the budget.
pub fn sample_expression<R: Rng>(
    rng: &mut R,
    max_tokens: usize,
) -> Result<TokenSequence, GrammarError> {
    assert!(max_tokens <= SEQ_LEN, "max_tokens must be <= {SEQ_LEN}");
    for _ in 0..SAMPLE_RETRIES {
        let mut tokens = Vec::with_capacity(max_tokens);
        if gen_s(rng, &mut tokens, max_tokens) && tokens.len() <= max_tokens {
            let seq = TokenSequence::from_tokens(&tokens)?;
            debug_assert!(is_valid(&seq));
            return Ok(seq);
        }
    }
    Err(GrammarError::SamplingBudget(SAMPLE_RETRIES))
}

fn remaining(max: usize, used: usize) -> usize {
    max.saturating_sub(used)
}

fn gen_s<R: Rng>(rng: &mut R, out: &mut Vec<Token>, max: usize) -> bool {
    if !gen_t(rng, out, max) {
        return false;
    }
    // Chain binary operators while budget allows; the continuation
    // probability shrinks with the remaining budget.
    loop {
        let left = remaining(max, out.len());
        if left < 2 {
            return true;
        }
        let p_continue = 0.4_f64.min(left as f64 / max as f64);
        if rng.gen::<f64>() >= p_continue {
            return true;
        }
        let op = match rng.gen_range(0..3) {
            0 => Token::Plus,
            1 => Token::Star,
            _ => Token::Slash,
        };
        out.push(op);
        if !gen_t(rng, out, max) {
            return false;
        }
    }
}

fn gen_t<R: Rng>(rng: &mut R, out: &mut Vec<Token>, max: usize) -> bool {
    let left = remaining(max, out.len());
    if left == 0 {
        return false;
    }
    // sin(S) / exp(S) / (S) need at least 3 extra tokens around an inner S.
    let allow_nested = left >= 4;
    let p_nested = if allow_nested {
        0.35 * (left as f64 / max as f64)
    } else {
        0.0
    };
    if rng.gen::<f64>() < p_nested {
        let kind = rng.gen_range(0..3);
        match kind {
            0 => out.push(Token::Sin),
            1 => out.push(Token::Exp),
            _ => {}
        }
        out.push(Token::LParen);
        if !gen_s(rng, out, max.saturating_sub(1)) {
            return false;
        }
        if remaining(max, out.len()) == 0 {
            return false;
        }
        out.push(Token::RParen);
        true
    } else {
        let leaf = match rng.gen_range(0..4) {
            0 => Token::X,
            1 => Token::One,
            2 => Token::Two,
            _ => Token::Three,
        };
        out.push(leaf);
        true
    }
}

/// One-hot encoding as a D x L matrix (one column per position).
pub fn one_hot(seq: &TokenSequence) -> Matrix {
    let mut m = Matrix::zeros(VOCAB_SIZE, SEQ_LEN);
    for (i, t) in seq.tokens().iter().enumerate() {
        m.set(t.id(), i, 1.0);
    }
    m
}

/// Argmax decoding of a D x L probability (or logit) matrix; ties break
/// toward the lowest token id.
pub fn argmax_decode(probs: &Matrix) -> Result<TokenSequence, GrammarError> {
    if probs.rows() != VOCAB_SIZE || probs.cols() != SEQ_LEN {
        return Err(GrammarError::ShapeMismatch {
            expected_rows: VOCAB_SIZE,
            expected_cols: SEQ_LEN,
            rows: probs.rows(),
            cols: probs.cols(),
        });
    }
    let mut tokens = [Token::Pad; SEQ_LEN];
    for i in 0..SEQ_LEN {
        let mut best = 0usize;
        let mut best_val = probs.get(0, i);
        for j in 1..VOCAB_SIZE {
            let v = probs.get(j, i);
            if v > best_val {
                best = j;
                best_val = v;
            }
        }
        tokens[i] = Token::from_id(best).unwrap();
    }
    Ok(TokenSequence::new(tokens))
}

/// Writes a dataset as one expression per line (space-separated token
/// names, no PAD suffix, LF line endings).
pub fn write_dataset(path: &std::path::Path, data: &[TokenSequence]) -> Result<(), GrammarError> {
    let mut text = String::new();
    for seq in data {
        text.push_str(&seq.to_text());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|source| GrammarError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(path: &std::path::Path) -> Result<Vec<TokenSequence>, GrammarError> {
    let text = std::fs::read_to_string(path).map_err(|source| GrammarError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(TokenSequence::from_text(line)?);
    }
    Ok(out)
}
