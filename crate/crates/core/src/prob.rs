//! Alphabet, token and sequence types plus log-space arithmetic.
//!
//! Every probability in this crate is carried as a natural logarithm.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Natural-log probability. Values are `<= 0`; `-inf` marks an impossible event.
pub type LogProb = f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u32);

impl Token {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for Token {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A finite token alphabet with one reserved delimiter token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Alphabet {
    size: usize,
    delimiter: Token,
}

impl Alphabet {
    pub fn new(size: usize, delimiter_id: u32) -> Result<Self> {
        if size < 2 {
            return Err(Error::invalid("alphabet_size", format!("must be >= 2, got {size}")));
        }
        if delimiter_id as usize >= size {
            return Err(Error::invalid(
                "delimiter_id",
                format!("{delimiter_id} is outside an alphabet of size {size}"),
            ));
        }
        Ok(Self {
            size,
            delimiter: Token(delimiter_id),
        })
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn delimiter(&self) -> Token {
        self.delimiter
    }

    #[inline]
    pub fn contains(&self, token: Token) -> bool {
        token.index() < self.size
    }

    pub fn check(&self, token: Token) -> Result<()> {
        if self.contains(token) {
            Ok(())
        } else {
            Err(Error::Usage(format!(
                "token {token} outside alphabet of size {}",
                self.size
            )))
        }
    }

    pub fn tokens(&self) -> impl Iterator<Item = Token> {
        (0..self.size as u32).map(Token)
    }

    /// Tokens that may serve as labels: everything except the delimiter.
    pub fn label_tokens(&self) -> impl Iterator<Item = Token> + '_ {
        self.tokens().filter(move |t| *t != self.delimiter)
    }
}

/// A token sequence that remembers which positions were inserted as prompt
/// delimiters rather than generated.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Sequence {
    tokens: Vec<Token>,
    inserted: Vec<bool>,
}

impl Sequence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            tokens: Vec::with_capacity(n),
            inserted: Vec::with_capacity(n),
        }
    }

    pub fn from_tokens(tokens: Vec<Token>) -> Self {
        let inserted = vec![false; tokens.len()];
        Self { tokens, inserted }
    }

    pub fn push(&mut self, token: Token) {
        self.tokens.push(token);
        self.inserted.push(false);
    }

    pub fn push_inserted(&mut self, token: Token) {
        self.tokens.push(token);
        self.inserted.push(true);
    }

    pub fn extend_from_slice(&mut self, tokens: &[Token]) {
        self.tokens.extend_from_slice(tokens);
        self.inserted.extend(std::iter::repeat_n(false, tokens.len()));
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn is_inserted(&self, position: usize) -> bool {
        self.inserted[position]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self, alphabet: &Alphabet) -> Result<()> {
        self.tokens.iter().try_for_each(|t| alphabet.check(*t))
    }
}

impl std::ops::Deref for Sequence {
    type Target = [Token];

    fn deref(&self) -> &[Token] {
        &self.tokens
    }
}

/// `ln(sum(exp(v)))`, shifted by the maximum so nothing overflows.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Usage("log_sum_exp of an empty list".into()));
    }
    Ok(log_sum_exp_unchecked(values))
}

#[inline]
pub(crate) fn log_sum_exp_unchecked(values: &[f64]) -> f64 {
    if values.len() == 1 {
        return values[0];
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Turns arbitrary log-weights into a normalized log-distribution.
pub fn normalize_log_weights(weights: &[f64]) -> Result<Vec<LogProb>> {
    if weights.is_empty() {
        return Err(Error::Usage("cannot normalize an empty weight list".into()));
    }
    let total = log_sum_exp_unchecked(weights);
    if total == f64::NEG_INFINITY {
        return Err(Error::DegenerateDistribution("every log-weight is -inf".into()));
    }
    if !total.is_finite() {
        return Err(Error::NumericalFailure(format!("log-normalizer is {total}")));
    }
    Ok(weights.iter().map(|w| w - total).collect())
}
