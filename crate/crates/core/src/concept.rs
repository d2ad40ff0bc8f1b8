//! Delimiter-resetting order-1 Markov chains: one latent concept each.

use rand::Rng;

use crate::error::{Error, Result};
use crate::prob::{Alphabet, LogProb, Sequence, Token};

/// Default lower bound on every initial/transition entry.
pub const DEFAULT_FLOOR: f64 = 0.01;

const SUM_TOL: f64 = 1e-12;

/// The part of a token history that determines the next-token distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChainState {
    /// Nothing emitted yet.
    Start,
    /// Last token was the given non-delimiter token.
    After(Token),
    /// Last token was the delimiter; carries the token before it, if any.
    AfterDelimiter(Option<Token>),
}

impl ChainState {
    /// Reads the state off the tail of a prefix.
    pub fn from_prefix(prefix: &[Token], delimiter: Token) -> Self {
        match prefix {
            [] => ChainState::Start,
            [.., last] if *last != delimiter => ChainState::After(*last),
            [.., before, _] => ChainState::AfterDelimiter(Some(*before)),
            [_] => ChainState::AfterDelimiter(None),
        }
    }

    #[inline]
    pub fn advance(self, token: Token, delimiter: Token) -> Self {
        if token != delimiter {
            return ChainState::After(token);
        }
        let previous = match self {
            ChainState::Start => None,
            ChainState::After(a) => Some(a),
            ChainState::AfterDelimiter(_) => Some(delimiter),
        };
        ChainState::AfterDelimiter(previous)
    }

    /// Dense index in `0..ChainState::count(v)`.
    #[inline]
    pub fn index(self, v: usize) -> usize {
        match self {
            ChainState::Start => 0,
            ChainState::After(a) => 1 + a.index(),
            ChainState::AfterDelimiter(None) => 1 + v,
            ChainState::AfterDelimiter(Some(p)) => 2 + v + p.index(),
        }
    }

    pub fn count(v: usize) -> usize {
        2 * v + 2
    }

    /// Every reachable state for the alphabet, in index order.
    pub fn all(alphabet: &Alphabet) -> Vec<Option<ChainState>> {
        let v = alphabet.size();
        let mut out = vec![None; Self::count(v)];
        out[0] = Some(ChainState::Start);
        for a in alphabet.label_tokens() {
            out[ChainState::After(a).index(v)] = Some(ChainState::After(a));
        }
        out[1 + v] = Some(ChainState::AfterDelimiter(None));
        for p in alphabet.tokens() {
            let s = ChainState::AfterDelimiter(Some(p));
            out[s.index(v)] = Some(s);
        }
        out
    }

    /// Which stored conditional row applies in this state.
    #[inline]
    fn row_id(self, v: usize) -> usize {
        match self {
            ChainState::Start | ChainState::AfterDelimiter(None) => 0,
            ChainState::After(a) => 1 + a.index(),
            ChainState::AfterDelimiter(Some(p)) => 1 + v + p.index(),
        }
    }
}

/// One concept: a Markov chain whose token after a delimiter is drawn from
/// `(1 - leak) * initial + leak * transition[token before the delimiter]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovConcept {
    alphabet: Alphabet,
    initial: Vec<f64>,
    transition: Vec<Vec<f64>>,
    reset_leak: f64,
    // row 0: initial, rows 1..=V: transition, rows V+1..=2V: post-delimiter mixes
    rows: Vec<f64>,
    log_rows: Vec<f64>,
}

fn check_distribution(field: &str, row: &[f64], v: usize, floor: f64) -> Result<()> {
    if row.len() != v {
        return Err(Error::invalid(
            field,
            format!("expected {v} entries, got {}", row.len()),
        ));
    }
    for (i, &p) in row.iter().enumerate() {
        if !p.is_finite() || p <= 0.0 || p < floor {
            return Err(Error::invalid(
                format!("{field}[{i}]"),
                format!("entry {p} is below the floor {floor}"),
            ));
        }
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > SUM_TOL {
        return Err(Error::invalid(field, format!("sums to {sum}, expected 1")));
    }
    Ok(())
}

impl MarkovConcept {
    pub fn new(alphabet: Alphabet, initial: Vec<f64>, transition: Vec<Vec<f64>>, reset_leak: f64) -> Result<Self> {
        Self::with_floor(alphabet, initial, transition, reset_leak, DEFAULT_FLOOR)
    }

    /// Like [`MarkovConcept::new`] with an explicit entry floor. A floor of 0
    /// still demands strictly positive entries.
    pub fn with_floor(
        alphabet: Alphabet,
        initial: Vec<f64>,
        transition: Vec<Vec<f64>>,
        reset_leak: f64,
        floor: f64,
    ) -> Result<Self> {
        let v = alphabet.size();
        if !(0.0..1.0).contains(&floor) {
            return Err(Error::invalid("floor_config", format!("{floor} not in [0, 1)")));
        }
        check_distribution("initial", &initial, v, floor)?;
        if transition.len() != v {
            return Err(Error::invalid(
                "transition",
                format!("expected {v} rows, got {}", transition.len()),
            ));
        }
        for (a, row) in transition.iter().enumerate() {
            check_distribution(&format!("transition[{a}]"), row, v, floor)?;
        }
        if !(0.0..=1.0).contains(&reset_leak) {
            return Err(Error::invalid("reset_leak", format!("{reset_leak} not in [0, 1]")));
        }

        let mut rows = Vec::with_capacity((2 * v + 1) * v);
        rows.extend_from_slice(&initial);
        for row in &transition {
            rows.extend_from_slice(row);
        }
        for row in &transition {
            rows.extend(
                initial
                    .iter()
                    .zip(row)
                    .map(|(i, t)| (1.0 - reset_leak) * i + reset_leak * t),
            );
        }
        let log_rows = rows.iter().map(|p| p.ln()).collect();
        Ok(Self {
            alphabet,
            initial,
            transition,
            reset_leak,
            rows,
            log_rows,
        })
    }

    /// Every row equal to `row`: tokens are i.i.d. regardless of history.
    pub fn iid(alphabet: Alphabet, row: Vec<f64>) -> Result<Self> {
        let transition = vec![row.clone(); alphabet.size()];
        Self::new(alphabet, row, transition, 0.0)
    }

    pub fn uniform(alphabet: Alphabet) -> Self {
        let v = alphabet.size();
        let row = vec![1.0 / v as f64; v];
        Self::with_floor(alphabet, row.clone(), vec![row; v], 0.0, 0.0).expect("uniform rows are valid")
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    pub fn reset_leak(&self) -> f64 {
        self.reset_leak
    }

    /// True when the next-token distribution never depends on history.
    pub fn is_history_free(&self) -> bool {
        let v = self.alphabet.size();
        self.rows.chunks(v).all(|r| r == self.initial.as_slice())
    }

    #[inline]
    pub fn row(&self, state: ChainState) -> &[f64] {
        let v = self.alphabet.size();
        let id = state.row_id(v);
        &self.rows[id * v..(id + 1) * v]
    }

    #[inline]
    pub fn log_row(&self, state: ChainState) -> &[f64] {
        let v = self.alphabet.size();
        let id = state.row_id(v);
        &self.log_rows[id * v..(id + 1) * v]
    }

    pub fn next_token_log_prob(&self, prefix: &[Token], token: Token) -> Result<LogProb> {
        self.alphabet.check(token)?;
        let state = ChainState::from_prefix(prefix, self.alphabet.delimiter());
        Ok(self.log_row(state)[token.index()])
    }

    /// Log-probability of `tokens` as the start of a document.
    ///
    /// Panics if a token lies outside the alphabet.
    pub fn seq_log_prob(&self, tokens: &[Token]) -> LogProb {
        self.continuation_log_prob(ChainState::Start, tokens).0
    }

    /// Log-probability of `tokens` emitted from `state`, and the state reached.
    pub fn continuation_log_prob(&self, mut state: ChainState, tokens: &[Token]) -> (LogProb, ChainState) {
        let delimiter = self.alphabet.delimiter();
        let mut total = 0.0;
        for &t in tokens {
            total += self.log_row(state)[t.index()];
            state = state.advance(t, delimiter);
        }
        (total, state)
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, state: ChainState, rng: &mut R) -> Token {
        Token(sample_index(self.row(state), rng) as u32)
    }

    pub fn sample_sequence<R: Rng + ?Sized>(&self, length: usize, rng: &mut R) -> Sequence {
        let delimiter = self.alphabet.delimiter();
        let mut seq = Sequence::with_capacity(length);
        let mut state = ChainState::Start;
        for _ in 0..length {
            let t = self.sample_next(state, rng);
            seq.push(t);
            state = state.advance(t, delimiter);
        }
        seq
    }

    /// Smallest conditional probability any history can produce.
    pub fn compute_c2(&self) -> f64 {
        self.rows.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Tight approximate-independence constant across a delimiter: the
    /// largest `c` with `c <= P(s1+d) P(s2) / P(s1+d+s2) <= 1/c` for all
    /// strings.
    ///
    /// The ratio only differs from 1 through the first one or two tokens of
    /// `s2`, whose conditional after the joining delimiter is a leak mix
    /// instead of `initial`. Enumerating those factors gives the exact range.
    pub fn compute_c1(&self) -> f64 {
        if self.reset_leak == 0.0 {
            return 1.0;
        }
        let v = self.alphabet.size();
        let d = self.alphabet.delimiter();
        let factor =
            |a: Token, b: Token| self.initial[b.index()] / self.row(ChainState::AfterDelimiter(Some(a)))[b.index()];
        let (mut lo, mut hi) = (1.0f64, 1.0f64);
        let mut visit = |r: f64| {
            lo = lo.min(r);
            hi = hi.max(r);
        };
        for a in self.alphabet.tokens() {
            for b in self.alphabet.tokens() {
                visit(factor(a, b));
            }
            let first = factor(a, d);
            for b in (0..v as u32).map(Token) {
                visit(first * factor(d, b));
            }
        }
        lo.min(1.0 / hi)
    }
}

/// Inverse-CDF draw from a probability vector.
pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
