//! The pretraining distribution: a prior over concepts and exact Bayesian
//! conditionals under it.

use rand::Rng;

use crate::concept::{sample_index, ChainState, MarkovConcept};
use crate::error::{Error, Result};
use crate::prob::{log_sum_exp_unchecked, Alphabet, LogProb, Sequence, Token};

/// Default lower bound on each prior entry.
pub const DEFAULT_C3_FLOOR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    alphabet: Alphabet,
    concepts: Vec<MarkovConcept>,
    prior: Vec<f64>,
    log_prior: Vec<f64>,
}

impl MixtureModel {
    pub fn new(concepts: Vec<MarkovConcept>, prior: Vec<f64>) -> Result<Self> {
        Self::with_prior_floor(concepts, prior, DEFAULT_C3_FLOOR)
    }

    pub fn with_prior_floor(concepts: Vec<MarkovConcept>, prior: Vec<f64>, floor: f64) -> Result<Self> {
        let alphabet = *concepts
            .first()
            .ok_or_else(|| Error::invalid("concepts", "at least one concept is required"))?
            .alphabet();
        if let Some(i) = concepts.iter().position(|c| *c.alphabet() != alphabet) {
            return Err(Error::invalid(
                format!("concepts[{i}]"),
                "alphabet differs from concepts[0]",
            ));
        }
        if prior.len() != concepts.len() {
            return Err(Error::invalid(
                "prior",
                format!("{} entries for {} concepts", prior.len(), concepts.len()),
            ));
        }
        for (i, &p) in prior.iter().enumerate() {
            if !p.is_finite() || p <= 0.0 || p < floor {
                return Err(Error::invalid(
                    format!("prior[{i}]"),
                    format!("entry {p} is below the floor {floor}"),
                ));
            }
        }
        let sum: f64 = prior.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("prior", format!("sums to {sum}, expected 1")));
        }
        let log_prior = prior.iter().map(|p| p.ln()).collect();
        Ok(Self {
            alphabet,
            concepts,
            prior,
            log_prior,
        })
    }

    pub fn uniform_prior(concepts: Vec<MarkovConcept>) -> Result<Self> {
        let n = concepts.len().max(1);
        Self::new(concepts, vec![1.0 / n as f64; n])
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn concepts(&self) -> &[MarkovConcept] {
        &self.concepts
    }

    pub fn concept(&self, index: usize) -> &MarkovConcept {
        &self.concepts[index]
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn log_prior(&self) -> &[f64] {
        &self.log_prior
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn tracker(&self) -> PosteriorTracker<'_> {
        PosteriorTracker::new(self)
    }

    /// `ln P(phi | prefix)` for every concept.
    pub fn posterior_log(&self, prefix: &[Token]) -> Vec<LogProb> {
        let mut t = self.tracker();
        t.extend(prefix);
        t.log_posterior()
    }

    pub fn mixture_next_token_log_prob(&self, prefix: &[Token], token: Token) -> Result<LogProb> {
        self.alphabet.check(token)?;
        Ok(self.next_token_log_row(prefix)[token.index()])
    }

    /// Full conditional row `ln P_D(. | prefix)`.
    pub fn next_token_log_row(&self, prefix: &[Token]) -> Vec<LogProb> {
        let mut t = self.tracker();
        t.extend(prefix);
        t.next_token_log_row()
    }

    /// `ln P_D(tokens)`, marginalizing the concept.
    pub fn seq_log_prob(&self, tokens: &[Token]) -> LogProb {
        let joint: Vec<f64> = self
            .concepts
            .iter()
            .zip(&self.log_prior)
            .map(|(c, lp)| lp + c.seq_log_prob(tokens))
            .collect();
        log_sum_exp_unchecked(&joint)
    }

    /// Draws a concept from the prior, then a length-`length` document from it.
    /// The concept index is returned for diagnostics only.
    pub fn sample_pretraining_doc<R: Rng + ?Sized>(&self, length: usize, rng: &mut R) -> (Sequence, usize) {
        let index = sample_index(&self.prior, rng);
        (self.concepts[index].sample_sequence(length, rng), index)
    }

    pub fn compute_c3(&self) -> f64 {
        self.prior.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Running per-concept joint log-likelihoods for a growing prefix.
///
/// Feeding a length-L prefix costs O(L * |concepts|) once; every conditional
/// afterwards is O(|concepts| * V).
#[derive(Debug, Clone)]
pub struct PosteriorTracker<'m> {
    mixture: &'m MixtureModel,
    log_joint: Vec<f64>,
    state: ChainState,
}

impl<'m> PosteriorTracker<'m> {
    pub fn new(mixture: &'m MixtureModel) -> Self {
        Self {
            mixture,
            log_joint: mixture.log_prior.clone(),
            state: ChainState::Start,
        }
    }

    pub fn push(&mut self, token: Token) {
        for (lj, c) in self.log_joint.iter_mut().zip(&self.mixture.concepts) {
            *lj += c.log_row(self.state)[token.index()];
        }
        self.state = self.state.advance(token, self.mixture.alphabet.delimiter());
    }

    pub fn extend(&mut self, tokens: &[Token]) {
        tokens.iter().for_each(|t| self.push(*t));
    }

    pub fn state(&self) -> ChainState {
        self.state
    }

    /// `ln P(phi) + ln P_phi(prefix)` per concept.
    pub fn log_joint(&self) -> &[f64] {
        &self.log_joint
    }

    pub fn log_posterior(&self) -> Vec<LogProb> {
        let z = log_sum_exp_unchecked(&self.log_joint);
        self.log_joint.iter().map(|lj| lj - z).collect()
    }

    pub fn next_token_log_row(&self) -> Vec<LogProb> {
        let post = self.log_posterior();
        let mut terms = vec![0.0; post.len()];
        (0..self.mixture.alphabet.size())
            .map(|t| {
                for ((term, lp), c) in terms.iter_mut().zip(&post).zip(&self.mixture.concepts) {
                    *term = lp + c.log_row(self.state)[t];
                }
                log_sum_exp_unchecked(&terms)
            })
            .collect()
    }
}
