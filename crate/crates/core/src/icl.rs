//! Downstream tasks, prompt assembly and the in-context predictor.

use rand::Rng;
use rayon::prelude::*;

use crate::concept::MarkovConcept;
use crate::error::{Error, Result};
use crate::model::SequenceModel;
use crate::prob::{Alphabet, Sequence, Token};
use crate::seed::{derive_seed, rng_from_parts};
use crate::stats::{normal_estimate, wilson, Estimate};

const MAX_REJECTIONS: usize = 10_000;

/// One downstream pair: `x` has `T - 1` tokens, `y` is the `T`-th.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub x: Vec<Token>,
    pub y: Token,
}

/// How a downstream example treats a delimiter in the label position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelPolicy {
    /// Redraw the whole example until the label is not the delimiter.
    #[default]
    RejectDelimiter,
    /// Keep the raw draw from the concept, delimiter labels included.
    Unconditional,
}

pub fn sample_task_example<R: Rng + ?Sized>(
    concept: &MarkovConcept,
    length: usize,
    rng: &mut R,
) -> Result<LabeledExample> {
    sample_task_example_with(concept, length, LabelPolicy::RejectDelimiter, rng)
}

pub fn sample_task_example_with<R: Rng + ?Sized>(
    concept: &MarkovConcept,
    length: usize,
    policy: LabelPolicy,
    rng: &mut R,
) -> Result<LabeledExample> {
    if length < 2 {
        return Err(Error::Usage(format!("task examples need T >= 2, got {length}")));
    }
    let delimiter = concept.alphabet().delimiter();
    for _ in 0..MAX_REJECTIONS {
        let mut seq = concept.sample_sequence(length, rng).tokens().to_vec();
        let y = seq.pop().expect("length >= 2");
        if policy == LabelPolicy::Unconditional || y != delimiter {
            return Ok(LabeledExample { x: seq, y });
        }
    }
    Err(Error::Config(format!(
        "{MAX_REJECTIONS} consecutive delimiter labels; delimiter mass is too high"
    )))
}

/// `x_1 y_1 d x_2 y_2 d ... x_k y_k d`, with labels possibly flipped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub examples: Vec<LabeledExample>,
    pub flip_mask: Vec<bool>,
    /// Labels as they appear in the prompt.
    pub labels: Vec<Token>,
    pub realized: Sequence,
}

impl Prompt {
    pub fn empty() -> Self {
        Self {
            examples: Vec::new(),
            flip_mask: Vec::new(),
            labels: Vec::new(),
            realized: Sequence::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.examples.len()
    }

    pub fn flip_count(&self) -> usize {
        self.flip_mask.iter().filter(|f| **f).count()
    }

    /// The prompt followed by a test input.
    pub fn with_query(&self, x: &[Token]) -> Vec<Token> {
        let mut out = Vec::with_capacity(self.realized.len() + x.len());
        out.extend_from_slice(self.realized.tokens());
        out.extend_from_slice(x);
        out
    }
}

/// Concatenates the examples, flipping each label with probability
/// `flip_prob` to a uniformly chosen other non-delimiter token.
pub fn build_prompt<R: Rng + ?Sized>(
    alphabet: &Alphabet,
    examples: Vec<LabeledExample>,
    flip_prob: f64,
    rng: &mut R,
) -> Result<Prompt> {
    if !(0.0..=1.0).contains(&flip_prob) {
        return Err(Error::Usage(format!("flip probability {flip_prob} not in [0, 1]")));
    }
    let delimiter = alphabet.delimiter();
    let total: usize = examples.iter().map(|e| e.x.len() + 2).sum();
    let mut realized = Sequence::with_capacity(total);
    let mut flip_mask = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    for ex in &examples {
        let mut label = ex.y;
        let mut flipped = false;
        if flip_prob > 0.0 && rng.gen_bool(flip_prob) {
            let others: Vec<Token> = alphabet.label_tokens().filter(|t| *t != ex.y).collect();
            if !others.is_empty() {
                label = others[rng.gen_range(0..others.len())];
                flipped = true;
            }
        }
        realized.extend_from_slice(&ex.x);
        realized.push(label);
        realized.push_inserted(delimiter);
        flip_mask.push(flipped);
        labels.push(label);
    }
    Ok(Prompt {
        examples,
        flip_mask,
        labels,
        realized,
    })
}

/// Highest-probability non-delimiter token; ties go to the lowest id.
pub fn argmax_label(row: &[f64], alphabet: &Alphabet) -> Token {
    let mut best: Option<Token> = None;
    for t in alphabet.label_tokens() {
        match best {
            Some(b) if row[t.index()] <= row[b.index()] => {}
            _ => best = Some(t),
        }
    }
    best.expect("alphabet has at least one label token")
}

/// Top label and its gap to the runner-up (0 when only one label exists).
pub fn top_two(row: &[f64], alphabet: &Alphabet) -> (Token, Option<Token>, f64) {
    let best = argmax_label(row, alphabet);
    let runner = alphabet
        .label_tokens()
        .filter(|t| *t != best)
        .fold(None::<Token>, |acc, t| match acc {
            Some(a) if row[t.index()] <= row[a.index()] => Some(a),
            _ => Some(t),
        });
    let gap = runner.map_or(0.0, |r| row[best.index()] - row[r.index()]);
    (best, runner, gap)
}

/// The in-context prediction: most likely label after `prompt ⊕ x`.
pub fn icl_predict(model: &dyn SequenceModel, prompt: &Prompt, x: &[Token]) -> Token {
    let row = model.next_token_log_row(&prompt.with_query(x));
    argmax_label(&row, model.alphabet())
}

pub fn bayes_predict(concept: &MarkovConcept, x: &[Token]) -> Token {
    argmax_label(&task_row(concept, x), concept.alphabet())
}

/// Raw conditional `P_phi(. | x)`.
pub fn task_row(concept: &MarkovConcept, x: &[Token]) -> Vec<f64> {
    let state = crate::concept::ChainState::from_prefix(x, concept.alphabet().delimiter());
    concept.row(state).to_vec()
}

/// `1 - max_y P(y | x)` with the label distribution restricted to non-delimiters.
fn pointwise_bayes_error(concept: &MarkovConcept, x: &[Token]) -> f64 {
    let row = task_row(concept, x);
    let alphabet = concept.alphabet();
    let mass: f64 = alphabet.label_tokens().map(|t| row[t.index()]).sum();
    1.0 - row[argmax_label(&row, alphabet).index()] / mass
}

/// Bayes error of the task, exact for history-free concepts and Monte Carlo
/// over task inputs otherwise.
pub fn bayes_error_rate<R: Rng + ?Sized>(
    concept: &MarkovConcept,
    length: usize,
    num_samples: usize,
    rng: &mut R,
) -> Result<Estimate> {
    if num_samples == 0 {
        return Err(Error::Usage("bayes_error_rate needs num_samples >= 1".into()));
    }
    if length < 2 {
        return Err(Error::Usage(format!("task examples need T >= 2, got {length}")));
    }
    if concept.is_history_free() {
        return Ok(Estimate::exact(pointwise_bayes_error(concept, &[])));
    }
    let values = (0..num_samples)
        .map(|_| sample_task_example(concept, length, rng).map(|e| pointwise_bayes_error(concept, &e.x)))
        .collect::<Result<Vec<_>>>()?;
    Ok(normal_estimate(&values))
}

/// `P_phi(y | x) - P_phi(y_alt | x)` on raw conditionals.
pub fn margin_task(concept: &MarkovConcept, x: &[Token], y: Token, y_alt: Token) -> f64 {
    let row = task_row(concept, x);
    row[y.index()] - row[y_alt.index()]
}

/// `P(y | p ⊕ x) - P(y_alt | p ⊕ x)` under any conditional source.
pub fn margin_prompted(model: &dyn SequenceModel, prompt: &Prompt, x: &[Token], y: Token, y_alt: Token) -> f64 {
    let row = model.next_token_row(&prompt.with_query(x));
    row[y.index()] - row[y_alt.index()]
}

/// Everything one prediction trial produces.
#[derive(Debug, Clone)]
pub struct PredictionTrial {
    pub seed: u64,
    pub flip_count: usize,
    pub x: Vec<Token>,
    pub truth: Token,
    pub pred: Token,
    pub bayes: Token,
    /// Bayes label's raw margin over the runner-up under the task concept.
    pub task_margin: f64,
    /// Same label pair, conditioned on the prompt, under the model.
    pub prompted_margin: f64,
}

impl PredictionTrial {
    pub fn loss(&self) -> f64 {
        f64::from(self.pred != self.truth)
    }

    pub fn bayes_loss(&self) -> f64 {
        f64::from(self.bayes != self.truth)
    }
}

/// Fresh prompt of `k` task examples plus a fresh test pair, all drawn from
/// generators derived from `seed`.
pub fn prediction_trial(
    model: &dyn SequenceModel,
    task: &MarkovConcept,
    k: usize,
    flip_prob: f64,
    length: usize,
    seed: u64,
) -> Result<PredictionTrial> {
    let mut example_rng = rng_from_parts(&[seed, 0]);
    let mut flip_rng = rng_from_parts(&[seed, 1]);
    let mut test_rng = rng_from_parts(&[seed, 2]);
    let examples = (0..k)
        .map(|_| sample_task_example(task, length, &mut example_rng))
        .collect::<Result<Vec<_>>>()?;
    let prompt = build_prompt(task.alphabet(), examples, flip_prob, &mut flip_rng)?;
    let test = sample_task_example(task, length, &mut test_rng)?;

    let alphabet = task.alphabet();
    let row = task_row(task, &test.x);
    let (bayes, runner, task_margin) = top_two(&row, alphabet);
    let model_row = model.next_token_row(&prompt.with_query(&test.x));
    let pred = argmax_label(&model_row, alphabet);
    let prompted_margin = runner.map_or(0.0, |r| model_row[bayes.index()] - model_row[r.index()]);
    Ok(PredictionTrial {
        seed,
        flip_count: prompt.flip_count(),
        x: test.x,
        truth: test.y,
        pred,
        bayes,
        task_margin,
        prompted_margin,
    })
}

/// Monte Carlo 0-1 loss of the in-context predictor with a Wilson interval.
#[allow(clippy::too_many_arguments)]
pub fn in_context_loss(
    model: &dyn SequenceModel,
    task: &MarkovConcept,
    k: usize,
    flip_prob: f64,
    length: usize,
    num_trials: usize,
    base_seed: u64,
) -> Result<Estimate> {
    if num_trials == 0 {
        return Err(Error::Usage("in_context_loss needs num_trials >= 1".into()));
    }
    let trials = (0..num_trials as u64)
        .into_par_iter()
        .map(|i| prediction_trial(model, task, k, flip_prob, length, derive_seed(&[base_seed, i])))
        .collect::<Result<Vec<_>>>()?;
    let errors = trials.iter().filter(|t| t.pred != t.truth).count();
    Ok(wilson(errors, num_trials))
}
