//! Exact constants, closed-form sample complexities and proof checkpoints.
//!
//! All logarithms are natural.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::concept::{ChainState, MarkovConcept};
use crate::error::{Error, Result};
use crate::icl::{sample_task_example, top_two, LabelPolicy};
use crate::mixture::MixtureModel;
use crate::prob::{log_sum_exp_unchecked, Token};
use crate::stats::{normal_estimate, Estimate};

/// Dense occupancy over [`ChainState`] indices.
struct StateSpace {
    v: usize,
    delimiter: Token,
    states: Vec<Option<ChainState>>,
}

impl StateSpace {
    fn new(concept: &MarkovConcept) -> Self {
        let alphabet = concept.alphabet();
        Self {
            v: alphabet.size(),
            delimiter: alphabet.delimiter(),
            states: ChainState::all(alphabet),
        }
    }

    fn start(&self) -> Vec<f64> {
        let mut occ = vec![0.0; self.states.len()];
        occ[ChainState::Start.index(self.v)] = 1.0;
        occ
    }

    fn live(&self, occ: &[f64]) -> impl Iterator<Item = (ChainState, f64)> + '_ {
        let states = &self.states;
        occ.iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(i, p)| (states[i].expect("occupied state exists"), *p))
            .collect::<Vec<_>>()
            .into_iter()
    }

    fn step(&self, concept: &MarkovConcept, occ: &[f64]) -> Vec<f64> {
        let mut next = vec![0.0; occ.len()];
        for (s, p) in self.live(occ) {
            for (b, q) in concept.row(s).iter().enumerate() {
                next[s.advance(Token(b as u32), self.delimiter).index(self.v)] += p * q;
            }
        }
        next
    }
}

fn row_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
}

fn same_alphabet(a: &MarkovConcept, b: &MarkovConcept) -> Result<()> {
    if a.alphabet() != b.alphabet() {
        return Err(Error::Usage("concepts use different alphabets".into()));
    }
    Ok(())
}

/// `KL(P_star || P_other)` over length-`length` sequences, by propagating the
/// state occupancy of `star` and summing per-row divergences.
pub fn kl_sequences(star: &MarkovConcept, other: &MarkovConcept, length: usize) -> Result<f64> {
    same_alphabet(star, other)?;
    if length == 0 {
        return Err(Error::Usage("sequence KL needs T >= 1".into()));
    }
    let space = StateSpace::new(star);
    let mut occ = space.start();
    let mut total = 0.0;
    for t in 0..length {
        for (s, p) in space.live(&occ) {
            total += p * row_kl(star.row(s), other.row(s));
        }
        if t + 1 < length {
            occ = space.step(star, &occ);
        }
    }
    Ok(total)
}

/// Sampling estimate of the same divergence, as an independent cross-check.
pub fn kl_monte_carlo<R: Rng + ?Sized>(
    star: &MarkovConcept,
    other: &MarkovConcept,
    length: usize,
    num_samples: usize,
    rng: &mut R,
) -> Result<Estimate> {
    same_alphabet(star, other)?;
    if num_samples == 0 {
        return Err(Error::Usage("kl_monte_carlo needs num_samples >= 1".into()));
    }
    let values: Vec<f64> = (0..num_samples)
        .map(|_| {
            let s = star.sample_sequence(length, rng);
            star.seq_log_prob(&s) - other.seq_log_prob(&s)
        })
        .collect();
    Ok(normal_estimate(&values))
}

/// Exact mean of `ln P_other(x y d) / P_star(x y d)` for one prompt example
/// `x y` drawn from `star` under `policy`, including the appended delimiter.
///
/// With exact reset (no leak) prompt examples are independent, so `k` times
/// this value is the expected prompt log-ratio.
pub fn expected_example_log_ratio(
    star: &MarkovConcept,
    other: &MarkovConcept,
    length: usize,
    policy: LabelPolicy,
) -> Result<f64> {
    same_alphabet(star, other)?;
    if length < 2 {
        return Err(Error::Usage(format!("task examples need T >= 2, got {length}")));
    }
    let space = StateSpace::new(star);
    let d = space.delimiter;
    let n = space.states.len();
    let label_ok = |b: usize| policy == LabelPolicy::Unconditional || b != d.index();
    let log_ratio = |s: ChainState, b: usize| other.log_row(s)[b] - star.log_row(s)[b];

    // keep[t][s]: probability that the label survives, given state s before position t
    let mut keep = vec![vec![0.0; n]; length];
    for (i, st) in space.states.iter().enumerate() {
        if let Some(s) = st {
            keep[length - 1][i] = star
                .row(*s)
                .iter()
                .enumerate()
                .filter(|(b, _)| label_ok(*b))
                .map(|(_, p)| p)
                .sum();
        }
    }
    for t in (0..length - 1).rev() {
        for (i, st) in space.states.iter().enumerate() {
            if let Some(s) = st {
                keep[t][i] = star
                    .row(*s)
                    .iter()
                    .enumerate()
                    .map(|(b, p)| p * keep[t + 1][s.advance(Token(b as u32), d).index(space.v)])
                    .sum();
            }
        }
    }
    let z = keep[0][ChainState::Start.index(space.v)];

    let mut occ = space.start();
    let mut total = 0.0;
    for t in 0..length {
        let last = t + 1 == length;
        let mut next = vec![0.0; n];
        for (s, p) in space.live(&occ) {
            for (b, q) in star.row(s).iter().enumerate() {
                if last && !label_ok(b) {
                    continue;
                }
                let s2 = s.advance(Token(b as u32), d);
                let w = if last { 1.0 } else { keep[t + 1][s2.index(space.v)] };
                total += p * q * w * log_ratio(s, b);
                next[s2.index(space.v)] += p * q;
            }
        }
        occ = next;
    }
    // the inserted delimiter after the label
    for (s, p) in space.live(&occ) {
        total += p * log_ratio(s, d.index());
    }
    Ok(total / z)
}

/// Sequence-level KL from concept `star` to every other concept.
pub fn competitor_kls(mixture: &MixtureModel, star: usize, length: usize) -> Result<Vec<(usize, f64)>> {
    check_index(mixture, star)?;
    (0..mixture.len())
        .filter(|j| *j != star)
        .map(|j| kl_sequences(mixture.concept(star), mixture.concept(j), length).map(|kl| (j, kl)))
        .collect()
}

/// Minimum sequence KL from `star` to any other component.
pub fn delta_kl(mixture: &MixtureModel, star: usize, length: usize) -> Result<f64> {
    if mixture.len() < 2 {
        return Err(Error::Usage(
            "minimum KL to a competitor is undefined for a single-concept mixture".into(),
        ));
    }
    Ok(competitor_kls(mixture, star, length)?
        .into_iter()
        .map(|(_, kl)| kl)
        .fold(f64::INFINITY, f64::min))
}

fn check_index(mixture: &MixtureModel, star: usize) -> Result<()> {
    if star >= mixture.len() {
        return Err(Error::Usage(format!(
            "concept index {star} out of range for {} concepts",
            mixture.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum MarginMode {
    /// Every input sequence; limited to `V^(T-1) <= 10^6`.
    Enumeration,
    /// Sampled task inputs.
    MonteCarlo { samples: usize, seed: u64 },
    /// Every chain state reachable after `T - 1` tokens. Exact for any `T`.
    ChainStates,
}

const ENUMERATION_LIMIT: f64 = 1e6;

/// Smallest raw gap between the Bayes label and the runner-up over task inputs.
pub fn min_task_margin(concept: &MarkovConcept, length: usize, mode: MarginMode) -> Result<f64> {
    if length < 2 {
        return Err(Error::Usage(format!("task examples need T >= 2, got {length}")));
    }
    let alphabet = concept.alphabet();
    let gap = |s: ChainState| top_two(concept.row(s), alphabet).2;
    match mode {
        MarginMode::Enumeration => {
            let v = alphabet.size();
            let count = (v as f64).powi(length as i32 - 1);
            if count > ENUMERATION_LIMIT {
                return Err(Error::Usage(format!(
                    "{count:.3e} inputs exceed the enumeration limit; use monte-carlo or chain-states"
                )));
            }
            let mut best = f64::INFINITY;
            let mut x = vec![Token(0); length - 1];
            'outer: loop {
                best = best.min(gap(ChainState::from_prefix(&x, alphabet.delimiter())));
                for slot in x.iter_mut() {
                    if slot.index() + 1 < v {
                        slot.0 += 1;
                        continue 'outer;
                    }
                    *slot = Token(0);
                }
                break;
            }
            Ok(best)
        }
        MarginMode::MonteCarlo { samples, seed } => {
            if samples == 0 {
                return Err(Error::Usage("monte-carlo margin needs samples >= 1".into()));
            }
            let mut rng = crate::seed::rng_from_seed(seed);
            let mut best = f64::INFINITY;
            for _ in 0..samples {
                let ex = sample_task_example(concept, length, &mut rng)?;
                best = best.min(gap(ChainState::from_prefix(&ex.x, alphabet.delimiter())));
            }
            Ok(best)
        }
        MarginMode::ChainStates => {
            let space = StateSpace::new(concept);
            let mut occ = space.start();
            for _ in 0..length - 1 {
                occ = space.step(concept, &occ);
            }
            Ok(space.live(&occ).map(|(s, _)| gap(s)).fold(f64::INFINITY, f64::min))
        }
    }
}

/// The two terms of the closed-form prompt-length requirement and their
/// rounded-up maximum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleComplexity {
    /// `ln(1/delta) * 16 T^2 ln^2(1/c2) / KL^2`
    pub confidence_term: f64,
    /// `2 ln(1/eps) / (KL - 8 ln(1/(c1 c2)))`
    pub accuracy_term: f64,
    pub k: u64,
}

pub const LEMMA1_CONDITION: &str = "Δ_KL > 8·ln(1/(c1c2))";

/// Number of in-context examples after which the prompt-probability ratio
/// of every competitor is below `epsilon` with probability `1 - delta`.
pub fn lemma1_sample_complexity(
    delta: f64,
    epsilon: f64,
    c1: f64,
    c2: f64,
    length: usize,
    kl: f64,
) -> Result<SampleComplexity> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Usage(format!("delta {delta} not in (0, 1)")));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Usage(format!("epsilon {epsilon} not in (0, 1)")));
    }
    if !(c1 > 0.0 && c1 <= 1.0) || !(c2 > 0.0 && c2 < 1.0) {
        return Err(Error::Usage(format!("constants out of range: c1={c1}, c2={c2}")));
    }
    let drift = 8.0 * (1.0 / (c1 * c2)).ln();
    if kl.is_nan() || kl <= drift {
        return Err(Error::ConditionViolated {
            name: LEMMA1_CONDITION.into(),
            lhs: kl,
            rhs: drift,
        });
    }
    let t = length as f64;
    let confidence_term = (1.0 / delta).ln() * 16.0 * t * t * (1.0 / c2).ln().powi(2) / (kl * kl);
    let accuracy_term = 2.0 * (1.0 / epsilon).ln() / (kl - drift);
    Ok(SampleComplexity {
        confidence_term,
        accuracy_term,
        k: confidence_term.max(accuracy_term).ceil() as u64,
    })
}

/// Per-competitor ratio target that makes the margin argument go through:
/// `ln(margin / (5 c1^-2 c2^-T c3^-1))`.
pub fn ln_ratio_threshold(margin: f64, c1: f64, c2: f64, c3: f64, length: usize) -> f64 {
    margin.ln() - 5f64.ln() + 2.0 * c1.ln() + length as f64 * c2.ln() + c3.ln()
}

/// Prompt lengths that guarantee the margin-preservation conclusion for a
/// task margin, by the two available routes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginThresholds {
    /// Closed form evaluated at `epsilon = margin / 2`.
    pub half_margin: SampleComplexity,
    /// Closed form evaluated at the per-competitor target `eps_tilde`.
    pub eps_tilde: SampleComplexity,
    pub ln_eps_tilde: f64,
    pub k: u64,
}

pub fn margin_thresholds(constants: &ScenarioConstants, margin: f64, delta: f64) -> Result<MarginThresholds> {
    let c = constants;
    let half_margin = lemma1_sample_complexity(delta, (margin / 2.0).min(0.999_999), c.c1, c.c2, c.length, c.delta_kl)?;
    let ln_eps = ln_ratio_threshold(margin, c.c1, c.c2, c.c3, c.length);
    // the closed form only needs ln(1/eps), so evaluate it in log space
    let mut eps_tilde = lemma1_sample_complexity(delta, 0.5, c.c1, c.c2, c.length, c.delta_kl)?;
    eps_tilde.accuracy_term = 2.0 * (-ln_eps) / (c.delta_kl - 8.0 * (1.0 / (c.c1 * c.c2)).ln());
    eps_tilde.k = eps_tilde.confidence_term.max(eps_tilde.accuracy_term).ceil() as u64;
    Ok(MarginThresholds {
        half_margin,
        eps_tilde,
        ln_eps_tilde: ln_eps,
        k: half_margin.k.max(eps_tilde.k),
    })
}

/// Every constant the guarantees consume, for one downstream concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConstants {
    pub star: usize,
    pub length: usize,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    /// Minimum sequence KL to a competitor (nats); infinite without competitors.
    pub delta_kl: f64,
    pub min_task_margin: f64,
    /// `kl_table[i][j] = KL(P_i || P_j)` over length-T sequences.
    pub kl_table: Vec<Vec<f64>>,
}

pub fn scenario_constants(mixture: &MixtureModel, star: usize, length: usize) -> Result<ScenarioConstants> {
    check_index(mixture, star)?;
    let c1 = mixture
        .concepts()
        .iter()
        .map(MarkovConcept::compute_c1)
        .fold(f64::INFINITY, f64::min);
    let c2 = mixture
        .concepts()
        .iter()
        .map(MarkovConcept::compute_c2)
        .fold(f64::INFINITY, f64::min);
    let n = mixture.len();
    let mut kl_table = vec![vec![0.0; n]; n];
    for (i, row) in kl_table.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            if i != j {
                *cell = kl_sequences(mixture.concept(i), mixture.concept(j), length)?;
            }
        }
    }
    let delta_kl = (0..n)
        .filter(|j| *j != star)
        .map(|j| kl_table[star][j])
        .fold(f64::INFINITY, f64::min);
    Ok(ScenarioConstants {
        star,
        length,
        c1,
        c2,
        c3: mixture.compute_c3(),
        delta_kl,
        min_task_margin: min_task_margin(mixture.concept(star), length, MarginMode::ChainStates)?,
        kl_table,
    })
}

/// One inequality with both sides evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
    pub slack: f64,
}

impl ConditionCheck {
    fn greater(name: &str, lhs: f64, rhs: f64, strict: bool) -> Self {
        let pass = if strict { lhs > rhs } else { lhs >= rhs };
        Self {
            name: name.into(),
            lhs,
            rhs,
            pass,
            slack: lhs - rhs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptReport {
    pub concept: usize,
    pub constants: ScenarioConstants,
    pub conditions: Vec<ConditionCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub length: usize,
    pub concepts: Vec<ConceptReport>,
    pub all_pass: bool,
}

impl ConditionReport {
    pub fn failures(&self) -> impl Iterator<Item = (usize, &ConditionCheck)> {
        self.concepts
            .iter()
            .flat_map(|c| c.conditions.iter().filter(|k| !k.pass).map(move |k| (c.concept, k)))
    }
}

/// Evaluates, for every concept as the downstream task: the margin floor
/// `4(1 - c1^2)`, the KL separation `ln(1/(c1 c2))`, the stronger
/// `8 ln(1/(c1 c2))` and prior positivity.
pub fn check_theorem2_conditions(mixture: &MixtureModel, length: usize) -> Result<ConditionReport> {
    let concepts = (0..mixture.len())
        .map(|star| {
            let k = scenario_constants(mixture, star, length)?;
            let drift = (1.0 / (k.c1 * k.c2)).ln();
            let conditions = vec![
                ConditionCheck::greater(
                    "min task margin ≥ 4·(1 − c1²)",
                    k.min_task_margin,
                    4.0 * (1.0 - k.c1 * k.c1),
                    false,
                ),
                ConditionCheck::greater("Δ_KL > ln(1/(c1c2))", k.delta_kl, drift, true),
                ConditionCheck::greater(LEMMA1_CONDITION, k.delta_kl, 8.0 * drift, true),
                ConditionCheck::greater("c3 > 0", k.c3, 0.0, true),
            ];
            Ok(ConceptReport {
                concept: star,
                constants: k,
                conditions,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let all_pass = concepts.iter().all(|c| c.conditions.iter().all(|k| k.pass));
    Ok(ConditionReport {
        length,
        concepts,
        all_pass,
    })
}

/// A real number stored as sign and log-magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignedLog {
    pub sign: i8,
    pub ln_abs: f64,
}

impl SignedLog {
    /// `exp(ln_pos) - exp(ln_neg)`
    fn difference(ln_pos: f64, ln_neg: f64) -> Self {
        if ln_pos == ln_neg {
            return Self {
                sign: 0,
                ln_abs: f64::NEG_INFINITY,
            };
        }
        let (sign, hi, lo) = if ln_pos > ln_neg {
            (1, ln_pos, ln_neg)
        } else {
            (-1, ln_neg, ln_pos)
        };
        Self {
            sign,
            ln_abs: hi + (-(lo - hi).exp()).ln_1p(),
        }
    }

    fn positive(ln: f64) -> Self {
        Self { sign: 1, ln_abs: ln }
    }

    /// `self / other` as a plain number.
    pub fn ratio(&self, other: &SignedLog) -> f64 {
        if self.sign == 0 {
            return 0.0;
        }
        f64::from(self.sign * other.sign) * (self.ln_abs - other.ln_abs).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompetitorRatio {
    pub concept: usize,
    /// `ln P_phi(p) / P_star(p)`
    pub ln_ratio: f64,
    pub below_threshold: bool,
}

/// The margin lower bound split into the downstream concept's terms (A, C)
/// and everyone else's (B, D).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbcdRecord {
    pub a: SignedLog,
    pub b: SignedLog,
    pub c: SignedLog,
    pub d: SignedLog,
    pub a_over_c: f64,
    pub b_over_c: f64,
    pub d_over_c: f64,
    pub task_margin: f64,
    pub c1: f64,
    /// `|B/C| < task_margin / 5`
    pub b_small: bool,
    /// `|D/C| < 1/4`
    pub d_small: bool,
    pub ln_eps_tilde: f64,
    pub competitors: Vec<CompetitorRatio>,
    /// `(A + B) / (C + D)`: never above the true prompted margin.
    pub lower_bound: f64,
    /// `3/4 A/C - 5/4 |B/C|`, valid once both flags hold.
    pub checkpoint_bound: f64,
    /// `task_margin / 2 + c1^2 - 1`
    pub target: f64,
}

pub fn abcd_decomposition(
    mixture: &MixtureModel,
    star: usize,
    prompt: &[Token],
    x: &[Token],
    y: Token,
    y_alt: Token,
) -> Result<AbcdRecord> {
    check_index(mixture, star)?;
    if mixture.len() < 2 {
        return Err(Error::Usage("decomposition needs at least one competitor".into()));
    }
    let alphabet = mixture.alphabet();
    alphabet.check(y)?;
    alphabet.check(y_alt)?;
    let c1 = mixture
        .concepts()
        .iter()
        .map(MarkovConcept::compute_c1)
        .fold(f64::INFINITY, f64::min);
    let c2 = mixture
        .concepts()
        .iter()
        .map(MarkovConcept::compute_c2)
        .fold(f64::INFINITY, f64::min);
    let c3 = mixture.compute_c3();
    let ln_c1_sq = 2.0 * c1.ln();

    let with = |t: Token| {
        let mut s = x.to_vec();
        s.push(t);
        s
    };
    let (xy, xy_alt) = (with(y), with(y_alt));
    struct Terms {
        prompt: f64,
        x: f64,
        xy: f64,
        xy_alt: f64,
    }
    let terms: Vec<Terms> = mixture
        .concepts()
        .iter()
        .zip(mixture.log_prior())
        .map(|(c, lp)| Terms {
            prompt: lp + c.seq_log_prob(prompt),
            x: c.seq_log_prob(x),
            xy: c.seq_log_prob(&xy),
            xy_alt: c.seq_log_prob(&xy_alt),
        })
        .collect();

    let s = &terms[star];
    let a = SignedLog::difference(s.prompt + ln_c1_sq + s.xy, s.prompt - ln_c1_sq + s.xy_alt);
    let c = SignedLog::positive(s.prompt + s.x);
    let others: Vec<&Terms> = terms
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != star)
        .map(|(_, t)| t)
        .collect();
    let lse = |f: &dyn Fn(&Terms) -> f64| log_sum_exp_unchecked(&others.iter().map(|t| f(t)).collect::<Vec<_>>());
    let b = SignedLog::difference(
        lse(&|t| t.prompt + ln_c1_sq + t.xy),
        lse(&|t| t.prompt - ln_c1_sq + t.xy_alt),
    );
    let d = SignedLog::positive(lse(&|t| t.prompt + t.x));

    let (a_over_c, b_over_c, d_over_c) = (a.ratio(&c), b.ratio(&c), d.ratio(&c));
    let task_margin = (s.xy - s.x).exp() - (s.xy_alt - s.x).exp();
    let ln_eps_tilde = ln_ratio_threshold(task_margin, c1, c2, c3, x.len() + 1);
    let star_prompt = s.prompt - mixture.log_prior()[star];
    let competitors = (0..mixture.len())
        .filter(|j| *j != star)
        .map(|j| {
            let ln_ratio = terms[j].prompt - mixture.log_prior()[j] - star_prompt;
            CompetitorRatio {
                concept: j,
                ln_ratio,
                below_threshold: ln_ratio < ln_eps_tilde,
            }
        })
        .collect();
    Ok(AbcdRecord {
        a,
        b,
        c,
        d,
        a_over_c,
        b_over_c,
        d_over_c,
        task_margin,
        c1,
        b_small: b_over_c.abs() < task_margin / 5.0,
        d_small: d_over_c.abs() < 0.25,
        ln_eps_tilde,
        competitors,
        lower_bound: (a_over_c + b_over_c) / (1.0 + d_over_c),
        checkpoint_bound: 0.75 * a_over_c - 1.25 * b_over_c.abs(),
        target: task_margin / 2.0 + c1 * c1 - 1.0,
    })
}
