//! Verification campaigns: prompt-ratio decay, margin preservation and regret.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    expected_example_log_ratio, lemma1_sample_complexity, margin_thresholds, scenario_constants, MarginThresholds,
    SampleComplexity, ScenarioConstants,
};
use crate::em::{fit_empirical, EmConfig, EmFamily};
use crate::error::{Error, Result};
use crate::icl::{
    argmax_label, bayes_error_rate, build_prompt, margin_prompted, margin_task, prediction_trial, sample_task_example,
    sample_task_example_with, task_row, top_two, LabelPolicy,
};
use crate::mixture::MixtureModel;
use crate::model::{model_tv_error, ExactModel, PerturbedModel, SequenceModel};
use crate::prob::{Sequence, Token};
use crate::seed::{derive_seed, rng_from_parts};
use crate::stats::{mean_se, median, normal_estimate, wilson, Estimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Campaign {
    Lemma1,
    Theorem1,
    Regret,
}

impl Campaign {
    fn id(self) -> u64 {
        match self {
            Campaign::Lemma1 => 1,
            Campaign::Theorem1 => 2,
            Campaign::Regret => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Campaign::Lemma1 => "lemma1",
            Campaign::Theorem1 => "theorem1",
            Campaign::Regret => "regret",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ModelKind {
    Exact,
    /// Every conditional moved by exactly `delta` in total variation.
    Perturbed {
        delta: f64,
    },
    /// EM fit on `n_docs` sampled pretraining documents with add-`alpha` smoothing.
    Empirical {
        n_docs: usize,
        alpha: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: String,
    pub model: ModelKind,
    pub k_grid: Vec<usize>,
    pub flip_grid: Vec<f64>,
    #[serde(rename = "T")]
    pub length: usize,
    pub num_trials: usize,
    pub base_seed: u64,
    /// Confidence target: guarantees hold with probability `1 - delta`.
    pub delta: f64,
    pub epsilon: f64,
    /// Downstream task concept.
    pub task: usize,
    /// Run even when the prompt-ratio separation condition fails.
    pub allow_infeasible: bool,
}

impl ExperimentConfig {
    pub fn new(scenario: impl Into<String>, length: usize) -> Self {
        Self {
            scenario: scenario.into(),
            model: ModelKind::Exact,
            k_grid: vec![0, 1, 2, 5, 10, 20, 50],
            flip_grid: vec![0.0],
            length,
            num_trials: 1000,
            base_seed: 0,
            delta: 0.1,
            epsilon: 0.01,
            task: 0,
            allow_infeasible: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_grid.is_empty() {
            return Err(Error::Usage("k grid is empty".into()));
        }
        if self.flip_grid.is_empty() {
            return Err(Error::Usage("flip probability grid is empty".into()));
        }
        if let Some(r) = self.flip_grid.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::Usage(format!("flip probability {r} not in [0, 1]")));
        }
        if self.num_trials == 0 {
            return Err(Error::Usage("num_trials must be at least 1".into()));
        }
        if self.length < 2 {
            return Err(Error::Usage(format!("task examples need T >= 2, got {}", self.length)));
        }
        Ok(())
    }

    fn trial_seed(&self, campaign: Campaign, k: usize, trial: u64) -> u64 {
        derive_seed(&[self.base_seed, campaign.id(), k as u64, trial])
    }
}

/// One CSV row. Columns a campaign does not produce are left empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub trial: u64,
    pub k: usize,
    pub flip_count: usize,
    pub competitor: Option<usize>,
    /// `ln P_competitor(p) / P_task(p)` for the whole prompt.
    pub log_ratio: Option<f64>,
    pub task_margin: Option<f64>,
    pub prompted_margin: Option<f64>,
    pub pred: Option<u32>,
    #[serde(rename = "true")]
    pub truth: Option<u32>,
    pub bayes: Option<u32>,
    pub loss: Option<f64>,
    pub seed: u64,
}

impl ExperimentRecord {
    fn blank(trial: u64, k: usize, flip_count: usize, seed: u64) -> Self {
        Self {
            trial,
            k,
            flip_count,
            competitor: None,
            log_ratio: None,
            task_margin: None,
            prompted_margin: None,
            pred: None,
            truth: None,
            bayes: None,
            loss: None,
            seed,
        }
    }
}

/// All records produced under one label-flip probability.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordSet {
    pub flip_prob: f64,
    pub records: Vec<ExperimentRecord>,
}

pub const CSV_HEADER: &str =
    "trial,k,flip_count,competitor,log_ratio,task_margin,prompted_margin,pred,true,bayes,loss,seed";

pub fn write_records_csv<W: Write>(writer: W, records: &[ExperimentRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(CSV_HEADER.split(','))?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv<R: std::io::Read>(reader: R) -> Result<Vec<ExperimentRecord>> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// A trained or idealized model together with its measured conditional error.
pub struct BuiltModel {
    pub model: Box<dyn SequenceModel>,
    pub kind: ModelKind,
    /// Largest TV distance to the true conditionals over the probe set.
    pub tv_error: f64,
}

/// Pretraining-shaped and prompt-shaped prefixes for measuring conditional error.
pub fn probe_prefixes(
    mixture: &MixtureModel,
    task: usize,
    length: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<Token>>> {
    let mut rng = rng_from_parts(&[seed, 0x9e0b]);
    let concept = mixture.concept(task);
    let mut probes = Vec::with_capacity(count);
    for i in 0..count {
        if i % 2 == 0 {
            let n = rng.gen_range(0..=2 * length);
            probes.push(mixture.sample_pretraining_doc(n, &mut rng).0.tokens().to_vec());
        } else {
            let k = rng.gen_range(0..=5);
            let examples = (0..k)
                .map(|_| sample_task_example(concept, length, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let prompt = build_prompt(mixture.alphabet(), examples, 0.0, &mut rng)?;
            let query = sample_task_example(concept, length, &mut rng)?;
            let cut = rng.gen_range(0..=query.x.len());
            probes.push(prompt.with_query(&query.x[..cut]));
        }
    }
    Ok(probes)
}

const PROBE_COUNT: usize = 400;

pub fn build_model(kind: ModelKind, mixture: &MixtureModel, config: &ExperimentConfig) -> Result<BuiltModel> {
    let model: Box<dyn SequenceModel> = match kind {
        ModelKind::Exact => Box::new(crate::model::exact_model(mixture.clone())),
        ModelKind::Perturbed { delta } => Box::new(PerturbedModel::new(
            mixture.clone(),
            delta,
            derive_seed(&[config.base_seed, 0x7e57]),
        )?),
        ModelKind::Empirical { n_docs, alpha } => {
            if n_docs == 0 {
                return Err(Error::Usage(
                    "empirical model needs at least one pretraining document".into(),
                ));
            }
            let mut rng = rng_from_parts(&[config.base_seed, 0xe1]);
            let docs: Vec<Sequence> = (0..n_docs)
                .map(|_| mixture.sample_pretraining_doc(config.length, &mut rng).0)
                .collect();
            let family = if mixture.concepts().iter().all(|c| c.is_history_free()) {
                EmFamily::Iid
            } else {
                EmFamily::Markov
            };
            let em = EmConfig {
                num_components: mixture.len(),
                smoothing: alpha,
                family,
                ..EmConfig::default()
            };
            Box::new(fit_empirical(&docs, *mixture.alphabet(), &em, &mut rng)?)
        }
    };
    let probes = probe_prefixes(mixture, config.task, config.length, PROBE_COUNT, config.base_seed)?;
    let tv_error = model_tv_error(model.as_ref(), mixture, &probes)?;
    Ok(BuiltModel { model, kind, tv_error })
}

fn check_feasible(constants: &ScenarioConstants, config: &ExperimentConfig) -> Result<Option<SampleComplexity>> {
    let c = constants;
    match lemma1_sample_complexity(config.delta, config.epsilon, c.c1, c.c2, c.length, c.delta_kl) {
        Ok(b) => Ok(Some(b)),
        Err(e @ Error::ConditionViolated { .. }) if !config.allow_infeasible => Err(e),
        Err(Error::ConditionViolated { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Runs `trial(k, index, seed)` for every grid cell in parallel and returns
/// the rows in grid order.
fn run_grid<F>(config: &ExperimentConfig, campaign: Campaign, trial: F) -> Result<Vec<ExperimentRecord>>
where
    F: Fn(usize, u64, u64) -> Result<Vec<ExperimentRecord>> + Sync,
{
    let cells: Vec<(usize, u64)> = config
        .k_grid
        .iter()
        .flat_map(|&k| (0..config.num_trials as u64).map(move |i| (k, i)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(k, i)| trial(k, i, config.trial_seed(campaign, k, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(rows.into_iter().flatten().collect())
}

/// Prompt-ratio decay. Examples are drawn without conditioning on the label,
/// so the per-example expectation is exactly the negative sequence KL for
/// reset-exact concepts.
pub fn run_lemma1(mixture: &MixtureModel, config: &ExperimentConfig) -> Result<Vec<RecordSet>> {
    config.validate()?;
    let constants = scenario_constants(mixture, config.task, config.length)?;
    check_feasible(&constants, config)?;
    let star = mixture.concept(config.task);
    let alphabet = mixture.alphabet();
    config
        .flip_grid
        .iter()
        .map(|&rho| {
            let records = run_grid(config, Campaign::Lemma1, |k, trial, seed| {
                let mut example_rng = rng_from_parts(&[seed, 0]);
                let mut flip_rng = rng_from_parts(&[seed, 1]);
                let examples = (0..k)
                    .map(|_| {
                        sample_task_example_with(star, config.length, LabelPolicy::Unconditional, &mut example_rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let prompt = build_prompt(alphabet, examples, rho, &mut flip_rng)?;
                let base = star.seq_log_prob(&prompt.realized);
                Ok((0..mixture.len())
                    .filter(|j| *j != config.task)
                    .map(|j| ExperimentRecord {
                        competitor: Some(j),
                        log_ratio: Some(mixture.concept(j).seq_log_prob(&prompt.realized) - base),
                        ..ExperimentRecord::blank(trial, k, prompt.flip_count(), seed)
                    })
                    .collect())
            })?;
            Ok(RecordSet {
                flip_prob: rho,
                records,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "pair")]
pub enum PairSelector {
    /// The Bayes label against the runner-up of the task conditional.
    BayesRunnerUp,
    Fixed {
        y: u32,
        y_alt: u32,
    },
}

/// Margin preservation under a prompt of `k` task examples.
pub fn run_theorem1(
    model: &dyn SequenceModel,
    mixture: &MixtureModel,
    config: &ExperimentConfig,
    selector: PairSelector,
) -> Result<Vec<RecordSet>> {
    config.validate()?;
    let constants = scenario_constants(mixture, config.task, config.length)?;
    check_feasible(&constants, config)?;
    let star = mixture.concept(config.task);
    let alphabet = mixture.alphabet();
    if let PairSelector::Fixed { y, y_alt } = selector {
        alphabet.check(Token(y))?;
        alphabet.check(Token(y_alt))?;
    }
    config
        .flip_grid
        .iter()
        .map(|&rho| {
            let records = run_grid(config, Campaign::Theorem1, |k, trial, seed| {
                let mut example_rng = rng_from_parts(&[seed, 0]);
                let mut flip_rng = rng_from_parts(&[seed, 1]);
                let mut test_rng = rng_from_parts(&[seed, 2]);
                let examples = (0..k)
                    .map(|_| sample_task_example(star, config.length, &mut example_rng))
                    .collect::<Result<Vec<_>>>()?;
                let prompt = build_prompt(alphabet, examples, rho, &mut flip_rng)?;
                let test = sample_task_example(star, config.length, &mut test_rng)?;
                let row = task_row(star, &test.x);
                let (bayes, runner, _) = top_two(&row, alphabet);
                let (y, y_alt) = match selector {
                    PairSelector::BayesRunnerUp => (bayes, runner.unwrap_or(bayes)),
                    PairSelector::Fixed { y, y_alt } => (Token(y), Token(y_alt)),
                };
                let model_row = model.next_token_row(&prompt.with_query(&test.x));
                let pred = argmax_label(&model_row, alphabet);
                Ok(vec![ExperimentRecord {
                    task_margin: Some(margin_task(star, &test.x, y, y_alt)),
                    prompted_margin: Some(margin_prompted(model, &prompt, &test.x, y, y_alt)),
                    pred: Some(pred.0),
                    truth: Some(test.y.0),
                    bayes: Some(bayes.0),
                    loss: Some(f64::from(pred != test.y)),
                    ..ExperimentRecord::blank(trial, k, prompt.flip_count(), seed)
                }])
            })?;
            Ok(RecordSet {
                flip_prob: rho,
                records,
            })
        })
        .collect()
}

/// In-context 0-1 loss of `model` per grid cell; `task_margin` holds the
/// Bayes label's lead over the runner-up.
pub fn run_regret_curve(
    model: &dyn SequenceModel,
    mixture: &MixtureModel,
    config: &ExperimentConfig,
) -> Result<Vec<RecordSet>> {
    config.validate()?;
    let star = mixture.concept(config.task);
    config
        .flip_grid
        .iter()
        .map(|&rho| {
            let records = run_grid(config, Campaign::Regret, |k, trial, seed| {
                let t = prediction_trial(model, star, k, rho, config.length, seed)?;
                Ok(vec![ExperimentRecord {
                    task_margin: Some(t.task_margin),
                    prompted_margin: Some(t.prompted_margin),
                    pred: Some(t.pred.0),
                    truth: Some(t.truth.0),
                    bayes: Some(t.bayes.0),
                    loss: Some(t.loss()),
                    ..ExperimentRecord::blank(trial, k, t.flip_count, seed)
                }])
            })?;
            Ok(RecordSet {
                flip_prob: rho,
                records,
            })
        })
        .collect()
}

/// Generic per-(k, competitor) aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub k: usize,
    pub competitor: Option<usize>,
    pub n: usize,
    pub mean_flip_count: f64,
    pub log_ratio: Option<Estimate>,
    pub log_ratio_se: Option<f64>,
    pub loss: Option<Estimate>,
    pub task_margin: Option<Estimate>,
    pub prompted_margin: Option<Estimate>,
}

/// Groups by `(k, competitor)` in ascending order.
pub fn summarize(records: &[ExperimentRecord]) -> Result<Vec<GroupSummary>> {
    if records.is_empty() {
        return Err(Error::Usage("no records to summarize".into()));
    }
    let mut groups: BTreeMap<(usize, Option<usize>), Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.k, r.competitor)).or_default().push(r);
    }
    let column = |rows: &[&ExperimentRecord], f: fn(&ExperimentRecord) -> Option<f64>| -> Vec<f64> {
        rows.iter().filter_map(|r| f(r)).collect()
    };
    Ok(groups
        .into_iter()
        .map(|((k, competitor), rows)| {
            let ratios = column(&rows, |r| r.log_ratio);
            let losses = column(&rows, |r| r.loss);
            let task = column(&rows, |r| r.task_margin);
            let prompted = column(&rows, |r| r.prompted_margin);
            let opt = |v: &[f64]| (!v.is_empty()).then(|| normal_estimate(v));
            GroupSummary {
                k,
                competitor,
                n: rows.len(),
                mean_flip_count: rows.iter().map(|r| r.flip_count as f64).sum::<f64>() / rows.len() as f64,
                log_ratio: opt(&ratios),
                log_ratio_se: (!ratios.is_empty()).then(|| mean_se(&ratios).1),
                loss: (!losses.is_empty()).then(|| wilson(losses.iter().filter(|l| **l > 0.5).count(), losses.len())),
                task_margin: opt(&task),
                prompted_margin: opt(&prompted),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Cell {
    pub flip_prob: f64,
    pub k: usize,
    pub competitor: usize,
    pub n: usize,
    pub mean_log_ratio: f64,
    pub se_log_ratio: f64,
    pub per_example_mean: Option<f64>,
    pub per_example_se: Option<f64>,
    /// Fraction of trials whose ratio fell below `epsilon`.
    pub below_epsilon: Estimate,
    pub mean_flip_count: f64,
}

/// Least-squares slope of mean log-ratio against `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Fit {
    pub flip_prob: f64,
    pub competitor: usize,
    pub slope: f64,
    pub kl: f64,
    /// Exact per-example expectation without flips.
    pub expected_slope: f64,
    pub band_lower: f64,
    pub band_upper: f64,
    pub in_band: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Summary {
    pub epsilon: f64,
    pub delta: f64,
    pub sample_complexity: Option<SampleComplexity>,
    pub cells: Vec<Lemma1Cell>,
    pub fits: Vec<Lemma1Fit>,
}

fn slope_through(points: &[(f64, f64)]) -> f64 {
    if points.len() == 1 {
        let (x, y) = points[0];
        return y / x;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    sxy / sxx
}

pub fn summarize_lemma1(
    mixture: &MixtureModel,
    config: &ExperimentConfig,
    sets: &[RecordSet],
) -> Result<Lemma1Summary> {
    let constants = scenario_constants(mixture, config.task, config.length)?;
    let star = mixture.concept(config.task);
    let half_width = 4.0 * (1.0 / (constants.c1 * constants.c2 * constants.c2)).ln();
    let ln_eps = config.epsilon.ln();
    let mut cells = Vec::new();
    let mut fits = Vec::new();
    for set in sets {
        let groups = summarize(&set.records)?;
        for g in &groups {
            let competitor = g.competitor.expect("prompt-ratio records carry a competitor");
            let ratios: Vec<f64> = set
                .records
                .iter()
                .filter(|r| r.k == g.k && r.competitor == g.competitor)
                .filter_map(|r| r.log_ratio)
                .collect();
            let (mean, se) = mean_se(&ratios);
            let below = ratios.iter().filter(|r| **r < ln_eps).count();
            cells.push(Lemma1Cell {
                flip_prob: set.flip_prob,
                k: g.k,
                competitor,
                n: g.n,
                mean_log_ratio: mean,
                se_log_ratio: se,
                per_example_mean: (g.k > 0).then(|| mean / g.k as f64),
                per_example_se: (g.k > 0).then(|| se / g.k as f64),
                below_epsilon: wilson(below, ratios.len()),
                mean_flip_count: g.mean_flip_count,
            });
        }
        for j in (0..mixture.len()).filter(|j| *j != config.task) {
            let points: Vec<(f64, f64)> = cells
                .iter()
                .filter(|c| c.flip_prob == set.flip_prob && c.competitor == j)
                .map(|c| (c.k as f64, c.mean_log_ratio))
                .collect();
            if points.iter().all(|p| p.0 == 0.0) {
                continue;
            }
            let slope = slope_through(&points);
            let kl = constants.kl_table[config.task][j];
            fits.push(Lemma1Fit {
                flip_prob: set.flip_prob,
                competitor: j,
                slope,
                kl,
                expected_slope: expected_example_log_ratio(
                    star,
                    mixture.concept(j),
                    config.length,
                    LabelPolicy::Unconditional,
                )?,
                band_lower: -kl - half_width,
                band_upper: -kl + half_width,
                in_band: (-kl - half_width..=-kl + half_width).contains(&slope),
            });
        }
    }
    let sample_complexity = check_feasible(
        &constants,
        &ExperimentConfig {
            allow_infeasible: true,
            ..config.clone()
        },
    )?;
    Ok(Lemma1Summary {
        epsilon: config.epsilon,
        delta: config.delta,
        sample_complexity,
        cells,
        fits,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Cell {
    pub flip_prob: f64,
    pub k: usize,
    pub n: usize,
    /// Fraction with `prompted_margin > task_margin / 2 + c1^2 - 1`.
    pub pass: Estimate,
    pub mean_task_margin: f64,
    pub mean_prompted_margin: f64,
    pub min_prompted_margin: f64,
    pub loss: Estimate,
    /// Whether `k` reaches the guaranteed prompt length.
    pub guaranteed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Summary {
    pub c1: f64,
    pub min_task_margin: f64,
    pub thresholds: Option<MarginThresholds>,
    pub cells: Vec<Theorem1Cell>,
}

pub fn theorem1_pass(record: &ExperimentRecord, c1: f64) -> bool {
    match (record.task_margin, record.prompted_margin) {
        (Some(t), Some(p)) => p > t / 2.0 + c1 * c1 - 1.0,
        _ => false,
    }
}

pub fn summarize_theorem1(
    mixture: &MixtureModel,
    config: &ExperimentConfig,
    sets: &[RecordSet],
) -> Result<Theorem1Summary> {
    let constants = scenario_constants(mixture, config.task, config.length)?;
    let thresholds = if constants.min_task_margin > 0.0 && mixture.len() > 1 {
        match margin_thresholds(&constants, constants.min_task_margin, config.delta) {
            Ok(t) => Some(t),
            Err(Error::ConditionViolated { .. }) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let mut cells = Vec::new();
    for set in sets {
        let mut by_k: BTreeMap<usize, Vec<&ExperimentRecord>> = BTreeMap::new();
        for r in &set.records {
            by_k.entry(r.k).or_default().push(r);
        }
        for (k, rows) in by_k {
            let task: Vec<f64> = rows.iter().filter_map(|r| r.task_margin).collect();
            let prompted: Vec<f64> = rows.iter().filter_map(|r| r.prompted_margin).collect();
            cells.push(Theorem1Cell {
                flip_prob: set.flip_prob,
                k,
                n: rows.len(),
                pass: wilson(
                    rows.iter().filter(|r| theorem1_pass(r, constants.c1)).count(),
                    rows.len(),
                ),
                mean_task_margin: mean_se(&task).0,
                mean_prompted_margin: mean_se(&prompted).0,
                min_prompted_margin: prompted.iter().copied().fold(f64::INFINITY, f64::min),
                loss: wilson(rows.iter().filter(|r| r.loss == Some(1.0)).count(), rows.len()),
                guaranteed: mixture.len() == 1 || thresholds.is_some_and(|t| k as u64 >= t.k),
            });
        }
    }
    Ok(Theorem1Summary {
        c1: constants.c1,
        min_task_margin: constants.min_task_margin,
        thresholds,
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretCell {
    pub flip_prob: f64,
    pub k: usize,
    pub n: usize,
    pub loss: Estimate,
    pub bayes_rate: Estimate,
    /// Loss minus Bayes rate; interval is the loss interval shifted.
    pub regret: Estimate,
    /// Mean of per-trial `loss - bayes_loss` on shared test pairs.
    pub paired_regret: Estimate,
    /// Median of the paired regret over contiguous trial batches.
    pub median_regret: f64,
    /// Fraction of test inputs with runner-up margin below `8 * tv_error`.
    pub small_margin_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretSummary {
    pub model: ModelKind,
    pub tv_error: f64,
    /// `8 * tv_error`: the regret bound when no test point falls in the small-margin case.
    pub bound_epsilon: f64,
    pub cells: Vec<RegretCell>,
}

pub const MEDIAN_BATCHES: usize = 5;

/// Margins within this of `8 * tv_error` count as meeting it; the measured
/// error carries rounding from the probe evaluation.
pub const CASE_SPLIT_TOL: f64 = 1e-9;

pub fn summarize_regret(
    mixture: &MixtureModel,
    config: &ExperimentConfig,
    built: &BuiltModel,
    sets: &[RecordSet],
) -> Result<RegretSummary> {
    let star = mixture.concept(config.task);
    let mut rng = rng_from_parts(&[config.base_seed, 0xba7e5]);
    let bayes_rate = bayes_error_rate(star, config.length, 20_000, &mut rng)?;
    let bound_epsilon = 8.0 * built.tv_error;
    let mut cells = Vec::new();
    for set in sets {
        let mut by_k: BTreeMap<usize, Vec<&ExperimentRecord>> = BTreeMap::new();
        for r in &set.records {
            by_k.entry(r.k).or_default().push(r);
        }
        for (k, rows) in by_k {
            let n = rows.len();
            let errors = rows.iter().filter(|r| r.loss == Some(1.0)).count();
            let loss = wilson(errors, n);
            let paired: Vec<f64> = rows
                .iter()
                .map(|r| r.loss.unwrap_or(0.0) - f64::from(r.bayes != r.truth))
                .collect();
            let batch = n.div_ceil(MEDIAN_BATCHES);
            let batch_means: Vec<f64> = paired
                .chunks(batch)
                .map(|c| c.iter().sum::<f64>() / c.len() as f64)
                .collect();
            let small = rows
                .iter()
                .filter(|r| r.task_margin.is_some_and(|m| m < bound_epsilon - CASE_SPLIT_TOL))
                .count();
            cells.push(RegretCell {
                flip_prob: set.flip_prob,
                k,
                n,
                loss,
                bayes_rate,
                regret: Estimate {
                    mean: loss.mean - bayes_rate.mean,
                    lower: loss.lower - bayes_rate.mean,
                    upper: loss.upper - bayes_rate.mean,
                    n,
                },
                paired_regret: normal_estimate(&paired),
                median_regret: median(&batch_means),
                small_margin_fraction: small as f64 / n as f64,
            });
        }
    }
    Ok(RegretSummary {
        model: built.kind,
        tv_error: built.tv_error,
        bound_epsilon,
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub campaign: Campaign,
    pub config: ExperimentConfig,
    pub constants: ScenarioConstants,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lemma1: Option<Lemma1Summary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theorem1: Option<Theorem1Summary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regret: Option<RegretSummary>,
}

/// Everything a campaign produces.
pub struct CampaignOutput {
    pub sets: Vec<RecordSet>,
    pub summary: CampaignSummary,
}

/// Builds the configured model, runs `campaign` and summarizes it.
pub fn run_campaign(campaign: Campaign, mixture: &MixtureModel, config: &ExperimentConfig) -> Result<CampaignOutput> {
    config.validate()?;
    let constants = scenario_constants(mixture, config.task, config.length)?;
    let mut summary = CampaignSummary {
        campaign,
        config: config.clone(),
        constants,
        lemma1: None,
        theorem1: None,
        regret: None,
    };
    let sets = match campaign {
        Campaign::Lemma1 => {
            let sets = run_lemma1(mixture, config)?;
            summary.lemma1 = Some(summarize_lemma1(mixture, config, &sets)?);
            sets
        }
        Campaign::Theorem1 => {
            check_feasible(&summary.constants, config)?;
            let built = build_model(config.model, mixture, config)?;
            let sets = run_theorem1(built.model.as_ref(), mixture, config, PairSelector::BayesRunnerUp)?;
            summary.theorem1 = Some(summarize_theorem1(mixture, config, &sets)?);
            sets
        }
        Campaign::Regret => {
            let built = build_model(config.model, mixture, config)?;
            let sets = run_regret_curve(built.model.as_ref(), mixture, config)?;
            summary.regret = Some(summarize_regret(mixture, config, &built, &sets)?);
            sets
        }
    };
    Ok(CampaignOutput { sets, summary })
}

/// The exact model, for callers that do not need [`build_model`].
pub fn exact(mixture: &MixtureModel) -> ExactModel {
    crate::model::exact_model(mixture.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concept::MarkovConcept;
    use crate::prob::Alphabet;

    fn phi(row: [f64; 3]) -> MarkovConcept {
        MarkovConcept::iid(Alphabet::new(3, 2).unwrap(), row.to_vec()).unwrap()
    }

    fn iid2() -> MixtureModel {
        MixtureModel::uniform_prior(vec![phi([0.6, 0.2, 0.2]), phi([0.2, 0.6, 0.2])]).unwrap()
    }

    fn config(k_grid: Vec<usize>, trials: usize) -> ExperimentConfig {
        ExperimentConfig {
            k_grid,
            num_trials: trials,
            base_seed: 7,
            ..ExperimentConfig::new("iid-2-T40", 40)
        }
    }

    #[test]
    fn lemma1_mean_matches_kl() {
        let m = iid2();
        let cfg = config(vec![10, 50], 400);
        let sets = run_lemma1(&m, &cfg).unwrap();
        assert_eq!(sets[0].records.len(), 800);
        let s = summarize_lemma1(&m, &cfg, &sets).unwrap();
        let kl = 16.0 * 3f64.ln();
        for c in &s.cells {
            let (mean, se) = (c.per_example_mean.unwrap(), c.per_example_se.unwrap());
            assert!((mean + kl).abs() < 3.0 * se, "{c:?}");
        }
        assert_eq!(s.sample_complexity.unwrap().k, 495);
        assert!(s.fits[0].in_band);
    }

    #[test]
    fn lemma1_refuses_infeasible_unless_overridden() {
        let m = iid2();
        let mut cfg = config(vec![1], 3);
        cfg.length = 4;
        assert!(matches!(run_lemma1(&m, &cfg), Err(Error::ConditionViolated { .. })));
        cfg.allow_infeasible = true;
        assert_eq!(run_lemma1(&m, &cfg).unwrap()[0].records.len(), 3);
    }

    #[test]
    fn flip_conditions_share_examples() {
        let m = iid2();
        let mut cfg = config(vec![5], 20);
        cfg.flip_grid = vec![0.0, 0.5];
        let sets = run_lemma1(&m, &cfg).unwrap();
        assert!(sets[0].records.iter().all(|r| r.flip_count == 0));
        assert!(sets[1].records.iter().any(|r| r.flip_count > 0));
        for (a, b) in sets[0].records.iter().zip(&sets[1].records) {
            assert_eq!(a.seed, b.seed);
            if b.flip_count == 0 {
                assert_eq!(a.log_ratio, b.log_ratio);
            }
        }
    }

    #[test]
    fn theorem1_single_concept_always_passes() {
        let m = MixtureModel::new(vec![phi([0.6, 0.2, 0.2])], vec![1.0]).unwrap();
        let cfg = config(vec![0, 3], 50);
        let model = exact(&m);
        let sets = run_theorem1(&model, &m, &cfg, PairSelector::BayesRunnerUp).unwrap();
        let s = summarize_theorem1(&m, &cfg, &sets).unwrap();
        assert!(s.cells.iter().all(|c| c.pass.mean == 1.0));
        for r in &sets[0].records {
            assert!((r.task_margin.unwrap() - r.prompted_margin.unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn theorem1_passes_at_moderate_k() {
        let m = iid2();
        let cfg = config(vec![20], 200);
        let model = exact(&m);
        let sets = run_theorem1(&model, &m, &cfg, PairSelector::Fixed { y: 0, y_alt: 1 }).unwrap();
        let s = summarize_theorem1(&m, &cfg, &sets).unwrap();
        assert_eq!(s.thresholds.unwrap().k, 495);
        assert!(s.cells[0].pass.mean >= 0.99, "{:?}", s.cells[0]);
    }

    #[test]
    fn regret_curve_exact_model() {
        let m = iid2();
        let cfg = config(vec![0, 5, 50], 1000);
        let built = build_model(ModelKind::Exact, &m, &cfg).unwrap();
        assert_eq!(built.tv_error, 0.0);
        let sets = run_regret_curve(built.model.as_ref(), &m, &cfg).unwrap();
        let s = summarize_regret(&m, &cfg, &built, &sets).unwrap();
        assert!((s.cells[0].bayes_rate.mean - 0.25).abs() < 1e-12);
        let last = s.cells.last().unwrap();
        assert_eq!(last.paired_regret.mean, 0.0);
        assert!(last.regret.lower <= 0.0 && last.regret.upper >= 0.0);
        assert!(s.cells.windows(2).all(|w| w[1].median_regret <= w[0].median_regret));
    }

    #[test]
    fn perturbed_model_case_split() {
        let m = iid2();
        let cfg = config(vec![50], 200);
        for (delta, small) in [(0.05, 0.0), (0.2, 1.0)] {
            let built = build_model(ModelKind::Perturbed { delta }, &m, &cfg).unwrap();
            assert!((built.tv_error - delta).abs() < 1e-9);
            let sets = run_regret_curve(built.model.as_ref(), &m, &cfg).unwrap();
            let s = summarize_regret(&m, &cfg, &built, &sets).unwrap();
            assert_eq!(s.cells[0].small_margin_fraction, small);
        }
    }

    #[test]
    fn summarize_contracts() {
        assert!(matches!(summarize(&[]), Err(Error::Usage(_))));
        let one = ExperimentRecord {
            log_ratio: Some(-3.5),
            competitor: Some(1),
            ..ExperimentRecord::blank(0, 4, 0, 1)
        };
        let s = summarize(std::slice::from_ref(&one)).unwrap();
        assert_eq!(s[0].log_ratio.unwrap().mean, -3.5);
        assert_eq!(s[0].log_ratio_se, Some(0.0));

        let mut rng = crate::seed::rng_from_seed(3);
        let records: Vec<_> = (0..1000u64)
            .map(|i| ExperimentRecord {
                loss: Some(f64::from(rng.gen_bool(0.25))),
                ..ExperimentRecord::blank(i, (i % 3) as usize, 0, i)
            })
            .collect();
        let s = summarize(&records).unwrap();
        assert_eq!(s.iter().map(|g| g.n).sum::<usize>(), 1000);
        let all = summarize(
            &records
                .iter()
                .map(|r| ExperimentRecord { k: 0, ..r.clone() })
                .collect::<Vec<_>>(),
        )
        .unwrap();
        assert!(all[0].loss.unwrap().contains(0.25));
    }

    #[test]
    fn csv_header_and_round_trip() {
        let m = iid2();
        let cfg = config(vec![2], 5);
        let sets = run_lemma1(&m, &cfg).unwrap();
        let mut buf = Vec::new();
        write_records_csv(&mut buf, &sets[0].records).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        assert!(text.lines().nth(1).unwrap().contains(",,"));
        assert_eq!(read_records_csv(&buf[..]).unwrap(), sets[0].records);
    }

    #[test]
    fn records_do_not_depend_on_thread_count() {
        let m = iid2();
        let cfg = config(vec![0, 3, 7], 40);
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| run_regret_curve(&exact(&m), &m, &cfg).unwrap())
        };
        assert_eq!(run(1), run(4));
    }
}
