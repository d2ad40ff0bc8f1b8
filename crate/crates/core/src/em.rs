//! Expectation-maximization over the Markov-concept family: the concrete
//! pretraining algorithm that turns sampled documents into a model.

use rand::Rng;
use rayon::prelude::*;

use crate::concept::{ChainState, MarkovConcept};
use crate::error::{Error, Result};
use crate::mixture::MixtureModel;
use crate::model::SequenceModel;
use crate::prob::{log_sum_exp_unchecked, Alphabet, LogProb, Sequence, Token};
use crate::seed::rng_from_seed;

/// Which parameters each fitted component may have.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmFamily {
    /// One row shared by every history.
    Iid,
    /// Exact-reset chain: an initial row plus one transition row per token.
    Markov,
}

#[derive(Debug, Clone)]
pub struct EmConfig {
    pub num_components: usize,
    /// Add-alpha pseudo-count on every prior and row entry.
    pub smoothing: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub restarts: usize,
    pub family: EmFamily,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            num_components: 2,
            smoothing: 1.0,
            max_iters: 500,
            tol: 1e-8,
            restarts: 5,
            family: EmFamily::Markov,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitMetadata {
    pub num_docs: usize,
    pub iterations: usize,
    /// Index of the restart that was kept.
    pub restart: usize,
    /// Penalized objective (log-likelihood + smoothing log-prior); EM never decreases it.
    pub objective_trace: Vec<f64>,
    pub log_likelihood_trace: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EmpiricalModel {
    mixture: MixtureModel,
    meta: FitMetadata,
}

impl EmpiricalModel {
    pub fn mixture(&self) -> &MixtureModel {
        &self.mixture
    }

    pub fn metadata(&self) -> &FitMetadata {
        &self.meta
    }
}

impl SequenceModel for EmpiricalModel {
    fn alphabet(&self) -> &Alphabet {
        self.mixture.alphabet()
    }

    fn next_token_log_row(&self, prefix: &[Token]) -> Vec<LogProb> {
        self.mixture.next_token_log_row(prefix)
    }
}

/// Sparse per-document counts: (row group, token, count).
type DocCounts = Vec<(u32, u32, f64)>;

fn group_count(family: EmFamily, v: usize) -> usize {
    match family {
        EmFamily::Iid => 1,
        EmFamily::Markov => 1 + v,
    }
}

fn doc_counts(doc: &[Token], family: EmFamily, alphabet: &Alphabet) -> DocCounts {
    let v = alphabet.size();
    let mut dense = vec![0u32; group_count(family, v) * v];
    let mut state = ChainState::Start;
    for &t in doc {
        let group = match (family, state) {
            (EmFamily::Iid, _) => 0,
            (EmFamily::Markov, ChainState::After(a)) => 1 + a.index(),
            (EmFamily::Markov, _) => 0,
        };
        dense[group * v + t.index()] += 1;
        state = state.advance(t, alphabet.delimiter());
    }
    dense
        .iter()
        .enumerate()
        .filter(|(_, c)| **c > 0)
        .map(|(i, c)| ((i / v) as u32, (i % v) as u32, *c as f64))
        .collect()
}

#[derive(Clone)]
struct Params {
    log_prior: Vec<f64>,
    // component -> group -> token, flattened
    log_rows: Vec<f64>,
}

struct Fit {
    params: Params,
    objective_trace: Vec<f64>,
    log_likelihood_trace: Vec<f64>,
}

struct Problem<'a> {
    docs: &'a [DocCounts],
    v: usize,
    groups: usize,
    components: usize,
    alpha: f64,
}

impl Problem<'_> {
    fn row_len(&self) -> usize {
        self.groups * self.v
    }

    /// Responsibilities and total log-likelihood under `params`.
    fn e_step(&self, params: &Params) -> (Vec<f64>, f64) {
        let k = self.components;
        let row_len = self.row_len();
        let mut resp = vec![0.0; self.docs.len() * k];
        let mut total = 0.0;
        for (d, counts) in self.docs.iter().enumerate() {
            let r = &mut resp[d * k..(d + 1) * k];
            for (c, slot) in r.iter_mut().enumerate() {
                let rows = &params.log_rows[c * row_len..(c + 1) * row_len];
                *slot = params.log_prior[c]
                    + counts
                        .iter()
                        .map(|(g, t, n)| n * rows[*g as usize * self.v + *t as usize])
                        .sum::<f64>();
            }
            let z = log_sum_exp_unchecked(r);
            total += z;
            r.iter_mut().for_each(|x| *x = (*x - z).exp());
        }
        (resp, total)
    }

    fn m_step(&self, resp: &[f64]) -> Params {
        let k = self.components;
        let row_len = self.row_len();
        let mut weight = vec![0.0; k];
        let mut counts = vec![0.0; k * row_len];
        for (d, doc) in self.docs.iter().enumerate() {
            for c in 0..k {
                let r = resp[d * k + c];
                weight[c] += r;
                let base = c * row_len;
                for (g, t, n) in doc {
                    counts[base + *g as usize * self.v + *t as usize] += r * n;
                }
            }
        }
        let n = self.docs.len() as f64;
        let log_prior = weight
            .iter()
            .map(|w| ((w + self.alpha) / (n + k as f64 * self.alpha)).ln())
            .collect();
        let mut log_rows = vec![0.0; k * row_len];
        for (row, out) in counts.chunks(self.v).zip(log_rows.chunks_mut(self.v)) {
            let total: f64 = row.iter().sum::<f64>() + self.v as f64 * self.alpha;
            for (x, o) in row.iter().zip(out.iter_mut()) {
                *o = ((x + self.alpha) / total).ln();
            }
        }
        Params { log_prior, log_rows }
    }

    fn penalty(&self, params: &Params) -> f64 {
        self.alpha * (params.log_prior.iter().sum::<f64>() + params.log_rows.iter().sum::<f64>())
    }

    fn run(&self, seed: u64, max_iters: usize, tol: f64) -> Result<Fit> {
        let k = self.components;
        let mut rng = rng_from_seed(seed);
        // Random soft assignment: flat-Dirichlet draw per document.
        let mut resp = vec![0.0; self.docs.len() * k];
        for r in resp.chunks_mut(k) {
            r.iter_mut().for_each(|x| *x = -(1.0 - rng.gen::<f64>()).ln());
            let s: f64 = r.iter().sum();
            r.iter_mut().for_each(|x| *x /= s);
        }
        let mut params = self.m_step(&resp);
        let mut objective_trace = Vec::new();
        let mut log_likelihood_trace = Vec::new();
        for _ in 0..max_iters.max(1) {
            let (r, ll) = self.e_step(&params);
            let objective = ll + self.penalty(&params);
            if !objective.is_finite() {
                return Err(Error::NumericalFailure(format!("EM objective became {objective}")));
            }
            let gain = objective_trace.last().map(|prev| objective - prev);
            objective_trace.push(objective);
            log_likelihood_trace.push(ll);
            if gain.is_some_and(|g| g < tol) {
                break;
            }
            params = self.m_step(&r);
        }
        Ok(Fit {
            params,
            objective_trace,
            log_likelihood_trace,
        })
    }
}

/// Fits a `num_components` mixture to `docs` with add-alpha smoothed EM,
/// keeping the best of several random restarts (ties go to the earliest).
pub fn fit_empirical<R: Rng + ?Sized>(
    docs: &[Sequence],
    alphabet: Alphabet,
    config: &EmConfig,
    rng: &mut R,
) -> Result<EmpiricalModel> {
    if docs.is_empty() {
        return Err(Error::Usage("fit_empirical needs at least one document".into()));
    }
    if config.num_components == 0 {
        return Err(Error::Usage("num_components must be >= 1".into()));
    }
    if config.smoothing.is_nan() || config.smoothing <= 0.0 {
        return Err(Error::Usage("smoothing must be > 0".into()));
    }
    for doc in docs {
        doc.validate(&alphabet)?;
    }
    let v = alphabet.size();
    let counts: Vec<DocCounts> = docs
        .par_iter()
        .map(|d| doc_counts(d, config.family, &alphabet))
        .collect();
    let problem = Problem {
        docs: &counts,
        v,
        groups: group_count(config.family, v),
        components: config.num_components,
        alpha: config.smoothing,
    };
    let seeds: Vec<u64> = (0..config.restarts.max(1)).map(|_| rng.gen()).collect();
    let fits = seeds
        .par_iter()
        .map(|s| problem.run(*s, config.max_iters, config.tol))
        .collect::<Result<Vec<_>>>()?;

    let mut best = 0;
    for (i, f) in fits.iter().enumerate() {
        if f.objective_trace.last() > fits[best].objective_trace.last() {
            best = i;
        }
    }
    let fit = fits.into_iter().nth(best).expect("at least one restart");
    let mixture = to_mixture(&fit.params, &problem, alphabet, config.family)?;
    Ok(EmpiricalModel {
        mixture,
        meta: FitMetadata {
            num_docs: docs.len(),
            iterations: fit.objective_trace.len(),
            restart: best,
            objective_trace: fit.objective_trace,
            log_likelihood_trace: fit.log_likelihood_trace,
        },
    })
}

fn normalized(log_row: &[f64]) -> Vec<f64> {
    let row: Vec<f64> = log_row.iter().map(|x| x.exp()).collect();
    let s: f64 = row.iter().sum();
    row.into_iter().map(|x| x / s).collect()
}

fn to_mixture(params: &Params, problem: &Problem<'_>, alphabet: Alphabet, family: EmFamily) -> Result<MixtureModel> {
    let v = problem.v;
    let row_len = problem.row_len();
    let concepts = (0..problem.components)
        .map(|c| {
            let rows = &params.log_rows[c * row_len..(c + 1) * row_len];
            let initial = normalized(&rows[..v]);
            let transition = match family {
                EmFamily::Iid => vec![initial.clone(); v],
                EmFamily::Markov => (0..v).map(|a| normalized(&rows[(1 + a) * v..(2 + a) * v])).collect(),
            };
            // smoothing keeps entries strictly positive; no extra floor
            MarkovConcept::with_floor(alphabet, initial, transition, 0.0, 0.0)
        })
        .collect::<Result<Vec<_>>>()?;
    let prior = normalized(&params.log_prior);
    MixtureModel::with_prior_floor(concepts, prior, 0.0)
}
