//! Pretrained-model stand-ins: anything that returns a next-token
//! distribution for an arbitrary prefix.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mixture::MixtureModel;
use crate::prob::{Alphabet, LogProb, Token};
use crate::seed::{derive_seed, hash_tokens, rng_from_seed};

/// A frozen sequence model `f_theta`.
pub trait SequenceModel: Send + Sync {
    fn alphabet(&self) -> &Alphabet;

    /// `ln f(. | prefix)` over the whole alphabet.
    fn next_token_log_row(&self, prefix: &[Token]) -> Vec<LogProb>;

    fn next_token_log_prob(&self, prefix: &[Token], token: Token) -> Result<LogProb> {
        self.alphabet().check(token)?;
        Ok(self.next_token_log_row(prefix)[token.index()])
    }

    /// Conditional row as plain probabilities.
    fn next_token_row(&self, prefix: &[Token]) -> Vec<f64> {
        self.next_token_log_row(prefix).into_iter().map(f64::exp).collect()
    }
}

impl SequenceModel for MixtureModel {
    fn alphabet(&self) -> &Alphabet {
        MixtureModel::alphabet(self)
    }

    fn next_token_log_row(&self, prefix: &[Token]) -> Vec<LogProb> {
        MixtureModel::next_token_log_row(self, prefix)
    }
}

/// The zero-error model: exact conditionals of the pretraining mixture.
#[derive(Debug, Clone)]
pub struct ExactModel {
    mixture: MixtureModel,
}

pub fn exact_model(mixture: MixtureModel) -> ExactModel {
    ExactModel { mixture }
}

impl ExactModel {
    pub fn mixture(&self) -> &MixtureModel {
        &self.mixture
    }
}

impl SequenceModel for ExactModel {
    fn alphabet(&self) -> &Alphabet {
        self.mixture.alphabet()
    }

    fn next_token_log_row(&self, prefix: &[Token]) -> Vec<LogProb> {
        self.mixture.next_token_log_row(prefix)
    }
}

/// Exact conditionals pushed exactly `delta` away in total variation.
///
/// The direction depends only on `(noise_seed, prefix)`, so repeated
/// queries of one prefix agree.
#[derive(Debug, Clone)]
pub struct PerturbedModel {
    base: MixtureModel,
    delta: f64,
    noise_seed: u64,
}

impl PerturbedModel {
    pub fn new(base: MixtureModel, delta: f64, noise_seed: u64) -> Result<Self> {
        if !(0.0..0.5).contains(&delta) {
            return Err(Error::invalid("delta_pretraining", format!("{delta} not in [0, 0.5)")));
        }
        Ok(Self {
            base,
            delta,
            noise_seed,
        })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn base(&self) -> &MixtureModel {
        &self.base
    }

    /// Perturbed conditional probability of `token` after `prefix`.
    pub fn perturb_conditional(&self, prefix: &[Token], token: Token) -> Result<LogProb> {
        self.next_token_log_prob(prefix, token)
    }

    fn perturbed_row(&self, prefix: &[Token]) -> Vec<f64> {
        let exact: Vec<f64> = self.base.next_token_log_row(prefix).into_iter().map(f64::exp).collect();
        if self.delta == 0.0 {
            return exact;
        }
        let v = exact.len();
        let mut rng = rng_from_seed(derive_seed(&[self.noise_seed, hash_tokens(prefix)]));

        // Split the alphabet into a donor set and a receiver set.
        let mut donor = vec![false; v];
        loop {
            donor.iter_mut().for_each(|d| *d = rng.gen_bool(0.5));
            let n = donor.iter().filter(|d| **d).count();
            if n > 0 && n < v {
                break;
            }
        }
        let mass = |donor: &[bool], want: bool| -> f64 {
            exact
                .iter()
                .zip(donor)
                .filter(|(_, d)| **d == want)
                .map(|(p, _)| p)
                .sum()
        };
        // Donors hold at least half the mass, so taking delta < 0.5 from
        // them proportionally keeps every entry positive.
        if mass(&donor, true) < mass(&donor, false) {
            donor.iter_mut().for_each(|d| *d = !*d);
        }
        let donor_mass = mass(&donor, true);
        let weights: Vec<f64> = donor
            .iter()
            .map(|d| if *d { 0.0 } else { rng.gen::<f64>() + 1e-3 })
            .collect();
        let weight_sum: f64 = weights.iter().sum();

        exact
            .iter()
            .zip(&donor)
            .zip(&weights)
            .map(|((p, d), w)| {
                if *d {
                    p - self.delta * p / donor_mass
                } else {
                    p + self.delta * w / weight_sum
                }
            })
            .collect()
    }
}

impl SequenceModel for PerturbedModel {
    fn alphabet(&self) -> &Alphabet {
        self.base.alphabet()
    }

    fn next_token_log_row(&self, prefix: &[Token]) -> Vec<LogProb> {
        self.perturbed_row(prefix).into_iter().map(f64::ln).collect()
    }

    fn next_token_row(&self, prefix: &[Token]) -> Vec<f64> {
        self.perturbed_row(prefix)
    }
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Largest total-variation gap between `model` and the true conditionals
/// over the probe prefixes.
pub fn model_tv_error(model: &dyn SequenceModel, truth: &MixtureModel, probes: &[Vec<Token>]) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::Usage("model_tv_error needs at least one probe".into()));
    }
    Ok(probes
        .iter()
        .map(|p| {
            let exact: Vec<f64> = truth.next_token_log_row(p).into_iter().map(f64::exp).collect();
            total_variation(&model.next_token_row(p), &exact)
        })
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concept::MarkovConcept;
    use crate::seed::rng_from_seed;

    fn abd() -> Alphabet {
        Alphabet::new(3, 2).unwrap()
    }

    fn iid2() -> MixtureModel {
        let p1 = MarkovConcept::iid(abd(), vec![0.6, 0.2, 0.2]).unwrap();
        let p2 = MarkovConcept::iid(abd(), vec![0.2, 0.6, 0.2]).unwrap();
        MixtureModel::uniform_prior(vec![p1, p2]).unwrap()
    }

    fn random_prefixes(n: usize, seed: u64) -> Vec<Vec<Token>> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|_| {
                let len = rng.gen_range(0..120);
                (0..len).map(|_| Token(rng.gen_range(0..3))).collect()
            })
            .collect()
    }

    #[test]
    fn exact_model_delegates() {
        let m = iid2();
        let e = exact_model(m.clone());
        let p = [Token(0), Token(1), Token(2)];
        assert_eq!(e.next_token_log_row(&p), m.next_token_log_row(&p));
        assert!((e.next_token_log_prob(&[], Token(0)).unwrap() - 0.4f64.ln()).abs() < 1e-14);
        assert_eq!(model_tv_error(&e, &m, &random_prefixes(20, 1)).unwrap(), 0.0);
    }

    #[test]
    fn zero_delta_is_exact() {
        let m = iid2();
        let p = PerturbedModel::new(m.clone(), 0.0, 5).unwrap();
        for prefix in random_prefixes(50, 2) {
            assert_eq!(
                p.next_token_row(&prefix),
                exact_model(m.clone()).next_token_row(&prefix)
            );
        }
    }

    #[test]
    fn rejects_out_of_range_delta() {
        assert!(PerturbedModel::new(iid2(), 0.5, 0).is_err());
        assert!(PerturbedModel::new(iid2(), -0.1, 0).is_err());
    }

    #[test]
    fn perturbation_hits_budget_exactly() {
        let m = iid2();
        for delta in [0.05, 0.2, 0.45] {
            let p = PerturbedModel::new(m.clone(), delta, 17).unwrap();
            for prefix in random_prefixes(1000, 3) {
                let exact: Vec<f64> = m.next_token_log_row(&prefix).into_iter().map(f64::exp).collect();
                let row = p.next_token_row(&prefix);
                assert!((total_variation(&row, &exact) - delta).abs() < 1e-6);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-8);
                assert!(row.iter().all(|x| *x > 0.0));
                // same prefix, same answer
                assert_eq!(row, p.next_token_row(&prefix));
            }
            let err = model_tv_error(&p, &m, &random_prefixes(30, 4)).unwrap();
            assert!((err - delta).abs() < 1e-6);
        }
    }

    #[test]
    fn seeds_give_different_rows_within_budget() {
        let m = iid2();
        let a = PerturbedModel::new(m.clone(), 0.1, 1).unwrap();
        let b = PerturbedModel::new(m.clone(), 0.1, 2).unwrap();
        let prefixes = random_prefixes(40, 5);
        let differ = prefixes
            .iter()
            .filter(|p| a.next_token_row(p) != b.next_token_row(p))
            .count();
        assert!(differ > 30);
        for p in &prefixes {
            let exact: Vec<f64> = m.next_token_log_row(p).into_iter().map(f64::exp).collect();
            assert!(total_variation(&b.next_token_row(p), &exact) <= 0.1 + 1e-6);
        }
    }

    #[test]
    fn argmax_changes_only_when_budget_exceeds_half_gap() {
        let m = iid2();
        for delta in [0.01, 0.05, 0.1, 0.2, 0.3] {
            let p = PerturbedModel::new(m.clone(), delta, 23).unwrap();
            for prefix in random_prefixes(500, 6) {
                let exact: Vec<f64> = m.next_token_log_row(&prefix).into_iter().map(f64::exp).collect();
                let row = p.next_token_row(&prefix);
                let argmax = |r: &[f64]| {
                    r.iter()
                        .enumerate()
                        .fold(0, |best, (i, x)| if *x > r[best] { i } else { best })
                };
                let mut sorted = exact.clone();
                sorted.sort_by(|a, b| b.total_cmp(a));
                let gap = sorted[0] - sorted[1];
                if argmax(&row) != argmax(&exact) {
                    assert!(delta >= gap / 2.0 - 1e-12);
                }
            }
        }
    }

    #[test]
    fn tv_error_requires_probes() {
        let m = iid2();
        assert!(matches!(model_tv_error(&m, &m, &[]), Err(Error::Usage(_))));
    }
}
