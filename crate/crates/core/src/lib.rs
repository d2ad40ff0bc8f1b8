//! Latent-concept Markov mixtures and the in-context learning guarantees
//! built on them: exact inference, sample-complexity bounds and Monte Carlo
//! campaigns that check those bounds.

pub mod concept;
pub mod diagnostics;
pub mod em;
pub mod error;
pub mod experiments;
pub mod icl;
pub mod mixture;
pub mod model;
pub mod prob;
pub mod scenario;
pub mod seed;
pub mod stats;

pub use concept::{ChainState, MarkovConcept};
pub use diagnostics::{
    check_theorem2_conditions, kl_sequences, lemma1_sample_complexity, scenario_constants, ConditionReport,
    SampleComplexity, ScenarioConstants,
};
pub use em::{fit_empirical, EmConfig, EmFamily, EmpiricalModel};
pub use error::{Error, Result};
pub use experiments::{Campaign, ExperimentConfig, ExperimentRecord, ModelKind};
pub use mixture::{MixtureModel, PosteriorTracker};
pub use model::{exact_model, model_tv_error, ExactModel, PerturbedModel, SequenceModel};
pub use prob::{log_sum_exp, normalize_log_weights, Alphabet, LogProb, Sequence, Token};
pub use scenario::ScenarioFile;
