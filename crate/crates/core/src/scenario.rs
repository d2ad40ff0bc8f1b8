//! JSON scenario files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::concept::{MarkovConcept, DEFAULT_FLOOR};
use crate::error::{Error, Result};
use crate::mixture::{MixtureModel, DEFAULT_C3_FLOOR};
use crate::prob::Alphabet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptSpec {
    pub initial: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    #[serde(default)]
    pub reset_leak: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FloorConfig {
    /// Lower bound every conditional entry must respect.
    pub floor: f64,
}

impl Default for FloorConfig {
    fn default() -> Self {
        Self { floor: DEFAULT_FLOOR }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct C3Config {
    /// Lower bound every prior weight must respect.
    pub floor: f64,
}

impl Default for C3Config {
    fn default() -> Self {
        Self {
            floor: DEFAULT_C3_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub alphabet_size: usize,
    pub delimiter_id: u32,
    pub concepts: Vec<ConceptSpec>,
    pub prior: Vec<f64>,
    #[serde(rename = "T")]
    pub length: usize,
    #[serde(default)]
    pub floor_config: FloorConfig,
    #[serde(default)]
    pub c3_config: C3Config,
    /// Index of the downstream task concept.
    #[serde(default)]
    pub task: usize,
}

fn nest(prefix: &str, err: Error) -> Error {
    match err {
        Error::InvalidParameter { field, reason } => Error::InvalidParameter {
            field: format!("{prefix}.{field}"),
            reason,
        },
        other => other,
    }
}

impl ScenarioFile {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn alphabet(&self) -> Result<Alphabet> {
        Alphabet::new(self.alphabet_size, self.delimiter_id)
    }

    /// Builds and validates the mixture.
    pub fn mixture(&self) -> Result<MixtureModel> {
        if self.length < 2 {
            return Err(Error::invalid(
                "T",
                format!("{} < 2; a task example needs an input and a label", self.length),
            ));
        }
        let alphabet = self.alphabet()?;
        let concepts = self
            .concepts
            .iter()
            .enumerate()
            .map(|(i, c)| {
                MarkovConcept::with_floor(
                    alphabet,
                    c.initial.clone(),
                    c.transition.clone(),
                    c.reset_leak,
                    self.floor_config.floor,
                )
                .map_err(|e| nest(&format!("concepts[{i}]"), e))
            })
            .collect::<Result<Vec<_>>>()?;
        let mixture = MixtureModel::with_prior_floor(concepts, self.prior.clone(), self.c3_config.floor)?;
        if self.task >= mixture.len() {
            return Err(Error::invalid(
                "task",
                format!("{} out of range for {} concepts", self.task, mixture.len()),
            ));
        }
        Ok(mixture)
    }

    /// Serializes a mixture; floors are set to the smallest entries present
    /// so the file always reloads.
    pub fn from_mixture(mixture: &MixtureModel, length: usize) -> Self {
        let alphabet = mixture.alphabet();
        let concepts: Vec<ConceptSpec> = mixture
            .concepts()
            .iter()
            .map(|c| ConceptSpec {
                initial: c.initial().to_vec(),
                transition: c.transition().to_vec(),
                reset_leak: c.reset_leak(),
            })
            .collect();
        let floor = mixture
            .concepts()
            .iter()
            .map(MarkovConcept::compute_c2)
            .fold(DEFAULT_FLOOR, f64::min);
        Self {
            name: None,
            alphabet_size: alphabet.size(),
            delimiter_id: alphabet.delimiter().0,
            concepts,
            prior: mixture.prior().to_vec(),
            length,
            floor_config: FloorConfig {
                floor: floor.min(DEFAULT_FLOOR),
            },
            c3_config: C3Config {
                floor: mixture.compute_c3().min(DEFAULT_C3_FLOOR),
            },
            task: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const IID2: &str = r#"{
        "alphabet_size": 3,
        "delimiter_id": 2,
        "concepts": [
            {"initial": [0.6, 0.2, 0.2], "transition": [[0.6, 0.2, 0.2], [0.6, 0.2, 0.2], [0.6, 0.2, 0.2]]},
            {"initial": [0.2, 0.6, 0.2], "transition": [[0.2, 0.6, 0.2], [0.2, 0.6, 0.2], [0.2, 0.6, 0.2]]}
        ],
        "prior": [0.5, 0.5],
        "T": 40
    }"#;

    #[test]
    fn parses_and_round_trips() {
        let s = ScenarioFile::from_json(IID2).unwrap();
        let m = s.mixture().unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(s.length, 40);
        let again = ScenarioFile::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(again, s);
        let exported = ScenarioFile::from_mixture(&m, 40);
        let m2 = exported.mixture().unwrap();
        for (a, b) in m.concepts().iter().zip(m2.concepts()) {
            assert_eq!(a.initial(), b.initial());
            assert_eq!(a.transition(), b.transition());
        }
    }

    #[test]
    fn names_offending_field() {
        let bad = IID2.replace(
            "[0.2, 0.6, 0.2], [0.2, 0.6, 0.2], [0.2, 0.6, 0.2]]",
            "[0.2, 0.6, 0.2], [0.2, 0.7, 0.2], [0.2, 0.6, 0.2]]",
        );
        let err = ScenarioFile::from_json(&bad).unwrap().mixture().unwrap_err();
        assert!(err.to_string().contains("concepts[1].transition[1]"), "{err}");

        let bad = IID2.replace("\"prior\": [0.5, 0.5]", "\"prior\": [0.995, 0.005]");
        let err = ScenarioFile::from_json(&bad).unwrap().mixture().unwrap_err();
        assert!(err.to_string().contains("prior[1]"), "{err}");
    }

    #[test]
    fn parse_errors_report_position() {
        let err = ScenarioFile::from_json(&IID2[..60]).unwrap_err();
        assert!(err.to_string().contains("line"), "{err}");
        let err = ScenarioFile::from_json(&IID2.replace("\"T\"", "\"t\"")).unwrap_err();
        assert!(err.to_string().contains("unknown field"), "{err}");
    }
}
