use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Regime2Convergence,
    TarnitaCheck,
    #[serde(rename = "takeover_2x2")]
    Takeover2x2,
    CoalescenceTable,
    ContactFastVoting,
    CensusDecay,
    WalkMixing,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::Regime2Convergence,
        ExperimentKind::TarnitaCheck,
        ExperimentKind::Takeover2x2,
        ExperimentKind::CoalescenceTable,
        ExperimentKind::ContactFastVoting,
        ExperimentKind::CensusDecay,
        ExperimentKind::WalkMixing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Regime2Convergence => "regime2_convergence",
            ExperimentKind::TarnitaCheck => "tarnita_check",
            ExperimentKind::Takeover2x2 => "takeover_2x2",
            ExperimentKind::CoalescenceTable => "coalescence_table",
            ExperimentKind::ContactFastVoting => "contact_fast_voting",
            ExperimentKind::CensusDecay => "census_decay",
            ExperimentKind::WalkMixing => "walk_mixing",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A complete experiment description. `parameters` is interpreted by the
/// experiment kind and must contain a `thresholds` object with every
/// pass/fail level used by that kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub parameters: serde_json::Value,
    pub replicates: u64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Decodes the kind-specific parameter record.
    pub fn parameters<T: DeserializeOwned>(&self) -> Result<T, HarnessError> {
        serde_json::from_value(self.parameters.clone()).map_err(|e| {
            HarnessError::InvalidParameters {
                kind: self.kind.to_string(),
                detail: e.to_string(),
            }
        })
    }

    pub fn thresholds(&self) -> serde_json::Value {
        self.parameters
            .get("thresholds")
            .cloned()
            .unwrap_or(serde_json::Value::Null)
    }

    pub fn invalid(&self, detail: impl Into<String>) -> HarnessError {
        HarnessError::InvalidParameters {
            kind: self.kind.to_string(),
            detail: detail.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_round_trip() {
        for k in ExperimentKind::ALL {
            let j = serde_json::to_string(&k).unwrap();
            assert_eq!(j, format!("\"{}\"", k.name()));
            assert_eq!(serde_json::from_str::<ExperimentKind>(&j).unwrap(), k);
        }
    }

    #[test]
    fn rejects_unknown_top_level_fields() {
        let bad = r#"{"kind":"walk_mixing","parameters":{},"replicates":1,"seed":1,"extra":0}"#;
        assert!(ExperimentSpec::from_json(bad).is_err());
        let ok = r#"{"kind":"walk_mixing","parameters":{},"replicates":1,"seed":1}"#;
        assert_eq!(ExperimentSpec::from_json(ok).unwrap().output_dir, None);
    }
}
