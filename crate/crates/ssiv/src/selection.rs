//! Selection results and the downward-testing walk shared by both selectors.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::median::InitialEstimate;
use crate::overid::{overid_test, TestKind};
use crate::design::Vce;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    Alasso,
    Cim,
}

impl std::fmt::Display for MethodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MethodKind::Alasso => "alasso",
            MethodKind::Cim => "cim",
        })
    }
}

/// One tested model along a selection path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathStep {
    /// λ (adaptive Lasso) or ψ (CIM) at which this model first appeared.
    pub tuning: f64,
    #[serde(serialize_with = "crate::ser::one_based", deserialize_with = "crate::ser::from_one_based")]
    pub invalid_set: Vec<usize>,
    pub stat: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Estimated valid/invalid split plus the full tested path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionResult {
    pub method: MethodKind,
    pub test: TestKind,
    /// Significance level the downward testing stopped against.
    pub threshold: f64,
    #[serde(serialize_with = "crate::ser::one_based", deserialize_with = "crate::ser::from_one_based")]
    pub valid_set: Vec<usize>,
    #[serde(serialize_with = "crate::ser::one_based", deserialize_with = "crate::ser::from_one_based")]
    pub invalid_set: Vec<usize>,
    pub valid_names: Vec<String>,
    pub invalid_names: Vec<String>,
    pub path: Vec<PathStep>,
    /// Index into `path` of the accepted model.
    pub stopped_at: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialEstimate>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

impl SelectionResult {
    pub fn read<P: AsRef<std::path::Path>>(path: P) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Walks candidate invalid sets in path order, testing each distinct set with
/// a weakly growing size, and stops at the first model whose p-value exceeds
/// the threshold. Candidates whose complement would leave the test undefined
/// are skipped.
pub(crate) fn downward_testing(
    d: &Dataset,
    method: MethodKind,
    candidates: impl Iterator<Item = (f64, Vec<usize>)>,
    test: TestKind,
    vce: Vce,
    threshold: f64,
    initial: Option<InitialEstimate>,
    mut notes: Vec<String>,
) -> Result<SelectionResult> {
    let j = d.j();
    let p = d.p();
    let mut tested: Vec<Vec<usize>> = Vec::new();
    let mut path: Vec<PathStep> = Vec::new();
    let mut last_p = f64::NAN;

    for (tuning, mut invalid) in candidates {
        invalid.sort_unstable();
        if invalid.len() > j.saturating_sub(p + 1) {
            // The complement could no longer be tested.
            break;
        }
        if tested.iter().any(|t| t == &invalid) {
            continue;
        }
        if let Some(prev) = tested.last() {
            if invalid.len() < prev.len() {
                // Transient shrink after a drop knot; keep sizes weakly growing.
                notes.push(format!(
                    "skipped a smaller candidate set of size {} after testing size {}",
                    invalid.len(),
                    prev.len()
                ));
                continue;
            }
        }
        let valid: Vec<usize> = (0..j).filter(|i| !invalid.contains(i)).collect();
        let outcome = overid_test(d, &valid, &invalid, test, vce)?;
        tested.push(invalid.clone());
        path.push(PathStep {
            tuning,
            invalid_set: invalid.clone(),
            stat: outcome.stat,
            df: outcome.df,
            p_value: outcome.p_value,
        });
        last_p = outcome.p_value;
        if outcome.p_value > threshold {
            let stopped_at = path.len() - 1;
            return Ok(SelectionResult {
                method,
                test,
                threshold,
                valid_names: d.z_names_for(&valid),
                invalid_names: d.z_names_for(&invalid),
                valid_set: valid,
                invalid_set: invalid,
                path,
                stopped_at,
                initial,
                notes,
            });
        }
    }

    let advice = match method {
        MethodKind::Alasso => {
            "no testable model passed, suggesting a violation of the majority assumption; \
             consider the confidence interval method or a larger significance threshold"
        }
        MethodKind::Cim => {
            "no testable grouping passed; consider a larger psif or significance threshold"
        }
    };
    Err(Error::SelectorExhausted {
        method: method.to_string(),
        last_p,
        threshold,
        advice: advice.to_string(),
    })
}
