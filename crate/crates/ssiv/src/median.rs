//! Initial consistent estimation: marginal medians over exactly-identified
//! estimates, the α plug-in, and qualified-majority combinatorics.

use nalgebra::DVector;
use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{combo_betas, CombinationEstimates};

/// Initial estimates feeding the adaptive-Lasso weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitialEstimate {
    pub beta_m: Vec<f64>,
    pub alpha_m: Vec<f64>,
    pub n_combos_used: usize,
    pub dropped_combos: usize,
}

/// Coordinate-wise median over the finite rows of the combination estimates;
/// even counts take the midpoint of the two central order statistics.
pub fn marginal_median(ce: &CombinationEstimates) -> Result<Vec<f64>> {
    let p = ce.betas.ncols();
    let mut out = Vec::with_capacity(p);
    for c in 0..p {
        let mut vals: Vec<f64> = ce
            .betas
            .column(c)
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .collect();
        if vals.is_empty() {
            return Err(Error::Numerical {
                context: "marginal median".into(),
                detail: format!("all combination estimates for dimension {} are non-finite", c + 1),
            });
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let m = vals.len();
        let med = if m % 2 == 1 {
            vals[m / 2]
        } else {
            0.5 * (vals[m / 2 - 1] + vals[m / 2])
        };
        out.push(med);
    }
    Ok(out)
}

/// Least-squares coefficients of (y − Xβ_m) on the instruments (controls
/// included in the regression when present, weights applied); the residual is
/// orthogonal to Z by construction.
pub fn alpha_plugin(d: &Dataset, beta_m: &[f64]) -> Result<Vec<f64>> {
    if beta_m.len() != d.p() {
        return Err(Error::Dimension(format!(
            "beta_m has length {}, expected P = {}",
            beta_m.len(),
            d.p()
        )));
    }
    let gram = d.gram();
    let g = &gram.g;
    let j = d.j();
    let reg_cols: Vec<usize> = (0..j)
        .map(|i| d.col_z(i))
        .chain((0..d.k()).map(|i| d.col_w(i)))
        .collect();

    // Z'(y - Xb) and cross-products assembled from the cached Gram.
    let rhs = DVector::from_fn(reg_cols.len(), |r, _| {
        let mut v = g[(reg_cols[r], d.col_y())];
        for (i, &b) in beta_m.iter().enumerate() {
            v -= g[(reg_cols[r], d.col_x(i))] * b;
        }
        v
    });
    let ss = nalgebra::DMatrix::from_fn(reg_cols.len(), reg_cols.len(), |r, c| {
        g[(reg_cols[r], reg_cols[c])]
    });
    let chol = match ss.clone().cholesky() {
        Some(c) => c,
        None => {
            let idx = crate::data::dependent_column_gram(&ss).unwrap_or(0);
            let name = if idx < j {
                d.names().z[idx].clone()
            } else {
                d.names().w[idx - j].clone()
            };
            return Err(Error::RankDeficient { index: idx + 1, name });
        }
    };
    let coef = chol.solve(&rhs);
    Ok(coef.iter().take(j).copied().collect())
}

/// Median initial estimator: marginal medians over the combination estimates
/// plus the α plug-in.
pub fn initial_estimate(d: &Dataset) -> Result<InitialEstimate> {
    let ce = combo_betas(d)?;
    let beta_m = marginal_median(&ce)?;
    let alpha_m = alpha_plugin(d, &beta_m)?;
    Ok(InitialEstimate {
        beta_m,
        alpha_m,
        n_combos_used: ce.combos.len() - ce.dropped,
        dropped_combos: ce.dropped,
    })
}

fn binomial(n: usize, k: usize) -> BigUint {
    if k > n {
        return BigUint::from(0u32);
    }
    let mut num = BigUint::from(1u32);
    for i in 0..k {
        num = num * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    num
}

/// Smallest |V| with C(|V|, P) / C(J, P) > 1/2 — the qualified-majority
/// minimum for a consistent vector of marginal medians. P = 1 reduces to the
/// simple majority ⌊J/2⌋ + 1.
pub fn qualified_majority_min(j: usize, p: usize) -> Result<usize> {
    if p == 0 || j == 0 {
        return Err(Error::Invalid("J and P must be positive".into()));
    }
    if p > j {
        return Err(Error::Invalid(format!(
            "P = {p} exceeds the number of instruments J = {j}"
        )));
    }
    let total = binomial(j, p);
    for g in p..=j {
        if BigUint::from(2u32) * binomial(g, p) > total {
            return Ok(g);
        }
    }
    Ok(j)
}

/// Large-J limit of the valid fraction required by the qualified majority:
/// 0.5^(1/P). P = 2 gives 1/√2 ≈ 0.707107; P = 1 the simple majority 0.5.
pub fn asymptotic_fraction_limit(p: usize) -> f64 {
    0.5f64.powf(1.0 / p as f64)
}

/// Implementation helper re-exported for diagnostics: flooring tiny initial
/// α entries before forming adaptive weights.
pub(crate) const ALPHA_FLOOR: f64 = 1e-12;

pub(crate) fn floored_alpha(alpha_m: &[f64]) -> (Vec<f64>, usize) {
    let mut floored = 0usize;
    let out = alpha_m
        .iter()
        .map(|&a| {
            let v = a.abs();
            if v < ALPHA_FLOOR {
                floored += 1;
                ALPHA_FLOOR
            } else {
                v
            }
        })
        .collect();
    (out, floored)
}
