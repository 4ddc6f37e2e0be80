//! Point estimators: 2SLS, LIML, SSIV and the exactly-identified combination
//! engine behind the median initial estimator and the CIM intervals.

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetNames};
use crate::design::{self, kclass_fit, FitParts, KappaSpec, Vce};
use crate::error::{Error, Result};
use crate::shift_share::{build_ssiv, ShiftShareInputs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Ols,
    Tsls,
    Liml,
    Ssiv,
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EstimatorKind::Ols => "ols",
            EstimatorKind::Tsls => "tsls",
            EstimatorKind::Liml => "liml",
            EstimatorKind::Ssiv => "ssiv",
        };
        f.write_str(s)
    }
}

/// Coefficients, covariance and first-stage diagnostics of one fit.
///
/// Parameter order is `[beta (P) | alpha (|invalid|) | controls (K)]`;
/// `se` and `vcov` follow the same order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateResult {
    pub estimator: EstimatorKind,
    pub vce: Vce,
    pub n: usize,
    pub beta: Vec<f64>,
    /// Direct-effect coefficients on the instruments controlled as invalid.
    pub alpha: Vec<f64>,
    pub control_coefs: Vec<f64>,
    pub se: Vec<f64>,
    /// Row-major (P + |invalid| + K) square covariance matrix.
    pub vcov: Vec<Vec<f64>>,
    pub param_names: Vec<String>,
    pub first_stage_f: f64,
    pub f_capped: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(serialize_with = "crate::ser::one_based", deserialize_with = "crate::ser::from_one_based")]
    pub valid_set: Vec<usize>,
    #[serde(serialize_with = "crate::ser::one_based", deserialize_with = "crate::ser::from_one_based")]
    pub invalid_set: Vec<usize>,
    pub valid_names: Vec<String>,
    pub invalid_names: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

impl EstimateResult {
    pub fn vcov_matrix(&self) -> DMatrix<f64> {
        let k = self.vcov.len();
        DMatrix::from_fn(k, k, |r, c| self.vcov[r][c])
    }

    fn from_parts(
        d: &Dataset,
        parts: FitParts,
        estimator: EstimatorKind,
        vce: Vce,
        valid: &[usize],
        invalid: &[usize],
        first_stage: (f64, bool),
        names: (&DatasetNames, Vec<String>, Vec<String>),
    ) -> Self {
        let p = d.p();
        let ni = invalid.len();
        let k_w = parts.k - p - ni;
        let theta: Vec<f64> = parts.theta.iter().copied().collect();
        let se: Vec<f64> = (0..parts.k)
            .map(|i| parts.vcov[(i, i)].max(0.0).sqrt())
            .collect();
        let vcov: Vec<Vec<f64>> = (0..parts.k)
            .map(|r| (0..parts.k).map(|c| parts.vcov[(r, c)]).collect())
            .collect();
        let kappa = if estimator == EstimatorKind::Liml {
            Some(parts.kappa)
        } else {
            None
        };
        EstimateResult {
            estimator,
            vce,
            n: parts.n,
            beta: theta[0..p].to_vec(),
            alpha: theta[p..p + ni].to_vec(),
            control_coefs: theta[p + ni..p + ni + k_w].to_vec(),
            se,
            vcov,
            param_names: parts.r_names.clone(),
            first_stage_f: first_stage.0,
            f_capped: first_stage.1,
            kappa,
            valid_set: valid.to_vec(),
            invalid_set: invalid.to_vec(),
            valid_names: names.1,
            invalid_names: names.2,
            notes: parts.notes,
        }
    }
}

/// Two-stage least squares of `y` on (X, Z_invalid, W), instrumenting X with
/// Z_valid. Analytic weights and the requested vce apply throughout.
pub fn fit_2sls(
    d: &Dataset,
    valid: &[usize],
    invalid: &[usize],
    vce: Vce,
) -> Result<EstimateResult> {
    let parts = kclass_fit(d, valid, invalid, KappaSpec::TwoStage, vce)?;
    let fs = design::first_stage(d, valid, invalid, vce)?;
    Ok(EstimateResult::from_parts(
        d,
        parts,
        EstimatorKind::Tsls,
        vce,
        valid,
        invalid,
        fs,
        (d.names(), d.z_names_for(valid), d.z_names_for(invalid)),
    ))
}

/// κ-class LIML fit; with |valid| = P it coincides with 2SLS exactly.
pub fn fit_liml(
    d: &Dataset,
    valid: &[usize],
    invalid: &[usize],
    vce: Vce,
) -> Result<EstimateResult> {
    let parts = kclass_fit(d, valid, invalid, KappaSpec::Liml, vce)?;
    let fs = design::first_stage(d, valid, invalid, vce)?;
    Ok(EstimateResult::from_parts(
        d,
        parts,
        EstimatorKind::Liml,
        vce,
        valid,
        invalid,
        fs,
        (d.names(), d.z_names_for(valid), d.z_names_for(invalid)),
    ))
}

/// Just-identified IV with the single aggregated shift-share instrument built
/// from the valid classes, invalid shares entering as controls.
///
/// Dataset rows must follow the (location-major, period-ascending) grid of
/// `ss`, which is the order `build_ssiv` emits.
pub fn fit_ssiv(
    d: &Dataset,
    ss: &ShiftShareInputs,
    valid: &[usize],
    invalid: &[usize],
    vce: Vce,
) -> Result<EstimateResult> {
    design::validate_sets(d, valid, invalid)?;
    if d.p() != 1 {
        return Err(Error::Underidentified {
            valid: 1,
            regressors: d.p(),
        });
    }
    let cells = build_ssiv(ss, valid)?;
    if cells.len() != d.n() {
        return Err(Error::Dimension(format!(
            "constructed instrument has {} cells but the dataset has {} rows; \
             rows must follow the location × period grid",
            cells.len(),
            d.n()
        )));
    }
    let s_vec = DVector::from_iterator(cells.len(), cells.iter().map(|c| c.value));

    // Re-seat the sample: single instrument s, invalid shares become controls.
    let n = d.n();
    let ni = invalid.len();
    let mut w = DMatrix::zeros(n, ni + d.k());
    for (c, &jz) in invalid.iter().enumerate() {
        w.column_mut(c).copy_from(&d.z().column(jz));
    }
    for c in 0..d.k() {
        w.column_mut(ni + c).copy_from(&d.w().column(c));
    }
    let names = DatasetNames {
        y: d.names().y.clone(),
        x: d.names().x.clone(),
        z: vec!["ssiv".to_string()],
        w: invalid
            .iter()
            .map(|&j| d.names().z[j].clone())
            .chain(d.names().w.iter().cloned())
            .collect(),
    };
    let clusters = d
        .clusters()
        .map(|ids| ids.iter().map(|g| g.to_string()).collect());
    let tmp = Dataset::new(
        d.y().clone(),
        d.x().clone(),
        s_vec.clone().reshape_generic(nalgebra::Dyn(n), nalgebra::Dyn(1)),
        w,
        d.weights().cloned(),
        clusters,
        names,
    )?;
    let parts = kclass_fit(&tmp, &[0], &[], KappaSpec::TwoStage, vce)?;
    let fs = design::first_stage(&tmp, &[0], &[], vce)?;

    let p = d.p();
    let theta: Vec<f64> = parts.theta.iter().copied().collect();
    let se: Vec<f64> = (0..parts.k)
        .map(|i| parts.vcov[(i, i)].max(0.0).sqrt())
        .collect();
    let vcov: Vec<Vec<f64>> = (0..parts.k)
        .map(|r| (0..parts.k).map(|c| parts.vcov[(r, c)]).collect())
        .collect();
    Ok(EstimateResult {
        estimator: EstimatorKind::Ssiv,
        vce,
        n: parts.n,
        beta: theta[0..p].to_vec(),
        alpha: theta[p..p + ni].to_vec(),
        control_coefs: theta[p + ni..].to_vec(),
        se,
        vcov,
        param_names: parts.r_names.clone(),
        first_stage_f: fs.0,
        f_capped: fs.1,
        kappa: None,
        valid_set: valid.to_vec(),
        invalid_set: invalid.to_vec(),
        valid_names: valid.iter().map(|&j| ss.classes[j].clone()).collect(),
        invalid_names: invalid.iter().map(|&j| ss.classes[j].clone()).collect(),
        notes: parts.notes,
    })
}

/// First-stage strength of the excluded instruments: F statistic for P = 1
/// (consistent with the requested vce), Cragg–Donald minimum eigenvalue for
/// P > 1. Degenerate perfect-fit first stages report a capped value.
pub fn first_stage_strength(
    d: &Dataset,
    valid: &[usize],
    invalid: &[usize],
    vce: Vce,
) -> Result<f64> {
    design::first_stage(d, valid, invalid, vce).map(|(f, _)| f)
}

pub const DEFAULT_COMBINATION_CAP: u128 = 200_000;

/// All C(J, P) exactly-identified estimates.
///
/// Each combination instruments X with exactly those P instruments while the
/// remaining J − P enter the structural equation as controls (the Ĥ-partition
/// construction; equivalently β̂ = γ̂₁⁻¹Γ̂₁ from the full reduced forms).
/// Combinations with a rank-deficient first stage are flagged as non-finite
/// rows and counted in `dropped`.
#[derive(Debug, Clone)]
pub struct CombinationEstimates {
    /// Lexicographically ordered P-subsets of 0..J.
    pub combos: Vec<Vec<usize>>,
    /// C(J,P) × P matrix of estimates; degenerate rows are NaN.
    pub betas: DMatrix<f64>,
    /// Matching standard errors when computed (`just_identified`), `None`
    /// for the fast reduced-form-only path.
    pub ses: Option<DMatrix<f64>>,
    pub dropped: usize,
}

pub(crate) fn n_combinations(j: usize, p: usize) -> u128 {
    let mut num: u128 = 1;
    for i in 0..p {
        num = num * (j - i) as u128 / (i + 1) as u128;
    }
    num
}

/// Full just-identified sweep with standard errors per `vce`.
pub fn just_identified(d: &Dataset, vce: Vce) -> Result<CombinationEstimates> {
    just_identified_capped(d, vce, DEFAULT_COMBINATION_CAP)
}

pub fn just_identified_capped(
    d: &Dataset,
    vce: Vce,
    cap: u128,
) -> Result<CombinationEstimates> {
    combination_estimates(d, Some(vce), cap)
}

/// Reduced-form-only combination estimates (no standard errors); the fast
/// path used inside the adaptive-Lasso initial estimator.
pub(crate) fn combo_betas(d: &Dataset) -> Result<CombinationEstimates> {
    combination_estimates(d, None, DEFAULT_COMBINATION_CAP)
}

fn combination_estimates(
    d: &Dataset,
    vce: Option<Vce>,
    cap: u128,
) -> Result<CombinationEstimates> {
    let (p, j) = (d.p(), d.j());
    let count = n_combinations(j, p);
    if count > cap {
        return Err(Error::CombinationCap { count, cap });
    }
    let count = count as usize;

    let gram = d.gram();
    let g = &gram.g;
    let z_cols: Vec<usize> = (0..j).map(|i| d.col_z(i)).collect();
    let w_cols: Vec<usize> = (0..d.k()).map(|i| d.col_w(i)).collect();
    let x_cols: Vec<usize> = (0..p).map(|i| d.col_x(i)).collect();
    let y_col = d.col_y();

    // Reduced forms of y and X on Z after partialling the controls.
    let sub = |rows: &[usize], cols: &[usize]| {
        DMatrix::from_fn(rows.len(), cols.len(), |r, c| g[(rows[r], cols[c])])
    };
    let partial = |a: &[usize], b: &[usize]| -> Result<DMatrix<f64>> {
        let ab = sub(a, b);
        if w_cols.is_empty() {
            return Ok(ab);
        }
        let ww = sub(&w_cols, &w_cols);
        let wa = sub(&w_cols, a);
        let wb = sub(&w_cols, b);
        let chol = ww.cholesky().ok_or_else(|| Error::Numerical {
            context: "control partialling".into(),
            detail: "control cross-product is singular".into(),
        })?;
        Ok(&ab - wa.tr_mul(&chol.solve(&wb)))
    };
    let zz = partial(&z_cols, &z_cols)?;
    let zy = partial(&z_cols, &[y_col])?;
    let zx = partial(&z_cols, &x_cols)?;
    let zz_chol = zz.clone().cholesky().ok_or_else(|| Error::Numerical {
        context: "reduced form".into(),
        detail: "instrument cross-product is singular".into(),
    })?;
    let big_gamma = zz_chol.solve(&zy); // J × 1
    let small_gamma = zz_chol.solve(&zx); // J × P

    let mut betas = DMatrix::from_element(count, p, f64::NAN);
    let mut ses = vce.map(|_| DMatrix::from_element(count, p, f64::NAN));
    let mut dropped = 0usize;
    let mut combos = Vec::with_capacity(count);

    let gamma_scale = small_gamma.amax().max(1e-300);

    for (row, combo) in (0..j).combinations(p).enumerate() {
        let g1 = DMatrix::from_fn(p, p, |r, c| small_gamma[(combo[r], c)]);
        let rhs = DVector::from_fn(p, |r, _| big_gamma[(combo[r], 0)]);
        // beta solves γ₁ β = Γ₁ (rows of the reduced forms at this combination).
        let lu = g1.clone().full_piv_lu();
        let degenerate = (0..p).any(|i| lu.u()[(i, i)].abs() <= 1e-10 * gamma_scale);
        if degenerate {
            dropped += 1;
            combos.push(combo);
            continue;
        }
        match lu.solve(&rhs) {
            Some(beta) => {
                for c in 0..p {
                    betas[(row, c)] = beta[c];
                }
            }
            None => {
                dropped += 1;
                combos.push(combo);
                continue;
            }
        }

        if let Some(vce) = vce {
            let others: Vec<usize> = (0..j).filter(|i| !combo.contains(i)).collect();
            match kclass_fit(d, &combo, &others, KappaSpec::TwoStage, vce) {
                Ok(parts) => {
                    let ses = ses.as_mut().unwrap();
                    for c in 0..p {
                        ses[(row, c)] = parts.vcov[(c, c)].max(0.0).sqrt();
                    }
                }
                Err(_) => {
                    // Keep the beta, flag the uncertainty as unavailable.
                }
            }
        }
        combos.push(combo);
    }

    if 2 * dropped > count {
        return Err(Error::TooManyDegenerate {
            dropped,
            total: count,
        });
    }

    Ok(CombinationEstimates {
        combos,
        betas,
        ses,
        dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mc::{stream_rng, NormalSource};
    use approx::assert_relative_eq;

    /// Simple simulated sample: Z standard-normal-ish columns, first stage
    /// X = Zγ + ε, outcome y = Xβ + Zα + u with corr(u, ε) = 0.5.
    fn sim(n: usize, gamma: &[f64], alpha: &[f64], beta: f64, seed: u64) -> Dataset {
        let j = gamma.len();
        let mut src = NormalSource::new(stream_rng(seed, 900, 0));
        let mut z = DMatrix::zeros(n, j);
        for r in 0..n {
            for c in 0..j {
                z[(r, c)] = src.normal();
            }
        }
        let mut x = DVector::zeros(n);
        let mut y = DVector::zeros(n);
        for r in 0..n {
            let u = src.normal();
            let e = 0.5 * u + (0.75f64).sqrt() * src.normal();
            let mut zx = 0.0;
            let mut za = 0.0;
            for c in 0..j {
                zx += z[(r, c)] * gamma[c];
                za += z[(r, c)] * alpha[c];
            }
            x[r] = zx + e;
            y[r] = beta * x[r] + za + u;
        }
        Dataset::unnamed(y, DMatrix::from_column_slice(n, 1, x.as_slice()), z).unwrap()
    }

    #[test]
    fn just_identified_closed_form_p1_j1() {
        // β̂ = (z'y)/(z'x) on a 5-row example, computed by hand.
        let y = DVector::from_vec(vec![1.0, 2.0, 0.5, -1.0, 3.0]);
        let x = DMatrix::from_vec(5, 1, vec![2.0, 1.0, 0.0, -1.0, 4.0]);
        let z = DMatrix::from_vec(5, 1, vec![1.0, 0.5, 1.5, -0.5, 2.0]);
        let zy: f64 = (0..5).map(|i| z[(i, 0)] * y[i]).sum();
        let zx: f64 = (0..5).map(|i| z[(i, 0)] * x[(i, 0)]).sum();
        let d = Dataset::unnamed(y, x, z).unwrap();
        let fit = fit_2sls(&d, &[0], &[], Vce::Homoskedastic).unwrap();
        assert_relative_eq!(fit.beta[0], zy / zx, max_relative = 1e-12);
    }

    #[test]
    fn overidentified_2sls_matches_textbook_oracle() {
        let d = sim(60, &[0.8, 0.5, 0.3], &[0.0; 3], 1.5, 3);
        let fit = fit_2sls(&d, &[0, 1, 2], &[], Vce::Homoskedastic).unwrap();

        // Textbook oracle: materialize P_Z and run the two stages explicitly.
        let z = d.z();
        let pz = z * (z.tr_mul(z)).try_inverse().unwrap() * z.transpose();
        let xhat = &pz * d.x();
        let beta = (xhat.tr_mul(&xhat)).try_inverse().unwrap() * xhat.tr_mul(d.y());
        assert_relative_eq!(fit.beta[0], beta[(0, 0)], max_relative = 1e-10);

        // Homoskedastic oracle se.
        let resid = d.y() - d.x() * beta[(0, 0)];
        let sigma2 = resid.dot(&resid) / d.n() as f64;
        let se = (sigma2 / xhat.tr_mul(&xhat)[(0, 0)]).sqrt();
        assert_relative_eq!(fit.se[0], se, max_relative = 1e-10);
    }

    #[test]
    fn invalid_controls_equal_included_exogenous_regressors() {
        // The step-2 contract: controlling Z_I equals 2SLS on the augmented model.
        let d = sim(80, &[0.8, 0.5, 0.3, 0.4], &[0.0, 0.0, 0.6, 0.0], 1.0, 4);
        let fit = fit_2sls(&d, &[0, 1, 3], &[2], Vce::Homoskedastic).unwrap();

        let n = d.n();
        let z = d.z();
        let mut r = DMatrix::zeros(n, 2);
        r.column_mut(0).copy_from(&d.x().column(0));
        r.column_mut(1).copy_from(&z.column(2));
        let q = z.clone();
        let pq = &q * (q.tr_mul(&q)).try_inverse().unwrap() * q.transpose();
        let rhat = &pq * &r;
        let theta = (rhat.tr_mul(&rhat)).try_inverse().unwrap() * rhat.tr_mul(d.y());
        assert_relative_eq!(fit.beta[0], theta[(0, 0)], max_relative = 1e-9);
        assert_relative_eq!(fit.alpha[0], theta[(1, 0)], max_relative = 1e-9);
    }

    #[test]
    fn liml_just_identified_equals_2sls() {
        let d = sim(50, &[0.7], &[0.0], 0.5, 5);
        let a = fit_2sls(&d, &[0], &[], Vce::Homoskedastic).unwrap();
        let b = fit_liml(&d, &[0], &[], Vce::Homoskedastic).unwrap();
        assert!((a.beta[0] - b.beta[0]).abs() < 1e-10);
        assert!((b.kappa.unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn liml_kappa_sanity_band_under_correct_specification() {
        let d = sim(2000, &[0.6; 10], &[0.0; 10], 0.0, 6);
        let all: Vec<usize> = (0..10).collect();
        let fit = fit_liml(&d, &all, &[], Vce::Homoskedastic).unwrap();
        let kappa = fit.kappa.unwrap();
        assert!(kappa >= 1.0);
        assert!(kappa <= 1.0 + 10.0 * 10.0 / 2000.0, "kappa = {kappa}");
    }

    #[test]
    fn liml_and_2sls_agree_within_joint_ses_when_all_valid() {
        let d = sim(4000, &[0.6; 10], &[0.0; 10], 0.0, 7);
        let all: Vec<usize> = (0..10).collect();
        let a = fit_2sls(&d, &all, &[], Vce::Homoskedastic).unwrap();
        let b = fit_liml(&d, &all, &[], Vce::Homoskedastic).unwrap();
        let joint = (a.se[0].powi(2) + b.se[0].powi(2)).sqrt();
        assert!((a.beta[0] - b.beta[0]).abs() <= 2.0 * joint);
    }

    #[test]
    fn single_combination_when_j_equals_p() {
        let d = sim(50, &[0.7], &[0.0], 0.5, 8);
        let ce = just_identified(&d, Vce::Homoskedastic).unwrap();
        assert_eq!(ce.combos, vec![vec![0]]);
        let fit = fit_2sls(&d, &[0], &[], Vce::Homoskedastic).unwrap();
        assert_relative_eq!(ce.betas[(0, 0)], fit.beta[0], max_relative = 1e-10);
        assert_relative_eq!(ce.ses.as_ref().unwrap()[(0, 0)], fit.se[0], max_relative = 1e-10);
    }

    #[test]
    fn combinations_j4_p2_match_loop_oracle() {
        // Two treatments, four instruments; every pair estimated by a direct
        // exactly-identified IV solve with the other two as controls.
        let n = 120;
        let mut src = NormalSource::new(stream_rng(11, 901, 0));
        let mut z = DMatrix::zeros(n, 4);
        for r in 0..n {
            for c in 0..4 {
                z[(r, c)] = src.normal();
            }
        }
        let gamma = DMatrix::from_row_slice(4, 2, &[0.9, 0.1, 0.2, 0.8, 0.5, 0.4, 0.3, 0.6]);
        let mut x = DMatrix::zeros(n, 2);
        let mut y = DVector::zeros(n);
        for r in 0..n {
            let u = src.normal();
            for p in 0..2 {
                let mut v = 0.3 * u + src.normal();
                for c in 0..4 {
                    v += z[(r, c)] * gamma[(c, p)];
                }
                x[(r, p)] = v;
            }
            y[r] = 1.0 * x[(r, 0)] - 0.5 * x[(r, 1)] + 0.4 * z[(r, 3)] + u;
        }
        let d = Dataset::unnamed(y.clone(), x.clone(), z.clone()).unwrap();
        let ce = just_identified(&d, Vce::Homoskedastic).unwrap();
        assert_eq!(ce.combos.len(), 6);
        assert_eq!(
            ce.combos,
            vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]
        );

        for (row, combo) in ce.combos.iter().enumerate() {
            let others: Vec<usize> = (0..4).filter(|k| !combo.contains(k)).collect();
            // R = [X, Z_others], Q = Z (square system).
            let mut r_m = DMatrix::zeros(n, 4);
            r_m.columns_mut(0, 2).copy_from(&x);
            for (i, &o) in others.iter().enumerate() {
                r_m.column_mut(2 + i).copy_from(&z.column(o));
            }
            let qr = z.tr_mul(&r_m);
            let qy = z.tr_mul(&y);
            let theta = qr.clone().try_inverse().unwrap() * &qy;
            for p in 0..2 {
                assert_relative_eq!(ce.betas[(row, p)], theta[(p, 0)], max_relative = 1e-8);
            }
            // Homoskedastic oracle covariance (Q'R)^{-1} Q'Q (R'Q)^{-1} σ².
            let resid = &y - &r_m * &theta;
            let sigma2 = resid.dot(&resid) / n as f64;
            let qr_inv = qr.try_inverse().unwrap();
            let v = &qr_inv * z.tr_mul(&z) * qr_inv.transpose() * sigma2;
            let ses = ce.ses.as_ref().unwrap();
            for p in 0..2 {
                assert_relative_eq!(ses[(row, p)], v[(p, p)].sqrt(), max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn toy_five_country_estimates_converge_to_inconsistencies() {
        // Three valid shares at β = 0 and two invalid with c = α/γ = 0.5.
        let d = sim(4000, &[0.6; 5], &[0.0, 0.0, 0.0, 0.3, 0.3], 0.0, 12);
        let ce = just_identified(&d, Vce::Homoskedastic).unwrap();
        let ses = ce.ses.as_ref().unwrap();
        for row in 0..5 {
            let target = if row < 3 { 0.0 } else { 0.5 };
            let slack = 4.0 * ses[(row, 0)];
            assert!(
                (ce.betas[(row, 0)] - target).abs() < slack,
                "row {row}: {} vs {target}",
                ce.betas[(row, 0)]
            );
        }
    }

    #[test]
    fn normal_equations_orthogonality() {
        // 2SLS estimating equations: the residual y − Rθ̂ is orthogonal to the
        // projected design [X̂, Z_invalid] (and to all of Z when just identified).
        let d = sim(300, &[0.8, 0.5, 0.3, 0.4], &[0.0, 0.0, 0.6, 0.0], 1.0, 13);
        let fit = fit_2sls(&d, &[0, 1, 3], &[2], Vce::Robust).unwrap();
        let resid = d.y() - d.x() * fit.beta[0] - d.z().column(2) * fit.alpha[0];
        let scale = d.y().norm() * d.z().norm();

        let q = d.z();
        let xhat = q * (q.tr_mul(q)).try_inverse().unwrap() * q.tr_mul(d.x());
        let dot_xhat = xhat.column(0).dot(&resid);
        assert!(dot_xhat.abs() / scale < 1e-8, "xhat: {dot_xhat}");
        let dot_ctrl = d.z().column(2).dot(&resid);
        assert!(dot_ctrl.abs() / scale < 1e-8, "control: {dot_ctrl}");

        // Just-identified fit: every instrument is orthogonal to the residual.
        let ji = fit_2sls(&d, &[0], &[1, 2, 3], Vce::Homoskedastic).unwrap();
        let resid = d.y()
            - d.x() * ji.beta[0]
            - d.z().column(1) * ji.alpha[0]
            - d.z().column(2) * ji.alpha[1]
            - d.z().column(3) * ji.alpha[2];
        for jz in 0..4 {
            let dot = d.z().column(jz).dot(&resid);
            assert!(dot.abs() / scale < 1e-8, "column {jz}: {dot}");
        }
    }

    #[test]
    fn y_scaling_scales_beta_and_leaves_f_alone() {
        let d = sim(200, &[0.8, 0.5], &[0.0, 0.0], 1.0, 14);
        let fit = fit_2sls(&d, &[0, 1], &[], Vce::Homoskedastic).unwrap();
        let y2 = d.y() * 7.0;
        let d2 = Dataset::unnamed(y2, d.x().clone(), d.z().clone()).unwrap();
        let fit2 = fit_2sls(&d2, &[0, 1], &[], Vce::Homoskedastic).unwrap();
        assert_relative_eq!(fit2.beta[0], 7.0 * fit.beta[0], max_relative = 1e-10);
        assert_relative_eq!(fit2.first_stage_f, fit.first_stage_f, max_relative = 1e-12);
    }

    #[test]
    fn permuting_instruments_permutes_combination_rows() {
        let d = sim(100, &[0.8, 0.5, 0.3], &[0.0, 0.4, 0.0], 1.0, 15);
        let ce = just_identified(&d, Vce::Homoskedastic).unwrap();

        // Swap columns 0 and 2.
        let mut z2 = d.z().clone();
        z2.swap_columns(0, 2);
        let d2 = Dataset::unnamed(d.y().clone(), d.x().clone(), z2).unwrap();
        let ce2 = just_identified(&d2, Vce::Homoskedastic).unwrap();

        let perm = |j: usize| match j {
            0 => 2,
            2 => 0,
            other => other,
        };
        for (row, combo) in ce.combos.iter().enumerate() {
            let mut mapped: Vec<usize> = combo.iter().map(|&j| perm(j)).collect();
            mapped.sort_unstable();
            let row2 = ce2.combos.iter().position(|c| *c == mapped).unwrap();
            assert_relative_eq!(ce.betas[(row, 0)], ce2.betas[(row2, 0)], max_relative = 1e-9);
        }
    }

    #[test]
    fn singleton_clusters_equal_hc0_times_small_sample_factor() {
        let d = sim(80, &[0.8, 0.5], &[0.0, 0.0], 1.0, 16);
        let robust = fit_2sls(&d, &[0, 1], &[], Vce::Robust).unwrap();
        let cluster = fit_2sls(&d, &[0, 1], &[], Vce::Cluster).unwrap();
        let n = d.n() as f64;
        assert_relative_eq!(
            cluster.vcov[0][0],
            robust.vcov[0][0] * n / (n - 1.0),
            max_relative = 1e-12
        );
    }

    #[test]
    fn robust_close_to_homoskedastic_under_iid_errors() {
        let d = sim(4000, &[0.8, 0.5], &[0.0, 0.0], 1.0, 17);
        let homo = fit_2sls(&d, &[0, 1], &[], Vce::Homoskedastic).unwrap();
        let rob = fit_2sls(&d, &[0, 1], &[], Vce::Robust).unwrap();
        let ratio = rob.se[0] / homo.se[0];
        assert!((ratio - 1.0).abs() < 0.10, "ratio = {ratio}");
    }

    #[test]
    fn duplicating_rows_within_cluster_keeps_cluster_se() {
        let base = sim(150, &[0.8, 0.5], &[0.0, 0.0], 1.0, 18);
        let ids: Vec<String> = (0..150).map(|i| format!("c{i}")).collect();
        let with_ids = Dataset::new(
            base.y().clone(),
            base.x().clone(),
            base.z().clone(),
            DMatrix::zeros(150, 0),
            None,
            Some(ids.clone()),
            base.names().clone(),
        )
        .unwrap();

        // Duplicate every row, keeping duplicates in the same cluster.
        let n2 = 300;
        let mut y = DVector::zeros(n2);
        let mut x = DMatrix::zeros(n2, 1);
        let mut z = DMatrix::zeros(n2, 2);
        let mut ids2 = Vec::with_capacity(n2);
        for i in 0..150 {
            for k in 0..2 {
                let r = 2 * i + k;
                y[r] = base.y()[i];
                x[(r, 0)] = base.x()[(i, 0)];
                z[(r, 0)] = base.z()[(i, 0)];
                z[(r, 1)] = base.z()[(i, 1)];
                ids2.push(ids[i].clone());
            }
        }
        let doubled = Dataset::new(
            y,
            x,
            z,
            DMatrix::zeros(n2, 0),
            None,
            Some(ids2),
            base.names().clone(),
        )
        .unwrap();

        let f1 = fit_2sls(&with_ids, &[0, 1], &[], Vce::Cluster).unwrap();
        let f2 = fit_2sls(&doubled, &[0, 1], &[], Vce::Cluster).unwrap();
        assert_relative_eq!(f1.se[0], f2.se[0], max_relative = 1e-10);

        let r1 = fit_2sls(&with_ids, &[0, 1], &[], Vce::Robust).unwrap();
        let r2 = fit_2sls(&doubled, &[0, 1], &[], Vce::Robust).unwrap();
        assert!(r2.se[0] < r1.se[0]);
    }

    #[test]
    fn first_stage_f_near_one_when_instruments_irrelevant() {
        let d = sim(20000, &[0.0; 5], &[0.0; 5], 0.0, 19);
        let all: Vec<usize> = (0..5).collect();
        let f = first_stage_strength(&d, &all, &[], Vce::Homoskedastic).unwrap();
        assert!(f > 0.3 && f < 2.5, "F = {f}");
    }

    #[test]
    fn duplicate_of_x_as_instrument_caps_f() {
        let mut src = NormalSource::new(stream_rng(23, 902, 0));
        let n = 40;
        let x: Vec<f64> = (0..n).map(|_| src.normal()).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.5 * v).collect();
        let d = Dataset::unnamed(
            DVector::from_vec(y),
            DMatrix::from_column_slice(n, 1, &x),
            DMatrix::from_column_slice(n, 1, &x),
        )
        .unwrap();
        let fit = fit_2sls(&d, &[0], &[], Vce::Homoskedastic).unwrap();
        assert!(fit.f_capped);
        assert_eq!(fit.first_stage_f, crate::design::F_CAP);
    }

    #[test]
    fn underidentified_and_collinear_errors() {
        let d = sim(60, &[0.8, 0.5], &[0.0, 0.0], 1.0, 24);
        let err = fit_2sls(&d, &[], &[0, 1], Vce::Homoskedastic).unwrap_err();
        assert!(matches!(err, Error::Underidentified { .. }));

        // A control duplicating an invalid instrument makes the design collinear.
        let mut w = DMatrix::zeros(60, 1);
        w.column_mut(0).copy_from(&d.z().column(1));
        let dd = Dataset::new(
            d.y().clone(),
            d.x().clone(),
            d.z().clone(),
            w,
            None,
            None,
            DatasetNames {
                w: vec!["dup".into()],
                ..d.names().clone()
            },
        )
        .unwrap();
        let err = fit_2sls(&dd, &[0], &[1], Vce::Homoskedastic).unwrap_err();
        assert!(matches!(err, Error::Collinear { .. }), "got {err}");
    }

    fn ssiv_fixture() -> (Dataset, ShiftShareInputs) {
        // 6 locations × 2 periods, 3 classes; shares constant within location.
        let n_loc = 6;
        let periods = ["t1", "t2"];
        let mut src = NormalSource::new(stream_rng(31, 903, 0));
        let mut shares = Vec::new();
        let mut shifts = Vec::new();
        let gvals = [[0.5, 1.5], [-0.4, 0.9], [1.1, 0.2]];
        for (c, grow) in gvals.iter().enumerate() {
            for (t, period) in periods.iter().enumerate() {
                shifts.push((format!("c{c}"), period.to_string(), grow[t]));
            }
        }
        let mut share_mat = vec![[0.0; 3]; n_loc];
        for (l, row) in share_mat.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = 0.05 + 0.25 * ((src.uniform() + l as f64 + c as f64) % 1.0);
                shares.push((format!("L{l}"), format!("c{c}"), *v));
            }
        }
        let ss = ShiftShareInputs::new(shares, shifts).unwrap();

        let n = n_loc * periods.len();
        let mut z = DMatrix::zeros(n, 3);
        let mut x = DVector::zeros(n);
        let mut y = DVector::zeros(n);
        let mut row = 0;
        for l in 0..n_loc {
            for t in 0..periods.len() {
                for c in 0..3 {
                    z[(row, c)] = share_mat[l][c];
                }
                let s: f64 = (0..3).map(|c| share_mat[l][c] * gvals[c][t]).sum();
                let u = src.normal();
                let e = 0.4 * u + src.normal();
                x[row] = 2.0 * s + e;
                y[row] = 0.7 * x[row] + u;
                row += 1;
            }
        }
        let d = Dataset::unnamed(y, DMatrix::from_column_slice(n, 1, x.as_slice()), z).unwrap();
        (d, ss)
    }

    #[test]
    fn ssiv_all_valid_matches_external_aggregate_oracle() {
        let (d, ss) = ssiv_fixture();
        let fit = fit_ssiv(&d, &ss, &[0, 1, 2], &[], Vce::Homoskedastic).unwrap();

        // External construction: aggregate instrument built by hand, plain 2SLS.
        let cells = build_ssiv(&ss, &[0, 1, 2]).unwrap();
        let s_vec: Vec<f64> = cells.iter().map(|c| c.value).collect();
        let d2 = Dataset::unnamed(
            d.y().clone(),
            d.x().clone(),
            DMatrix::from_column_slice(d.n(), 1, &s_vec),
        )
        .unwrap();
        let oracle = fit_2sls(&d2, &[0], &[], Vce::Homoskedastic).unwrap();
        assert_relative_eq!(fit.beta[0], oracle.beta[0], max_relative = 1e-10);
        assert_relative_eq!(fit.se[0], oracle.se[0], max_relative = 1e-10);
    }

    #[test]
    fn ssiv_single_class_equals_share_shift_product_iv() {
        let (d, ss) = ssiv_fixture();
        let fit = fit_ssiv(&d, &ss, &[1], &[0, 2], Vce::Homoskedastic).unwrap();

        let cells = build_ssiv(&ss, &[1]).unwrap();
        let s_vec: Vec<f64> = cells.iter().map(|c| c.value).collect();
        let mut w = DMatrix::zeros(d.n(), 2);
        w.column_mut(0).copy_from(&d.z().column(0));
        w.column_mut(1).copy_from(&d.z().column(2));
        let d2 = Dataset::new(
            d.y().clone(),
            d.x().clone(),
            DMatrix::from_column_slice(d.n(), 1, &s_vec),
            w,
            None,
            None,
            DatasetNames::synthetic(1, 1, 2),
        )
        .unwrap();
        let oracle = fit_2sls(&d2, &[0], &[], Vce::Homoskedastic).unwrap();
        assert_relative_eq!(fit.beta[0], oracle.beta[0], max_relative = 1e-10);
        assert_eq!(fit.invalid_names, vec!["c0", "c2"]);
    }
}
