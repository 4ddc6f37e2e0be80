//! Overidentification statistics and the downward-testing threshold schedule.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::Dataset;
use crate::design::{kclass_fit, FitParts, KappaSpec, Vce};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestKind {
    /// Hansen-Sargan: Sargan n·R² under homoskedastic vce, Hansen J with the
    /// corresponding weight matrix under robust/cluster vce.
    Hs,
    /// Anderson-Rubin overidentification variant: the statistic minimized
    /// over β, i.e. the LIML eigenvalue form (n − #params)(κ − 1).
    Ar,
}

impl std::fmt::Display for TestKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TestKind::Hs => "hs",
            TestKind::Ar => "ar",
        })
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TestOutcome {
    pub stat: f64,
    pub df: usize,
    pub p_value: f64,
    pub test: TestKind,
}

fn chi2_sf(stat: f64, df: usize) -> f64 {
    if stat <= 0.0 {
        return 1.0;
    }
    let dist = ChiSquared::new(df as f64).expect("df >= 1");
    dist.sf(stat)
}

fn check_testable(d: &Dataset, valid: &[usize]) -> Result<usize> {
    let p = d.p();
    if valid.len() <= p {
        return Err(Error::TestUndefined {
            valid: valid.len(),
            regressors: p,
        });
    }
    Ok(valid.len() - p)
}

/// Hansen-Sargan test of the overidentifying restrictions of the 2SLS fit
/// with `valid` excluded instruments and `invalid` shares as controls.
pub fn hansen_sargan(
    d: &Dataset,
    valid: &[usize],
    invalid: &[usize],
    vce: Vce,
) -> Result<TestOutcome> {
    let df = check_testable(d, valid)?;
    let parts = kclass_fit(d, valid, invalid, KappaSpec::TwoStage, vce)?;
    let stat = hansen_sargan_stat(d, &parts, vce)?;
    Ok(TestOutcome {
        stat,
        df,
        p_value: chi2_sf(stat, df),
        test: TestKind::Hs,
    })
}

pub(crate) fn hansen_sargan_stat(d: &Dataset, parts: &FitParts, vce: Vce) -> Result<f64> {
    let n = parts.n as f64;
    match vce {
        Vce::Homoskedastic => {
            // Sargan n·R² form: n · û'P_Q û / û'û.
            if parts.rss <= 0.0 {
                return Ok(0.0);
            }
            let a_chol = parts.a_qq.clone().cholesky().ok_or_else(|| Error::Numerical {
                context: "Sargan statistic".into(),
                detail: "instrument cross-product is singular".into(),
            })?;
            let quad = parts.q_uhat.dot(&a_chol.solve(&parts.q_uhat));
            Ok(n * quad / parts.rss)
        }
        Vce::Robust | Vce::Cluster => {
            // Hansen J with the vce-matched weight matrix, evaluated at the
            // 2SLS residuals.
            let gram = d.gram();
            let mm = &gram.m;
            let q = mm.select_columns(parts.q_cols.iter());
            let uhat = mm.column(d.col_y()) - mm.select_columns(parts.r_cols.iter()) * &parts.theta;
            let m = parts.m;
            let mut meat = nalgebra::DMatrix::zeros(m, m);
            match vce {
                Vce::Robust => {
                    for i in 0..parts.n {
                        let gi = q.row(i).transpose() * uhat[i];
                        meat += &gi * gi.transpose();
                    }
                }
                Vce::Cluster => {
                    let groups: Vec<Vec<usize>> = match d.clusters() {
                        Some(ids) => {
                            let mut gr = vec![Vec::new(); d.n_clusters()];
                            for (row, &gid) in ids.iter().enumerate() {
                                gr[gid].push(row);
                            }
                            gr
                        }
                        None => (0..parts.n).map(|i| vec![i]).collect(),
                    };
                    for rows in &groups {
                        let mut h = nalgebra::DVector::zeros(m);
                        for &i in rows {
                            h += q.row(i).transpose() * uhat[i];
                        }
                        meat += &h * h.transpose();
                    }
                }
                Vce::Homoskedastic => unreachable!(),
            }
            let chol = meat.cholesky().ok_or_else(|| Error::Numerical {
                context: "Hansen J".into(),
                detail: "weight matrix is singular".into(),
            })?;
            Ok(parts.q_uhat.dot(&chol.solve(&parts.q_uhat)))
        }
    }
}

/// Weak-instrument-robust overidentification test: (n − #params)(κ − 1) with
/// κ the LIML eigenvalue, chi-square(|valid| − P).
pub fn anderson_rubin(d: &Dataset, valid: &[usize], invalid: &[usize]) -> Result<TestOutcome> {
    let df = check_testable(d, valid)?;
    let parts = kclass_fit(d, valid, invalid, KappaSpec::Liml, Vce::Homoskedastic)?;
    let stat = anderson_rubin_stat(&parts);
    Ok(TestOutcome {
        stat,
        df,
        p_value: chi2_sf(stat, df),
        test: TestKind::Ar,
    })
}

pub(crate) fn anderson_rubin_stat(parts: &FitParts) -> f64 {
    let dof = (parts.n as f64 - parts.k as f64).max(1.0);
    (dof * (parts.kappa - 1.0)).max(0.0)
}

/// Runs the requested overidentification test.
pub fn overid_test(
    d: &Dataset,
    valid: &[usize],
    invalid: &[usize],
    test: TestKind,
    vce: Vce,
) -> Result<TestOutcome> {
    match test {
        TestKind::Hs => hansen_sargan(d, valid, invalid, vce),
        TestKind::Ar => anderson_rubin(d, valid, invalid),
    }
}

/// Downward-testing significance level: `override` when given, else c/ln(n).
pub fn testing_threshold(n: usize, c: f64, override_level: Option<f64>) -> Result<f64> {
    if let Some(level) = override_level {
        if !(0.0..1.0).contains(&level) || level <= 0.0 {
            return Err(Error::Invalid(format!(
                "significance override must lie in (0, 1), got {level}"
            )));
        }
        return Ok(level);
    }
    if n <= 1 {
        return Err(Error::Invalid(format!(
            "sample size must exceed one for the c/ln(n) threshold, got {n}"
        )));
    }
    if c <= 0.0 {
        return Err(Error::Invalid(format!("threshold constant must be positive, got {c}")));
    }
    Ok(c / (n as f64).ln())
}
