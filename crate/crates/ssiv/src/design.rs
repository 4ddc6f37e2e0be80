//! Weighted κ-class fitting engine shared by estimators, tests and selectors.
//!
//! Everything that does not need per-row residuals is computed from the
//! dataset's cached cross-products, which keeps repeated fits along a
//! selection path and inside Monte Carlo replications cheap.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::data::{Dataset, RANK_TOL};
use crate::error::{Error, Result};

/// Variance estimator for coefficient covariance matrices and tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vce {
    Homoskedastic,
    /// Heteroskedasticity-robust sandwich (HC0, no leverage corrections).
    Robust,
    /// Cluster-robust sandwich (CR0 with a G/(G-1) small-sample factor),
    /// using the dataset's cluster ids (singletons when absent).
    Cluster,
}

impl std::fmt::Display for Vce {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Vce::Homoskedastic => "homoskedastic",
            Vce::Robust => "robust",
            Vce::Cluster => "cluster",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum KappaSpec {
    TwoStage,
    Liml,
}

/// Everything downstream consumers need from one κ-class fit.
#[derive(Debug)]
pub(crate) struct FitParts {
    pub theta: DVector<f64>,
    pub vcov: DMatrix<f64>,
    pub kappa: f64,
    pub rss: f64,
    /// Q'û for overidentification statistics.
    pub q_uhat: DVector<f64>,
    /// Q'Q.
    pub a_qq: DMatrix<f64>,
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub r_cols: Vec<usize>,
    pub q_cols: Vec<usize>,
    pub r_names: Vec<String>,
    pub notes: Vec<String>,
}

pub(crate) fn validate_sets(d: &Dataset, valid: &[usize], invalid: &[usize]) -> Result<()> {
    let j = d.j();
    let mut seen = vec![false; j];
    for &idx in valid.iter().chain(invalid.iter()) {
        if idx >= j {
            return Err(Error::Invalid(format!(
                "instrument index {} out of range (J = {j})",
                idx + 1
            )));
        }
        if seen[idx] {
            return Err(Error::Invalid(format!(
                "instrument index {} appears twice across valid/invalid sets",
                idx + 1
            )));
        }
        seen[idx] = true;
    }
    Ok(())
}

fn sub(g: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| g[(rows[r], cols[c])])
}

fn sub_vec(g: &DMatrix<f64>, rows: &[usize], col: usize) -> DVector<f64> {
    DVector::from_fn(rows.len(), |r, _| g[(rows[r], col)])
}

/// Cholesky that names the offending column on failure.
fn chol_named(
    s: &DMatrix<f64>,
    names: &[String],
    context: &str,
) -> Result<Cholesky<f64, Dyn>> {
    if let Some(idx) = crate::data::dependent_column_gram(s) {
        return Err(Error::Collinear {
            index: idx + 1,
            name: names
                .get(idx)
                .cloned()
                .unwrap_or_else(|| format!("col{}", idx + 1)),
        });
    }
    s.clone().cholesky().ok_or_else(|| Error::Numerical {
        context: context.to_string(),
        detail: "Cholesky factorization failed".to_string(),
    })
}

impl FitParts {
    /// Rows of the dataset that belong to each cluster (singletons when the
    /// dataset has no cluster ids).
    fn cluster_groups(d: &Dataset) -> Vec<Vec<usize>> {
        match d.clusters() {
            Some(ids) => {
                let mut groups = vec![Vec::new(); d.n_clusters()];
                for (row, &g) in ids.iter().enumerate() {
                    groups[g].push(row);
                }
                groups
            }
            None => (0..d.n()).map(|i| vec![i]).collect(),
        }
    }
}

/// Fits the κ-class estimator of `y` on `[X, Z_invalid, W]`, instrumented by
/// `[Z_valid, Z_invalid, W]`. κ = 1 is 2SLS; `KappaSpec::Liml` computes the
/// smallest eigenvalue of the LIML eigenproblem (floored at one).
pub(crate) fn kclass_fit(
    d: &Dataset,
    valid: &[usize],
    invalid: &[usize],
    kappa_spec: KappaSpec,
    vce: Vce,
) -> Result<FitParts> {
    validate_sets(d, valid, invalid)?;
    let p = d.p();
    if valid.len() < p {
        return Err(Error::Underidentified {
            valid: valid.len(),
            regressors: p,
        });
    }
    let names = d.names();
    let gram = d.gram();
    let g = &gram.g;
    let n = d.n();

    // Column ids into the combined weighted matrix.
    let x_cols: Vec<usize> = (0..p).map(|i| d.col_x(i)).collect();
    let zi_cols: Vec<usize> = invalid.iter().map(|&j| d.col_z(j)).collect();
    let zv_cols: Vec<usize> = valid.iter().map(|&j| d.col_z(j)).collect();
    let w_cols: Vec<usize> = (0..d.k()).map(|i| d.col_w(i)).collect();

    let r_cols: Vec<usize> = x_cols
        .iter()
        .chain(zi_cols.iter())
        .chain(w_cols.iter())
        .copied()
        .collect();
    let q_cols: Vec<usize> = zv_cols
        .iter()
        .chain(zi_cols.iter())
        .chain(w_cols.iter())
        .copied()
        .collect();
    let r_names: Vec<String> = names
        .x
        .iter()
        .cloned()
        .chain(invalid.iter().map(|&j| names.z[j].clone()))
        .chain(names.w.iter().cloned())
        .collect();
    let q_names: Vec<String> = valid
        .iter()
        .map(|&j| names.z[j].clone())
        .chain(invalid.iter().map(|&j| names.z[j].clone()))
        .chain(names.w.iter().cloned())
        .collect();

    let y_col = d.col_y();
    let (k, m) = (r_cols.len(), q_cols.len());

    let a_qq = sub(g, &q_cols, &q_cols);
    let b_qr = sub(g, &q_cols, &r_cols);
    let c_qy = sub_vec(g, &q_cols, y_col);
    let rr = sub(g, &r_cols, &r_cols);
    let ry = sub_vec(g, &r_cols, y_col);
    let yy = g[(y_col, y_col)];

    let a_chol = chol_named(&a_qq, &q_names, "instrument cross-product")?;
    let f_proj = a_chol.solve(&b_qr); // A^{-1} Q'R
    let s_hat = b_qr.tr_mul(&f_proj); // R'P_Q R
    let t_hat = f_proj.tr_mul(&c_qy); // R'P_Q y

    let mut notes = Vec::new();
    let kappa = match kappa_spec {
        KappaSpec::TwoStage => 1.0,
        KappaSpec::Liml => {
            let e_cols: Vec<usize> = zi_cols.iter().chain(w_cols.iter()).copied().collect();
            liml_kappa(d, &e_cols, &q_cols, &a_chol)?
        }
    };

    // κ-class normal equations: [(1-κ) R'R + κ R'P_Q R] θ = (1-κ) R'y + κ R'P_Q y
    let s_k = &rr * (1.0 - kappa) + &s_hat * kappa;
    let t_k = &ry * (1.0 - kappa) + &t_hat * kappa;
    let s_chol = chol_named(&s_k, &r_names, "second-stage design")?;
    let theta = s_chol.solve(&t_k);

    let rss = (yy - 2.0 * theta.dot(&ry) + theta.dot(&(&rr * &theta))).max(0.0);
    let sigma2 = rss / n as f64;
    let q_uhat = &c_qy - &b_qr * &theta;

    let bread = s_chol.inverse();
    let vcov = match vce {
        Vce::Homoskedastic => &bread * sigma2,
        Vce::Robust | Vce::Cluster => {
            // Rows of X̃ = (1-κ) R + κ P_Q R and residuals û, one pass.
            let mm = &gram.m;
            let mut xt = mm.select_columns(r_cols.iter()) * (1.0 - kappa);
            xt += mm.select_columns(q_cols.iter()) * &f_proj * kappa;
            let uhat = mm.column(y_col) - mm.select_columns(r_cols.iter()) * &theta;
            let meat = match vce {
                Vce::Robust => {
                    let mut meat = DMatrix::zeros(k, k);
                    for i in 0..n {
                        let gi = xt.row(i).transpose() * uhat[i];
                        meat += &gi * gi.transpose();
                    }
                    meat
                }
                Vce::Cluster => {
                    let groups = FitParts::cluster_groups(d);
                    let n_g = groups.len();
                    if n_g <= k {
                        notes.push(format!(
                            "cluster count {n_g} does not exceed parameter count {k}; cluster-robust variance may be unreliable"
                        ));
                    }
                    let mut meat = DMatrix::zeros(k, k);
                    for rows in &groups {
                        let mut h = DVector::zeros(k);
                        for &i in rows {
                            h += xt.row(i).transpose() * uhat[i];
                        }
                        meat += &h * h.transpose();
                    }
                    let factor = n_g as f64 / (n_g as f64 - 1.0).max(1.0);
                    meat * factor
                }
                Vce::Homoskedastic => unreachable!(),
            };
            &bread * meat * &bread
        }
    };

    Ok(FitParts {
        theta,
        vcov,
        kappa,
        rss,
        q_uhat,
        a_qq,
        n,
        k,
        m,
        r_cols,
        q_cols,
        r_names,
        notes,
    })
}

/// Smallest eigenvalue of the LIML eigenproblem W1 v = κ W2 v on the
/// cross-products of [y X] after partialling out the included exogenous
/// columns (W1) and the full instrument set (W2). Floored at one.
fn liml_kappa(
    d: &Dataset,
    e_cols: &[usize],
    q_cols: &[usize],
    a_chol: &Cholesky<f64, Dyn>,
) -> Result<f64> {
    let g = &d.gram().g;
    let p = d.p();
    let y_cols: Vec<usize> = std::iter::once(d.col_y())
        .chain((0..p).map(|i| d.col_x(i)))
        .collect();

    let yy = sub(g, &y_cols, &y_cols);
    let qy = sub(g, q_cols, &y_cols);
    let w2 = &yy - qy.tr_mul(&a_chol.solve(&qy));

    let w1 = if e_cols.is_empty() {
        yy.clone()
    } else {
        let ee = sub(g, e_cols, e_cols);
        let ey = sub(g, e_cols, &y_cols);
        let ee_chol = ee.clone().cholesky().ok_or_else(|| Error::Numerical {
            context: "LIML eigenproblem".into(),
            detail: "included-exogenous cross-product is singular".into(),
        })?;
        &yy - ey.tr_mul(&ee_chol.solve(&ey))
    };

    let scale = w2.diagonal().amax().max(1e-300);
    if scale <= 1e-14 * w1.diagonal().amax().max(1e-300) {
        return Err(Error::Numerical {
            context: "LIML eigenproblem".into(),
            detail: "instruments perfectly fit both the outcome and the treatments".into(),
        });
    }
    let w2_chol = match w2.clone().cholesky() {
        Some(c) => c,
        None => {
            // Perfect fit leaves W2 numerically singular; a relative ridge
            // keeps the eigenproblem solvable.
            let dim = w2.nrows();
            let ridged = &w2 + DMatrix::identity(dim, dim) * (scale * 1e-12);
            ridged.cholesky().ok_or_else(|| {
                let eig = w2.clone().symmetric_eigen();
                let lo = eig.eigenvalues.min();
                let hi = eig.eigenvalues.max();
                Error::Numerical {
                    context: "LIML eigenproblem".into(),
                    detail: format!(
                        "residual cross-product not positive definite (eigenvalue range [{lo:.3e}, {hi:.3e}])"
                    ),
                }
            })?
        }
    };
    // Reduce W1 v = κ W2 v to the ordinary symmetric problem on L^{-1} W1 L^{-T}.
    let solve_tri = |rhs: &DMatrix<f64>| {
        w2_chol
            .l()
            .solve_lower_triangular(rhs)
            .ok_or_else(|| Error::Numerical {
                context: "LIML eigenproblem".into(),
                detail: "triangular solve failed".into(),
            })
    };
    let t = solve_tri(&w1)?;
    let c = solve_tri(&t.transpose())?;
    let c_sym = (&c + c.transpose()) * 0.5;
    let eig = c_sym.symmetric_eigen();
    let kappa = eig.eigenvalues.min();
    Ok(kappa.max(1.0))
}

pub(crate) const F_CAP: f64 = 1e12;

/// First-stage strength: excluded-instrument F (vce-consistent) for P = 1,
/// Cragg–Donald minimum-eigenvalue statistic for P > 1. Returns the value and
/// whether it was capped (degenerate zero-residual first stage).
pub(crate) fn first_stage(
    d: &Dataset,
    valid: &[usize],
    invalid: &[usize],
    vce: Vce,
) -> Result<(f64, bool)> {
    validate_sets(d, valid, invalid)?;
    if valid.is_empty() {
        return Err(Error::Underidentified {
            valid: 0,
            regressors: d.p(),
        });
    }
    let g = &d.gram().g;
    let p = d.p();
    let n = d.n();
    let x_cols: Vec<usize> = (0..p).map(|i| d.col_x(i)).collect();
    let zv_cols: Vec<usize> = valid.iter().map(|&j| d.col_z(j)).collect();
    let e_cols: Vec<usize> = invalid
        .iter()
        .map(|&j| d.col_z(j))
        .chain((0..d.k()).map(|i| d.col_w(i)))
        .collect();
    let l_total = valid.len() + e_cols.len();

    // Partial the included exogenous block out of X and Z_valid.
    let part = |a_cols: &[usize], b_cols: &[usize]| -> Result<DMatrix<f64>> {
        let ab = sub(g, a_cols, b_cols);
        if e_cols.is_empty() {
            return Ok(ab);
        }
        let ee = sub(g, &e_cols, &e_cols);
        let ea = sub(g, &e_cols, a_cols);
        let eb = sub(g, &e_cols, b_cols);
        let ee_chol = ee.cholesky().ok_or_else(|| Error::Numerical {
            context: "first-stage partialling".into(),
            detail: "included-exogenous cross-product is singular".into(),
        })?;
        Ok(&ab - ea.tr_mul(&ee_chol.solve(&eb)))
    };

    let xx = part(&x_cols, &x_cols)?;
    let xv = part(&x_cols, &zv_cols)?;
    let vv = part(&zv_cols, &zv_cols)?;
    let vv_chol = vv.clone().cholesky().ok_or_else(|| Error::Numerical {
        context: "first stage".into(),
        detail: "valid-instrument cross-product is singular after partialling".into(),
    })?;
    let xpx = &xv * vv_chol.solve(&xv.transpose()); // X'P X
    let xmx = &xx - &xpx;

    let dof = (n as f64 - l_total as f64).max(1.0);
    if p == 1 {
        let ess = xpx[(0, 0)];
        let rss = xmx[(0, 0)];
        let scale = xx[(0, 0)].max(1e-300);
        if rss <= RANK_TOL * scale {
            return Ok((F_CAP, true));
        }
        match vce {
            Vce::Homoskedastic => {
                let f = (ess / valid.len() as f64) / (rss / dof);
                Ok(cap_f(f))
            }
            Vce::Robust | Vce::Cluster => {
                // Wald test of the excluded-instrument block in the first stage.
                let q_cols: Vec<usize> = zv_cols.iter().chain(e_cols.iter()).copied().collect();
                let (coef, vcov) = ols_cols(d, x_cols[0], &q_cols, vce)?;
                let nv = valid.len();
                let bv = coef.rows(0, nv).into_owned();
                let vv_block = vcov.view((0, 0), (nv, nv)).into_owned();
                let chol = vv_block.cholesky().ok_or_else(|| Error::Numerical {
                    context: "first-stage Wald".into(),
                    detail: "singular coefficient covariance".into(),
                })?;
                let wald = bv.dot(&chol.solve(&bv));
                Ok(cap_f(wald / nv as f64))
            }
        }
    } else {
        // Cragg–Donald: min eigenvalue of (X'MX)^{-1} X'PX, Wald-F scaled.
        let scale = xx.diagonal().amax().max(1e-300);
        let xmx_chol = match xmx.clone().cholesky() {
            Some(c) => c,
            None => return Ok((F_CAP, true)),
        };
        if xmx.diagonal().min() <= RANK_TOL * scale {
            return Ok((F_CAP, true));
        }
        let b = xmx_chol.solve(&xpx);
        let c = xmx_chol
            .l()
            .solve_lower_triangular(&b.transpose())
            .ok_or_else(|| Error::Numerical {
                context: "Cragg-Donald".into(),
                detail: "triangular solve failed".into(),
            })?;
        let c_sym = (&c + c.transpose()) * 0.5;
        let g_min = c_sym.symmetric_eigen().eigenvalues.min();
        Ok(cap_f(g_min * dof / valid.len() as f64))
    }
}

fn cap_f(f: f64) -> (f64, bool) {
    if !f.is_finite() || f > F_CAP {
        (F_CAP, true)
    } else {
        (f, false)
    }
}

/// Weighted least squares of one combined-matrix column on others, with the
/// requested covariance estimator.
pub(crate) fn ols_cols(
    d: &Dataset,
    dep_col: usize,
    reg_cols: &[usize],
    vce: Vce,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let gram = d.gram();
    let g = &gram.g;
    let n = d.n();
    let k = reg_cols.len();
    let ss = sub(g, reg_cols, reg_cols);
    let sy = sub_vec(g, reg_cols, dep_col);
    let names: Vec<String> = reg_cols.iter().map(|c| format!("col{c}")).collect();
    let chol = chol_named(&ss, &names, "least-squares design")?;
    let coef = chol.solve(&sy);
    let bread = chol.inverse();
    let vcov = match vce {
        Vce::Homoskedastic => {
            let yy = g[(dep_col, dep_col)];
            let rss = (yy - coef.dot(&sy)).max(0.0);
            &bread * (rss / n as f64)
        }
        Vce::Robust | Vce::Cluster => {
            let mm = &gram.m;
            let xr = mm.select_columns(reg_cols.iter());
            let uhat = mm.column(dep_col) - &xr * &coef;
            let meat = match vce {
                Vce::Robust => {
                    let mut meat = DMatrix::zeros(k, k);
                    for i in 0..n {
                        let gi = xr.row(i).transpose() * uhat[i];
                        meat += &gi * gi.transpose();
                    }
                    meat
                }
                Vce::Cluster => {
                    let groups = FitParts::cluster_groups(d);
                    let n_g = groups.len();
                    let mut meat = DMatrix::zeros(k, k);
                    for rows in &groups {
                        let mut h = DVector::zeros(k);
                        for &i in rows {
                            h += xr.row(i).transpose() * uhat[i];
                        }
                        meat += &h * h.transpose();
                    }
                    meat * (n_g as f64 / (n_g as f64 - 1.0).max(1.0))
                }
                Vce::Homoskedastic => unreachable!(),
            };
            &bread * meat * &bread
        }
    };
    Ok((coef, vcov))
}
