//! Adaptive-Lasso invalid-instrument selection: weighted LARS path on the
//! projected instrument matrix, downward testing, and the post-selection β.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::design::Vce;
use crate::error::{Error, Result};
use crate::median::{floored_alpha, initial_estimate, qualified_majority_min};
use crate::overid::{testing_threshold, TestKind};
use crate::selection::{downward_testing, MethodKind, SelectionResult};

/// One knot of the piecewise-linear Lasso path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LassoStep {
    pub lambda: f64,
    pub active: Vec<usize>,
    pub alpha: Vec<f64>,
}

/// Exact LARS-Lasso path: step 0 has an empty active set at the largest
/// penalty; the active set changes by one index per knot (entries and drops).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LassoPath {
    pub steps: Vec<LassoStep>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

impl LassoPath {
    /// Coefficients at an arbitrary penalty via linear interpolation between
    /// knots (the path is piecewise linear in λ).
    pub fn coefficients_at(&self, lambda: f64) -> Vec<f64> {
        let steps = &self.steps;
        if steps.is_empty() {
            return vec![];
        }
        if lambda >= steps[0].lambda {
            return steps[0].alpha.clone();
        }
        for w in steps.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            if lambda <= a.lambda && lambda >= b.lambda {
                if a.lambda - b.lambda <= 0.0 {
                    continue;
                }
                let t = (a.lambda - lambda) / (a.lambda - b.lambda);
                return a
                    .alpha
                    .iter()
                    .zip(&b.alpha)
                    .map(|(x, y)| x + t * (y - x))
                    .collect();
            }
        }
        steps.last().unwrap().alpha.clone()
    }
}

/// Options shared by both selectors.
#[derive(Debug, Clone)]
pub struct SelectOptions {
    pub test: TestKind,
    pub vce: Vce,
    /// Threshold constant: significance level is c/ln(n).
    pub c: f64,
    /// Fixed significance level overriding the c/ln(n) schedule.
    pub siglevel: Option<f64>,
    /// Exponent v on the adaptive weights 1/|α_m|^v.
    pub weight_exponent: f64,
    pub combination_cap: u128,
}

impl Default for SelectOptions {
    fn default() -> Self {
        SelectOptions {
            test: TestKind::Hs,
            vce: Vce::Robust,
            c: 0.1,
            siglevel: None,
            weight_exponent: 1.0,
            combination_cap: crate::estimators::DEFAULT_COMBINATION_CAP,
        }
    }
}

/// Fitted values x̂ of X on [Z, W] and the annihilated instruments
/// Z̃ = M_[x̂, W] Z, both in the weighted metric.
pub fn project_instruments(d: &Dataset) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let gram = d.gram();
    let mm = &gram.m;
    let n = d.n();
    let zw_cols: Vec<usize> = (0..d.j())
        .map(|j| d.col_z(j))
        .chain((0..d.k()).map(|k| d.col_w(k)))
        .collect();
    let x_cols: Vec<usize> = (0..d.p()).map(|i| d.col_x(i)).collect();

    let q = mm.select_columns(zw_cols.iter());
    let x = mm.select_columns(x_cols.iter());
    let qq = q.tr_mul(&q);
    let chol = qq.cholesky().ok_or_else(|| Error::Numerical {
        context: "instrument projection".into(),
        detail: "instrument cross-product is singular".into(),
    })?;
    let xhat = &q * chol.solve(&q.tr_mul(&x));

    // Annihilate [x̂, W] from Z, skipping degenerate basis directions
    // (x̂ = 0 when the instruments carry no first stage).
    let z = mm.select_columns((0..d.j()).map(|j| d.col_z(j)).collect::<Vec<_>>().iter());
    let mut basis = DMatrix::zeros(n, d.p() + d.k());
    basis.columns_mut(0, d.p()).copy_from(&xhat);
    for k in 0..d.k() {
        basis.column_mut(d.p() + k).copy_from(&mm.column(d.col_w(k)));
    }
    let keep = independent_columns(&basis.tr_mul(&basis));
    if keep.is_empty() {
        return Ok((z.clone_owned(), xhat));
    }
    let basis = basis.select_columns(keep.iter());
    let bb = basis.tr_mul(&basis);
    let bchol = bb.cholesky().ok_or_else(|| Error::Numerical {
        context: "instrument projection".into(),
        detail: "projected design is singular".into(),
    })?;
    let ztilde = &z - &basis * bchol.solve(&basis.tr_mul(&z));
    Ok((ztilde, xhat))
}

/// Exact piecewise-linear LARS-Lasso path of the weighted problem
/// ½‖y − Z̃α‖² + λ Σ w_j |α_j| with adaptive weights w_j = 1/|α_m,j|.
/// Columns are scaled by 1/w_j, the plain Lasso path is computed, and the
/// coefficients are rescaled back; knots sit at every active-set change.
pub fn alasso_path(
    ztilde: &DMatrix<f64>,
    y: &DVector<f64>,
    adaptive_weights: &[f64],
) -> Result<LassoPath> {
    let j = ztilde.ncols();
    if adaptive_weights.len() != j {
        return Err(Error::Dimension(
            "adaptive weight length differs from the number of instruments".into(),
        ));
    }
    if adaptive_weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
        return Err(Error::Invalid(
            "adaptive weights must be finite and strictly positive".into(),
        ));
    }
    let scale: Vec<f64> = adaptive_weights.iter().map(|w| 1.0 / w).collect();
    let mut b = ztilde.clone();
    for (c, s) in scale.iter().enumerate() {
        let mut col = b.column_mut(c);
        col *= *s;
    }
    let g = b.tr_mul(&b);
    let c0 = b.tr_mul(y);
    let raw = lars_lasso_gram(&g, &c0)?;
    // Rescale coefficients back to the α parametrization.
    let steps = raw
        .steps
        .into_iter()
        .map(|mut s| {
            for (idx, a) in s.alpha.iter_mut().enumerate() {
                *a *= scale[idx];
            }
            s
        })
        .collect();
    Ok(LassoPath {
        steps,
        notes: raw.notes,
    })
}

/// Plain Lasso path from Gram inputs G = B'B and c0 = B'y.
pub(crate) fn lars_lasso_gram(g: &DMatrix<f64>, c0: &DVector<f64>) -> Result<LassoPath> {
    let j = g.ncols();
    let mut notes = Vec::new();
    let mut steps = Vec::new();

    let mut c = c0.clone();
    let mut b = DVector::<f64>::zeros(j);
    let mut active: Vec<usize> = Vec::new();
    let mut is_active = vec![false; j];
    let mut saturated = vec![false; j]; // columns that cannot join (rank cap)

    let mut lambda = c.amax();
    steps.push(LassoStep {
        lambda,
        active: vec![],
        alpha: vec![0.0; j],
    });
    if lambda <= 0.0 {
        return Ok(LassoPath { steps, notes });
    }

    // First entry: largest absolute correlation, lowest index on ties.
    let tol = 1e-12 * lambda.max(1.0);
    let entering = pick_max(&c, &is_active, &saturated, lambda, tol, &mut notes);
    if let Some(e) = entering {
        active.push(e);
        is_active[e] = true;
        steps.push(LassoStep {
            lambda,
            active: vec![e],
            alpha: vec![0.0; j],
        });
    }

    let max_iters = 20 * j * j + 50;
    for _ in 0..max_iters {
        if lambda <= 0.0 || active.is_empty() {
            break;
        }
        let na = active.len();
        let gaa = DMatrix::from_fn(na, na, |r, cc| g[(active[r], active[cc])]);
        let s_a = DVector::from_fn(na, |r, _| {
            let cj = c[active[r]];
            if cj >= 0.0 {
                1.0
            } else {
                -1.0
            }
        });
        let chol = match gaa.clone().cholesky() {
            Some(ch) => ch,
            None => {
                return Err(Error::Numerical {
                    context: "LARS path".into(),
                    detail: "active-set cross-product became singular".into(),
                })
            }
        };
        let w_a = chol.solve(&s_a);
        // Direction of correlation decay for every column.
        let mut a = DVector::<f64>::zeros(j);
        for col in 0..j {
            let mut v = 0.0;
            for (r, &ai) in active.iter().enumerate() {
                v += g[(col, ai)] * w_a[r];
            }
            a[col] = v;
        }

        // Distance to the next event as a decrease δ in λ.
        let mut delta = lambda; // path ends at λ = 0
        let mut event: Event = Event::End;
        for col in 0..j {
            if is_active[col] || saturated[col] {
                continue;
            }
            for (num, den) in [(lambda - c[col], 1.0 - a[col]), (lambda + c[col], 1.0 + a[col])] {
                if den <= 1e-14 {
                    continue;
                }
                let d_join = num / den;
                if d_join > tol && d_join < delta - tol {
                    delta = d_join;
                    event = Event::Join(col);
                } else if d_join > tol
                    && (d_join - delta).abs() <= tol
                    && matches!(event, Event::Join(prev) if col < prev)
                {
                    notes.push(format!(
                        "tied entry angle resolved toward column {}",
                        col + 1
                    ));
                    event = Event::Join(col);
                }
            }
        }
        for (r, &k) in active.iter().enumerate() {
            if w_a[r].abs() <= 1e-14 {
                continue;
            }
            let d_drop = -b[k] / w_a[r];
            if d_drop > tol && d_drop < delta - tol {
                delta = d_drop;
                event = Event::Drop(k);
            }
        }

        // Advance.
        for (r, &k) in active.iter().enumerate() {
            b[k] += delta * w_a[r];
        }
        for col in 0..j {
            c[col] -= delta * a[col];
        }
        lambda -= delta;
        // Active correlations equal ±λ exactly; re-sync to cut drift.
        for (r, &k) in active.iter().enumerate() {
            c[k] = s_a[r] * lambda;
        }

        match event {
            Event::Join(col) => {
                // Columns whose pivot vanishes against the active block can
                // never join (the annihilated design has reduced rank).
                let mut trial = active.clone();
                trial.push(col);
                let nt = trial.len();
                let gt = DMatrix::from_fn(nt, nt, |r, cc| g[(trial[r], trial[cc])]);
                if crate::data::dependent_column_gram(&gt).is_some() {
                    saturated[col] = true;
                    notes.push(format!(
                        "column {} is linearly dependent on the active set; capped",
                        col + 1
                    ));
                    continue;
                }
                active.push(col);
                is_active[col] = true;
            }
            Event::Drop(k) => {
                b[k] = 0.0;
                is_active[k] = false;
                active.retain(|&x| x != k);
                // A dropped column may re-enter later.
                saturated[k] = false;
            }
            Event::End => {}
        }

        steps.push(LassoStep {
            lambda,
            active: {
                let mut s = active.clone();
                s.sort_unstable();
                s
            },
            alpha: b.iter().copied().collect(),
        });
        if matches!(event, Event::End) {
            break;
        }
    }

    if lambda > 1e-8 * steps[0].lambda.max(1.0) {
        return Err(Error::Numerical {
            context: "LARS path".into(),
            detail: format!("path did not reach λ = 0 (stopped at {lambda:.3e})"),
        });
    }
    Ok(LassoPath { steps, notes })
}

#[derive(Clone, Copy)]
enum Event {
    Join(usize),
    Drop(usize),
    End,
}

fn pick_max(
    c: &DVector<f64>,
    is_active: &[bool],
    saturated: &[bool],
    lambda: f64,
    tol: f64,
    notes: &mut Vec<String>,
) -> Option<usize> {
    let mut best: Option<usize> = None;
    let mut tied = false;
    for (idx, v) in c.iter().enumerate() {
        if is_active[idx] || saturated[idx] {
            continue;
        }
        if (v.abs() - lambda).abs() <= tol {
            if best.is_none() {
                best = Some(idx);
            } else {
                tied = true;
            }
        }
    }
    if tied {
        notes.push(format!(
            "tied entry angle resolved toward column {}",
            best.unwrap() + 1
        ));
    }
    best
}

/// Post-selection diagnostic coefficient β = (x̂'x̂)⁻¹ x̂'(y − Z α̂).
pub fn alasso_beta(d: &Dataset, alpha_ad: &[f64]) -> Result<Vec<f64>> {
    if alpha_ad.len() != d.j() {
        return Err(Error::Dimension(
            "alpha length differs from the number of instruments".into(),
        ));
    }
    let gram = d.gram();
    let g = &gram.g;
    let zw_cols: Vec<usize> = (0..d.j())
        .map(|j| d.col_z(j))
        .chain((0..d.k()).map(|k| d.col_w(k)))
        .collect();
    let x_cols: Vec<usize> = (0..d.p()).map(|i| d.col_x(i)).collect();
    let sub = |rows: &[usize], cols: &[usize]| {
        DMatrix::from_fn(rows.len(), cols.len(), |r, cc| g[(rows[r], cols[cc])])
    };
    let qq = sub(&zw_cols, &zw_cols);
    let qx = sub(&zw_cols, &x_cols);
    let qy = DVector::from_fn(zw_cols.len(), |r, _| g[(zw_cols[r], d.col_y())]);
    let chol = qq.cholesky().ok_or_else(|| Error::Numerical {
        context: "alasso beta".into(),
        detail: "instrument cross-product is singular".into(),
    })?;
    let f = chol.solve(&qx); // A^{-1} Q'X
    let xhx = qx.tr_mul(&f); // x̂'x̂
    let xhy = f.tr_mul(&qy); // x̂'y
    // x̂'Z α̂ = X'Z α̂ because P_[Z,W] Z = Z.
    let mut xz_alpha = DVector::zeros(d.p());
    for (i, xi) in x_cols.iter().enumerate() {
        let mut v = 0.0;
        for jz in 0..d.j() {
            v += g[(*xi, d.col_z(jz))] * alpha_ad[jz];
        }
        xz_alpha[i] = v;
    }
    let rhs = xhy - xz_alpha;
    let bchol = xhx.cholesky().ok_or_else(|| Error::Numerical {
        context: "alasso beta".into(),
        detail: "fitted-treatment cross-product is singular".into(),
    })?;
    Ok(bchol.solve(&rhs).iter().copied().collect())
}

/// Adaptive-Lasso downward-testing selection.
///
/// Computes the median initial estimator and the α plug-in, walks the LARS
/// path from the smallest active set upward, tests each distinct active set
/// (valid = complement, invalid entering as controls) and stops at the first
/// model whose p-value exceeds the threshold.
pub fn alasso_select(d: &Dataset, opts: &SelectOptions) -> Result<SelectionResult> {
    let (j, p) = (d.j(), d.p());
    if j <= p {
        return Err(Error::Invalid(format!(
            "selection needs overidentification: J = {j} must exceed P = {p}"
        )));
    }
    let threshold = testing_threshold(d.n(), opts.c, opts.siglevel)?;
    let initial = initial_estimate(d)?;
    let (floored, n_floored) = floored_alpha(&initial.alpha_m);
    let mut notes = Vec::new();
    if n_floored > 0 {
        notes.push(format!(
            "{n_floored} initial alpha entries below 1e-12 floored before weighting"
        ));
    }
    if p > 1 {
        let need = qualified_majority_min(j, p)?;
        notes.push(format!(
            "qualified majority: the marginal-median initial estimator needs at least {need} of {j} valid instruments"
        ));
    }
    let weights: Vec<f64> = floored
        .iter()
        .map(|a| 1.0 / a.powf(opts.weight_exponent))
        .collect();

    // Gram of the weighted-and-annihilated design, assembled without
    // materializing Z̃ row by row.
    let (g_b, c_b) = scaled_annihilated_gram(d, &weights)?;
    let path = lars_lasso_gram(&g_b, &c_b)?;
    notes.extend(path.notes.iter().cloned());

    let candidates = path
        .steps
        .iter()
        .map(|s| (s.lambda, s.active.clone()))
        .collect::<Vec<_>>();
    downward_testing(
        d,
        MethodKind::Alasso,
        candidates.into_iter(),
        opts.test,
        opts.vce,
        threshold,
        Some(initial),
        notes,
    )
}

/// Greedy pivoted scan of a basis cross-product: indices of columns that are
/// not (numerically) linear combinations of the kept predecessors.
fn independent_columns(gram: &DMatrix<f64>) -> Vec<usize> {
    let dim = gram.ncols();
    let mut keep: Vec<usize> = Vec::new();
    for c in 0..dim {
        let mut trial: Vec<usize> = keep.clone();
        trial.push(c);
        let sub = DMatrix::from_fn(trial.len(), trial.len(), |r, cc| gram[(trial[r], trial[cc])]);
        if crate::data::dependent_column_gram(&sub).is_none() {
            keep.push(c);
        }
    }
    keep
}

/// G = D Z'M_[x̂,W] Z D and c = D Z'M_[x̂,W] y with D = diag(1/w_j), from the
/// cached cross-products alone.
fn scaled_annihilated_gram(d: &Dataset, weights: &[f64]) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let g = &d.gram().g;
    let (p, j, k) = (d.p(), d.j(), d.k());
    let z_cols: Vec<usize> = (0..j).map(|i| d.col_z(i)).collect();
    let x_cols: Vec<usize> = (0..p).map(|i| d.col_x(i)).collect();
    let w_cols: Vec<usize> = (0..k).map(|i| d.col_w(i)).collect();
    let zw_cols: Vec<usize> = z_cols.iter().chain(w_cols.iter()).copied().collect();
    let y_col = d.col_y();
    let sub = |rows: &[usize], cols: &[usize]| {
        DMatrix::from_fn(rows.len(), cols.len(), |r, cc| g[(rows[r], cols[cc])])
    };

    // P_[Z,W] pieces for x̂.
    let a2 = sub(&zw_cols, &zw_cols);
    let a2_chol = a2.cholesky().ok_or_else(|| Error::Numerical {
        context: "instrument projection".into(),
        detail: "instrument cross-product is singular".into(),
    })?;
    let qx = sub(&zw_cols, &x_cols);
    let qy = sub(&zw_cols, &[y_col]);
    let f = a2_chol.solve(&qx);
    let xhx = qx.tr_mul(&f); // x̂'x̂ = X'P X
    let xhy = f.tr_mul(&qy); // x̂'y  (P × 1)

    // Basis [x̂, W]: cross-products with Z and y.
    // x̂'Z = X'Z and x̂'W = X'W because Z, W lie inside the projection span.
    let dim = p + k;
    let mut s = DMatrix::zeros(dim, dim);
    s.view_mut((0, 0), (p, p)).copy_from(&xhx);
    if k > 0 {
        let xw = sub(&x_cols, &w_cols);
        let ww = sub(&w_cols, &w_cols);
        s.view_mut((0, p), (p, k)).copy_from(&xw);
        s.view_mut((p, 0), (k, p)).copy_from(&xw.transpose());
        s.view_mut((p, p), (k, k)).copy_from(&ww);
    }
    let mut c_z = DMatrix::zeros(dim, j);
    c_z.view_mut((0, 0), (p, j)).copy_from(&sub(&x_cols, &z_cols));
    if k > 0 {
        c_z.view_mut((p, 0), (k, j)).copy_from(&sub(&w_cols, &z_cols));
    }
    let mut c_y = DVector::zeros(dim);
    c_y.rows_mut(0, p).copy_from(&xhy);
    for (r, wc) in w_cols.iter().enumerate() {
        c_y[p + r] = g[(*wc, y_col)];
    }

    let zz = sub(&z_cols, &z_cols);
    let zy = DVector::from_fn(j, |r, _| g[(z_cols[r], y_col)]);
    let keep = independent_columns(&s);
    let (gt, ct) = if keep.is_empty() {
        (zz.clone(), zy.clone())
    } else {
        let s = DMatrix::from_fn(keep.len(), keep.len(), |r, cc| s[(keep[r], keep[cc])]);
        let c_z = DMatrix::from_fn(keep.len(), j, |r, cc| c_z[(keep[r], cc)]);
        let c_y = DVector::from_fn(keep.len(), |r, _| c_y[keep[r]]);
        let s_chol = s.cholesky().ok_or_else(|| Error::Numerical {
            context: "instrument annihilation".into(),
            detail: "projected design is singular".into(),
        })?;
        (
            &zz - c_z.tr_mul(&s_chol.solve(&c_z)), // Z̃'Z̃
            &zy - c_z.tr_mul(&s_chol.solve(&c_y)), // Z̃'y
        )
    };

    // Column scaling G_B[r,c] = s_r s_c Z̃'Z̃[r,c] with s_j = 1/w_j.
    let scale: Vec<f64> = weights.iter().map(|w| 1.0 / w).collect();
    let mut g_b = DMatrix::zeros(j, j);
    let mut c_b = DVector::zeros(j);
    for r in 0..j {
        c_b[r] = ct[r] * scale[r];
        for cc in 0..j {
            g_b[(r, cc)] = gt[(r, cc)] * scale[r] * scale[cc];
        }
    }
    Ok((g_b, c_b))
}
