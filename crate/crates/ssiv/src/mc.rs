//! Data-generating processes and metric computation for the simulation
//! studies, plus the design sweeps behind `simulate`.
//!
//! Reproducibility contract: every replication draws from a dedicated
//! ChaCha20 stream whose 32-byte key holds (seed, cell id, replication
//! counter) as little-endian u64s (last 8 bytes zero). Normal variates come
//! from the Box–Muller transform: with uniforms u₁ ∈ (0,1], u₂ ∈ [0,1),
//! z₁ = √(−2 ln u₁)·cos(2πu₂) and z₂ = √(−2 ln u₁)·sin(2πu₂), consumed in
//! pairs. Draw order per replication: the n×J instrument matrix row-major,
//! then one (P+1)-vector of correlated errors per row via the Cholesky factor
//! of the error covariance.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alasso::{alasso_select, SelectOptions};
use crate::cim::cim_select;
use crate::data::Dataset;
use crate::design::Vce;
use crate::error::{Error, Result};
use crate::estimators::fit_2sls;
use crate::overid::TestKind;

/// Instrument marginal law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ZLaw {
    /// Uniform on (0, 0.1).
    #[serde(rename = "uniform(0,0.1)")]
    UniformTenth,
    /// Uniform on (0, 1).
    #[serde(rename = "uniform(0,1)")]
    UniformUnit,
}

impl ZLaw {
    fn upper(self) -> f64 {
        match self {
            ZLaw::UniformTenth => 0.1,
            ZLaw::UniformUnit => 1.0,
        }
    }
}

/// Monte Carlo design parameters.
#[derive(Debug, Clone)]
pub struct DgpConfig {
    pub n: usize,
    pub j: usize,
    pub p: usize,
    /// First-stage coefficients, J × P.
    pub gamma: DMatrix<f64>,
    /// Direct effects; the non-zero pattern is the true invalid set.
    pub alpha: Vec<f64>,
    pub beta0: Vec<f64>,
    /// (P+1)-square covariance of (u, ε₁..ε_P).
    pub error_cov: DMatrix<f64>,
    pub z_law: ZLaw,
    /// Standardize instruments to zero mean and unit variance using the
    /// population constants of `z_law`.
    pub standardize_z: bool,
    pub seed: u64,
}

impl DgpConfig {
    pub fn true_invalid(&self) -> Vec<usize> {
        self.alpha
            .iter()
            .enumerate()
            .filter(|(_, a)| **a != 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// ChaCha20 stream keyed by (seed, cell, rep).
pub fn stream_rng(seed: u64, cell: u64, rep: u64) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&cell.to_le_bytes());
    key[16..24].copy_from_slice(&rep.to_le_bytes());
    ChaCha20Rng::from_seed(key)
}

/// Box–Muller standard normals on top of a uniform stream.
pub struct NormalSource {
    rng: ChaCha20Rng,
    spare: Option<f64>,
}

impl NormalSource {
    pub fn new(rng: ChaCha20Rng) -> Self {
        NormalSource { rng, spare: None }
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1: f64 = 1.0 - self.rng.gen::<f64>(); // (0, 1]
        let u2: f64 = self.rng.gen::<f64>(); // [0, 1)
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// Draws one dataset: Z per the instrument law, X = Zγ + ε, y = Xβ₀ + Zα + u,
/// with (u, ε) jointly normal under the configured covariance. Fully
/// determined by `cfg.seed`.
pub fn generate(cfg: &DgpConfig) -> Result<Dataset> {
    generate_with(cfg, stream_rng(cfg.seed, 0, 0))
}

fn generate_with(cfg: &DgpConfig, rng: ChaCha20Rng) -> Result<Dataset> {
    let (n, j, p) = (cfg.n, cfg.j, cfg.p);
    if cfg.gamma.nrows() != j || cfg.gamma.ncols() != p {
        return Err(Error::Dimension(format!(
            "gamma must be J × P = {j} × {p}, got {} × {}",
            cfg.gamma.nrows(),
            cfg.gamma.ncols()
        )));
    }
    if cfg.alpha.len() != j || cfg.beta0.len() != p {
        return Err(Error::Dimension("alpha/beta0 lengths must match J and P".into()));
    }
    if cfg.error_cov.nrows() != p + 1 || cfg.error_cov.ncols() != p + 1 {
        return Err(Error::Dimension(format!(
            "error covariance must be (P+1)-square, got {} × {}",
            cfg.error_cov.nrows(),
            cfg.error_cov.ncols()
        )));
    }
    let sym_err = (&cfg.error_cov - cfg.error_cov.transpose()).amax();
    if sym_err > 1e-12 * cfg.error_cov.amax().max(1.0) {
        return Err(Error::Invalid("error covariance must be symmetric".into()));
    }
    let chol = cfg.error_cov.clone().cholesky().ok_or_else(|| {
        Error::Invalid("error covariance must be positive definite".into())
    })?;
    let l = chol.l();

    let mut src = NormalSource::new(rng);
    let upper = cfg.z_law.upper();
    let (mu, sd) = (0.5 * upper, upper / 12f64.sqrt());

    let mut z = DMatrix::zeros(n, j);
    for r in 0..n {
        for c in 0..j {
            let raw = src.uniform() * upper;
            z[(r, c)] = if cfg.standardize_z { (raw - mu) / sd } else { raw };
        }
    }

    let mut u = DVector::zeros(n);
    let mut eps = DMatrix::zeros(n, p);
    let mut draw = DVector::zeros(p + 1);
    for r in 0..n {
        for i in 0..p + 1 {
            draw[i] = src.normal();
        }
        let e = &l * &draw;
        u[r] = e[0];
        for i in 0..p {
            eps[(r, i)] = e[i + 1];
        }
    }

    let gamma = &cfg.gamma;
    let x = &z * gamma + eps;
    let beta0 = DVector::from_column_slice(&cfg.beta0);
    let alpha = DVector::from_column_slice(&cfg.alpha);
    let y = &x * beta0 + &z * alpha + u;

    Dataset::unnamed(y, x, z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Standard,
    Oracle,
    Alasso,
    Cim,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Standard => "standard",
            Method::Oracle => "oracle",
            Method::Alasso => "alasso",
            Method::Cim => "cim",
        })
    }
}

/// Per-cell performance metrics for one estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellMetrics {
    /// Median over successful replications of |β̂₁ − β₀,₁|.
    pub mad: f64,
    pub mean_n_invalid: f64,
    /// Fraction of replications where the true invalid set is contained in
    /// the selected one.
    pub freq_all_invalid: f64,
    /// Mean first-stage F of the oracle model across replications.
    pub oracle_f: f64,
    /// Selector exhaustions; excluded from `mad`, `mean_n_invalid` and
    /// `freq_all_invalid`.
    pub failures: usize,
    pub reps: usize,
}

struct RepOutcome {
    dev: Option<f64>,
    n_invalid: Option<usize>,
    all_invalid: Option<bool>,
    failed: bool,
}

/// Runs `reps` replications of one design cell for the requested methods.
/// Per-rep seeds are derived by counter, so results are deterministic and
/// independent of the parallel schedule.
pub fn run_cell(
    cfg: &DgpConfig,
    reps: usize,
    methods: &[Method],
    seed: u64,
) -> Result<Vec<(Method, CellMetrics)>> {
    run_cell_stream(cfg, reps, methods, seed, 0)
}

pub fn run_cell_stream(
    cfg: &DgpConfig,
    reps: usize,
    methods: &[Method],
    seed: u64,
    cell: u64,
) -> Result<Vec<(Method, CellMetrics)>> {
    if reps == 0 {
        return Err(Error::Invalid("need at least one replication".into()));
    }
    let true_inv = cfg.true_invalid();
    let true_valid: Vec<usize> = (0..cfg.j).filter(|i| !true_inv.contains(i)).collect();
    let select_opts = SelectOptions {
        test: TestKind::Hs,
        vce: Vce::Homoskedastic,
        c: 0.1,
        siglevel: None,
        ..SelectOptions::default()
    };

    let results: Result<Vec<(f64, Vec<RepOutcome>)>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let d = generate_with(cfg, stream_rng(seed, cell, rep as u64))?;
            let mut outcomes = Vec::with_capacity(methods.len());
            let oracle = fit_2sls(&d, &true_valid, &true_inv, Vce::Homoskedastic)?;
            for method in methods {
                let outcome = match method {
                    Method::Standard => {
                        let all: Vec<usize> = (0..cfg.j).collect();
                        let fit = fit_2sls(&d, &all, &[], Vce::Homoskedastic)?;
                        RepOutcome {
                            dev: Some((fit.beta[0] - cfg.beta0[0]).abs()),
                            n_invalid: Some(0),
                            all_invalid: Some(true_inv.is_empty()),
                            failed: false,
                        }
                    }
                    Method::Oracle => RepOutcome {
                        dev: Some((oracle.beta[0] - cfg.beta0[0]).abs()),
                        n_invalid: Some(true_inv.len()),
                        all_invalid: Some(true),
                        failed: false,
                    },
                    Method::Alasso | Method::Cim => {
                        let sel = if *method == Method::Alasso {
                            alasso_select(&d, &select_opts)
                        } else {
                            cim_select(&d, &select_opts, 1.0)
                        };
                        match sel {
                            Ok(sel) => {
                                let fit = fit_2sls(
                                    &d,
                                    &sel.valid_set,
                                    &sel.invalid_set,
                                    Vce::Homoskedastic,
                                )?;
                                RepOutcome {
                                    dev: Some((fit.beta[0] - cfg.beta0[0]).abs()),
                                    n_invalid: Some(sel.invalid_set.len()),
                                    all_invalid: Some(
                                        true_inv.iter().all(|i| sel.invalid_set.contains(i)),
                                    ),
                                    failed: false,
                                }
                            }
                            Err(Error::SelectorExhausted { .. }) => RepOutcome {
                                dev: None,
                                n_invalid: None,
                                all_invalid: None,
                                failed: true,
                            },
                            Err(e) => return Err(e),
                        }
                    }
                };
                outcomes.push(outcome);
            }
            Ok((oracle.first_stage_f, outcomes))
        })
        .collect();
    let results = results?;

    let oracle_f = results.iter().map(|(f, _)| f).sum::<f64>() / reps as f64;
    let mut out = Vec::with_capacity(methods.len());
    for (mi, method) in methods.iter().enumerate() {
        let mut devs: Vec<f64> = Vec::new();
        let mut n_inv_sum = 0usize;
        let mut all_inv = 0usize;
        let mut failures = 0usize;
        for (_, outcomes) in &results {
            let o = &outcomes[mi];
            if o.failed {
                failures += 1;
                continue;
            }
            devs.push(o.dev.unwrap());
            n_inv_sum += o.n_invalid.unwrap();
            all_inv += o.all_invalid.unwrap() as usize;
        }
        let ok = reps - failures;
        let mad = median(&mut devs);
        out.push((
            *method,
            CellMetrics {
                mad,
                mean_n_invalid: if ok > 0 { n_inv_sum as f64 / ok as f64 } else { f64::NAN },
                freq_all_invalid: all_inv as f64 / reps as f64,
                oracle_f,
                failures,
                reps,
            },
        ));
    }
    Ok(out)
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

// ---------------------------------------------------------------------------
// Design presets.

/// Single-regressor design: J = 10, γ_j = `gamma`, β₀ = 0, error correlation
/// 0.5, standardized uniform instruments.
pub fn single_regressor_config(n: usize, gamma: f64, alpha: Vec<f64>, seed: u64) -> DgpConfig {
    let j = alpha.len();
    DgpConfig {
        n,
        j,
        p: 1,
        gamma: DMatrix::from_element(j, 1, gamma),
        alpha,
        beta0: vec![0.0],
        error_cov: DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]),
        z_law: ZLaw::UniformTenth,
        standardize_z: true,
        seed,
    }
}

pub fn majority_alpha(scale: f64) -> Vec<f64> {
    let mut a = vec![0.0; 10];
    a[0] = scale;
    a[1] = scale;
    a[2] = scale;
    a
}

pub fn plurality_alpha(scale: f64) -> Vec<f64> {
    let mut a = vec![0.0; 10];
    a[..6].copy_from_slice(&[
        0.5 * scale,
        0.5 * scale,
        scale,
        scale,
        1.5 * scale,
        1.5 * scale,
    ]);
    a
}

pub fn majority_config(n: usize, seed: u64) -> DgpConfig {
    single_regressor_config(n, 0.6, majority_alpha(0.2), seed)
}

pub fn plurality_config(n: usize, seed: u64) -> DgpConfig {
    single_regressor_config(n, 0.6, plurality_alpha(0.2), seed)
}

/// First-stage coefficient columns of the multi-regressor design.
pub fn multi_gamma(p: usize) -> DMatrix<f64> {
    let j = 20;
    let g1: Vec<f64> = (1..=j).map(|i| 0.05 * i as f64).collect();
    let g2: Vec<f64> = g1.iter().rev().copied().collect();
    let g3: Vec<f64> = (0..j).map(|i| 0.05 * ((i % 4) + 1) as f64).collect();
    match p {
        1 => DMatrix::from_element(j, 1, 1.0),
        2 => DMatrix::from_fn(j, 2, |r, c| if c == 0 { g1[r] } else { g2[r] }),
        3 => DMatrix::from_fn(j, 3, |r, c| match c {
            0 => g1[r],
            1 => g2[r],
            _ => g3[r],
        }),
        _ => panic!("multi-regressor design supports P in 1..=3"),
    }
}

/// Multi-regressor design: n = 10000, J = 20, raw uniform(0,1) instruments,
/// u ~ N(0, 0.25), ε_p = N(0,1) + 0.5u, α = (1, 2, .., m, 0, .., 0).
pub fn multi_config(p: usize, n_invalid: usize, seed: u64) -> DgpConfig {
    let j = 20;
    let mut alpha = vec![0.0; j];
    for (i, a) in alpha.iter_mut().take(n_invalid).enumerate() {
        *a = (i + 1) as f64;
    }
    let mut cov = DMatrix::zeros(p + 1, p + 1);
    cov[(0, 0)] = 0.25;
    for i in 1..=p {
        cov[(0, i)] = 0.125;
        cov[(i, 0)] = 0.125;
        cov[(i, i)] = 1.0625;
        for k in 1..=p {
            if k != i {
                cov[(i, k)] = 0.0625;
            }
        }
    }
    DgpConfig {
        n: 10_000,
        j,
        p,
        gamma: multi_gamma(p),
        alpha,
        beta0: vec![0.0; p],
        error_cov: cov,
        z_law: ZLaw::UniformUnit,
        standardize_z: false,
        seed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    Majority,
    Plurality,
    WeakStrongGrid,
    MultiRegressor,
}

impl std::fmt::Display for Design {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Design::Majority => "majority",
            Design::Plurality => "plurality",
            Design::WeakStrongGrid => "weak_strong_grid",
            Design::MultiRegressor => "multi_regressor",
        })
    }
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub reps: usize,
    pub seed: u64,
    /// Sample-size grid for the single-regressor designs
    /// (default 400, 800, .., 6000).
    pub n_grid: Option<Vec<usize>>,
    /// Number of endogenous regressors for the multi-regressor design.
    pub p: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            reps: 100,
            seed: 20240,
            n_grid: None,
            p: 1,
        }
    }
}

/// One CSV row of a sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub design: String,
    pub n: usize,
    #[serde(rename = "P")]
    pub p: usize,
    #[serde(rename = "J")]
    pub j: usize,
    pub n_invalid_true: usize,
    pub method: Method,
    pub mad: f64,
    pub mean_n_invalid: f64,
    pub freq_all_invalid: f64,
    #[serde(rename = "oracle_F")]
    pub oracle_f: f64,
    pub failures: usize,
    pub reps: usize,
    pub seed: u64,
}

pub fn default_n_grid() -> Vec<usize> {
    (1..=15).map(|i| 400 * i).collect()
}

fn fnv1a(text: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in text.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Runs a named design sweep: one row per (cell, method).
pub fn sweep(design: Design, opts: &SweepOptions) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    let n_grid = opts.n_grid.clone().unwrap_or_else(default_n_grid);
    let push_cell = |rows: &mut Vec<SweepRow>,
                     label: String,
                     cfg: &DgpConfig,
                     methods: &[Method]|
     -> Result<()> {
        let cell_id = fnv1a(&format!("{}|n={}|m={}", label, cfg.n, cfg.true_invalid().len()));
        let metrics = run_cell_stream(cfg, opts.reps, methods, opts.seed, cell_id)?;
        for (method, m) in metrics {
            rows.push(SweepRow {
                design: label.clone(),
                n: cfg.n,
                p: cfg.p,
                j: cfg.j,
                n_invalid_true: cfg.true_invalid().len(),
                method,
                mad: m.mad,
                mean_n_invalid: m.mean_n_invalid,
                freq_all_invalid: m.freq_all_invalid,
                oracle_f: m.oracle_f,
                failures: m.failures,
                reps: m.reps,
                seed: opts.seed,
            });
        }
        Ok(())
    };

    let all_methods = [Method::Standard, Method::Oracle, Method::Alasso, Method::Cim];
    match design {
        Design::Majority => {
            for &n in &n_grid {
                push_cell(&mut rows, "majority".into(), &majority_config(n, opts.seed), &all_methods)?;
            }
        }
        Design::Plurality => {
            for &n in &n_grid {
                push_cell(&mut rows, "plurality".into(), &plurality_config(n, opts.seed), &all_methods)?;
            }
        }
        Design::WeakStrongGrid => {
            for family in ["majority", "plurality"] {
                for gamma in [0.6, 0.3] {
                    for strength in ["weak", "strong"] {
                        let scale = if strength == "weak" { 0.2 } else { 0.4 };
                        let alpha = if family == "majority" {
                            majority_alpha(scale)
                        } else {
                            plurality_alpha(scale)
                        };
                        let label = format!("weak_strong/{family}/gamma{gamma}/{strength}");
                        for &n in &n_grid {
                            let cfg = single_regressor_config(n, gamma, alpha.clone(), opts.seed);
                            push_cell(&mut rows, label.clone(), &cfg, &all_methods)?;
                        }
                    }
                }
            }
        }
        Design::MultiRegressor => {
            let max_invalid = if opts.p == 3 { 17 } else { 18 };
            let methods = [Method::Standard, Method::Oracle, Method::Alasso];
            for m in 0..=max_invalid {
                let cfg = multi_config(opts.p, m, opts.seed);
                push_cell(&mut rows, format!("multi_regressor/P{}", opts.p), &cfg, &methods)?;
            }
        }
    }
    Ok(rows)
}

/// CSV with the documented stable schema:
/// design,n,P,J,n_invalid_true,method,mad,mean_n_invalid,freq_all_invalid,oracle_F,failures,reps,seed
pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record([
        "design",
        "n",
        "P",
        "J",
        "n_invalid_true",
        "method",
        "mad",
        "mean_n_invalid",
        "freq_all_invalid",
        "oracle_F",
        "failures",
        "reps",
        "seed",
    ])?;
    for r in rows {
        wtr.write_record([
            r.design.clone(),
            r.n.to_string(),
            r.p.to_string(),
            r.j.to_string(),
            r.n_invalid_true.to_string(),
            r.method.to_string(),
            format!("{}", r.mad),
            format!("{}", r.mean_n_invalid),
            format!("{}", r.freq_all_invalid),
            format!("{}", r.oracle_f),
            r.failures.to_string(),
            r.reps.to_string(),
            r.seed.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_in_the_seed() {
        let cfg = majority_config(500, 42);
        let d1 = generate(&cfg).unwrap();
        let d2 = generate(&cfg).unwrap();
        assert_eq!(d1.y().as_slice(), d2.y().as_slice());
        assert_eq!(d1.z().as_slice(), d2.z().as_slice());
        let d3 = generate(&majority_config(500, 43)).unwrap();
        assert_ne!(d1.y().as_slice(), d3.y().as_slice());
    }

    #[test]
    fn standardized_instruments_have_unit_moments() {
        let cfg = majority_config(20000, 7);
        let d = generate(&cfg).unwrap();
        let col = d.z().column(0);
        let mean = col.sum() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
        assert!(mean.abs() < 0.02, "mean = {mean}");
        assert!((var - 1.0).abs() < 0.03, "var = {var}");
    }

    #[test]
    fn raw_uniform_unit_law_keeps_its_range() {
        let mut cfg = multi_config(1, 0, 9);
        cfg.n = 5000;
        let d = generate(&cfg).unwrap();
        let col = d.z().column(0);
        assert!(col.iter().all(|v| *v >= 0.0 && *v <= 1.0));
        let mean = col.sum() / col.len() as f64;
        assert!((mean - 0.5).abs() < 0.03, "mean = {mean}");
    }

    #[test]
    fn multi_error_structure_matches_documented_moments() {
        let cfg = multi_config(2, 3, 11);
        assert_eq!(cfg.error_cov[(0, 0)], 0.25);
        assert_eq!(cfg.error_cov[(0, 1)], 0.125);
        assert_eq!(cfg.error_cov[(1, 1)], 1.0625);
        assert_eq!(cfg.error_cov[(1, 2)], 0.0625);
        assert_eq!(cfg.alpha[..3], [1.0, 2.0, 3.0]);
        assert_eq!(cfg.true_invalid(), vec![0, 1, 2]);

        // Empirical second moments of the generated errors.
        let mut c = cfg.clone();
        c.n = 40000;
        let d = generate(&c).unwrap();
        // ε_p = x_p − Zγ_p; u = y (β = 0, minus direct effects).
        let eps = d.x() - d.z() * &c.gamma;
        let alpha_v = nalgebra::DVector::from_column_slice(&c.alpha);
        let u = d.y() - d.z() * alpha_v;
        let n = c.n as f64;
        let var_u = u.dot(&u) / n;
        let var_e1 = eps.column(0).dot(&eps.column(0)) / n;
        let cov_ue = u.dot(&eps.column(0)) / n;
        let cov_e12 = eps.column(0).dot(&eps.column(1)) / n;
        assert!((var_u - 0.25).abs() < 0.01, "var_u = {var_u}");
        assert!((var_e1 - 1.0625).abs() < 0.03, "var_e1 = {var_e1}");
        assert!((cov_ue - 0.125).abs() < 0.01, "cov_ue = {cov_ue}");
        assert!((cov_e12 - 0.0625).abs() < 0.02, "cov_e12 = {cov_e12}");
    }

    #[test]
    fn zero_alpha_makes_standard_and_oracle_identical() {
        let mut cfg = majority_config(800, 13);
        cfg.alpha = vec![0.0; 10];
        let out = run_cell(&cfg, 5, &[Method::Standard, Method::Oracle], 13).unwrap();
        let std_m = &out[0].1;
        let or_m = &out[1].1;
        assert_eq!(std_m.mad, or_m.mad);
        assert_eq!(std_m.freq_all_invalid, 1.0);
    }

    #[test]
    fn majority_smoke_cell() {
        let cfg = majority_config(1200, 5);
        let out = run_cell(&cfg, 10, &[Method::Oracle, Method::Alasso, Method::Cim], 5).unwrap();
        let oracle = &out[0].1;
        let alasso = &out[1].1;
        let cim = &out[2].1;
        assert!(alasso.freq_all_invalid >= 0.9, "{alasso:?}");
        assert!(cim.freq_all_invalid >= 0.9, "{cim:?}");
        assert!((alasso.mean_n_invalid - 3.0).abs() < 0.8);
        assert!(oracle.oracle_f > 100.0);
        assert_eq!(alasso.failures, 0);
    }

    #[test]
    fn sweep_is_deterministic_and_shaped() {
        let opts = SweepOptions {
            reps: 4,
            seed: 99,
            n_grid: Some(vec![400, 800]),
            p: 1,
        };
        let rows1 = sweep(Design::Majority, &opts).unwrap();
        assert_eq!(rows1.len(), 2 * 4); // two cells × four methods
        let rows2 = sweep(Design::Majority, &opts).unwrap();
        let mut csv1 = Vec::new();
        let mut csv2 = Vec::new();
        write_sweep_csv(&rows1, &mut csv1).unwrap();
        write_sweep_csv(&rows2, &mut csv2).unwrap();
        assert_eq!(csv1, csv2);
        assert!(String::from_utf8(csv1).unwrap().starts_with("design,n,P,J,"));
    }

    #[test]
    fn error_covariance_must_be_positive_definite() {
        let mut cfg = majority_config(500, 3);
        cfg.error_cov = nalgebra::DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(generate(&cfg), Err(Error::Invalid(_))));
    }
}
