//! Domain types and dataset transforms shared by every other module.
//!
//! A [`Dataset`] owns the outcome, treatments, candidate instruments and
//! optional controls/weights/clusters, validated once at construction and
//! immutable afterwards. Cross-products in the analytic-weight metric are
//! cached lazily so estimators and selectors can share them.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot tolerance for rank checks on cross-product matrices.
pub(crate) const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct DatasetNames {
    pub y: String,
    pub x: Vec<String>,
    pub z: Vec<String>,
    pub w: Vec<String>,
}

impl DatasetNames {
    pub fn synthetic(p: usize, j: usize, k: usize) -> Self {
        DatasetNames {
            y: "y".into(),
            x: (1..=p).map(|i| format!("x{i}")).collect(),
            z: (1..=j).map(|i| format!("z{i}")).collect(),
            w: (1..=k).map(|i| format!("w{i}")).collect(),
        }
    }
}

/// Immutable estimation sample.
#[derive(Debug)]
pub struct Dataset {
    y: DVector<f64>,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    w: DMatrix<f64>,
    /// Analytic weights normalized to mean one; `None` means unweighted.
    weights: Option<DVector<f64>>,
    /// Cluster ids mapped to 0..G; `None` means per-row singletons.
    clusters: Option<Vec<usize>>,
    n_clusters: usize,
    names: DatasetNames,
    gram: OnceLock<Gram>,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Dataset {
            y: self.y.clone(),
            x: self.x.clone(),
            z: self.z.clone(),
            w: self.w.clone(),
            weights: self.weights.clone(),
            clusters: self.clusters.clone(),
            n_clusters: self.n_clusters,
            names: self.names.clone(),
            gram: OnceLock::new(),
        }
    }
}

/// Cross-products of the weighted sample, shared by all fits on a dataset.
///
/// Column layout of `m`: `[y | X | Z | W]`, rows scaled by sqrt of the
/// normalized analytic weight.
#[derive(Debug)]
pub(crate) struct Gram {
    pub m: DMatrix<f64>,
    pub g: DMatrix<f64>,
}

impl Dataset {
    pub fn new(
        y: DVector<f64>,
        x: DMatrix<f64>,
        z: DMatrix<f64>,
        w: DMatrix<f64>,
        weights: Option<DVector<f64>>,
        clusters: Option<Vec<String>>,
        names: DatasetNames,
    ) -> Result<Self> {
        let n = y.len();
        let (p, j, k) = (x.ncols(), z.ncols(), w.ncols());
        for (rows, what) in [(x.nrows(), "X"), (z.nrows(), "Z"), (w.nrows(), "W")] {
            if rows != n {
                return Err(Error::Dimension(format!(
                    "{what} has {rows} rows but y has {n}"
                )));
            }
        }
        if p == 0 {
            return Err(Error::Invalid("need at least one treatment column".into()));
        }
        if j < p {
            return Err(Error::Invalid(format!(
                "need at least as many instruments as treatments (J = {j} < P = {p})"
            )));
        }
        if n <= p + j + k {
            return Err(Error::Invalid(format!(
                "too few rows for estimation: n = {n} must exceed P + J + K = {}",
                p + j + k
            )));
        }
        if names.x.len() != p || names.z.len() != j || names.w.len() != k {
            return Err(Error::Dimension("column names do not match matrix shapes".into()));
        }

        check_finite_vec(&y, &names.y)?;
        check_finite(&x, &names.x)?;
        check_finite(&z, &names.z)?;
        check_finite(&w, &names.w)?;

        let weights = match weights {
            Some(wv) => {
                if wv.len() != n {
                    return Err(Error::Dimension("weights length differs from n".into()));
                }
                for (i, &v) in wv.iter().enumerate() {
                    if !v.is_finite() || v <= 0.0 {
                        return Err(Error::Invalid(format!(
                            "weight at row {i} is not strictly positive and finite: {v}"
                        )));
                    }
                }
                // Normalize to mean one (Stata aweight convention).
                let mean = wv.sum() / n as f64;
                Some(wv / mean)
            }
            None => None,
        };

        let (clusters, n_clusters) = match clusters {
            Some(ids) => {
                if ids.len() != n {
                    return Err(Error::Dimension("cluster ids length differs from n".into()));
                }
                let mut map = BTreeMap::new();
                let mapped: Vec<usize> = ids
                    .iter()
                    .map(|s| {
                        let next = map.len();
                        *map.entry(s.clone()).or_insert(next)
                    })
                    .collect();
                let g = map.len();
                (Some(mapped), g)
            }
            None => (None, n),
        };

        // Full-column-rank check on Z, reporting the first dependent column.
        if let Some(idx) = dependent_column(&z) {
            return Err(Error::RankDeficient {
                index: idx + 1,
                name: names.z[idx].clone(),
            });
        }

        Ok(Dataset {
            y,
            x,
            z,
            w,
            weights,
            clusters,
            n_clusters,
            names,
            gram: OnceLock::new(),
        })
    }

    /// Convenience constructor with synthetic names, no controls, weights or clusters.
    pub fn unnamed(y: DVector<f64>, x: DMatrix<f64>, z: DMatrix<f64>) -> Result<Self> {
        let names = DatasetNames::synthetic(x.ncols(), z.ncols(), 0);
        let n = y.len();
        Dataset::new(y, x, z, DMatrix::zeros(n, 0), None, None, names)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
    pub fn p(&self) -> usize {
        self.x.ncols()
    }
    pub fn j(&self) -> usize {
        self.z.ncols()
    }
    pub fn k(&self) -> usize {
        self.w.ncols()
    }
    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }
    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }
    pub fn names(&self) -> &DatasetNames {
        &self.names
    }
    /// Normalized analytic weights (mean one), if any.
    pub fn weights(&self) -> Option<&DVector<f64>> {
        self.weights.as_ref()
    }
    /// Cluster ids mapped to 0..G; `None` means every row is its own cluster.
    pub fn clusters(&self) -> Option<&[usize]> {
        self.clusters.as_deref()
    }
    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn z_names_for(&self, idx: &[usize]) -> Vec<String> {
        idx.iter().map(|&i| self.names.z[i].clone()).collect()
    }

    // Column offsets into the combined weighted matrix [y | X | Z | W].
    pub(crate) fn col_y(&self) -> usize {
        0
    }
    pub(crate) fn col_x(&self, i: usize) -> usize {
        1 + i
    }
    pub(crate) fn col_z(&self, j: usize) -> usize {
        1 + self.p() + j
    }
    pub(crate) fn col_w(&self, k: usize) -> usize {
        1 + self.p() + self.j() + k
    }

    pub(crate) fn gram(&self) -> &Gram {
        self.gram.get_or_init(|| {
            let n = self.n();
            let d = 1 + self.p() + self.j() + self.k();
            let mut m = DMatrix::zeros(n, d);
            m.column_mut(0).copy_from(&self.y);
            m.columns_mut(1, self.p()).copy_from(&self.x);
            m.columns_mut(1 + self.p(), self.j()).copy_from(&self.z);
            m.columns_mut(1 + self.p() + self.j(), self.k()).copy_from(&self.w);
            if let Some(wts) = &self.weights {
                for i in 0..n {
                    let s = wts[i].sqrt();
                    for c in 0..d {
                        m[(i, c)] *= s;
                    }
                }
            }
            let g = m.tr_mul(&m);
            Gram { m, g }
        })
    }

    /// Writes the dataset back to delimited text; shortest-round-trip float
    /// formatting makes load → serialize → load bit-identical.
    pub fn to_delimited<P: AsRef<Path>>(&self, path: P, delim: u8) -> Result<()> {
        let mut out = csv::WriterBuilder::new()
            .delimiter(delim)
            .from_path(path.as_ref())?;
        let mut header = vec![self.names.y.clone()];
        header.extend(self.names.x.iter().cloned());
        header.extend(self.names.z.iter().cloned());
        header.extend(self.names.w.iter().cloned());
        out.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = Vec::with_capacity(header.len());
            rec.push(format!("{}", self.y[i]));
            for c in 0..self.p() {
                rec.push(format!("{}", self.x[(i, c)]));
            }
            for c in 0..self.j() {
                rec.push(format!("{}", self.z[(i, c)]));
            }
            for c in 0..self.k() {
                rec.push(format!("{}", self.w[(i, c)]));
            }
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn check_finite_vec(v: &DVector<f64>, name: &str) -> Result<()> {
    for (i, &val) in v.iter().enumerate() {
        if !val.is_finite() {
            return Err(Error::NonFinite {
                row: i + 1,
                column: name.to_string(),
            });
        }
    }
    Ok(())
}

fn check_finite(m: &DMatrix<f64>, names: &[String]) -> Result<()> {
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            if !m[(r, c)].is_finite() {
                return Err(Error::NonFinite {
                    row: r + 1,
                    column: names[c].clone(),
                });
            }
        }
    }
    Ok(())
}

/// Greedy pivoted Cholesky on the cross-product of `m`; returns the first
/// column linearly dependent on its predecessors, if any.
pub(crate) fn dependent_column(m: &DMatrix<f64>) -> Option<usize> {
    let p = m.ncols();
    if p == 0 {
        return None;
    }
    let g = m.tr_mul(m);
    dependent_column_gram(&g)
}

pub(crate) fn dependent_column_gram(g: &DMatrix<f64>) -> Option<usize> {
    let p = g.ncols();
    let mut l = DMatrix::<f64>::zeros(p, p);
    for jcol in 0..p {
        let mut pivot = g[(jcol, jcol)];
        for k in 0..jcol {
            pivot -= l[(jcol, k)] * l[(jcol, k)];
        }
        if pivot <= RANK_TOL * g[(jcol, jcol)].max(RANK_TOL) {
            return Some(jcol);
        }
        let pivot = pivot.sqrt();
        l[(jcol, jcol)] = pivot;
        for r in (jcol + 1)..p {
            let mut v = g[(r, jcol)];
            for k in 0..jcol {
                v -= l[(r, k)] * l[(jcol, k)];
            }
            l[(r, jcol)] = v / pivot;
        }
    }
    None
}

/// How input columns map onto dataset roles.
#[derive(Debug, Clone)]
pub struct ColumnRoles {
    pub y: String,
    pub x: Vec<String>,
    pub z: ZColumns,
    pub controls: Vec<String>,
    pub weights: Option<String>,
    pub cluster: Option<String>,
    /// Optional period column: demean each instrument within period before
    /// estimation. Off by default.
    pub demean_z_within: Option<String>,
}

/// Instruments either listed explicitly or found by shared name prefix
/// (`stub1`, `stub2`, ... ordered by the numeric suffix).
#[derive(Debug, Clone)]
pub enum ZColumns {
    List(Vec<String>),
    Stub(String),
}

impl ColumnRoles {
    pub fn new(y: impl Into<String>, x: Vec<String>, z: ZColumns) -> Self {
        ColumnRoles {
            y: y.into(),
            x,
            z,
            controls: vec![],
            weights: None,
            cluster: None,
            demean_z_within: None,
        }
    }
}

/// Raw delimited table: header plus string cells, column-major access.
#[derive(Debug, Clone)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read<P: AsRef<Path>>(path: P, delim: u8) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(delim)
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path.as_ref())?;
        let headers = rdr.headers()?.iter().map(|s| s.to_string()).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            rows.push(rec.iter().map(|s| s.to_string()).collect());
        }
        Ok(Table { headers, rows })
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    pub fn numeric_column(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self.column_index(name)?;
        let mut out = Vec::with_capacity(self.rows.len());
        for (r, row) in self.rows.iter().enumerate() {
            let cell = row.get(idx).map(String::as_str).unwrap_or("");
            let v: f64 = cell.parse().map_err(|_| Error::NonFinite {
                row: r + 1,
                column: name.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    row: r + 1,
                    column: name.to_string(),
                });
            }
            out.push(v);
        }
        Ok(out)
    }

    pub fn string_column(&self, name: &str) -> Result<Vec<String>> {
        let idx = self.column_index(name)?;
        Ok(self.rows.iter().map(|r| r[idx].clone()).collect())
    }

    /// Columns named `<stub><int>` sorted by the integer suffix.
    pub fn stub_columns(&self, stub: &str) -> Result<Vec<String>> {
        let mut found: Vec<(u64, String)> = self
            .headers
            .iter()
            .filter_map(|h| {
                h.strip_prefix(stub)
                    .and_then(|suffix| suffix.parse::<u64>().ok())
                    .map(|k| (k, h.clone()))
            })
            .collect();
        if found.is_empty() {
            return Err(Error::MissingColumn(format!("{stub}<number>")));
        }
        found.sort();
        Ok(found.into_iter().map(|(_, h)| h).collect())
    }
}

/// Loads a delimited file into a [`Dataset`] according to `roles`.
/// Instrument column order is preserved from the role specification.
pub fn load_dataset<P: AsRef<Path>>(path: P, roles: &ColumnRoles, delim: u8) -> Result<Dataset> {
    let table = Table::read(path, delim)?;
    dataset_from_table(&table, roles)
}

pub fn dataset_from_table(table: &Table, roles: &ColumnRoles) -> Result<Dataset> {
    let n = table.rows.len();
    if n == 0 {
        return Err(Error::Invalid("input file has no data rows".into()));
    }
    if roles.x.is_empty() {
        return Err(Error::Invalid("need at least one treatment column".into()));
    }
    let y = DVector::from_vec(table.numeric_column(&roles.y)?);

    let z_names = match &roles.z {
        ZColumns::List(cols) => {
            if cols.is_empty() {
                return Err(Error::Invalid("instrument list is empty".into()));
            }
            cols.clone()
        }
        ZColumns::Stub(stub) => table.stub_columns(stub)?,
    };

    let x = columns_to_matrix(table, &roles.x)?;
    let mut z = columns_to_matrix(table, &z_names)?;
    let w = columns_to_matrix(table, &roles.controls)?;
    let weights = match &roles.weights {
        Some(col) => Some(DVector::from_vec(table.numeric_column(col)?)),
        None => None,
    };
    let clusters = match &roles.cluster {
        Some(col) => Some(table.string_column(col)?),
        None => None,
    };

    if let Some(period_col) = &roles.demean_z_within {
        let periods = table.string_column(period_col)?;
        demean_within(&mut z, &periods);
    }

    let names = DatasetNames {
        y: roles.y.clone(),
        x: roles.x.clone(),
        z: z_names,
        w: roles.controls.clone(),
    };
    Dataset::new(y, x, z, w, weights, clusters, names)
}

fn columns_to_matrix(table: &Table, cols: &[String]) -> Result<DMatrix<f64>> {
    let n = table.rows.len();
    let mut m = DMatrix::zeros(n, cols.len());
    for (c, name) in cols.iter().enumerate() {
        let v = table.numeric_column(name)?;
        for (r, val) in v.into_iter().enumerate() {
            m[(r, c)] = val;
        }
    }
    Ok(m)
}

fn demean_within(z: &mut DMatrix<f64>, groups: &[String]) {
    let mut idx: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        idx.entry(g.as_str()).or_default().push(i);
    }
    for rows in idx.values() {
        for c in 0..z.ncols() {
            let mean: f64 = rows.iter().map(|&r| z[(r, c)]).sum::<f64>() / rows.len() as f64;
            for &r in rows {
                z[(r, c)] -= mean;
            }
        }
    }
}

/// Result of first-differencing a balanced panel.
#[derive(Debug)]
pub struct FirstDifferenced {
    pub data: Dataset,
    /// Units contributing no difference rows (fewer than two periods).
    pub skipped_units: Vec<String>,
}

/// First-differences `y`, `X` and `W` within units over consecutive periods.
/// Instrument columns pass through untransformed (base-period shares are
/// time-invariant per period); weights and clusters are taken from the later
/// row of each pair.
pub fn first_difference(d: &Dataset, units: &[String], times: &[i64]) -> Result<FirstDifferenced> {
    let n = d.n();
    if units.len() != n || times.len() != n {
        return Err(Error::Dimension(
            "unit/time id vectors must match the dataset row count".into(),
        ));
    }
    let mut all_times: Vec<i64> = times.to_vec();
    all_times.sort_unstable();
    all_times.dedup();
    let time_pos: BTreeMap<i64, usize> = all_times.iter().enumerate().map(|(i, &t)| (t, i)).collect();

    let mut by_unit: BTreeMap<&str, Vec<(i64, usize)>> = BTreeMap::new();
    for i in 0..n {
        by_unit.entry(units[i].as_str()).or_default().push((times[i], i));
    }

    let mut gap_units = Vec::new();
    let mut skipped = Vec::new();
    let mut pairs: Vec<(usize, usize)> = Vec::new(); // (earlier row, later row)
    for (unit, obs) in &mut by_unit {
        obs.sort_unstable();
        if obs.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Invalid(format!(
                "unit `{unit}` has duplicate time periods"
            )));
        }
        if obs.len() < 2 {
            skipped.push(unit.to_string());
            continue;
        }
        let contiguous = obs
            .windows(2)
            .all(|w| time_pos[&w[1].0] == time_pos[&w[0].0] + 1);
        if !contiguous {
            gap_units.push(unit.to_string());
            continue;
        }
        for w in obs.windows(2) {
            pairs.push((w[0].1, w[1].1));
        }
    }
    if !gap_units.is_empty() {
        return Err(Error::PanelGaps { units: gap_units });
    }

    let m = pairs.len();
    let (p, j, k) = (d.p(), d.j(), d.k());
    let mut y = DVector::zeros(m);
    let mut x = DMatrix::zeros(m, p);
    let mut z = DMatrix::zeros(m, j);
    let mut w = DMatrix::zeros(m, k);
    let mut wts = d.weights().map(|_| Vec::with_capacity(m));
    let mut cls = d.clusters().map(|_| Vec::with_capacity(m));
    for (r, &(a, b)) in pairs.iter().enumerate() {
        y[r] = d.y()[b] - d.y()[a];
        for c in 0..p {
            x[(r, c)] = d.x()[(b, c)] - d.x()[(a, c)];
        }
        for c in 0..j {
            z[(r, c)] = d.z()[(b, c)];
        }
        for c in 0..k {
            w[(r, c)] = d.w()[(b, c)] - d.w()[(a, c)];
        }
        if let Some(v) = &mut wts {
            v.push(d.weights().unwrap()[b]);
        }
        if let Some(v) = &mut cls {
            v.push(d.clusters().unwrap()[b].to_string());
        }
    }
    let data = Dataset::new(
        y,
        x,
        z,
        w,
        wts.map(DVector::from_vec),
        cls,
        d.names().clone(),
    )?;
    Ok(FirstDifferenced {
        data,
        skipped_units: skipped,
    })
}

/// Writes any serializable value as pretty JSON.
pub fn write_json<P: AsRef<Path>, T: serde::Serialize>(path: P, value: &T) -> Result<()> {
    let mut f = std::fs::File::create(path.as_ref())?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}
