//! Shift-share instrument construction from long-format share and shift tables.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::Table;
use crate::error::{Error, Result};

/// Long-format inputs: base-period shares per (location, class) and
/// aggregate shifts per (class, period).
#[derive(Debug, Clone)]
pub struct ShiftShareInputs {
    /// Ordered location list (first-appearance order of the share table).
    pub locations: Vec<String>,
    /// Ordered class list; class index is the canonical instrument index.
    pub classes: Vec<String>,
    /// Ordered period list (sorted order of the shift table periods).
    pub periods: Vec<String>,
    /// `shares[(l, j)]` = base-period share of class `j` in location `l`.
    shares: DMatrixShares,
    /// `shifts[(class, period)]` = aggregate shift.
    shifts: BTreeMap<(usize, usize), f64>,
}

#[derive(Debug, Clone)]
struct DMatrixShares {
    data: Vec<f64>,
    ncols: usize,
}

impl DMatrixShares {
    fn get(&self, l: usize, j: usize) -> f64 {
        self.data[l * self.ncols + j]
    }
}

pub const SHARE_SUM_SLACK: f64 = 1e-8;

impl ShiftShareInputs {
    /// Builds from record lists. Share sums per location may fall below one
    /// (shares excluded upstream stay excluded; no renormalization).
    pub fn new(
        share_records: Vec<(String, String, f64)>,
        shift_records: Vec<(String, String, f64)>,
    ) -> Result<Self> {
        let mut locations = Vec::new();
        let mut loc_idx = BTreeMap::new();
        let mut classes = Vec::new();
        let mut class_idx = BTreeMap::new();
        for (loc, class, share) in &share_records {
            if !share.is_finite() || *share < 0.0 {
                return Err(Error::Invalid(format!(
                    "share for location `{loc}`, class `{class}` must be non-negative and finite, got {share}"
                )));
            }
            if !loc_idx.contains_key(loc.as_str()) {
                loc_idx.insert(loc.clone(), locations.len());
                locations.push(loc.clone());
            }
            if !class_idx.contains_key(class.as_str()) {
                class_idx.insert(class.clone(), classes.len());
                classes.push(class.clone());
            }
        }
        let (nl, nc) = (locations.len(), classes.len());
        if nl == 0 || nc == 0 {
            return Err(Error::Invalid("share table is empty".into()));
        }
        let mut data = vec![0.0; nl * nc];
        let mut seen = vec![false; nl * nc];
        for (loc, class, share) in &share_records {
            let l = loc_idx[loc.as_str()];
            let j = class_idx[class.as_str()];
            if seen[l * nc + j] {
                return Err(Error::Invalid(format!(
                    "duplicate share record for location `{loc}`, class `{class}`"
                )));
            }
            seen[l * nc + j] = true;
            data[l * nc + j] = *share;
        }
        for (l, loc) in locations.iter().enumerate() {
            let sum: f64 = (0..nc).map(|j| data[l * nc + j]).sum();
            if sum > 1.0 + SHARE_SUM_SLACK {
                return Err(Error::Invalid(format!(
                    "shares for location `{loc}` sum to {sum}, above one"
                )));
            }
        }

        let mut periods: Vec<String> = shift_records.iter().map(|(_, t, _)| t.clone()).collect();
        periods.sort();
        periods.dedup();
        let mut shifts = BTreeMap::new();
        let period_idx: BTreeMap<&str, usize> =
            periods.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
        for (class, period, g) in &shift_records {
            if !g.is_finite() {
                return Err(Error::Invalid(format!(
                    "shift for class `{class}`, period `{period}` is not finite"
                )));
            }
            let Some(&j) = class_idx.get(class.as_str()) else {
                // Shifts for classes without shares are ignored.
                continue;
            };
            let t = period_idx[period.as_str()];
            if shifts.insert((j, t), *g).is_some() {
                return Err(Error::Invalid(format!(
                    "duplicate shift record for class `{class}`, period `{period}`"
                )));
            }
        }
        if periods.is_empty() {
            return Err(Error::Invalid("shift table is empty".into()));
        }

        Ok(ShiftShareInputs {
            locations,
            classes,
            periods,
            shares: DMatrixShares { data, ncols: nc },
            shifts,
        })
    }

    pub fn from_files<P: AsRef<Path>>(shares_path: P, shifts_path: P, delim: u8) -> Result<Self> {
        let shares = Table::read(shares_path, delim)?;
        let shifts = Table::read(shifts_path, delim)?;
        let sl = shares.string_column("location")?;
        let sc = shares.string_column("class")?;
        let sv = shares.numeric_column("share")?;
        let gc = shifts.string_column("class")?;
        let gt = shifts.string_column("period")?;
        let gv = shifts.numeric_column("shift")?;
        let share_records = sl
            .into_iter()
            .zip(sc)
            .zip(sv)
            .map(|((l, c), v)| (l, c, v))
            .collect();
        let shift_records = gc
            .into_iter()
            .zip(gt)
            .zip(gv)
            .map(|((c, t), v)| (c, t, v))
            .collect();
        ShiftShareInputs::new(share_records, shift_records)
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn share(&self, location: usize, class: usize) -> f64 {
        self.shares.get(location, class)
    }

    pub fn shift(&self, class: usize, period: usize) -> Option<f64> {
        self.shifts.get(&(class, period)).copied()
    }
}

/// One constructed instrument value keyed by (location, period).
#[derive(Debug, Clone, PartialEq)]
pub struct SsivCell {
    pub location: String,
    pub period: String,
    pub value: f64,
}

/// Builds the shift-share instrument restricted to `valid_set` (0-based class
/// indices): s_lt = Σ_{j ∈ valid} share(l, j) · shift(j, t), one value per
/// (location, period) in location-major, period-ascending order.
pub fn build_ssiv(inputs: &ShiftShareInputs, valid_set: &[usize]) -> Result<Vec<SsivCell>> {
    if valid_set.is_empty() {
        return Err(Error::EmptyValidSet);
    }
    for &j in valid_set {
        if j >= inputs.n_classes() {
            return Err(Error::Invalid(format!(
                "class index {} out of range (J = {})",
                j + 1,
                inputs.n_classes()
            )));
        }
    }
    let mut out = Vec::with_capacity(inputs.locations.len() * inputs.periods.len());
    for (l, loc) in inputs.locations.iter().enumerate() {
        for (t, period) in inputs.periods.iter().enumerate() {
            let mut s = 0.0;
            for &j in valid_set {
                let g = inputs.shift(j, t).ok_or_else(|| Error::MissingShift {
                    class: inputs.classes[j].clone(),
                    period: period.clone(),
                })?;
                s += inputs.share(l, j) * g;
            }
            out.push(SsivCell {
                location: loc.clone(),
                period: period.clone(),
                value: s,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ShiftShareInputs {
        ShiftShareInputs::new(
            vec![
                ("L1".into(), "c1".into(), 0.5),
                ("L1".into(), "c2".into(), 0.5),
            ],
            vec![
                ("c1".into(), "t1".into(), 2.0),
                ("c2".into(), "t1".into(), 4.0),
            ],
        )
        .unwrap()
    }

    #[test]
    fn one_location_full_set() {
        let cells = build_ssiv(&toy(), &[0, 1]).unwrap();
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].value, 3.0);
    }

    #[test]
    fn restricted_valid_set() {
        let cells = build_ssiv(&toy(), &[0]).unwrap();
        assert_eq!(cells[0].value, 1.0);
    }

    #[test]
    fn empty_valid_set_and_missing_shift() {
        assert!(matches!(build_ssiv(&toy(), &[]), Err(Error::EmptyValidSet)));
        let inputs = ShiftShareInputs::new(
            vec![
                ("L1".into(), "c1".into(), 0.3),
                ("L1".into(), "c2".into(), 0.3),
            ],
            vec![
                ("c1".into(), "t1".into(), 2.0),
                ("c1".into(), "t2".into(), 3.0),
                ("c2".into(), "t1".into(), 4.0),
            ],
        )
        .unwrap();
        let err = build_ssiv(&inputs, &[0, 1]).unwrap_err();
        match err {
            Error::MissingShift { class, period } => {
                assert_eq!((class.as_str(), period.as_str()), ("c2", "t2"));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn matches_brute_force_summation_oracle() {
        // 10 classes, 4 locations, 3 periods, deterministic pseudo-random values.
        let mut shares = Vec::new();
        let mut shifts = Vec::new();
        let mut state = 88172645463325252u64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state % 1000) as f64 / 12345.0
        };
        for l in 0..4 {
            for c in 0..10 {
                shares.push((format!("L{l}"), format!("c{c}"), next()));
            }
        }
        for c in 0..10 {
            for t in 0..3 {
                shifts.push((format!("c{c}"), format!("t{t}"), next() - 0.04));
            }
        }
        let inputs = ShiftShareInputs::new(shares.clone(), shifts.clone()).unwrap();
        let valid: Vec<usize> = vec![0, 2, 3, 7, 9];
        let cells = build_ssiv(&inputs, &valid).unwrap();

        // Independent oracle: direct lookup-and-sum over the raw records.
        for cell in &cells {
            let mut expect = 0.0;
            for &j in &valid {
                let class = format!("c{j}");
                let share = shares
                    .iter()
                    .find(|(l, c, _)| *l == cell.location && *c == class)
                    .unwrap()
                    .2;
                let shift = shifts
                    .iter()
                    .find(|(c, t, _)| *c == class && *t == cell.period)
                    .unwrap()
                    .2;
                expect += share * shift;
            }
            assert!((cell.value - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn linearity_over_class_partition() {
        let inputs = {
            let mut shares = Vec::new();
            let mut shifts = Vec::new();
            for l in 0..3 {
                for c in 0..6 {
                    shares.push((format!("L{l}"), format!("c{c}"), 0.02 * (l + c + 1) as f64));
                }
            }
            for c in 0..6 {
                shifts.push((format!("c{c}"), "t".into(), 0.5 * (c as f64 - 2.0)));
            }
            ShiftShareInputs::new(shares, shifts).unwrap()
        };
        let full = build_ssiv(&inputs, &[0, 1, 2, 3, 4, 5]).unwrap();
        let part1 = build_ssiv(&inputs, &[0, 3, 4]).unwrap();
        let part2 = build_ssiv(&inputs, &[1, 2, 5]).unwrap();
        for i in 0..full.len() {
            assert!((full[i].value - part1[i].value - part2[i].value).abs() < 1e-12);
        }
    }

    #[test]
    fn share_sum_above_one_rejected() {
        let err = ShiftShareInputs::new(
            vec![
                ("L1".into(), "c1".into(), 0.7),
                ("L1".into(), "c2".into(), 0.4),
            ],
            vec![("c1".into(), "t".into(), 1.0), ("c2".into(), "t".into(), 1.0)],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }
}
