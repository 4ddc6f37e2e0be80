//! Confidence Interval Method: per-instrument intervals around the
//! just-identified estimates, overlap grouping, the ψ breakpoint schedule and
//! downward testing.

use serde::{Deserialize, Serialize};

use crate::alasso::SelectOptions;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{just_identified_capped, CombinationEstimates};
use crate::overid::testing_threshold;
use crate::selection::{downward_testing, MethodKind, SelectionResult};

/// One just-identified confidence interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Interval {
    /// Original instrument index.
    pub index: usize,
    pub center: f64,
    pub se: f64,
    pub cil: f64,
    pub ciu: f64,
}

/// Intervals sorted ascending by lower endpoint, at critical value ψ.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntervalSet {
    pub intervals: Vec<Interval>,
    pub psi: f64,
}

/// Interval j = β̂_j ± ψ·se_j, sorted by lower endpoint. Instruments with a
/// non-finite estimate or standard error are excluded and reported.
pub fn build_intervals(ce: &CombinationEstimates, psi: f64) -> Result<(IntervalSet, Vec<usize>)> {
    if ce.betas.ncols() != 1 {
        return Err(Error::CimMultipleRegressors(ce.betas.ncols()));
    }
    if psi < 0.0 {
        return Err(Error::Invalid(format!("psi must be non-negative, got {psi}")));
    }
    let ses = ce.ses.as_ref().ok_or_else(|| {
        Error::Invalid("combination estimates carry no standard errors".into())
    })?;
    let mut intervals = Vec::new();
    let mut excluded = Vec::new();
    for (row, combo) in ce.combos.iter().enumerate() {
        let b = ce.betas[(row, 0)];
        let s = ses[(row, 0)];
        if !b.is_finite() || !s.is_finite() {
            excluded.push(combo[0]);
            continue;
        }
        intervals.push(Interval {
            index: combo[0],
            center: b,
            se: s,
            cil: b - psi * s,
            ciu: b + psi * s,
        });
    }
    if intervals.is_empty() {
        return Err(Error::Numerical {
            context: "confidence intervals".into(),
            detail: "no instrument produced a finite just-identified estimate".into(),
        });
    }
    intervals.sort_by(|a, b| a.cil.partial_cmp(&b.cil).unwrap());
    Ok((IntervalSet { intervals, psi }, excluded))
}

/// Largest group of mutually overlapping intervals, walking each interval in
/// lower-endpoint order and counting the predecessors whose upper endpoint
/// exceeds its lower endpoint. Ties go to the group containing the smallest
/// original index (then to the earliest anchor).
pub fn largest_group(iv: &IntervalSet) -> Vec<usize> {
    largest_group_detail(iv).0
}

pub(crate) fn largest_group_detail(iv: &IntervalSet) -> (Vec<usize>, bool) {
    let n = iv.intervals.len();
    let mut best: Vec<usize> = Vec::new();
    let mut tied = false;
    for j in 0..n {
        let anchor = &iv.intervals[j];
        let mut group: Vec<usize> = (0..j)
            .filter(|&k| iv.intervals[k].ciu > anchor.cil)
            .map(|k| iv.intervals[k].index)
            .collect();
        group.push(anchor.index);
        group.sort_unstable();
        if best.is_empty() || group.len() > best.len() {
            best = group;
        } else if group.len() == best.len() && group != best {
            tied = true;
            // Prefer the group containing the smallest original index; among
            // groups sharing it, keep the earliest anchor in endpoint order.
            if group[0] < best[0] {
                best = group;
            }
        }
    }
    (best, tied)
}

/// ψ values at which some pair's overlap status flips:
/// ψ_{jk} = (β̂_j − β̂_k)/(se_j + se_k) for β̂_j > β̂_k, deduplicated and
/// sorted descending. Evaluating between consecutive breakpoints visits every
/// achievable grouping exactly once.
pub fn psi_breakpoints(ce: &CombinationEstimates) -> Result<Vec<f64>> {
    let (iv, _) = build_intervals(ce, 0.0)?;
    let mut bps = Vec::new();
    for a in &iv.intervals {
        for b in &iv.intervals {
            if a.center > b.center {
                let denom = a.se + b.se;
                if denom > 0.0 {
                    let psi = (a.center - b.center) / denom;
                    if psi.is_finite() && psi > 0.0 {
                        bps.push(psi);
                    }
                }
            }
        }
    }
    bps.sort_by(|x, y| y.partial_cmp(x).unwrap());
    bps.dedup();
    Ok(bps)
}

/// Confidence-Interval-Method downward-testing selection (P = 1 only).
///
/// Starts at ψ₀ = psif·√(2.01²·ln n), descends through breakpoint midpoints,
/// tests each distinct largest group (valid = group, complement as controls)
/// and stops at the first p-value above the threshold.
pub fn cim_select(d: &Dataset, opts: &SelectOptions, psif: f64) -> Result<SelectionResult> {
    if d.p() != 1 {
        return Err(Error::CimMultipleRegressors(d.p()));
    }
    let j = d.j();
    if j <= 1 {
        return Err(Error::Invalid(
            "selection needs overidentification: J must exceed P = 1".into(),
        ));
    }
    if psif <= 0.0 {
        return Err(Error::Invalid(format!("psif must be positive, got {psif}")));
    }
    let threshold = testing_threshold(d.n(), opts.c, opts.siglevel)?;
    let ce = just_identified_capped(d, opts.vce, opts.combination_cap)?;

    let mut notes = Vec::new();
    let psi0 = psif * (2.01f64.powi(2) * (d.n() as f64).ln()).sqrt();
    let bps: Vec<f64> = psi_breakpoints(&ce)?
        .into_iter()
        .filter(|&b| b < psi0)
        .collect();

    // Candidate ψ levels: the start plus one representative per overlap
    // pattern below it.
    let mut candidates = vec![psi0];
    for w in bps.windows(2) {
        candidates.push(0.5 * (w[0] + w[1]));
    }
    if let Some(&last) = bps.last() {
        candidates.push(0.5 * last);
    }

    let mut groups: Vec<(f64, Vec<usize>)> = Vec::new();
    let mut seen: Vec<Vec<usize>> = Vec::new();
    for &psi in &candidates {
        let (iv, excluded) = build_intervals(&ce, psi)?;
        if !excluded.is_empty() && groups.is_empty() {
            notes.push(format!(
                "{} instruments excluded from grouping (non-finite estimate or se)",
                excluded.len()
            ));
        }
        let (group, tied) = largest_group_detail(&iv);
        if tied {
            notes.push(format!(
                "group-size tie at psi = {psi:.6}; kept the group containing the smallest index"
            ));
        }
        if seen.contains(&group) {
            continue;
        }
        seen.push(group.clone());
        let invalid: Vec<usize> = (0..j).filter(|i| !group.contains(i)).collect();
        groups.push((psi, invalid));
    }

    downward_testing(
        d,
        MethodKind::Cim,
        groups.into_iter(),
        opts.test,
        opts.vce,
        threshold,
        None,
        notes,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::Vce;
    use crate::mc::{generate, majority_config, plurality_config, stream_rng, NormalSource};
    use nalgebra::DMatrix;

    fn ce_from(betas: &[f64], ses: &[f64]) -> CombinationEstimates {
        let n = betas.len();
        CombinationEstimates {
            combos: (0..n).map(|i| vec![i]).collect(),
            betas: DMatrix::from_column_slice(n, 1, betas),
            ses: Some(DMatrix::from_column_slice(n, 1, ses)),
            dropped: 0,
        }
    }

    #[test]
    fn zero_psi_gives_point_intervals() {
        let ce = ce_from(&[0.1, 0.5], &[0.2, 0.3]);
        let (iv, excluded) = build_intervals(&ce, 0.0).unwrap();
        assert!(excluded.is_empty());
        for i in &iv.intervals {
            assert_eq!(i.cil, i.center);
            assert_eq!(i.ciu, i.center);
        }
    }

    #[test]
    fn doubling_psi_doubles_half_widths() {
        let ce = ce_from(&[0.1, 0.5, -0.2], &[0.2, 0.3, 0.15]);
        let (iv1, _) = build_intervals(&ce, 1.3).unwrap();
        let (iv2, _) = build_intervals(&ce, 2.6).unwrap();
        for (a, b) in iv1.intervals.iter().zip(&iv2.intervals) {
            assert!(((b.ciu - b.cil) - 2.0 * (a.ciu - a.cil)).abs() < 1e-12);
        }
    }

    #[test]
    fn nonfinite_se_is_excluded_with_warning() {
        let ce = ce_from(&[0.1, 0.5, -0.2], &[0.2, f64::NAN, 0.15]);
        let (iv, excluded) = build_intervals(&ce, 1.0).unwrap();
        assert_eq!(excluded, vec![1]);
        assert_eq!(iv.intervals.len(), 2);
    }

    #[test]
    fn toy_grouping_picks_the_three_valid_shares() {
        // A, B, C near zero; D, E near 0.5.
        let ce = ce_from(&[0.01, -0.02, 0.05, 0.51, 0.49], &[0.05, 0.06, 0.05, 0.05, 0.06]);
        let (iv, _) = build_intervals(&ce, 2.0).unwrap();
        assert_eq!(largest_group(&iv), vec![0, 1, 2]);
    }

    #[test]
    fn disjoint_intervals_return_lowest_index_singleton() {
        let ce = ce_from(&[0.0, 1.0, 2.0], &[0.1, 0.1, 0.1]);
        let (iv, _) = build_intervals(&ce, 1.0).unwrap();
        assert_eq!(largest_group(&iv), vec![0]);
    }

    #[test]
    fn two_instrument_breakpoint_closed_form() {
        let ce = ce_from(&[0.0, 1.0], &[0.5, 0.5]);
        let bps = psi_breakpoints(&ce).unwrap();
        assert_eq!(bps.len(), 1);
        assert!((bps[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn breakpoint_count_bound() {
        let mut src = NormalSource::new(stream_rng(80, 940, 0));
        let betas: Vec<f64> = (0..7).map(|_| src.normal()).collect();
        let ses: Vec<f64> = (0..7).map(|_| 0.2 + src.uniform()).collect();
        let bps = psi_breakpoints(&ce_from(&betas, &ses)).unwrap();
        assert!(bps.len() <= 7 * 6 / 2);
    }

    /// Brute force: all subsets of intervals, keep those whose members
    /// pairwise overlap (strictly), take the largest, tie-break to the
    /// lexicographically smallest index set.
    fn brute_force_group(iv: &IntervalSet) -> Vec<usize> {
        let n = iv.intervals.len();
        let mut best: Vec<usize> = Vec::new();
        for mask in 1u32..(1 << n) {
            let members: Vec<usize> = (0..n).filter(|k| mask & (1 << k) != 0).collect();
            let max_cil = members
                .iter()
                .map(|&k| iv.intervals[k].cil)
                .fold(f64::NEG_INFINITY, f64::max);
            let min_ciu = members
                .iter()
                .map(|&k| iv.intervals[k].ciu)
                .fold(f64::INFINITY, f64::min);
            if min_ciu > max_cil {
                let mut ids: Vec<usize> = members.iter().map(|&k| iv.intervals[k].index).collect();
                ids.sort_unstable();
                if ids.len() > best.len() || (ids.len() == best.len() && ids < best) {
                    best = ids;
                }
            }
        }
        best
    }

    #[test]
    fn largest_group_matches_brute_force_on_200_instances() {
        for inst in 0..200 {
            let mut src = NormalSource::new(stream_rng(81, 941, inst));
            let betas: Vec<f64> = (0..8).map(|_| src.normal()).collect();
            let ses: Vec<f64> = (0..8).map(|_| 0.1 + 0.6 * src.uniform()).collect();
            let (iv, _) = build_intervals(&ce_from(&betas, &ses), 0.9).unwrap();
            let fast = largest_group(&iv);
            let brute = brute_force_group(&iv);
            assert_eq!(fast, brute, "instance {inst}");
        }
    }

    #[test]
    fn largest_group_invariant_to_relabeling() {
        let betas = [0.3, -0.1, 0.25, 0.9, 0.28];
        let ses = [0.1, 0.15, 0.12, 0.2, 0.11];
        let (iv, _) = build_intervals(&ce_from(&betas, &ses), 1.0).unwrap();
        let base = largest_group(&iv);

        // Reverse the label order.
        let rev_betas: Vec<f64> = betas.iter().rev().copied().collect();
        let rev_ses: Vec<f64> = ses.iter().rev().copied().collect();
        let (iv2, _) = build_intervals(&ce_from(&rev_betas, &rev_ses), 1.0).unwrap();
        let mapped: Vec<usize> = largest_group(&iv2).iter().map(|&k| 4 - k).rev().collect();
        assert_eq!(base, mapped);
    }

    #[test]
    fn group_size_weakly_increases_with_psi() {
        let mut src = NormalSource::new(stream_rng(82, 942, 0));
        let betas: Vec<f64> = (0..6).map(|_| src.normal()).collect();
        let ses: Vec<f64> = (0..6).map(|_| 0.1 + 0.4 * src.uniform()).collect();
        let ce = ce_from(&betas, &ses);
        let top = psi_breakpoints(&ce).unwrap()[0] * 1.05;
        let mut prev = 0usize;
        for i in 0..40 {
            let psi = top * (i + 1) as f64 / 40.0;
            let (iv, _) = build_intervals(&ce, psi).unwrap();
            let size = largest_group(&iv).len();
            assert!(size >= prev, "psi {psi}: {size} < {prev}");
            prev = size;
        }
        assert_eq!(prev, 6); // all overlap beyond the largest breakpoint
    }

    #[test]
    fn breakpoint_descent_visits_every_grid_grouping() {
        // Grid oracle: all groupings found on a fine ψ grid appear in the
        // breakpoint-midpoint schedule.
        let mut src = NormalSource::new(stream_rng(83, 943, 0));
        let betas: Vec<f64> = (0..6).map(|_| src.normal()).collect();
        let ses: Vec<f64> = (0..6).map(|_| 0.1 + 0.4 * src.uniform()).collect();
        let ce = ce_from(&betas, &ses);
        let bps = psi_breakpoints(&ce).unwrap();
        let top = bps[0] * 1.1;

        let mut from_bps: Vec<Vec<usize>> = vec![];
        let mut cands = vec![top];
        for w in bps.windows(2) {
            cands.push(0.5 * (w[0] + w[1]));
        }
        cands.push(0.5 * bps[bps.len() - 1]);
        for psi in cands {
            let (iv, _) = build_intervals(&ce, psi).unwrap();
            let g = largest_group(&iv);
            if !from_bps.contains(&g) {
                from_bps.push(g);
            }
        }

        for i in 0..1000 {
            let psi = top * (i as f64 + 0.5) / 1000.0;
            let (iv, _) = build_intervals(&ce, psi).unwrap();
            let g = largest_group(&iv);
            assert!(from_bps.contains(&g), "grid grouping {g:?} at psi {psi} missed");
        }
    }

    #[test]
    fn cim_select_toy_returns_the_invalid_pair() {
        let mut cfg = majority_config(722, 110);
        cfg.alpha = vec![0.0, 0.0, 0.0, 0.3, 0.3];
        cfg.j = 5;
        cfg.gamma = DMatrix::from_element(5, 1, 0.6);
        let d = generate(&cfg).unwrap();
        let opts = SelectOptions {
            vce: Vce::Homoskedastic,
            ..SelectOptions::default()
        };
        let sel = cim_select(&d, &opts, 1.0).unwrap();
        assert_eq!(sel.invalid_set, vec![3, 4]);
        // Full-overlap start: the first tested model uses every instrument.
        assert!(sel.path[0].invalid_set.is_empty());
    }

    #[test]
    fn cim_errors_for_multiple_regressors() {
        let mut src = NormalSource::new(stream_rng(84, 944, 0));
        let n = 200;
        let z = DMatrix::from_fn(n, 4, |_, _| src.normal());
        let gamma = DMatrix::from_row_slice(4, 2, &[0.9, 0.1, 0.2, 0.8, 0.5, 0.4, 0.3, 0.6]);
        let x = &z * &gamma;
        let y = nalgebra::DVector::from_fn(n, |r, _| x[(r, 0)] - x[(r, 1)] + src.normal());
        let d = Dataset::unnamed(y, x, z).unwrap();
        let err = cim_select(&d, &SelectOptions::default(), 1.0).unwrap_err();
        assert!(matches!(err, Error::CimMultipleRegressors(2)));
    }

    #[test]
    fn heterogeneous_effect_group_is_discarded() {
        // Two shares whose just-identified estimates sit at 0.5 while the
        // plurality group sits at zero: grouping semantics treat them as
        // invalid whether the gap is a direct effect or a different local
        // effect, and the selector controls them.
        let cfg = {
            let mut c = plurality_config(3000, 111);
            c.alpha = vec![0.0, 0.0, 0.0, 0.3, 0.3];
            c.j = 5;
            c.gamma = DMatrix::from_element(5, 1, 0.6);
            c
        };
        let d = generate(&cfg).unwrap();
        let opts = SelectOptions {
            vce: Vce::Homoskedastic,
            ..SelectOptions::default()
        };
        let sel = cim_select(&d, &opts, 1.0).unwrap();
        assert_eq!(sel.invalid_set, vec![3, 4]);
        assert_eq!(sel.valid_set, vec![0, 1, 2]);
    }
}
