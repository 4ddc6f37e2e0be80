//! Invalid-share selection for shift-share instrumental-variable designs.
//!
//! Shift-share (Bartik) instruments aggregate base-period class shares with
//! aggregate class shifts; consistency requires every share to satisfy an
//! exclusion restriction. This crate implements two selectors that relax the
//! restriction by estimating which shares are invalid — an adaptive Lasso
//! walked along its LARS path and the Confidence Interval Method — each with
//! Hansen-Sargan or Anderson-Rubin downward testing, plus post-selection
//! 2SLS/LIML/SSIV estimators and a Monte Carlo harness for the accompanying
//! simulation designs.

pub mod alasso;
pub mod cim;
pub mod data;
mod design;
pub mod error;
pub mod estimators;
pub mod mc;
pub mod median;
pub mod overid;
pub mod selection;
mod ser;
pub mod shift_share;

pub use alasso::{alasso_beta, alasso_path, alasso_select, project_instruments, LassoPath, LassoStep, SelectOptions};
pub use cim::{build_intervals, cim_select, largest_group, psi_breakpoints, Interval, IntervalSet};
pub use data::{
    first_difference, load_dataset, ColumnRoles, Dataset, DatasetNames, FirstDifferenced, Table,
    ZColumns,
};
pub use design::Vce;
pub use error::{Error, Result};
pub use estimators::{
    first_stage_strength, fit_2sls, fit_liml, fit_ssiv, just_identified, just_identified_capped,
    CombinationEstimates, EstimateResult, EstimatorKind,
};
pub use mc::{
    generate, run_cell, sweep, write_sweep_csv, CellMetrics, Design, DgpConfig, Method,
    SweepOptions, SweepRow, ZLaw,
};
pub use median::{
    alpha_plugin, asymptotic_fraction_limit, initial_estimate, marginal_median,
    qualified_majority_min, InitialEstimate,
};
pub use overid::{anderson_rubin, hansen_sargan, overid_test, testing_threshold, TestKind, TestOutcome};
pub use selection::{MethodKind, PathStep, SelectionResult};
pub use shift_share::{build_ssiv, ShiftShareInputs, SsivCell};

/// JSON schema version stamped into every serialized result document.
pub const SCHEMA_VERSION: u32 = 1;
