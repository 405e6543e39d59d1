// SPDX-License-Identifier: Apache-2.0

//! Aggregate analyses and report emission.

pub mod cdf;
pub mod diff;
pub mod report;

pub use cdf::{compute_cdf, quantile, thin_cdf, CdfPoint};
pub use diff::{diff_reports, DiffError, DiffRow, ReportDiff};
pub use report::{build_report, write_csvs, write_report, MetricsReport, ReportMeta, ReportOptions, SCHEMA_VERSION};
