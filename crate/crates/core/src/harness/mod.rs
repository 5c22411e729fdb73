// SPDX-License-Identifier: MIT OR Apache-2.0

//! Evaluation harness: metrics, synthetic suites, variant runs, sweeps and reports.

pub mod config;
pub mod metrics;
pub mod report;
pub mod runner;
pub mod suite;

pub use config::RunConfig;
pub use metrics::{composite, fmt4, round_half_even, MetricSuite, MetricsReport, Score};
pub use report::{Format, Report, ReportRow};
pub use runner::{default_grid, Harness, RouteMode, SweepAxis, SweepResult, Variant, VariantResult, VariantSpec};
pub use suite::{generate_stratified, generate_suite, EditCase, Suite};
