// SPDX-License-Identifier: MIT OR Apache-2.0

//! Runs the alpha grid against the baseline over a small synthetic suite and
//! prints the report table. Pass a worker count as the first argument.

use attnedit::harness::report::{Format, Report};
use attnedit::harness::runner::{default_grid, Harness, SweepAxis};
use attnedit::harness::suite::generate_stratified;
use attnedit::harness::RunConfig;

fn main() -> attnedit::Result<()> {
    let workers = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(1);
    let h = Harness::new(RunConfig::default())?.with_workers(workers);
    let suite = generate_stratified(12, 0);
    let grid = default_grid(SweepAxis::Alpha, &h.op_context());
    let sweep = h.sweep(Some(SweepAxis::Alpha), &grid, &suite)?;
    sweep.paired_audit()?;
    let report = Report::from_sweep("alpha sweep", h.provider_ids(), &sweep)?;
    print!("{}", report.render(Format::Text)?);
    Ok(())
}
