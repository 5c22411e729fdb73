// SPDX-License-Identifier: MIT OR Apache-2.0

//! Restricts KVInject to a layer band and a step band, then prints which
//! projection sites it modified and how often.

use attnedit::edit::{run_edit, EditOptions};
use attnedit::mmdit::{build_model, encode_source, ModelConfig, SampleConfig};
use attnedit::ops::OpSpec;

fn main() -> attnedit::Result<()> {
    let cfg = ModelConfig::default();
    let model = build_model(cfg.clone())?;
    let source = encode_source("cat on a sofa", &cfg, 1);
    let sc = SampleConfig::default();
    for spec in ["kvinject:alpha=0.3,layers=frac:0.5-0.75", "kvinject:alpha=0.3,layers=6-9,steps=0-7", "kvinject:alpha=0.3,layers=6-6"] {
        let op: OpSpec = spec.parse()?;
        let run = run_edit(&model, &source, "Make the cat red", &op, &sc, EditOptions::default())?;
        println!("{op}");
        println!("  dispatches {}  modified {}", run.total_firings(), run.total_applied());
        for (site, n) in run.hub.applied_log(0) {
            println!("  {site}: {n}");
        }
    }
    Ok(())
}
