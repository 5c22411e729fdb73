// SPDX-License-Identifier: MIT OR Apache-2.0

//! Measures per-layer cosine similarity between the noise and source halves of
//! image K, with and without full-strength injection in the middle layers.

use attnedit::edit::{run_edit, EditOptions};
use attnedit::mmdit::{build_model, encode_source, ModelConfig, SampleConfig};
use attnedit::ops::OpSpec;

fn main() -> attnedit::Result<()> {
    let cfg = ModelConfig::default();
    let model = build_model(cfg.clone())?;
    let source = encode_source("boat by the sea", &cfg, 5);
    let sc = SampleConfig::default();
    let opts = EditOptions { probe: true, ..Default::default() };
    let mut columns = Vec::new();
    for spec in ["baseline", "kvinject:alpha=1,layers=frac:0.5-0.75"] {
        let op: OpSpec = spec.parse()?;
        let run = run_edit(&model, &source, "Remove the boat", &op, &sc, opts)?;
        let log = run.probe.expect("probe requested");
        let means = log.lock().expect("probe lock").layer_means();
        columns.push(means);
    }
    println!("layer  baseline  kvinject(a=1, mid)");
    for (layer, base) in &columns[0] {
        println!("{layer:>5}  {base:>8.4}  {:>8.4}", columns[1][layer]);
    }
    Ok(())
}
