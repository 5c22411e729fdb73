// SPDX-License-Identifier: MIT OR Apache-2.0

//! Classifies free-form instructions into edit categories and runs the op the
//! route table assigns to each. A miss inside a route group still runs the
//! intended op.

use attnedit::mmdit::{build_model, encode_source, ModelConfig, SampleConfig};
use attnedit::router::{routed_edit, CentroidClassifier, EditCategory, RouteTable};

fn main() -> attnedit::Result<()> {
    let cfg = ModelConfig::default();
    let model = build_model(cfg.clone())?;
    let table = RouteTable::default();
    let classifier = CentroidClassifier::default_toy()?;
    print!("{}", table.to_text());
    println!();
    let source = encode_source("dog on a beach", &cfg, 11);
    let sc = SampleConfig::default();
    use EditCategory::*;
    for (intended, instruction) in [
        (Replace, "Replace the dog with a cat"),
        (Add, "Add a ball next to the dog"),
        (Remove, "Remove the dog"),
        (Attribute, "Make the dog purple"),
        (Style, "Make it a watercolor painting"),
        (Background, "Change the background to a forest"),
    ] {
        let r = routed_edit(&model, &source, instruction, &table, &classifier, None, &sc)?;
        let note = match (r.category == intended, table.route(intended) == &r.op) {
            (true, _) => "",
            (false, true) => "  (miss, same route)",
            (false, false) => "  (miss)",
        };
        println!("{instruction:<36} -> {:<10} {}{note}", r.category, r.op);
    }
    Ok(())
}
