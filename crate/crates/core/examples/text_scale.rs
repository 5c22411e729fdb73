// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scales text K/V and composes it with source-half K/V scaling, reporting the
//! metric shift against the unmodified sample for one case.

use attnedit::harness::runner::{Harness, Variant};
use attnedit::harness::suite::generate_stratified;
use attnedit::harness::RunConfig;

fn main() -> attnedit::Result<()> {
    let h = Harness::new(RunConfig::default())?;
    let suite = generate_stratified(6, 2);
    let case = &suite.cases[3];
    println!("case {}: {}", case.id, case.instruction);
    for (name, spec) in [
        ("baseline", "baseline"),
        ("text x0.5", "textscale:factor=0.5"),
        ("text x3", "textscale:factor=3"),
        ("text x3 + src x2", "compose(textscale:factor=3;kvscale:half=src,factor=2)"),
    ] {
        let r = h.run_case(&Variant::op(name, spec.parse()?), case);
        let m = r.metrics.expect("case ran");
        println!("{name:<18} clip_t {:+.4}  dino_i {:+.4}  composite {:+.4}", m.clip_t, m.dino_i, m.composite);
    }
    Ok(())
}
