// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attaches a custom op to the hub and dumps the per-step dispatch trace.

use attnedit::hook::{AttnHub, AttnOp, HookCtx, ProjKind};
use attnedit::mmdit::{build_model, encode_source, ModelConfig, SampleConfig};
use attnedit::numerics::TensorF;

/// Damps text values in the first layer on conditional passes.
struct DampText;

impl AttnOp for DampText {
    fn name(&self) -> String {
        "damp_text".into()
    }

    fn kinds(&self) -> &'static [ProjKind] {
        &[ProjKind::TxtV]
    }

    fn active(&self, ctx: &HookCtx) -> bool {
        ctx.site.layer == 0
    }

    fn apply(&mut self, _: &HookCtx, mut x: TensorF) -> attnedit::Result<TensorF> {
        x.data_mut().iter_mut().for_each(|v| *v *= 0.5);
        Ok(x)
    }
}

fn main() -> attnedit::Result<()> {
    let cfg = ModelConfig { num_layers: 2, ..Default::default() };
    let model = build_model(cfg.clone())?;
    let sc = SampleConfig { steps: 3, ..Default::default() };
    let mut hub = AttnHub::with_trace();
    println!("step,layer,kind,dispatches");
    hub.attach(Box::new(DampText))?;
    model.sample(&encode_source("tree", &cfg, 0), "Make the tree blue", &sc, &mut hub)?;
    hub.write_trace(std::io::stdout().lock())?;
    println!("dispatches {}  applied by damp_text {}", hub.total_firings(), hub.total_applied());
    Ok(())
}
