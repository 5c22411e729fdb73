// SPDX-License-Identifier: MIT OR Apache-2.0

//! Runs one edit: fresh hub, attached ops, one or two sampling passes.

use std::sync::{Arc, Mutex};

use crate::error::Result;
use crate::hook::{AttnHub, Band};
use crate::mmdit::{LatentImage, Model, SampleConfig};
use crate::numerics::TensorF;
use crate::ops::{KProbeOp, OpContext, OpSpec, ProbeLog};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EditOptions {
    /// Keep a per-step firing breakdown on the hub.
    pub trace: bool,
    /// Append a K-similarity probe after the op chain.
    pub probe: bool,
}

/// Result of [`run_edit`]. The hub is returned for log inspection.
#[derive(Debug)]
pub struct EditRun {
    pub latent: TensorF,
    pub hub: AttnHub,
    pub probe: Option<Arc<Mutex<ProbeLog>>>,
}

impl EditRun {
    pub fn total_firings(&self) -> u64 {
        self.hub.total_firings()
    }

    pub fn total_applied(&self) -> u64 {
        self.hub.total_applied()
    }
}

/// Samples `prompt` with `op` attached. MasaCtrl specs first run a record pass
/// with their neutral prompt, then the edit pass, so their hubs see two passes.
pub fn run_edit(
    model: &Model,
    source: &LatentImage,
    prompt: &str,
    op: &OpSpec,
    sc: &SampleConfig,
    opts: EditOptions,
) -> Result<EditRun> {
    let record_prompt = op.masactrl().map(|(_, neutral)| neutral.to_string());
    run_with_record_prompt(model, source, prompt, record_prompt.as_deref(), op, sc, opts)
}

/// Like [`run_edit`] but with an explicit record-pass prompt for two-pass ops.
pub fn run_with_record_prompt(
    model: &Model,
    source: &LatentImage,
    prompt: &str,
    record_prompt: Option<&str>,
    op: &OpSpec,
    sc: &SampleConfig,
    opts: EditOptions,
) -> Result<EditRun> {
    let ctx = OpContext::new(model.config(), sc.steps);
    let mut hub = if opts.trace { AttnHub::with_trace() } else { AttnHub::new() };
    hub.attach_all(op.instantiate(&ctx)?)?;
    let probe = if opts.probe {
        let p = KProbeOp::new(Band::new(0..ctx.num_layers, 0..ctx.steps), ctx.source_start);
        let handle = p.log_handle();
        hub.attach(Box::new(p))?;
        Some(handle)
    } else {
        None
    };
    hub.reset();
    if op.is_two_pass() {
        hub.set_record_mode(true);
        model.sample(source, record_prompt.unwrap_or(""), sc, &mut hub)?;
        hub.set_record_mode(false);
    }
    let latent = model.sample(source, prompt, sc, &mut hub)?;
    Ok(EditRun { latent, hub, probe })
}
