// SPDX-License-Identifier: MIT OR Apache-2.0

//! MasaCtrl records K/V during a pass with a neutral prompt, then replays the
//! cached source half during the edit pass. Replaying with the edit prompt
//! itself reproduces the plain sample exactly.

use attnedit::edit::{run_edit, run_with_record_prompt, EditOptions};
use attnedit::hook::AttnHub;
use attnedit::mmdit::{build_model, encode_source, ModelConfig, SampleConfig};
use attnedit::ops::{BandSpec, OpSpec};

fn main() -> attnedit::Result<()> {
    let cfg = ModelConfig::default();
    let model = build_model(cfg.clone())?;
    let source = encode_source("horse in a field", &cfg, 3);
    let sc = SampleConfig::default();
    let prompt = "Make the horse golden";
    let op = OpSpec::MasaCtrl {
        band: BandSpec::frac(0.5, 1.0),
        neutral_prompt: "a photo".into(),
        full_stream: false,
    };

    let plain = model.sample(&source, prompt, &sc, &mut AttnHub::new())?;
    let edited = run_edit(&model, &source, prompt, &op, &sc, EditOptions::default())?;
    let same = run_with_record_prompt(&model, &source, prompt, Some(prompt), &op, &sc, EditOptions::default())?;

    println!("op: {op}");
    println!("dispatches over both passes: {}", edited.total_firings());
    println!("plain    checksum {:016x}", plain.bit_checksum());
    println!("edited   checksum {:016x}", edited.latent.bit_checksum());
    println!("replayed checksum {:016x} (record prompt = edit prompt)", same.latent.bit_checksum());
    assert_eq!(plain.data(), same.latent.data());
    Ok(())
}
