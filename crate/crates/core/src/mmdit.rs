// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy joint-attention diffusion transformer and its CFG Euler sampler.
//!
//! The image stream is `[noise tokens | source tokens]`; a parallel text stream
//! carries the prompt. Each block projects both streams to Q/K/V, routes every
//! projection through the [`AttnHub`], runs one joint attention over the
//! concatenation and applies per-stream output and feed-forward sublayers.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hook::{AttnHub, Branch, ProjKind, ProjSite};
use crate::numerics::{gelu, layer_norm, matmul, sdpa, TensorF};
use crate::text::{gaussian_vec, splitmix64, stable_hash, word_vector, words};

const LN_EPS: f32 = 1e-5;
const PROMPT_SEED: u64 = 0x7E47_0000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub noise_tokens: usize,
    pub source_tokens: usize,
    pub text_tokens: usize,
    pub weight_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 12,
            d_model: 32,
            heads: 4,
            noise_tokens: 16,
            source_tokens: 16,
            text_tokens: 8,
            weight_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("noise_tokens", self.noise_tokens),
            ("source_tokens", self.source_tokens),
            ("text_tokens", self.text_tokens),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    /// First token of the source half within the image stream.
    pub fn source_start(&self) -> usize {
        self.noise_tokens
    }

    pub fn image_tokens(&self) -> usize {
        self.noise_tokens + self.source_tokens
    }

    /// Number of hookable projection sites.
    pub fn site_count(&self) -> usize {
        6 * self.num_layers
    }

    /// Resolves a depth fraction `[lo, hi)` to layer indices: floor at `lo`,
    /// ceil at `hi`, clamped to the model depth.
    pub fn layers_for_fraction(&self, lo: f64, hi: f64) -> Range<usize> {
        let l = self.num_layers as f64;
        let a = ((lo * l) + 1e-9).floor().max(0.0) as usize;
        let b = ((hi * l) - 1e-9).ceil().max(0.0) as usize;
        a.min(self.num_layers)..b.min(self.num_layers)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub steps: usize,
    pub cfg_scale: f32,
    pub seed: u64,
    pub negative_prompt: String,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 28,
            cfg_scale: 4.0,
            seed: 0,
            negative_prompt: String::new(),
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::Config(format!("cfg_scale {} must be finite and >= 0", self.cfg_scale)));
        }
        Ok(())
    }
}

/// Encoded source image: `(1, source_tokens, d_model)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentImage {
    pub tokens: TensorF,
    pub label: String,
}

/// Stand-in for a VAE encoder: Gaussian tokens keyed by `(label, seed)`.
pub fn encode_source(label: &str, cfg: &ModelConfig, seed: u64) -> LatentImage {
    let key = splitmix64(stable_hash(label, 0x5043_u64) ^ splitmix64(seed));
    let data = gaussian_vec(key, cfg.source_tokens * cfg.d_model, 1.0);
    LatentImage {
        tokens: TensorF::new([1, cfg.source_tokens, cfg.d_model], data).expect("sized by construction"),
        label: label.to_string(),
    }
}

/// Prompt tokens: one hashed word vector per word, truncated to `text_tokens`,
/// zero padded.
pub fn encode_prompt(prompt: &str, cfg: &ModelConfig) -> TensorF {
    let mut t = TensorF::zeros([1, cfg.text_tokens, cfg.d_model]);
    let scale = (cfg.d_model as f32).sqrt();
    for (i, w) in words(prompt).iter().take(cfg.text_tokens).enumerate() {
        let v = word_vector(w, cfg.d_model, PROMPT_SEED);
        for (dst, src) in t.row_mut(0, i).iter_mut().zip(v) {
            *dst = src * scale;
        }
    }
    t
}

fn timestep_embedding(t: f32, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    (0..dim)
        .map(|i| {
            let k = (i % half.max(1)) as f32;
            let freq = (-(k / half.max(1) as f32) * 9.21).exp(); // ln(1e4)
            let arg = t * 1000.0 * freq;
            if i < half {
                arg.sin()
            } else {
                arg.cos()
            }
        })
        .collect()
}

struct Block {
    /// Indexed by `ProjKind as usize`.
    proj: [TensorF; 6],
    img_out: TensorF,
    txt_out: TensorF,
    img_ff: (TensorF, TensorF),
    txt_ff: (TensorF, TensorF),
}

/// Backbone weights. Immutable after construction and `Sync`.
pub struct Model {
    cfg: ModelConfig,
    blocks: Vec<Block>,
    head: TensorF,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

struct WeightRng(u64);

impl WeightRng {
    fn matrix(&mut self, rows: usize, cols: usize, gain: f32) -> TensorF {
        self.0 = splitmix64(self.0);
        let scale = gain / (rows as f32).sqrt();
        TensorF::new([1, rows, cols], gaussian_vec(self.0, rows * cols, scale)).expect("sized")
    }
}

fn proj_index(kind: ProjKind) -> usize {
    ProjKind::ALL.iter().position(|k| *k == kind).expect("kind in ALL")
}

/// Builds a model whose weights are a pure function of `cfg`.
pub fn build_model(cfg: ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let d = cfg.d_model;
    let mut rng = WeightRng(cfg.weight_seed);
    let blocks = (0..cfg.num_layers)
        .map(|_| Block {
            proj: std::array::from_fn(|_| rng.matrix(d, d, 1.0)),
            img_out: rng.matrix(d, d, 0.5),
            txt_out: rng.matrix(d, d, 0.5),
            img_ff: (rng.matrix(d, 2 * d, 1.0), rng.matrix(2 * d, d, 0.5)),
            txt_ff: (rng.matrix(d, 2 * d, 1.0), rng.matrix(2 * d, d, 0.5)),
        })
        .collect();
    let head = rng.matrix(d, d, 1.0);
    Ok(Model { cfg, blocks, head })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Bitwise fingerprint of every weight.
    pub fn weight_checksum(&self) -> u64 {
        let mut acc = 0u64;
        let mut mix = |t: &TensorF| acc = splitmix64(acc ^ t.bit_checksum());
        for b in &self.blocks {
            b.proj.iter().for_each(&mut mix);
            for t in [&b.img_out, &b.txt_out, &b.img_ff.0, &b.img_ff.1, &b.txt_ff.0, &b.txt_ff.1] {
                mix(t);
            }
        }
        mix(&self.head);
        acc
    }

    fn check_shape(&self, t: &TensorF, tokens: usize, what: &'static str) -> Result<()> {
        let want = [1, tokens, self.cfg.d_model];
        if t.shape() != want {
            return Err(Error::Shape {
                op: what,
                lhs: t.shape(),
                rhs: want,
            });
        }
        Ok(())
    }

    /// One denoiser evaluation. Returns the velocity over the noise tokens only.
    ///
    /// `timestep` is the flow time in `[0, 1]`; `step_index` must match the hub.
    pub fn forward(
        &self,
        noise: &TensorF,
        source: &LatentImage,
        text_emb: &TensorF,
        step_index: usize,
        timestep: f32,
        hub: &mut AttnHub,
    ) -> Result<TensorF> {
        let cfg = &self.cfg;
        self.check_shape(noise, cfg.noise_tokens, "forward(noise)")?;
        self.check_shape(&source.tokens, cfg.source_tokens, "forward(source)")?;
        self.check_shape(text_emb, cfg.text_tokens, "forward(text)")?;
        if hub.current_step() != step_index {
            return Err(Error::Hub(format!(
                "hub is at step {} but forward was called for step {step_index}",
                hub.current_step()
            )));
        }

        let n_img = cfg.image_tokens();
        let mut img = TensorF::concat_tokens(noise, &source.tokens)?;
        let temb = timestep_embedding(timestep, cfg.d_model);
        for t in 0..n_img {
            for (v, e) in img.row_mut(0, t).iter_mut().zip(&temb) {
                *v += e;
            }
        }
        let mut txt = text_emb.clone();

        for (layer, block) in self.blocks.iter().enumerate() {
            let img_n = layer_norm(&img, LN_EPS);
            let txt_n = layer_norm(&txt, LN_EPS);
            let mut outs: Vec<TensorF> = Vec::with_capacity(6);
            for kind in ProjKind::ALL {
                let input = if matches!(kind, ProjKind::ImgQ | ProjKind::ImgK | ProjKind::ImgV) {
                    &img_n
                } else {
                    &txt_n
                };
                let y = matmul(input, &block.proj[proj_index(kind)])?;
                outs.push(hub.dispatch(ProjSite::new(layer, kind), y)?);
            }
            let q = TensorF::concat_tokens(&outs[0], &outs[3])?;
            let k = TensorF::concat_tokens(&outs[1], &outs[4])?;
            let v = TensorF::concat_tokens(&outs[2], &outs[5])?;
            let attn = sdpa(&q, &k, &v, cfg.heads)?;
            let a_img = attn.slice_tokens(0, n_img)?;
            let a_txt = attn.slice_tokens(n_img, n_img + cfg.text_tokens)?;
            img = img.add(&matmul(&a_img, &block.img_out)?)?;
            txt = txt.add(&matmul(&a_txt, &block.txt_out)?)?;
            img = img.add(&feed_forward(&img, &block.img_ff)?)?;
            txt = txt.add(&feed_forward(&txt, &block.txt_ff)?)?;
        }

        let noise_half = img.slice_tokens(0, cfg.noise_tokens)?;
        matmul(&layer_norm(&noise_half, LN_EPS), &self.head)
    }

    /// Initial latent for `seed`.
    pub fn initial_noise(&self, seed: u64) -> TensorF {
        let cfg = &self.cfg;
        let data = gaussian_vec(splitmix64(seed ^ 0x4E01_5E00), cfg.noise_tokens * cfg.d_model, 1.0);
        TensorF::new([1, cfg.noise_tokens, cfg.d_model], data).expect("sized")
    }

    /// Fixed-step Euler integration from `t = 1` to `t = 0` with classifier-free
    /// guidance. Two forwards per step (conditional first), then the hub's step
    /// counter advances. Returns the final noise-half latent.
    pub fn sample(&self, source: &LatentImage, prompt: &str, sc: &SampleConfig, hub: &mut AttnHub) -> Result<TensorF> {
        self.sample_with(source, prompt, sc, hub, |_, _| {})
    }

    /// [`Model::sample`] with a callback receiving `(step, latent)` after every step.
    pub fn sample_with(
        &self,
        source: &LatentImage,
        prompt: &str,
        sc: &SampleConfig,
        hub: &mut AttnHub,
        mut on_step: impl FnMut(usize, &TensorF),
    ) -> Result<TensorF> {
        sc.validate()?;
        hub.begin_pass()?;
        let result = (|| {
            let cond = encode_prompt(prompt, &self.cfg);
            let uncond = encode_prompt(&sc.negative_prompt, &self.cfg);
            let mut x = self.initial_noise(sc.seed);
            let dt = 1.0 / sc.steps as f32;
            for step in 0..sc.steps {
                let t = 1.0 - step as f32 * dt;
                hub.set_branch(Branch::Cond);
                let v_cond = self.forward(&x, source, &cond, step, t, hub)?;
                hub.set_branch(Branch::Uncond);
                let v_uncond = self.forward(&x, source, &uncond, step, t, hub)?;
                let v = cfg_combine(&v_cond, &v_uncond, sc.cfg_scale)?;
                for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
                    *xi -= dt * vi;
                }
                if !x.is_finite() {
                    return Err(Error::NonFinite { op: "sample" });
                }
                hub.advance_step();
                on_step(step, &x);
            }
            Ok(x)
        })();
        hub.end_pass();
        result
    }
}

fn feed_forward(x: &TensorF, (w1, w2): &(TensorF, TensorF)) -> Result<TensorF> {
    let h = gelu(&matmul(&layer_norm(x, LN_EPS), w1)?);
    matmul(&h, w2)
}

/// `uncond + scale * (cond - uncond)`, with the endpoints 0 and 1 returning the
/// respective branch bit-exactly.
pub fn cfg_combine(cond: &TensorF, uncond: &TensorF, scale: f32) -> Result<TensorF> {
    if cond.shape() != uncond.shape() {
        return Err(Error::Shape {
            op: "cfg_combine",
            lhs: cond.shape(),
            rhs: uncond.shape(),
        });
    }
    if scale == 1.0 {
        return Ok(cond.clone());
    }
    if scale == 0.0 {
        return Ok(uncond.clone());
    }
    let data = cond
        .data()
        .iter()
        .zip(uncond.data())
        .map(|(&c, &u)| u + scale * (c - u))
        .collect();
    TensorF::new(cond.shape(), data)
}
