// SPDX-License-Identifier: MIT OR Apache-2.0

//! Edit-fidelity and source-preservation scores in stand-in embedding spaces.
//!
//! Two seeded random projections play the roles of the CLIP image tower and
//! the DINO tower; the CLIP text tower is the hashed bag-of-words encoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mmdit::ModelConfig;
use crate::numerics::{cosine, TensorF};
use crate::text::{gaussian_vec, l2_normalize, HashedBow, TextEmbedder};

pub const CLIP_SEED: u64 = 0xC11B_0001;
pub const DINO_SEED: u64 = 0xD1A0_0002;
pub const DINO_DIM: usize = 128;

/// Maps a latent `(1, T, C)` to a unit vector (or zeros).
pub trait ImageEmbedder: Send + Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed_image(&self, x: &TensorF) -> Result<Vec<f32>>;
}

/// Gaussian projection of the flattened latent, L2-normalized.
#[derive(Clone)]
pub struct RandomProjection {
    seed: u64,
    in_dim: usize,
    out_dim: usize,
    /// Row-major `(in_dim, out_dim)`.
    matrix: Vec<f32>,
}

impl std::fmt::Debug for RandomProjection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.id())
    }
}

impl RandomProjection {
    pub fn new(seed: u64, in_dim: usize, out_dim: usize) -> Self {
        let scale = 1.0 / (in_dim.max(1) as f32).sqrt();
        Self {
            seed,
            in_dim,
            out_dim,
            matrix: gaussian_vec(seed, in_dim * out_dim, scale),
        }
    }
}

impl ImageEmbedder for RandomProjection {
    fn id(&self) -> String {
        format!("randproj(seed={:#x},in={},out={})", self.seed, self.in_dim, self.out_dim)
    }

    fn dim(&self) -> usize {
        self.out_dim
    }

    fn embed_image(&self, x: &TensorF) -> Result<Vec<f32>> {
        if x.len() != self.in_dim {
            return Err(Error::InvalidInput {
                op: "embed_image",
                msg: format!("expected {} values, got {:?}", self.in_dim, x.shape()),
            });
        }
        let mut out = vec![0.0f32; self.out_dim];
        for (xi, row) in x.data().iter().zip(self.matrix.chunks(self.out_dim)) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        l2_normalize(&mut out);
        Ok(out)
    }
}

/// A cosine score; degenerate when either side had zero norm (value is then 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub degenerate: bool,
}

impl Score {
    pub fn of(a: &[f32], b: &[f32]) -> Self {
        match cosine(a, b) {
            Some(value) => Score {
                value,
                degenerate: false,
            },
            None => Score {
                value: 0.0,
                degenerate: true,
            },
        }
    }
}

/// `0.5 * clip_t + 0.5 * dino_i`.
pub fn composite(clip_t: f64, dino_i: f64) -> f64 {
    0.5 * clip_t + 0.5 * dino_i
}

/// Rounds to `places` decimals, ties to even. Values within a relative 1e-9 of
/// a decimal tie count as the tie, so `0.40275` rounds like the decimal it
/// denotes rather than like its binary neighbour.
pub fn round_half_even(x: f64, places: i32) -> f64 {
    let p = 10f64.powi(places);
    let s = x * p;
    let fl = s.floor();
    let tol = 1e-9 * s.abs().max(1.0);
    let r = if ((s - fl) - 0.5).abs() <= tol {
        if fl.rem_euclid(2.0) == 0.0 {
            fl
        } else {
            fl + 1.0
        }
    } else {
        s.round()
    };
    let out = r / p;
    if out == 0.0 {
        0.0
    } else {
        out
    }
}

/// Four-decimal fixed formatting used by every report.
pub fn fmt4(x: f64) -> String {
    format!("{:.4}", round_half_even(x, 4))
}

/// Per-case metric bundle. `composite` is always the formula applied to the
/// two headline scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub clip_t: f64,
    pub dino_i: f64,
    pub clip_d: Option<f64>,
    pub composite: f64,
    pub degenerate: bool,
}

impl MetricsReport {
    pub fn new(clip_t: f64, dino_i: f64, clip_d: Option<f64>) -> Self {
        Self {
            clip_t,
            dino_i,
            clip_d,
            composite: composite(clip_t, dino_i),
            degenerate: false,
        }
    }

    /// Arithmetic mean of each field. `clip_d` is kept only if every report has one.
    pub fn mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let clip_d = reports
            .iter()
            .map(|r| r.clip_d)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / n);
        let mut m = MetricsReport::new(avg(&|r| r.clip_t), avg(&|r| r.dino_i), clip_d);
        m.degenerate = reports.iter().any(|r| r.degenerate);
        Some(m)
    }
}

/// The three embedding providers used for scoring.
pub struct MetricSuite {
    clip_image: Box<dyn ImageEmbedder>,
    clip_text: Box<dyn TextEmbedder>,
    dino: Box<dyn ImageEmbedder>,
}

impl std::fmt::Debug for MetricSuite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MetricSuite").field("providers", &self.provider_ids()).finish()
    }
}

impl MetricSuite {
    pub fn new(clip_image: Box<dyn ImageEmbedder>, clip_text: Box<dyn TextEmbedder>, dino: Box<dyn ImageEmbedder>) -> Result<Self> {
        if clip_image.dim() != clip_text.dim() {
            return Err(Error::Harness(format!(
                "clip image dim {} differs from text dim {}",
                clip_image.dim(),
                clip_text.dim()
            )));
        }
        Ok(Self {
            clip_image,
            clip_text,
            dino,
        })
    }

    /// Default toy providers sized for `cfg`. Requires equal noise and source halves.
    pub fn toy(cfg: &ModelConfig) -> Result<Self> {
        if cfg.noise_tokens != cfg.source_tokens {
            return Err(Error::Config(format!(
                "metrics need noise_tokens == source_tokens, got {} and {}",
                cfg.noise_tokens, cfg.source_tokens
            )));
        }
        let text = HashedBow::default();
        let in_dim = cfg.noise_tokens * cfg.d_model;
        Self::new(
            Box::new(RandomProjection::new(CLIP_SEED, in_dim, text.dim)),
            Box::new(text),
            Box::new(RandomProjection::new(DINO_SEED, in_dim, DINO_DIM)),
        )
    }

    /// `(clip, clip_text, dino)` identifiers.
    pub fn provider_ids(&self) -> [String; 3] {
        [self.clip_image.id(), self.clip_text.id(), self.dino.id()]
    }

    /// Edited image vs instruction in the CLIP space.
    pub fn clip_t(&self, edit: &TensorF, instruction: &str) -> Result<Score> {
        Ok(Score::of(&self.clip_image.embed_image(edit)?, &self.clip_text.embed_text(instruction)))
    }

    /// Edited image vs source image in the DINO space.
    pub fn dino_i(&self, edit: &TensorF, source: &TensorF) -> Result<Score> {
        Ok(Score::of(&self.dino.embed_image(edit)?, &self.dino.embed_image(source)?))
    }

    /// Directional similarity `cos(img(edit) - img(source), txt(instruction) - txt(caption))`.
    pub fn clip_d(&self, edit: &TensorF, source: &TensorF, instruction: &str, caption: &str) -> Result<Score> {
        let di = diff(&self.clip_image.embed_image(edit)?, &self.clip_image.embed_image(source)?);
        let dt = diff(&self.clip_text.embed_text(instruction), &self.clip_text.embed_text(caption));
        Ok(Score::of(&di, &dt))
    }

    pub fn evaluate(&self, edit: &TensorF, source: &TensorF, instruction: &str, caption: Option<&str>) -> Result<MetricsReport> {
        let t = self.clip_t(edit, instruction)?;
        let i = self.dino_i(edit, source)?;
        let d = caption.map(|c| self.clip_d(edit, source, instruction, c)).transpose()?;
        let mut m = MetricsReport::new(t.value, i.value, d.map(|s| s.value));
        m.degenerate = t.degenerate || i.degenerate || d.is_some_and(|s| s.degenerate);
        Ok(m)
    }
}

fn diff(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}
