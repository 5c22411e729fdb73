// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic, category-stratified edit cases with fixed per-case seeds.
//!
//! Case `i` (global index, cases ordered by category then position) gets seed
//! `splitmix64(master_seed + i * 0x9E3779B97F4A7C15)`; its template and
//! vocabulary draws come from a ChaCha8 stream keyed by that seed.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::router::EditCategory;
use crate::text::splitmix64;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

const OBJECTS: &[&str] = &[
    "cat", "dog", "car", "tree", "house", "bird", "chair", "horse", "boat", "flower", "apple", "lamp",
];
const SCENES: &[&str] = &["in a park", "on a table", "by the sea", "in a room", "on a street", "in a field"];
const COLORS: &[&str] = &["red", "blue", "green", "golden", "purple", "white"];
const LOOKS: &[&str] = &["older", "bigger", "smaller", "shiny", "wooden", "furry"];
const STYLES: &[&str] = &[
    "watercolor painting",
    "oil painting",
    "pencil sketch",
    "cartoon",
    "pixel art image",
    "charcoal drawing",
];
const BACKDROPS: &[&str] = &["beach", "forest", "snowy mountain", "city skyline", "desert", "night sky"];

fn templates(cat: EditCategory) -> &'static [&'static str] {
    match cat {
        EditCategory::Replace => &["Replace the {a} with a {b}", "Swap the {a} for a {b}", "Turn the {a} into a {b}"],
        EditCategory::Add => &["Add a {b} next to the {a}", "Put a {b} beside the {a}", "Insert a {b} into the scene"],
        EditCategory::Remove => &["Remove the {a}", "Delete the {a} from the picture", "Erase the {a}"],
        EditCategory::Attribute => &[
            "Make the {a} {color}",
            "Change the color of the {a} to {color}",
            "Make the {a} look {look}",
        ],
        EditCategory::Style => &["Make it a {style}", "Render the image as a {style}", "Turn the photo into a {style}"],
        EditCategory::Background => &[
            "Change the background to a {bg}",
            "Replace the background with a {bg}",
            "Put the {a} in front of a {bg}",
        ],
    }
}

/// One edit request. `caption` describes the source and enables CLIP-D.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCase {
    pub id: String,
    pub category: EditCategory,
    pub source_label: String,
    pub instruction: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Suite {
    pub master_seed: u64,
    pub cases: Vec<EditCase>,
}

/// Seed of the `index`-th case.
pub fn case_seed(master_seed: u64, index: u64) -> u64 {
    splitmix64(master_seed.wrapping_add(index.wrapping_mul(GOLDEN)))
}

/// Splits `n` over the six categories: `n / 6` each, and the remainder to
/// replace, add, remove, style, background, attribute in that order.
/// `100` gives 17/17/17/16/17/16.
pub fn stratified_counts(n: usize) -> [usize; 6] {
    const PRIORITY: [EditCategory; 6] = [
        EditCategory::Replace,
        EditCategory::Add,
        EditCategory::Remove,
        EditCategory::Style,
        EditCategory::Background,
        EditCategory::Attribute,
    ];
    let mut counts = [n / 6; 6];
    for cat in PRIORITY.iter().take(n % 6) {
        counts[cat.ordinal()] += 1;
    }
    counts
}

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).copied().expect("non-empty vocabulary")
}

fn make_case(cat: EditCategory, pos: usize, seed: u64) -> EditCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = pick(&mut rng, OBJECTS);
    let b = loop {
        let b = pick(&mut rng, OBJECTS);
        if b != a {
            break b;
        }
    };
    let scene = pick(&mut rng, SCENES);
    let instruction = pick(&mut rng, templates(cat))
        .replace("{a}", a)
        .replace("{b}", b)
        .replace("{color}", pick(&mut rng, COLORS))
        .replace("{look}", pick(&mut rng, LOOKS))
        .replace("{style}", pick(&mut rng, STYLES))
        .replace("{bg}", pick(&mut rng, BACKDROPS));
    EditCase {
        id: format!("{cat}-{pos:03}"),
        category: cat,
        source_label: format!("{a} {scene}"),
        instruction,
        seed,
        caption: Some(format!("a photo of a {a} {scene}")),
    }
}

/// Deterministic suite with `counts[c]` cases for category ordinal `c`.
pub fn generate_suite_with_counts(counts: [usize; 6], master_seed: u64) -> Suite {
    let mut cases = Vec::with_capacity(counts.iter().sum());
    for cat in EditCategory::ALL {
        for pos in 0..counts[cat.ordinal()] {
            let seed = case_seed(master_seed, cases.len() as u64);
            cases.push(make_case(cat, pos, seed));
        }
    }
    Suite { master_seed, cases }
}

/// `n_per_category` cases for every category.
pub fn generate_suite(n_per_category: usize, master_seed: u64) -> Suite {
    generate_suite_with_counts([n_per_category; 6], master_seed)
}

/// `n` cases in total, stratified by [`stratified_counts`].
pub fn generate_stratified(n: usize, master_seed: u64) -> Suite {
    generate_suite_with_counts(stratified_counts(n), master_seed)
}

impl Suite {
    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn case(&self, id: &str) -> Result<&EditCase> {
        self.cases
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::Harness(format!("no case with id `{id}`")))
    }

    /// Drops captions, so CLIP-D is not reported.
    pub fn without_captions(mut self) -> Self {
        for c in &mut self.cases {
            c.caption = None;
        }
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: Suite = serde_json::from_str(&crate::error::read_file(path)?)?;
        let mut ids: Vec<&str> = s.cases.iter().map(|c| c.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Harness(format!("duplicate case id `{}`", w[0])));
        }
        Ok(s)
    }
}
