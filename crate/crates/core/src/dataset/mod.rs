//! Query-reference digit datasets (MREF, MDIST, MBG): generation from MNIST
//! glyphs, validation and the `MREF-REC v1` archive format.

mod archive;
mod background;
pub mod idx;
mod render;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

pub use archive::{decode_archive, encode_archive, read_archive, write_archive, Archive, ARCHIVE_MAGIC, ARCHIVE_VERSION, HEADER_LEN};
pub use background::{load_backgrounds, make_background, Backgrounds};
pub use idx::{load_mnist_dir, load_mnist_idx, Glyph};
pub use render::{generate_split, render_sample, split_seed, GlyphPool, Split};

use crate::config::KeyValues;
use crate::error::{PanError, Result};
use crate::layers::Query;
use crate::tensor::Tensor;

pub const COLOR_NAMES: [&str; 5] = ["green", "yellow", "white", "red", "blue"];
pub const PALETTE: [[u8; 3]; 5] = [
    [0, 255, 0],
    [255, 255, 0],
    [255, 255, 255],
    [255, 0, 0],
    [0, 0, 255],
];
pub const SCALE_MIN: f32 = 0.5;
pub const SCALE_MAX: f32 = 3.0;
pub const DEFAULT_CANVAS: usize = 96;

/// One record: RGB image, visible-target mask, query digit, colour answer and
/// the target's scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// canvas×canvas×3, interleaved RGB.
    pub image: Vec<u8>,
    /// canvas×canvas, 255 on visible target pixels.
    pub mask: Vec<u8>,
    pub query: u8,
    pub color_label: u8,
    pub scale: f32,
}

impl Sample {
    pub fn canvas(&self) -> usize {
        (self.mask.len() as f64).sqrt() as usize
    }

    pub fn query(&self) -> Query {
        Query::new(self.query).expect("validated query")
    }

    /// Checks the record invariants for a given canvas size.
    pub fn validate(&self, canvas: usize) -> Result<()> {
        let px = canvas * canvas;
        if self.image.len() != px * 3 || self.mask.len() != px {
            return Err(PanError::data(format!(
                "record buffers do not match a {canvas}×{canvas} canvas"
            )));
        }
        if self.query > 9 {
            return Err(PanError::data(format!("query {} outside 0..=9", self.query)));
        }
        if self.color_label as usize >= PALETTE.len() {
            return Err(PanError::data(format!("colour label {} outside 0..5", self.color_label)));
        }
        if !(SCALE_MIN..=SCALE_MAX).contains(&self.scale) {
            return Err(PanError::data(format!("scale {} outside [0.5, 3.0]", self.scale)));
        }
        if self.mask.iter().any(|&m| m != 0 && m != 255) {
            return Err(PanError::data("mask values must be 0 or 255"));
        }
        // a composited target pixel has alpha > 0.5 over a saturated palette
        // channel, so it can never be pure black
        if let Some(p) = (0..px).find(|&p| self.mask[p] == 255 && self.image[p * 3..p * 3 + 3] == [0, 0, 0]) {
            return Err(PanError::data(format!("mask covers black pixel {p}")));
        }
        Ok(())
    }

    /// Fraction of canvas pixels inside the mask.
    pub fn mask_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m != 0).count() as f64 / self.mask.len() as f64
    }
}

/// Packs samples into an N×3×H×W tensor scaled to [0, 1].
pub fn images_to_tensor(samples: &[&Sample]) -> Result<Tensor> {
    let canvas = samples
        .first()
        .ok_or_else(|| PanError::usage("empty batch"))?
        .canvas();
    let plane = canvas * canvas;
    let mut data = vec![0.0; samples.len() * 3 * plane];
    for (n, s) in samples.iter().enumerate() {
        if s.canvas() != canvas {
            return Err(PanError::config("mixed canvas sizes in one batch"));
        }
        let base = n * 3 * plane;
        for p in 0..plane {
            for c in 0..3 {
                data[base + c * plane + p] = s.image[p * 3 + c] as f32 / 255.0;
            }
        }
    }
    Tensor::new(&[samples.len(), 3, canvas, canvas], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Mref,
    Mdist,
    Mbg,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Mref => "MREF",
            Variant::Mdist => "MDIST",
            Variant::Mbg => "MBG",
        })
    }
}

impl FromStr for Variant {
    type Err = PanError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "MREF" => Ok(Variant::Mref),
            "MDIST" => Ok(Variant::Mdist),
            "MBG" => Ok(Variant::Mbg),
            _ => Err(PanError::config(format!("unknown dataset variant `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub variant: Variant,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub digits_min: usize,
    pub digits_max: usize,
    pub scale_min: f32,
    pub scale_max: f32,
    pub canvas: usize,
    /// Per-channel standard deviation of the colour noise, in u8 units.
    pub color_sigma: f32,
    pub seed: u64,
    pub background_dir: Option<PathBuf>,
    /// Rejected placements before the scale is shrunk.
    pub max_attempts: usize,
    /// Largest allowed intersection over the smaller bounding box.
    pub max_overlap: f32,
    pub distractor_patches: usize,
    pub distractor_intensity: f32,
}

impl GenConfig {
    /// Full-size splits (30k/10k/10k, 5–9 digits, scales 0.5–3.0).
    pub fn full(variant: Variant) -> Self {
        GenConfig {
            variant,
            train_count: 30_000,
            val_count: 10_000,
            test_count: 10_000,
            digits_min: 5,
            digits_max: 9,
            scale_min: SCALE_MIN,
            scale_max: SCALE_MAX,
            canvas: DEFAULT_CANVAS,
            color_sigma: 15.0,
            seed: 7,
            background_dir: None,
            max_attempts: 50,
            max_overlap: 0.2,
            distractor_patches: 150,
            distractor_intensity: 0.7,
        }
    }

    /// Desk-scale preset (4k/1k/1k, 3–5 digits, scales 0.5–2.0).
    pub fn mini(variant: Variant) -> Self {
        GenConfig {
            train_count: 4000,
            val_count: 1000,
            test_count: 1000,
            digits_min: 3,
            digits_max: 5,
            scale_max: 2.0,
            ..Self::full(variant)
        }
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_count,
            Split::Val => self.val_count,
            Split::Test => self.test_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PanError::config(m.to_string()));
        if self.train_count == 0 || self.val_count == 0 || self.test_count == 0 {
            return bad("split counts must be positive");
        }
        if self.digits_min == 0 || self.digits_min > self.digits_max || self.digits_max > 10 {
            return bad("digits per image must satisfy 1 ≤ min ≤ max ≤ 10");
        }
        if !(self.color_sigma >= 0.0) {
            return bad("color_sigma must be non-negative");
        }
        if !(SCALE_MIN <= self.scale_min && self.scale_min <= self.scale_max && self.scale_max <= SCALE_MAX) {
            return bad("scales must satisfy 0.5 ≤ scale_min ≤ scale_max ≤ 3.0");
        }
        if self.canvas < 16 || self.canvas % 16 != 0 {
            return bad("canvas must be a positive multiple of 16");
        }
        if (self.scale_min * 28.0).round() as usize > self.canvas {
            return bad("smallest glyph does not fit the canvas");
        }
        if self.max_attempts == 0 || !(0.0..=1.0).contains(&self.max_overlap) {
            return bad("max_attempts must be positive and max_overlap in [0, 1]");
        }
        if self.variant == Variant::Mbg && self.background_dir.is_none() {
            return bad("MBG needs background_dir");
        }
        Ok(())
    }

    /// Reads a flat key-value config; `preset = mini|full` selects defaults.
    pub fn from_key_values(mut kv: KeyValues) -> Result<Self> {
        let variant: Variant = kv.take_or("variant", "MREF".to_string())?.parse()?;
        let preset: String = kv.take_or("preset", "mini".to_string())?;
        let mut c = match preset.as_str() {
            "mini" => Self::mini(variant),
            "full" => Self::full(variant),
            other => return Err(PanError::config(format!("unknown preset `{other}`"))),
        };
        c.train_count = kv.take_or("train_count", c.train_count)?;
        c.val_count = kv.take_or("val_count", c.val_count)?;
        c.test_count = kv.take_or("test_count", c.test_count)?;
        c.digits_min = kv.take_or("digits_min", c.digits_min)?;
        c.digits_max = kv.take_or("digits_max", c.digits_max)?;
        c.scale_min = kv.take_or("scale_min", c.scale_min)?;
        c.scale_max = kv.take_or("scale_max", c.scale_max)?;
        c.canvas = kv.take_or("canvas", c.canvas)?;
        c.color_sigma = kv.take_or("color_sigma", c.color_sigma)?;
        c.seed = kv.take_or("seed", c.seed)?;
        c.background_dir = kv.take::<PathBuf>("background_dir")?.or(c.background_dir);
        c.max_attempts = kv.take_or("max_attempts", c.max_attempts)?;
        c.max_overlap = kv.take_or("max_overlap", c.max_overlap)?;
        c.distractor_patches = kv.take_or("distractor_patches", c.distractor_patches)?;
        c.distractor_intensity = kv.take_or("distractor_intensity", c.distractor_intensity)?;
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.insert("variant", self.variant);
        kv.insert("train_count", self.train_count);
        kv.insert("val_count", self.val_count);
        kv.insert("test_count", self.test_count);
        kv.insert("digits_min", self.digits_min);
        kv.insert("digits_max", self.digits_max);
        kv.insert("scale_min", self.scale_min);
        kv.insert("scale_max", self.scale_max);
        kv.insert("canvas", self.canvas);
        kv.insert("color_sigma", self.color_sigma);
        kv.insert("seed", self.seed);
        if let Some(dir) = &self.background_dir {
            kv.insert("background_dir", dir.display());
        }
        kv.insert("max_attempts", self.max_attempts);
        kv.insert("max_overlap", self.max_overlap);
        kv.insert("distractor_patches", self.distractor_patches);
        kv.insert("distractor_intensity", self.distractor_intensity);
        kv
    }
}

/// Palette entry nearest (Euclidean RGB) to `rgb`.
pub fn nearest_color(rgb: [f64; 3]) -> usize {
    let dist = |p: &[u8; 3]| (0..3).map(|c| (p[c] as f64 - rgb[c]).powi(2)).sum::<f64>();
    (0..PALETTE.len())
        .min_by(|&a, &b| dist(&PALETTE[a]).total_cmp(&dist(&PALETTE[b])))
        .expect("non-empty palette")
}
