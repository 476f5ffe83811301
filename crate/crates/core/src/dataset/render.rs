use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::background::make_background;
use super::idx::{Glyph, GLYPH_SIDE};
use super::{Backgrounds, GenConfig, Sample, PALETTE};
use crate::error::{PanError, Result};

/// Placement rounds (each of `max_attempts` tries, followed by a shrink)
/// before a sample is abandoned and redrawn.
const SHRINK_ROUNDS: usize = 8;
/// Redraws of a whole sample before generation gives up.
const SAMPLE_RETRIES: usize = 100;
/// Upper bound of the resampled scale after a shrink.
const SHRINK_CAP: f32 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// The k-th glyph of each digit class feeds the split owning `k % 5`, so
    /// splits never share a glyph (train 3/5, val 1/5, test 1/5) and every
    /// split sees every class whatever the file order.
    fn owns(self, rank_in_class: usize) -> bool {
        match self {
            Split::Train => rank_in_class % 5 < 3,
            Split::Val => rank_in_class % 5 == 3,
            Split::Test => rank_in_class % 5 == 4,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = PanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(PanError::config(format!("unknown split `{s}`"))),
        }
    }
}

/// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seed of a split: `seed ⊕ FNV-1a(split name)`.
pub fn split_seed(seed: u64, split: Split) -> u64 {
    seed ^ fnv1a(split.name().as_bytes())
}

/// Glyphs grouped by digit class.
#[derive(Clone, Debug)]
pub struct GlyphPool {
    by_class: [Vec<Glyph>; 10],
}

impl GlyphPool {
    pub fn new(glyphs: impl IntoIterator<Item = Glyph>) -> Result<Self> {
        let mut by_class: [Vec<Glyph>; 10] = Default::default();
        for g in glyphs {
            by_class[g.label as usize].push(g);
        }
        if let Some(missing) = by_class.iter().position(Vec::is_empty) {
            return Err(PanError::data(format!("glyph pool has no digit {missing}")));
        }
        Ok(GlyphPool { by_class })
    }

    /// The glyphs reserved for one split.
    pub fn for_split(glyphs: &[Glyph], split: Split) -> Result<Self> {
        let mut seen = [0usize; 10];
        Self::new(glyphs.iter().filter_map(|g| {
            let rank = seen[g.label as usize];
            seen[g.label as usize] += 1;
            split.owns(rank).then(|| g.clone())
        }))
    }

    pub fn class_len(&self, digit: usize) -> usize {
        self.by_class[digit].len()
    }

    pub fn random_of(&self, digit: usize, rng: &mut impl Rng) -> &Glyph {
        let class = &self.by_class[digit];
        &class[rng.random_range(0..class.len())]
    }

    pub fn random_any(&self, rng: &mut impl Rng) -> &Glyph {
        self.random_of(rng.random_range(0..10), rng)
    }
}

#[derive(Clone, Copy, Debug)]
struct Placement {
    x: usize,
    y: usize,
    size: usize,
}

impl Placement {
    /// Intersection area over the smaller box area.
    fn overlap(&self, other: &Placement) -> f32 {
        let ix = (self.x + self.size).min(other.x + other.size) as isize - self.x.max(other.x) as isize;
        let iy = (self.y + self.size).min(other.y + other.size) as isize - self.y.max(other.y) as isize;
        if ix <= 0 || iy <= 0 {
            return 0.0;
        }
        let smaller = self.size.min(other.size).pow(2);
        (ix * iy) as f32 / smaller as f32
    }
}

/// Bilinear resample of a glyph to `size`×`size` alpha in [0, 1].
pub(crate) fn scale_glyph(glyph: &Glyph, size: usize) -> Vec<f32> {
    let src = |x: usize, y: usize| glyph.pixels[y * GLYPH_SIDE + x] as f32 / 255.0;
    let ratio = GLYPH_SIDE as f32 / size as f32;
    let last = (GLYPH_SIDE - 1) as f32;
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = ((y as f32 + 0.5) * ratio - 0.5).clamp(0.0, last);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(GLYPH_SIDE - 1);
        let wy = fy - y0 as f32;
        for x in 0..size {
            let fx = ((x as f32 + 0.5) * ratio - 0.5).clamp(0.0, last);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(GLYPH_SIDE - 1);
            let wx = fx - x0 as f32;
            let top = src(x0, y0) * (1.0 - wx) + src(x1, y0) * wx;
            let bottom = src(x0, y1) * (1.0 - wx) + src(x1, y1) * wx;
            out[y * size + x] = top * (1.0 - wy) + bottom * wy;
        }
    }
    out
}

fn glyph_size(scale: f32) -> usize {
    ((GLYPH_SIDE as f32 * scale).round() as usize).max(1)
}

/// Finds a position for a glyph, shrinking its scale after every
/// `max_attempts` rejections. Returns the placement and the final scale.
fn place(
    rng: &mut impl Rng,
    cfg: &GenConfig,
    mut scale: f32,
    placed: &[Placement],
) -> Option<(Placement, f32)> {
    for _ in 0..SHRINK_ROUNDS {
        for _ in 0..cfg.max_attempts {
            let size = glyph_size(scale);
            if size > cfg.canvas {
                break;
            }
            let candidate = Placement {
                x: rng.random_range(0..=cfg.canvas - size),
                y: rng.random_range(0..=cfg.canvas - size),
                size,
            };
            if placed.iter().all(|p| p.overlap(&candidate) <= cfg.max_overlap) {
                return Some((candidate, scale));
            }
        }
        let upper = scale.min(SHRINK_CAP).max(cfg.scale_min);
        scale = rng.random_range(cfg.scale_min..=upper);
    }
    None
}

fn try_render(
    rng: &mut impl Rng,
    pool: &GlyphPool,
    cfg: &GenConfig,
    backgrounds: Option<&Backgrounds>,
) -> Result<Option<Sample>> {
    let n = cfg.canvas;
    let background = make_background(rng, cfg, pool, backgrounds)?;
    let count = rng.random_range(cfg.digits_min..=cfg.digits_max);
    let mut classes: Vec<usize> = (0..10).collect();
    classes.shuffle(rng);
    classes.truncate(count);
    // distinct colours while the palette lasts, then a fresh shuffle
    let mut colors = Vec::with_capacity(count);
    while colors.len() < count {
        let mut round: Vec<usize> = (0..PALETTE.len()).collect();
        round.shuffle(rng);
        colors.extend(round);
    }
    colors.truncate(count);

    let noise = Normal::new(0.0f32, cfg.color_sigma.max(0.0)).expect("non-negative sigma");
    let mut placements = Vec::with_capacity(count);
    let mut digits = Vec::with_capacity(count);
    for (&class, &color) in classes.iter().zip(&colors) {
        let glyph = pool.random_of(class, rng);
        let scale = rng.random_range(cfg.scale_min..=cfg.scale_max);
        let Some((placement, scale)) = place(rng, cfg, scale, &placements) else {
            return Ok(None);
        };
        let mut rgb = [0f32; 3];
        for (c, v) in rgb.iter_mut().enumerate() {
            let jitter = if cfg.color_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            *v = (PALETTE[color][c] as f32 + jitter).clamp(0.0, 255.0);
        }
        placements.push(placement);
        digits.push((class, color, rgb, scale, scale_glyph(glyph, placement.size)));
    }
    let target = rng.random_range(0..count);

    let mut canvas: Vec<f32> = background.pixels.iter().map(|&v| v as f32).collect();
    let mut mask = vec![0u8; n * n];
    for (idx, (p, (_, _, rgb, _, alpha))) in placements.iter().zip(&digits).enumerate() {
        for dy in 0..p.size {
            for dx in 0..p.size {
                let a = alpha[dy * p.size + dx];
                if a <= 0.0 {
                    continue;
                }
                let at = (p.y + dy) * n + p.x + dx;
                for c in 0..3 {
                    let px = &mut canvas[at * 3 + c];
                    *px = *px * (1.0 - a) + rgb[c] * a;
                }
                if a > 0.5 {
                    mask[at] = if idx == target { 255 } else { 0 };
                }
            }
        }
    }
    let (class, color, _, scale, _) = digits[target];
    Ok(Some(Sample {
        image: canvas.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect(),
        mask,
        query: class as u8,
        color_label: color as u8,
        scale,
    }))
}

/// Draws one sample; failed placements redraw the whole sample from the same
/// stream.
pub fn render_sample(
    rng: &mut impl Rng,
    pool: &GlyphPool,
    cfg: &GenConfig,
    backgrounds: Option<&Backgrounds>,
) -> Result<Sample> {
    for _ in 0..SAMPLE_RETRIES {
        if let Some(s) = try_render(rng, pool, cfg, backgrounds)? {
            return Ok(s);
        }
    }
    Err(PanError::data(format!(
        "could not place {}–{} digits on a {} canvas after {SAMPLE_RETRIES} redraws",
        cfg.digits_min, cfg.digits_max, cfg.canvas
    )))
}

/// Generates a split. Sample `i` uses ChaCha8 stream `i` of the split seed,
/// so the result does not depend on how generation is scheduled.
pub fn generate_split(
    cfg: &GenConfig,
    split: Split,
    glyphs: &[Glyph],
    backgrounds: Option<&Backgrounds>,
) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let pool = GlyphPool::for_split(glyphs, split)?;
    let seed = split_seed(cfg.seed, split);
    (0..cfg.count(split))
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            render_sample(&mut rng, &pool, cfg, backgrounds)
        })
        .collect()
}
