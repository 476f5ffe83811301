use std::path::Path;

use rand::Rng;

use super::idx::GLYPH_SIDE;
use super::render::GlyphPool;
use super::{GenConfig, Variant};
use crate::error::{PanError, Result};
use crate::imageio::{read_ppm, resize_bilinear, RgbImage};

/// Side of the square MNIST crops tiled over MDIST canvases.
pub const PATCH_SIDE: usize = 5;

/// Natural images for MBG, decoded once up front.
#[derive(Clone, Debug, Default)]
pub struct Backgrounds {
    pub images: Vec<RgbImage>,
}

/// Loads every readable `.ppm` in `dir` (sorted by file name). Unreadable
/// files are skipped with a warning; an empty result is an error.
pub fn load_backgrounds(dir: &Path) -> Result<Backgrounds> {
    let entries = std::fs::read_dir(dir).map_err(|e| PanError::io(dir, e))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    paths.sort();
    let mut images = Vec::new();
    for p in &paths {
        match read_ppm(p) {
            Ok(img) if img.width > 0 && img.height > 0 => images.push(img),
            Ok(_) => log::warn!("skipping empty background {}", p.display()),
            Err(e) => log::warn!("skipping unreadable background {}: {e}", p.display()),
        }
    }
    if images.is_empty() {
        return Err(PanError::data(format!(
            "no readable PPM backgrounds in {}",
            dir.display()
        )));
    }
    Ok(Backgrounds { images })
}

/// Canvas background for the configured variant.
///
/// MREF is black. MDIST stamps `distractor_patches` grayscale 5×5 crops of
/// random glyphs (scaled by `distractor_intensity`, max-blended). MBG takes a
/// random square crop of a background image resized to the canvas.
pub fn make_background(
    rng: &mut impl Rng,
    cfg: &GenConfig,
    pool: &GlyphPool,
    backgrounds: Option<&Backgrounds>,
) -> Result<RgbImage> {
    let n = cfg.canvas;
    match cfg.variant {
        Variant::Mref => Ok(RgbImage::black(n, n)),
        Variant::Mdist => {
            let mut gray = vec![0u8; n * n];
            stamp_distractors(rng, cfg, pool, &mut gray);
            let pixels = gray.iter().flat_map(|&g| [g, g, g]).collect();
            RgbImage::new(n, n, pixels)
        }
        Variant::Mbg => {
            let bgs = backgrounds
                .filter(|b| !b.images.is_empty())
                .ok_or_else(|| PanError::data("MBG generation needs background images"))?;
            let img = &bgs.images[rng.random_range(0..bgs.images.len())];
            let short = img.width.min(img.height);
            let side = rng.random_range((short / 2).max(1)..=short);
            let x0 = rng.random_range(0..=img.width - side);
            let y0 = rng.random_range(0..=img.height - side);
            let mut crop = Vec::with_capacity(side * side * 3);
            for y in y0..y0 + side {
                crop.extend_from_slice(&img.pixels[(y * img.width + x0) * 3..(y * img.width + x0 + side) * 3]);
            }
            let crop = RgbImage::new(side, side, crop)?;
            Ok(resize_bilinear(&crop, n, n))
        }
    }
}

/// Max-blends `distractor_patches` glyph crops into a grayscale canvas and
/// returns how many were stamped.
pub(crate) fn stamp_distractors(
    rng: &mut impl Rng,
    cfg: &GenConfig,
    pool: &GlyphPool,
    gray: &mut [u8],
) -> usize {
    let n = cfg.canvas;
    let mut stamped = 0;
    for _ in 0..cfg.distractor_patches {
        let glyph = pool.random_any(rng);
        let cx = rng.random_range(0..=GLYPH_SIDE - PATCH_SIDE);
        let cy = rng.random_range(0..=GLYPH_SIDE - PATCH_SIDE);
        let px = rng.random_range(0..=n - PATCH_SIDE);
        let py = rng.random_range(0..=n - PATCH_SIDE);
        for dy in 0..PATCH_SIDE {
            for dx in 0..PATCH_SIDE {
                let v = glyph.pixels[(cy + dy) * GLYPH_SIDE + cx + dx] as f32;
                let v = (v * cfg.distractor_intensity).round().clamp(0.0, 255.0) as u8;
                let at = (py + dy) * n + px + dx;
                gray[at] = gray[at].max(v);
            }
        }
        stamped += 1;
    }
    stamped
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::idx::{Glyph, GLYPH_LEN};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pool() -> GlyphPool {
        GlyphPool::new((0..10).map(|label| Glyph { pixels: Box::new([255; GLYPH_LEN]), label })).unwrap()
    }

    #[test]
    fn mdist_stamps_every_patch_at_reduced_intensity() {
        let cfg = GenConfig::mini(Variant::Mdist);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut gray = vec![0u8; 96 * 96];
        assert_eq!(stamp_distractors(&mut rng, &cfg, &pool(), &mut gray), 150);
        let peak = (255.0 * cfg.distractor_intensity).round() as u8;
        assert!(gray.iter().all(|&g| g == 0 || g == peak));
        assert!(gray.iter().filter(|&&g| g > 0).count() > 1000);
    }

    #[test]
    fn mbg_crops_are_resized_to_the_canvas() {
        let mut cfg = GenConfig::mini(Variant::Mbg);
        cfg.canvas = 32;
        let img = RgbImage::new(40, 30, (0..40 * 30 * 3).map(|i| (i % 200) as u8).collect()).unwrap();
        let bgs = Backgrounds { images: vec![img] };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bg = make_background(&mut rng, &cfg, &pool(), Some(&bgs)).unwrap();
        assert_eq!((bg.width, bg.height), (32, 32));
        assert!(make_background(&mut rng, &cfg, &pool(), None).is_err());
    }
}
