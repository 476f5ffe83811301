//! Attention overlays: the input image faded by a rescaled attention map.

use crate::dataset::Sample;
use crate::error::{PanError, Result};
use crate::imageio::RgbImage;
use crate::models::ForwardResult;

/// `(x − min)/(max − min)`; a constant map becomes all ones.
pub fn min_max_rescale(map: &[f32]) -> Vec<f32> {
    let min = map.iter().copied().fold(f32::INFINITY, f32::min);
    let max = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = max - min;
    if !(range > 0.0) {
        return vec![1.0; map.len()];
    }
    map.iter().map(|&x| (x - min) / range).collect()
}

/// Nearest-neighbour upsampling of a `side`×`side` grid to `canvas`×`canvas`.
pub fn upsample_nearest(map: &[f32], side: usize, canvas: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(canvas * canvas);
    for y in 0..canvas {
        let row = &map[(y * side / canvas) * side..][..side];
        out.extend((0..canvas).map(|x| row[x * side / canvas]));
    }
    out
}

/// Overlay of attention layer `layer` (0-based head index) for sample `n` of
/// a batch result. With `accumulate`, the multiplier is the product of the
/// rescaled maps of all heads up to and including `layer`.
pub fn render_attention_overlay(
    sample: &Sample,
    result: &ForwardResult,
    n: usize,
    layer: usize,
    accumulate: bool,
) -> Result<RgbImage> {
    let maps = &result.attention_maps;
    if layer >= maps.len() {
        return Err(PanError::usage(format!(
            "attention layer {layer} requested, model has {}",
            maps.len()
        )));
    }
    if n >= result.batch_size() {
        return Err(PanError::usage(format!("sample {n} outside a batch of {}", result.batch_size())));
    }
    let canvas = sample.canvas();
    let mut weight = vec![1.0f32; canvas * canvas];
    let first = if accumulate { 0 } else { layer };
    for map in &maps[first..=layer] {
        let (h, w) = (map.shape()[2], map.shape()[3]);
        if h != w || canvas % h != 0 {
            return Err(PanError::config(format!("{h}×{w} map does not tile a {canvas} canvas")));
        }
        let cells = &map.data()[n * h * w..(n + 1) * h * w];
        let up = upsample_nearest(&min_max_rescale(cells), h, canvas);
        weight.iter_mut().zip(up).for_each(|(a, b)| *a *= b);
    }
    let pixels = sample
        .image
        .chunks(3)
        .zip(&weight)
        .flat_map(|(px, &a)| px.iter().map(move |&v| (v as f32 * a).round().clamp(0.0, 255.0) as u8))
        .collect();
    RgbImage::new(canvas, canvas, pixels)
}

/// The sample's image as an [`RgbImage`].
pub fn sample_image(sample: &Sample) -> RgbImage {
    let c = sample.canvas();
    RgbImage::new(c, c, sample.image.clone()).expect("validated sample")
}
