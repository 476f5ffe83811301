//! Colour accuracy (overall and by target scale), attention true-positive
//! ratio and segmentation precision-recall.

use serde::Serialize;

use crate::dataset::{images_to_tensor, Archive, Sample};
use crate::error::{PanError, Result};
use crate::layers::Query;
use crate::models::Model;

/// Half-open scale buckets; the last one also contains 3.0.
pub const SCALE_BUCKETS: [(f32, f32); 5] = [(0.5, 1.0), (1.0, 1.5), (1.5, 2.0), (2.0, 2.5), (2.5, 3.0)];
/// Tolerance on Σα for the ratio metrics.
pub const ALPHA_SUM_TOLERANCE: f64 = 1e-4;

/// Per-sample model outputs needed by the metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub predictions: Vec<usize>,
    /// N×K class probabilities, row-major.
    pub probabilities: Vec<f32>,
    pub num_classes: usize,
    /// Final attention maps, `side`×`side` per sample, concatenated.
    pub final_maps: Vec<f32>,
    pub side: usize,
}

impl Predictions {
    pub fn map(&self, n: usize) -> &[f32] {
        let a = self.side * self.side;
        &self.final_maps[n * a..(n + 1) * a]
    }
}

fn predict_chunk(model: &Model, samples: &[Sample], batch: usize) -> Result<Predictions> {
    let mut out = Predictions {
        predictions: Vec::with_capacity(samples.len()),
        probabilities: Vec::new(),
        num_classes: model.config.num_colors,
        final_maps: Vec::new(),
        side: model.config.final_resolution(),
    };
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let images = images_to_tensor(&refs)?;
        let queries: Vec<Query> = chunk.iter().map(Sample::query).collect();
        let r = model.infer(&images, &queries)?;
        out.predictions.extend(r.predictions());
        out.probabilities.extend_from_slice(r.probabilities.data());
        out.final_maps
            .extend_from_slice(r.attention_maps.last().expect("final head").data());
    }
    Ok(out)
}

/// Runs the model over `samples` in batches, optionally over `threads`
/// contiguous slices joined in order.
pub fn predict(model: &Model, samples: &[Sample], batch: usize, threads: usize) -> Result<Predictions> {
    if samples.is_empty() {
        return Err(PanError::usage("no samples to evaluate"));
    }
    if let Some(s) = samples.iter().find(|s| s.canvas() != model.config.input_size) {
        return Err(PanError::config(format!(
            "archive canvas {} does not match model input {}",
            s.canvas(),
            model.config.input_size
        )));
    }
    let threads = threads.clamp(1, samples.len());
    if threads == 1 {
        return predict_chunk(model, samples, batch);
    }
    let per = samples.len().div_ceil(threads);
    let parts: Vec<Result<Predictions>> = std::thread::scope(|s| {
        let handles: Vec<_> = samples
            .chunks(per)
            .map(|c| s.spawn(move || predict_chunk(model, c, batch)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut parts = parts.into_iter();
    let mut out = parts.next().expect("one part")?;
    for p in parts {
        let p = p?;
        out.predictions.extend(p.predictions);
        out.probabilities.extend(p.probabilities);
        out.final_maps.extend(p.final_maps);
    }
    Ok(out)
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / predictions.len() as f64
}

pub fn scale_bucket(scale: f32) -> Option<usize> {
    SCALE_BUCKETS
        .iter()
        .position(|&(lo, hi)| scale >= lo && scale < hi)
        .or((scale == SCALE_BUCKETS[4].1).then_some(4))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BucketAccuracy {
    pub lo: f32,
    pub hi: f32,
    pub count: usize,
    /// `None` for an empty bucket.
    pub accuracy: Option<f64>,
}

pub fn scale_bucket_accuracy(predictions: &[usize], labels: &[usize], scales: &[f32]) -> [BucketAccuracy; 5] {
    let mut hits = [0usize; 5];
    let mut counts = [0usize; 5];
    for ((p, l), &s) in predictions.iter().zip(labels).zip(scales) {
        if let Some(b) = scale_bucket(s) {
            counts[b] += 1;
            hits[b] += (p == l) as usize;
        }
    }
    std::array::from_fn(|b| BucketAccuracy {
        lo: SCALE_BUCKETS[b].0,
        hi: SCALE_BUCKETS[b].1,
        count: counts[b],
        accuracy: (counts[b] > 0).then(|| hits[b] as f64 / counts[b] as f64),
    })
}

/// Best minus worst accuracy over populated buckets.
pub fn bucket_gap(buckets: &[BucketAccuracy]) -> Option<f64> {
    let accs: Vec<f64> = buckets.iter().filter_map(|b| b.accuracy).collect();
    let max = accs.iter().copied().reduce(f64::max)?;
    let min = accs.iter().copied().reduce(f64::min)?;
    Some(max - min)
}

/// In-mask fraction of each cell of a `side`×`side` grid over a
/// `canvas`×`canvas` mask.
pub fn pool_mask(mask: &[u8], canvas: usize, side: usize) -> Result<Vec<f64>> {
    if side == 0 || canvas % side != 0 || mask.len() != canvas * canvas {
        return Err(PanError::config(format!(
            "cannot pool a {} byte mask of a {canvas} canvas onto a {side}×{side} grid",
            mask.len()
        )));
    }
    let tile = canvas / side;
    let mut cells = vec![0.0; side * side];
    for y in 0..canvas {
        for x in 0..canvas {
            if mask[y * canvas + x] != 0 {
                cells[(y / tile) * side + x / tile] += 1.0;
            }
        }
    }
    let area = (tile * tile) as f64;
    cells.iter_mut().for_each(|c| *c /= area);
    Ok(cells)
}

fn check_alpha(alpha: &[f32]) -> Result<f64> {
    let total: f64 = alpha.iter().map(|&a| a as f64).sum();
    if (total - 1.0).abs() > ALPHA_SUM_TOLERANCE || alpha.iter().any(|a| !(*a >= 0.0)) {
        return Err(PanError::numeric(format!("attention map sums to {total}, expected 1")));
    }
    Ok(total)
}

/// Share of attention mass inside the pooled mask: Σ α·m / Σ α.
pub fn tpr(alpha: &[f32], pooled_mask: &[f64]) -> Result<f64> {
    if alpha.len() != pooled_mask.len() {
        return Err(PanError::config(format!(
            "attention map has {} cells, mask {}",
            alpha.len(),
            pooled_mask.len()
        )));
    }
    let total = check_alpha(alpha)?;
    let inside: f64 = alpha.iter().zip(pooled_mask).map(|(&a, &m)| a as f64 * m).sum();
    Ok(inside / total)
}

/// Mean TPR of the uniform map, i.e. the mean pooled-mask fraction.
pub fn uniform_tpr(samples: &[Sample], side: usize) -> Result<f64> {
    let mut sum = 0.0;
    for s in samples {
        let pooled = pool_mask(&s.mask, s.canvas(), side)?;
        sum += pooled.iter().sum::<f64>() / pooled.len() as f64;
    }
    Ok(sum / samples.len() as f64)
}

/// The relative thresholds 0.05, 0.10, …, 0.95.
pub fn default_thresholds() -> Vec<f32> {
    (1..20).map(|i| i as f32 * 0.05).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PrPoint {
    pub threshold: f32,
    pub precision: f64,
    pub recall: f64,
    pub predicted: u64,
}

/// Micro-averaged precision-recall of binarised attention. Each map is
/// nearest-neighbour upsampled to the canvas and thresholded at `τ·max α`.
pub fn pr_curve(maps: &[&[f32]], side: usize, masks: &[&[u8]], canvas: usize, thresholds: &[f32]) -> Result<Vec<PrPoint>> {
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(PanError::usage("thresholds must be sorted ascending"));
    }
    if maps.len() != masks.len() {
        return Err(PanError::config("one attention map per mask is required"));
    }
    let tile = canvas / side.max(1);
    let tile_area = (tile * tile) as u64;
    let mut tp = vec![0u64; thresholds.len()];
    let mut predicted = vec![0u64; thresholds.len()];
    let mut positives = 0u64;
    for (map, mask) in maps.iter().zip(masks) {
        let counts: Vec<u64> = pool_mask(mask, canvas, side)?
            .iter()
            .map(|f| (f * tile_area as f64).round() as u64)
            .collect();
        if map.len() != counts.len() {
            return Err(PanError::config("attention map does not match the mask grid"));
        }
        positives += counts.iter().sum::<u64>();
        let max = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        for (t, &tau) in thresholds.iter().enumerate() {
            let cut = tau * max;
            for (&a, &c) in map.iter().zip(&counts) {
                if a >= cut {
                    predicted[t] += tile_area;
                    tp[t] += c;
                }
            }
        }
    }
    Ok(thresholds
        .iter()
        .enumerate()
        .map(|(t, &threshold)| PrPoint {
            threshold,
            precision: if predicted[t] == 0 { 1.0 } else { tp[t] as f64 / predicted[t] as f64 },
            recall: if positives == 0 { 0.0 } else { tp[t] as f64 / positives as f64 },
            predicted: predicted[t],
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub model: String,
    pub dataset: String,
    pub samples: usize,
    pub accuracy: f64,
    pub buckets: Vec<BucketAccuracy>,
    pub tpr: f64,
    pub uniform_tpr: f64,
    pub pr_curve: Vec<PrPoint>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn buckets_csv(&self) -> String {
        let mut out = String::from("lo,hi,count,accuracy\n");
        for b in &self.buckets {
            let acc = b.accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
            out.push_str(&format!("{},{},{},{acc}\n", b.lo, b.hi, b.count));
        }
        out
    }

    pub fn pr_csv(&self) -> String {
        let mut out = String::from("threshold,precision,recall,predicted\n");
        for p in &self.pr_curve {
            out.push_str(&format!("{:.2},{:.6},{:.6},{}\n", p.threshold, p.precision, p.recall, p.predicted));
        }
        out
    }

    pub fn bucket_gap(&self) -> Option<f64> {
        bucket_gap(&self.buckets)
    }
}

/// All metrics of `model` on `archive`.
pub fn evaluate(model: &Model, archive: &Archive, model_id: &str, dataset_id: &str, threads: usize) -> Result<MetricsReport> {
    if archive.canvas != model.config.input_size {
        return Err(PanError::config(format!(
            "archive canvas {} does not match model input {}",
            archive.canvas, model.config.input_size
        )));
    }
    let out = predict(model, &archive.samples, 64, threads)?;
    let labels: Vec<usize> = archive.samples.iter().map(|s| s.color_label as usize).collect();
    let scales: Vec<f32> = archive.samples.iter().map(|s| s.scale).collect();
    let mut tpr_sum = 0.0;
    for (i, s) in archive.samples.iter().enumerate() {
        let pooled = pool_mask(&s.mask, archive.canvas, out.side)?;
        tpr_sum += tpr(out.map(i), &pooled)?;
    }
    let maps: Vec<&[f32]> = (0..archive.samples.len()).map(|i| out.map(i)).collect();
    let masks: Vec<&[u8]> = archive.samples.iter().map(|s| s.mask.as_slice()).collect();
    Ok(MetricsReport {
        model: model_id.to_string(),
        dataset: dataset_id.to_string(),
        samples: archive.samples.len(),
        accuracy: accuracy(&out.predictions, &labels),
        buckets: scale_bucket_accuracy(&out.predictions, &labels, &scales).to_vec(),
        tpr: tpr_sum / archive.samples.len() as f64,
        uniform_tpr: uniform_tpr(&archive.samples, out.side)?,
        pr_curve: pr_curve(&maps, out.side, &masks, archive.canvas, &default_thresholds())?,
    })
}
