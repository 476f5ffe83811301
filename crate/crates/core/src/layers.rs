//! Parameterised building blocks: 3×3 convolution blocks, the two-layer
//! attention scorer and local-context extraction.

use crate::error::{PanError, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Length of the one-hot query (digit classes 0–9).
pub const QUERY_LEN: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// One-hot digit query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Query(u8);

impl Query {
    pub fn new(digit: u8) -> Result<Self> {
        if (digit as usize) < QUERY_LEN {
            Ok(Query(digit))
        } else {
            Err(PanError::data(format!("query digit {digit} outside 0..10")))
        }
    }

    pub fn digit(self) -> u8 {
        self.0
    }

    pub fn one_hot(self) -> [f32; QUERY_LEN] {
        let mut v = [0.0; QUERY_LEN];
        v[self.0 as usize] = 1.0;
        v
    }

    /// Stacks queries into an N×10 tensor.
    pub fn batch(queries: &[Query]) -> Tensor {
        let mut data = Vec::with_capacity(queries.len() * QUERY_LEN);
        for q in queries {
            data.extend_from_slice(&q.one_hot());
        }
        Tensor::new(&[queries.len(), QUERY_LEN], data).expect("query batch")
    }
}

/// 3×3 convolution (stride 1, pad 1), activation, optional 2×2 max-pool.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
    pub pool: bool,
}

impl ConvBlock {
    pub fn new(in_channels: usize, out_channels: usize, pool: bool) -> Self {
        ConvBlock {
            weight: Tensor::zeros(&[out_channels, in_channels, 3, 3]),
            bias: Tensor::zeros(&[out_channels]),
            activation: Activation::Relu,
            pool,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let w = tape.param(self.weight.clone());
        let b = tape.param(self.bias.clone());
        self.forward_with(tape, input, w, b)
    }

    /// Forward using parameter handles already on the tape.
    pub fn forward_with(&self, tape: &mut Tape, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let c = tape.shape(input).get(1).copied().unwrap_or(0);
        if c != self.in_channels() {
            return Err(PanError::config(format!(
                "conv block expects {} channels, got {c}",
                self.in_channels()
            )));
        }
        let y = tape.conv2d(input, weight, Some(bias), 1, 1)?;
        let y = match self.activation {
            Activation::Relu => tape.relu(y),
            Activation::Sigmoid => tape.sigmoid(y),
        };
        if self.pool {
            tape.maxpool2d(y, 2, 2)
        } else {
            Ok(y)
        }
    }
}

/// Two-layer scorer `s = w2·relu(W1·[context; q] + b1) + b2`, shared across
/// all locations of a feature map.
///
/// `W1` is stored split in two: `context_weight` (hidden×C×k×k, k = 2δ+1)
/// multiplies the neighbourhood, `query_weight` (10×hidden) the query.
/// In the flattened input vector of [`extract_local_context`] the entry for
/// neighbour `(s, t)` and channel `c` sits at `((s·k) + t)·C + c`, followed by
/// the 10 query entries.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead {
    pub context_weight: Tensor,
    pub query_weight: Tensor,
    pub hidden_bias: Tensor,
    pub output_weight: Tensor,
    pub output_bias: Tensor,
    pub radius: usize,
    pub is_final: bool,
}

impl AttentionHead {
    pub fn new(channels: usize, hidden: usize, radius: usize, is_final: bool) -> Self {
        let k = 2 * radius + 1;
        AttentionHead {
            context_weight: Tensor::zeros(&[hidden, channels, k, k]),
            query_weight: Tensor::zeros(&[QUERY_LEN, hidden]),
            hidden_bias: Tensor::zeros(&[hidden]),
            output_weight: Tensor::zeros(&[1, hidden, 1, 1]),
            output_bias: Tensor::zeros(&[1]),
            radius,
            is_final,
        }
    }

    pub fn channels(&self) -> usize {
        self.context_weight.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.context_weight.shape()[0]
    }

    /// Width of the concatenated `[context; query]` input.
    pub fn input_width(&self) -> usize {
        let k = 2 * self.radius + 1;
        k * k * self.channels() + QUERY_LEN
    }

    /// Parameter tensors in canonical order.
    pub fn tensors(&self) -> [&Tensor; 5] {
        [
            &self.context_weight,
            &self.query_weight,
            &self.hidden_bias,
            &self.output_weight,
            &self.output_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 5] {
        [
            &mut self.context_weight,
            &mut self.query_weight,
            &mut self.hidden_bias,
            &mut self.output_weight,
            &mut self.output_bias,
        ]
    }

    /// Flattened first-layer row `h` in `[context; query]` order.
    pub fn first_layer_row(&self, h: usize) -> Vec<f32> {
        let (c, k) = (self.channels(), 2 * self.radius + 1);
        let mut row = vec![0.0; self.input_width()];
        let w = self.context_weight.data();
        for s in 0..k {
            for t in 0..k {
                for ch in 0..c {
                    row[(s * k + t) * c + ch] = w[((h * c + ch) * k + s) * k + t];
                }
            }
        }
        let q = self.query_weight.data();
        let hidden = self.hidden();
        for i in 0..QUERY_LEN {
            row[k * k * c + i] = q[i * hidden + h];
        }
        row
    }

    /// Score map N×1×H×W. `params` are this head's tensors registered on the tape
    /// in [`AttentionHead::tensors`] order.
    pub fn scores_with(
        &self,
        tape: &mut Tape,
        feature: Var,
        query: Var,
        params: &[Var; 5],
    ) -> Result<Var> {
        let (_, c, _, _) = tape.value(feature).dims4()?;
        if c != self.channels() {
            return Err(PanError::config(format!(
                "attention head built for {} channels applied to {c}",
                self.channels()
            )));
        }
        if tape.shape(query).get(1) != Some(&QUERY_LEN) {
            return Err(PanError::config(format!(
                "attention head expects N×{QUERY_LEN} queries, got {:?}",
                tape.shape(query)
            )));
        }
        let [ctx_w, q_w, b1, w2, b2] = *params;
        let local = tape.conv2d(feature, ctx_w, None, 1, self.radius)?;
        let q_proj = tape.fully_connected(query, q_w, Some(b1))?;
        let hidden = tape.add_channel_bias(local, q_proj)?;
        let hidden = tape.relu(hidden);
        tape.conv2d(hidden, w2, Some(b2), 1, 0)
    }

    pub fn register(&self, tape: &mut Tape) -> [Var; 5] {
        self.tensors().map(|t| tape.param(t.clone()))
    }

    pub fn attention_scores(&self, tape: &mut Tape, feature: Var, query: Var) -> Result<Var> {
        let params = self.register(tape);
        self.scores_with(tape, feature, query, &params)
    }
}

/// Neighbourhood `f[s, t]` for `|s − i| ≤ δ`, `|t − j| ≤ δ` of sample `n`,
/// zero-padded, row-major over `(s, t)` with channels contiguous per position.
pub fn extract_local_context(
    feature: &Tensor,
    n: usize,
    i: usize,
    j: usize,
    radius: usize,
) -> Result<Vec<f32>> {
    let (batch, c, h, w) = feature.dims4()?;
    if n >= batch || i >= h || j >= w {
        return Err(PanError::usage(format!(
            "location ({n}, {i}, {j}) outside a {batch}×{h}×{w} feature map"
        )));
    }
    let k = 2 * radius + 1;
    let mut out = vec![0.0; k * k * c];
    for ds in 0..k {
        for dt in 0..k {
            let s = i as isize + ds as isize - radius as isize;
            let t = j as isize + dt as isize - radius as isize;
            if s < 0 || t < 0 || s >= h as isize || t >= w as isize {
                continue;
            }
            for ch in 0..c {
                out[(ds * k + dt) * c + ch] = feature.at4(n, ch, s as usize, t as usize);
            }
        }
    }
    Ok(out)
}

/// Softmax over the grid for the final head, independent sigmoids otherwise.
pub fn normalize_scores(tape: &mut Tape, scores: Var, is_final: bool) -> Result<Var> {
    if is_final {
        tape.spatial_softmax(scores)
    } else {
        Ok(tape.sigmoid(scores))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize], scale: f32) -> Tensor {
        Tensor::from_fn(shape, |i| ((i * 53 % 23) as f32 - 11.0) * scale)
    }

    fn head_with_values(c: usize, radius: usize) -> AttentionHead {
        let mut head = AttentionHead::new(c, 6, radius, false);
        head.context_weight = ramp(head.context_weight.shape(), 0.05);
        head.query_weight = ramp(head.query_weight.shape(), 0.07);
        head.hidden_bias = ramp(&[6], 0.02);
        head.output_weight = ramp(&[1, 6, 1, 1], 0.1);
        head.output_bias = Tensor::new(&[1], vec![0.3]).unwrap();
        head
    }

    /// Per-location definition: build `[context; q]`, apply the MLP directly.
    fn per_location_scores(head: &AttentionHead, feature: &Tensor, query: Query) -> Vec<f32> {
        let (n, _, h, w) = feature.dims4().unwrap();
        let rows: Vec<Vec<f32>> = (0..head.hidden()).map(|r| head.first_layer_row(r)).collect();
        let mut out = Vec::new();
        for s in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let mut input = extract_local_context(feature, s, i, j, head.radius).unwrap();
                    input.extend_from_slice(&query.one_hot());
                    let mut score = head.output_bias.data()[0] as f64;
                    for (r, row) in rows.iter().enumerate() {
                        let pre: f64 = row
                            .iter()
                            .zip(&input)
                            .map(|(&a, &b)| a as f64 * b as f64)
                            .sum::<f64>()
                            + head.hidden_bias.data()[r] as f64;
                        score += pre.max(0.0) * head.output_weight.data()[r] as f64;
                    }
                    out.push(score as f32);
                }
            }
        }
        out
    }

    fn batched_scores(head: &AttentionHead, feature: &Tensor, query: Query) -> Tensor {
        let n = feature.shape()[0];
        let mut tape = Tape::new();
        let f = tape.constant(feature.clone());
        let q = tape.constant(Query::batch(&vec![query; n]));
        let s = head.attention_scores(&mut tape, f, q).unwrap();
        tape.value(s).clone()
    }

    #[test]
    fn local_context_degenerate_radius_is_the_feature() {
        let f = ramp(&[1, 4, 3, 3], 0.1);
        let ctx = extract_local_context(&f, 0, 1, 2, 0).unwrap();
        let expect: Vec<f32> = (0..4).map(|c| f.at4(0, c, 1, 2)).collect();
        assert_eq!(ctx, expect);
    }

    #[test]
    fn local_context_corner_is_zero_padded() {
        let f = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f32 + 1.0);
        let ctx = extract_local_context(&f, 0, 0, 0, 1).unwrap();
        assert_eq!(ctx, vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 4.0, 5.0]);
        assert_eq!(ctx.iter().filter(|&&v| v != 0.0).count(), 4);
    }

    #[test]
    fn local_context_interior_matches_neighbourhood_scan() {
        let f = Tensor::from_fn(&[1, 2, 3, 3], |i| i as f32 * 0.5);
        let ctx = extract_local_context(&f, 0, 1, 1, 1).unwrap();
        let mut expect = Vec::new();
        for s in 0..3 {
            for t in 0..3 {
                for c in 0..2 {
                    expect.push(f.at4(0, c, s, t));
                }
            }
        }
        assert_eq!(ctx, expect);
        assert!(extract_local_context(&f, 0, 3, 0, 1).is_err());
    }

    #[test]
    fn zero_weights_give_output_bias_everywhere() {
        let mut head = AttentionHead::new(3, 4, 1, false);
        head.output_bias = Tensor::new(&[1], vec![-1.25]).unwrap();
        let s = batched_scores(&head, &ramp(&[2, 3, 4, 4], 0.3), Query::new(4).unwrap());
        assert!(s.data().iter().all(|&v| v == -1.25));
    }

    #[test]
    fn identical_columns_give_identical_scores() {
        let head = head_with_values(2, 0);
        let f = Tensor::from_fn(&[1, 2, 3, 4], |i| {
            let row = (i / 4) % 3;
            let col = i % 4;
            (row * 3 + col.min(1)) as f32 * 0.2
        });
        let s = batched_scores(&head, &f, Query::new(1).unwrap());
        for i in 0..3 {
            assert_eq!(s.at4(0, 0, i, 1), s.at4(0, 0, i, 2));
            assert_eq!(s.at4(0, 0, i, 2), s.at4(0, 0, i, 3));
        }
    }

    #[test]
    fn batched_scores_match_per_location_definition() {
        for radius in [0, 1, 2] {
            let head = head_with_values(3, radius);
            let f = ramp(&[2, 3, 5, 4], 0.2);
            let q = Query::new(7).unwrap();
            let batched = batched_scores(&head, &f, q);
            let looped = per_location_scores(&head, &f, q);
            for (a, b) in batched.data().iter().zip(&looped) {
                assert!((a - b).abs() < 1e-5, "radius {radius}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn rejects_width_mismatch() {
        let head = head_with_values(3, 1);
        let mut tape = Tape::new();
        let f = tape.constant(ramp(&[1, 4, 3, 3], 0.1));
        let q = tape.constant(Query::batch(&[Query::new(0).unwrap()]));
        assert!(matches!(head.attention_scores(&mut tape, f, q), Err(PanError::Config(_))));
    }

    #[test]
    fn normalize_scores_examples() {
        let mut tape = Tape::new();
        let flat = tape.constant(Tensor::full(&[1, 1, 6, 6], 2.0));
        let fin = normalize_scores(&mut tape, flat, true).unwrap();
        assert!(tape.value(fin).data().iter().all(|&v| (v - 1.0 / 36.0).abs() < 1e-7));
        let zero = tape.constant(Tensor::zeros(&[1, 1, 6, 6]));
        let gate = normalize_scores(&mut tape, zero, false).unwrap();
        assert!(tape.value(gate).data().iter().all(|&v| v == 0.5));
        let rand = tape.constant(ramp(&[2, 1, 5, 5], 0.6));
        let g = normalize_scores(&mut tape, rand, false).unwrap();
        assert!(tape.value(g).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn conv_block_identity_kernel_relu_without_pool() {
        let mut block = ConvBlock::new(2, 2, false);
        let mut w = Tensor::zeros(&[2, 2, 3, 3]);
        w.data_mut()[4] = 1.0;
        w.data_mut()[(2 + 1) * 9 + 4] = 1.0;
        block.weight = w;
        let x = Tensor::from_fn(&[1, 2, 4, 4], |i| (i % 5) as f32);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = block.forward(&mut tape, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn conv_block_equals_composed_ops() {
        let mut block = ConvBlock::new(3, 4, true);
        block.weight = ramp(&[4, 3, 3, 3], 0.05);
        block.bias = ramp(&[4], 0.1);
        let x = ramp(&[2, 3, 6, 6], 0.2);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = block.forward(&mut tape, xv).unwrap();
        let w = tape.constant(block.weight.clone());
        let b = tape.constant(block.bias.clone());
        let c = tape.conv2d(xv, w, Some(b), 1, 1).unwrap();
        let r = tape.relu(c);
        let p = tape.maxpool2d(r, 2, 2).unwrap();
        assert_eq!(tape.value(y), tape.value(p));
        assert_eq!(tape.value(y).shape(), &[2, 4, 3, 3]);
    }

    #[test]
    fn four_pooled_blocks_halve_96_to_6() {
        let blocks: Vec<ConvBlock> = (0..4)
            .map(|i| ConvBlock::new(if i == 0 { 3 } else { 2 }, 2, true))
            .collect();
        let mut tape = Tape::new();
        let mut x = tape.constant(Tensor::zeros(&[1, 3, 96, 96]));
        let mut sizes = Vec::new();
        for b in &blocks {
            x = b.forward(&mut tape, x).unwrap();
            sizes.push(tape.shape(x)[2]);
        }
        assert_eq!(sizes, vec![48, 24, 12, 6]);
    }

    #[test]
    fn border_zero_map_matches_explicit_padding() {
        // A map whose outer ring is zero, embedded in a larger zero map, scores the
        // same at interior locations: implicit padding equals explicit zeros.
        let head = head_with_values(2, 1);
        let inner = ramp(&[1, 2, 3, 3], 0.2);
        let padded = Tensor::from_fn(&[1, 2, 5, 5], |idx| {
            let (c, i, j) = (idx / 25, (idx / 5) % 5, idx % 5);
            if (1..4).contains(&i) && (1..4).contains(&j) {
                inner.at4(0, c, i - 1, j - 1)
            } else {
                0.0
            }
        });
        let q = Query::new(3).unwrap();
        let a = batched_scores(&head, &inner, q);
        let b = batched_scores(&head, &padded, q);
        for i in 0..3 {
            for j in 0..3 {
                assert!((a.at4(0, 0, i, j) - b.at4(0, 0, i + 1, j + 1)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn query_validation() {
        assert!(Query::new(10).is_err());
        let q = Query::new(9).unwrap();
        assert_eq!(q.one_hot().iter().sum::<f32>(), 1.0);
        assert_eq!(q.one_hot()[9], 1.0);
    }
}
