use pan_core::evaluation::{
    accuracy, bucket_gap, default_thresholds, pool_mask, pr_curve, scale_bucket, scale_bucket_accuracy, tpr,
};
use pan_core::models::ForwardResult;
use pan_core::{PanError, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn accuracy_examples() {
    assert_eq!(accuracy(&[0, 1, 2, 3], &[0, 1, 2, 3]), 1.0);
    assert_eq!(accuracy(&[0, 1, 2, 3], &[0, 1, 0, 0]), 0.5);
    assert_eq!(accuracy(&[], &[]), 0.0);
}

#[test]
fn uniform_random_predictor_scores_a_fifth() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let labels: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..5)).collect();
    let guesses: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..5)).collect();
    let acc = accuracy(&guesses, &labels);
    assert!((acc - 0.2).abs() <= 0.02, "{acc}");
}

#[test]
fn argmax_ties_go_to_the_lower_index() {
    let r = ForwardResult {
        logits: Tensor::zeros(&[2, 5]),
        probabilities: Tensor::new(&[2, 5], vec![0.1, 0.3, 0.3, 0.2, 0.1, 0.2, 0.2, 0.2, 0.2, 0.2]).unwrap(),
        attention_maps: vec![Tensor::full(&[2, 1, 6, 6], 1.0 / 36.0)],
        attended_feature: Tensor::zeros(&[2, 32]),
    };
    assert_eq!(r.predictions(), [1, 0]);
}

#[test]
fn scale_buckets_are_half_open_with_a_closed_top() {
    assert_eq!(scale_bucket(0.5), Some(0));
    assert_eq!(scale_bucket(0.99), Some(0));
    assert_eq!(scale_bucket(1.0), Some(1));
    assert_eq!(scale_bucket(2.5), Some(4));
    assert_eq!(scale_bucket(3.0), Some(4));
    assert_eq!(scale_bucket(0.4), None);
    assert_eq!(scale_bucket(3.01), None);

    let b = scale_bucket_accuracy(&[1, 1, 0], &[1, 0, 0], &[0.7, 0.7, 0.7]);
    assert_eq!(b[0].count, 3);
    assert!((b[0].accuracy.unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert!(b[1..].iter().all(|x| x.count == 0 && x.accuracy.is_none()));
    assert_eq!(bucket_gap(&b), Some(0.0));

    let b = scale_bucket_accuracy(&[1, 0, 2], &[1, 1, 2], &[0.6, 1.2, 2.9]);
    assert_eq!(bucket_gap(&b), Some(1.0));
    assert_eq!(bucket_gap(&scale_bucket_accuracy(&[], &[], &[])), None);
}

fn mask_with_cells(cells: &[usize], canvas: usize, side: usize) -> Vec<u8> {
    let tile = canvas / side;
    let mut mask = vec![0u8; canvas * canvas];
    for &c in cells {
        let (cy, cx) = (c / side, c % side);
        for y in cy * tile..(cy + 1) * tile {
            for x in cx * tile..(cx + 1) * tile {
                mask[y * canvas + x] = 255;
            }
        }
    }
    mask
}

#[test]
fn tpr_examples() {
    let mask = mask_with_cells(&[7], 96, 6);
    let pooled = pool_mask(&mask, 96, 6).unwrap();
    assert_eq!(pooled[7], 1.0);
    assert_eq!(pooled.iter().sum::<f64>(), 1.0);
    let mut one_hot = vec![0.0f32; 36];
    one_hot[7] = 1.0;
    assert_eq!(tpr(&one_hot, &pooled).unwrap(), 1.0);
    one_hot.swap(7, 8);
    assert_eq!(tpr(&one_hot, &pooled).unwrap(), 0.0);
    let uniform = vec![1.0 / 36.0; 36];
    assert!((tpr(&uniform, &pooled).unwrap() - 1.0 / 36.0).abs() < 1e-7);

    // a quarter-filled cell
    let mut partial = vec![0u8; 96 * 96];
    for y in 0..8 {
        for x in 0..8 {
            partial[y * 96 + x] = 255;
        }
    }
    assert_eq!(pool_mask(&partial, 96, 6).unwrap()[0], 0.25);
}

#[test]
fn tpr_rejects_unnormalised_maps() {
    let pooled = vec![0.0; 36];
    let err = tpr(&vec![0.5f32; 36], &pooled).unwrap_err();
    assert!(matches!(err, PanError::Numeric(_)));
    assert_eq!(err.exit_code(), 3);
    assert!(tpr(&[1.0], &pooled).is_err());
    assert!(pool_mask(&[0; 100], 10, 3).is_err());
}

#[test]
fn pr_examples() {
    let canvas = 96;
    let mask = mask_with_cells(&[0, 1, 6], canvas, 6);
    let mut map = vec![0.01f32; 36];
    for c in [0, 1, 6] {
        map[c] = 0.3;
    }
    let total: f32 = map.iter().sum();
    map.iter_mut().for_each(|a| *a /= total);
    let curve = pr_curve(&[&map], 6, &[&mask], canvas, &default_thresholds()).unwrap();
    assert_eq!(curve.len(), 19);
    // 0.01/0.3 ≈ 0.033 is below the first threshold, so the prediction equals the mask throughout
    assert!(curve.iter().all(|p| p.precision == 1.0 && p.recall == 1.0));

    let everything = pr_curve(&[&map], 6, &[&mask], canvas, &[0.0]).unwrap()[0];
    assert_eq!(everything.recall, 1.0);
    assert!((everything.precision - 3.0 / 36.0).abs() < 1e-12);

    let nothing = pr_curve(&[&map], 6, &[&mask], canvas, &[1.5]).unwrap()[0];
    assert_eq!((nothing.precision, nothing.recall, nothing.predicted), (1.0, 0.0, 0));
    assert!(pr_curve(&[&map], 6, &[&mask], canvas, &[0.5, 0.2]).is_err());
}

#[test]
fn random_maps_sit_on_the_mask_fraction_line() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut maps = Vec::new();
    let mut masks = Vec::new();
    for _ in 0..400 {
        let cells: Vec<usize> = (0..36).filter(|_| rng.random_bool(0.2)).collect();
        masks.push(mask_with_cells(&cells, 96, 6));
        let raw: Vec<f32> = (0..36).map(|_| rng.random::<f32>()).collect();
        let s: f32 = raw.iter().sum();
        maps.push(raw.into_iter().map(|a| a / s).collect::<Vec<f32>>());
    }
    let fraction = masks.iter().map(|m| m.iter().filter(|&&v| v > 0).count()).sum::<usize>() as f64
        / (masks.len() * 96 * 96) as f64;
    let maps_ref: Vec<&[f32]> = maps.iter().map(|m| m.as_slice()).collect();
    let masks_ref: Vec<&[u8]> = masks.iter().map(|m| m.as_slice()).collect();
    for p in pr_curve(&maps_ref, 6, &masks_ref, 96, &default_thresholds()).unwrap() {
        if p.predicted > 100_000 {
            assert!((p.precision - fraction).abs() < 0.02, "τ={} precision {} vs {fraction}", p.threshold, p.precision);
        }
    }
}

fn normalised(raw: Vec<f32>) -> Vec<f32> {
    let s: f32 = raw.iter().sum();
    raw.into_iter().map(|a| a / s).collect()
}

proptest! {
    #[test]
    fn tpr_is_permutation_invariant(
        raw in prop::collection::vec(0.01f32..1.0, 36),
        mask in prop::collection::vec(0.0f64..=1.0, 36),
        perm in Just((0..36usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let alpha = normalised(raw);
        let a2: Vec<f32> = perm.iter().map(|&i| alpha[i]).collect();
        let m2: Vec<f64> = perm.iter().map(|&i| mask[i]).collect();
        let x = tpr(&alpha, &mask).unwrap();
        let y = tpr(&a2, &m2).unwrap();
        prop_assert!((x - y).abs() < 1e-9);
        prop_assert!((0.0..=1.0 + 1e-9).contains(&x));
    }

    #[test]
    fn pr_recall_and_predicted_are_non_increasing(
        raws in prop::collection::vec(prop::collection::vec(0.0f32..1.0, 16), 1..5),
        cells in prop::collection::vec(prop::collection::vec(0usize..16, 0..6), 1..5),
    ) {
        let n = raws.len().min(cells.len());
        let maps: Vec<Vec<f32>> = raws[..n].iter().map(|r| normalised(r.iter().map(|a| a + 1e-3).collect())).collect();
        let masks: Vec<Vec<u8>> = cells[..n].iter().map(|c| mask_with_cells(c, 32, 4)).collect();
        let mr: Vec<&[f32]> = maps.iter().map(|m| m.as_slice()).collect();
        let kr: Vec<&[u8]> = masks.iter().map(|m| m.as_slice()).collect();
        let curve = pr_curve(&mr, 4, &kr, 32, &default_thresholds()).unwrap();
        for w in curve.windows(2) {
            prop_assert!(w[1].recall <= w[0].recall);
            prop_assert!(w[1].predicted <= w[0].predicted);
            prop_assert!((0.0..=1.0).contains(&w[0].precision));
        }
    }
}
