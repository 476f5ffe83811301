//! Central finite differences, used as the oracle for `Tape::backward`.

use super::Tensor;

/// Default step for [`numeric_gradient`].
pub const DEFAULT_STEP: f32 = 1e-3;

/// `(f(x + h·e_i) - f(x - h·e_i)) / 2h` for every coordinate `i`.
///
/// Panics if `h` is not positive.
pub fn numeric_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f32) -> Tensor {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        // the perturbed values are rounded to f32, so divide by the step actually taken
        let step = (orig + h) as f64 - (orig - h) as f64;
        grad.push(((up - down) / step) as f32);
    }
    Tensor::new(x.shape(), grad).expect("same shape")
}

/// Norm-wise relative error `‖a − b‖ / (‖a‖ + ‖b‖)`, 0 when both vanish.
pub fn relative_error(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na + nb == 0.0 {
        0.0
    } else {
        diff / (na + nb)
    }
}

/// Largest elementwise gap `|a_i − b_i| / max(|a_i|, |b_i|, floor)`.
pub fn max_elementwise_error(a: &[f32], b: &[f32], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let (x, y) = (x as f64, y as f64);
            (x - y).abs() / x.abs().max(y.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn gradient_of_sum_is_all_ones() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f32 * 0.3 - 0.7);
        let g = numeric_gradient(|t| t.sum(), &x, DEFAULT_STEP);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn gradient_of_sigmoid_sum_at_zero_is_quarter() {
        let x = Tensor::zeros(&[5]);
        let g = numeric_gradient(
            |t| {
                let mut tape = Tape::new();
                let v = tape.constant(t.clone());
                let s = tape.sigmoid(v);
                tape.value(s).sum()
            },
            &x,
            DEFAULT_STEP,
        );
        for v in g.data() {
            assert!((v - 0.25).abs() < 1e-5, "{v}");
        }
    }

    #[test]
    fn relative_error_is_zero_for_identical_vectors() {
        assert_eq!(relative_error(&[1.0, -2.0], &[1.0, -2.0]), 0.0);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!(relative_error(&[1.0], &[-1.0]) > 0.99);
    }
}
