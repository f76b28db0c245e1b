//! Sigmoid binary cross-entropy on logits, optionally weighted per cell.

use ndarray::{Array2, Zip};

fn cell(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean BCE over all cells and its gradient with respect to the logits.
pub fn bce_with_logits(logits: &Array2<f64>, targets: &Array2<f64>) -> (f64, Array2<f64>) {
    assert_eq!(logits.dim(), targets.dim());
    let n = logits.len() as f64;
    let mut sum = 0.0;
    Zip::from(logits).and(targets).for_each(|&x, &y| sum += cell(x, y));
    let grad = Zip::from(logits)
        .and(targets)
        .map_collect(|&x, &y| (sigmoid(x) - y) / n);
    (sum / n, grad)
}

/// `Σ m·l / Σ m`. Zero-weight cells contribute neither loss nor gradient;
/// with every weight 1 this is bit-identical to [`bce_with_logits`].
pub fn masked_bce_with_logits(logits: &Array2<f64>, targets: &Array2<f64>, mask: &Array2<f64>) -> (f64, Array2<f64>) {
    assert_eq!(logits.dim(), targets.dim());
    assert_eq!(logits.dim(), mask.dim());
    let mut sum = 0.0;
    let mut n = 0.0;
    Zip::from(logits).and(targets).and(mask).for_each(|&x, &y, &m| {
        if m != 0.0 {
            sum += m * cell(x, y);
            n += m;
        }
    });
    if n == 0.0 {
        return (0.0, Array2::zeros(logits.dim()));
    }
    let grad =
        Zip::from(logits)
            .and(targets)
            .and(mask)
            .map_collect(|&x, &y, &m| if m != 0.0 { m * (sigmoid(x) - y) / n } else { 0.0 });
    (sum / n, grad)
}
