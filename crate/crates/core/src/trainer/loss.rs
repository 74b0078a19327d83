//! Softmax cross-entropy plus smooth-L1 box regression.

use crate::nets::tensor::{softmax, Matrix};

/// `0.5·x²` inside `|x| < 1`, `|x| − 0.5` outside.
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Mean cross-entropy over all examples.
    pub cls: f64,
    /// Mean smooth-L1 (summed over the 4 coordinates) over foreground examples.
    pub reg: f64,
    /// `cls + λ·reg`.
    pub total: f64,
    /// Unnormalized `CE_i + λ·smoothL1_i` per example.
    pub per_example: Vec<f64>,
    pub d_logits: Matrix,
    pub d_deltas: Vec<[f64; 4]>,
}

/// Multi-task detection loss over `n` index-aligned examples.
///
/// `delta_targets[i]` is `Some` exactly for foreground examples; regression is
/// evaluated only there. With no foreground the regression term is 0.
pub fn multitask_loss(
    logits: &Matrix,
    cls_targets: &[usize],
    deltas: &[[f64; 4]],
    delta_targets: &[Option<[f64; 4]>],
    lambda: f64,
) -> LossOutput {
    let n = logits.rows;
    assert_eq!(cls_targets.len(), n);
    assert_eq!(deltas.len(), n);
    assert_eq!(delta_targets.len(), n);
    let n_fg = delta_targets.iter().filter(|t| t.is_some()).count();
    let mut d_logits = Matrix::zeros(n, logits.cols);
    let mut d_deltas = vec![[0.0; 4]; n];
    let mut per_example = vec![0.0; n];
    let (mut cls, mut reg) = (0.0, 0.0);
    for i in 0..n {
        let p = softmax(logits.row(i));
        let t = cls_targets[i];
        let ce = -p[t].max(f64::MIN_POSITIVE).ln();
        cls += ce;
        per_example[i] = ce;
        let g = d_logits.row_mut(i);
        for (k, (gk, pk)) in g.iter_mut().zip(&p).enumerate() {
            *gk = (pk - if k == t { 1.0 } else { 0.0 }) / n as f64;
        }
        if let Some(target) = delta_targets[i] {
            let mut l = 0.0;
            for j in 0..4 {
                let diff = deltas[i][j] - target[j];
                l += smooth_l1(diff);
                d_deltas[i][j] = lambda * smooth_l1_grad(diff) / n_fg as f64;
            }
            reg += l;
            per_example[i] += lambda * l;
        }
    }
    let cls = if n > 0 { cls / n as f64 } else { 0.0 };
    let reg = if n_fg > 0 { reg / n_fg as f64 } else { 0.0 };
    LossOutput {
        cls,
        reg,
        total: cls + lambda * reg,
        per_example,
        d_logits,
        d_deltas,
    }
}
