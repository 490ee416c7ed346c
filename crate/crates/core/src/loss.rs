//! Classification losses on `[N, C]` logits, per sample, with closed-form
//! gradients. The graph's loss nodes and the attack heads share these.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check(logits: &Tensor, labels: &[usize]) -> Result<usize> {
    if logits.rank() != 2 {
        return Err(Error::invalid(format!(
            "logits must be [N, C], got {:?}",
            logits.shape()
        )));
    }
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::invalid(format!(
            "{} labels for {} logit rows",
            labels.len(),
            n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
    }
    Ok(c)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln()
}

/// Row-wise softmax.
pub fn softmax(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let lse = log_sum_exp(row);
        for z in row.iter_mut() {
            *z = (*z - lse).exp();
        }
    }
    out
}

pub fn cross_entropy_per_sample(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    check(logits, labels)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = logits.row(i);
            log_sum_exp(row) - row[y]
        })
        .collect())
}

/// `softmax(z) - onehot(y)` for every row (gradient of the unaveraged loss).
pub fn cross_entropy_grad(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    check(logits, labels)?;
    let mut g = softmax(logits);
    for (i, &y) in labels.iter().enumerate() {
        g.row_mut(i)[y] -= 1.0;
    }
    Ok(g)
}

/// Indices of the largest, (largest excluding `label`), and third-largest
/// logits. Ties resolve toward the lowest index.
fn dlr_indices(row: &[f64], label: usize) -> (usize, usize, usize) {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let other = order.iter().copied().find(|&i| i != label).unwrap();
    (order[0], other, order[2])
}

/// Difference-of-logits-ratio loss for one sample:
/// `-(z_y - max_{i != y} z_i) / (z_(1) - z_(3))`.
pub fn dlr_loss(logits: &[f64], label: usize) -> Result<f64> {
    if logits.len() < 3 {
        return Err(Error::invalid(format!(
            "DLR loss needs at least 3 classes, got {}",
            logits.len()
        )));
    }
    if label >= logits.len() {
        return Err(Error::invalid(format!("label {label} out of range")));
    }
    let (top, other, third) = dlr_indices(logits, label);
    let den = logits[top] - logits[third];
    if den == 0.0 {
        return Err(Error::DegenerateDlr { row: 0 });
    }
    Ok(-(logits[label] - logits[other]) / den)
}

pub fn dlr_per_sample(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    check(logits, labels)?;
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            dlr_loss(logits.row(i), y).map_err(|e| match e {
                Error::DegenerateDlr { .. } => Error::DegenerateDlr { row: i },
                e => e,
            })
        })
        .collect()
}

/// Per-row gradient of [`dlr_loss`] (a subgradient at ties).
pub fn dlr_grad(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    check(logits, labels)?;
    let mut g = Tensor::zeros(logits.shape());
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        if row.len() < 3 {
            return Err(Error::invalid("DLR loss needs at least 3 classes"));
        }
        let (top, other, third) = dlr_indices(row, y);
        let den = row[top] - row[third];
        if den == 0.0 {
            return Err(Error::DegenerateDlr { row: i });
        }
        let num = row[y] - row[other];
        let gr = g.row_mut(i);
        gr[y] -= 1.0 / den;
        gr[other] += 1.0 / den;
        gr[top] += num / (den * den);
        gr[third] -= num / (den * den);
    }
    Ok(g)
}

/// Converts a label tensor (class indices stored as reals) to indices.
pub fn labels_from_tensor(t: &Tensor, classes: usize) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < classes {
                Ok(v as usize)
            } else {
                Err(Error::invalid(format!(
                    "label value {v} is not a class index below {classes}"
                )))
            }
        })
        .collect()
}

pub fn labels_to_tensor(labels: &[usize]) -> Tensor {
    Tensor::vector(labels.iter().map(|&y| y as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, v: Vec<f64>) -> Tensor {
        let c = v.len() / rows;
        Tensor::new(vec![rows, c], v).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let l = cross_entropy_per_sample(&t(1, vec![0.0; 4]), &[2]).unwrap();
        assert!((l[0] - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn ce_grad_closed_form() {
        let g = cross_entropy_grad(&t(1, vec![0.0, 0.0]), &[0]).unwrap();
        assert_eq!(g.data(), &[-0.5, 0.5]);
    }

    #[test]
    fn ce_is_stable_for_large_logits() {
        let l = cross_entropy_per_sample(&t(1, vec![1000.0, 0.0, -1000.0]), &[0]).unwrap();
        assert!(l[0].is_finite() && l[0] >= 0.0 && l[0] < 1e-12);
    }

    #[test]
    fn dlr_hand_values() {
        assert!((dlr_loss(&[3.0, 1.0, 0.0], 0).unwrap() + 2.0 / 3.0).abs() < 1e-15);
        assert!((dlr_loss(&[1.0, 3.0, 0.0], 0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn dlr_errors() {
        assert!(matches!(
            dlr_loss(&[2.0, 2.0, 2.0], 1),
            Err(Error::DegenerateDlr { .. })
        ));
        assert!(matches!(
            dlr_loss(&[1.0, 0.0], 0),
            Err(Error::InvalidArgument(_))
        ));
        let err = dlr_per_sample(&t(2, vec![3.0, 1.0, 0.0, 5.0, 5.0, 5.0]), &[0, 0]).unwrap_err();
        assert!(matches!(err, Error::DegenerateDlr { row: 1 }));
    }

    #[test]
    fn dlr_grad_matches_central_differences() {
        let z = vec![0.3, 2.1, -0.7, 1.2, 0.05];
        for y in 0..z.len() {
            let g = dlr_grad(&t(1, z.clone()), &[y]).unwrap();
            for k in 0..z.len() {
                let h = 1e-6;
                let mut zp = z.clone();
                zp[k] += h;
                let mut zm = z.clone();
                zm[k] -= h;
                let fd = (dlr_loss(&zp, y).unwrap() - dlr_loss(&zm, y).unwrap()) / (2.0 * h);
                assert!((fd - g.data()[k]).abs() < 1e-7, "y={y} k={k}");
            }
        }
    }

    #[test]
    fn labels_roundtrip_and_validation() {
        let lt = labels_to_tensor(&[0, 3, 1]);
        assert_eq!(labels_from_tensor(&lt, 4).unwrap(), vec![0, 3, 1]);
        assert!(labels_from_tensor(&lt, 3).is_err());
        assert!(labels_from_tensor(&Tensor::vector(vec![0.5]), 3).is_err());
    }
}
