//! Feature-level attack: attribution-weighted feature deviation.

use crate::error::{Error, Result};
use crate::model::Network;
use crate::tensor::Tensor;

/// Average of `d z_y / d a` over `n` points `(k/n) * x_clean`, `k = 1..=n`,
/// where `a` is the feature-tap activation.
pub fn na_weights(net: &Network, x_clean: &Tensor, labels: &[usize], n: usize) -> Result<Tensor> {
    if n < 1 {
        return Err(Error::invalid("integration steps must be at least 1"));
    }
    let mut acc: Option<Tensor> = None;
    for k in 1..=n {
        let xk = x_clean.map(|v| v * k as f64 / n as f64);
        let g = net.class_logit_feature_grad(&xk, labels)?;
        match acc.as_mut() {
            Some(a) => a.add_assign(&g),
            None => acc = Some(g),
        }
    }
    let mut w = acc.unwrap();
    w.scale_in_place(1.0 / n as f64);
    Ok(w)
}

/// `-sum(w * (a - a_clean))`.
pub fn weighted_deviation(w: &Tensor, a: &Tensor, a_clean: &Tensor) -> f64 {
    -w.data()
        .iter()
        .zip(a.data().iter().zip(a_clean.data()))
        .map(|(w, (a, c))| w * (a - c))
        .sum::<f64>()
}

/// The feature-level objective at `x` for clean inputs `x_clean`.
pub fn feature_attack_loss(
    net: &Network,
    x: &Tensor,
    x_clean: &Tensor,
    labels: &[usize],
    n: usize,
) -> Result<f64> {
    let w = na_weights(net, x_clean, labels, n)?;
    Ok(weighted_deviation(&w, &net.features(x)?, &net.features(x_clean)?))
}

/// Gradient of the objective with respect to `x` for fixed weights.
pub(super) fn feature_loss_grad(net: &Network, x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (_, g) = net.feature_input_grad(x, w)?;
    Ok(g.map(|v| -v))
}
