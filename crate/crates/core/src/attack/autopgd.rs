//! Step-size control with momentum and best-iterate restarts.

use super::{check_finite, objective_grad, AttackConfig};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::tensor::Tensor;
use crate::transforms;

/// Checkpoint iterations `ceil(p_j * steps)` for `p_0 = 0`, `p_1 = 0.22`,
/// `p_{j+1} = p_j + max(p_j - p_{j-1} - 0.03, 0.06)`.
pub fn autopgd_checkpoints(steps: usize) -> Vec<usize> {
    let mut ps: Vec<f64> = vec![0.0, 0.22];
    loop {
        let n = ps.len();
        let next = ps[n - 1] + (ps[n - 1] - ps[n - 2] - 0.03).max(0.06);
        if next > 1.0 {
            break;
        }
        ps.push(next);
    }
    let mut out: Vec<usize> = ps.iter().map(|p| (p * steps as f64 - 1e-9).ceil() as usize).collect();
    out.dedup();
    out.retain(|&w| w < steps || w == 0);
    out
}

/// Step-size multipliers implied by a loss history (`history[k]` is the loss
/// at iterate `k`). The multiplier halves at a checkpoint when fewer than
/// `rho` of the steps since the previous checkpoint improved the loss.
pub fn autopgd_schedule(steps: usize, history: &[f64], rho: f64) -> Result<Vec<f64>> {
    if steps < 4 {
        return Err(Error::invalid("the schedule needs at least 4 steps"));
    }
    if history.len() != steps + 1 {
        return Err(Error::invalid(format!(
            "history must hold {} losses, got {}",
            steps + 1,
            history.len()
        )));
    }
    let cps = autopgd_checkpoints(steps);
    let mut m = 1.0;
    let mut out = Vec::with_capacity(steps);
    let mut last = 0;
    for k in 0..steps {
        if k > 0 && cps.contains(&k) {
            let improved = (last..k).filter(|&i| history[i + 1] > history[i]).count();
            if (improved as f64) < rho * (k - last) as f64 {
                m *= 0.5;
            }
            last = k;
        }
        out.push(m);
    }
    Ok(out)
}

fn sign_step(x: &Tensor, g: &Tensor, eta: &[f64]) -> Tensor {
    let mut z = x.clone();
    for i in 0..z.rows() {
        let gi = g.row(i);
        for (v, d) in z.row_mut(i).iter_mut().zip(gi) {
            *v += eta[i] * d.signum();
        }
    }
    z
}

pub(super) fn run(
    cfg: &AttackConfig,
    src: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    start: Tensor,
) -> Result<Tensor> {
    let n = x.rows();
    let alpha = cfg.params.apgd_alpha;
    let rho = cfg.params.apgd_rho;
    let cps = autopgd_checkpoints(cfg.steps);
    let mut eta = vec![cfg.step(); n];

    let (mut g, mut f) = objective_grad(cfg, src, &start, labels)?;
    check_finite(&g, 0)?;
    let mut best = start.clone();
    let mut best_f = f.clone();
    let mut best_g = g.clone();
    let mut prev = start.clone();
    let mut cur = sign_step(&start, &g, &eta);
    transforms::project_linf(&mut cur, x, cfg.eps);
    let mut prev_f = f.clone();
    let mut improved = vec![0usize; n];
    let mut last_cp = 0;

    for k in 1..=cfg.steps {
        (g, f) = objective_grad(cfg, src, &cur, labels)?;
        check_finite(&g, k)?;
        for i in 0..n {
            if f[i] > prev_f[i] {
                improved[i] += 1;
            }
            if f[i] > best_f[i] {
                best_f[i] = f[i];
                best.row_mut(i).copy_from_slice(cur.row(i));
                best_g.row_mut(i).copy_from_slice(g.row(i));
            }
        }
        prev_f = f.clone();
        if k == cfg.steps {
            break;
        }
        if cps.contains(&k) {
            for i in 0..n {
                if (improved[i] as f64) < rho * (k - last_cp) as f64 {
                    eta[i] *= 0.5;
                    cur.row_mut(i).copy_from_slice(best.row(i));
                    prev.row_mut(i).copy_from_slice(best.row(i));
                    g.row_mut(i).copy_from_slice(best_g.row(i));
                }
                improved[i] = 0;
            }
            last_cp = k;
        }
        let mut z = sign_step(&cur, &g, &eta);
        transforms::project_linf(&mut z, x, cfg.eps);
        let mut next = cur.clone();
        for ((nv, (&c, &zv)), &p) in next
            .data_mut()
            .iter_mut()
            .zip(cur.data().iter().zip(z.data()))
            .zip(prev.data())
        {
            *nv = c + alpha * (zv - c) + (1.0 - alpha) * (c - p);
        }
        transforms::project_linf(&mut next, x, cfg.eps);
        prev = std::mem::replace(&mut cur, next);
    }
    Ok(best)
}
