//! Zero-sum defender/attacker game over a payoff matrix of accuracies.
//!
//! Rows are defender models, columns are attack strategies. The defender
//! maximizes, the attacker minimizes.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval;
use crate::pubdef::{self, AttackCacheSet, DefendedModel, DefenseConfig, WeightingScheme};
use crate::rng;
use crate::model::Classifier;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct PayoffMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl PayoffMatrix {
    /// Checks shape and that every entry is an accuracy in `[0, 100]`.
    pub fn new(rows: Vec<String>, cols: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        check_matrix(&values)?;
        if values.len() != rows.len() || values[0].len() != cols.len() {
            return Err(Error::invalid("payoff labels do not match the matrix shape"));
        }
        if values.iter().flatten().any(|v| !(0.0..=100.0).contains(v)) {
            return Err(Error::invalid("payoff entries must lie in [0, 100]"));
        }
        Ok(PayoffMatrix { rows, cols, values })
    }

    pub fn diagonal_mean(&self) -> f64 {
        let k = self.rows.len().min(self.cols.len());
        (0..k).map(|i| self.values[i][i]).sum::<f64>() / k as f64
    }

    pub fn off_diagonal_mean(&self) -> f64 {
        let mut s = 0.0;
        let mut n = 0;
        for (i, row) in self.values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if i != j {
                    s += v;
                    n += 1;
                }
            }
        }
        s / n.max(1) as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["defender".to_string()];
        header.extend(self.cols.iter().cloned());
        w.write_record(&header)?;
        for (id, row) in self.rows.iter().zip(&self.values) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| format!("{v:.4}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_matrix(r: &[Vec<f64>]) -> Result<()> {
    if r.is_empty() || r[0].is_empty() {
        return Err(Error::invalid("payoff matrix is empty"));
    }
    let n = r[0].len();
    if r.iter().any(|row| row.len() != n) {
        return Err(Error::invalid("payoff matrix rows differ in length"));
    }
    if r.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("payoff matrix has non-finite entries"));
    }
    Ok(())
}

/// Entry `(i, j)` is the accuracy of defender `i` on the cached examples of
/// attack `cols[j]`.
pub fn compute_payoff_matrix(
    defenders: &[(String, &dyn Classifier)],
    cols: &[String],
    attacks: &BTreeMap<String, Tensor>,
    labels: &[usize],
) -> Result<PayoffMatrix> {
    let cells: Vec<(usize, usize)> = (0..defenders.len())
        .flat_map(|i| (0..cols.len()).map(move |j| (i, j)))
        .collect();
    let vals = cells
        .par_iter()
        .map(|&(i, j)| {
            let x = attacks.get(&cols[j]).ok_or_else(|| Error::MissingAttack {
                defender: defenders[i].0.clone(),
                attack: cols[j].clone(),
            })?;
            eval::accuracy_on(defenders[i].1, x, labels)
        })
        .collect::<Result<Vec<_>>>()?;
    let values = vals.chunks(cols.len().max(1)).map(|c| c.to_vec()).collect();
    PayoffMatrix::new(
        defenders.iter().map(|d| d.0.clone()).collect(),
        cols.to_vec(),
        values,
    )
}

/// One defender per pure attack strategy, each trained on the clean data
/// plus that strategy's cached examples only.
pub fn train_simple_game_defenders(
    cache: &AttackCacheSet,
    train: &Dataset,
    cfg: &DefenseConfig,
    seed: u64,
) -> Result<Vec<DefendedModel>> {
    let mut cfg = cfg.clone();
    cfg.scheme = WeightingScheme::All;
    (0..cache.len())
        .into_par_iter()
        .map(|i| {
            let id = format!("simple-{}", cache.caches[i].manifest.spec.id().replace('/', "-"));
            let s = rng::derive_seed(seed, &["simple", &i.to_string()]);
            pubdef::train_pubdef(&id, &cache.subset(&[i]), train, &cfg, s)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub defender: Vec<f64>,
    pub attacker: Vec<f64>,
    pub value: f64,
    /// `max_i (R q)_i - min_j (p^T R)_j`; zero at an exact equilibrium.
    pub gap: f64,
}

impl Equilibrium {
    fn assemble(r: &[Vec<f64>], defender: Vec<f64>, attacker: Vec<f64>) -> Self {
        let lower = col_values(r, &defender).into_iter().fold(f64::INFINITY, f64::min);
        let upper = row_values(r, &attacker).into_iter().fold(f64::NEG_INFINITY, f64::max);
        let value = defender
            .iter()
            .zip(r)
            .map(|(p, row)| p * row.iter().zip(&attacker).map(|(v, q)| v * q).sum::<f64>())
            .sum();
        Equilibrium {
            defender,
            attacker,
            value,
            gap: (upper - lower).max(0.0),
        }
    }

    pub fn write_toml(&self, path: &Path, matrix: &PayoffMatrix) -> Result<()> {
        #[derive(Serialize)]
        struct Sidecar<'a> {
            value: f64,
            gap: f64,
            defenders: &'a [String],
            attacks: &'a [String],
            defender_strategy: &'a [f64],
            attacker_strategy: &'a [f64],
        }
        let s = Sidecar {
            value: self.value,
            gap: self.gap,
            defenders: &matrix.rows,
            attacks: &matrix.cols,
            defender_strategy: &self.defender,
            attacker_strategy: &self.attacker,
        };
        std::fs::write(path, toml::to_string(&s)?)?;
        Ok(())
    }
}

/// `p^T R` per column.
fn col_values(r: &[Vec<f64>], p: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; r[0].len()];
    for (pi, row) in p.iter().zip(r) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += pi * v;
        }
    }
    out
}

/// `R q` per row.
fn row_values(r: &[Vec<f64>], q: &[f64]) -> Vec<f64> {
    r.iter().map(|row| row.iter().zip(q).map(|(v, w)| v * w).sum()).collect()
}

pub fn max_min(r: &[Vec<f64>]) -> f64 {
    r.iter()
        .map(|row| row.iter().copied().fold(f64::INFINITY, f64::min))
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn min_max(r: &[Vec<f64>]) -> f64 {
    (0..r[0].len())
        .map(|j| r.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max))
        .fold(f64::INFINITY, f64::min)
}

/// Pure saddle points `(i, j)`: `R[i][j]` is the minimum of row `i` and the
/// maximum of column `j`.
pub fn pure_saddles(r: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, row) in r.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let row_min = row.iter().all(|&w| v <= w);
            let col_max = r.iter().all(|other| other[j] <= v);
            if row_min && col_max {
                out.push((i, j));
            }
        }
    }
    out
}

/// Exact equilibrium by the simplex method with Bland's rule.
///
/// With `R' = R - min(R) + 1 > 0` the attacker solves
/// `max 1^T w  s.t.  R' w <= 1, w >= 0`; the optimal tableau's slack
/// reduced costs are the defender's dual solution.
pub fn solve_zero_sum_lp(r: &[Vec<f64>]) -> Result<Equilibrium> {
    check_matrix(r)?;
    let m = r.len();
    let n = r[0].len();
    let lo = r.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = r.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = if hi > lo { hi - lo } else { 1.0 };
    // Columns: w_0..w_{n-1}, s_0..s_{m-1}, rhs.
    let width = n + m + 1;
    let mut t = vec![vec![0.0; width]; m + 1];
    for i in 0..m {
        for j in 0..n {
            t[i][j] = (r[i][j] - lo) / scale + 1.0;
        }
        t[i][n + i] = 1.0;
        t[i][width - 1] = 1.0;
    }
    for j in 0..n {
        t[m][j] = -1.0;
    }
    let mut basis: Vec<usize> = (n..n + m).collect();
    let tol = 1e-12;
    loop {
        let Some(enter) = (0..n + m).find(|&j| t[m][j] < -tol) else {
            break;
        };
        let mut leave: Option<usize> = None;
        for i in 0..m {
            if t[i][enter] > tol {
                let ratio = t[i][width - 1] / t[i][enter];
                leave = match leave {
                    None => Some(i),
                    Some(l) => {
                        let best = t[l][width - 1] / t[l][enter];
                        if ratio < best - tol || ((ratio - best).abs() <= tol && basis[i] < basis[l]) {
                            Some(i)
                        } else {
                            Some(l)
                        }
                    }
                };
            }
        }
        let l = leave.ok_or_else(|| Error::invalid("linear program is unbounded"))?;
        let piv = t[l][enter];
        t[l].iter_mut().for_each(|v| *v /= piv);
        let pivot_row = t[l].clone();
        for (i, row) in t.iter_mut().enumerate() {
            if i != l {
                let f = row[enter];
                if f != 0.0 {
                    for (v, p) in row.iter_mut().zip(&pivot_row) {
                        *v -= f * p;
                    }
                }
            }
        }
        basis[l] = enter;
    }
    let mut w = vec![0.0; n];
    for (i, &b) in basis.iter().enumerate() {
        if b < n {
            w[b] = t[i][width - 1];
        }
    }
    let u: Vec<f64> = (0..m).map(|i| t[m][n + i].max(0.0)).collect();
    let normalize = |v: Vec<f64>| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect::<Vec<_>>()
    };
    Ok(Equilibrium::assemble(r, normalize(u), normalize(w)))
}

/// Optimistic multiplicative weights for both players; returns the
/// averaged strategies. Payoffs are rescaled to `[0, 1]` first.
pub fn solve_multiplicative_weights(r: &[Vec<f64>], iterations: usize, learning_rate: f64) -> Result<Equilibrium> {
    check_matrix(r)?;
    if iterations == 0 {
        return Err(Error::invalid("iterations must be at least 1"));
    }
    if !(learning_rate > 0.0) {
        return Err(Error::invalid("learning rate must be positive"));
    }
    let m = r.len();
    let n = r[0].len();
    let lo = r.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = r.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(Equilibrium::assemble(r, vec![1.0 / m as f64; m], vec![1.0 / n as f64; n]));
    }
    let a: Vec<Vec<f64>> = r.iter().map(|row| row.iter().map(|v| (v - lo) / (hi - lo)).collect()).collect();
    let mut cum_p = vec![0.0; m];
    let mut cum_q = vec![0.0; n];
    let mut last_p = vec![0.0; m];
    let mut last_q = vec![0.0; n];
    let mut avg_p = vec![0.0; m];
    let mut avg_q = vec![0.0; n];
    let softmax = |s: &[f64], sign: f64| {
        let top = s.iter().map(|v| sign * v).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (sign * v - top).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect::<Vec<_>>()
    };
    for _ in 0..iterations {
        let sp: Vec<f64> = cum_p.iter().zip(&last_p).map(|(c, l)| learning_rate * (c + l)).collect();
        let sq: Vec<f64> = cum_q.iter().zip(&last_q).map(|(c, l)| learning_rate * (c + l)).collect();
        let p = softmax(&sp, 1.0);
        let q = softmax(&sq, -1.0);
        last_p = row_values(&a, &q);
        last_q = col_values(&a, &p);
        cum_p.iter_mut().zip(&last_p).for_each(|(c, v)| *c += v);
        cum_q.iter_mut().zip(&last_q).for_each(|(c, v)| *c += v);
        avg_p.iter_mut().zip(&p).for_each(|(s, v)| *s += v);
        avg_q.iter_mut().zip(&q).for_each(|(s, v)| *s += v);
    }
    let k = iterations as f64;
    avg_p.iter_mut().for_each(|v| *v /= k);
    avg_q.iter_mut().for_each(|v| *v /= k);
    Ok(Equilibrium::assemble(r, avg_p, avg_q))
}

/// The attacker's best pure response to `defender`: lowest-index column
/// minimizing `p^T R`, and that minimum.
pub fn best_response_value(r: &[Vec<f64>], defender: &[f64]) -> Result<(usize, f64)> {
    check_matrix(r)?;
    if defender.len() != r.len() {
        return Err(Error::invalid("strategy length differs from the number of rows"));
    }
    let s: f64 = defender.iter().sum();
    if defender.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("defender strategy is not on the simplex"));
    }
    let vals = col_values(r, defender);
    let mut best = 0;
    for (j, &v) in vals.iter().enumerate() {
        if v < vals[best] {
            best = j;
        }
    }
    Ok((best, vals[best]))
}
