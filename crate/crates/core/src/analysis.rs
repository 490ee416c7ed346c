//! Perturbation-subspace diagnostics: group cosine similarity and per-sample
//! PCA explained variance.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Perturbations `x_adv - x` of several attacks on the same samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSet {
    /// One `n x d` tensor per attack, rows aligned across attacks.
    pub deltas: Vec<Tensor>,
    /// Group label of each attack's source model.
    pub groups: Vec<String>,
}

impl PerturbationSet {
    pub fn new(deltas: Vec<Tensor>, groups: Vec<String>) -> Result<Self> {
        if deltas.len() != groups.len() || deltas.is_empty() {
            return Err(Error::invalid("need one group label per attack"));
        }
        let (n, d) = (deltas[0].rows(), deltas[0].row_len());
        if deltas.iter().any(|t| t.rows() != n || t.row_len() != d) {
            return Err(Error::invalid("perturbations differ in shape"));
        }
        Ok(PerturbationSet { deltas, groups })
    }

    pub fn from_pairs(clean: &Tensor, adv: &[Tensor], groups: Vec<String>) -> Result<Self> {
        let deltas = adv
            .iter()
            .map(|a| a.zip_map(clean, |x, c| x - c))
            .collect::<Result<Vec<_>>>()?;
        PerturbationSet::new(deltas, groups)
    }

    pub fn samples(&self) -> usize {
        self.deltas[0].rows()
    }

    /// Distinct groups in first-seen order.
    pub fn group_names(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for g in &self.groups {
            if !out.contains(g) {
                out.push(g.clone());
            }
        }
        out
    }

    /// `attacks x d` matrix of sample `s`.
    pub fn sample_matrix(&self, s: usize) -> Vec<Vec<f64>> {
        self.deltas.iter().map(|t| t.row(s).to_vec()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMatrix {
    pub groups: Vec<String>,
    pub values: Vec<Vec<f64>>,
    /// Zero-norm perturbations left out of the means.
    pub excluded: usize,
}

impl GroupMatrix {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["group".to_string()];
        header.extend(self.groups.iter().cloned());
        w.write_record(&header)?;
        for (g, row) in self.groups.iter().zip(&self.values) {
            let mut rec = vec![g.clone()];
            rec.extend(row.iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn cosine(a: &[f64], b: &[f64], na: f64, nb: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean pairwise cosine similarity between groups, averaged over samples.
/// Within a group, pairs of an attack with itself are skipped.
pub fn cosine_group_matrix(set: &PerturbationSet) -> Result<GroupMatrix> {
    let groups = set.group_names();
    let member: Vec<usize> = set
        .groups
        .iter()
        .map(|g| groups.iter().position(|h| h == g).unwrap_or(0))
        .collect();
    for (gi, g) in groups.iter().enumerate() {
        if member.iter().filter(|&&m| m == gi).count() < 2 {
            return Err(Error::invalid(format!("group `{g}` needs at least two perturbations")));
        }
    }
    let k = groups.len();
    let per_sample: Vec<(Vec<f64>, Vec<usize>, usize)> = (0..set.samples())
        .into_par_iter()
        .map(|s| {
            let rows: Vec<&[f64]> = set.deltas.iter().map(|t| t.row(s)).collect();
            let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
            let mut sum = vec![0.0; k * k];
            let mut cnt = vec![0usize; k * k];
            for a in 0..rows.len() {
                for b in 0..rows.len() {
                    if a == b || norms[a] == 0.0 || norms[b] == 0.0 {
                        continue;
                    }
                    let idx = member[a] * k + member[b];
                    sum[idx] += cosine(rows[a], rows[b], norms[a], norms[b]);
                    cnt[idx] += 1;
                }
            }
            let means = sum.iter().zip(&cnt).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
            let zero = norms.iter().filter(|&&n| n == 0.0).count();
            (means, cnt, zero)
        })
        .collect();
    let mut values = vec![vec![0.0; k]; k];
    for g in 0..k {
        for h in 0..k {
            let used: Vec<f64> = per_sample
                .iter()
                .filter(|(_, c, _)| c[g * k + h] > 0)
                .map(|(m, _, _)| m[g * k + h])
                .collect();
            values[g][h] = if used.is_empty() { 0.0 } else { used.iter().sum::<f64>() / used.len() as f64 };
        }
    }
    // Pair counts are symmetric, so only rounding can break symmetry.
    for g in 0..k {
        for h in g + 1..k {
            let v = 0.5 * (values[g][h] + values[h][g]);
            values[g][h] = v;
            values[h][g] = v;
        }
    }
    Ok(GroupMatrix {
        groups,
        values,
        excluded: per_sample.iter().map(|p| p.2).sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainedVarianceCurve {
    /// Cumulative fraction explained by the first `k + 1` components.
    pub fractions: Vec<f64>,
    /// Set when the centered rows are all zero.
    pub degenerate: bool,
}

/// Centers the rows of `x` (`n x d`).
fn centered(x: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = x.len();
    if n < 2 {
        return Err(Error::invalid("PCA needs at least two rows"));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("PCA rows must share a positive length"));
    }
    let mut m = DMatrix::from_fn(n, d, |i, j| x[i][j]);
    for j in 0..d {
        let mean = m.column(j).mean();
        m.column_mut(j).add_scalar_mut(-mean);
    }
    Ok(m)
}

/// Nonzero-spectrum eigenvalues of the sample covariance, descending. Uses
/// the smaller of the `d x d` covariance and the `n x n` Gram matrix.
pub fn covariance_eigenvalues(x: &[Vec<f64>]) -> Result<Vec<f64>> {
    let m = centered(x)?;
    let n = m.nrows();
    let small = if m.ncols() <= n { m.transpose() * &m } else { &m * m.transpose() };
    let small = small / (n - 1) as f64;
    let mut ev: Vec<f64> = SymmetricEigen::new(small).eigenvalues.iter().map(|v| v.max(0.0)).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    Ok(ev)
}

/// Leading `k` eigenvalues of a symmetric PSD matrix by power iteration
/// with deflation and re-orthogonalization against earlier vectors.
pub fn power_iteration_eigenvalues(a: &DMatrix<f64>, k: usize, iterations: usize) -> Vec<f64> {
    let n = a.nrows();
    let mut vecs: Vec<nalgebra::DVector<f64>> = Vec::new();
    let mut vals = Vec::new();
    for c in 0..k.min(n) {
        let mut v = nalgebra::DVector::from_fn(n, |i, _| 1.0 + ((i * 7 + c * 13) % 11) as f64 / 11.0);
        let mut lambda = 0.0;
        for _ in 0..iterations {
            for u in &vecs {
                let p = u.dot(&v);
                v.axpy(-p, u, 1.0);
            }
            let norm = v.norm();
            if norm == 0.0 {
                break;
            }
            v /= norm;
            let mut w = a * &v;
            for (u, l) in vecs.iter().zip(&vals) {
                let p = u.dot(&v);
                w.axpy(-l * p, u, 1.0);
            }
            lambda = v.dot(&w);
            let wn = w.norm();
            if wn == 0.0 {
                break;
            }
            v = w / wn;
        }
        for u in &vecs {
            let p = u.dot(&v);
            v.axpy(-p, u, 1.0);
        }
        let norm = v.norm();
        if norm > 0.0 {
            v /= norm;
        }
        vals.push(lambda.max(0.0));
        vecs.push(v);
    }
    vals
}

/// Cumulative explained-variance fractions of the centered rows of `x`.
pub fn pca_explained_variance(x: &[Vec<f64>]) -> Result<ExplainedVarianceCurve> {
    let ev = covariance_eigenvalues(x)?;
    let total: f64 = ev.iter().sum();
    if !(total > 1e-300) {
        return Ok(ExplainedVarianceCurve {
            fractions: vec![0.0; ev.len()],
            degenerate: true,
        });
    }
    let mut acc = 0.0;
    let mut fractions: Vec<f64> = ev
        .iter()
        .map(|v| {
            acc += v;
            acc / total
        })
        .collect();
    if let Some(last) = fractions.last_mut() {
        *last = 1.0;
    }
    Ok(ExplainedVarianceCurve {
        fractions,
        degenerate: false,
    })
}

/// Smallest component count reaching `threshold`.
pub fn dims_for_threshold(curve: &ExplainedVarianceCurve, threshold: f64) -> Result<usize> {
    if curve.degenerate {
        return Err(Error::invalid("explained-variance curve is degenerate"));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid(format!("threshold {threshold} is outside (0, 1]")));
    }
    curve
        .fractions
        .iter()
        .position(|&f| f >= threshold)
        .map(|k| k + 1)
        .ok_or_else(|| Error::invalid("threshold is never reached"))
}

/// One curve per sample of `set`.
pub fn per_sample_curves(set: &PerturbationSet) -> Result<Vec<ExplainedVarianceCurve>> {
    (0..set.samples())
        .into_par_iter()
        .map(|s| pca_explained_variance(&set.sample_matrix(s)))
        .collect()
}

/// A single curve over every perturbation row of every sample.
pub fn pooled_curve(set: &PerturbationSet) -> Result<ExplainedVarianceCurve> {
    let rows: Vec<Vec<f64>> = (0..set.samples()).flat_map(|s| set.sample_matrix(s)).collect();
    pca_explained_variance(&rows)
}

pub fn write_curves_csv(path: &Path, curves: &[ExplainedVarianceCurve]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample", "components", "fraction"])?;
    for (s, c) in curves.iter().enumerate() {
        for (k, f) in c.fractions.iter().enumerate() {
            w.write_record([s.to_string(), (k + 1).to_string(), format!("{f:.8}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::rng;

    fn gaussian(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::rng(seed);
        (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(&mut r)).collect()).collect()
    }

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
    }

    #[test]
    fn identical_and_orthogonal_groups() {
        let a = vec![vec![1.0, 0.0], vec![0.0, 2.0]];
        let b = vec![vec![0.0, 1.0], vec![3.0, 0.0]];
        let set = PerturbationSet::new(
            vec![t(&a), t(&a), t(&b), t(&b)],
            ["x", "x", "y", "y"].map(String::from).to_vec(),
        )
        .unwrap();
        let g = cosine_group_matrix(&set).unwrap();
        assert!((g.values[0][0] - 1.0).abs() < 1e-12);
        assert!((g.values[1][1] - 1.0).abs() < 1e-12);
        assert!(g.values[0][1].abs() < 1e-12);
        assert_eq!(g.excluded, 0);
    }

    #[test]
    fn singleton_group_rejected_and_zero_norm_counted() {
        let a = vec![vec![1.0, 0.0]];
        let z = vec![vec![0.0, 0.0]];
        let set = PerturbationSet::new(vec![t(&a), t(&a)], vec!["x".into(), "y".into()]).unwrap();
        assert!(cosine_group_matrix(&set).is_err());
        let set = PerturbationSet::new(vec![t(&a), t(&a), t(&z)], vec!["x".into(); 3]).unwrap();
        let g = cosine_group_matrix(&set).unwrap();
        assert_eq!(g.excluded, 1);
        assert!((g.values[0][0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one_rows() {
        let v = [0.3, -1.0, 2.0, 0.5];
        let rows: Vec<Vec<f64>> = [1.0, -2.0, 0.5, 3.0].iter().map(|s| v.iter().map(|x| x * s).collect()).collect();
        let c = pca_explained_variance(&rows).unwrap();
        assert!((c.fractions[0] - 1.0).abs() < 1e-9);
        assert_eq!(dims_for_threshold(&c, 0.95).unwrap(), 1);
    }

    #[test]
    fn identical_rows_are_degenerate() {
        let c = pca_explained_variance(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert!(c.degenerate);
        assert!(dims_for_threshold(&c, 0.9).is_err());
    }

    #[test]
    fn threshold_examples() {
        let c = ExplainedVarianceCurve {
            fractions: vec![0.5, 0.8, 0.95, 1.0],
            degenerate: false,
        };
        assert_eq!(dims_for_threshold(&c, 0.9).unwrap(), 3);
        assert!(dims_for_threshold(&c, 1.0 + 1e-12).is_err());
    }

    // Finite samples spread the spectrum, so the top components explain
    // more than k/d; the tolerance follows the d = 32, n = 512 spread.
    #[test]
    fn isotropic_curve_is_near_linear() {
        let c = pca_explained_variance(&gaussian(512, 32, 3)).unwrap();
        assert_eq!(c.fractions.len(), 32);
        for (k, f) in c.fractions.iter().enumerate() {
            let lin = (k + 1) as f64 / 32.0;
            assert!((f - lin).abs() <= 0.15, "k={k}: {f}");
            if k + 1 >= 24 {
                assert!((f - lin).abs() / lin <= 0.1, "k={k}: {f}");
            }
        }
    }

    #[test]
    fn eigenvalues_sum_to_total_variance() {
        let x = gaussian(20, 7, 4);
        let ev = covariance_eigenvalues(&x).unwrap();
        let m = centered(&x).unwrap();
        let total = m.iter().map(|v| v * v).sum::<f64>() / 19.0;
        assert!((ev.iter().sum::<f64>() - total).abs() < 1e-8);
        let wide = gaussian(5, 40, 5);
        let ev = covariance_eigenvalues(&wide).unwrap();
        let m = centered(&wide).unwrap();
        let total = m.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((ev.iter().sum::<f64>() - total).abs() < 1e-8);
    }

    #[test]
    fn power_iteration_matches_eigendecomposition() {
        for (d, seed) in [(8, 1), (24, 2), (64, 3)] {
            let x = gaussian(2 * d, d, seed);
            let m = centered(&x).unwrap();
            let cov = m.transpose() * &m / (2 * d - 1) as f64;
            let mut full: Vec<f64> = SymmetricEigen::new(cov.clone()).eigenvalues.iter().copied().collect();
            full.sort_by(|a, b| b.total_cmp(a));
            let k = 4;
            let pi = power_iteration_eigenvalues(&cov, k, 5000);
            for i in 0..k {
                assert!((pi[i] - full[i]).abs() / full[i] < 1e-6, "d={d} i={i}: {} vs {}", pi[i], full[i]);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn curves_are_monotone_and_end_at_one(seed in any::<u64>(), n in 2usize..12, d in 1usize..12) {
            let c = pca_explained_variance(&gaussian(n, d, seed)).unwrap();
            prop_assert!(!c.degenerate);
            prop_assert!(c.fractions[0] > 0.0);
            prop_assert!(c.fractions.windows(2).all(|w| w[0] <= w[1] + 1e-12));
            prop_assert!((c.fractions.last().unwrap() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn group_matrix_is_symmetric(seed in any::<u64>()) {
            let mut r = rng::rng(seed);
            let deltas: Vec<Tensor> = (0..6)
                .map(|_| Tensor::new(vec![3, 5], (0..15).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap())
                .collect();
            let groups = ["a", "a", "b", "b", "c", "c"].map(String::from).to_vec();
            let g = cosine_group_matrix(&PerturbationSet::new(deltas, groups).unwrap()).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert_eq!(g.values[i][j], g.values[j][i]);
                    prop_assert!((-1.0..=1.0).contains(&g.values[i][j]));
                }
            }
        }
    }
}
