//! Accuracy measurements.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::tensor::Tensor;

/// Percentage of rows of `x` classified as `labels`.
pub fn accuracy_on(clf: &dyn Classifier, x: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::invalid("cannot measure accuracy on an empty set"));
    }
    let pred = clf.predict(x)?;
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

pub fn clean_accuracy(clf: &dyn Classifier, data: &Dataset) -> Result<f64> {
    accuracy_on(clf, &data.images, &data.labels)
}

/// Transfer examples for every (source, algorithm) cell on one evaluation
/// set. `None` marks an inapplicable cell.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalAttacks {
    pub sources: Vec<String>,
    pub algorithms: Vec<String>,
    pub cells: Vec<Vec<Option<Tensor>>>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyGrid {
    pub target: String,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
    pub samples: usize,
}

/// Accuracy of `target` on every applicable cell. The target must not be
/// one of the sources.
pub fn eval_grid(target_id: &str, target: &dyn Classifier, attacks: &EvalAttacks) -> Result<AccuracyGrid> {
    if attacks.sources.iter().any(|s| s == target_id) {
        return Err(Error::invalid(format!("target `{target_id}` is among the attack sources")));
    }
    let flat: Vec<&Option<Tensor>> = attacks.cells.iter().flatten().collect();
    let vals = flat
        .par_iter()
        .map(|c| match c {
            Some(x) => accuracy_on(target, x, &attacks.labels).map(Some),
            None => Ok(None),
        })
        .collect::<Result<Vec<_>>>()?;
    let width = attacks.algorithms.len();
    Ok(AccuracyGrid {
        target: target_id.to_string(),
        rows: attacks.sources.clone(),
        cols: attacks.algorithms.clone(),
        values: vals.chunks(width.max(1)).map(|c| c.to_vec()).collect(),
        samples: attacks.labels.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
    pub source: String,
    pub algorithm: String,
    pub value: f64,
}

impl AccuracyGrid {
    pub fn from_values(rows: Vec<String>, cols: Vec<String>, values: Vec<Vec<Option<f64>>>) -> Result<Self> {
        if values.len() != rows.len() || values.iter().any(|r| r.len() != cols.len()) {
            return Err(Error::invalid("grid labels do not match its shape"));
        }
        Ok(AccuracyGrid {
            target: String::new(),
            rows,
            cols,
            values,
            samples: 0,
        })
    }

    fn cell(&self, i: usize, j: usize, v: f64) -> Cell {
        Cell {
            row: i,
            col: j,
            source: self.rows[i].clone(),
            algorithm: self.cols[j].clone(),
            value: v,
        }
    }

    /// Minimum over the cells accepted by `keep`, ties toward the lowest
    /// row then column.
    fn min_where(&self, keep: impl Fn(usize, usize) -> bool) -> Option<Cell> {
        let mut best: Option<Cell> = None;
        for (i, row) in self.values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if let Some(v) = *v {
                    if keep(i, j) && best.as_ref().is_none_or(|b| v < b.value) {
                        best = Some(self.cell(i, j, v));
                    }
                }
            }
        }
        best
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["source".to_string()];
        header.extend(self.cols.iter().cloned());
        w.write_record(&header)?;
        for (id, row) in self.rows.iter().zip(&self.values) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| match v {
                Some(v) => format!("{v:.2}"),
                None => NA.to_string(),
            }));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Sentinel written for inapplicable cells.
pub const NA: &str = "n/a";

/// The most successful attack: the minimum applicable cell.
pub fn worst_case(grid: &AccuracyGrid) -> Result<Cell> {
    grid.min_where(|_, _| true)
        .ok_or_else(|| Error::invalid("every grid cell is not applicable"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeenUnseenReport {
    pub seen_src_seen_algo: Option<Cell>,
    pub unseen_src_seen_algo: Option<Cell>,
    pub seen_src_unseen_algo: Option<Cell>,
    pub unseen_src_unseen_algo: Option<Cell>,
    pub global: Cell,
}

impl SeenUnseenReport {
    pub fn populated(&self) -> Vec<&Cell> {
        [
            &self.seen_src_seen_algo,
            &self.unseen_src_seen_algo,
            &self.seen_src_unseen_algo,
            &self.unseen_src_unseen_algo,
        ]
        .into_iter()
        .flatten()
        .collect()
    }

    /// Seen-by-seen worst case minus unseen-by-unseen worst case, when both
    /// cells exist.
    pub fn gap(&self) -> Option<f64> {
        Some(self.seen_src_seen_algo.as_ref()?.value - self.unseen_src_unseen_algo.as_ref()?.value)
    }
}

/// Worst case within each partition induced by the sources and algorithms
/// that appear in `trained` (pairs of row id and column id).
pub fn seen_unseen(grid: &AccuracyGrid, trained: &[(String, String)]) -> Result<SeenUnseenReport> {
    for (s, a) in trained {
        if !grid.rows.contains(s) || !grid.cols.contains(a) {
            return Err(Error::invalid(format!("trained pair ({s}, {a}) is not a grid cell")));
        }
    }
    let src: Vec<bool> = grid.rows.iter().map(|r| trained.iter().any(|(s, _)| s == r)).collect();
    let alg: Vec<bool> = grid.cols.iter().map(|c| trained.iter().any(|(_, a)| a == c)).collect();
    let part = |ss: bool, sa: bool| grid.min_where(|i, j| src[i] == ss && alg[j] == sa);
    Ok(SeenUnseenReport {
        seen_src_seen_algo: part(true, true),
        unseen_src_seen_algo: part(false, true),
        seen_src_unseen_algo: part(true, false),
        unseen_src_unseen_algo: part(false, false),
        global: worst_case(grid)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn grid(values: Vec<Vec<Option<f64>>>) -> AccuracyGrid {
        let rows = (0..values.len()).map(|i| format!("s{i}")).collect();
        let cols = (0..values[0].len()).map(|j| format!("a{j}")).collect();
        AccuracyGrid::from_values(rows, cols, values).unwrap()
    }

    #[test]
    fn worst_case_example() {
        let g = grid(vec![vec![Some(70.0), Some(60.0)], vec![Some(90.0), Some(80.0)]]);
        let c = worst_case(&g).unwrap();
        assert_eq!((c.row, c.col, c.value), (0, 1, 60.0));
    }

    #[test]
    fn worst_case_ties_and_na() {
        let g = grid(vec![vec![Some(5.0), Some(5.0)], vec![Some(5.0), Some(5.0)]]);
        let c = worst_case(&g).unwrap();
        assert_eq!((c.row, c.col), (0, 0));
        let g = grid(vec![vec![None, Some(9.0)], vec![Some(3.0), None]]);
        assert_eq!(worst_case(&g).unwrap().value, 3.0);
        assert!(worst_case(&grid(vec![vec![None]])).is_err());
    }

    #[test]
    fn seen_unseen_partitions() {
        let g = grid(vec![vec![Some(50.0), Some(40.0)], vec![Some(30.0), Some(20.0)]]);
        let all: Vec<(String, String)> = g
            .rows
            .iter()
            .flat_map(|r| g.cols.iter().map(move |c| (r.clone(), c.clone())))
            .collect();
        let rep = seen_unseen(&g, &all).unwrap();
        assert_eq!(rep.populated().len(), 1);
        assert_eq!(rep.seen_src_seen_algo.as_ref().unwrap().value, 20.0);

        let rep = seen_unseen(&g, &[]).unwrap();
        assert_eq!(rep.populated().len(), 1);
        assert_eq!(rep.unseen_src_unseen_algo.as_ref().unwrap().value, rep.global.value);

        let rep = seen_unseen(&g, &[("s0".into(), "a0".into())]).unwrap();
        assert_eq!(rep.seen_src_seen_algo.as_ref().unwrap().value, 50.0);
        assert_eq!(rep.seen_src_unseen_algo.as_ref().unwrap().value, 40.0);
        assert_eq!(rep.unseen_src_seen_algo.as_ref().unwrap().value, 30.0);
        assert_eq!(rep.unseen_src_unseen_algo.as_ref().unwrap().value, 20.0);
        let min = rep.populated().iter().map(|c| c.value).fold(f64::INFINITY, f64::min);
        assert_eq!(min, rep.global.value);
        assert_eq!(rep.gap(), Some(30.0));
        assert!(seen_unseen(&g, &[("zz".into(), "a0".into())]).is_err());
    }

    #[test]
    fn grid_rejects_target_among_sources() {
        struct Const;
        impl Classifier for Const {
            fn classes(&self) -> usize {
                4
            }
            fn input_shape(&self) -> [usize; 3] {
                [1, 1, 1]
            }
            fn logits(&self, x: &Tensor) -> Result<Tensor> {
                Ok(Tensor::zeros(&[x.rows(), 4]))
            }
            fn input_gradient(
                &self,
                x: &Tensor,
                _: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
            ) -> Result<(Tensor, Tensor)> {
                Ok((self.logits(x)?, Tensor::zeros(x.shape())))
            }
        }
        let x = Tensor::zeros(&[4, 1, 1, 1]);
        let attacks = EvalAttacks {
            sources: ids(&["t", "u"]),
            algorithms: ids(&["pgd"]),
            cells: vec![vec![Some(x.clone())], vec![None]],
            labels: vec![0, 1, 2, 3],
        };
        assert!(eval_grid("t", &Const, &attacks).is_err());
        let g = eval_grid("v", &Const, &attacks).unwrap();
        assert_eq!(g.values, vec![vec![Some(25.0)], vec![None]]);
        let mut swapped = attacks.clone();
        swapped.sources.reverse();
        swapped.cells.reverse();
        let h = eval_grid("v", &Const, &swapped).unwrap();
        assert_eq!(h.values, vec![vec![None], vec![Some(25.0)]]);
        let x_empty = Tensor::zeros(&[0, 1, 1, 1]);
        assert!(accuracy_on(&Const, &x_empty, &[]).is_err());
    }
}
