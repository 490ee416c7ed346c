//! Central-difference verification of analytic gradients.

use std::collections::HashMap;

use rand::seq::index;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph, GraphBuilder, NodeId, Op};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct NodeCheck {
    pub node: NodeId,
    pub name: String,
    pub checked: usize,
    /// Coordinates whose perturbation crosses a kink (relu at 0, DLR order change).
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub nodes: Vec<NodeCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn total_checked(&self) -> usize {
        self.nodes.iter().map(|n| n.checked).sum()
    }

    pub fn total_skipped(&self) -> usize {
        self.nodes.iter().map(|n| n.skipped).sum()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tol: f64,
    /// Coordinates sampled per checked node.
    pub coords_per_node: usize,
    pub seed: u64,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            tol: 1e-4,
            coords_per_node: 100,
            seed: 0,
            floor: 1e-6,
        }
    }
}

/// Piecewise-linear branch taken by every relu / DLR node. A relu input of
/// exactly zero gets its own state, so any perturbation that moves it shows
/// up as a branch change.
fn kink_signature(graph: &Graph, vals: &[Tensor]) -> Vec<u8> {
    let mut sig = Vec::new();
    for op in graph.nodes() {
        match op {
            Op::Relu { input } => {
                for &v in vals[*input].data() {
                    sig.push(if v > 0.0 {
                        2
                    } else if v == 0.0 {
                        1
                    } else {
                        0
                    });
                }
            }
            Op::DlrLoss { logits, .. } => {
                let z = &vals[*logits];
                for i in 0..z.rows() {
                    let row = z.row(i);
                    let mut order: Vec<usize> = (0..row.len()).collect();
                    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                    sig.extend(order.iter().map(|&k| k as u8));
                }
            }
            _ => {}
        }
    }
    sig
}

/// Compares analytic gradients of the graph's designated loss with central
/// differences `(f(x+h) - f(x-h)) / 2h` on a random subset of coordinates of
/// every input and parameter node (label inputs excluded).
pub fn finite_diff_check(
    graph: &Graph,
    bindings: &Bindings,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    if !(cfg.h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let loss = graph
        .loss()
        .ok_or_else(|| Error::invalid("graph has no designated loss"))?;
    let label_nodes: Vec<NodeId> = graph
        .nodes()
        .iter()
        .filter_map(|op| match op {
            Op::SoftmaxCrossEntropy { labels, .. } | Op::DlrLoss { labels, .. } => Some(*labels),
            _ => None,
        })
        .collect();

    let base_vals = graph.evaluate(bindings)?;
    let grads = graph.backward(loss, &base_vals)?;
    let base_sig = kink_signature(graph, &base_vals);

    let mut owned: HashMap<String, Tensor> = bindings
        .iter()
        .map(|(k, v)| (k.to_string(), (*v).clone()))
        .collect();
    let eval_loss = |owned: &HashMap<String, Tensor>| -> Result<(f64, Vec<u8>)> {
        let b: Bindings = owned.iter().map(|(k, v)| (k.as_str(), v)).collect();
        let vals = graph.evaluate(&b)?;
        Ok((vals[loss].item(), kink_signature(graph, &vals)))
    };

    let mut rng = rng::rng(cfg.seed);
    let mut nodes = Vec::new();
    for (id, op) in graph.nodes().iter().enumerate() {
        let name = match op {
            Op::Input { name, .. } | Op::Param { name, .. } if !label_nodes.contains(&id) => {
                name.clone()
            }
            _ => continue,
        };
        let n = base_vals[id].len();
        let Some(analytic) = grads[id].as_ref() else {
            continue;
        };
        let picks = index::sample(&mut rng, n, cfg.coords_per_node.min(n)).into_vec();
        let mut check = NodeCheck {
            node: id,
            name: name.clone(),
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
        };
        for k in picks {
            let orig = owned[&name].data()[k];
            owned.get_mut(&name).unwrap().data_mut()[k] = orig + cfg.h;
            let (fp, sp) = eval_loss(&owned)?;
            owned.get_mut(&name).unwrap().data_mut()[k] = orig - cfg.h;
            let (fm, sm) = eval_loss(&owned)?;
            owned.get_mut(&name).unwrap().data_mut()[k] = orig;
            if sp != base_sig || sm != base_sig {
                check.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.h);
            let a = analytic.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            check.max_rel_error = check.max_rel_error.max(rel);
            check.checked += 1;
        }
        nodes.push(check);
    }
    let max_rel_error = nodes.iter().fold(0.0f64, |m, c| m.max(c.max_rel_error));
    Ok(GradCheckReport {
        passed: max_rel_error < cfg.tol,
        nodes,
        max_rel_error,
        tolerance: cfg.tol,
    })
}

/// One small graph per operator, each reduced to a scalar loss through a
/// fixed random projection so every coordinate carries a distinct gradient.
fn op_graphs() -> Result<Vec<(&'static str, Graph)>> {
    let mut out = Vec::new();
    let project = |b: &mut GraphBuilder, y: NodeId, shape: &[usize]| {
        let r = b.fixed_input("r", shape);
        let m = b.mul(y, r);
        b.sum(m)
    };
    {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[4]);
        let w = b.param("w", &[4, 5]);
        let y = b.matmul(x, w);
        let l = project(&mut b, y, &[3, 5]);
        out.push(("matmul", b.build_with_loss(l)?));
    }
    for (name, stride, pad, o) in [("conv2d", 1, 1, 6), ("conv2d-strided", 2, 0, 2)] {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[2, 6, 6]);
        let k = b.param("k", &[3, 2, 3, 3]);
        let y = b.conv2d(x, k, stride, pad);
        let l = project(&mut b, y, &[3, 3, o, o]);
        out.push((name, b.build_with_loss(l)?));
    }
    for name in ["add", "mul"] {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[5]);
        let z = b.input("z", &[5]);
        let y = if name == "add" { b.add(x, z) } else { b.mul(x, z) };
        let l = project(&mut b, y, &[3, 5]);
        out.push((name, b.build_with_loss(l)?));
    }
    {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[4, 2, 2]);
        let c = b.param("c", &[4]);
        let y = b.add_bias(x, c);
        let l = project(&mut b, y, &[3, 4, 2, 2]);
        out.push(("add_bias", b.build_with_loss(l)?));
    }
    {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[6]);
        let y = b.relu(x);
        let l = project(&mut b, y, &[3, 6]);
        out.push(("relu", b.build_with_loss(l)?));
    }
    {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[2, 4, 4]);
        let y = b.mean_pool(x, 2);
        let l = project(&mut b, y, &[3, 2, 2, 2]);
        out.push(("mean_pool", b.build_with_loss(l)?));
    }
    {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[2, 3]);
        let y = b.reshape(x, &[6]);
        let l = project(&mut b, y, &[3, 6]);
        out.push(("reshape", b.build_with_loss(l)?));
    }
    {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[5]);
        let y = b.scale(x, -1.7);
        let l = project(&mut b, y, &[3, 5]);
        out.push(("scale", b.build_with_loss(l)?));
    }
    for name in ["softmax_cross_entropy", "dlr_loss"] {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[4]);
        let lab = b.input("y", &[]);
        let l = if name == "dlr_loss" {
            b.dlr_loss(x, lab)
        } else {
            b.softmax_cross_entropy(x, lab)
        };
        out.push((name, b.build_with_loss(l)?));
    }
    Ok(out)
}

/// Gradient check of every operator on random operands drawn from `seed`.
pub fn op_suite(seed: u64, cfg: GradCheckConfig) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut r = rng::derive_rng(seed, &["op-suite"]);
    let mut out = Vec::new();
    for (name, g) in op_graphs()? {
        let mut owned: Vec<(String, Tensor)> = Vec::new();
        for op in g.nodes() {
            let (n, shape) = match op {
                Op::Input { name, shape, batched } => {
                    let mut s = if *batched { vec![3] } else { vec![] };
                    s.extend(shape);
                    (name.clone(), s)
                }
                Op::Param { name, shape } => (name.clone(), shape.clone()),
                _ => continue,
            };
            let len: usize = shape.iter().product();
            let data: Vec<f64> = if n == "y" {
                (0..len).map(|_| r.random_range(0..4) as f64).collect()
            } else {
                (0..len).map(|_| r.random_range(-1.0..1.0)).collect()
            };
            owned.push((n, Tensor::new(shape, data)?));
        }
        let bind: Bindings = owned.iter().map(|(k, v)| (k.as_str(), v)).collect();
        let c = GradCheckConfig {
            seed: rng::derive_seed(seed, &[name]),
            ..cfg
        };
        out.push((name, finite_diff_check(&g, &bind, c)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;

    #[test]
    fn linear_model_is_exact() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[5]);
        let w = b.param("w", &[5, 3]);
        let z = b.matmul(x, w);
        let l = b.sum(z);
        let g = b.build_with_loss(l).unwrap();
        let xt = Tensor::new(vec![2, 5], (0..10).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let wt = Tensor::new(vec![5, 3], (0..15).map(|i| (i as f64).sin()).collect()).unwrap();
        let bind: Bindings = [("x", &xt), ("w", &wt)].into_iter().collect();
        let r = finite_diff_check(&g, &bind, GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
        assert!(r.passed);
    }

    #[test]
    fn relu_at_zero_is_skipped() {
        let mut b = GraphBuilder::new();
        let x = b.fixed_input("x", &[3]);
        let r = b.relu(x);
        let l = b.sum(r);
        let g = b.build_with_loss(l).unwrap();
        let xt = Tensor::vector(vec![0.0, 0.0, 0.0]);
        let bind: Bindings = [("x", &xt)].into_iter().collect();
        let rep = finite_diff_check(&g, &bind, GradCheckConfig::default()).unwrap();
        assert_eq!(rep.total_checked(), 0);
        assert_eq!(rep.total_skipped(), 3);
    }

    #[test]
    fn every_operator_passes() {
        for seed in 0..3 {
            for (name, rep) in op_suite(seed, GradCheckConfig::default()).unwrap() {
                assert!(rep.passed, "{name} seed {seed}: {}", rep.max_rel_error);
                assert!(rep.total_checked() > 0, "{name}");
            }
        }
    }

    #[test]
    fn rejects_nonpositive_step() {
        let mut b = GraphBuilder::new();
        let x = b.fixed_input("x", &[1]);
        let l = b.sum(x);
        let g = b.build_with_loss(l).unwrap();
        let xt = Tensor::vector(vec![1.0]);
        let bind: Bindings = [("x", &xt)].into_iter().collect();
        let cfg = GradCheckConfig {
            h: 0.0,
            ..Default::default()
        };
        assert!(finite_diff_check(&g, &bind, cfg).is_err());
    }
}
