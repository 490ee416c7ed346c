//! The architecture catalog and classifiers built on it.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::NamedTensors;
use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph, GraphBuilder, NodeId};
use crate::loss;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    MlpSmall,
    MlpWide,
    CnnSmall,
    CnnDeep,
    MixerLite,
}

impl Architecture {
    pub const ALL: [Architecture; 5] = [
        Architecture::MlpSmall,
        Architecture::MlpWide,
        Architecture::CnnSmall,
        Architecture::CnnDeep,
        Architecture::MixerLite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::MlpSmall => "mlp-small",
            Architecture::MlpWide => "mlp-wide",
            Architecture::CnnSmall => "cnn-small",
            Architecture::CnnDeep => "cnn-deep",
            Architecture::MixerLite => "mixer-lite",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown architecture `{s}`")))
    }
}

/// Multiplier applied to centred pixels before the first layer.
pub const INPUT_SCALE: f64 = 10.0;

/// Optional loss head appended after the logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    None,
    CrossEntropy,
    Dlr,
}

/// A built architecture: the graph plus the ids callers need.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub graph: Graph,
    pub x: NodeId,
    pub logits: NodeId,
    /// Label input and loss node when built with a head.
    pub labels: Option<NodeId>,
    pub loss: Option<NodeId>,
    /// Output of every layer in depth order; the last entry is the logits.
    pub layers: Vec<NodeId>,
    /// The layer nearest one quarter of the depth.
    pub feature_tap: NodeId,
    /// `(node, name, shape, fan_in)` for every parameter.
    pub params: Vec<(NodeId, String, Vec<usize>, usize)>,
}

struct Net {
    b: GraphBuilder,
    params: Vec<(NodeId, String, Vec<usize>, usize)>,
    layers: Vec<NodeId>,
}

impl Net {
    fn param(&mut self, name: &str, shape: &[usize], fan_in: usize) -> NodeId {
        let id = self.b.param(name, shape);
        self.params.push((id, name.to_string(), shape.to_vec(), fan_in));
        id
    }

    fn dense(&mut self, name: &str, x: NodeId, din: usize, dout: usize) -> NodeId {
        let w = self.param(&format!("{name}.w"), &[din, dout], din);
        let bias = self.param(&format!("{name}.b"), &[dout], 0);
        let z = self.b.matmul(x, w);
        self.b.add_bias(z, bias)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        x: NodeId,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let w = self.param(&format!("{name}.w"), &[cout, cin, k, k], cin * k * k);
        let bias = self.param(&format!("{name}.b"), &[cout], 0);
        let z = self.b.conv2d(x, w, stride, pad);
        self.b.add_bias(z, bias)
    }

    fn relu_layer(&mut self, z: NodeId) -> NodeId {
        let r = self.b.relu(z);
        self.layers.push(r);
        r
    }
}

impl Architecture {
    /// Builds the graph for `[C, H, W]` inputs. Spatial sizes must be
    /// divisible by 4.
    pub fn build(self, input: [usize; 3], classes: usize, head: Head) -> Result<ModelGraph> {
        let [c, h, w] = input;
        if h == 0 || h % 4 != 0 || w % 4 != 0 || h != w {
            return Err(Error::invalid(format!(
                "{self} needs square inputs with side divisible by 4, got {h}x{w}"
            )));
        }
        if classes < 2 {
            return Err(Error::invalid("at least two classes are required"));
        }
        let mut n = Net {
            b: GraphBuilder::new(),
            params: Vec::new(),
            layers: Vec::new(),
        };
        let x_raw = n.b.input("x", &[c, h, w]);
        let shift = n.param("input.shift", &[c], 0);
        let centred = n.b.add_bias(x_raw, shift);
        let x = n.b.scale(centred, INPUT_SCALE);
        let d = c * h * w;
        let logits = match self {
            Architecture::MlpSmall => {
                let f = n.b.reshape(x, &[d]);
                let z = n.dense("fc1", f, d, 64);
                let a = n.relu_layer(z);
                n.dense("fc2", a, 64, classes)
            }
            Architecture::MlpWide => {
                let f = n.b.reshape(x, &[d]);
                let z = n.dense("fc1", f, d, 256);
                let a = n.relu_layer(z);
                let z = n.dense("fc2", a, 256, 128);
                let a = n.relu_layer(z);
                n.dense("fc3", a, 128, classes)
            }
            Architecture::CnnSmall => {
                let z = n.conv("conv1", x, c, 8, 3, 1, 1);
                let a = n.relu_layer(z);
                let p = n.b.mean_pool(a, 2);
                let z = n.conv("conv2", p, 8, 16, 3, 1, 1);
                let a = n.relu_layer(z);
                let p = n.b.mean_pool(a, 2);
                let flat = 16 * (h / 4) * (w / 4);
                let f = n.b.reshape(p, &[flat]);
                n.dense("fc", f, flat, classes)
            }
            Architecture::CnnDeep => {
                let z = n.conv("conv1", x, c, 8, 3, 1, 1);
                let a = n.relu_layer(z);
                let z = n.conv("conv2", a, 8, 8, 3, 1, 1);
                let a = n.relu_layer(z);
                let p = n.b.mean_pool(a, 2);
                let z = n.conv("conv3", p, 8, 12, 3, 1, 1);
                let a = n.relu_layer(z);
                let z = n.conv("conv4", a, 12, 12, 3, 1, 1);
                let a = n.relu_layer(z);
                let p = n.b.mean_pool(a, 2);
                let flat = 12 * (h / 4) * (w / 4);
                let f = n.b.reshape(p, &[flat]);
                let z = n.dense("fc1", f, flat, 32);
                let a = n.relu_layer(z);
                n.dense("fc2", a, 32, classes)
            }
            Architecture::MixerLite => {
                let dim = 16;
                let patch = h / 4;
                let tokens = 16;
                let z = n.conv("patch", x, c, dim, patch, patch, 0);
                let a = n.relu_layer(z);
                let rows = n.b.reshape(a, &[tokens]);
                let wt = n.param("token_mix.w", &[tokens, tokens], tokens);
                let mixed = n.b.matmul(rows, wt);
                let mixed = n.b.reshape(mixed, &[dim, 4, 4]);
                let res = n.b.add(a, mixed);
                let a = n.relu_layer(res);
                let z = n.conv("channel_mix", a, dim, dim, 1, 1, 0);
                let a = n.relu_layer(z);
                let p = n.b.mean_pool(a, 4);
                let f = n.b.reshape(p, &[dim]);
                n.dense("head", f, dim, classes)
            }
        };
        n.layers.push(logits);
        let depth = n.layers.len();
        let tap_index = ((depth as f64 / 4.0).round() as usize).max(1) - 1;
        let feature_tap = n.layers[tap_index];
        let (labels, loss_node) = match head {
            Head::None => (None, None),
            Head::CrossEntropy | Head::Dlr => {
                let y = n.b.input("y", &[]);
                let l = if head == Head::Dlr {
                    n.b.dlr_loss(logits, y)
                } else {
                    n.b.softmax_cross_entropy(logits, y)
                };
                (Some(y), Some(l))
            }
        };
        let graph = match loss_node {
            Some(l) => n.b.build_with_loss(l)?,
            None => n.b.build()?,
        };
        Ok(ModelGraph {
            graph,
            x: x_raw,
            logits,
            labels,
            loss: loss_node,
            layers: n.layers,
            feature_tap,
            params: n.params,
        })
    }

    /// He-normal weights (unit-gain for the final layer), zero biases, and an
    /// input shift of -0.5 that centres `[0, 1]` pixels.
    pub fn init_params(self, mg: &ModelGraph, seed: u64) -> NamedTensors {
        let mut r = rng::derive_rng(seed, &["init", self.name()]);
        let last = mg.params.iter().rposition(|p| p.3 > 0);
        mg.params
            .iter()
            .enumerate()
            .map(|(i, (_, name, shape, fan_in))| {
                let n: usize = shape.iter().product();
                let data = if name == "input.shift" {
                    vec![-0.5; n]
                } else if *fan_in == 0 {
                    vec![0.0; n]
                } else {
                    let gain = if Some(i) == last { 1.0 } else { 2.0 };
                    let normal = Normal::new(0.0, (gain / *fan_in as f64).sqrt()).unwrap();
                    (0..n).map(|_| normal.sample(&mut r)).collect()
                };
                (name.clone(), Tensor::new(shape.clone(), data).unwrap())
            })
            .collect()
    }
}

/// Anything that maps image batches to logits and can pull a logit-space
/// gradient back to the input.
pub trait Classifier: Send + Sync {
    fn classes(&self) -> usize;

    /// `[C, H, W]` of accepted inputs.
    fn input_shape(&self) -> [usize; 3];

    fn logits(&self, x: &Tensor) -> Result<Tensor>;

    /// Computes logits, asks `head` for `dLoss/dlogits`, and returns the
    /// logits together with `dLoss/dx`.
    fn input_gradient(
        &self,
        x: &Tensor,
        head: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    ) -> Result<(Tensor, Tensor)>;

    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }
}

/// Parameters bound to an architecture.
#[derive(Debug, Clone)]
pub struct Network {
    pub arch: Architecture,
    pub input_shape: [usize; 3],
    pub classes: usize,
    pub params: NamedTensors,
    graph: Arc<ModelGraph>,
    train_graph: Arc<ModelGraph>,
    /// Whether the feature tap may be used by feature-level attacks.
    pub has_feature_tap: bool,
}

const EVAL_CHUNK: usize = 256;

impl Network {
    pub fn new(arch: Architecture, input_shape: [usize; 3], classes: usize, seed: u64) -> Result<Self> {
        let graph = arch.build(input_shape, classes, Head::None)?;
        let params = arch.init_params(&graph, seed);
        Self::with_params(arch, input_shape, classes, params)
    }

    pub fn with_params(
        arch: Architecture,
        input_shape: [usize; 3],
        classes: usize,
        params: NamedTensors,
    ) -> Result<Self> {
        let graph = arch.build(input_shape, classes, Head::None)?;
        let train_graph = arch.build(input_shape, classes, Head::CrossEntropy)?;
        if params.len() != graph.params.len()
            || params
                .iter()
                .zip(&graph.params)
                .any(|((n, t), (_, gn, gs, _))| n != gn || t.shape() != gs.as_slice())
        {
            return Err(Error::Checkpoint(format!(
                "parameters do not match architecture {arch}"
            )));
        }
        Ok(Network {
            arch,
            input_shape,
            classes,
            params,
            graph: Arc::new(graph),
            train_graph: Arc::new(train_graph),
            has_feature_tap: true,
        })
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn train_graph(&self) -> &ModelGraph {
        &self.train_graph
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    fn bindings<'a>(&'a self, extra: &[(&'a str, &'a Tensor)]) -> Bindings<'a> {
        let mut b: Bindings = self.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        b.extend(extra.iter().copied());
        b
    }

    /// All forward values of the inference graph.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.graph.graph.evaluate(&self.bindings(&[("x", x)]))
    }

    /// Mean cross-entropy and its parameter gradients on one batch, in
    /// parameter order.
    pub fn loss_and_param_grads(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Tensor>)> {
        let y = loss::labels_to_tensor(labels);
        let tg = &self.train_graph;
        let vals = tg.graph.evaluate(&self.bindings(&[("x", x), ("y", &y)]))?;
        let l = tg.loss.unwrap();
        let wrt: Vec<NodeId> = tg.params.iter().map(|p| p.0).collect();
        let grads = tg
            .graph
            .backward_from(l, Tensor::scalar(1.0), &vals, Some(&wrt))?;
        let loss = vals[l].item();
        Ok((loss, collect_param_grads(tg, grads)))
    }

    /// Logits and parameter gradients for an arbitrary logit-space loss.
    pub fn param_grads_with(
        &self,
        x: &Tensor,
        head: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let vals = self.forward(x)?;
        let g = &self.graph;
        let seed = head(&vals[g.logits])?;
        let wrt: Vec<NodeId> = g.params.iter().map(|p| p.0).collect();
        let grads = g.graph.backward_from(g.logits, seed, &vals, Some(&wrt))?;
        let logits = vals[g.logits].clone();
        Ok((logits, collect_param_grads(g, grads)))
    }

    /// Activations at the feature tap.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut vals = self.forward(x)?;
        Ok(vals.swap_remove(self.graph.feature_tap))
    }

    /// `d z_y / d features` at the feature tap for each row's label.
    pub fn class_logit_feature_grad(&self, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let vals = self.forward(x)?;
        let g = &self.graph;
        let mut seed = Tensor::zeros(vals[g.logits].shape());
        for (i, &y) in labels.iter().enumerate() {
            seed.row_mut(i)[y] = 1.0;
        }
        let mut grads = g
            .graph
            .backward_from(g.logits, seed, &vals, Some(&[g.feature_tap]))?;
        grads[g.feature_tap]
            .take()
            .ok_or_else(|| Error::invalid("feature tap is not upstream of the logits"))
    }

    /// Features and `d(sum(features * seed))/dx`.
    pub fn feature_input_grad(&self, x: &Tensor, seed: &Tensor) -> Result<(Tensor, Tensor)> {
        let vals = self.forward(x)?;
        let g = &self.graph;
        let mut grads = g
            .graph
            .backward_from(g.feature_tap, seed.clone(), &vals, Some(&[g.x]))?;
        let dx = grads[g.x].take().unwrap_or_else(|| Tensor::zeros(x.shape()));
        Ok((vals[g.feature_tap].clone(), dx))
    }
}

fn collect_param_grads(g: &ModelGraph, mut grads: Vec<Option<Tensor>>) -> Vec<Tensor> {
    g.params
        .iter()
        .map(|(id, _, shape, _)| grads[*id].take().unwrap_or_else(|| Tensor::zeros(shape)))
        .collect()
}

impl Classifier for Network {
    fn classes(&self) -> usize {
        self.classes
    }

    fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.rows();
        if n <= EVAL_CHUNK {
            let mut vals = self.forward(x)?;
            return Ok(vals.swap_remove(self.graph.logits));
        }
        let mut parts = Vec::new();
        for start in (0..n).step_by(EVAL_CHUNK) {
            let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
            let mut vals = self.forward(&x.select_rows(&idx))?;
            parts.push(vals.swap_remove(self.graph.logits));
        }
        Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
    }

    fn input_gradient(
        &self,
        x: &Tensor,
        head: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let vals = self.forward(x)?;
        let g = &self.graph;
        let seed = head(&vals[g.logits])?;
        let mut grads = g.graph.backward_from(g.logits, seed, &vals, Some(&[g.x]))?;
        let dx = grads[g.x].take().unwrap_or_else(|| Tensor::zeros(x.shape()));
        Ok((vals[g.logits].clone(), dx))
    }
}

/// How ensemble members' outputs are fused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    /// Mean of member logits.
    #[default]
    Logits,
    /// Log of the mean of member probabilities.
    Probabilities,
}

/// Uniform ensemble of classifiers.
pub struct Ensemble<'a> {
    members: Vec<&'a dyn Classifier>,
    fusion: Fusion,
}

impl<'a> Ensemble<'a> {
    pub fn new(members: Vec<&'a dyn Classifier>, fusion: Fusion) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::invalid("an ensemble needs at least one member"))?;
        let (c, s) = (first.classes(), first.input_shape());
        if members.iter().any(|m| m.classes() != c) {
            return Err(Error::invalid("ensemble members disagree on the class count"));
        }
        if members.iter().any(|m| m.input_shape() != s) {
            return Err(Error::invalid("ensemble members disagree on the input shape"));
        }
        Ok(Ensemble { members, fusion })
    }

    fn fuse(&self, outs: &[Tensor]) -> Tensor {
        let k = outs.len() as f64;
        match self.fusion {
            Fusion::Logits => {
                let mut acc = outs[0].clone();
                for o in &outs[1..] {
                    acc.add_assign(o);
                }
                acc.scale_in_place(1.0 / k);
                acc
            }
            Fusion::Probabilities => {
                let mut acc = loss::softmax(&outs[0]);
                for o in &outs[1..] {
                    acc.add_assign(&loss::softmax(o));
                }
                acc.map(|p| (p / k).max(f64::MIN_POSITIVE).ln())
            }
        }
    }
}

impl Classifier for Ensemble<'_> {
    fn classes(&self) -> usize {
        self.members[0].classes()
    }

    fn input_shape(&self) -> [usize; 3] {
        self.members[0].input_shape()
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let outs = self
            .members
            .iter()
            .map(|m| m.logits(x))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.fuse(&outs))
    }

    fn input_gradient(
        &self,
        x: &Tensor,
        head: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let outs = self
            .members
            .iter()
            .map(|m| m.logits(x))
            .collect::<Result<Vec<_>>>()?;
        let fused = self.fuse(&outs);
        let upstream = head(&fused)?;
        let k = outs.len() as f64;
        let mut dx = Tensor::zeros(x.shape());
        for (m, out) in self.members.iter().zip(&outs) {
            let seed = match self.fusion {
                Fusion::Logits => upstream.map(|g| g / k),
                Fusion::Probabilities => {
                    // d log(mean p)/d z_m = (1/k) * J_softmax(z_m)^T (g / mean p)
                    let p = loss::softmax(out);
                    let mean_p = fused.map(f64::exp);
                    let mut s = Tensor::zeros(out.shape());
                    for i in 0..out.rows() {
                        let (pr, mr, ur) = (p.row(i), mean_p.row(i), upstream.row(i));
                        let v: Vec<f64> = ur.iter().zip(mr).map(|(u, q)| u / q.max(f64::MIN_POSITIVE)).collect();
                        let dot: f64 = pr.iter().zip(&v).map(|(a, b)| a * b).sum();
                        for (j, sj) in s.row_mut(i).iter_mut().enumerate() {
                            *sj = pr[j] * (v[j] - dot) / k;
                        }
                    }
                    s
                }
            };
            let (_, g) = m.input_gradient(x, &mut |_| Ok(seed.clone()))?;
            dx.add_assign(&g);
        }
        Ok((fused, dx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, GradCheckConfig};

    #[test]
    fn feature_tap_near_quarter_depth() {
        let expect = [
            (Architecture::MlpSmall, 0),
            (Architecture::MlpWide, 0),
            (Architecture::CnnSmall, 0),
            (Architecture::CnnDeep, 1),
            (Architecture::MixerLite, 0),
        ];
        for (arch, idx) in expect {
            let g = arch.build([1, 12, 12], 4, Head::None).unwrap();
            assert_eq!(g.feature_tap, g.layers[idx], "{arch}");
        }
    }

    #[test]
    fn architecture_names_roundtrip() {
        for a in Architecture::ALL {
            assert_eq!(a.name().parse::<Architecture>().unwrap(), a);
        }
        assert!("resnet".parse::<Architecture>().is_err());
    }

    #[test]
    fn catalog_graphs_pass_gradient_check() {
        for arch in Architecture::ALL {
            let net = Network::new(arch, [1, 12, 12], 4, 3).unwrap();
            let mut r = rng::rng(9);
            let x = Tensor::new(
                vec![2, 1, 12, 12],
                (0..288).map(|_| rand::Rng::random::<f64>(&mut r)).collect(),
            )
            .unwrap();
            let y = loss::labels_to_tensor(&[1, 3]);
            let tg = net.train_graph();
            let mut b = net.bindings(&[("x", &x), ("y", &y)]);
            b.insert("y", &y);
            let rep = finite_diff_check(
                &tg.graph,
                &b,
                GradCheckConfig {
                    coords_per_node: 20,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(rep.passed, "{arch}: {}", rep.max_rel_error);
            assert!(rep.total_checked() > 0);
        }
    }

    #[test]
    fn singleton_and_duplicate_ensembles_match_member() {
        let net = Network::new(Architecture::CnnSmall, [1, 12, 12], 4, 1).unwrap();
        let x = Tensor::full(&[3, 1, 12, 12], 0.3);
        let direct = net.logits(&x).unwrap();
        for members in [vec![&net as &dyn Classifier], vec![&net as &dyn Classifier, &net]] {
            let e = Ensemble::new(members, Fusion::Logits).unwrap();
            let l = e.logits(&x).unwrap();
            assert!(l.max_abs_diff(&direct) < 1e-12);
        }
    }

    #[test]
    fn probability_fusion_gradient_matches_finite_differences() {
        let a = Network::new(Architecture::MlpSmall, [1, 12, 12], 4, 1).unwrap();
        let b = Network::new(Architecture::CnnSmall, [1, 12, 12], 4, 2).unwrap();
        let e = Ensemble::new(vec![&a, &b], Fusion::Probabilities).unwrap();
        let x = Tensor::new(
            vec![1, 1, 12, 12],
            (0..144).map(|i| 0.5 + 0.3 * (i as f64 * 0.7).sin()).collect(),
        )
        .unwrap();
        let labels = [2usize];
        let f = |x: &Tensor| {
            loss::cross_entropy_per_sample(&e.logits(x).unwrap(), &labels).unwrap()[0]
        };
        let (_, dx) = e
            .input_gradient(&x, &mut |z| loss::cross_entropy_grad(z, &labels))
            .unwrap();
        for k in [0, 17, 70, 143] {
            let h = 1e-6;
            let mut xp = x.clone();
            xp.data_mut()[k] += h;
            let mut xm = x.clone();
            xm.data_mut()[k] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - dx.data()[k]).abs() < 1e-6 * fd.abs().max(1e-3), "k={k}");
        }
    }

    #[test]
    fn ensemble_rejects_mismatched_classes() {
        let a = Network::new(Architecture::MlpSmall, [1, 12, 12], 4, 1).unwrap();
        let b = Network::new(Architecture::MlpSmall, [1, 12, 12], 5, 1).unwrap();
        assert!(Ensemble::new(vec![&a, &b], Fusion::Logits).is_err());
    }
}
