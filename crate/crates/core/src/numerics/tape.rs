use rand::Rng;

use super::kernels::{axpy, dot, matvec_acc, matvec_t_acc, outer_acc};
use super::param::{Gradients, ParamId, ParamSet};
use super::{dropout_mask, sigmoid, LOG_FLOOR};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `sum_k W_k x_k + b`
    Linear {
        terms: Vec<(ParamId, NodeId)>,
        bias: Option<ParamId>,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    /// `from + gate * (to - from)`
    Lerp {
        from: NodeId,
        to: NodeId,
        gate: NodeId,
    },
    Concat(Vec<NodeId>),
    Softmax(NodeId),
    /// `sum_k weights[k] * items[k]`
    WeightedSum {
        weights: NodeId,
        items: Vec<NodeId>,
    },
    Mask {
        x: NodeId,
        mask: Vec<f64>,
    },
    CrossEntropy {
        probs: NodeId,
        label: usize,
    },
    Sum(Vec<NodeId>),
    Dot(NodeId, NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Vec<f64>,
}

/// Operation-level record of a forward pass.
///
/// Every op stores its output and the node ids of its inputs; parameter
/// values are read from the [`ParamSet`] again during [`Tape::backward`], so
/// the set must not change between recording and replay.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> NodeId {
        debug_assert!(
            value.iter().all(|x| x.is_finite()),
            "non-finite output from {op:?}"
        );
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn dims_match(&self, a: NodeId, b: NodeId, context: &str) -> Result<()> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if la != lb {
            return Err(Error::Dimension {
                context: context.into(),
                expected: la,
                found: lb,
            });
        }
        Ok(())
    }

    /// A constant input; no gradient flows out of it.
    pub fn constant(&mut self, value: Vec<f64>) -> Result<NodeId> {
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("tape constant".into()));
        }
        Ok(self.push(Op::Leaf, value))
    }

    pub fn zeros(&mut self, n: usize) -> NodeId {
        self.push(Op::Leaf, vec![0.0; n])
    }

    pub fn linear(&mut self, params: &ParamSet, w: ParamId, x: NodeId, b: Option<ParamId>) -> Result<NodeId> {
        self.linear_sum(params, &[(w, x)], b)
    }

    /// `W_1 x_1 + ... + W_k x_k + b` as a single op.
    pub fn linear_sum(&mut self, params: &ParamSet, terms: &[(ParamId, NodeId)], bias: Option<ParamId>) -> Result<NodeId> {
        let rows = match (terms.first(), bias) {
            (Some(&(w, _)), _) => params.value(w).rows(),
            (None, Some(b)) => params.value(b).len(),
            (None, None) => return Err(Error::invalid("linear op with no terms")),
        };
        let mut y = vec![0.0; rows];
        for &(w, x) in terms {
            let wt = params.value(w);
            let xv = self.value(x);
            if wt.rows() != rows || wt.cols() != xv.len() {
                return Err(Error::Dimension {
                    context: format!("linear term `{}`", params.get(w).name),
                    expected: wt.cols(),
                    found: xv.len(),
                });
            }
            matvec_acc(wt.data(), wt.cols(), xv, &mut y);
        }
        if let Some(b) = bias {
            let bv = params.value(b).data();
            if bv.len() != rows {
                return Err(Error::Dimension {
                    context: format!("bias `{}`", params.get(b).name),
                    expected: rows,
                    found: bv.len(),
                });
            }
            y.iter_mut().zip(bv).for_each(|(a, b)| *a += b);
        }
        Ok(self.push(
            Op::Linear {
                terms: terms.to_vec(),
                bias,
            },
            y,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.dims_match(a, b, "add")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.dims_match(a, b, "mul")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).iter().map(|&a| sigmoid(a)).collect();
        self.push(Op::Sigmoid(x), v)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).iter().map(|a| a.tanh()).collect();
        self.push(Op::Tanh(x), v)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).iter().map(|a| a.max(0.0)).collect();
        self.push(Op::Relu(x), v)
    }

    /// `(1 - gate) * from + gate * to`, elementwise.
    pub fn lerp(&mut self, from: NodeId, to: NodeId, gate: NodeId) -> Result<NodeId> {
        self.dims_match(from, to, "lerp")?;
        self.dims_match(from, gate, "lerp gate")?;
        let (f, t, g) = (self.value(from), self.value(to), self.value(gate));
        let v = (0..f.len()).map(|k| (1.0 - g[k]) * f[k] + g[k] * t[k]).collect();
        Ok(self.push(Op::Lerp { from, to, gate }, v))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let v = parts.iter().flat_map(|&p| self.value(p).iter().copied()).collect();
        self.push(Op::Concat(parts.to_vec()), v)
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = super::softmax(self.value(x))?;
        Ok(self.push(Op::Softmax(x), v))
    }

    /// `sum_k weights[k] * items[k]`; `weights` must have one entry per item.
    pub fn weighted_sum(&mut self, weights: NodeId, items: &[NodeId]) -> Result<NodeId> {
        let w = self.value(weights);
        if w.len() != items.len() || items.is_empty() {
            return Err(Error::Dimension {
                context: "weighted_sum weights".into(),
                expected: items.len(),
                found: w.len(),
            });
        }
        let n = self.value(items[0]).len();
        let mut v = vec![0.0; n];
        for (k, &it) in items.iter().enumerate() {
            let iv = self.value(it);
            if iv.len() != n {
                return Err(Error::Dimension {
                    context: "weighted_sum item".into(),
                    expected: n,
                    found: iv.len(),
                });
            }
            axpy(w[k], iv, &mut v);
        }
        Ok(self.push(
            Op::WeightedSum {
                weights,
                items: items.to_vec(),
            },
            v,
        ))
    }

    /// Inverted dropout. With `rng == None` or rate 0 the input node is returned unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, rate: f64, rng: Option<&mut R>) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        match rng {
            Some(rng) if rate > 0.0 => {
                let mask = dropout_mask(self.value(x).len(), rate, rng)?;
                let v = self.value(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
                Ok(self.push(Op::Mask { x, mask }, v))
            }
            _ => Ok(x),
        }
    }

    /// `-ln(max(probs[label], 1e-12))` as a 1-element node.
    pub fn cross_entropy(&mut self, probs: NodeId, label: usize) -> Result<NodeId> {
        let v = super::cross_entropy(self.value(probs), label)?;
        Ok(self.push(Op::CrossEntropy { probs, label }, vec![v]))
    }

    /// Elementwise sum of equal-length nodes.
    pub fn sum(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or_else(|| Error::invalid("sum of no nodes"))?;
        let mut v = vec![0.0; self.value(first).len()];
        for &p in parts {
            self.dims_match(first, p, "sum")?;
            v.iter_mut().zip(self.value(p)).for_each(|(a, b)| *a += b);
        }
        Ok(self.push(Op::Sum(parts.to_vec()), v))
    }

    /// Inner product as a 1-element node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.dims_match(a, b, "dot")?;
        let v = dot(self.value(a), self.value(b));
        Ok(self.push(Op::Dot(a, b), vec![v]))
    }

    /// Reverse pass from a scalar `root`, returning parameter gradients.
    pub fn backward(&self, root: NodeId, params: &ParamSet) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Dimension {
                context: "backward root".into(),
                expected: 1,
                found: self.value(root).len(),
            });
        }
        let mut pgrads = Gradients::zeros_like(params);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Linear { terms, bias } => {
                    for &(w, x) in terms {
                        let wt = params.value(w);
                        outer_acc(&g, self.value(x), pgrads.get_mut(w));
                        if !matches!(self.nodes[x.0].op, Op::Leaf) {
                            let gx = slot(&mut grads, x, wt.cols());
                            matvec_t_acc(wt.data(), wt.cols(), &g, gx);
                        }
                    }
                    if let Some(b) = bias {
                        axpy(1.0, &g, pgrads.get_mut(*b));
                    }
                }
                Op::Add(a, b) => {
                    axpy(1.0, &g, slot(&mut grads, *a, g.len()));
                    axpy(1.0, &g, slot(&mut grads, *b, g.len()));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = slot(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * bv[k];
                    }
                    let gb = slot(&mut grads, *b, g.len());
                    for k in 0..g.len() {
                        gb[k] += g[k] * av[k];
                    }
                }
                Op::Sigmoid(x) => {
                    let gx = slot(&mut grads, *x, g.len());
                    for k in 0..g.len() {
                        gx[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                }
                Op::Tanh(x) => {
                    let gx = slot(&mut grads, *x, g.len());
                    for k in 0..g.len() {
                        gx[k] += g[k] * (1.0 - y[k] * y[k]);
                    }
                }
                Op::Relu(x) => {
                    let gx = slot(&mut grads, *x, g.len());
                    for k in 0..g.len() {
                        if y[k] > 0.0 {
                            gx[k] += g[k];
                        }
                    }
                }
                Op::Lerp { from, to, gate } => {
                    let (f, t, z) = (self.value(*from), self.value(*to), self.value(*gate));
                    let gf = slot(&mut grads, *from, g.len());
                    for k in 0..g.len() {
                        gf[k] += g[k] * (1.0 - z[k]);
                    }
                    let gt = slot(&mut grads, *to, g.len());
                    for k in 0..g.len() {
                        gt[k] += g[k] * z[k];
                    }
                    let gz = slot(&mut grads, *gate, g.len());
                    for k in 0..g.len() {
                        gz[k] += g[k] * (t[k] - f[k]);
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        axpy(1.0, &g[offset..offset + n], slot(&mut grads, p, n));
                        offset += n;
                    }
                }
                Op::Softmax(x) => {
                    let gy = dot(&g, y);
                    let gx = slot(&mut grads, *x, g.len());
                    for k in 0..g.len() {
                        gx[k] += y[k] * (g[k] - gy);
                    }
                }
                Op::WeightedSum { weights, items } => {
                    let w = self.value(*weights).to_vec();
                    let mut gw = vec![0.0; items.len()];
                    for (k, &it) in items.iter().enumerate() {
                        gw[k] = dot(&g, self.value(it));
                        axpy(w[k], &g, slot(&mut grads, it, g.len()));
                    }
                    axpy(1.0, &gw, slot(&mut grads, *weights, items.len()));
                }
                Op::Mask { x, mask } => {
                    let gx = slot(&mut grads, *x, g.len());
                    for k in 0..g.len() {
                        gx[k] += g[k] * mask[k];
                    }
                }
                Op::CrossEntropy { probs, label } => {
                    let p = self.value(*probs);
                    let n = p.len();
                    let pl = p[*label];
                    if pl > LOG_FLOOR {
                        slot(&mut grads, *probs, n)[*label] -= g[0] / pl;
                    }
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        axpy(1.0, &g, slot(&mut grads, p, g.len()));
                    }
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    axpy(g[0], bv, slot(&mut grads, *a, av.len()));
                    axpy(g[0], av, slot(&mut grads, *b, bv.len()));
                }
            }
        }
        Ok(pgrads)
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: NodeId, n: usize) -> &mut [f64] {
    grads[id.0].get_or_insert_with(|| vec![0.0; n])
}
