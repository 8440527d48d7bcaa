//! The DAG-ERC network.
//!
//! Features are projected to `H^0`. Each layer then walks the nodes in index
//! order (a topological order of every [`ConvDag`]). Node `i` attends over its
//! predecessors' *current-layer* states, conditioned on its own previous-layer
//! state, and aggregates relation-transformed predecessor states into a
//! message `M`. Two GRUs combine `M` with the previous-layer state:
//!
//! ```text
//! alpha_ij = softmax_j(W_alpha [H^l_j ; H^{l-1}_i])
//! M_i      = sum_j alpha_ij W_{r_ij} H^l_j            (M_i = 0 without predecessors)
//! Ht_i     = GRU_H(input = H^{l-1}_i, hidden = M_i)   nodal unit
//! C_i      = GRU_M(input = M_i, hidden = H^{l-1}_i)   contextual unit
//! H^l_i    = Ht_i + C_i
//! ```
//!
//! The head concatenates `H^0..H^L`, applies `ReLU(W_H . + b_H)` and a softmax
//! classifier. Training minimizes the summed cross-entropy.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::daggraph::{ConvDag, Relation};
use crate::numerics::Checkpoint;
use crate::numerics::{Gradients, GruParams, Init, NodeId, ParamId, ParamSet, Tape};
use crate::{Error, Result};

/// Switches for the ablation study. All `true` is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Separate same-/other-speaker transforms; when off one shared matrix is used.
    pub relation_transform: bool,
    /// The GRU driven by the previous-layer state (`Ht`).
    pub nodal_unit: bool,
    /// The GRU driven by the aggregated message (`C`).
    pub contextual_unit: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        relation_transform: true,
        nodal_unit: true,
        contextual_unit: true,
    };
    pub const NO_RELATION_TRANSFORM: Ablation = Ablation {
        relation_transform: false,
        ..Self::FULL
    };
    pub const NO_NODAL_UNIT: Ablation = Ablation {
        nodal_unit: false,
        ..Self::FULL
    };
    pub const NO_CONTEXTUAL_UNIT: Ablation = Ablation {
        contextual_unit: false,
        ..Self::FULL
    };
    /// Attention aggregation plus the nodal GRU only.
    pub const DAGNN: Ablation = Ablation {
        relation_transform: false,
        nodal_unit: true,
        contextual_unit: false,
    };

    /// The four rows of the ablation table, in fixed order.
    pub fn table_rows() -> [(&'static str, Ablation); 4] {
        [
            ("DAG-ERC", Self::FULL),
            ("w/o rel-trans", Self::NO_RELATION_TRANSFORM),
            ("w/o H~", Self::NO_NODAL_UNIT),
            ("w/o C", Self::NO_CONTEXTUAL_UNIT),
        ]
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_feat: usize,
    pub d_h: usize,
    pub n_layers: usize,
    pub n_classes: usize,
    pub dropout: f64,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_feat: 64,
            d_h: 64,
            n_layers: 2,
            n_classes: 2,
            dropout: 0.2,
            ablation: Ablation::FULL,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::invalid("n_layers must be at least 1"));
        }
        if self.d_h == 0 || self.d_feat == 0 {
            return Err(Error::invalid("d_h and d_feat must be positive"));
        }
        if self.n_classes == 0 {
            return Err(Error::invalid("n_classes must be positive"));
        }
        if !self.ablation.nodal_unit && !self.ablation.contextual_unit {
            return Err(Error::invalid("at least one of the nodal and contextual units must be enabled"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    /// Width of the hidden layer of the head.
    pub fn d_z(&self) -> usize {
        self.d_h
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RelationWeights {
    Shared(ParamId),
    PerType([ParamId; 2]),
}

impl RelationWeights {
    pub fn for_relation(&self, r: Relation) -> ParamId {
        match self {
            RelationWeights::Shared(w) => *w,
            RelationWeights::PerType(ws) => ws[r.index()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DagErcLayer {
    /// `1 x 2 d_h` attention scorer.
    pub attention: ParamId,
    pub relation: RelationWeights,
    pub nodal: Option<GruParams>,
    pub contextual: Option<GruParams>,
}

impl DagErcLayer {
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        d_h: usize,
        ablation: Ablation,
        rng: &mut R,
    ) -> Result<Self> {
        let attention = params.add(format!("{prefix}.attn.W"), 1, 2 * d_h, Init::FanIn, rng)?;
        let relation = if ablation.relation_transform {
            RelationWeights::PerType([
                params.add(format!("{prefix}.rel.W0"), d_h, d_h, Init::FanIn, rng)?,
                params.add(format!("{prefix}.rel.W1"), d_h, d_h, Init::FanIn, rng)?,
            ])
        } else {
            RelationWeights::Shared(params.add(format!("{prefix}.rel.W"), d_h, d_h, Init::FanIn, rng)?)
        };
        let nodal = ablation
            .nodal_unit
            .then(|| GruParams::register(params, &format!("{prefix}.gru_h"), d_h, d_h, rng))
            .transpose()?;
        let contextual = ablation
            .contextual_unit
            .then(|| GruParams::register(params, &format!("{prefix}.gru_m"), d_h, d_h, rng))
            .transpose()?;
        Ok(Self {
            attention,
            relation,
            nodal,
            contextual,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub input_w: ParamId,
    pub input_b: ParamId,
    pub hidden_w: ParamId,
    pub hidden_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

/// Tape nodes produced by one layer, indexed by utterance.
#[derive(Debug, Clone)]
pub struct LayerNodes {
    pub hidden: Vec<NodeId>,
    pub alpha: Vec<Option<NodeId>>,
    pub message: Vec<NodeId>,
    pub nodal: Vec<Option<NodeId>>,
    pub contextual: Vec<Option<NodeId>>,
}

/// Records one DAG layer on `tape`. `prev` holds the previous-layer state of
/// every node.
pub fn forward_layer(
    tape: &mut Tape,
    params: &ParamSet,
    layer: &DagErcLayer,
    dag: &ConvDag,
    prev: &[NodeId],
) -> Result<LayerNodes> {
    let n = dag.n_nodes();
    if prev.len() != n {
        return Err(Error::Dimension {
            context: "forward_layer node count".into(),
            expected: n,
            found: prev.len(),
        });
    }
    let d_h = params.value(layer.attention).cols() / 2;
    let mut out = LayerNodes {
        hidden: Vec::with_capacity(n),
        alpha: Vec::with_capacity(n),
        message: Vec::with_capacity(n),
        nodal: Vec::with_capacity(n),
        contextual: Vec::with_capacity(n),
    };
    // W_r H^l_j, computed once per (node, relation).
    let mut transformed: Vec<[Option<NodeId>; 2]> = vec![[None; 2]; n];

    for (i, &prev_i) in prev.iter().enumerate() {
        let preds = dag.preds(i);
        if tape.value(prev_i).len() != d_h {
            return Err(Error::Dimension {
                context: format!("previous-layer state of node {i}"),
                expected: d_h,
                found: tape.value(prev_i).len(),
            });
        }
        let (alpha, message) = if preds.is_empty() {
            (None, tape.zeros(d_h))
        } else {
            let mut scores = Vec::with_capacity(preds.len());
            let mut values = Vec::with_capacity(preds.len());
            for &(j, r) in preds {
                let pair = tape.concat(&[out.hidden[j], prev_i]);
                scores.push(tape.linear(params, layer.attention, pair, None)?);
                let slot = match layer.relation {
                    RelationWeights::Shared(_) => 0,
                    RelationWeights::PerType(_) => r.index(),
                };
                let v = match transformed[j][slot] {
                    Some(v) => v,
                    None => {
                        let v = tape.linear(params, layer.relation.for_relation(r), out.hidden[j], None)?;
                        transformed[j][slot] = Some(v);
                        v
                    }
                };
                values.push(v);
            }
            let scores = tape.concat(&scores);
            let alpha = tape.softmax(scores)?;
            (Some(alpha), tape.weighted_sum(alpha, &values)?)
        };
        let nodal = layer
            .nodal
            .map(|g| g.step(tape, params, prev_i, message))
            .transpose()?;
        let contextual = layer
            .contextual
            .map(|g| g.step(tape, params, message, prev_i))
            .transpose()?;
        let hidden = match (nodal, contextual) {
            (Some(a), Some(b)) => tape.add(a, b)?,
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => return Err(Error::invalid("layer has neither GRU unit")),
        };
        out.hidden.push(hidden);
        out.alpha.push(alpha);
        out.message.push(message);
        out.nodal.push(nodal);
        out.contextual.push(contextual);
    }
    Ok(out)
}

/// Everything recorded for one conversation.
#[derive(Debug, Clone)]
pub struct Recorded {
    pub h0: Vec<NodeId>,
    pub layers: Vec<LayerNodes>,
    /// Layer outputs after dropout, as fed to the next layer and the head.
    pub layer_outputs: Vec<Vec<NodeId>>,
    pub z: Vec<NodeId>,
    pub probs: Vec<NodeId>,
}

/// Values of a forward pass, for inspection and dumping.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForwardTrace {
    pub h0: Vec<Vec<f64>>,
    pub layers: Vec<LayerTrace>,
    pub z: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerTrace {
    /// Attention over `dag.preds(i)`, in that order; empty for the first node.
    pub alpha: Vec<Vec<f64>>,
    pub message: Vec<Vec<f64>>,
    pub nodal: Vec<Option<Vec<f64>>>,
    pub contextual: Vec<Option<Vec<f64>>>,
    pub hidden: Vec<Vec<f64>>,
}

impl LayerTrace {
    pub fn from_nodes(tape: &Tape, nodes: &LayerNodes) -> Self {
        let vals = |ids: &[NodeId]| ids.iter().map(|&id| tape.value(id).to_vec()).collect::<Vec<_>>();
        let opt = |ids: &[Option<NodeId>]| {
            ids.iter()
                .map(|id| id.map(|id| tape.value(id).to_vec()))
                .collect::<Vec<_>>()
        };
        Self {
            alpha: nodes
                .alpha
                .iter()
                .map(|a| a.map(|a| tape.value(a).to_vec()).unwrap_or_default())
                .collect(),
            message: vals(&nodes.message),
            nodal: opt(&nodes.nodal),
            contextual: opt(&nodes.contextual),
            hidden: vals(&nodes.hidden),
        }
    }
}

impl ForwardTrace {
    /// Argmax per utterance; ties go to the lowest class index.
    pub fn predictions(&self) -> Vec<usize> {
        self.probs.iter().map(|p| argmax(p)).collect()
    }
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = k;
        }
    }
    best
}

/// Summed negative log-likelihood over every utterance of every conversation.
pub fn loss(traces: &[ForwardTrace], labels: &[Vec<usize>]) -> Result<f64> {
    if traces.len() != labels.len() {
        return Err(Error::Dimension {
            context: "loss batch".into(),
            expected: traces.len(),
            found: labels.len(),
        });
    }
    let mut total = 0.0;
    for (t, ls) in traces.iter().zip(labels) {
        if t.probs.len() != ls.len() {
            return Err(Error::Dimension {
                context: "loss labels".into(),
                expected: t.probs.len(),
                found: ls.len(),
            });
        }
        for (p, &l) in t.probs.iter().zip(ls) {
            total += crate::numerics::cross_entropy(p, l)?;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamSet,
    head: Head,
    layers: Vec<DagErcLayer>,
}

impl Model {
    /// Allocates and initializes all parameters from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let (d_h, d_z) = (config.d_h, config.d_z());
        let input_w = params.add("input.W", d_h, config.d_feat, Init::FanIn, &mut rng)?;
        let input_b = params.add("input.b", d_h, 1, Init::Zeros, &mut rng)?;
        let layers = (0..config.n_layers)
            .map(|l| DagErcLayer::register(&mut params, &format!("layer.{l}"), d_h, config.ablation, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let concat = (config.n_layers + 1) * d_h;
        let hidden_w = params.add("head.W_H", d_z, concat, Init::FanIn, &mut rng)?;
        let hidden_b = params.add("head.b_H", d_z, 1, Init::Zeros, &mut rng)?;
        let out_w = params.add("head.W_z", config.n_classes, d_z, Init::FanIn, &mut rng)?;
        let out_b = params.add("head.b_z", config.n_classes, 1, Init::Zeros, &mut rng)?;
        Ok(Self {
            config,
            params,
            head: Head {
                input_w,
                input_b,
                hidden_w,
                hidden_b,
                out_w,
                out_b,
            },
            layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn layers(&self) -> &[DagErcLayer] {
        &self.layers
    }

    /// Records the full forward pass of one conversation. Dropout is active
    /// only when an RNG is supplied.
    pub fn record<F: AsRef<[f64]>>(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        features: &[F],
        dag: &ConvDag,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Recorded> {
        let n = dag.n_nodes();
        if features.len() != n {
            return Err(Error::Dimension {
                context: "features per DAG node".into(),
                expected: n,
                found: features.len(),
            });
        }
        let rate = self.config.dropout;
        let mut h0 = Vec::with_capacity(n);
        for f in features {
            let f = f.as_ref();
            if f.len() != self.config.d_feat {
                return Err(Error::Dimension {
                    context: "utterance feature".into(),
                    expected: self.config.d_feat,
                    found: f.len(),
                });
            }
            let x = tape.constant(f.to_vec())?;
            let h = tape.linear(params, self.head.input_w, x, Some(self.head.input_b))?;
            h0.push(tape.dropout(h, rate, rng.as_deref_mut())?);
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut layer_outputs: Vec<Vec<NodeId>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let prev = layer_outputs.last().unwrap_or(&h0);
            let nodes = forward_layer(tape, params, layer, dag, prev)?;
            let dropped = nodes
                .hidden
                .iter()
                .map(|&h| tape.dropout(h, rate, rng.as_deref_mut()))
                .collect::<Result<Vec<_>>>()?;
            layers.push(nodes);
            layer_outputs.push(dropped);
        }
        let mut z = Vec::with_capacity(n);
        let mut probs = Vec::with_capacity(n);
        for i in 0..n {
            let mut parts = vec![h0[i]];
            parts.extend(layer_outputs.iter().map(|l| l[i]));
            let cat = tape.concat(&parts);
            let pre = tape.linear(params, self.head.hidden_w, cat, Some(self.head.hidden_b))?;
            let zi = tape.relu(pre);
            let logits = tape.linear(params, self.head.out_w, zi, Some(self.head.out_b))?;
            z.push(zi);
            probs.push(tape.softmax(logits)?);
        }
        Ok(Recorded {
            h0,
            layers,
            layer_outputs,
            z,
            probs,
        })
    }

    fn trace_of(tape: &Tape, rec: &Recorded) -> ForwardTrace {
        let vals = |ids: &[NodeId]| ids.iter().map(|&id| tape.value(id).to_vec()).collect();
        ForwardTrace {
            h0: vals(&rec.h0),
            layers: rec.layers.iter().map(|l| LayerTrace::from_nodes(tape, l)).collect(),
            z: vals(&rec.z),
            probs: vals(&rec.probs),
        }
    }

    /// Eval-mode forward pass.
    pub fn forward<F: AsRef<[f64]>>(&self, features: &[F], dag: &ConvDag) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, &self.params, features, dag, None)?;
        Ok(Self::trace_of(&tape, &rec))
    }

    /// Training-mode forward pass with dropout drawn from `rng`.
    pub fn forward_train<F: AsRef<[f64]>>(
        &self,
        features: &[F],
        dag: &ConvDag,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, &self.params, features, dag, Some(rng))?;
        Ok(Self::trace_of(&tape, &rec))
    }

    pub fn predict<F: AsRef<[f64]>>(&self, features: &[F], dag: &ConvDag) -> Result<Vec<usize>> {
        Ok(self.forward(features, dag)?.predictions())
    }

    /// Summed cross-entropy of one conversation and its parameter gradients.
    pub fn loss_and_grad<F: AsRef<[f64]>>(
        &self,
        features: &[F],
        dag: &ConvDag,
        labels: &[usize],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, Gradients)> {
        loss_and_grad_with(self, &self.params, features, dag, labels, rng)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            config: self.config.clone(),
            checkpoint: self.params.to_checkpoint(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        let mut model = Model::new(file.config)?;
        model.params.load_checkpoint(&file.checkpoint)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Like [`Model::loss_and_grad`] but reading parameter values from `params`,
/// which must have the model's layout. Used by the gradient checker.
pub fn loss_and_grad_with<F: AsRef<[f64]>>(
    model: &Model,
    params: &ParamSet,
    features: &[F],
    dag: &ConvDag,
    labels: &[usize],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Gradients)> {
    if labels.len() != dag.n_nodes() {
        return Err(Error::Dimension {
            context: "labels per DAG node".into(),
            expected: dag.n_nodes(),
            found: labels.len(),
        });
    }
    let mut tape = Tape::new();
    let rec = model.record(&mut tape, params, features, dag, rng)?;
    let terms = rec
        .probs
        .iter()
        .zip(labels)
        .map(|(&p, &l)| tape.cross_entropy(p, l))
        .collect::<Result<Vec<_>>>()?;
    let total = tape.sum(&terms)?;
    let grads = tape.backward(total, params)?;
    Ok((tape.value(total)[0], grads))
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    config: ModelConfig,
    checkpoint: Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCount {
    pub attention: usize,
    pub relation: usize,
    pub nodal: usize,
    pub contextual: usize,
}

impl LayerCount {
    pub fn total(&self) -> usize {
        self.attention + self.relation + self.nodal + self.contextual
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub input_projection: usize,
    pub per_layer: LayerCount,
    pub layers: usize,
    pub head: usize,
    pub total: usize,
}

/// Closed-form parameter count for `config`.
pub fn param_count(config: &ModelConfig) -> Result<ParamCount> {
    config.validate()?;
    let (d_h, d_z, l) = (config.d_h, config.d_z(), config.n_layers);
    let a = config.ablation;
    let gru = GruParams::n_scalars(d_h, d_h);
    let per_layer = LayerCount {
        attention: 2 * d_h,
        relation: if a.relation_transform { 2 } else { 1 } * d_h * d_h,
        nodal: if a.nodal_unit { gru } else { 0 },
        contextual: if a.contextual_unit { gru } else { 0 },
    };
    let input_projection = d_h * config.d_feat + d_h;
    let head = d_z * (l + 1) * d_h + d_z + config.n_classes * d_z + config.n_classes;
    let layers = l * per_layer.total();
    Ok(ParamCount {
        input_projection,
        total: input_projection + layers + head,
        per_layer,
        layers,
        head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::daggraph::build_dag_from_speakers;
    use proptest::prelude::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_feat: 5,
            d_h: 4,
            n_layers: 2,
            n_classes: 3,
            dropout: 0.0,
            ablation: Ablation::FULL,
            seed: 42,
        }
    }

    fn feats(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::new(cfg()).unwrap();
        let b = Model::new(cfg()).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(Model::new(ModelConfig { n_layers: 0, ..cfg() }).is_err());
        let none = Ablation {
            nodal_unit: false,
            contextual_unit: false,
            ..Ablation::FULL
        };
        assert!(Model::new(ModelConfig { ablation: none, ..cfg() }).is_err());
        assert!(Model::new(ModelConfig { dropout: 1.0, ..cfg() }).is_err());
    }

    // Hand count for L=1, d_h=1, d_feat=1, 2 classes, d_z=1:
    // input 1+1, attention 2, relation 2, each GRU 3*(1+1+1)=9,
    // head W_H 1x2 + b_H 1, W_z 2x1 + b_z 2.
    #[test]
    fn tiny_param_count_by_hand() {
        let c = ModelConfig {
            d_feat: 1,
            d_h: 1,
            n_layers: 1,
            n_classes: 2,
            ..cfg()
        };
        let count = param_count(&c).unwrap();
        assert_eq!(count.total, 2 + (2 + 2 + 9 + 9) + (2 + 1) + (2 + 2));
        assert_eq!(count.total, 31);
        assert_eq!(Model::new(c).unwrap().params().n_scalars(), 31);
    }

    #[test]
    fn relation_transform_off_saves_one_matrix_per_layer() {
        let full = ModelConfig { d_h: 64, n_layers: 2, ..cfg() };
        let off = ModelConfig {
            ablation: Ablation::NO_RELATION_TRANSFORM,
            ..full.clone()
        };
        let diff = param_count(&full).unwrap().total - param_count(&off).unwrap().total;
        assert_eq!(diff, 2 * 64 * 64);
        let diff_alloc = Model::new(full).unwrap().params().n_scalars() - Model::new(off).unwrap().params().n_scalars();
        assert_eq!(diff_alloc, diff);
    }

    #[test]
    fn single_node_uses_zero_message() {
        let m = Model::new(cfg()).unwrap();
        let dag = build_dag_from_speakers(&["A"], 1).unwrap();
        let t = m.forward(&feats(1, 5, 0), &dag).unwrap();
        for layer in &t.layers {
            assert!(layer.alpha[0].is_empty());
            assert_eq!(layer.message[0], vec![0.0; 4]);
        }
        // Layer 1 output from the two GRUs on (H^0, 0) alone.
        let l0 = &m.layers()[0];
        let ht = l0.nodal.unwrap().eval(m.params(), &t.h0[0], &[0.0; 4]).unwrap();
        let c = l0.contextual.unwrap().eval(m.params(), &[0.0; 4], &t.h0[0]).unwrap();
        let expected: Vec<f64> = ht.iter().zip(&c).map(|(a, b)| a + b).collect();
        assert_eq!(t.layers[0].hidden[0], expected);
    }

    #[test]
    fn singleton_predecessor_gets_full_attention() {
        let m = Model::new(cfg()).unwrap();
        let dag = build_dag_from_speakers(&["A", "B"], 1).unwrap();
        let t = m.forward(&feats(2, 5, 1), &dag).unwrap();
        assert_eq!(t.layers[0].alpha[1], vec![1.0]);
    }

    #[test]
    fn eval_is_deterministic_and_normalized() {
        let m = Model::new(ModelConfig { dropout: 0.5, ..cfg() }).unwrap();
        let dag = build_dag_from_speakers(&["A", "B", "C", "A", "B"], 1).unwrap();
        let f = feats(5, 5, 2);
        let a = m.forward(&f, &dag).unwrap();
        assert_eq!(a, m.forward(&f, &dag).unwrap());
        for p in &a.probs {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for layer in &a.layers {
            for (i, al) in layer.alpha.iter().enumerate() {
                assert_eq!(al.len(), dag.preds(i).len());
                if !al.is_empty() {
                    assert!((al.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
        assert!(a.z.iter().flatten().all(|&v| v >= 0.0));
    }

    #[test]
    fn training_mode_dropout_changes_outputs() {
        let m = Model::new(ModelConfig { dropout: 0.5, ..cfg() }).unwrap();
        let dag = build_dag_from_speakers(&["A", "B", "A"], 1).unwrap();
        let f = feats(3, 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let train = m.forward_train(&f, &dag, &mut rng).unwrap();
        assert_ne!(train.probs, m.forward(&f, &dag).unwrap().probs);
    }

    #[test]
    fn permuting_output_rows_permutes_probabilities() {
        let mut m = Model::new(cfg()).unwrap();
        let dag = build_dag_from_speakers(&["A", "B", "A", "C"], 1).unwrap();
        let f = feats(4, 5, 4);
        // Give the output bias some asymmetry first.
        m.params_mut().set("head.b_z", &[0.3, -0.2, 0.1]).unwrap();
        let before = m.forward(&f, &dag).unwrap();
        let perm = [2usize, 0, 1];
        let w = m.params().value(m.head().out_w).clone();
        let b = m.params().value(m.head().out_b).clone();
        let d_z = w.cols();
        let mut w2 = vec![0.0; w.len()];
        let mut b2 = vec![0.0; b.len()];
        for (new, &old) in perm.iter().enumerate() {
            w2[new * d_z..(new + 1) * d_z].copy_from_slice(&w.data()[old * d_z..(old + 1) * d_z]);
            b2[new] = b.data()[old];
        }
        m.params_mut().set("head.W_z", &w2).unwrap();
        m.params_mut().set("head.b_z", &b2).unwrap();
        let after = m.forward(&f, &dag).unwrap();
        for (p, q) in before.probs.iter().zip(&after.probs) {
            for (new, &old) in perm.iter().enumerate() {
                assert!((q[new] - p[old]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn loss_of_uniform_and_perfect_predictions() {
        let uniform = ForwardTrace {
            h0: vec![],
            layers: vec![],
            z: vec![],
            probs: vec![vec![0.25; 4]; 3],
        };
        let l = loss(&[uniform], &[vec![0, 1, 3]]).unwrap();
        assert!((l - 3.0 * 4f64.ln()).abs() < 1e-12);
        let perfect = ForwardTrace {
            h0: vec![],
            layers: vec![],
            z: vec![],
            probs: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
        };
        assert_eq!(loss(&[perfect], &[vec![1, 0]]).unwrap(), 0.0);
    }

    #[test]
    fn shape_errors() {
        let m = Model::new(cfg()).unwrap();
        let dag = build_dag_from_speakers(&["A", "B"], 1).unwrap();
        assert!(m.forward(&feats(3, 5, 0), &dag).is_err());
        assert!(m.forward(&feats(2, 4, 0), &dag).is_err());
        assert!(m.loss_and_grad(&feats(2, 5, 0), &dag, &[0], None).is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let m = Model::new(cfg()).unwrap();
        let back = Model::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
    }

    proptest! {
        #[test]
        fn allocated_count_matches_formula(
            d_feat in 1usize..9, d_h in 1usize..9, n_layers in 1usize..4, n_classes in 1usize..6,
            rel in any::<bool>(), unit in 0usize..3,
        ) {
            let ablation = Ablation {
                relation_transform: rel,
                nodal_unit: unit != 1,
                contextual_unit: unit != 2,
            };
            let c = ModelConfig { d_feat, d_h, n_layers, n_classes, ablation, ..cfg() };
            prop_assert_eq!(Model::new(c.clone()).unwrap().params().n_scalars(), param_count(&c).unwrap().total);
        }
    }
}
