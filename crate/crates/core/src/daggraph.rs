//! Conversation DAGs.
//!
//! Every utterance is a node and every edge points from an earlier utterance
//! to a later one. For a node `i`, let `u_tau` be the `omega`-th latest earlier
//! utterance by the same speaker. The node receives edges from `u_tau` and from
//! every utterance strictly between `u_tau` and `i`, and from nothing earlier.
//! When the speaker has fewer than `omega` earlier turns, the scan runs to the
//! start of the conversation and the node connects to all earlier utterances.
//!
//! Indices are 0-based. The first utterance never has predecessors.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use petgraph::graphmap::DiGraphMap;
use serde::{Deserialize, Serialize};

use crate::corpus::Conversation;
use crate::{Error, Result};

/// Edge type: whether both endpoints were spoken by the same speaker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Relation {
    Other = 0,
    Same = 1,
}

impl Relation {
    pub fn between<S: PartialEq + ?Sized>(a: &S, b: &S) -> Self {
        if a == b {
            Relation::Same
        } else {
            Relation::Other
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Relation::Other),
            1 => Ok(Relation::Same),
            _ => Err(Error::invalid(format!("relation type must be 0 or 1, got {i}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DagVariant {
    /// Speaker-aware construction with cut-off `omega`.
    Ours { omega: usize },
    /// Each utterance connected to its immediate predecessor only.
    Sequence,
    /// The remote edge of `Ours` plus the edge from the immediate predecessor.
    SingleLocal { omega: usize },
    /// Each utterance connected to its `kappa` preceding utterances.
    Common { kappa: usize },
}

impl DagVariant {
    pub fn validate(self) -> Result<Self> {
        match self {
            DagVariant::Ours { omega: 0 } | DagVariant::SingleLocal { omega: 0 } => {
                Err(Error::invalid("omega must be at least 1"))
            }
            DagVariant::Common { kappa: 0 } => Err(Error::invalid("kappa must be at least 1")),
            v => Ok(v),
        }
    }

    /// Resolves a variant name as used on the command line.
    pub fn from_name(name: &str, omega: usize, kappa: usize) -> Result<Self> {
        let v = match name {
            "ours" => DagVariant::Ours { omega },
            "sequence" => DagVariant::Sequence,
            "single-local" | "single_local" => DagVariant::SingleLocal { omega },
            "common" => DagVariant::Common { kappa },
            other => return Err(Error::invalid(format!("unknown DAG variant `{other}`"))),
        };
        v.validate()
    }
}

impl Default for DagVariant {
    fn default() -> Self {
        DagVariant::Ours { omega: 1 }
    }
}

impl fmt::Display for DagVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DagVariant::Ours { omega } => write!(f, "ours(omega={omega})"),
            DagVariant::Sequence => write!(f, "sequence"),
            DagVariant::SingleLocal { omega } => write!(f, "single-local(omega={omega})"),
            DagVariant::Common { kappa } => write!(f, "common(kappa={kappa})"),
        }
    }
}

impl FromStr for DagVariant {
    type Err = Error;

    /// Accepts `ours`, `ours:2`, `sequence`, `single-local:1`, `common:4`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, k) = match s.split_once(':') {
            Some((n, k)) => {
                let k = k
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("bad variant parameter in `{s}`")))?;
                (n, k)
            }
            None => (s, if s == "common" { 2 } else { 1 }),
        };
        DagVariant::from_name(name, k, k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub relation: Relation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvDag {
    n_nodes: usize,
    edges: Vec<Edge>,
    preds: Vec<Vec<(usize, Relation)>>,
    variant: Option<DagVariant>,
}

impl ConvDag {
    /// Builds a DAG from an explicit edge list, rejecting backward edges,
    /// out-of-range nodes and duplicate pairs.
    pub fn from_edges(n_nodes: usize, edges: Vec<Edge>, variant: Option<DagVariant>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &edges {
            if e.target >= n_nodes {
                return Err(Error::invalid(format!("edge target {} out of range", e.target)));
            }
            if e.source >= e.target {
                return Err(Error::invalid(format!(
                    "edge ({}, {}) does not point forward",
                    e.source, e.target
                )));
            }
            if !seen.insert((e.source, e.target)) {
                return Err(Error::invalid(format!(
                    "duplicate edge ({}, {})",
                    e.source, e.target
                )));
            }
        }
        Ok(Self::from_edges_unchecked(n_nodes, edges, variant))
    }

    /// Builds a DAG without structural checks. Out-of-range endpoints are
    /// dropped from the predecessor lists. Intended for loading external
    /// dumps that are then inspected with [`validate_dag`].
    pub fn from_edges_unchecked(n_nodes: usize, mut edges: Vec<Edge>, variant: Option<DagVariant>) -> Self {
        edges.sort_by_key(|e| (e.target, e.source));
        let mut preds = vec![Vec::new(); n_nodes];
        for e in &edges {
            if e.target < n_nodes && e.source < n_nodes {
                preds[e.target].push((e.source, e.relation));
            }
        }
        Self {
            n_nodes,
            edges,
            preds,
            variant,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Edges sorted by `(target, source)`.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Predecessors of `node`, sorted by source ascending.
    pub fn preds(&self, node: usize) -> &[(usize, Relation)] {
        &self.preds[node]
    }

    pub fn variant(&self) -> Option<DagVariant> {
        self.variant
    }

    pub fn edge_set(&self) -> HashSet<(usize, usize, Relation)> {
        self.edges.iter().map(|e| (e.source, e.target, e.relation)).collect()
    }

    /// `{"n_nodes": N, "edges": [[i, j, r], ...]}` with 0-based node indices.
    pub fn to_dump_json(&self) -> String {
        let dump = DagDump {
            n_nodes: self.n_nodes,
            edges: self
                .edges
                .iter()
                .map(|e| [e.source, e.target, e.relation.index()])
                .collect(),
        };
        serde_json::to_string(&dump).expect("dag dump serializes")
    }

    pub fn from_dump_json(text: &str) -> Result<Self> {
        let dump: DagDump = serde_json::from_str(text)?;
        let edges = dump
            .edges
            .iter()
            .map(|&[source, target, r]| {
                Ok(Edge {
                    source,
                    target,
                    relation: Relation::from_index(r)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_edges_unchecked(dump.n_nodes, edges, None))
    }
}

#[derive(Serialize, Deserialize)]
struct DagDump {
    n_nodes: usize,
    edges: Vec<[usize; 3]>,
}

pub fn build_dag(conversation: &Conversation, omega: usize) -> Result<ConvDag> {
    build_dag_from_speakers(&conversation.speakers(), omega)
}

/// Direct transcription of the construction loop: for each node, walk
/// backwards adding an edge from every earlier utterance until `omega`
/// same-speaker utterances have been connected or the start is reached.
pub fn build_dag_from_speakers<S: PartialEq>(speakers: &[S], omega: usize) -> Result<ConvDag> {
    if speakers.is_empty() {
        return Err(Error::invalid("cannot build a DAG for an empty conversation"));
    }
    if omega == 0 {
        return Err(Error::invalid("omega must be at least 1"));
    }
    let mut edges = Vec::new();
    for i in 1..speakers.len() {
        let mut c = 0;
        let mut tau = i;
        while tau > 0 && c < omega {
            let j = tau - 1;
            if speakers[j] == speakers[i] {
                edges.push(edge(j, i, Relation::Same));
                c += 1;
            } else {
                edges.push(edge(j, i, Relation::Other));
            }
            tau -= 1;
        }
    }
    Ok(ConvDag::from_edges_unchecked(
        speakers.len(),
        edges,
        Some(DagVariant::Ours { omega }),
    ))
}

pub fn build_variant(conversation: &Conversation, variant: DagVariant) -> Result<ConvDag> {
    build_variant_from_speakers(&conversation.speakers(), variant)
}

pub fn build_variant_from_speakers<S: PartialEq>(speakers: &[S], variant: DagVariant) -> Result<ConvDag> {
    let variant = variant.validate()?;
    if speakers.is_empty() {
        return Err(Error::invalid("cannot build a DAG for an empty conversation"));
    }
    let rel = |j: usize, i: usize| edge(j, i, Relation::between(&speakers[j], &speakers[i]));
    let n = speakers.len();
    let edges: Vec<Edge> = match variant {
        DagVariant::Ours { omega } => return build_dag_from_speakers(speakers, omega),
        DagVariant::Sequence => (1..n).map(|i| rel(i - 1, i)).collect(),
        DagVariant::Common { kappa } => (1..n)
            .flat_map(|i| (i.saturating_sub(kappa)..i).map(move |j| (j, i)))
            .map(|(j, i)| rel(j, i))
            .collect(),
        DagVariant::SingleLocal { omega } => {
            let mut edges = Vec::new();
            for i in 1..n {
                // Same-speaker turns, nearest first; keep the omega-th or the earliest.
                let remote = (0..i).rev().filter(|&j| speakers[j] == speakers[i]).take(omega).last();
                if let Some(t) = remote {
                    if t != i - 1 {
                        edges.push(rel(t, i));
                    }
                }
                edges.push(rel(i - 1, i));
            }
            edges
        }
    };
    Ok(ConvDag::from_edges_unchecked(n, edges, Some(variant)))
}

fn edge(source: usize, target: usize, relation: Relation) -> Edge {
    Edge {
        source,
        target,
        relation,
    }
}

/// Per-constraint outcome of [`validate_dag`]. Empty vectors mean the
/// constraint holds.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    /// Edges that do not point strictly forward.
    pub direction: Vec<(usize, usize)>,
    /// Nodes missing their cut-off edge or receiving edges from before it.
    pub remote: Vec<usize>,
    /// Nodes missing an edge from some utterance after the cut-off.
    pub local: Vec<usize>,
    /// Edges whose relation type disagrees with the speakers.
    pub relation: Vec<(usize, usize)>,
    /// Repeated `(source, target)` pairs and out-of-range endpoints.
    pub malformed: Vec<(usize, usize)>,
    pub acyclic: bool,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.direction.is_empty()
            && self.remote.is_empty()
            && self.local.is_empty()
            && self.relation.is_empty()
            && self.malformed.is_empty()
            && self.acyclic
    }
}

/// Checks a DAG against the speaker-aware construction rules without
/// running the builder.
///
/// For a node whose speaker has at least `omega` earlier turns, the cut-off
/// is the `omega`-th latest of those turns; otherwise it is node 0 and every
/// earlier utterance is expected to feed the node.
pub fn validate_dag<S: AsRef<str>>(dag: &ConvDag, speakers: &[S], omega: usize) -> Result<ValidationReport> {
    let n = dag.n_nodes();
    if speakers.len() != n {
        return Err(Error::Dimension {
            context: "validate_dag node count".into(),
            expected: n,
            found: speakers.len(),
        });
    }
    if omega == 0 {
        return Err(Error::invalid("omega must be at least 1"));
    }
    let mut report = ValidationReport::default();

    let mut incoming: Vec<HashSet<usize>> = vec![HashSet::new(); n];
    let mut graph = DiGraphMap::<usize, ()>::new();
    for i in 0..n {
        graph.add_node(i);
    }
    for e in dag.edges() {
        if e.source >= n || e.target >= n || !incoming[e.target].insert(e.source) {
            report.malformed.push((e.source, e.target));
            continue;
        }
        graph.add_edge(e.source, e.target, ());
        if e.source >= e.target {
            report.direction.push((e.source, e.target));
        }
        let s = speakers[e.source].as_ref();
        let t = speakers[e.target].as_ref();
        if (e.relation == Relation::Same) != (s == t) {
            report.relation.push((e.source, e.target));
        }
    }
    report.acyclic = !petgraph::algo::is_cyclic_directed(&graph);

    // Earlier turns of each node's speaker, collected by a forward scan.
    let mut turns: std::collections::HashMap<&str, Vec<usize>> = Default::default();
    for i in 0..n {
        let spk = speakers[i].as_ref();
        let earlier = turns.entry(spk).or_default();
        let has_cutoff = earlier.len() >= omega;
        let cutoff = if has_cutoff { earlier[earlier.len() - omega] } else { 0 };
        let inc = &incoming[i];
        if i > 0 {
            let reaches_cutoff = inc.contains(&cutoff);
            let too_early = inc.iter().any(|&j| j < cutoff);
            if (has_cutoff && !reaches_cutoff) || too_early {
                report.remote.push(i);
            }
            let local_from = if has_cutoff { cutoff + 1 } else { 0 };
            if (local_from..i).any(|j| !inc.contains(&j)) {
                report.local.push(i);
            }
        }
        earlier.push(i);
    }
    report.direction.sort_unstable();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DagStats {
    pub n_dags: usize,
    pub node_count: usize,
    pub edge_count: usize,
    /// Total edges divided by total nodes.
    pub avg_preds: f64,
    /// Edge counts indexed by relation type.
    pub relation_histogram: [usize; 2],
}

pub fn dag_stats(dags: &[ConvDag]) -> Result<DagStats> {
    if dags.is_empty() {
        return Err(Error::invalid("dag_stats needs at least one DAG"));
    }
    let node_count: usize = dags.iter().map(ConvDag::n_nodes).sum();
    let mut relation_histogram = [0; 2];
    for e in dags.iter().flat_map(|d| d.edges()) {
        relation_histogram[e.relation.index()] += 1;
    }
    let edge_count = relation_histogram.iter().sum();
    Ok(DagStats {
        n_dags: dags.len(),
        node_count,
        edge_count,
        avg_preds: edge_count as f64 / node_count as f64,
        relation_histogram,
    })
}

/// Graphviz rendering. Same-speaker edges are solid, cross-speaker edges dashed.
pub fn export_dot(dag: &ConvDag, conversation: &Conversation) -> Result<String> {
    if dag.n_nodes() != conversation.len() {
        return Err(Error::Dimension {
            context: "export_dot node count".into(),
            expected: dag.n_nodes(),
            found: conversation.len(),
        });
    }
    let mut out = String::new();
    writeln!(out, "digraph \"{}\" {{", escape(conversation.id())).unwrap();
    writeln!(out, "  rankdir=LR;").unwrap();
    writeln!(out, "  node [shape=box];").unwrap();
    for u in conversation.utterances() {
        writeln!(out, "  u{} [label=\"{}: {}\"];", u.index, u.index + 1, escape(&u.speaker)).unwrap();
    }
    for e in dag.edges() {
        let style = match e.relation {
            Relation::Same => "solid",
            Relation::Other => "dashed",
        };
        writeln!(out, "  u{} -> u{} [style={style}];", e.source, e.target).unwrap();
    }
    out.push_str("}\n");
    Ok(out)
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}
