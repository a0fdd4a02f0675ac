//! Inference provenance graphs: the activated units of one inference and the
//! model edges among them.
//!
//! Graph layer 0 is the model input; graph layer `l + 1` is the output of model
//! layer `l`. Input units are always nodes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Activation, ActivationTrace, Model};
use crate::tensor::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId {
    pub layer: u32,
    pub unit: u32,
}

impl NodeId {
    pub fn new(layer: usize, unit: usize) -> Self {
        NodeId {
            layer: layer as u32,
            unit: unit as u32,
        }
    }

    pub fn layer(self) -> usize {
        self.layer as usize
    }

    pub fn unit(self) -> usize {
        self.unit as usize
    }
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.layer, self.unit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpgNode {
    pub id: NodeId,
    pub activation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpgEdge {
    pub src: NodeId,
    pub dst: NodeId,
    pub weight: f64,
    /// `weight * activation(src)`.
    pub contribution: f64,
}

/// Nodes sorted by id, edges sorted by `(src, dst)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ipg {
    pub model_id: String,
    pub input_id: String,
    pub setting: String,
    pub predicted_label: usize,
    pub nodes: Vec<IpgNode>,
    pub edges: Vec<IpgEdge>,
}

/// Decides whether a unit is an IPG node. ReLU units need a positive output;
/// units without an activation function need `|value| > tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationCriterion {
    pub tau: f64,
}

impl Default for ActivationCriterion {
    fn default() -> Self {
        ActivationCriterion { tau: 0.0 }
    }
}

impl ActivationCriterion {
    pub fn is_activated(&self, activation: Activation, value: f64) -> bool {
        match activation {
            Activation::Relu => value > 0.0,
            Activation::None => value.abs() > self.tau,
        }
    }
}

impl Ipg {
    /// Sorts nodes and edges into canonical order.
    pub fn new(
        model_id: impl Into<String>,
        input_id: impl Into<String>,
        setting: impl Into<String>,
        predicted_label: usize,
        mut nodes: Vec<IpgNode>,
        mut edges: Vec<IpgEdge>,
    ) -> Self {
        nodes.sort_by_key(|n| n.id);
        edges.sort_by_key(|e| (e.src, e.dst));
        Ipg {
            model_id: model_id.into(),
            input_id: input_id.into(),
            setting: setting.into(),
            predicted_label,
            nodes,
            edges,
        }
    }

    pub fn node(&self, id: NodeId) -> Option<&IpgNode> {
        self.nodes.binary_search_by_key(&id, |n| n.id).ok().map(|i| &self.nodes[i])
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.node(id).is_some()
    }

    /// Number of graph layers spanned by node ids (max layer + 1).
    pub fn num_layers(&self) -> usize {
        self.nodes.last().map_or(0, |n| n.id.layer() + 1)
    }

    /// Checks structural well-formedness: sorted unique nodes and edges, every
    /// edge joins two nodes in consecutive layers, and contributions match.
    pub fn validate(&self) -> Result<()> {
        if self.nodes.windows(2).any(|w| w[0].id >= w[1].id) {
            return Err(Error::consistency("IPG nodes are not sorted and unique"));
        }
        if self.edges.windows(2).any(|w| (w[0].src, w[0].dst) >= (w[1].src, w[1].dst)) {
            return Err(Error::consistency("IPG edges are not sorted and unique"));
        }
        for e in &self.edges {
            if e.src.layer + 1 != e.dst.layer {
                return Err(Error::consistency(format!("edge {} -> {} skips layers", e.src, e.dst)));
            }
            let src = self
                .node(e.src)
                .ok_or_else(|| Error::consistency(format!("edge source {} is not a node", e.src)))?;
            if !self.contains(e.dst) {
                return Err(Error::consistency(format!("edge target {} is not a node", e.dst)));
            }
            if e.contribution.to_bits() != (e.weight * src.activation).to_bits() {
                return Err(Error::consistency(format!("edge {} -> {} has a stale contribution", e.src, e.dst)));
            }
        }
        Ok(())
    }

    /// Checks that this IPG is a subgraph of `model`'s DAG: node indices within
    /// layer widths and every edge weight equal to the model's weight.
    pub fn check_subgraph(&self, model: &Model) -> Result<()> {
        let widths = model.graph_widths();
        for n in &self.nodes {
            if n.id.layer() >= widths.len() || n.id.unit() >= widths[n.id.layer()] {
                return Err(Error::consistency(format!("node {} is outside the model", n.id)));
            }
        }
        for e in &self.edges {
            match model.edge_weight(e.src.layer(), e.src.unit(), e.dst.unit()) {
                Some(w) if w.to_bits() == e.weight.to_bits() => {}
                _ => {
                    return Err(Error::consistency(format!(
                        "edge {} -> {} is not a model edge with weight {}",
                        e.src, e.dst, e.weight
                    )))
                }
            }
        }
        Ok(())
    }

    /// One line of the corpus format, without the trailing newline.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&IpgDoc::from(self)).expect("IPG serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let doc: IpgDoc = serde_json::from_str(line)?;
        let ipg = Ipg::from(doc);
        ipg.validate()?;
        Ok(ipg)
    }

    /// SHA-256 hex of the canonical serialization.
    pub fn digest(&self) -> String {
        let canonical = Ipg::new(
            self.model_id.clone(),
            self.input_id.clone(),
            self.setting.clone(),
            self.predicted_label,
            self.nodes.clone(),
            self.edges.clone(),
        );
        hex::encode(Sha256::digest(canonical.to_json_line().as_bytes()))
    }
}

#[derive(Serialize, Deserialize)]
struct IpgDoc {
    model_id: String,
    input_id: String,
    setting: String,
    predicted_label: usize,
    nodes: Vec<(u32, u32, f64)>,
    edges: Vec<(u32, u32, u32, u32, f64, f64)>,
}

impl From<&Ipg> for IpgDoc {
    fn from(g: &Ipg) -> Self {
        IpgDoc {
            model_id: g.model_id.clone(),
            input_id: g.input_id.clone(),
            setting: g.setting.clone(),
            predicted_label: g.predicted_label,
            nodes: g.nodes.iter().map(|n| (n.id.layer, n.id.unit, n.activation)).collect(),
            edges: g
                .edges
                .iter()
                .map(|e| (e.src.layer, e.src.unit, e.dst.layer, e.dst.unit, e.weight, e.contribution))
                .collect(),
        }
    }
}

impl From<IpgDoc> for Ipg {
    fn from(d: IpgDoc) -> Self {
        Ipg {
            model_id: d.model_id,
            input_id: d.input_id,
            setting: d.setting,
            predicted_label: d.predicted_label,
            nodes: d
                .nodes
                .into_iter()
                .map(|(l, u, a)| IpgNode {
                    id: NodeId { layer: l, unit: u },
                    activation: a,
                })
                .collect(),
            edges: d
                .edges
                .into_iter()
                .map(|(l, u, l2, v, w, c)| IpgEdge {
                    src: NodeId { layer: l, unit: u },
                    dst: NodeId { layer: l2, unit: v },
                    weight: w,
                    contribution: c,
                })
                .collect(),
        }
    }
}

/// Extracts IPGs from one model, computing its digest once.
pub struct IpgExtractor<'a> {
    model: &'a Model,
    model_id: String,
    criterion: ActivationCriterion,
}

impl<'a> IpgExtractor<'a> {
    pub fn new(model: &'a Model, criterion: ActivationCriterion) -> Self {
        IpgExtractor {
            model,
            model_id: model.digest(),
            criterion,
        }
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn extract(&self, x: &[f64], setting: &str, input_id: &str) -> Result<Ipg> {
        let (_, trace) = self.model.forward(x)?;
        Ok(self.from_trace(x, &trace, setting, input_id))
    }

    /// Builds the IPG of an inference whose trace is already known.
    pub fn from_trace(&self, x: &[f64], trace: &ActivationTrace, setting: &str, input_id: &str) -> Ipg {
        let model = self.model;
        let mut layer_units: Vec<Vec<(usize, f64)>> = Vec::with_capacity(model.layers().len() + 1);
        layer_units.push(x.iter().copied().enumerate().collect());
        for (l, layer) in model.layers().iter().enumerate() {
            layer_units.push(
                trace
                    .layer(l)
                    .iter()
                    .copied()
                    .enumerate()
                    .filter(|&(_, v)| self.criterion.is_activated(layer.activation, v))
                    .collect(),
            );
        }
        let nodes: Vec<IpgNode> = layer_units
            .iter()
            .enumerate()
            .flat_map(|(l, units)| {
                units.iter().map(move |&(u, a)| IpgNode {
                    id: NodeId::new(l, u),
                    activation: a,
                })
            })
            .collect();
        let mut edges = Vec::new();
        for (l, layer) in model.layers().iter().enumerate() {
            let (lo, hi) = (&layer_units[l], &layer_units[l + 1]);
            let dense = matches!(layer.kind, crate::nn::LayerKind::Dense { .. });
            for &(u, a) in lo {
                if dense {
                    for &(v, _) in hi {
                        let w = layer.edge_weight(u, v).expect("indices within layer");
                        edges.push(edge(l, u, v, w, a));
                    }
                } else if hi.binary_search_by_key(&u, |&(v, _)| v).is_ok() {
                    let w = layer.edge_weight(u, u).expect("element-wise edge");
                    edges.push(edge(l, u, u, w, a));
                }
            }
        }
        Ipg {
            model_id: self.model_id.clone(),
            input_id: input_id.to_string(),
            setting: setting.to_string(),
            predicted_label: argmax(trace.logits()),
            nodes,
            edges,
        }
    }
}

fn edge(l: usize, u: usize, v: usize, weight: f64, src_activation: f64) -> IpgEdge {
    IpgEdge {
        src: NodeId::new(l, u),
        dst: NodeId::new(l + 1, v),
        weight,
        contribution: weight * src_activation,
    }
}

/// Single-shot extraction with the default activation criterion.
pub fn extract_ipg(model: &Model, x: &[f64], setting: &str) -> Result<Ipg> {
    IpgExtractor::new(model, ActivationCriterion::default()).extract(x, setting, "0")
}

pub fn ipg_digest(ipg: &Ipg) -> String {
    ipg.digest()
}

pub fn check_model_id(ipg: &Ipg, expected: &str) -> Result<()> {
    if ipg.model_id != expected {
        return Err(Error::consistency(format!(
            "IPG {} was extracted from model {}, expected {}",
            ipg.input_id, ipg.model_id, expected
        )));
    }
    Ok(())
}

/// Appends IPGs to a newline-delimited JSON corpus file.
pub struct CorpusWriter {
    out: BufWriter<File>,
}

impl CorpusWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Ok(CorpusWriter {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn write(&mut self, ipg: &Ipg) -> Result<()> {
        self.out.write_all(ipg.to_json_line().as_bytes())?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn save_corpus(ipgs: &[Ipg], path: impl AsRef<Path>) -> Result<()> {
    let mut w = CorpusWriter::create(path)?;
    for g in ipgs {
        w.write(g)?;
    }
    w.finish()
}

/// Streams a corpus file, calling `f` on each IPG in order. Every record must end
/// with a newline, so a truncated final line is reported as a parse error.
pub fn for_each_in_corpus(path: impl AsRef<Path>, mut f: impl FnMut(Ipg) -> Result<()>) -> Result<()> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut line = String::new();
    let mut number = 0;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        number += 1;
        let Some(body) = line.strip_suffix('\n') else {
            return Err(Error::Parse {
                line: number,
                message: "record is not newline-terminated (truncated file?)".into(),
            });
        };
        let ipg = Ipg::from_json_line(body).map_err(|e| Error::Parse {
            line: number,
            message: e.to_string(),
        })?;
        f(ipg)?;
    }
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Ipg>> {
    let mut out = Vec::new();
    for_each_in_corpus(path, |g| {
        out.push(g);
        Ok(())
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;

    /// 2-2-1: W1 = I with ReLU, W2 = [1, 1].
    fn two_two_one() -> Model {
        Model::new(
            2,
            2,
            vec![
                Layer::dense(2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], Activation::Relu),
                Layer::dense(2, vec![1.0, 1.0, 0.0, 0.0], vec![0.0, 0.0], Activation::None),
            ],
        )
        .unwrap()
    }

    #[test]
    fn hand_enumerated_ipg() {
        let m = two_two_one();
        let g = extract_ipg(&m, &[1.0, -1.0], "benign").unwrap();
        let ids: Vec<(u32, u32)> = g.nodes.iter().map(|n| (n.id.layer, n.id.unit)).collect();
        // logits (1, 0): output unit 1 is zero and therefore not activated
        assert_eq!(ids, vec![(0, 0), (0, 1), (1, 0), (2, 0)]);
        let es: Vec<_> = g
            .edges
            .iter()
            .map(|e| (e.src.layer, e.src.unit, e.dst.unit, e.weight, e.contribution))
            .collect();
        assert_eq!(es, vec![(0, 0, 0, 1.0, 1.0), (0, 1, 0, 0.0, -0.0), (1, 0, 0, 1.0, 1.0)]);
        assert_eq!(g.predicted_label, 0);
        g.validate().unwrap();
        g.check_subgraph(&m).unwrap();
    }

    #[test]
    fn dead_relu_layer_has_no_nodes() {
        let m = Model::new(
            2,
            2,
            vec![
                Layer::dense(2, vec![-1.0, -1.0, -1.0, -1.0], vec![-1.0, -1.0], Activation::Relu),
                Layer::dense(2, vec![1.0; 4], vec![0.5, 0.0], Activation::None),
            ],
        )
        .unwrap();
        let g = extract_ipg(&m, &[0.3, 0.7], "s").unwrap();
        assert!(g.nodes.iter().all(|n| n.id.layer != 1));
        assert!(g.edges.is_empty());
    }

    #[test]
    fn tau_threshold_applies_to_linear_units() {
        let c = ActivationCriterion { tau: 0.5 };
        assert!(!c.is_activated(Activation::None, -0.4));
        assert!(c.is_activated(Activation::None, -0.6));
        assert!(!c.is_activated(Activation::Relu, 0.0));
    }

    fn sample_ipg(v: f64) -> Ipg {
        let nodes = vec![
            IpgNode { id: NodeId::new(1, 0), activation: v },
            IpgNode { id: NodeId::new(0, 1), activation: 0.25 },
            IpgNode { id: NodeId::new(0, 0), activation: 1.0 },
        ];
        let edges = vec![
            IpgEdge { src: NodeId::new(0, 1), dst: NodeId::new(1, 0), weight: 2.0, contribution: 0.5 },
            IpgEdge { src: NodeId::new(0, 0), dst: NodeId::new(1, 0), weight: -1.0, contribution: -1.0 },
        ];
        Ipg::new("m", "x", "benign", 1, nodes, edges)
    }

    #[test]
    fn digest_is_stable_and_order_free() {
        let a = sample_ipg(3.0);
        assert_eq!(a.digest(), a.digest());
        let mut shuffled = a.clone();
        shuffled.nodes.reverse();
        shuffled.edges.reverse();
        assert_eq!(shuffled.digest(), a.digest());
        assert_ne!(sample_ipg(4.0).digest(), a.digest());
    }

    #[test]
    fn corpus_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ipgs");
        save_corpus(&[], &path).unwrap();
        assert!(load_corpus(&path).unwrap().is_empty());

        let corpus: Vec<Ipg> = (0..10).map(|i| sample_ipg(0.1 * i as f64 + 1.0 / 3.0)).collect();
        save_corpus(&corpus, &path).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), corpus);

        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() - 10]).unwrap();
        match load_corpus(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 10),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ipgs");
        let good = sample_ipg(1.0).to_json_line();
        std::fs::write(&path, format!("{good}\n{{\"model_id\": 3}}\n")).unwrap();
        assert!(matches!(load_corpus(&path), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn model_id_mismatch_is_consistency_error() {
        assert!(matches!(check_model_id(&sample_ipg(1.0), "other"), Err(Error::Consistency(_))));
    }
}
