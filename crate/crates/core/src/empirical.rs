//! Per-node and per-layer activation statistics of IPG corpora.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ipg::{Ipg, NodeId};

/// Linear interpolation between order statistics of sorted `values`, `q` in `[0, 1]`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn sorted_copy(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Population standard deviation.
pub fn stddev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Standard deviation after min-max scaling to `[0, 1]`; zero for constant input.
pub fn normalized_stddev(values: &[f64]) -> f64 {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || hi <= lo {
        return 0.0;
    }
    let scaled: Vec<f64> = values.iter().map(|v| (v - lo) / (hi - lo)).collect();
    stddev(&scaled)
}

/// Activation values of every node across one setting's corpus. Only IPGs in
/// which a node is present contribute values.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusValues {
    setting: String,
    size: usize,
    layers: Vec<Vec<Vec<f64>>>,
}

impl CorpusValues {
    /// `widths[l]` is the unit count of graph layer `l`.
    pub fn new(setting: impl Into<String>, widths: &[usize]) -> Self {
        CorpusValues {
            setting: setting.into(),
            size: 0,
            layers: widths.iter().map(|&w| vec![Vec::new(); w]).collect(),
        }
    }

    pub fn from_ipgs<'a>(
        setting: impl Into<String>,
        widths: &[usize],
        ipgs: impl IntoIterator<Item = &'a Ipg>,
    ) -> Result<Self> {
        let mut c = CorpusValues::new(setting, widths);
        for g in ipgs {
            c.add(g)?;
        }
        Ok(c)
    }

    pub fn add(&mut self, ipg: &Ipg) -> Result<()> {
        if ipg.setting != self.setting {
            return Err(Error::consistency(format!(
                "IPG of setting '{}' added to corpus '{}'",
                ipg.setting, self.setting
            )));
        }
        for n in &ipg.nodes {
            let slot = self
                .layers
                .get_mut(n.id.layer())
                .and_then(|l| l.get_mut(n.id.unit()))
                .ok_or_else(|| Error::consistency(format!("node {} outside the model", n.id)))?;
            slot.push(n.activation);
        }
        self.size += 1;
        Ok(())
    }

    /// Pools several corpora of the same model under one setting name.
    pub fn pooled(setting: impl Into<String>, parts: &[CorpusValues]) -> Result<Self> {
        let widths = parts.first().map(CorpusValues::widths).unwrap_or_default();
        let mut out = CorpusValues::new(setting, &widths);
        for p in parts {
            if p.widths() != widths {
                return Err(Error::consistency("pooled corpora come from different models"));
            }
            for (dst, src) in out.layers.iter_mut().flatten().zip(p.layers.iter().flatten()) {
                dst.extend_from_slice(src);
            }
            out.size += p.size;
        }
        Ok(out)
    }

    pub fn setting(&self) -> &str {
        &self.setting
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    pub fn values(&self, node: NodeId) -> &[f64] {
        &self.layers[node.layer()][node.unit()]
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, units)| (0..units.len()).map(move |u| NodeId::new(l, u)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeStats {
    pub node: NodeId,
    pub setting: String,
    /// Mean over IPGs containing the node; 0 when it never appears.
    pub mean_activation: f64,
    pub activation_frequency: f64,
    pub count: usize,
    pub stddev: f64,
    pub quartiles: (f64, f64, f64),
}

impl NodeStats {
    pub fn from_values(node: NodeId, setting: &str, values: &[f64], corpus_size: usize) -> Self {
        let quartiles = if values.is_empty() {
            (0.0, 0.0, 0.0)
        } else {
            let s = sorted_copy(values);
            (quantile_sorted(&s, 0.25), quantile_sorted(&s, 0.5), quantile_sorted(&s, 0.75))
        };
        NodeStats {
            node,
            setting: setting.to_string(),
            mean_activation: mean(values),
            activation_frequency: if corpus_size == 0 { 0.0 } else { values.len() as f64 / corpus_size as f64 },
            count: values.len(),
            stddev: stddev(values),
            quartiles,
        }
    }
}

pub type StatsMap = BTreeMap<NodeId, NodeStats>;

pub fn node_stats(corpus: &CorpusValues) -> Result<StatsMap> {
    if corpus.size() == 0 {
        return Err(Error::config(format!("corpus '{}' is empty", corpus.setting())));
    }
    Ok(corpus
        .nodes()
        .map(|id| (id, NodeStats::from_values(id, corpus.setting(), corpus.values(id), corpus.size())))
        .collect())
}

/// `||undesired.mean - desired.mean||_p`. Activations are scalars, so every
/// norm order gives the absolute difference.
pub fn setting_delta(desired: &NodeStats, undesired: &NodeStats, p: f64) -> Result<f64> {
    if desired.node != undesired.node {
        return Err(Error::consistency(format!(
            "delta between different nodes {} and {}",
            desired.node, undesired.node
        )));
    }
    if !(p >= 1.0) {
        return Err(Error::config(format!("norm order {p} must be >= 1")));
    }
    Ok((undesired.mean_activation - desired.mean_activation).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl BoxStats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let s = sorted_copy(values);
        Some(BoxStats {
            min: s[0],
            q1: quantile_sorted(&s, 0.25),
            median: quantile_sorted(&s, 0.5),
            q3: quantile_sorted(&s, 0.75),
            max: s[s.len() - 1],
        })
    }
}

/// Box-plot statistics of one layer under one setting. `means` covers nodes that
/// appeared at least once; `frequencies` covers every unit of the layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub setting: String,
    pub means: Option<BoxStats>,
    pub frequencies: BoxStats,
}

pub fn layer_summaries<'a>(stats: impl IntoIterator<Item = &'a StatsMap>) -> Vec<LayerSummary> {
    let mut out = Vec::new();
    for map in stats {
        let mut by_layer: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        let mut setting = String::new();
        for s in map.values() {
            setting.clone_from(&s.setting);
            let entry = by_layer.entry(s.node.layer()).or_default();
            if s.count > 0 {
                entry.0.push(s.mean_activation);
            }
            entry.1.push(s.activation_frequency);
        }
        for (layer, (means, freqs)) in by_layer {
            out.push(LayerSummary {
                layer,
                setting: setting.clone(),
                means: BoxStats::of(&means),
                frequencies: BoxStats::of(&freqs).expect("layer has at least one unit"),
            });
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeStatsRow {
    layer: usize,
    unit: usize,
    setting: String,
    mean_activation: f64,
    activation_frequency: f64,
    count: usize,
    stddev: f64,
    q1: f64,
    median: f64,
    q3: f64,
}

pub fn write_node_stats_csv<'a>(path: impl AsRef<Path>, stats: impl IntoIterator<Item = &'a NodeStats>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in stats {
        w.serialize(NodeStatsRow {
            layer: s.node.layer(),
            unit: s.node.unit(),
            setting: s.setting.clone(),
            mean_activation: s.mean_activation,
            activation_frequency: s.activation_frequency,
            count: s.count,
            stddev: s.stddev,
            q1: s.quartiles.0,
            median: s.quartiles.1,
            q3: s.quartiles.2,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows written by [`write_node_stats_csv`], grouped by setting.
pub fn read_node_stats_csv(path: impl AsRef<Path>) -> Result<BTreeMap<String, StatsMap>> {
    let mut out: BTreeMap<String, StatsMap> = BTreeMap::new();
    for row in csv::Reader::from_path(path)?.deserialize() {
        let r: NodeStatsRow = row?;
        let node = NodeId::new(r.layer, r.unit);
        out.entry(r.setting.clone()).or_default().insert(
            node,
            NodeStats {
                node,
                setting: r.setting,
                mean_activation: r.mean_activation,
                activation_frequency: r.activation_frequency,
                count: r.count,
                stddev: r.stddev,
                quartiles: (r.q1, r.median, r.q3),
            },
        );
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerSummaryRow {
    layer: usize,
    setting: String,
    metric: String,
    min: f64,
    q1: f64,
    median: f64,
    q3: f64,
    max: f64,
}

/// Two rows per summary: `metric` is `mean_activation` or `activation_frequency`.
/// Layers where no node ever appeared have no `mean_activation` row.
pub fn write_layer_summaries_csv(path: impl AsRef<Path>, summaries: &[LayerSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in summaries {
        let rows = [("mean_activation", s.means), ("activation_frequency", Some(s.frequencies))];
        for (metric, b) in rows {
            if let Some(b) = b {
                w.serialize(LayerSummaryRow {
                    layer: s.layer,
                    setting: s.setting.clone(),
                    metric: metric.into(),
                    min: b.min,
                    q1: b.q1,
                    median: b.median,
                    q3: b.q3,
                    max: b.max,
                })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_layer_summaries_csv(path: impl AsRef<Path>) -> Result<Vec<LayerSummary>> {
    let mut out: Vec<LayerSummary> = Vec::new();
    let mut pending_means: Option<(usize, String, BoxStats)> = None;
    for row in csv::Reader::from_path(path)?.deserialize() {
        let r: LayerSummaryRow = row?;
        let b = BoxStats {
            min: r.min,
            q1: r.q1,
            median: r.median,
            q3: r.q3,
            max: r.max,
        };
        match r.metric.as_str() {
            "mean_activation" => pending_means = Some((r.layer, r.setting, b)),
            "activation_frequency" => {
                let means = match pending_means.take() {
                    Some((l, s, m)) if l == r.layer && s == r.setting => Some(m),
                    Some(_) => return Err(Error::format("layer summary rows out of order")),
                    None => None,
                };
                out.push(LayerSummary {
                    layer: r.layer,
                    setting: r.setting,
                    means,
                    frequencies: b,
                });
            }
            other => return Err(Error::format(format!("unknown summary metric '{other}'"))),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ipg::IpgNode;

    fn ipg(setting: &str, nodes: &[(usize, usize, f64)]) -> Ipg {
        let nodes = nodes
            .iter()
            .map(|&(l, u, a)| IpgNode {
                id: NodeId::new(l, u),
                activation: a,
            })
            .collect();
        Ipg::new("m", "x", setting, 0, nodes, vec![])
    }

    #[test]
    fn single_ipg_node() {
        let c = CorpusValues::from_ipgs("b", &[1], [&ipg("b", &[(0, 0, 5.0)])]).unwrap();
        let s = &node_stats(&c).unwrap()[&NodeId::new(0, 0)];
        assert_eq!((s.mean_activation, s.activation_frequency, s.count), (5.0, 1.0, 1));
    }

    #[test]
    fn partial_presence() {
        let gs = [
            ipg("b", &[(0, 0, 1.0)]),
            ipg("b", &[]),
            ipg("b", &[(0, 0, 3.0)]),
            ipg("b", &[]),
        ];
        let c = CorpusValues::from_ipgs("b", &[2], &gs).unwrap();
        let st = node_stats(&c).unwrap();
        let s = &st[&NodeId::new(0, 0)];
        assert_eq!((s.mean_activation, s.activation_frequency), (2.0, 0.5));
        assert_eq!(s.stddev, 1.0);
        let absent = &st[&NodeId::new(0, 1)];
        assert_eq!((absent.count, absent.activation_frequency, absent.mean_activation), (0, 0.0, 0.0));
    }

    #[test]
    fn empty_corpus_is_config_error() {
        let c = CorpusValues::new("b", &[3]);
        assert!(matches!(node_stats(&c), Err(Error::Config(_))));
    }

    #[test]
    fn delta_examples() {
        let mk = |m: f64| NodeStats::from_values(NodeId::new(1, 0), "s", &[m], 1);
        assert_eq!(setting_delta(&mk(1.0), &mk(1.0), 1.0).unwrap(), 0.0);
        for p in [1.0, 2.0, f64::INFINITY] {
            assert_eq!(setting_delta(&mk(0.5), &mk(2.0), p).unwrap(), 1.5);
        }
    }

    #[test]
    fn quantiles_interpolate() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&s, 0.25), 1.75);
        assert_eq!(quantile_sorted(&s, 0.5), 2.5);
        assert_eq!(quantile_sorted(&s, 1.0), 4.0);
    }

    #[test]
    fn summaries_constant_and_disjoint() {
        let a: Vec<Ipg> = (0..4).map(|_| ipg("a", &[(1, 0, 2.0), (1, 1, 2.0)])).collect();
        let b: Vec<Ipg> = (0..4).map(|i| ipg("b", &[(1, 0, 10.0 + i as f64), (1, 1, 12.0)])).collect();
        let sa = node_stats(&CorpusValues::from_ipgs("a", &[0, 2], &a).unwrap()).unwrap();
        let sb = node_stats(&CorpusValues::from_ipgs("b", &[0, 2], &b).unwrap()).unwrap();
        let sums = layer_summaries([&sa, &sb]);
        let ma = sums.iter().find(|s| s.setting == "a" && s.layer == 1).unwrap().means.unwrap();
        assert_eq!((ma.q1, ma.median, ma.q3), (2.0, 2.0, 2.0));
        let mb = sums.iter().find(|s| s.setting == "b" && s.layer == 1).unwrap().means.unwrap();
        assert!(ma.q3 < mb.q1);
    }

    #[test]
    fn csv_round_trips() {
        let gs = [ipg("b", &[(0, 0, 1.0), (1, 0, 0.5)]), ipg("b", &[(0, 0, 2.0)])];
        let st = node_stats(&CorpusValues::from_ipgs("b", &[1, 2], &gs).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.csv");
        write_node_stats_csv(&p, st.values()).unwrap();
        assert_eq!(read_node_stats_csv(&p).unwrap()["b"], st);
        let sums = layer_summaries([&st]);
        let q = dir.path().join("l.csv");
        write_layer_summaries_csv(&q, &sums).unwrap();
        assert_eq!(read_layer_summaries_csv(&q).unwrap(), sums);
    }

    #[test]
    fn normalized_stddev_is_scale_free() {
        let v = [1.0, 2.0, 4.0];
        let w: Vec<f64> = v.iter().map(|x| 10.0 * x + 3.0).collect();
        assert!((normalized_stddev(&v) - normalized_stddev(&w)).abs() < 1e-12);
        assert_eq!(normalized_stddev(&[5.0, 5.0]), 0.0);
    }
}
