//! Graph classifier over IPGs, node and edge attribution of its predictions, and
//! influential node/edge sets.
//!
//! The classifier runs two mean-aggregation message-passing layers over the
//! undirected IPG (each node averages itself with its neighbors), mean-pools the
//! node embeddings and applies a linear layer.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::empirical::{quantile_sorted, sorted_copy};
use crate::error::{Error, Result};
use crate::ipg::{Ipg, NodeId};
use crate::nn::softmax_cross_entropy;
use crate::tensor::{argmax, axpy, dot};

pub type EdgeKey = (NodeId, NodeId);

/// Undirected graph with scalar node features. Pairs of IPG layers whose edges
/// form a complete bipartite block are stored as two index ranges; other edges
/// are stored explicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnGraph {
    ids: Vec<NodeId>,
    x: Vec<f64>,
    deg: Vec<f64>,
    complete: Vec<(Range<usize>, Range<usize>)>,
    sparse: Vec<(usize, usize)>,
    sparse_offsets: Vec<usize>,
    sparse_adj: Vec<usize>,
    group_of: Vec<usize>,
    group_nbrs: Vec<Vec<Range<usize>>>,
}

impl GnnGraph {
    pub fn from_ipg(ipg: &Ipg) -> Self {
        let ids: Vec<NodeId> = ipg.nodes.iter().map(|n| n.id).collect();
        let x: Vec<f64> = ipg.nodes.iter().map(|n| n.activation).collect();
        let mut layer_ranges: BTreeMap<u32, Range<usize>> = BTreeMap::new();
        for (i, id) in ids.iter().enumerate() {
            layer_ranges.entry(id.layer).or_insert(i..i).end = i + 1;
        }
        let index_of = |id: NodeId| -> usize {
            let r = &layer_ranges[&id.layer];
            r.start + ids[r.clone()].binary_search(&id).expect("edge endpoint is a node")
        };
        let mut per_pair: BTreeMap<u32, Vec<(usize, usize)>> = BTreeMap::new();
        for e in &ipg.edges {
            per_pair.entry(e.src.layer).or_default().push((index_of(e.src), index_of(e.dst)));
        }
        let groups: Vec<u32> = layer_ranges.keys().copied().collect();
        let mut group_of = vec![0; ids.len()];
        for (g, l) in groups.iter().enumerate() {
            group_of[layer_ranges[l].clone()].iter_mut().for_each(|v| *v = g);
        }
        let mut group_nbrs = vec![Vec::new(); groups.len()];
        let mut complete = Vec::new();
        let mut sparse = Vec::new();
        for (layer, edges) in per_pair {
            let lo = layer_ranges[&layer].clone();
            let hi = layer_ranges[&(layer + 1)].clone();
            // Edges are unique, so full count means every pair is present.
            if edges.len() == lo.len() * hi.len() {
                group_nbrs[group_of[lo.start]].push(hi.clone());
                group_nbrs[group_of[hi.start]].push(lo.clone());
                complete.push((lo, hi));
            } else {
                sparse.extend(edges);
            }
        }
        GnnGraph::assemble(ids, x, complete, sparse, group_of, group_nbrs)
    }

    /// Generic graph with explicit undirected edges; node `i` gets id `(0, i)`.
    pub fn from_edges(x: Vec<f64>, edges: &[(usize, usize)]) -> Result<Self> {
        let n = x.len();
        if let Some(&(a, b)) = edges.iter().find(|&&(a, b)| a >= n || b >= n || a == b) {
            return Err(Error::domain(format!("invalid edge ({a}, {b}) for {n} nodes")));
        }
        let ids = (0..n).map(|i| NodeId::new(0, i)).collect();
        Ok(GnnGraph::assemble(ids, x, Vec::new(), edges.to_vec(), vec![0; n], vec![Vec::new()]))
    }

    fn assemble(
        ids: Vec<NodeId>,
        x: Vec<f64>,
        complete: Vec<(Range<usize>, Range<usize>)>,
        sparse: Vec<(usize, usize)>,
        group_of: Vec<usize>,
        group_nbrs: Vec<Vec<Range<usize>>>,
    ) -> Self {
        let n = ids.len();
        let mut counts = vec![0usize; n + 1];
        for &(a, b) in &sparse {
            counts[a + 1] += 1;
            counts[b + 1] += 1;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut adj = vec![0; counts[n]];
        for &(a, b) in &sparse {
            adj[fill[a]] = b;
            fill[a] += 1;
            adj[fill[b]] = a;
            fill[b] += 1;
        }
        let mut g = GnnGraph {
            ids,
            x,
            deg: Vec::new(),
            complete,
            sparse,
            sparse_offsets: counts,
            sparse_adj: adj,
            group_of,
            group_nbrs,
        };
        let mut deg = vec![0.0; n];
        g.neighbor_sum(&vec![1.0; n], 1, &mut deg);
        g.deg = deg;
        g
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn features(&self) -> &[f64] {
        &self.x
    }

    pub fn num_edges(&self) -> usize {
        self.sparse.len() + self.complete.iter().map(|(a, b)| a.len() * b.len()).sum::<usize>()
    }

    /// Every undirected edge once, as node index pairs.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.complete
            .iter()
            .flat_map(|(lo, hi)| lo.clone().flat_map(move |u| hi.clone().map(move |v| (u, v))))
            .chain(self.sparse.iter().copied())
    }

    pub fn edge_key(&self, (u, v): (usize, usize)) -> EdgeKey {
        let (a, b) = (self.ids[u], self.ids[v]);
        if a <= b {
            (a, b)
        } else {
            (b, a)
        }
    }

    fn for_each_neighbor(&self, i: usize, mut f: impl FnMut(usize)) {
        for r in &self.group_nbrs[self.group_of[i]] {
            r.clone().for_each(&mut f);
        }
        self.sparse_adj[self.sparse_offsets[i]..self.sparse_offsets[i + 1]]
            .iter()
            .for_each(|&j| f(j));
    }

    /// `out[i] = sum over neighbors j of h[j]`, rows of width `dim`.
    fn neighbor_sum(&self, h: &[f64], dim: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let row_sum = |r: &Range<usize>| {
            let mut s = vec![0.0; dim];
            for i in r.clone() {
                axpy(1.0, &h[i * dim..(i + 1) * dim], &mut s);
            }
            s
        };
        for (lo, hi) in &self.complete {
            let (slo, shi) = (row_sum(lo), row_sum(hi));
            for i in lo.clone() {
                axpy(1.0, &shi, &mut out[i * dim..(i + 1) * dim]);
            }
            for i in hi.clone() {
                axpy(1.0, &slo, &mut out[i * dim..(i + 1) * dim]);
            }
        }
        for &(a, b) in &self.sparse {
            for k in 0..dim {
                out[a * dim + k] += h[b * dim + k];
                out[b * dim + k] += h[a * dim + k];
            }
        }
    }

    /// Mean over each node's closed neighborhood: `(h_i + sum_j h_j) / (1 + deg_i)`.
    fn aggregate(&self, h: &[f64], dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; h.len()];
        self.neighbor_sum(h, dim, &mut out);
        for i in 0..self.len() {
            let scale = 1.0 / (1.0 + self.deg[i]);
            for k in 0..dim {
                out[i * dim + k] = (out[i * dim + k] + h[i * dim + k]) * scale;
            }
        }
        out
    }

    /// Adjoint of [`GnnGraph::aggregate`].
    fn aggregate_backward(&self, d: &[f64], dim: usize) -> Vec<f64> {
        let mut t = d.to_vec();
        for i in 0..self.len() {
            let scale = 1.0 / (1.0 + self.deg[i]);
            t[i * dim..(i + 1) * dim].iter_mut().for_each(|v| *v *= scale);
        }
        let mut out = vec![0.0; d.len()];
        self.neighbor_sum(&t, dim, &mut out);
        axpy(1.0, &t, &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnModel {
    pub settings: Vec<String>,
    pub hidden: usize,
    /// First layer maps the scalar feature to `hidden` units.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `hidden x hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    /// `classes x hidden`, row-major.
    pub c: Vec<f64>,
    pub c0: Vec<f64>,
}

struct GnnPass {
    a1: Vec<f64>,
    z1: Vec<f64>,
    s: Vec<f64>,
    z2: Vec<f64>,
    g: Vec<f64>,
    pooled: Vec<f64>,
    logits: Vec<f64>,
}

/// Gradients with the same layout as [`GnnModel::parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct GnnGrads(pub Vec<f64>);

impl GnnModel {
    /// Uniform initialization in `+-1/sqrt(fan_in)`.
    pub fn init(settings: Vec<String>, hidden: usize, seed: u64) -> Result<Self> {
        if settings.len() < 2 {
            return Err(Error::config("the graph classifier needs at least two settings"));
        }
        if hidden == 0 {
            return Err(Error::config("hidden_dim must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize, fan_in: usize| -> Vec<f64> {
            let b = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-b..b)).collect()
        };
        let k = settings.len();
        Ok(GnnModel {
            w1: draw(hidden, 1),
            b1: draw(hidden, 1),
            w2: draw(hidden * hidden, hidden),
            b2: draw(hidden, hidden),
            c: draw(k * hidden, hidden),
            c0: draw(k, hidden),
            settings,
            hidden,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.settings.len()
    }

    pub fn class_of(&self, setting: &str) -> Result<usize> {
        self.settings
            .iter()
            .position(|s| s == setting)
            .ok_or_else(|| Error::domain(format!("unknown setting '{setting}'")))
    }

    pub fn parameters(&self) -> Vec<f64> {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.c, &self.c0]
            .iter()
            .flat_map(|v| v.iter().copied())
            .collect()
    }

    pub fn set_parameters(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.parameters().len() {
            return Err(Error::Dimension {
                context: "GNN parameters",
                expected: self.parameters().len(),
                got: p.len(),
            });
        }
        let mut rest = p;
        for v in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.c, &mut self.c0] {
            let (head, tail) = rest.split_at(v.len());
            v.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    fn pass(&self, graph: &GnnGraph) -> Result<GnnPass> {
        if graph.is_empty() {
            return Err(Error::domain("graph classifier input has no nodes"));
        }
        let (n, hd) = (graph.len(), self.hidden);
        let a1 = graph.aggregate(&graph.x, 1);
        let mut z1 = vec![0.0; n * hd];
        for i in 0..n {
            for k in 0..hd {
                z1[i * hd + k] = self.w1[k] * a1[i] + self.b1[k];
            }
        }
        let h: Vec<f64> = z1.iter().map(|&v| v.max(0.0)).collect();
        let s = graph.aggregate(&h, hd);
        let mut z2 = vec![0.0; n * hd];
        for i in 0..n {
            let si = &s[i * hd..(i + 1) * hd];
            for k in 0..hd {
                z2[i * hd + k] = self.b2[k] + dot(&self.w2[k * hd..(k + 1) * hd], si);
            }
        }
        let g: Vec<f64> = z2.iter().map(|&v| v.max(0.0)).collect();
        let mut pooled = vec![0.0; hd];
        for i in 0..n {
            axpy(1.0 / n as f64, &g[i * hd..(i + 1) * hd], &mut pooled);
        }
        let logits = (0..self.num_classes())
            .map(|c| self.c0[c] + dot(&self.c[c * hd..(c + 1) * hd], &pooled))
            .collect();
        Ok(GnnPass {
            a1,
            z1,
            s,
            z2,
            g,
            pooled,
            logits,
        })
    }

    pub fn logits(&self, graph: &GnnGraph) -> Result<Vec<f64>> {
        Ok(self.pass(graph)?.logits)
    }

    pub fn forward(&self, graph: &GnnGraph) -> Result<Vec<f64>> {
        Ok(crate::nn::softmax(&self.logits(graph)?))
    }

    pub fn predict(&self, graph: &GnnGraph) -> Result<usize> {
        Ok(argmax(&self.logits(graph)?))
    }

    /// Backpropagates `dlogits`, accumulating parameter gradients into `grads`
    /// (if given) and returning the gradient with respect to node features.
    fn backward(&self, graph: &GnnGraph, pass: &GnnPass, dlogits: &[f64], grads: Option<&mut [f64]>) -> Vec<f64> {
        let (n, hd, k) = (graph.len(), self.hidden, self.num_classes());
        let mut dp = vec![0.0; hd];
        for c in 0..k {
            axpy(dlogits[c], &self.c[c * hd..(c + 1) * hd], &mut dp);
        }
        let mut dz2 = vec![0.0; n * hd];
        for i in 0..n {
            for j in 0..hd {
                if pass.z2[i * hd + j] > 0.0 {
                    dz2[i * hd + j] = dp[j] / n as f64;
                }
            }
        }
        let mut ds = vec![0.0; n * hd];
        for i in 0..n {
            let dzi = &dz2[i * hd..(i + 1) * hd];
            let dsi = &mut ds[i * hd..(i + 1) * hd];
            for (j, &d) in dzi.iter().enumerate() {
                if d != 0.0 {
                    axpy(d, &self.w2[j * hd..(j + 1) * hd], dsi);
                }
            }
        }
        let dh = graph.aggregate_backward(&ds, hd);
        let mut dz1 = dh;
        for (d, &z) in dz1.iter_mut().zip(&pass.z1) {
            if z <= 0.0 {
                *d = 0.0;
            }
        }
        let da1: Vec<f64> = (0..n).map(|i| dot(&self.w1, &dz1[i * hd..(i + 1) * hd])).collect();
        if let Some(gr) = grads {
            let (o_b1, o_w2, o_b2, o_c, o_c0) = (hd, 2 * hd, 2 * hd + hd * hd, 3 * hd + hd * hd, 3 * hd + hd * hd + k * hd);
            for i in 0..n {
                let dzi = &dz1[i * hd..(i + 1) * hd];
                axpy(pass.a1[i], dzi, &mut gr[..hd]);
                axpy(1.0, dzi, &mut gr[o_b1..o_w2]);
                let d2 = &dz2[i * hd..(i + 1) * hd];
                let si = &pass.s[i * hd..(i + 1) * hd];
                for (j, &d) in d2.iter().enumerate() {
                    if d != 0.0 {
                        axpy(d, si, &mut gr[o_w2 + j * hd..o_w2 + (j + 1) * hd]);
                    }
                }
                axpy(1.0, d2, &mut gr[o_b2..o_c]);
            }
            for c in 0..k {
                axpy(dlogits[c], &pass.pooled, &mut gr[o_c + c * hd..o_c + (c + 1) * hd]);
                gr[o_c0 + c] += dlogits[c];
            }
        }
        graph.aggregate_backward(&da1, 1)
    }

    /// Cross-entropy of one labeled graph and its parameter gradient.
    pub fn loss_and_gradient(&self, graph: &GnnGraph, label: usize) -> Result<(f64, GnnGrads)> {
        let pass = self.pass(graph)?;
        let (loss, dlogits) = softmax_cross_entropy(&pass.logits, label)?;
        let mut grads = vec![0.0; self.parameters().len()];
        self.backward(graph, &pass, &dlogits, Some(&mut grads));
        Ok((loss, GnnGrads(grads)))
    }

    /// Gradient of one logit with respect to the node features.
    pub fn logit_feature_gradient(&self, graph: &GnnGraph, class: usize) -> Result<Vec<f64>> {
        let pass = self.pass(graph)?;
        let mut d = vec![0.0; self.num_classes()];
        *d.get_mut(class).ok_or_else(|| Error::domain(format!("class {class} out of range")))? = 1.0;
        Ok(self.backward(graph, &pass, &d, None))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("GNN serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: GnnModel = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let hd = m.hidden;
        let k = m.settings.len();
        let ok = k >= 2
            && m.w1.len() == hd
            && m.b1.len() == hd
            && m.w2.len() == hd * hd
            && m.b2.len() == hd
            && m.c.len() == k * hd
            && m.c0.len() == k;
        if !ok {
            return Err(Error::format("GNN parameter shapes are inconsistent"));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GnnOptimizer {
    /// Plain full-batch gradient descent.
    Gd,
    /// Full-batch Adam (beta1 0.9, beta2 0.999, eps 1e-8).
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub hidden_dim: usize,
    pub optimizer: GnnOptimizer,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fraction of each setting's graphs held out for evaluation.
    pub holdout: f64,
}

impl Default for GnnConfig {
    fn default() -> Self {
        GnnConfig {
            hidden_dim: 16,
            optimizer: GnnOptimizer::Adam,
            epochs: 200,
            lr: 0.01,
            seed: 0,
            holdout: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnTrainReport {
    pub epoch_loss: Vec<f64>,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    pub heldout_size: usize,
}

/// Accuracy of `gnn` on labeled graphs.
pub fn gnn_accuracy(gnn: &GnnModel, graphs: &[(&GnnGraph, usize)]) -> Result<f64> {
    if graphs.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for &(g, y) in graphs {
        hits += usize::from(gnn.predict(g)? == y);
    }
    Ok(hits as f64 / graphs.len() as f64)
}

/// Full-batch training on mean cross-entropy. Each setting's graphs are
/// shuffled with the seed and the last `holdout` fraction is kept for evaluation.
pub fn train_gnn(corpora: &[(String, Vec<GnnGraph>)], cfg: &GnnConfig) -> Result<(GnnModel, GnnTrainReport)> {
    if corpora.len() < 2 {
        return Err(Error::config("graph classifier training needs at least two settings"));
    }
    if let Some((name, gs)) = corpora.iter().find(|(_, gs)| gs.len() < 10) {
        return Err(Error::config(format!("setting '{name}' has {} graphs, need at least 10", gs.len())));
    }
    if !(0.0..1.0).contains(&cfg.holdout) || !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::config("holdout must be in [0, 1) and lr positive"));
    }
    let settings: Vec<String> = corpora.iter().map(|(s, _)| s.clone()).collect();
    let mut gnn = GnnModel::init(settings, cfg.hidden_dim, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (label, (_, graphs)) in corpora.iter().enumerate() {
        let mut order: Vec<usize> = (0..graphs.len()).collect();
        order.shuffle(&mut rng);
        let n_held = (graphs.len() as f64 * cfg.holdout).round() as usize;
        let cut = graphs.len() - n_held;
        train.extend(order[..cut].iter().map(|&i| (&graphs[i], label)));
        held.extend(order[cut..].iter().map(|&i| (&graphs[i], label)));
    }
    let mut report = GnnTrainReport {
        epoch_loss: Vec::with_capacity(cfg.epochs),
        train_accuracy: 0.0,
        heldout_accuracy: 0.0,
        heldout_size: held.len(),
    };
    let n_params = gnn.parameters().len();
    let mut m1 = vec![0.0; n_params];
    let mut m2 = vec![0.0; n_params];
    for epoch in 0..cfg.epochs {
        let mut total = vec![0.0; n_params];
        let mut loss = 0.0;
        for &(g, y) in &train {
            let (l, GnnGrads(gr)) = gnn.loss_and_gradient(g, y)?;
            loss += l;
            axpy(1.0, &gr, &mut total);
        }
        total.iter_mut().for_each(|g| *g /= train.len() as f64);
        let mut p = gnn.parameters();
        match cfg.optimizer {
            GnnOptimizer::Gd => axpy(-cfg.lr, &total, &mut p),
            GnnOptimizer::Adam => {
                let (b1, b2) = (0.9f64, 0.999f64);
                let t = (epoch + 1) as i32;
                let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
                for i in 0..n_params {
                    m1[i] = b1 * m1[i] + (1.0 - b1) * total[i];
                    m2[i] = b2 * m2[i] + (1.0 - b2) * total[i] * total[i];
                    p[i] -= cfg.lr * (m1[i] / c1) / ((m2[i] / c2).sqrt() + 1e-8);
                }
            }
        }
        gnn.set_parameters(&p)?;
        report.epoch_loss.push(loss / train.len() as f64);
    }
    report.train_accuracy = gnn_accuracy(&gnn, &train)?;
    report.heldout_accuracy = gnn_accuracy(&gnn, &held)?;
    Ok((gnn, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    pub target_class: String,
    pub node_scores: BTreeMap<NodeId, f64>,
    pub edge_scores: BTreeMap<EdgeKey, f64>,
}

/// Input-times-gradient node scores `|x_i * d logit_target / d x_i|`.
pub fn node_attribution(gnn: &GnnModel, graph: &GnnGraph, target: &str) -> Result<BTreeMap<NodeId, f64>> {
    let class = gnn.class_of(target)?;
    let grad = gnn.logit_feature_gradient(graph, class)?;
    Ok(graph
        .ids
        .iter()
        .zip(graph.x.iter().zip(&grad))
        .map(|(&id, (&x, &g))| (id, (x * g).abs()))
        .collect())
}

/// Occlusion edge scores `|logit_target(G) - logit_target(G without e)|` for
/// every edge, computed incrementally: removing `u - v` only changes the first
/// layer outputs of `u` and `v`, and therefore only the second layer outputs of
/// `u`, `v` and their neighbors.
pub fn edge_attribution(gnn: &GnnModel, graph: &GnnGraph, target: &str) -> Result<BTreeMap<EdgeKey, f64>> {
    let class = gnn.class_of(target)?;
    let pass = gnn.pass(graph)?;
    let (n, hd) = (graph.len(), gnn.hidden);
    let ct = &gnn.c[class * hd..(class + 1) * hd];
    let h: Vec<f64> = pass.z1.iter().map(|&v| v.max(0.0)).collect();
    let mut s1 = vec![0.0; n];
    graph.neighbor_sum(&graph.x, 1, &mut s1);
    let mut s2 = vec![0.0; n * hd];
    graph.neighbor_sum(&h, hd, &mut s2);
    let cg: Vec<f64> = (0..n).map(|i| dot(ct, &pass.g[i * hd..(i + 1) * hd])).collect();

    let mut stamp_u = vec![usize::MAX; n];
    let mut stamp_v = vec![usize::MAX; n];
    let mut out = BTreeMap::new();
    let mut h_new = [vec![0.0; hd], vec![0.0; hd]];
    let mut dh = [vec![0.0; hd], vec![0.0; hd]];
    let mut q = [vec![0.0; hd], vec![0.0; hd]];
    let mut buf = vec![0.0; hd];
    for (e_idx, (u, v)) in graph.edges().enumerate() {
        let ends = [u, v];
        for side in 0..2 {
            let (me, other) = (ends[side], ends[1 - side]);
            let a = (graph.x[me] + s1[me] - graph.x[other]) / graph.deg[me];
            for k in 0..hd {
                h_new[side][k] = (gnn.w1[k] * a + gnn.b1[k]).max(0.0);
                dh[side][k] = h_new[side][k] - h[me * hd + k];
            }
            for k in 0..hd {
                q[side][k] = dot(&gnn.w2[k * hd..(k + 1) * hd], &dh[side]);
            }
        }
        let mut delta = 0.0;
        // Endpoints lose each other and see their own new first-layer output.
        for side in 0..2 {
            let (me, other) = (ends[side], ends[1 - side]);
            for k in 0..hd {
                buf[k] = (h_new[side][k] + s2[me * hd + k] - h[other * hd + k]) / graph.deg[me];
            }
            let mut val = 0.0;
            for k in 0..hd {
                val += ct[k] * (gnn.b2[k] + dot(&gnn.w2[k * hd..(k + 1) * hd], &buf)).max(0.0);
            }
            delta += val - cg[me];
        }
        let moved = [dh[0].iter().any(|&d| d != 0.0), dh[1].iter().any(|&d| d != 0.0)];
        if moved[0] || moved[1] {
            graph.for_each_neighbor(v, |i| stamp_v[i] = e_idx);
            graph.for_each_neighbor(u, |i| stamp_u[i] = e_idx);
            let mut visit = |i: usize, shift_u: bool, shift_v: bool| {
                let scale = 1.0 / (1.0 + graph.deg[i]);
                let mut val = 0.0;
                for k in 0..hd {
                    let mut z = pass.z2[i * hd + k];
                    if shift_u {
                        z += q[0][k] * scale;
                    }
                    if shift_v {
                        z += q[1][k] * scale;
                    }
                    val += ct[k] * z.max(0.0);
                }
                delta += val - cg[i];
            };
            if moved[0] {
                graph.for_each_neighbor(u, |i| {
                    if i != v {
                        visit(i, true, moved[1] && stamp_v[i] == e_idx);
                    }
                });
            }
            if moved[1] {
                graph.for_each_neighbor(v, |i| {
                    if i != u && !(moved[0] && stamp_u[i] == e_idx) {
                        visit(i, false, true);
                    }
                });
            }
        }
        out.insert(graph.edge_key((u, v)), (delta / n as f64).abs());
    }
    Ok(out)
}

/// Reference implementation of one occlusion score: rebuilds the graph without
/// the edge and reruns the classifier.
pub fn edge_occlusion_brute(gnn: &GnnModel, graph: &GnnGraph, target: &str, edge: (usize, usize)) -> Result<f64> {
    let class = gnn.class_of(target)?;
    let base = gnn.logits(graph)?[class];
    let rest: Vec<(usize, usize)> = graph.edges().filter(|&e| e != edge).collect();
    let cut = GnnGraph::from_edges(graph.x.clone(), &rest)?;
    Ok((base - gnn.logits(&cut)?[class]).abs())
}

pub fn attribute(gnn: &GnnModel, graph: &GnnGraph, target: &str) -> Result<Attribution> {
    Ok(Attribution {
        target_class: target.to_string(),
        node_scores: node_attribution(gnn, graph, target)?,
        edge_scores: edge_attribution(gnn, graph, target)?,
    })
}

/// Running per-setting attribution means. Node scores are zero-filled: a node
/// absent from an IPG contributes 0 to that IPG's term.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttributionSummary {
    pub node_graphs: usize,
    pub node_sum: BTreeMap<NodeId, f64>,
    pub edge_graphs: usize,
    pub edge_sum: BTreeMap<EdgeKey, f64>,
}

impl AttributionSummary {
    pub fn add_nodes(&mut self, scores: &BTreeMap<NodeId, f64>) {
        self.node_graphs += 1;
        for (&k, &v) in scores {
            *self.node_sum.entry(k).or_default() += v;
        }
    }

    pub fn add_edges(&mut self, scores: &BTreeMap<EdgeKey, f64>) {
        self.edge_graphs += 1;
        for (&k, &v) in scores {
            *self.edge_sum.entry(k).or_default() += v;
        }
    }

    pub fn node_means(&self) -> BTreeMap<NodeId, f64> {
        means(&self.node_sum, self.node_graphs)
    }

    pub fn edge_means(&self) -> BTreeMap<EdgeKey, f64> {
        means(&self.edge_sum, self.edge_graphs)
    }
}

fn means<K: Ord + Copy>(sum: &BTreeMap<K, f64>, n: usize) -> BTreeMap<K, f64> {
    sum.iter().map(|(&k, &v)| (k, if n == 0 { 0.0 } else { v / n as f64 })).collect()
}

/// Three-way split of the influential items of two settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition<K: Ord> {
    pub desired_only: BTreeSet<K>,
    pub undesired_only: BTreeSet<K>,
    pub shared: BTreeSet<K>,
    pub desired_cutoff: f64,
    pub undesired_cutoff: f64,
}

impl<K: Ord + Copy> Partition<K> {
    pub fn influential_in_desired(&self, k: &K) -> bool {
        self.desired_only.contains(k) || self.shared.contains(k)
    }

    pub fn influential_in_undesired(&self, k: &K) -> bool {
        self.undesired_only.contains(k) || self.shared.contains(k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluentialSets {
    pub percentile: f64,
    pub nodes: Partition<NodeId>,
    pub edges: Partition<EdgeKey>,
}

/// Items scoring at or above the `percentile` of the scores (and above zero).
fn influential<K: Ord + Copy>(scores: &BTreeMap<K, f64>, percentile: f64) -> (BTreeSet<K>, f64) {
    if scores.is_empty() {
        return (BTreeSet::new(), f64::INFINITY);
    }
    let values: Vec<f64> = scores.values().copied().collect();
    let cutoff = quantile_sorted(&sorted_copy(&values), percentile / 100.0);
    let set = scores
        .iter()
        .filter(|&(_, &v)| v >= cutoff && v > 0.0)
        .map(|(&k, _)| k)
        .collect();
    (set, cutoff)
}

pub fn partition<K: Ord + Copy>(desired: &BTreeMap<K, f64>, undesired: &BTreeMap<K, f64>, percentile: f64) -> Result<Partition<K>> {
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::config(format!("percentile {percentile} must be in (0, 100]")));
    }
    let (d, dc) = influential(desired, percentile);
    let (u, uc) = influential(undesired, percentile);
    Ok(Partition {
        desired_only: d.difference(&u).copied().collect(),
        undesired_only: u.difference(&d).copied().collect(),
        shared: d.intersection(&u).copied().collect(),
        desired_cutoff: dc,
        undesired_cutoff: uc,
    })
}

pub fn influential_sets(desired: &AttributionSummary, undesired: &AttributionSummary, percentile: f64) -> Result<InfluentialSets> {
    Ok(InfluentialSets {
        percentile,
        nodes: partition(&desired.node_means(), &undesired.node_means(), percentile)?,
        edges: partition(&desired.edge_means(), &undesired.edge_means(), percentile)?,
    })
}

#[derive(Serialize, Deserialize)]
struct InfluentialDoc {
    percentile: f64,
    benign_only: Vec<(u32, u32)>,
    adversarial_only: Vec<(u32, u32)>,
    shared: Vec<(u32, u32)>,
    counts: BTreeMap<String, usize>,
    thresholds: BTreeMap<String, f64>,
    edges: EdgeDoc,
}

#[derive(Serialize, Deserialize)]
struct EdgeDoc {
    benign_only: Vec<[u32; 4]>,
    adversarial_only: Vec<[u32; 4]>,
    shared: Vec<[u32; 4]>,
    thresholds: BTreeMap<String, f64>,
}

fn ids(s: &BTreeSet<NodeId>) -> Vec<(u32, u32)> {
    s.iter().map(|n| (n.layer, n.unit)).collect()
}

fn edge_ids(s: &BTreeSet<EdgeKey>) -> Vec<[u32; 4]> {
    s.iter().map(|(a, b)| [a.layer, a.unit, b.layer, b.unit]).collect()
}

fn thresholds(dc: f64, uc: f64) -> BTreeMap<String, f64> {
    // JSON has no infinity; an empty score map is written as cutoff 0.
    let fin = |v: f64| if v.is_finite() { v } else { 0.0 };
    BTreeMap::from([("benign".to_string(), fin(dc)), ("adversarial".to_string(), fin(uc))])
}

impl InfluentialSets {
    pub fn to_json(&self) -> String {
        let n = &self.nodes;
        let doc = InfluentialDoc {
            percentile: self.percentile,
            benign_only: ids(&n.desired_only),
            adversarial_only: ids(&n.undesired_only),
            shared: ids(&n.shared),
            counts: BTreeMap::from([
                ("benign_only".to_string(), n.desired_only.len()),
                ("adversarial_only".to_string(), n.undesired_only.len()),
                ("shared".to_string(), n.shared.len()),
                ("edges_benign_only".to_string(), self.edges.desired_only.len()),
                ("edges_adversarial_only".to_string(), self.edges.undesired_only.len()),
                ("edges_shared".to_string(), self.edges.shared.len()),
            ]),
            thresholds: thresholds(n.desired_cutoff, n.undesired_cutoff),
            edges: EdgeDoc {
                benign_only: edge_ids(&self.edges.desired_only),
                adversarial_only: edge_ids(&self.edges.undesired_only),
                shared: edge_ids(&self.edges.shared),
                thresholds: thresholds(self.edges.desired_cutoff, self.edges.undesired_cutoff),
            },
        };
        serde_json::to_string_pretty(&doc).expect("influential sets serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let d: InfluentialDoc = serde_json::from_str(text)?;
        let nodes = |v: Vec<(u32, u32)>| v.into_iter().map(|(layer, unit)| NodeId { layer, unit }).collect();
        let edges = |v: Vec<[u32; 4]>| {
            v.into_iter()
                .map(|e| (NodeId { layer: e[0], unit: e[1] }, NodeId { layer: e[2], unit: e[3] }))
                .collect()
        };
        let cut = |t: &BTreeMap<String, f64>, k: &str| t.get(k).copied().unwrap_or(0.0);
        Ok(InfluentialSets {
            percentile: d.percentile,
            nodes: Partition {
                desired_only: nodes(d.benign_only),
                undesired_only: nodes(d.adversarial_only),
                shared: nodes(d.shared),
                desired_cutoff: cut(&d.thresholds, "benign"),
                undesired_cutoff: cut(&d.thresholds, "adversarial"),
            },
            edges: Partition {
                desired_only: edges(d.edges.benign_only),
                undesired_only: edges(d.edges.adversarial_only),
                shared: edges(d.edges.shared),
                desired_cutoff: cut(&d.edges.thresholds, "benign"),
                undesired_cutoff: cut(&d.edges.thresholds, "adversarial"),
            },
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeScoreRow {
    layer: u32,
    unit: u32,
    setting: String,
    mean_node_score: f64,
}

/// One row per (layer, unit, setting) with the setting's mean node score.
pub fn write_node_attribution_csv(path: impl AsRef<Path>, per_setting: &BTreeMap<String, BTreeMap<NodeId, f64>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (setting, scores) in per_setting {
        for (id, &s) in scores {
            w.serialize(NodeScoreRow {
                layer: id.layer,
                unit: id.unit,
                setting: setting.clone(),
                mean_node_score: s,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_node_attribution_csv(path: impl AsRef<Path>) -> Result<BTreeMap<String, BTreeMap<NodeId, f64>>> {
    let mut out: BTreeMap<String, BTreeMap<NodeId, f64>> = BTreeMap::new();
    for row in csv::Reader::from_path(path)?.deserialize() {
        let r: NodeScoreRow = row?;
        out.entry(r.setting)
            .or_default()
            .insert(NodeId { layer: r.layer, unit: r.unit }, r.mean_node_score);
    }
    Ok(out)
}
