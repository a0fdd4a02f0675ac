//! Repair actions: node selection into nullify / priority / regular sets,
//! reference values, beta masks, and inference-time activation patching.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::empirical::{mean, normalized_stddev, quantile_sorted, setting_delta, sorted_copy, stddev, CorpusValues, StatsMap};
use crate::error::{Error, Result};
use crate::ipg::NodeId;
use crate::nn::{ActivationHook, ActivationTrace, Model};
use crate::structural::InfluentialSets;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PriorityClass {
    #[serde(rename = "N_n")]
    Nullify,
    #[serde(rename = "N_p")]
    Priority,
    #[serde(rename = "N_r")]
    Regular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Nullify,
    ShiftToReference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepairAction {
    pub node: NodeId,
    pub kind: ActionKind,
    /// Present exactly for [`ActionKind::ShiftToReference`].
    pub reference: Option<f64>,
    pub beta: f64,
    pub alpha: f64,
    pub priority_class: PriorityClass,
}

impl RepairAction {
    pub fn nullify(node: NodeId) -> Self {
        RepairAction {
            node,
            kind: ActionKind::Nullify,
            reference: None,
            beta: 0.0,
            alpha: 1.0,
            priority_class: PriorityClass::Nullify,
        }
    }

    pub fn shift(node: NodeId, reference: f64, beta: f64, alpha: f64, priority_class: PriorityClass) -> Self {
        RepairAction {
            node,
            kind: ActionKind::ShiftToReference,
            reference: Some(reference),
            beta,
            alpha,
            priority_class,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::config(format!("beta {} must be non-negative", self.beta)));
        }
        match (self.kind, self.reference) {
            (ActionKind::Nullify, None) => Ok(()),
            (ActionKind::ShiftToReference, Some(r)) if r.is_finite() => Ok(()),
            _ => Err(Error::config(format!("action on {} has an inconsistent reference", self.node))),
        }
    }

    /// Patched value for activation `a` of an activated unit.
    pub fn patch(&self, a: f64) -> f64 {
        match (self.kind, self.reference) {
            (ActionKind::Nullify, _) => 0.0,
            (ActionKind::ShiftToReference, Some(r)) => {
                let delta = a - r;
                if self.beta >= delta.abs() {
                    a - self.alpha * delta
                } else {
                    a
                }
            }
            (ActionKind::ShiftToReference, None) => a,
        }
    }

    fn sort_key(&self) -> (PriorityClass, NodeId) {
        (self.priority_class, self.node)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceAggregator {
    /// Spread (std of min-max normalized values) at or below which the mean is used.
    pub density_std_threshold: f64,
    pub kde_grid_points: usize,
    pub seed: u64,
}

impl Default for ReferenceAggregator {
    fn default() -> Self {
        ReferenceAggregator {
            density_std_threshold: 0.15,
            kde_grid_points: 256,
            seed: 0,
        }
    }
}

impl ReferenceAggregator {
    pub fn validate(&self) -> Result<()> {
        if !(self.density_std_threshold > 0.0) {
            return Err(Error::config("density_std_threshold must be positive"));
        }
        if self.kde_grid_points < 16 {
            return Err(Error::config("kde_grid_points must be at least 16"));
        }
        Ok(())
    }

    /// Same configuration with a seed specific to `node`.
    pub fn for_node(&self, node: NodeId) -> Self {
        let mix = (u64::from(node.layer) << 32) | u64::from(node.unit);
        ReferenceAggregator {
            seed: self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ mix,
            ..self.clone()
        }
    }
}

/// Silverman's rule `0.9 * min(sd, IQR / 1.34) * n^(-1/5)`; when the IQR is zero
/// the standard deviation alone is used.
pub fn silverman_bandwidth(values: &[f64]) -> f64 {
    let sd = stddev(values);
    let s = sorted_copy(values);
    let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * (values.len() as f64).powf(-0.2)
}

/// Gaussian KDE evaluated on `points` equally spaced grid points over `[min, max]`.
pub fn kde_grid(values: &[f64], bandwidth: f64, points: usize) -> (Vec<f64>, Vec<f64>) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let step = (hi - lo) / (points - 1) as f64;
    let grid: Vec<f64> = (0..points).map(|k| lo + step * k as f64).collect();
    let norm = 1.0 / (values.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut density = vec![0.0; points];
    for &v in values {
        for (d, &g) in density.iter_mut().zip(&grid) {
            *d += (-(g - v) * (g - v) * inv).exp();
        }
    }
    density.iter_mut().for_each(|d| *d *= norm);
    (grid, density)
}

/// Indices of local maxima: rising into the point and not falling after it;
/// endpoints count when strictly above their single neighbor.
pub fn local_maxima(f: &[f64]) -> Vec<usize> {
    let n = f.len();
    if n == 1 {
        return vec![0];
    }
    (0..n)
        .filter(|&i| {
            if i == 0 {
                f[0] > f[1]
            } else if i == n - 1 {
                f[n - 1] > f[n - 2]
            } else {
                f[i] > f[i - 1] && f[i] >= f[i + 1]
            }
        })
        .collect()
}

/// Mean when the normalized spread is at most the threshold; otherwise a KDE
/// mode drawn with probability proportional to its density.
pub fn reference_dist_agg(values: &[f64], cfg: &ReferenceAggregator) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::domain("reference of an empty distribution"));
    }
    cfg.validate()?;
    if normalized_stddev(values) <= cfg.density_std_threshold {
        return Ok(mean(values));
    }
    let h = silverman_bandwidth(values);
    let (grid, density) = kde_grid(values, h, cfg.kde_grid_points);
    let modes = local_maxima(&density);
    let total: f64 = modes.iter().map(|&i| density[i]).sum();
    let mut r = ChaCha8Rng::seed_from_u64(cfg.seed).random_range(0.0..total);
    for &i in &modes {
        if r < density[i] {
            return Ok(grid[i]);
        }
        r -= density[i];
    }
    Ok(grid[*modes.last().expect("a continuous density has a maximum")])
}

/// Mean absolute deviation of undesired activations from the desired mean.
pub fn compute_beta(desired: &[f64], undesired: &[f64]) -> Result<f64> {
    if desired.is_empty() || undesired.is_empty() {
        return Err(Error::domain("beta needs activations from both settings"));
    }
    let m = mean(desired);
    Ok(undesired.iter().map(|a| (a - m).abs()).sum::<f64>() / undesired.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionConfig {
    /// Norm order of the activation difference.
    pub p: f64,
    pub alpha: f64,
    pub aggregator: ReferenceAggregator,
    /// Graph layers whose nodes may be repaired.
    pub layers: Vec<usize>,
}

/// Output of node selection. Each list is sorted by node.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActionSet {
    pub nullify: Vec<RepairAction>,
    pub priority: Vec<RepairAction>,
    pub regular: Vec<RepairAction>,
}

impl ActionSet {
    /// All actions ordered by (priority class, layer, unit).
    pub fn all(&self) -> Vec<RepairAction> {
        let mut v: Vec<RepairAction> = self.nullify.iter().chain(&self.priority).chain(&self.regular).cloned().collect();
        v.sort_by_key(RepairAction::sort_key);
        v
    }
}

/// Everything node selection reads, computed from one model's corpora.
pub struct SelectionInputs<'a> {
    pub desired_stats: &'a StatsMap,
    pub undesired_stats: &'a StatsMap,
    pub desired_values: &'a CorpusValues,
    pub undesired_values: &'a CorpusValues,
    pub influential: &'a InfluentialSets,
}

/// Node selection:
/// * nodes never active under the desired setting but active under the undesired
///   one are nullified;
/// * nodes active in both with differing mean activation are shift candidates,
///   priority when influential only for the undesired setting and regular when
///   influential for both. Nodes incident to an influential undesired edge count
///   as influential for the undesired setting.
pub fn generate_actions(inp: &SelectionInputs<'_>, cfg: &ActionConfig) -> Result<ActionSet> {
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(Error::config(format!("alpha {} outside [0, 1]", cfg.alpha)));
    }
    cfg.aggregator.validate()?;
    if inp.desired_values.widths() != inp.undesired_values.widths() {
        return Err(Error::consistency("desired and undesired corpora come from different models"));
    }
    let edge_nodes: BTreeSet<NodeId> = inp
        .influential
        .edges
        .undesired_only
        .iter()
        .chain(&inp.influential.edges.shared)
        .flat_map(|&(a, b)| [a, b])
        .collect();
    let layers: BTreeSet<usize> = cfg.layers.iter().copied().collect();
    let mut out = ActionSet::default();
    for (&node, d) in inp.desired_stats {
        if !layers.contains(&node.layer()) {
            continue;
        }
        let u = inp
            .undesired_stats
            .get(&node)
            .ok_or_else(|| Error::consistency(format!("node {node} missing from undesired statistics")))?;
        if d.activation_frequency == 0.0 && u.activation_frequency > 0.0 {
            out.nullify.push(RepairAction::nullify(node));
            continue;
        }
        if d.count == 0 || u.count == 0 || setting_delta(d, u, cfg.p)? <= 0.0 {
            continue;
        }
        let in_undesired = inp.influential.nodes.influential_in_undesired(&node) || edge_nodes.contains(&node);
        let in_desired = inp.influential.nodes.influential_in_desired(&node);
        let class = match (in_undesired, in_desired) {
            (true, false) => PriorityClass::Priority,
            (true, true) => PriorityClass::Regular,
            _ => continue,
        };
        let dv = inp.desired_values.values(node);
        let reference = reference_dist_agg(dv, &cfg.aggregator.for_node(node))?;
        let beta = compute_beta(dv, inp.undesired_values.values(node))?;
        let action = RepairAction::shift(node, reference, beta, cfg.alpha, class);
        match class {
            PriorityClass::Priority => out.priority.push(action),
            _ => out.regular.push(action),
        }
    }
    Ok(out)
}

/// Actions grouped by model layer, ready to patch forward passes.
#[derive(Debug, Clone)]
pub struct RepairPlan {
    per_layer: Vec<Vec<(usize, RepairAction)>>,
}

impl RepairPlan {
    /// Fails with a configuration error when an action targets the input layer or
    /// a unit outside the model.
    pub fn new(model: &Model, actions: &[RepairAction]) -> Result<Self> {
        let widths = model.graph_widths();
        let mut per_layer = vec![Vec::new(); model.layers().len()];
        for a in actions {
            a.validate()?;
            let (l, u) = (a.node.layer(), a.node.unit());
            if l == 0 || l >= widths.len() || u >= widths[l] {
                return Err(Error::config(format!("action targets node {} outside the repairable model", a.node)));
            }
            per_layer[l - 1].push((u, a.clone()));
        }
        Ok(RepairPlan { per_layer })
    }

    /// Model layer of the earliest patched unit, if any.
    pub fn first_layer(&self) -> Option<usize> {
        self.per_layer.iter().position(|v| !v.is_empty())
    }

    pub fn is_empty(&self) -> bool {
        self.first_layer().is_none()
    }
}

impl ActivationHook for RepairPlan {
    fn after_layer(&self, layer: usize, values: &mut [f64]) {
        for (u, a) in &self.per_layer[layer] {
            let v = values[*u];
            values[*u] = match a.kind {
                ActionKind::Nullify => 0.0,
                ActionKind::ShiftToReference => a.patch(v),
            };
        }
    }
}

/// Patched inference. Model weights are only read.
pub fn apply_actions(model: &Model, actions: &[RepairAction], x: &[f64]) -> Result<(Vec<f64>, ActivationTrace)> {
    let plan = RepairPlan::new(model, actions)?;
    model.forward_hooked(x, &plan)
}

#[derive(Serialize, Deserialize)]
struct ActionDoc {
    layer: u32,
    unit: u32,
    kind: ActionKind,
    reference: Option<f64>,
    beta: f64,
    alpha: f64,
    priority_class: PriorityClass,
}

pub fn actions_to_json(actions: &[RepairAction]) -> String {
    let mut sorted = actions.to_vec();
    sorted.sort_by_key(RepairAction::sort_key);
    let docs: Vec<ActionDoc> = sorted
        .iter()
        .map(|a| ActionDoc {
            layer: a.node.layer,
            unit: a.node.unit,
            kind: a.kind,
            reference: a.reference,
            beta: a.beta,
            alpha: a.alpha,
            priority_class: a.priority_class,
        })
        .collect();
    serde_json::to_string_pretty(&docs).expect("actions serialize")
}

pub fn actions_from_json(text: &str) -> Result<Vec<RepairAction>> {
    let docs: Vec<ActionDoc> = serde_json::from_str(text)?;
    docs.into_iter()
        .map(|d| {
            let a = RepairAction {
                node: NodeId {
                    layer: d.layer,
                    unit: d.unit,
                },
                kind: d.kind,
                reference: d.reference,
                beta: d.beta,
                alpha: d.alpha,
                priority_class: d.priority_class,
            };
            a.validate().map_err(|e| Error::format(e.to_string()))?;
            Ok(a)
        })
        .collect()
}

pub fn save_actions(actions: &[RepairAction], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, actions_to_json(actions))?;
    Ok(())
}

pub fn load_actions(path: impl AsRef<Path>) -> Result<Vec<RepairAction>> {
    actions_from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::empirical::node_stats;
    use crate::ipg::{Ipg, IpgNode};
    use crate::nn::{Activation, Layer};
    use crate::structural::Partition;

    #[test]
    fn mean_branch_examples() {
        let cfg = ReferenceAggregator::default();
        assert_eq!(reference_dist_agg(&[2.5, 2.5, 2.5], &cfg).unwrap(), 2.5);
        // Min-max normalization spreads a tight cluster over [0, 1], so this goes
        // through the KDE branch and lands on the grid point nearest the centre.
        let r = reference_dist_agg(&[0.50, 0.51, 0.49], &cfg).unwrap();
        assert!((r - 0.5).abs() <= 0.02 / 255.0, "r = {r}");
        let tight: Vec<f64> = (0..100).map(|i| if i == 0 { 0.6 } else { 0.5 }).collect();
        assert_eq!(reference_dist_agg(&tight, &cfg).unwrap(), mean(&tight));
        assert!(reference_dist_agg(&[], &cfg).is_err());
    }

    #[test]
    fn bimodal_prefers_heavier_mode() {
        let values = [0.0, 0.0, 0.0, 0.0, 10.0];
        let h = silverman_bandwidth(&values);
        let mut near_zero = 0;
        for seed in 0..200 {
            let cfg = ReferenceAggregator { seed, ..Default::default() };
            let r = reference_dist_agg(&values, &cfg).unwrap();
            assert!(r.abs() <= h || (r - 10.0).abs() <= h, "r = {r}");
            near_zero += usize::from(r.abs() <= h);
        }
        assert!(near_zero >= 140, "{near_zero}");
    }

    /// Independent KDE: normal pdf summed per grid point, grid built by interpolation.
    fn oracle_modes(values: &[f64], points: usize) -> Vec<f64> {
        let n = values.len() as f64;
        let m = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (s.len() - 1) as f64;
            let (i, f) = (pos.floor() as usize, pos.fract());
            s[i] + f * (s[(i + 1).min(s.len() - 1)] - s[i])
        };
        let iqr = q(0.75) - q(0.25);
        let h = 0.9 * if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd } * n.powf(-0.2);
        let (lo, hi) = (s[0], s[s.len() - 1]);
        let grid: Vec<f64> = (0..points).map(|k| lo + (hi - lo) * k as f64 / (points - 1) as f64).collect();
        let pdf = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let f: Vec<f64> = grid.iter().map(|&g| values.iter().map(|&v| pdf((g - v) / h)).sum::<f64>() / (n * h)).collect();
        local_maxima(&f).into_iter().map(|i| grid[i]).collect()
    }

    #[test]
    fn kde_modes_match_brute_force_oracle() {
        for values in [vec![0.0, 0.0, 0.0, 0.0, 10.0], vec![0.1, 0.2, 0.25, 3.0, 3.1, 7.0, 7.2, 7.3]] {
            let h = silverman_bandwidth(&values);
            let (grid, f) = kde_grid(&values, h, 256);
            let ours: Vec<f64> = local_maxima(&f).into_iter().map(|i| grid[i]).collect();
            let theirs = oracle_modes(&values, 256);
            assert_eq!(ours.len(), theirs.len());
            for (a, b) in ours.iter().zip(&theirs) {
                assert!((a - b).abs() < 1e-9);
            }
            for seed in 0..20 {
                let r = reference_dist_agg(&values, &ReferenceAggregator { seed, ..Default::default() }).unwrap();
                assert!(theirs.iter().any(|m| (m - r).abs() < 1e-9));
            }
        }
    }

    #[test]
    fn beta_examples() {
        assert_eq!(compute_beta(&[1.0, 1.0], &[2.0, 4.0]).unwrap(), 2.0);
        assert_eq!(compute_beta(&[3.0; 4], &[3.0; 6]).unwrap(), 0.0);
        let (d, u) = ([0.5, 1.5, 2.0], [1.0, 4.0]);
        let c = 2.5;
        let scaled = compute_beta(&d.map(|v| v * c), &u.map(|v| v * c)).unwrap();
        assert!((scaled - c * compute_beta(&d, &u).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn patch_semantics() {
        let n = NodeId::new(1, 0);
        let a = RepairAction::shift(n, 1.0, f64::INFINITY, 1.0, PriorityClass::Priority);
        assert_eq!(a.patch(3.0), 1.0);
        let blocked = RepairAction::shift(n, 1.0, 0.0, 1.0, PriorityClass::Priority);
        assert_eq!(blocked.patch(3.0), 3.0);
        let identity = RepairAction::shift(n, 1.0, f64::INFINITY, 0.0, PriorityClass::Priority);
        assert_eq!(identity.patch(3.0), 3.0);
        assert_eq!(RepairAction::nullify(n).patch(3.0), 0.0);
    }

    fn small_model() -> Model {
        Model::new(
            2,
            2,
            vec![
                Layer::dense(2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], Activation::Relu),
                Layer::dense(2, vec![1.0, 1.0, -1.0, 2.0], vec![0.0, 0.0], Activation::None),
            ],
        )
        .unwrap()
    }

    #[test]
    fn alpha_zero_is_unpatched_and_weights_stay() {
        let m = small_model();
        let before = m.parameters();
        let acts = [RepairAction::shift(NodeId::new(1, 0), 5.0, f64::INFINITY, 0.0, PriorityClass::Regular)];
        let (patched, _) = apply_actions(&m, &acts, &[0.7, 0.2]).unwrap();
        assert_eq!(patched, m.logits(&[0.7, 0.2]).unwrap());
        assert_eq!(m.parameters(), before);
    }

    #[test]
    fn nullify_propagates_zero() {
        let m = small_model();
        let (logits, trace) = apply_actions(&m, &[RepairAction::nullify(NodeId::new(1, 1))], &[0.7, 0.2]).unwrap();
        assert_eq!(trace.layer(0), &[0.7, 0.0]);
        assert_eq!(logits, vec![0.7, -0.7]);
    }

    #[test]
    fn out_of_range_action_is_config_error() {
        let m = small_model();
        for node in [NodeId::new(1, 5), NodeId::new(0, 0), NodeId::new(4, 0)] {
            assert!(matches!(apply_actions(&m, &[RepairAction::nullify(node)], &[0.0, 0.0]), Err(Error::Config(_))));
        }
    }

    fn corpus(setting: &str, rows: &[&[(usize, f64)]]) -> CorpusValues {
        let gs: Vec<Ipg> = rows
            .iter()
            .map(|r| {
                let nodes = r
                    .iter()
                    .map(|&(u, a)| IpgNode { id: NodeId::new(1, u), activation: a })
                    .collect();
                Ipg::new("m", "x", setting, 0, nodes, vec![])
            })
            .collect();
        CorpusValues::from_ipgs(setting, &[0, 4], &gs).unwrap()
    }

    #[test]
    fn selection_fixture() {
        // unit 0: only undesired -> N_n; unit 1: identical -> none;
        // unit 2: shifted, influential only undesired -> N_p; unit 3: shifted, influential both -> N_r.
        let d = corpus("benign", &[&[(1, 1.0), (2, 1.1), (3, 1.0)], &[(1, 1.0), (2, 1.1), (3, 1.0)]]);
        let u = corpus("fgsm", &[&[(0, 0.4), (1, 1.0), (2, 3.0), (3, 2.0)], &[(1, 1.0), (2, 3.0), (3, 2.0)]]);
        let (ds, us) = (node_stats(&d).unwrap(), node_stats(&u).unwrap());
        let n = |i| NodeId::new(1, i);
        let influential = InfluentialSets {
            percentile: 90.0,
            nodes: Partition {
                desired_only: BTreeSet::new(),
                undesired_only: [n(2), n(1)].into(),
                shared: [n(3)].into(),
                desired_cutoff: 0.0,
                undesired_cutoff: 0.0,
            },
            edges: Partition {
                desired_only: BTreeSet::new(),
                undesired_only: BTreeSet::new(),
                shared: BTreeSet::new(),
                desired_cutoff: 0.0,
                undesired_cutoff: 0.0,
            },
        };
        let cfg = ActionConfig {
            p: 1.0,
            alpha: 1.0,
            aggregator: ReferenceAggregator::default(),
            layers: vec![1],
        };
        let set = generate_actions(
            &SelectionInputs {
                desired_stats: &ds,
                undesired_stats: &us,
                desired_values: &d,
                undesired_values: &u,
                influential: &influential,
            },
            &cfg,
        )
        .unwrap();
        let nodes = |v: &[RepairAction]| v.iter().map(|a| a.node).collect::<Vec<_>>();
        assert_eq!(nodes(&set.nullify), vec![n(0)]);
        assert_eq!(nodes(&set.priority), vec![n(2)]);
        assert_eq!(nodes(&set.regular), vec![n(3)]);
        let p = &set.priority[0];
        assert!((p.reference.unwrap() - 1.1).abs() < 1e-12);
        assert!((p.beta - 1.9).abs() < 1e-12);
    }

    #[test]
    fn actions_json_round_trip_sorted() {
        let acts = vec![
            RepairAction::shift(NodeId::new(2, 1), 0.5, 0.25, 1.0, PriorityClass::Regular),
            RepairAction::nullify(NodeId::new(3, 0)),
            RepairAction::shift(NodeId::new(1, 4), 1.5, 2.0, 0.5, PriorityClass::Priority),
        ];
        let back = actions_from_json(&actions_to_json(&acts)).unwrap();
        let order: Vec<_> = back.iter().map(|a| a.node).collect();
        assert_eq!(order, vec![NodeId::new(3, 0), NodeId::new(1, 4), NodeId::new(2, 1)]);
        assert_eq!(back[2], acts[0]);
    }
}
