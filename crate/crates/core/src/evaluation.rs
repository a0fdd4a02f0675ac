//! Scoring repair actions: trade-off score, the cumulative accept/queue loop,
//! layer ordering search, and before/after accuracy reports.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::repair::{ActionKind, RepairAction, RepairPlan};
use crate::tensor::argmax;

/// Accuracies of one setting before and after a repair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPair {
    pub before: f64,
    pub after: f64,
}

impl AccuracyPair {
    pub fn new(before: f64, after: f64) -> Self {
        AccuracyPair { before, after }
    }

    pub fn delta(&self) -> f64 {
        self.after - self.before
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffInput {
    pub nominal: AccuracyPair,
    pub targets: Vec<AccuracyPair>,
}

/// Nominal accuracy change plus the mean accuracy change over target settings.
pub fn tradeoff_score(inp: &TradeoffInput) -> Result<f64> {
    if inp.targets.is_empty() {
        return Err(Error::config("trade-off score needs at least one target setting"));
    }
    let target = inp.targets.iter().map(AccuracyPair::delta).sum::<f64>() / inp.targets.len() as f64;
    Ok(inp.nominal.delta() + target)
}

/// A labeled evaluation set for one setting.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub name: String,
    pub data: Dataset,
}

impl EvalSet {
    pub fn new(name: impl Into<String>, data: Dataset) -> Self {
        EvalSet { name: name.into(), data }
    }
}

struct CachedSet {
    name: String,
    labels: Vec<usize>,
    /// Per sample, the outputs of every model layer on the unpatched pass.
    traces: Vec<Vec<Vec<f64>>>,
    inputs: Vec<Vec<f64>>,
    baseline: f64,
}

/// Accuracies of the nominal set and each target set under one action set.
#[derive(Debug, Clone, PartialEq)]
pub struct Accuracies {
    pub nominal: f64,
    pub targets: Vec<f64>,
}

/// Measures accuracies under patched inference, reusing unpatched layer
/// outputs so each evaluation only recomputes layers after the first patch.
pub struct Evaluator<'m> {
    model: &'m Model,
    nominal: CachedSet,
    targets: Vec<CachedSet>,
}

impl<'m> Evaluator<'m> {
    pub fn new(model: &'m Model, nominal: &EvalSet, targets: &[EvalSet]) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::config("evaluation needs at least one target setting"));
        }
        let cache = |set: &EvalSet| -> Result<CachedSet> {
            if set.data.is_empty() {
                return Err(Error::config(format!("evaluation set '{}' is empty", set.name)));
            }
            let mut traces = Vec::with_capacity(set.data.len());
            let mut inputs = Vec::with_capacity(set.data.len());
            let mut correct = 0usize;
            for (x, y) in set.data.iter() {
                let (logits, trace) = model.forward(x)?;
                correct += usize::from(argmax(&logits) == y);
                traces.push((0..model.layers().len()).map(|l| trace.layer(l).to_vec()).collect());
                inputs.push(x.to_vec());
            }
            Ok(CachedSet {
                name: set.name.clone(),
                labels: set.data.labels().to_vec(),
                traces,
                inputs,
                baseline: correct as f64 / set.data.len() as f64,
            })
        };
        Ok(Evaluator {
            model,
            nominal: cache(nominal)?,
            targets: targets.iter().map(cache).collect::<Result<_>>()?,
        })
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn setting_names(&self) -> (String, Vec<String>) {
        (self.nominal.name.clone(), self.targets.iter().map(|t| t.name.clone()).collect())
    }

    pub fn baseline(&self) -> Accuracies {
        Accuracies {
            nominal: self.nominal.baseline,
            targets: self.targets.iter().map(|t| t.baseline).collect(),
        }
    }

    fn set_accuracy(&self, set: &CachedSet, plan: &RepairPlan) -> f64 {
        let Some(first) = plan.first_layer() else {
            return set.baseline;
        };
        let mut correct = 0usize;
        for (i, &y) in set.labels.iter().enumerate() {
            let logits = if first == 0 {
                let (logits, _) = self.model.forward_hooked(&set.inputs[i], plan).expect("cached input has the model's dimension");
                logits
            } else {
                self.model.resume(first - 1, set.traces[i][first - 1].clone(), plan)
            };
            correct += usize::from(argmax(&logits) == y);
        }
        correct as f64 / set.labels.len() as f64
    }

    pub fn accuracies(&self, actions: &[RepairAction]) -> Result<Accuracies> {
        let plan = RepairPlan::new(self.model, actions)?;
        Ok(Accuracies {
            nominal: self.set_accuracy(&self.nominal, &plan),
            targets: self.targets.iter().map(|t| self.set_accuracy(t, &plan)).collect(),
        })
    }

    /// Trade-off score of applying `actions` together, relative to the unpatched model.
    pub fn score(&self, actions: &[RepairAction]) -> Result<f64> {
        let acc = self.accuracies(actions)?;
        let base = self.baseline();
        tradeoff_score(&TradeoffInput {
            nominal: AccuracyPair::new(base.nominal, acc.nominal),
            targets: base.targets.iter().zip(&acc.targets).map(|(&b, &a)| AccuracyPair::new(b, a)).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredAction {
    pub action: RepairAction,
    pub ts: f64,
}

impl ScoredAction {
    pub fn rejected(&self) -> bool {
        self.ts <= 0.0
    }
}

/// Scores each action applied alone. Actions with TS <= 0 are reported as rejected.
pub fn evaluate_single_actions(ev: &Evaluator<'_>, actions: &[RepairAction]) -> Result<Vec<ScoredAction>> {
    actions
        .iter()
        .map(|a| {
            Ok(ScoredAction {
                action: a.clone(),
                ts: ev.score(std::slice::from_ref(a))?,
            })
        })
        .collect()
}

/// Indices sorted by score descending, ties by (layer, unit) then index.
fn order_by_score(scores: &[(usize, f64)], actions: &[ScoredAction]) -> Vec<usize> {
    let mut v = scores.to_vec();
    v.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| actions[a.0].action.node.cmp(&actions[b.0].action.node))
            .then_with(|| a.0.cmp(&b.0))
    });
    v.into_iter().map(|(i, _)| i).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionStatus {
    Accepted,
    Queued,
    Rejected,
}

impl ActionStatus {
    pub fn name(self) -> &'static str {
        match self {
            ActionStatus::Accepted => "accepted",
            ActionStatus::Queued => "queued",
            ActionStatus::Rejected => "rejected",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    /// 0 for the single-action rejection pass.
    pub iteration: usize,
    pub action_index: usize,
    pub action: RepairAction,
    /// Single-action score.
    pub ts: f64,
    pub cum_ts_after: f64,
    pub status: ActionStatus,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvaluationTrace {
    pub single_ts: Vec<f64>,
    /// Cum_TS after each accepted action, in acceptance order.
    pub trajectory: Vec<f64>,
    pub accepted: Vec<usize>,
    /// Actions still deferred when the loop stopped.
    pub queued: Vec<usize>,
    pub rejected: Vec<usize>,
    pub iterations: usize,
    pub rows: Vec<TraceRow>,
}

impl EvaluationTrace {
    pub fn final_cum_ts(&self) -> f64 {
        self.trajectory.last().copied().unwrap_or(0.0)
    }

    pub fn accepted_actions(&self, scored: &[ScoredAction]) -> Vec<RepairAction> {
        self.accepted.iter().map(|&i| scored[i].action.clone()).collect()
    }
}

pub const CONVERGENCE_TOL: f64 = 1e-9;

/// Applies actions in score order, keeping those that do not lower Cum_TS and
/// queueing the rest. Later iterations retry the queue on top of the accepted
/// set, ordered by their marginal score there. Stops when an iteration improves
/// Cum_TS by less than [`CONVERGENCE_TOL`], the queue empties, or after
/// `max_iters` iterations.
pub fn cumulative_loop(ev: &Evaluator<'_>, scored: &[ScoredAction], max_iters: usize) -> Result<EvaluationTrace> {
    let mut tr = EvaluationTrace {
        single_ts: scored.iter().map(|s| s.ts).collect(),
        ..Default::default()
    };
    let mut candidates = Vec::new();
    for (i, s) in scored.iter().enumerate() {
        if s.rejected() {
            tr.rejected.push(i);
            tr.rows.push(TraceRow {
                iteration: 0,
                action_index: i,
                action: s.action.clone(),
                ts: s.ts,
                cum_ts_after: 0.0,
                status: ActionStatus::Rejected,
            });
        } else {
            candidates.push((i, s.ts));
        }
    }
    let mut queue = order_by_score(&candidates, scored);
    let mut accepted_actions: Vec<RepairAction> = Vec::new();
    let mut cum = 0.0;
    while !queue.is_empty() && tr.iterations < max_iters {
        tr.iterations += 1;
        let start = cum;
        let mut next = Vec::new();
        for i in queue {
            accepted_actions.push(scored[i].action.clone());
            let ts = ev.score(&accepted_actions)?;
            let status = if ts >= cum {
                cum = ts;
                tr.accepted.push(i);
                tr.trajectory.push(cum);
                ActionStatus::Accepted
            } else {
                accepted_actions.pop();
                next.push(i);
                ActionStatus::Queued
            };
            tr.rows.push(TraceRow {
                iteration: tr.iterations,
                action_index: i,
                action: scored[i].action.clone(),
                ts: scored[i].ts,
                cum_ts_after: cum,
                status,
            });
        }
        queue = next;
        if queue.is_empty() || cum - start < CONVERGENCE_TOL {
            break;
        }
        let mut marginal = Vec::with_capacity(queue.len());
        for &i in &queue {
            accepted_actions.push(scored[i].action.clone());
            marginal.push((i, ev.score(&accepted_actions)? - cum));
            accepted_actions.pop();
        }
        queue = order_by_score(&marginal, scored);
    }
    tr.queued = queue;
    Ok(tr)
}

pub fn write_trace_csv(tr: &EvaluationTrace, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "action_index", "layer", "unit", "kind", "TS", "cum_ts_after", "status"])?;
    for r in &tr.rows {
        let kind = match r.action.kind {
            ActionKind::Nullify => "nullify",
            ActionKind::ShiftToReference => "shift_to_reference",
        };
        w.write_record([
            r.iteration.to_string(),
            r.action_index.to_string(),
            r.action.node.layer.to_string(),
            r.action.node.unit.to_string(),
            kind.to_string(),
            r.ts.to_string(),
            r.cum_ts_after.to_string(),
            r.status.name().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row of an exported trace.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct TraceCsvRow {
    pub iteration: usize,
    pub action_index: usize,
    pub layer: u32,
    pub unit: u32,
    pub kind: String,
    #[serde(rename = "TS")]
    pub ts: f64,
    pub cum_ts_after: f64,
    pub status: String,
}

pub fn read_trace_csv(path: impl AsRef<Path>) -> Result<Vec<TraceCsvRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<TraceCsvRow>, _>>()?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    Exhaustive,
    Greedy,
}

impl SearchMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exhaustive" => Ok(SearchMode::Exhaustive),
            "greedy" => Ok(SearchMode::Greedy),
            other => Err(Error::config(format!("unknown search mode '{other}'"))),
        }
    }
}

pub const MAX_EXHAUSTIVE_LAYERS: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSearchResult {
    pub ordering: Vec<usize>,
    pub cum_ts: f64,
    pub actions: Vec<RepairAction>,
}

/// Processes layers in `order`, keeping each action of a layer's set that does
/// not lower Cum_TS on top of everything kept so far.
pub fn evaluate_layer_order(
    ev: &Evaluator<'_>,
    per_layer: &BTreeMap<usize, Vec<RepairAction>>,
    order: &[usize],
) -> Result<(f64, Vec<RepairAction>)> {
    let mut kept: Vec<RepairAction> = Vec::new();
    let mut cum = 0.0;
    for layer in order {
        for a in per_layer.get(layer).map(Vec::as_slice).unwrap_or_default() {
            kept.push(a.clone());
            let ts = ev.score(&kept)?;
            if ts >= cum {
                cum = ts;
            } else {
                kept.pop();
            }
        }
    }
    Ok((cum, kept))
}

fn next_permutation(v: &mut [usize]) -> bool {
    let Some(i) = (1..v.len()).rev().find(|&i| v[i - 1] < v[i]) else {
        return false;
    };
    let j = (i..v.len()).rev().find(|&j| v[j] > v[i - 1]).expect("suffix has a larger element");
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// Best layer ordering. Exhaustive mode tries every permutation in lexicographic
/// order and keeps the first strict maximum; greedy mode appends the layer that
/// maximizes Cum_TS at each step (smallest layer on ties).
pub fn layer_order_search(
    ev: &Evaluator<'_>,
    per_layer: &BTreeMap<usize, Vec<RepairAction>>,
    mode: SearchMode,
) -> Result<LayerSearchResult> {
    let layers: Vec<usize> = per_layer.keys().copied().collect();
    match mode {
        SearchMode::Exhaustive => {
            if layers.len() > MAX_EXHAUSTIVE_LAYERS {
                return Err(Error::config(format!(
                    "exhaustive search over {} layers exceeds {MAX_EXHAUSTIVE_LAYERS}; use greedy",
                    layers.len()
                )));
            }
            let mut perm = layers.clone();
            let (cum, actions) = evaluate_layer_order(ev, per_layer, &perm)?;
            let mut best = LayerSearchResult {
                ordering: perm.clone(),
                cum_ts: cum,
                actions,
            };
            while next_permutation(&mut perm) {
                let (cum, actions) = evaluate_layer_order(ev, per_layer, &perm)?;
                if cum > best.cum_ts {
                    best = LayerSearchResult {
                        ordering: perm.clone(),
                        cum_ts: cum,
                        actions,
                    };
                }
            }
            Ok(best)
        }
        SearchMode::Greedy => {
            let mut ordering = Vec::new();
            let mut remaining = layers;
            let mut best = (0.0, Vec::new());
            while !remaining.is_empty() {
                let mut pick: Option<(usize, f64, Vec<RepairAction>)> = None;
                for (k, &l) in remaining.iter().enumerate() {
                    let mut trial = ordering.clone();
                    trial.push(l);
                    let (cum, acts) = evaluate_layer_order(ev, per_layer, &trial)?;
                    if pick.as_ref().is_none_or(|p| cum > p.1) {
                        pick = Some((k, cum, acts));
                    }
                }
                let (k, cum, acts) = pick.expect("remaining is non-empty");
                ordering.push(remaining.remove(k));
                best = (cum, acts);
            }
            Ok(LayerSearchResult {
                ordering,
                cum_ts: best.0,
                actions: best.1,
            })
        }
    }
}

/// Groups actions by graph layer, preserving their order.
pub fn group_by_layer(actions: &[RepairAction]) -> BTreeMap<usize, Vec<RepairAction>> {
    let mut map: BTreeMap<usize, Vec<RepairAction>> = BTreeMap::new();
    for a in actions {
        map.entry(a.node.layer()).or_default().push(a.clone());
    }
    map
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingAccuracy {
    pub setting: String,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerActionCount {
    pub nullify: usize,
    pub shift_to_reference: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MreReport {
    pub nominal: SettingAccuracy,
    pub targets: Vec<SettingAccuracy>,
    pub tradeoff_score: f64,
    pub num_actions: usize,
    pub actions_per_layer: BTreeMap<usize, LayerActionCount>,
}

impl MreReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Before/after accuracy per setting with the given actions applied.
pub fn mre_report(ev: &Evaluator<'_>, actions: &[RepairAction]) -> Result<MreReport> {
    let base = ev.baseline();
    let after = ev.accuracies(actions)?;
    let (nominal_name, target_names) = ev.setting_names();
    let mut per_layer: BTreeMap<usize, LayerActionCount> = BTreeMap::new();
    for a in actions {
        let c = per_layer.entry(a.node.layer()).or_default();
        match a.kind {
            ActionKind::Nullify => c.nullify += 1,
            ActionKind::ShiftToReference => c.shift_to_reference += 1,
        }
    }
    let targets: Vec<SettingAccuracy> = target_names
        .into_iter()
        .zip(base.targets.iter().zip(&after.targets))
        .map(|(setting, (&before, &after))| SettingAccuracy { setting, before, after })
        .collect();
    let ts = tradeoff_score(&TradeoffInput {
        nominal: AccuracyPair::new(base.nominal, after.nominal),
        targets: targets.iter().map(|t| AccuracyPair::new(t.before, t.after)).collect(),
    })?;
    Ok(MreReport {
        nominal: SettingAccuracy {
            setting: nominal_name,
            before: base.nominal,
            after: after.nominal,
        },
        targets,
        tradeoff_score: ts,
        num_actions: actions.len(),
        actions_per_layer: per_layer,
    })
}

pub fn save_report(report: &MreReport, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(report.to_json().as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ipg::NodeId;
    use crate::nn::{Activation, Layer};
    use crate::repair::PriorityClass;

    #[test]
    fn ts_examples() {
        let same = TradeoffInput {
            nominal: AccuracyPair::new(0.9, 0.9),
            targets: vec![AccuracyPair::new(0.2, 0.2)],
        };
        assert_eq!(tradeoff_score(&same).unwrap(), 0.0);
        let table = TradeoffInput {
            nominal: AccuracyPair::new(97.70, 97.11),
            targets: vec![AccuracyPair::new(5.89, 73.10)],
        };
        assert!((tradeoff_score(&table).unwrap() - 66.62).abs() < 1e-9);
        let two = TradeoffInput {
            nominal: AccuracyPair::new(0.5, 0.5),
            targets: vec![AccuracyPair::new(0.3, 0.4), AccuracyPair::new(0.6, 0.5)],
        };
        assert!(tradeoff_score(&two).unwrap().abs() < 1e-12);
        let none = TradeoffInput {
            nominal: AccuracyPair::new(0.5, 0.5),
            targets: vec![],
        };
        assert!(matches!(tradeoff_score(&none), Err(Error::Config(_))));
    }

    /// Two inputs, hidden units h0 = x0, h1 = x1 (ReLU); logits (h0 - h1, h1 - h0 + 0.1).
    /// Benign inputs have x1 = 0; adversarial inputs add x1 = 1, flipping class 0 to 1.
    fn fixture() -> (Model, EvalSet, EvalSet) {
        let m = Model::new(
            2,
            2,
            vec![
                Layer::dense(2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], Activation::Relu),
                Layer::dense(2, vec![1.0, -1.0, -1.0, 1.0], vec![0.0, 0.1], Activation::None),
            ],
        )
        .unwrap();
        let benign = Dataset::new(2, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0], vec![0, 0, 1, 1]).unwrap();
        let adv = Dataset::new(2, 2, vec![1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0], vec![0, 0, 1, 1]).unwrap();
        (m, EvalSet::new("benign", benign), EvalSet::new("fgsm", adv))
    }

    fn ev<'m>(m: &'m Model, b: &EvalSet, a: &EvalSet) -> Evaluator<'m> {
        Evaluator::new(m, b, std::slice::from_ref(a)).unwrap()
    }

    #[test]
    fn single_action_scores() {
        let (m, b, a) = fixture();
        let e = ev(&m, &b, &a);
        assert_eq!(e.baseline(), Accuracies { nominal: 1.0, targets: vec![0.5] });
        let null = RepairAction::nullify(NodeId::new(1, 1));
        let identity = RepairAction::shift(NodeId::new(1, 0), 9.0, f64::INFINITY, 0.0, PriorityClass::Regular);
        let scored = evaluate_single_actions(&e, &[null.clone(), identity, null]).unwrap();
        assert!((scored[0].ts - 0.5).abs() < 1e-12);
        assert_eq!(scored[1].ts, 0.0);
        assert!(scored[1].rejected());
        assert_eq!(scored[0].ts, scored[2].ts);
    }

    #[test]
    fn loop_on_trivial_inputs() {
        let (m, b, a) = fixture();
        let e = ev(&m, &b, &a);
        let tr = cumulative_loop(&e, &[], 10).unwrap();
        assert_eq!(tr.iterations, 0);
        assert!(tr.rows.is_empty());
        let scored = evaluate_single_actions(&e, &[RepairAction::nullify(NodeId::new(1, 1))]).unwrap();
        let tr = cumulative_loop(&e, &scored, 10).unwrap();
        assert_eq!(tr.accepted, vec![0]);
        assert!(tr.queued.is_empty());
        assert_eq!(tr.iterations, 1);
    }

    #[test]
    fn next_permutation_is_lexicographic() {
        let mut v = vec![1, 2, 3];
        let mut all = vec![v.clone()];
        while next_permutation(&mut v) {
            all.push(v.clone());
        }
        assert_eq!(all.len(), 6);
        assert!(all.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn exhaustive_limit_is_config_error() {
        let (m, b, a) = fixture();
        let e = ev(&m, &b, &a);
        let per_layer: BTreeMap<usize, Vec<RepairAction>> = (1..=8).map(|l| (l, Vec::new())).collect();
        assert!(matches!(
            layer_order_search(&e, &per_layer, SearchMode::Exhaustive),
            Err(Error::Config(_))
        ));
        assert!(layer_order_search(&e, &per_layer, SearchMode::Greedy).is_ok());
    }

    #[test]
    fn report_without_actions_is_unchanged() {
        let (m, b, a) = fixture();
        let e = ev(&m, &b, &a);
        let r = mre_report(&e, &[]).unwrap();
        assert_eq!(r.nominal.before, r.nominal.after);
        assert_eq!(r.targets[0].before, r.targets[0].after);
        assert_eq!(r.tradeoff_score, 0.0);
        assert_eq!(MreReport::from_json(&r.to_json()).unwrap(), r);
    }
}
