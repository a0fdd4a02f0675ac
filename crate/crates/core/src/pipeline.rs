//! Staged pipeline: train, attack, extract IPGs, characterize, train the graph
//! classifier, attribute, generate and evaluate repair actions, report.
//!
//! Every stage reads its inputs from and writes its outputs to the output
//! directory, so stages can be rerun independently.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::attack_dataset;
use crate::config::PipelineConfig;
use crate::data::{gen_synthetic, load_dataset_idx, save_dataset_idx, Dataset, DatasetSpec};
use crate::empirical::{layer_summaries, node_stats, write_layer_summaries_csv, write_node_stats_csv, CorpusValues, StatsMap};
use crate::error::{Error, Result};
use crate::evaluation::{
    cumulative_loop, evaluate_single_actions, group_by_layer, layer_order_search, mre_report, save_report, write_trace_csv, EvalSet,
    Evaluator, MreReport,
};
use crate::ipg::{check_model_id, for_each_in_corpus, ActivationCriterion, CorpusWriter, IpgExtractor};
use crate::nn::{accuracy, train_sgd, Model};
use crate::repair::{generate_actions, load_actions, save_actions, ActionConfig, SelectionInputs};
use crate::structural::{
    influential_sets, node_attribution, edge_attribution, train_gnn, write_node_attribution_csv, AttributionSummary, GnnGraph, GnnModel,
    InfluentialSets,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Train,
    Attack,
    ExtractIpg,
    Characterize,
    TrainGnn,
    Attribute,
    GenActions,
    EvalActions,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Train,
        Stage::Attack,
        Stage::ExtractIpg,
        Stage::Characterize,
        Stage::TrainGnn,
        Stage::Attribute,
        Stage::GenActions,
        Stage::EvalActions,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Attack => "attack",
            Stage::ExtractIpg => "extract-ipg",
            Stage::Characterize => "characterize",
            Stage::TrainGnn => "train-gnn",
            Stage::Attribute => "attribute",
            Stage::GenActions => "gen-actions",
            Stage::EvalActions => "eval-actions",
            Stage::Report => "report",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::config(format!("unknown stage '{name}'")))
    }
}

/// File locations inside the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn file(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn config(&self) -> PathBuf {
        self.file("config.txt")
    }

    pub fn model(&self) -> PathBuf {
        self.file("model.json")
    }

    /// Images and labels of one split (`train`, `characterize`, `evaluate`) under one setting.
    pub fn data(&self, split: &str, setting: &str) -> (PathBuf, PathBuf) {
        (
            self.file(&format!("data/{split}_{setting}-images.idx")),
            self.file(&format!("data/{split}_{setting}-labels.idx")),
        )
    }

    pub fn corpus(&self, setting: &str) -> PathBuf {
        self.file(&format!("corpora/{setting}.ipgs"))
    }

    pub fn node_stats(&self) -> PathBuf {
        self.file("stats/node_stats.csv")
    }

    pub fn layer_summaries(&self) -> PathBuf {
        self.file("stats/layer_summaries.csv")
    }

    pub fn gnn(&self) -> PathBuf {
        self.file("attribution/gnn.json")
    }

    pub fn gnn_report(&self) -> PathBuf {
        self.file("attribution/gnn_report.json")
    }

    pub fn node_attribution(&self) -> PathBuf {
        self.file("attribution/node_attribution.csv")
    }

    pub fn influential(&self) -> PathBuf {
        self.file("attribution/influential.json")
    }

    pub fn actions(&self) -> PathBuf {
        self.file("actions.json")
    }

    pub fn trace(&self) -> PathBuf {
        self.file("eval/trace.csv")
    }

    pub fn search(&self) -> PathBuf {
        self.file("eval/search.json")
    }

    pub fn final_actions(&self) -> PathBuf {
        self.file("eval/final_actions.json")
    }

    pub fn report(&self) -> PathBuf {
        self.file("report.json")
    }

    pub fn manifest(&self) -> PathBuf {
        self.file("manifest.json")
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    create_parent(path)?;
    fs::write(path, contents)?;
    Ok(())
}

const SPLITS: [&str; 3] = ["train", "characterize", "evaluate"];

fn stage_train(cfg: &PipelineConfig, out: &Layout) -> Result<()> {
    let data = match &cfg.dataset {
        DatasetSpec::MnistIdx { .. } => cfg.dataset.load()?,
        spec => gen_synthetic(spec)?,
    };
    let parts = data.split(&cfg.split, cfg.seed)?;
    let nominal = &cfg.nominal().name;
    for (split, part) in SPLITS.iter().zip(&parts) {
        let (images, labels) = out.data(split, nominal);
        create_parent(&images)?;
        save_dataset_idx(part, images, labels)?;
    }
    let model = match &cfg.model_path {
        Some(path) => {
            let m = Model::load(path)?;
            if m.input_dim() != data.dim() || m.num_classes() != data.num_classes() {
                return Err(Error::consistency("loaded model does not match the dataset shape"));
            }
            m
        }
        None => {
            let mut m = Model::dense_stack(data.dim(), &cfg.hidden, data.num_classes(), true, cfg.seed)?;
            train_sgd(&mut m, &parts[0], &cfg.train)?;
            m
        }
    };
    model.save(out.model())
}

fn load_model(out: &Layout) -> Result<Model> {
    Model::load(out.model())
}

fn load_split(out: &Layout, split: &str, setting: &str, classes: usize) -> Result<Dataset> {
    let (images, labels) = out.data(split, setting);
    load_dataset_idx(images, labels, classes)
}

fn stage_attack(cfg: &PipelineConfig, out: &Layout) -> Result<()> {
    let model = load_model(out)?;
    let nominal = &cfg.nominal().name;
    for (i, setting) in cfg.settings.iter().enumerate() {
        let Some((kind, attack)) = &setting.attack else {
            continue;
        };
        let attack = crate::attacks::AttackConfig {
            seed: cfg.seed.wrapping_add(1_000_003 * (i as u64 + 1)),
            ..attack.clone()
        };
        for split in &SPLITS[1..] {
            let clean = load_split(out, split, nominal, model.num_classes())?;
            let adv = attack_dataset(&model, &clean, *kind, &attack)?;
            let (images, labels) = out.data(split, &setting.name);
            save_dataset_idx(&adv, images, labels)?;
        }
    }
    Ok(())
}

fn stage_extract(cfg: &PipelineConfig, out: &Layout) -> Result<()> {
    let model = load_model(out)?;
    let extractor = IpgExtractor::new(&model, ActivationCriterion { tau: cfg.tau });
    for setting in &cfg.settings {
        let data = load_split(out, "characterize", &setting.name, model.num_classes())?;
        let path = out.corpus(&setting.name);
        create_parent(&path)?;
        let mut w = CorpusWriter::create(path)?;
        for (i, (x, _)) in data.iter().enumerate() {
            w.write(&extractor.extract(x, &setting.name, &format!("characterize/{i}"))?)?;
        }
        w.finish()?;
    }
    Ok(())
}

fn corpus_values(out: &Layout, model: &Model, setting: &str) -> Result<CorpusValues> {
    let id = model.digest();
    let mut values = CorpusValues::new(setting, &model.graph_widths());
    for_each_in_corpus(out.corpus(setting), |g| {
        check_model_id(&g, &id)?;
        values.add(&g)
    })?;
    Ok(values)
}

fn stage_characterize(cfg: &PipelineConfig, out: &Layout) -> Result<()> {
    let model = load_model(out)?;
    let mut all: Vec<StatsMap> = Vec::new();
    for setting in &cfg.settings {
        all.push(node_stats(&corpus_values(out, &model, &setting.name)?)?);
    }
    create_parent(&out.node_stats())?;
    write_node_stats_csv(out.node_stats(), all.iter().flat_map(|m| m.values()))?;
    write_layer_summaries_csv(out.layer_summaries(), &layer_summaries(&all))
}

fn load_graphs(out: &Layout, model: &Model, setting: &str) -> Result<Vec<GnnGraph>> {
    let id = model.digest();
    let mut graphs = Vec::new();
    for_each_in_corpus(out.corpus(setting), |g| {
        check_model_id(&g, &id)?;
        graphs.push(GnnGraph::from_ipg(&g));
        Ok(())
    })?;
    Ok(graphs)
}

fn stage_train_gnn(cfg: &PipelineConfig, out: &Layout) -> Result<()> {
    let model = load_model(out)?;
    let mut corpora = Vec::new();
    for setting in &cfg.settings {
        corpora.push((setting.name.clone(), load_graphs(out, &model, &setting.name)?));
    }
    let (gnn, report) = train_gnn(&corpora, &cfg.gnn)?;
    create_parent(&out.gnn())?;
    gnn.save(out.gnn())?;
    write_file(&out.gnn_report(), serde_json::to_string_pretty(&report)?)
}

fn merge_summaries(parts: &[AttributionSummary]) -> AttributionSummary {
    let mut out = AttributionSummary::default();
    for p in parts {
        out.node_graphs += p.node_graphs;
        out.edge_graphs += p.edge_graphs;
        for (&k, &v) in &p.node_sum {
            *out.node_sum.entry(k).or_default() += v;
        }
        for (&k, &v) in &p.edge_sum {
            *out.edge_sum.entry(k).or_default() += v;
        }
    }
    out
}

fn stage_attribute(cfg: &PipelineConfig, out: &Layout) -> Result<()> {
    let model = load_model(out)?;
    let gnn = GnnModel::load(out.gnn())?;
    let id = model.digest();
    let mut summaries: BTreeMap<String, AttributionSummary> = BTreeMap::new();
    for setting in &cfg.settings {
        let mut summary = AttributionSummary::default();
        let mut index = 0;
        for_each_in_corpus(out.corpus(&setting.name), |g| {
            check_model_id(&g, &id)?;
            let graph = GnnGraph::from_ipg(&g);
            summary.add_nodes(&node_attribution(&gnn, &graph, &setting.name)?);
            if index < cfg.edge_samples {
                summary.add_edges(&edge_attribution(&gnn, &graph, &setting.name)?);
            }
            index += 1;
            Ok(())
        })?;
        summaries.insert(setting.name.clone(), summary);
    }
    let per_setting = summaries.iter().map(|(k, s)| (k.clone(), s.node_means())).collect();
    write_node_attribution_csv(out.node_attribution(), &per_setting)?;
    let desired = &summaries[&cfg.nominal().name];
    let targets: Vec<AttributionSummary> = cfg.targets().map(|t| summaries[&t.name].clone()).collect();
    let sets = influential_sets(desired, &merge_summaries(&targets), cfg.percentile)?;
    write_file(&out.influential(), sets.to_json())
}

/// Name under which target settings are pooled.
pub const POOLED_TARGETS: &str = "targets";

fn stage_gen_actions(cfg: &PipelineConfig, out: &Layout) -> Result<()> {
    let model = load_model(out)?;
    let desired = corpus_values(out, &model, &cfg.nominal().name)?;
    let targets: Vec<CorpusValues> = cfg
        .targets()
        .map(|t| corpus_values(out, &model, &t.name))
        .collect::<Result<_>>()?;
    let undesired = CorpusValues::pooled(POOLED_TARGETS, &targets)?;
    let influential = InfluentialSets::from_json(&fs::read_to_string(out.influential())?)?;
    let widths = model.graph_widths();
    let layers = if cfg.repair_layers.is_empty() {
        (1..widths.len() - 1).collect()
    } else {
        cfg.repair_layers.clone()
    };
    if let Some(bad) = layers.iter().find(|&&l| l == 0 || l + 1 >= widths.len()) {
        return Err(Error::config(format!("repair layer {bad} is not a hidden layer")));
    }
    let set = generate_actions(
        &SelectionInputs {
            desired_stats: &node_stats(&desired)?,
            undesired_stats: &node_stats(&undesired)?,
            desired_values: &desired,
            undesired_values: &undesired,
            influential: &influential,
        },
        &ActionConfig {
            p: cfg.p,
            alpha: cfg.alpha,
            aggregator: cfg.aggregator.clone(),
            layers,
        },
    )?;
    save_actions(&set.all(), out.actions())
}

fn evaluator<'m>(cfg: &PipelineConfig, out: &Layout, model: &'m Model) -> Result<Evaluator<'m>> {
    let classes = model.num_classes();
    let nominal = &cfg.nominal().name;
    let nominal_set = EvalSet::new(nominal.clone(), load_split(out, "evaluate", nominal, classes)?);
    let targets = cfg
        .targets()
        .map(|t| Ok(EvalSet::new(t.name.clone(), load_split(out, "evaluate", &t.name, classes)?)))
        .collect::<Result<Vec<_>>>()?;
    Evaluator::new(model, &nominal_set, &targets)
}

/// Summary of the action evaluation stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub candidates: usize,
    pub rejected: usize,
    pub loop_iterations: usize,
    pub loop_accepted: usize,
    pub loop_queued: usize,
    pub loop_cum_ts: f64,
    pub layer_ordering: Vec<usize>,
    pub final_cum_ts: f64,
    pub final_actions: usize,
}

fn stage_eval_actions(cfg: &PipelineConfig, out: &Layout) -> Result<()> {
    let model = load_model(out)?;
    let actions = load_actions(out.actions())?;
    let ev = evaluator(cfg, out, &model)?;
    let scored = evaluate_single_actions(&ev, &actions)?;
    let trace = cumulative_loop(&ev, &scored, cfg.max_iters)?;
    create_parent(&out.trace())?;
    write_trace_csv(&trace, out.trace())?;
    let accepted = trace.accepted_actions(&scored);
    let search = layer_order_search(&ev, &group_by_layer(&accepted), cfg.search)?;
    let summary = SearchSummary {
        candidates: actions.len(),
        rejected: trace.rejected.len(),
        loop_iterations: trace.iterations,
        loop_accepted: trace.accepted.len(),
        loop_queued: trace.queued.len(),
        loop_cum_ts: trace.final_cum_ts(),
        layer_ordering: search.ordering.clone(),
        final_cum_ts: search.cum_ts,
        final_actions: search.actions.len(),
    };
    write_file(&out.search(), serde_json::to_string_pretty(&summary)?)?;
    save_actions(&search.actions, out.final_actions())
}

/// Repair report plus clean model accuracy on the held-out nominal split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub model_digest: String,
    pub clean_accuracy: f64,
    pub mre: MreReport,
}

fn stage_report(cfg: &PipelineConfig, out: &Layout) -> Result<PipelineReport> {
    let model = load_model(out)?;
    let actions = load_actions(out.final_actions())?;
    let ev = evaluator(cfg, out, &model)?;
    let mre = mre_report(&ev, &actions)?;
    let clean = load_split(out, "evaluate", &cfg.nominal().name, model.num_classes())?;
    let report = PipelineReport {
        model_digest: model.digest(),
        clean_accuracy: accuracy(&model, &clean)?,
        mre,
    };
    save_report(&report.mre, out.file("eval/mre.json"))?;
    write_file(&out.report(), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Runs one stage; errors are tagged with the stage name.
pub fn run_stage(cfg: &PipelineConfig, stage: Stage) -> Result<()> {
    let out = Layout::new(&cfg.output_dir);
    let result = match stage {
        Stage::Train => stage_train(cfg, &out),
        Stage::Attack => stage_attack(cfg, &out),
        Stage::ExtractIpg => stage_extract(cfg, &out),
        Stage::Characterize => stage_characterize(cfg, &out),
        Stage::TrainGnn => stage_train_gnn(cfg, &out),
        Stage::Attribute => stage_attribute(cfg, &out),
        Stage::GenActions => stage_gen_actions(cfg, &out),
        Stage::EvalActions => stage_eval_actions(cfg, &out),
        Stage::Report => stage_report(cfg, &out).map(|_| ()),
    };
    result.map_err(|e| e.in_stage(stage.name()))
}

/// SHA-256 digests of every artifact, keyed by path relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn build(root: &Path) -> Result<Self> {
        let mut files = BTreeMap::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir)? {
                let path = entry?.path();
                if path.is_dir() {
                    stack.push(path);
                    continue;
                }
                let rel = path
                    .strip_prefix(root)
                    .expect("walk stays under the root")
                    .to_string_lossy()
                    .replace('\\', "/");
                if rel == "manifest.json" {
                    continue;
                }
                files.insert(rel, hex::encode(Sha256::digest(fs::read(&path)?)));
            }
        }
        Ok(Manifest { files })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Runs every stage in order, then writes the manifest.
pub fn run_pipeline(cfg: &PipelineConfig, config_text: &str) -> Result<PipelineReport> {
    let out = Layout::new(&cfg.output_dir);
    write_file(&out.config(), config_text)?;
    for stage in &Stage::ALL[..Stage::ALL.len() - 1] {
        run_stage(cfg, *stage)?;
    }
    let report = stage_report(cfg, &out).map_err(|e| e.in_stage(Stage::Report.name()))?;
    write_manifest(&out)?;
    Ok(report)
}

pub fn write_manifest(out: &Layout) -> Result<Manifest> {
    let manifest = Manifest::build(out.root())?;
    write_file(&out.manifest(), manifest.to_json())?;
    Ok(manifest)
}
