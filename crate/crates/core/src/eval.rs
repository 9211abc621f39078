//! Retrieval metrics and the three experiment protocols built on them:
//! per-split evaluation with size-weighted cross-split averages, the
//! training-mix ablation (single-task vs multi-task vs multi-task with
//! downsampling) on the dev split, and the workflow-retrieval protocol.

use crate::corpus::{Element, ElementKey, ElementKind};
use crate::dataset::{group_label, DatasetBuild, InstructionPair, Label, TaskId};
use crate::encoder::{train, training_pairs, EncoderModel, TrainConfig, TrainError};
use crate::retrieval::{DenseIndex, DenseRetriever, RetrieveError, Retriever};
use crate::synth::SplitSet;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("gold set is empty")]
    EmptyGold,
    #[error("k must be at least 1")]
    InvalidK,
}

/// Fraction of gold elements present in the top k of the ranking.
pub fn recall_at_k<K: Ord>(
    ranked: &[K],
    gold: &BTreeSet<K>,
    k: usize,
) -> Result<f64, MetricError> {
    check(gold, k)?;
    let hits = ranked
        .iter()
        .take(k)
        .filter(|key| gold.contains(key))
        .collect::<BTreeSet<_>>()
        .len();
    Ok(hits as f64 / gold.len() as f64)
}

/// Reciprocal rank of the first gold element; 0 when none is ranked.
pub fn mrr<K: Ord>(ranked: &[K], gold: &BTreeSet<K>) -> Result<f64, MetricError> {
    if gold.is_empty() {
        return Err(MetricError::EmptyGold);
    }
    Ok(ranked
        .iter()
        .position(|key| gold.contains(key))
        .map_or(0.0, |index| 1.0 / (index + 1) as f64))
}

/// Binary-relevance NDCG: each gold hit at rank r gains 1/log2(r + 1),
/// normalized by the ideal ordering of min(|gold|, k) hits.
pub fn ndcg_at_k<K: Ord>(
    ranked: &[K],
    gold: &BTreeSet<K>,
    k: usize,
) -> Result<f64, MetricError> {
    check(gold, k)?;
    let mut seen: BTreeSet<&K> = BTreeSet::new();
    let mut dcg = 0.0;
    for (index, key) in ranked.iter().take(k).enumerate() {
        if gold.contains(key) && seen.insert(key) {
            dcg += discount(index + 1);
        }
    }
    let ideal: f64 = (1..=gold.len().min(k)).map(discount).sum();
    Ok(dcg / ideal)
}

fn check<K: Ord>(gold: &BTreeSet<K>, k: usize) -> Result<(), MetricError> {
    if gold.is_empty() {
        return Err(MetricError::EmptyGold);
    }
    if k == 0 {
        return Err(MetricError::InvalidK);
    }
    Ok(())
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// Evaluation cutoff per retrieved kind: steps at 15, everything else 5.
pub fn cutoff_for(kind: ElementKind) -> usize {
    match kind {
        ElementKind::Step => 15,
        _ => 5,
    }
}

/// One retrieval act: an instruction and every element it should find.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub instruction: String,
    pub gold: BTreeSet<ElementKey>,
}

/// All instances of one task, with its cutoff and candidate kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTaskSpec {
    pub task: TaskId,
    pub kind: ElementKind,
    pub k: usize,
    pub instances: Vec<EvalInstance>,
}

/// Group an eval pool's positive pairs into task specs. Pairs sharing an
/// instruction merge into one multi-gold instance.
pub fn specs_from_pairs(pairs: &[InstructionPair]) -> Vec<EvalTaskSpec> {
    let mut by_task: BTreeMap<TaskId, BTreeMap<String, BTreeSet<ElementKey>>> = BTreeMap::new();
    for pair in pairs {
        if pair.label != Label::Positive {
            continue;
        }
        by_task
            .entry(pair.task)
            .or_default()
            .entry(pair.instruction.clone())
            .or_default()
            .insert(pair.target.key());
    }
    by_task
        .into_iter()
        .map(|(task, instances)| EvalTaskSpec {
            task,
            kind: task.target_kind(),
            k: cutoff_for(task.target_kind()),
            instances: instances
                .into_iter()
                .map(|(instruction, gold)| EvalInstance { instruction, gold })
                .collect(),
        })
        .collect()
}

/// Per-task aggregate over some set of instances.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub samples: usize,
    pub recall: f64,
    pub mrr: f64,
    pub ndcg: f64,
}

fn weighted<'a>(parts: impl Iterator<Item = &'a TaskMetrics>) -> TaskMetrics {
    let mut total = TaskMetrics::default();
    for part in parts {
        let n = part.samples as f64;
        total.samples += part.samples;
        total.recall += n * part.recall;
        total.mrr += n * part.mrr;
        total.ndcg += n * part.ndcg;
    }
    if total.samples > 0 {
        let n = total.samples as f64;
        total.recall /= n;
        total.mrr /= n;
        total.ndcg /= n;
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split: String,
    pub per_task: BTreeMap<TaskId, TaskMetrics>,
    pub per_kind: BTreeMap<String, TaskMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricCorrelation {
    /// Pearson correlation across instances; absent when either side has
    /// no variance.
    pub recall_ndcg: Option<f64>,
    pub recall_mrr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub engine: String,
    pub config_fingerprint: u64,
    /// How cross-split averages are weighted.
    pub weighting: String,
    pub splits: Vec<SplitReport>,
    pub weighted_per_task: BTreeMap<TaskId, TaskMetrics>,
    pub weighted_per_kind: BTreeMap<String, TaskMetrics>,
    pub correlation: MetricCorrelation,
    /// Tasks that are missing from some split.
    pub flags: Vec<String>,
}

/// One split's engine and instances. Each split carries its own engine
/// because each evaluation domain has its own candidate catalog.
pub struct EvalSplit<'a> {
    pub name: String,
    pub engine: &'a dyn Retriever,
    pub specs: Vec<EvalTaskSpec>,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no splits to evaluate")]
    NoSplits,
    #[error(transparent)]
    Retrieve(#[from] RetrieveError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Run every instance through its split's engine and aggregate:
/// per-instruction metrics, per-split per-task means, then cross-split
/// averages weighted by per-task sample counts.
pub fn evaluate(
    engine_label: &str,
    config_fingerprint: u64,
    splits: &[EvalSplit],
) -> Result<EvalReport, EvalError> {
    if splits.is_empty() {
        return Err(EvalError::NoSplits);
    }
    let mut split_reports = Vec::new();
    let mut points: Vec<(f64, f64, f64)> = Vec::new();
    for split in splits {
        let mut sums: BTreeMap<TaskId, (usize, f64, f64, f64)> = BTreeMap::new();
        for spec in &split.specs {
            for instance in &spec.instances {
                let hits = split
                    .engine
                    .topk(&instance.instruction, spec.k, Some(spec.kind))?;
                let keys: Vec<ElementKey> = hits.iter().map(|h| h.element.key()).collect();
                let recall = recall_at_k(&keys, &instance.gold, spec.k)?;
                let rr = mrr(&keys, &instance.gold)?;
                let ndcg = ndcg_at_k(&keys, &instance.gold, spec.k)?;
                let slot = sums.entry(spec.task).or_insert((0, 0.0, 0.0, 0.0));
                slot.0 += 1;
                slot.1 += recall;
                slot.2 += rr;
                slot.3 += ndcg;
                points.push((recall, rr, ndcg));
            }
        }
        let per_task: BTreeMap<TaskId, TaskMetrics> = sums
            .into_iter()
            .map(|(task, (n, recall, rr, ndcg))| {
                let n_f = n as f64;
                (
                    task,
                    TaskMetrics {
                        samples: n,
                        recall: recall / n_f,
                        mrr: rr / n_f,
                        ndcg: ndcg / n_f,
                    },
                )
            })
            .collect();
        let per_kind = kind_rollup(&per_task);
        split_reports.push(SplitReport {
            split: split.name.clone(),
            per_task,
            per_kind,
        });
    }

    let all_tasks: BTreeSet<TaskId> = split_reports
        .iter()
        .flat_map(|s| s.per_task.keys().copied())
        .collect();
    let mut flags = Vec::new();
    for report in &split_reports {
        for task in &all_tasks {
            if !report.per_task.contains_key(task) {
                flags.push(format!(
                    "split {} has no samples for task {}",
                    report.split, task
                ));
            }
        }
    }
    let weighted_per_task: BTreeMap<TaskId, TaskMetrics> = all_tasks
        .iter()
        .map(|&task| {
            (
                task,
                weighted(split_reports.iter().filter_map(|s| s.per_task.get(&task))),
            )
        })
        .collect();
    let weighted_per_kind = kind_rollup(&weighted_per_task);

    Ok(EvalReport {
        engine: engine_label.to_string(),
        config_fingerprint,
        weighting: "per-task sample counts".to_string(),
        splits: split_reports,
        weighted_per_task,
        weighted_per_kind,
        correlation: MetricCorrelation {
            recall_ndcg: pearson(points.iter().map(|p| (p.0, p.2))),
            recall_mrr: pearson(points.iter().map(|p| (p.0, p.1))),
        },
        flags,
    })
}

fn kind_rollup(per_task: &BTreeMap<TaskId, TaskMetrics>) -> BTreeMap<String, TaskMetrics> {
    let kinds: BTreeSet<ElementKind> = per_task.keys().map(|t| t.target_kind()).collect();
    kinds
        .into_iter()
        .map(|kind| {
            let parts = per_task
                .iter()
                .filter(move |(task, _)| task.target_kind() == kind)
                .map(|(_, m)| m);
            (group_label(kind).to_string(), weighted(parts))
        })
        .collect()
}

fn pearson(points: impl Iterator<Item = (f64, f64)>) -> Option<f64> {
    let points: Vec<(f64, f64)> = points.collect();
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in &points {
        sxx += (x - mean_x) * (x - mean_x);
        syy += (y - mean_y) * (y - mean_y);
        sxy += (x - mean_x) * (y - mean_y);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

fn kind_column_label(kind: ElementKind, k: usize) -> String {
    let name = match kind {
        ElementKind::Step => "Step",
        ElementKind::Table => "Table",
        ElementKind::Field => "Field",
        ElementKind::CatalogItem => "CatalogItem",
        ElementKind::Workflow => "Workflow",
    };
    format!("{name}@{k}")
}

fn kind_for_label(label: &str) -> Option<ElementKind> {
    ElementKind::ALL
        .into_iter()
        .find(|&kind| group_label(kind) == label)
}

fn render_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for row in rows {
        for (slot, cell) in widths.iter_mut().zip(row) {
            *slot = (*slot).max(cell.len());
        }
    }
    let mut out = String::new();
    let push_row = |cells: &[String], out: &mut String| {
        let line: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, cell)| format!("{cell:<width$}", width = widths[i]))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    };
    push_row(header, &mut out);
    for row in rows {
        push_row(row, &mut out);
    }
    out
}

impl EvalReport {
    fn kind_columns(&self) -> Vec<(String, ElementKind, usize)> {
        let mut labels: BTreeSet<&String> = self.weighted_per_kind.keys().collect();
        for split in &self.splits {
            labels.extend(split.per_kind.keys());
        }
        let mut columns: Vec<(String, ElementKind, usize)> = labels
            .into_iter()
            .filter_map(|label| {
                let kind = kind_for_label(label)?;
                Some((label.clone(), kind, cutoff_for(kind)))
            })
            .collect();
        columns.sort_by_key(|&(_, kind, _)| kind);
        columns
    }

    /// Aligned recall table: one row per split plus the weighted average,
    /// one column per retrieved kind.
    pub fn text_table(&self) -> String {
        let columns = self.kind_columns();
        let mut header = vec!["split".to_string()];
        header.extend(
            columns
                .iter()
                .map(|&(_, kind, k)| kind_column_label(kind, k)),
        );
        let cell = |metrics: Option<&TaskMetrics>| match metrics {
            Some(m) => format!("{:.4}", m.recall),
            None => "-".to_string(),
        };
        let mut rows = Vec::new();
        for split in &self.splits {
            let mut row = vec![split.split.clone()];
            row.extend(
                columns
                    .iter()
                    .map(|(label, _, _)| cell(split.per_kind.get(label))),
            );
            rows.push(row);
        }
        let mut weighted_row = vec!["weighted".to_string()];
        weighted_row.extend(
            columns
                .iter()
                .map(|(label, _, _)| cell(self.weighted_per_kind.get(label))),
        );
        rows.push(weighted_row);
        render_table(&header, &rows)
    }

    /// Flat per-task rows, one line each, plus the weighted rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,task,samples,recall,mrr,ndcg\n");
        let push = |split: &str, task: TaskId, m: &TaskMetrics, out: &mut String| {
            out.push_str(&format!(
                "{split},{},{},{:.6},{:.6},{:.6}\n",
                task, m.samples, m.recall, m.mrr, m.ndcg
            ));
        };
        for split in &self.splits {
            for (task, metrics) in &split.per_task {
                push(&split.split, *task, metrics, &mut out);
            }
        }
        for (task, metrics) in &self.weighted_per_task {
            push("weighted", *task, metrics, &mut out);
        }
        out
    }
}

pub const ABLATION_SINGLE: &str = "single_task";
pub const ABLATION_MULTI: &str = "multi_task";
pub const ABLATION_DOWNSAMPLED: &str = "multi_task_downsampled";

const ABLATION_KINDS: [ElementKind; 3] =
    [ElementKind::Step, ElementKind::Table, ElementKind::Field];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    /// Dev metrics keyed by kind group label.
    pub metrics: BTreeMap<String, TaskMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub train_config: TrainConfig,
    pub init_fingerprint: u64,
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn text_table(&self) -> String {
        let header = vec![
            "setup".to_string(),
            kind_column_label(ElementKind::Step, cutoff_for(ElementKind::Step)),
            kind_column_label(ElementKind::Table, cutoff_for(ElementKind::Table)),
            kind_column_label(ElementKind::Field, cutoff_for(ElementKind::Field)),
        ];
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|row| {
                let mut cells = vec![row.variant.clone()];
                for kind in ABLATION_KINDS {
                    cells.push(match row.metrics.get(group_label(kind)) {
                        Some(m) => format!("{:.4}", m.recall),
                        None => "-".to_string(),
                    });
                }
                cells
            })
            .collect();
        render_table(&header, &rows)
    }
}

#[derive(Debug, Error)]
pub enum AblationError {
    #[error("split set has no {0} catalog")]
    MissingCatalog(&'static str),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Train one encoder per dataset variant from a shared init and score each
/// on the dev split: per-kind encoders on their own pairs (single-task),
/// one encoder on everything (multi-task), and one on the downsampled mix.
/// Both builds must come from the same corpus, so they share dev pools.
pub fn compare_ablations(
    init: &EncoderModel,
    split: &SplitSet,
    multi: &DatasetBuild,
    downsampled: &DatasetBuild,
    config: &TrainConfig,
) -> Result<AblationTable, AblationError> {
    let train_catalog = split
        .catalogs
        .get("train")
        .ok_or(AblationError::MissingCatalog("train"))?;
    let dev_catalog = split
        .catalogs
        .get("dev")
        .ok_or(AblationError::MissingCatalog("dev"))?;
    let candidates: Vec<Element> = dev_catalog.elements().cloned().collect();

    let dev_pairs: Vec<InstructionPair> = multi.dev.values().flatten().cloned().collect();
    let specs: Vec<EvalTaskSpec> = specs_from_pairs(&dev_pairs)
        .into_iter()
        .filter(|spec| ABLATION_KINDS.contains(&spec.kind))
        .collect();

    let eval_model = |model: &EncoderModel,
                      wanted: &[ElementKind]|
     -> Result<BTreeMap<String, TaskMetrics>, AblationError> {
        let index = DenseIndex::build(model, &candidates);
        let engine = DenseRetriever {
            index: &index,
            model,
        };
        let restricted: Vec<EvalTaskSpec> = specs
            .iter()
            .filter(|spec| wanted.contains(&spec.kind))
            .cloned()
            .collect();
        let report = evaluate(
            "dense",
            model.fingerprint(),
            &[EvalSplit {
                name: "dev".to_string(),
                engine: &engine,
                specs: restricted,
            }],
        )?;
        Ok(report.weighted_per_kind)
    };

    let mut rows = Vec::new();

    let mut single_metrics = BTreeMap::new();
    for kind in ABLATION_KINDS {
        let pairs: Vec<InstructionPair> = multi
            .train
            .iter()
            .filter(|pair| pair.task.target_kind() == kind)
            .cloned()
            .collect();
        if pairs.is_empty() {
            continue;
        }
        let examples = training_pairs(&pairs, train_catalog);
        let (model, _) = train(init, &examples, config)?;
        for (label, metrics) in eval_model(&model, &[kind])? {
            single_metrics.insert(label, metrics);
        }
    }
    rows.push(AblationRow {
        variant: ABLATION_SINGLE.to_string(),
        metrics: single_metrics,
    });

    for (variant, build) in [(ABLATION_MULTI, multi), (ABLATION_DOWNSAMPLED, downsampled)] {
        let examples = training_pairs(&build.train, train_catalog);
        let (model, _) = train(init, &examples, config)?;
        rows.push(AblationRow {
            variant: variant.to_string(),
            metrics: eval_model(&model, &ABLATION_KINDS)?,
        });
    }

    Ok(AblationTable {
        rows,
        train_config: config.clone(),
        init_fingerprint: init.fingerprint(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowEvalRow {
    pub split: String,
    pub samples: usize,
    pub recall: f64,
}

/// Recall@5 at finding the one workflow document behind a requirement,
/// a task nothing is ever trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowEvalReport {
    pub engine: String,
    pub rows: Vec<WorkflowEvalRow>,
    /// Size-weighted across splits.
    pub average: f64,
}

pub fn workflow_retrieval_eval(
    engine_label: &str,
    splits: &[EvalSplit],
) -> Result<WorkflowEvalReport, EvalError> {
    let report = evaluate(engine_label, 0, splits)?;
    let label = group_label(ElementKind::Workflow);
    let rows = report
        .splits
        .iter()
        .map(|split| {
            let metrics = split.per_kind.get(label).copied().unwrap_or_default();
            WorkflowEvalRow {
                split: split.split.clone(),
                samples: metrics.samples,
                recall: metrics.recall,
            }
        })
        .collect();
    Ok(WorkflowEvalReport {
        engine: engine_label.to_string(),
        rows,
        average: report
            .weighted_per_kind
            .get(label)
            .map_or(0.0, |m| m.recall),
    })
}

impl WorkflowEvalReport {
    pub fn text_table(&self) -> String {
        let header = vec![
            "split".to_string(),
            "samples".to_string(),
            "Workflow@5".to_string(),
        ];
        let mut rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|row| {
                vec![
                    row.split.clone(),
                    row.samples.to_string(),
                    format!("{:.4}", row.recall),
                ]
            })
            .collect();
        rows.push(vec![
            "average".to_string(),
            String::new(),
            format!("{:.4}", self.average),
        ]);
        render_table(&header, &rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{
        registry,
        build_dataset, extract_rows, DownsamplePolicy, NegativesPerPositive, Provenance,
        TargetRef,
    };

    use crate::encoder::FeaturizerConfig;
    use crate::retrieval::SearchHit;
    use crate::rng::SplitMix64;
    use crate::synth::{generate_corpus, CorpusConfig, OodDomainSpec};
    use proptest::prelude::*;

    fn key(name: &str) -> ElementKey {
        ElementKey {
            kind: ElementKind::Step,
            name: name.to_string(),
            parent: None,
        }
    }

    fn keys(names: &[&str]) -> Vec<ElementKey> {
        names.iter().map(|n| key(n)).collect()
    }

    fn gold(names: &[&str]) -> BTreeSet<ElementKey> {
        names.iter().map(|n| key(n)).collect()
    }

    #[test]
    fn recall_counts_gold_in_the_prefix() {
        let ranked = keys(&["e3", "e1", "e2"]);
        assert_eq!(recall_at_k(&ranked, &gold(&["e1"]), 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&ranked, &gold(&["e1"]), 2).unwrap(), 1.0);
        let ranked = keys(&["e1", "e3", "e2"]);
        assert_eq!(recall_at_k(&ranked, &gold(&["e1", "e2"]), 2).unwrap(), 0.5);
    }

    #[test]
    fn mrr_is_the_first_gold_rank() {
        assert_eq!(mrr(&keys(&["a", "b", "g"]), &gold(&["g"])).unwrap(), 1.0 / 3.0);
        assert_eq!(mrr(&keys(&["a", "b"]), &gold(&["g"])).unwrap(), 0.0);
        assert_eq!(mrr(&keys(&["g", "a"]), &gold(&["g"])).unwrap(), 1.0);
    }

    #[test]
    fn ndcg_closed_forms() {
        assert_eq!(ndcg_at_k(&keys(&["g", "x"]), &gold(&["g"]), 1).unwrap(), 1.0);
        let second = ndcg_at_k(&keys(&["x", "g"]), &gold(&["g"]), 2).unwrap();
        assert!((second - 1.0 / 3.0f64.log2()).abs() < 1e-12);
        assert!((second - 0.6309).abs() < 1e-4);
        assert_eq!(ndcg_at_k(&keys(&["x", "y"]), &gold(&["g"]), 2).unwrap(), 0.0);
        // Ideal DCG cuts off at k even when gold is larger.
        let all_ranked = ndcg_at_k(&keys(&["a", "b"]), &gold(&["a", "b", "c"]), 2).unwrap();
        assert_eq!(all_ranked, 1.0);
    }

    #[test]
    fn degenerate_metric_inputs_error() {
        let empty = BTreeSet::new();
        assert_eq!(
            recall_at_k(&keys(&["a"]), &empty, 1),
            Err(MetricError::EmptyGold)
        );
        assert_eq!(mrr(&keys(&["a"]), &empty), Err(MetricError::EmptyGold));
        assert_eq!(
            ndcg_at_k(&keys(&["a"]), &empty, 1),
            Err(MetricError::EmptyGold)
        );
        assert_eq!(
            recall_at_k(&keys(&["a"]), &gold(&["a"]), 0),
            Err(MetricError::InvalidK)
        );
        assert_eq!(
            ndcg_at_k(&keys(&["a"]), &gold(&["a"]), 0),
            Err(MetricError::InvalidK)
        );
    }

    proptest! {
        #[test]
        fn metrics_are_bounded_and_monotone_in_k(
            pool in 2usize..20,
            gold_bits in proptest::collection::vec(any::<bool>(), 20),
            seed in any::<u64>(),
        ) {
            let mut names: Vec<usize> = (0..pool).collect();
            SplitMix64::stream(seed, "eval/prop").shuffle(&mut names);
            let ranked: Vec<ElementKey> =
                names.iter().map(|i| key(&format!("e{i}"))).collect();
            let golds: BTreeSet<ElementKey> = (0..pool)
                .filter(|&i| gold_bits[i])
                .map(|i| key(&format!("e{i}")))
                .collect();
            prop_assume!(!golds.is_empty());

            let m = mrr(&ranked, &golds).unwrap();
            prop_assert!((0.0..=1.0).contains(&m));
            let mut last_recall = 0.0;
            let mut last_ndcg = 0.0;
            for k in 1..=pool {
                let r = recall_at_k(&ranked, &golds, k).unwrap();
                let n = ndcg_at_k(&ranked, &golds, k).unwrap();
                prop_assert!((0.0..=1.0).contains(&r));
                prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
                prop_assert!(r + 1e-12 >= last_recall);
                // NDCG with a cutoff-limited ideal is only monotone in k
                // for single-gold instances; with more gold than ranked
                // hits the ideal keeps growing while the DCG stalls.
                if golds.len() == 1 {
                    prop_assert!(n + 1e-12 >= last_ndcg);
                }
                last_recall = r;
                last_ndcg = n;
            }
        }
    }

    /// Engine that replays a scripted ranking per query.
    struct FixedEngine {
        responses: BTreeMap<String, Vec<(ElementKey, f64)>>,
    }

    impl Retriever for FixedEngine {
        fn topk(
            &self,
            query: &str,
            k: usize,
            _kind: Option<ElementKind>,
        ) -> Result<Vec<SearchHit>, RetrieveError> {
            let ranked = self.responses.get(query).cloned().unwrap_or_default();
            Ok(ranked
                .into_iter()
                .take(k)
                .map(|(key, score)| SearchHit {
                    element: {
                        let mut e = Element::new(key.kind, key.name);
                        e.parent = key.parent;
                        e
                    },
                    score,
                })
                .collect())
        }
    }

    fn spec(instances: Vec<(&str, &[&str])>) -> EvalTaskSpec {
        EvalTaskSpec {
            task: TaskId::StepFromRequirement,
            kind: ElementKind::Step,
            k: 5,
            instances: instances
                .into_iter()
                .map(|(instruction, golds)| EvalInstance {
                    instruction: instruction.to_string(),
                    gold: gold(golds),
                })
                .collect(),
        }
    }

    fn scripted(entries: Vec<(&str, &[&str])>) -> FixedEngine {
        FixedEngine {
            responses: entries
                .into_iter()
                .map(|(query, ranked)| {
                    let ranked = ranked
                        .iter()
                        .enumerate()
                        .map(|(i, name)| (key(name), 1.0 - i as f64 * 0.01))
                        .collect();
                    (query.to_string(), ranked)
                })
                .collect(),
        }
    }

    #[test]
    fn weighted_average_uses_sample_counts() {
        // Split a: one instance at recall 0.8; split b: three at 0.4.
        let engine_a = scripted(vec![("qa", &["g1", "g2", "g3", "g4", "x"][..])]);
        let engine_b = scripted(vec![
            ("q1", &["g1", "g2", "x", "y", "z"][..]),
            ("q2", &["g1", "g2", "x", "y", "z"][..]),
            ("q3", &["g1", "g2", "x", "y", "z"][..]),
        ]);
        let five = ["g1", "g2", "g3", "g4", "g5"];
        let report = evaluate(
            "fixed",
            0,
            &[
                EvalSplit {
                    name: "a".to_string(),
                    engine: &engine_a,
                    specs: vec![spec(vec![("qa", &five)])],
                },
                EvalSplit {
                    name: "b".to_string(),
                    engine: &engine_b,
                    specs: vec![spec(vec![("q1", &five), ("q2", &five), ("q3", &five)])],
                },
            ],
        )
        .unwrap();
        let steps = &report.weighted_per_kind["steps"];
        assert_eq!(steps.samples, 4);
        assert!((steps.recall - 0.5).abs() < 1e-12);
        assert!((report.splits[0].per_kind["steps"].recall - 0.8).abs() < 1e-12);
        assert!((report.splits[1].per_kind["steps"].recall - 0.4).abs() < 1e-12);
        // The stored weighted average recomputes from the stored parts.
        let recomputed = report
            .splits
            .iter()
            .map(|s| {
                let m = &s.per_kind["steps"];
                m.samples as f64 * m.recall
            })
            .sum::<f64>()
            / steps.samples as f64;
        assert!((steps.recall - recomputed).abs() < 1e-12);
    }

    #[test]
    fn single_split_weighted_average_is_the_split_value() {
        let engine = scripted(vec![("q", &["g1", "x", "y", "z", "w"][..])]);
        let report = evaluate(
            "fixed",
            0,
            &[EvalSplit {
                name: "only".to_string(),
                engine: &engine,
                specs: vec![spec(vec![("q", &["g1", "g2"])])],
            }],
        )
        .unwrap();
        assert_eq!(
            report.weighted_per_kind["steps"].recall,
            report.splits[0].per_kind["steps"].recall
        );
    }

    #[test]
    fn gold_first_oracle_engine_scores_perfect_recall() {
        let engine = scripted(vec![
            ("q1", &["g1", "x", "y"][..]),
            ("q2", &["g2", "x", "y"][..]),
        ]);
        let report = evaluate(
            "oracle",
            0,
            &[EvalSplit {
                name: "dev".to_string(),
                engine: &engine,
                specs: vec![spec(vec![("q1", &["g1"]), ("q2", &["g2"])])],
            }],
        )
        .unwrap();
        let steps = &report.weighted_per_kind["steps"];
        assert_eq!(steps.recall, 1.0);
        assert_eq!(steps.mrr, 1.0);
        assert_eq!(steps.ndcg, 1.0);
        // Constant metrics leave the correlation undefined.
        assert_eq!(report.correlation.recall_ndcg, None);
    }

    #[test]
    fn varying_outcomes_correlate_positively() {
        let engine = scripted(vec![
            ("q1", &["g1", "x", "y", "z", "w"][..]),
            ("q2", &["x", "g1", "y", "z", "w"][..]),
            ("q3", &["x", "y", "z", "w", "v"][..]),
        ]);
        let report = evaluate(
            "fixed",
            0,
            &[EvalSplit {
                name: "dev".to_string(),
                engine: &engine,
                specs: vec![spec(vec![
                    ("q1", &["g1"]),
                    ("q2", &["g1"]),
                    ("q3", &["g1"]),
                ])],
            }],
        )
        .unwrap();
        assert!(report.correlation.recall_ndcg.unwrap() > 0.5);
        assert!(report.correlation.recall_mrr.unwrap() > 0.5);
    }

    #[test]
    fn missing_tasks_are_flagged_and_excluded() {
        let engine = scripted(vec![("q", &["g1"][..])]);
        let mut table_spec = spec(vec![("q", &["g1"])]);
        table_spec.task = TaskId::TableFromText;
        table_spec.kind = ElementKind::Table;
        let report = evaluate(
            "fixed",
            0,
            &[
                EvalSplit {
                    name: "a".to_string(),
                    engine: &engine,
                    specs: vec![spec(vec![("q", &["g1"])]), table_spec],
                },
                EvalSplit {
                    name: "b".to_string(),
                    engine: &engine,
                    specs: vec![spec(vec![("q", &["g1"])])],
                },
            ],
        )
        .unwrap();
        assert!(report
            .flags
            .iter()
            .any(|f| f.contains("b") && f.contains("table_from_text")));
        // The table average only counts split a's sample.
        assert_eq!(report.weighted_per_task[&TaskId::TableFromText].samples, 1);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let engine = scripted(vec![
            ("q1", &["g1", "x"][..]),
            ("q2", &["x", "g1"][..]),
        ]);
        let splits = || {
            vec![EvalSplit {
                name: "dev".to_string(),
                engine: &engine as &dyn Retriever,
                specs: vec![spec(vec![("q1", &["g1"]), ("q2", &["g1", "g2"])])],
            }]
        };
        let a = serde_json::to_string(&evaluate("fixed", 9, &splits()).unwrap()).unwrap();
        let b = serde_json::to_string(&evaluate("fixed", 9, &splits()).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_split_list_is_rejected() {
        assert!(matches!(evaluate("x", 0, &[]), Err(EvalError::NoSplits)));
    }

    #[test]
    fn specs_group_multi_gold_instructions() {
        let pair = |instruction: &str, name: &str, label: Label| InstructionPair {
            task: TaskId::StepFromRequirement,
            template_id: "T01".to_string(),
            instruction: instruction.to_string(),
            target: TargetRef {
                kind: ElementKind::Step,
                name: name.to_string(),
                parent: None,
            },
            label,
            negative_kind: crate::dataset::NegativeKind::None,
            provenance: Provenance::Doc {
                doc: "train:0000".to_string(),
                step: 0,
            },
        };
        let pairs = vec![
            pair("find steps", "a", Label::Positive),
            pair("find steps", "b", Label::Positive),
            pair("find steps", "c", Label::Negative),
            pair("other", "d", Label::Positive),
        ];
        let specs = specs_from_pairs(&pairs);
        assert_eq!(specs.len(), 1);
        assert_eq!(specs[0].k, 15);
        assert_eq!(specs[0].instances.len(), 2);
        let multi = specs[0]
            .instances
            .iter()
            .find(|i| i.instruction == "find steps")
            .unwrap();
        assert_eq!(multi.gold.len(), 2, "negatives must stay out of gold");
    }

    #[test]
    fn tables_render_aligned_and_csv_round_trips() {
        let engine = scripted(vec![("q", &["g1", "x", "y", "z", "w"][..])]);
        let report = evaluate(
            "fixed",
            0,
            &[EvalSplit {
                name: "dev".to_string(),
                engine: &engine,
                specs: vec![spec(vec![("q", &["g1"])])],
            }],
        )
        .unwrap();
        let table = report.text_table();
        assert!(table.contains("Step@15"));
        assert!(table.lines().any(|l| l.starts_with("weighted")));
        let csv = report.to_csv();
        assert_eq!(csv.lines().next().unwrap(), "split,task,samples,recall,mrr,ndcg");
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.contains("dev,step_from_requirement,1,1.000000,1.000000,1.000000"));
    }

    fn ablation_corpus() -> CorpusConfig {
        CorpusConfig {
            seed: 11,
            n_scopes: 4,
            steps_per_scope: 5,
            n_core_steps: 8,
            zipf_exponent: 1.1,
            n_tables: 8,
            fields_per_table: (3, 5),
            n_train_flows: 24,
            steps_per_flow: (2, 5),
            ood_domains: vec![OodDomainSpec {
                name: "hr".to_string(),
                n_flows: 5,
                scope_overlap: 0.5,
            }],
            annotation_grammar_version: "g1".to_string(),
        }
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            total_steps: 40,
            batch_size: 16,
            warmup_steps: 5,
            peak_lr: 0.02,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn ablation_comparison_is_deterministic_and_complete() {
        let split = generate_corpus(&ablation_corpus()).unwrap();
        let extracts = extract_rows(&split.catalogs["train"]);
        let templates = registry();
        let negatives = NegativesPerPositive::default();
        let multi = build_dataset(&split, &extracts, templates, negatives, None, 5);
        let policy = DownsamplePolicy::default();
        let downsampled =
            build_dataset(&split, &extracts, templates, negatives, Some(&policy), 5);

        let init = EncoderModel::random_init(
            FeaturizerConfig {
                hash_dim: 1 << 12,
                ..FeaturizerConfig::default()
            },
            16,
            17,
        );
        let config = tiny_train_config();
        let table = compare_ablations(&init, &split, &multi, &downsampled, &config).unwrap();

        assert_eq!(table.rows.len(), 3);
        assert_eq!(table.rows[0].variant, ABLATION_SINGLE);
        assert_eq!(table.rows[1].variant, ABLATION_MULTI);
        assert_eq!(table.rows[2].variant, ABLATION_DOWNSAMPLED);
        for row in &table.rows {
            assert!(row.metrics.contains_key("steps"), "{} lacks steps", row.variant);
            assert!(row.metrics.contains_key("tables"), "{} lacks tables", row.variant);
            for metrics in row.metrics.values() {
                assert!(metrics.samples > 0);
                assert!((0.0..=1.0).contains(&metrics.recall));
            }
        }
        let rendered = table.text_table();
        assert!(rendered.contains("setup"));
        assert!(rendered.contains(ABLATION_DOWNSAMPLED));

        let again = compare_ablations(&init, &split, &multi, &downsampled, &config).unwrap();
        assert_eq!(
            serde_json::to_string(&table).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
    }

    #[test]
    fn workflow_eval_reports_per_split_and_average() {
        let engine = scripted(vec![("q1", &["w1", "x"][..]), ("q2", &["x", "w2"][..])]);
        let workflow_key = |name: &str| ElementKey {
            kind: ElementKind::Workflow,
            name: name.to_string(),
            parent: None,
        };
        let make_spec = |entries: Vec<(&str, &str)>| EvalTaskSpec {
            task: TaskId::WorkflowFromText,
            kind: ElementKind::Workflow,
            k: 5,
            instances: entries
                .into_iter()
                .map(|(q, g)| EvalInstance {
                    instruction: q.to_string(),
                    gold: [workflow_key(g)].into_iter().collect(),
                })
                .collect(),
        };
        let engine2 = FixedEngine {
            responses: [(
                "q1".to_string(),
                vec![(workflow_key("w1"), 1.0)],
            )]
            .into_iter()
            .collect(),
        };
        let report = workflow_retrieval_eval(
            "dense",
            &[
                EvalSplit {
                    name: "ood-hr".to_string(),
                    engine: &engine2,
                    specs: vec![make_spec(vec![("q1", "w1")])],
                },
                EvalSplit {
                    name: "ood-fin".to_string(),
                    engine: &engine,
                    specs: vec![make_spec(vec![("q2", "missing")])],
                },
            ],
        )
        .unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.rows[0].split, "ood-hr");
        assert_eq!(report.rows[0].recall, 1.0);
        assert_eq!(report.rows[1].recall, 0.0);
        assert!((report.average - 0.5).abs() < 1e-12);
        assert!(report.text_table().contains("Workflow@5"));
    }
}
