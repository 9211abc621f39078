//! Training-pair construction: instruction rendering, positive-pair
//! extraction from workflow documents and catalog extract rows, random and
//! structure-aware negative mining, frequency-capped downsampling, and the
//! dataset build that ties them together into train and eval pair files.

mod templates;

pub use templates::{
    raw_text_template, registry, render_instruction, render_raw_text, template, templates_for_task,
    ContextField, InstructionTemplate, RawTextError, TemplateError,
};

use crate::corpus::{
    serialize_workflow, Element, ElementCatalog, ElementKey, ElementKind, WorkflowDoc,
};
use crate::rng::SplitMix64;
use crate::synth::SplitSet;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::Path;
use thiserror::Error;

/// The retrieval task a pair trains or evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    StepFromRequirement,
    StepFromAnnotation,
    StepFromContext,
    TableFromContext,
    TableFromText,
    FieldFromText,
    FieldFromTableContext,
    CatalogItemFromDescription,
    WorkflowFromText,
}

impl TaskId {
    pub const ALL: [TaskId; 9] = [
        TaskId::StepFromRequirement,
        TaskId::StepFromAnnotation,
        TaskId::StepFromContext,
        TaskId::TableFromContext,
        TaskId::TableFromText,
        TaskId::FieldFromText,
        TaskId::FieldFromTableContext,
        TaskId::CatalogItemFromDescription,
        TaskId::WorkflowFromText,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::StepFromRequirement => "step_from_requirement",
            TaskId::StepFromAnnotation => "step_from_annotation",
            TaskId::StepFromContext => "step_from_context",
            TaskId::TableFromContext => "table_from_context",
            TaskId::TableFromText => "table_from_text",
            TaskId::FieldFromText => "field_from_text",
            TaskId::FieldFromTableContext => "field_from_table_context",
            TaskId::CatalogItemFromDescription => "catalog_item_from_description",
            TaskId::WorkflowFromText => "workflow_from_text",
        }
    }

    pub fn parse(s: &str) -> Option<TaskId> {
        TaskId::ALL.iter().copied().find(|t| t.as_str() == s)
    }

    /// The element kind this task retrieves.
    pub fn target_kind(self) -> ElementKind {
        match self {
            TaskId::StepFromRequirement | TaskId::StepFromAnnotation | TaskId::StepFromContext => {
                ElementKind::Step
            }
            TaskId::TableFromContext | TaskId::TableFromText => ElementKind::Table,
            TaskId::FieldFromText | TaskId::FieldFromTableContext => ElementKind::Field,
            TaskId::CatalogItemFromDescription => ElementKind::CatalogItem,
            TaskId::WorkflowFromText => ElementKind::Workflow,
        }
    }
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Eval-file group name for a target kind.
pub fn group_label(kind: ElementKind) -> &'static str {
    match kind {
        ElementKind::Step => "steps",
        ElementKind::Table => "tables",
        ElementKind::Field => "fields",
        ElementKind::CatalogItem => "catalog_items",
        ElementKind::Workflow => "workflows",
    }
}

/// The element a pair points at.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TargetRef {
    pub kind: ElementKind,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
}

impl TargetRef {
    pub fn key(&self) -> ElementKey {
        ElementKey {
            kind: self.kind,
            name: self.name.clone(),
            parent: self.parent.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeKind {
    None,
    Random,
    Hard,
}

/// Where a pair's instruction text came from: a step position inside an
/// identified document, or a row of the extract list. Rendering the pair's
/// template against this origin reproduces the stored instruction exactly.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Provenance {
    Doc { doc: String, step: usize },
    Extract { row: usize },
}

/// One line of a pair file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionPair {
    pub task: TaskId,
    pub template_id: String,
    pub instruction: String,
    pub target: TargetRef,
    pub label: Label,
    pub negative_kind: NegativeKind,
    pub provenance: Provenance,
}

/// A pair whose target element was absent from the catalog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub task: TaskId,
    pub target: TargetRef,
    pub provenance: Provenance,
}

/// Positive pairs plus the targets that had to be skipped.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairExtraction {
    pub pairs: Vec<InstructionPair>,
    pub skipped: Vec<SkippedPair>,
}

impl PairExtraction {
    fn extend(&mut self, other: PairExtraction) {
        self.pairs.extend(other.pairs);
        self.skipped.extend(other.skipped);
    }
}

/// Stable document id within a split, used in pair provenance.
pub fn doc_label(split: &str, index: usize) -> String {
    format!("{split}:{index:04}")
}

/// Templates whose context comes entirely from an extract row rather than a
/// workflow document.
fn is_extract_side(template: &InstructionTemplate) -> bool {
    template
        .context_fields
        .iter()
        .all(|f| matches!(f, ContextField::TableName | ContextField::Description))
}

/// Emit every positive pair a workflow document supports under the given
/// templates: step pairs for each defined step (from the bare requirement,
/// from the step annotation when present, and from the document prefix),
/// table pairs for each table binding, and field pairs for each condition
/// field under the step's first bound table. Targets missing from the
/// catalog are reported in `skipped` instead of producing pairs.
pub fn extract_positive_pairs(
    doc_id: &str,
    doc: &WorkflowDoc,
    catalog: &ElementCatalog,
    templates: &[InstructionTemplate],
) -> PairExtraction {
    let mut out = PairExtraction::default();
    let no_extra = BTreeMap::new();
    let selected: Vec<&InstructionTemplate> = templates
        .iter()
        .filter(|t| !t.eval_only && !is_extract_side(t))
        .collect();

    let emit = |out: &mut PairExtraction, task: TaskId, target: TargetRef, position: usize| {
        let provenance = Provenance::Doc {
            doc: doc_id.to_string(),
            step: position,
        };
        if !catalog.contains(&target.key()) {
            out.skipped.push(SkippedPair {
                task,
                target,
                provenance,
            });
            return;
        }
        for template in selected.iter().filter(|t| t.task == task) {
            let instruction =
                render_instruction(template, Some(doc), Some(position), &no_extra)
                    .expect("document-side template renders for a gated step");
            out.pairs.push(InstructionPair {
                task,
                template_id: template.id.to_string(),
                instruction,
                target: target.clone(),
                label: Label::Positive,
                negative_kind: NegativeKind::None,
                provenance: provenance.clone(),
            });
        }
    };

    for (position, step) in doc.steps.iter().enumerate() {
        let annotated = !step.annotation.is_empty();
        if let Some(definition) = &step.definition {
            let target = TargetRef {
                kind: ElementKind::Step,
                name: definition.clone(),
                parent: None,
            };
            emit(&mut out, TaskId::StepFromRequirement, target.clone(), position);
            if annotated {
                emit(&mut out, TaskId::StepFromAnnotation, target.clone(), position);
            }
            emit(&mut out, TaskId::StepFromContext, target, position);
        }
        let tables = step.table_refs();
        for table in &tables {
            let target = TargetRef {
                kind: ElementKind::Table,
                name: (*table).to_string(),
                parent: None,
            };
            emit(&mut out, TaskId::TableFromContext, target.clone(), position);
            if annotated {
                emit(&mut out, TaskId::TableFromText, target, position);
            }
        }
        if annotated {
            let parent = tables.first().map(|t| (*t).to_string());
            for field in step.field_refs() {
                let target = TargetRef {
                    kind: ElementKind::Field,
                    name: field,
                    parent: parent.clone(),
                };
                if parent.is_none() {
                    out.skipped.push(SkippedPair {
                        task: TaskId::FieldFromText,
                        target,
                        provenance: Provenance::Doc {
                            doc: doc_id.to_string(),
                            step: position,
                        },
                    });
                    continue;
                }
                emit(&mut out, TaskId::FieldFromText, target.clone(), position);
                emit(&mut out, TaskId::FieldFromTableContext, target, position);
            }
        }
    }
    out
}

/// Description-bearing table, field, and catalog-item rows of a catalog, in
/// catalog order. These are the rows extract-side pairs are built from.
pub fn extract_rows(catalog: &ElementCatalog) -> Vec<Element> {
    catalog
        .elements()
        .filter(|e| {
            e.description.is_some()
                && matches!(
                    e.kind,
                    ElementKind::Table | ElementKind::Field | ElementKind::CatalogItem
                )
        })
        .cloned()
        .collect()
}

/// Emit positive pairs from extract rows: table and catalog-item rows pair
/// their description with themselves, field rows pair their own description
/// and their parent table's name-plus-description with the field. Rows
/// without a description (or field rows whose parent table row is missing)
/// support no rendering and are passed over.
pub fn pairs_from_extracts(
    extracts: &[Element],
    templates: &[InstructionTemplate],
) -> PairExtraction {
    let mut out = PairExtraction::default();
    let selected: Vec<&InstructionTemplate> = templates
        .iter()
        .filter(|t| !t.eval_only && is_extract_side(t))
        .collect();
    let table_descriptions: BTreeMap<&str, &str> = extracts
        .iter()
        .filter(|e| e.kind == ElementKind::Table)
        .filter_map(|e| Some((e.name.as_str(), e.description.as_deref()?)))
        .collect();

    for (row, element) in extracts.iter().enumerate() {
        let task = match element.kind {
            ElementKind::Table => TaskId::TableFromText,
            ElementKind::Field => TaskId::FieldFromText,
            ElementKind::CatalogItem => TaskId::CatalogItemFromDescription,
            _ => continue,
        };
        let Some(description) = element.description.clone() else {
            continue;
        };
        let target = TargetRef {
            kind: element.kind,
            name: element.name.clone(),
            parent: element.parent.clone(),
        };
        let mut own = BTreeMap::new();
        own.insert("description".to_string(), description);
        for template in selected.iter().filter(|t| t.task == task) {
            push_extract_pair(&mut out.pairs, template, row, &target, &own);
        }
        if element.kind == ElementKind::Field {
            let table_extra = element.parent.as_deref().and_then(|parent| {
                let description = table_descriptions.get(parent)?;
                let mut extra = BTreeMap::new();
                extra.insert("table".to_string(), parent.to_string());
                extra.insert("description".to_string(), (*description).to_string());
                Some(extra)
            });
            if let Some(extra) = table_extra {
                for template in selected
                    .iter()
                    .filter(|t| t.task == TaskId::FieldFromTableContext)
                {
                    push_extract_pair(&mut out.pairs, template, row, &target, &extra);
                }
            }
        }
    }
    out
}

fn push_extract_pair(
    pairs: &mut Vec<InstructionPair>,
    template: &InstructionTemplate,
    row: usize,
    target: &TargetRef,
    extra: &BTreeMap<String, String>,
) {
    let instruction = render_instruction(template, None, None, extra)
        .expect("extract-side template renders from a populated extra map");
    pairs.push(InstructionPair {
        task: template.task,
        template_id: template.id.to_string(),
        instruction,
        target: target.clone(),
        label: Label::Positive,
        negative_kind: NegativeKind::None,
        provenance: Provenance::Extract { row },
    });
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("no {kind} negatives available for instruction targeting {target}")]
pub struct ExhaustedError {
    pub kind: ElementKind,
    pub target: String,
}

/// A negative sampled uniformly from catalog elements of the target's kind,
/// excluding every gold target of the instruction.
pub fn mine_random_negative(
    positive: &InstructionPair,
    gold: &BTreeSet<ElementKey>,
    catalog: &ElementCatalog,
    rng: &mut SplitMix64,
) -> Result<InstructionPair, ExhaustedError> {
    let positive_key = positive.target.key();
    let candidates: Vec<&Element> = catalog
        .elements_of_kind(positive.target.kind)
        .into_iter()
        .filter(|e| {
            let key = e.key();
            key != positive_key && !gold.contains(&key)
        })
        .collect();
    pick_negative(positive, &candidates, NegativeKind::Random, rng)
}

/// A negative that shares structure with the positive: another step or
/// table of the same scope, or another field of the same parent table.
/// Kinds without structure, or positives whose structural pool is empty,
/// fall back to a random negative (and are labeled as such).
pub fn mine_hard_negative(
    positive: &InstructionPair,
    gold: &BTreeSet<ElementKey>,
    catalog: &ElementCatalog,
    rng: &mut SplitMix64,
) -> Result<InstructionPair, ExhaustedError> {
    let positive_key = positive.target.key();
    let pool: Vec<&Element> = match positive.target.kind {
        ElementKind::Step | ElementKind::Table => {
            match catalog.get(&positive_key).and_then(|e| e.scope.as_deref()) {
                Some(scope) => catalog.elements_in_scope(positive.target.kind, scope),
                None => Vec::new(),
            }
        }
        ElementKind::Field => match positive.target.parent.as_deref() {
            Some(parent) => catalog.fields_of_table(parent),
            None => Vec::new(),
        },
        ElementKind::CatalogItem | ElementKind::Workflow => Vec::new(),
    };
    let candidates: Vec<&Element> = pool
        .into_iter()
        .filter(|e| {
            let key = e.key();
            key != positive_key && !gold.contains(&key)
        })
        .collect();
    if candidates.is_empty() {
        return mine_random_negative(positive, gold, catalog, rng);
    }
    pick_negative(positive, &candidates, NegativeKind::Hard, rng)
}

fn pick_negative(
    positive: &InstructionPair,
    candidates: &[&Element],
    negative_kind: NegativeKind,
    rng: &mut SplitMix64,
) -> Result<InstructionPair, ExhaustedError> {
    if candidates.is_empty() {
        return Err(ExhaustedError {
            kind: positive.target.kind,
            target: positive.target.name.clone(),
        });
    }
    let chosen = candidates[rng.next_index(candidates.len())];
    Ok(InstructionPair {
        task: positive.task,
        template_id: positive.template_id.clone(),
        instruction: positive.instruction.clone(),
        target: TargetRef {
            kind: chosen.kind,
            name: chosen.name.clone(),
            parent: chosen.parent.clone(),
        },
        label: Label::Negative,
        negative_kind,
        provenance: positive.provenance.clone(),
    })
}

/// Frequency-capped downsampling of head-element pairs. A positive pair
/// whose target occurs `f` times in the corpus is kept with probability
/// `1 / factor(f)` where the factor grows four-fold per decade of
/// frequency above the anchor: occurring 50 times costs 4x, 500 times
/// 16x, capped at 64x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownsamplePolicy {
    pub anchor: f64,
    pub base: f64,
    pub cap: f64,
    pub seed: u64,
}

impl Default for DownsamplePolicy {
    fn default() -> Self {
        Self {
            anchor: 5.0,
            base: 4.0,
            cap: 64.0,
            seed: 0x5eed,
        }
    }
}

impl DownsamplePolicy {
    pub fn factor(&self, frequency: u64) -> f64 {
        if frequency == 0 {
            return 1.0;
        }
        let decades = (frequency as f64 / self.anchor).log10();
        self.base.powf(decades).clamp(1.0, self.cap)
    }
}

/// Apply the policy to a pair list. Target frequency is the number of
/// distinct provenances among positives for that target. Each positive
/// draws from its own derived stream (keyed by template, provenance, and
/// target), so the decision for a pair does not depend on list order; the
/// negatives attached after a positive share its fate. Surviving pairs
/// keep their original order.
pub fn downsample(pairs: &[InstructionPair], policy: &DownsamplePolicy) -> Vec<InstructionPair> {
    let mut occurrences: BTreeMap<ElementKey, BTreeSet<&Provenance>> = BTreeMap::new();
    for pair in pairs.iter().filter(|p| p.label == Label::Positive) {
        occurrences
            .entry(pair.target.key())
            .or_default()
            .insert(&pair.provenance);
    }

    let mut kept = Vec::with_capacity(pairs.len());
    let mut keep_current = true;
    for pair in pairs {
        if pair.label == Label::Positive {
            let frequency = occurrences
                .get(&pair.target.key())
                .map(|set| set.len() as u64)
                .unwrap_or(0);
            let factor = policy.factor(frequency);
            keep_current = if factor <= 1.0 {
                true
            } else {
                let mut stream =
                    SplitMix64::stream(policy.seed, &downsample_stream_key(pair));
                stream.next_f64() < 1.0 / factor
            };
        }
        if keep_current {
            kept.push(pair.clone());
        }
    }
    kept
}

fn downsample_stream_key(pair: &InstructionPair) -> String {
    let provenance = match &pair.provenance {
        Provenance::Doc { doc, step } => format!("doc/{doc}/{step}"),
        Provenance::Extract { row } => format!("row/{row}"),
    };
    format!(
        "downsample/{}/{}/{}/{}/{}",
        pair.template_id,
        provenance,
        pair.target.kind,
        pair.target.name,
        pair.target.parent.as_deref().unwrap_or("")
    )
}

/// How many negatives to mine per positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativesPerPositive {
    pub random: usize,
    pub hard: usize,
}

impl Default for NegativesPerPositive {
    fn default() -> Self {
        Self { random: 1, hard: 1 }
    }
}

/// Counters describing one dataset build.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub train_total: usize,
    pub train_positives: usize,
    pub train_negatives_random: usize,
    pub train_negatives_hard: usize,
    pub positives_before_downsample: usize,
    pub workflow_origin_positives: usize,
    pub extract_origin_positives: usize,
    /// Set when extract pairs outnumbered workflow pairs and were
    /// subsampled to match.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extract_subsampled_to: Option<usize>,
    pub per_task: BTreeMap<String, usize>,
    pub per_template: BTreeMap<String, usize>,
    pub dev_sizes: BTreeMap<String, usize>,
    pub ood_sizes: BTreeMap<String, BTreeMap<String, usize>>,
    pub workflow_eval_sizes: BTreeMap<String, usize>,
    pub skipped_missing_elements: BTreeMap<String, usize>,
    pub exhausted_negatives: usize,
}

/// A built dataset: the train pair list, positives-only dev and
/// out-of-domain eval pools grouped by target kind, workflow-retrieval
/// eval pools per split, and the build report.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBuild {
    pub train: Vec<InstructionPair>,
    pub dev: BTreeMap<String, Vec<InstructionPair>>,
    pub ood: BTreeMap<String, BTreeMap<String, Vec<InstructionPair>>>,
    pub workflow_eval: BTreeMap<String, Vec<InstructionPair>>,
    pub report: BuildReport,
}

/// Build the full dataset from a split set. Training positives come from
/// the train documents plus the extract rows, with extract pairs
/// subsampled so they never outnumber workflow pairs; negatives are mined
/// per positive from the train catalog before any downsampling; the
/// optional policy then thins head-element pairs. Dev and out-of-domain
/// pools carry positives only. Deterministic for a fixed
/// (split, extracts, templates, seed).
pub fn build_dataset(
    split: &SplitSet,
    extracts: &[Element],
    templates: &[InstructionTemplate],
    negatives: NegativesPerPositive,
    policy: Option<&DownsamplePolicy>,
    seed: u64,
) -> DatasetBuild {
    let train_catalog = split
        .catalogs
        .get("train")
        .expect("split set carries a train catalog");
    let mut report = BuildReport::default();

    let mut extraction = PairExtraction::default();
    for (index, doc) in split.train.iter().enumerate() {
        extraction.extend(extract_positive_pairs(
            &doc_label("train", index),
            doc,
            train_catalog,
            templates,
        ));
    }
    let workflow_positives = extraction.pairs.len();
    let from_extracts = pairs_from_extracts(extracts, templates);
    let mut extract_positives = from_extracts.pairs;
    extraction.skipped.extend(from_extracts.skipped);

    // Gold sets are collected before balancing so a subsampled extract pair
    // can never come back as a negative for an instruction it answers.
    let mut gold: BTreeMap<String, BTreeSet<ElementKey>> = BTreeMap::new();
    for pair in extraction.pairs.iter().chain(extract_positives.iter()) {
        gold.entry(pair.instruction.clone())
            .or_default()
            .insert(pair.target.key());
    }

    if extract_positives.len() > workflow_positives {
        let mut order: Vec<usize> = (0..extract_positives.len()).collect();
        SplitMix64::stream(seed, "dataset/balance").shuffle(&mut order);
        let mut keep: Vec<usize> = order.into_iter().take(workflow_positives).collect();
        keep.sort_unstable();
        extract_positives = keep
            .into_iter()
            .map(|i| extract_positives[i].clone())
            .collect();
        report.extract_subsampled_to = Some(extract_positives.len());
    }
    report.workflow_origin_positives = workflow_positives;
    report.extract_origin_positives = extract_positives.len();

    let positives: Vec<InstructionPair> = extraction
        .pairs
        .into_iter()
        .chain(extract_positives)
        .collect();
    report.positives_before_downsample = positives.len();

    let mut train = Vec::with_capacity(positives.len() * (1 + negatives.random + negatives.hard));
    let mut stream_key = String::new();
    let mut stream = SplitMix64::new(0);
    for positive in positives {
        let key = match &positive.provenance {
            Provenance::Doc { doc, .. } => format!("dataset/negatives/{doc}"),
            Provenance::Extract { row } => format!("dataset/negatives/extract/{row}"),
        };
        if key != stream_key {
            stream = SplitMix64::stream(seed, &key);
            stream_key = key;
        }
        let instruction_gold = &gold[&positive.instruction];
        let mut mined = Vec::new();
        for _ in 0..negatives.random {
            match mine_random_negative(&positive, instruction_gold, train_catalog, &mut stream) {
                Ok(pair) => mined.push(pair),
                Err(_) => report.exhausted_negatives += 1,
            }
        }
        for _ in 0..negatives.hard {
            match mine_hard_negative(&positive, instruction_gold, train_catalog, &mut stream) {
                Ok(pair) => mined.push(pair),
                Err(_) => report.exhausted_negatives += 1,
            }
        }
        train.push(positive);
        train.extend(mined);
    }

    if let Some(policy) = policy {
        train = downsample(&train, policy);
    }

    for pair in &train {
        *report.per_task.entry(pair.task.to_string()).or_default() += 1;
        *report
            .per_template
            .entry(pair.template_id.clone())
            .or_default() += 1;
        match (pair.label, pair.negative_kind) {
            (Label::Positive, _) => report.train_positives += 1,
            (Label::Negative, NegativeKind::Hard) => report.train_negatives_hard += 1,
            (Label::Negative, _) => report.train_negatives_random += 1,
        }
    }
    report.train_total = train.len();
    for skip in &extraction.skipped {
        *report
            .skipped_missing_elements
            .entry(skip.task.to_string())
            .or_default() += 1;
    }

    let dev = eval_pool("dev", &split.dev, split.catalogs.get("dev"), templates);
    report.dev_sizes = pool_sizes(&dev);
    let mut ood = BTreeMap::new();
    for (domain, docs) in &split.ood {
        let label = format!("ood-{domain}");
        let pool = eval_pool(&label, docs, split.catalogs.get(&label), templates);
        report
            .ood_sizes
            .insert(domain.clone(), pool_sizes(&pool));
        ood.insert(domain.clone(), pool);
    }

    let mut workflow_eval = BTreeMap::new();
    if let Some(t15) = templates
        .iter()
        .find(|t| t.task == TaskId::WorkflowFromText)
    {
        workflow_eval.insert("dev".to_string(), workflow_pool("dev", &split.dev, t15));
        for (domain, docs) in &split.ood {
            let label = format!("ood-{domain}");
            workflow_eval.insert(label.clone(), workflow_pool(&label, docs, t15));
        }
        report.workflow_eval_sizes = workflow_eval
            .iter()
            .map(|(k, v)| (k.clone(), v.len()))
            .collect();
    }

    DatasetBuild {
        train,
        dev,
        ood,
        workflow_eval,
        report,
    }
}

/// Positives-only pairs for an eval split, grouped by target kind.
fn eval_pool(
    label: &str,
    docs: &[WorkflowDoc],
    catalog: Option<&ElementCatalog>,
    templates: &[InstructionTemplate],
) -> BTreeMap<String, Vec<InstructionPair>> {
    let mut groups: BTreeMap<String, Vec<InstructionPair>> = BTreeMap::new();
    let Some(catalog) = catalog else {
        return groups;
    };
    for (index, doc) in docs.iter().enumerate() {
        let extraction =
            extract_positive_pairs(&doc_label(label, index), doc, catalog, templates);
        for pair in extraction.pairs {
            groups
                .entry(group_label(pair.target.kind).to_string())
                .or_default()
                .push(pair);
        }
    }
    groups
}

/// Requirement-to-workflow retrieval queries: each document's requirement
/// rendered through the workflow template, targeting the serialized
/// document itself.
fn workflow_pool(
    label: &str,
    docs: &[WorkflowDoc],
    template: &InstructionTemplate,
) -> Vec<InstructionPair> {
    let no_extra = BTreeMap::new();
    docs.iter()
        .enumerate()
        .filter(|(_, doc)| !doc.requirement.is_empty())
        .map(|(index, doc)| InstructionPair {
            task: TaskId::WorkflowFromText,
            template_id: template.id.to_string(),
            instruction: render_instruction(template, Some(doc), None, &no_extra)
                .expect("workflow template renders from a requirement"),
            target: TargetRef {
                kind: ElementKind::Workflow,
                name: serialize_workflow(doc),
                parent: None,
            },
            label: Label::Positive,
            negative_kind: NegativeKind::None,
            provenance: Provenance::Doc {
                doc: doc_label(label, index),
                step: 0,
            },
        })
        .collect()
}

fn pool_sizes(pool: &BTreeMap<String, Vec<InstructionPair>>) -> BTreeMap<String, usize> {
    pool.iter().map(|(k, v)| (k.clone(), v.len())).collect()
}

#[derive(Debug, Error)]
pub enum RerenderError {
    #[error("unknown template {0}")]
    UnknownTemplate(String),
    #[error("unknown document {0}")]
    UnknownDoc(String),
    #[error("extract row {0} out of range")]
    UnknownRow(usize),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Re-render a pair's instruction from its template and provenance alone.
/// For any pair produced by this module, the result equals the stored
/// instruction text.
pub fn rerender_instruction(
    pair: &InstructionPair,
    docs: &BTreeMap<String, WorkflowDoc>,
    extracts: &[Element],
) -> Result<String, RerenderError> {
    let template = template(&pair.template_id)
        .ok_or_else(|| RerenderError::UnknownTemplate(pair.template_id.clone()))?;
    match &pair.provenance {
        Provenance::Doc { doc, step } => {
            let doc = docs
                .get(doc)
                .ok_or_else(|| RerenderError::UnknownDoc(doc.clone()))?;
            let position = (template.task != TaskId::StepFromRequirement
                && template.task != TaskId::WorkflowFromText)
                .then_some(*step);
            Ok(render_instruction(template, Some(doc), position, &BTreeMap::new())?)
        }
        Provenance::Extract { row } => {
            let element = extracts
                .get(*row)
                .ok_or(RerenderError::UnknownRow(*row))?;
            let mut extra = BTreeMap::new();
            if template.id == "T12" {
                let parent = element.parent.clone().unwrap_or_default();
                let description = extracts
                    .iter()
                    .find(|e| e.kind == ElementKind::Table && e.name == parent)
                    .and_then(|e| e.description.clone())
                    .unwrap_or_default();
                extra.insert("table".to_string(), parent);
                extra.insert("description".to_string(), description);
            } else if let Some(description) = element.description.clone() {
                extra.insert("description".to_string(), description);
            }
            Ok(render_instruction(template, None, None, &extra)?)
        }
    }
}

pub fn write_pairs_jsonl(pairs: &[InstructionPair]) -> String {
    let mut out = String::new();
    for pair in pairs {
        out.push_str(&serde_json::to_string(pair).expect("pairs serialize"));
        out.push('\n');
    }
    out
}

pub fn read_pairs_jsonl(text: &str) -> Result<Vec<InstructionPair>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[derive(Debug, Error)]
pub enum DatasetIoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed pair file {path}: {source}")]
    Pairs {
        path: String,
        source: serde_json::Error,
    },
    #[error("malformed build report: {0}")]
    Report(serde_json::Error),
}

/// Write a dataset build under `dir`: `train_pairs.jsonl`, per-kind
/// `dev/` and `ood-<domain>/` pools, `workflow_eval/` pools, and
/// `build_report.json`.
pub fn write_dataset(dir: &Path, build: &DatasetBuild) -> Result<(), DatasetIoError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("train_pairs.jsonl"), write_pairs_jsonl(&build.train))?;
    write_pool(&dir.join("dev"), &build.dev)?;
    for (domain, pool) in &build.ood {
        write_pool(&dir.join(format!("ood-{domain}")), pool)?;
    }
    if !build.workflow_eval.is_empty() {
        let wf = dir.join("workflow_eval");
        fs::create_dir_all(&wf)?;
        for (label, pairs) in &build.workflow_eval {
            fs::write(wf.join(format!("{label}.jsonl")), write_pairs_jsonl(pairs))?;
        }
    }
    fs::write(
        dir.join("build_report.json"),
        serde_json::to_string_pretty(&build.report).expect("report serializes"),
    )?;
    Ok(())
}

fn write_pool(
    dir: &Path,
    pool: &BTreeMap<String, Vec<InstructionPair>>,
) -> Result<(), DatasetIoError> {
    if pool.is_empty() {
        return Ok(());
    }
    fs::create_dir_all(dir)?;
    for (group, pairs) in pool {
        fs::write(dir.join(format!("{group}.jsonl")), write_pairs_jsonl(pairs))?;
    }
    Ok(())
}

/// Read a dataset previously written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<DatasetBuild, DatasetIoError> {
    let train = read_pair_file(&dir.join("train_pairs.jsonl"))?;
    let dev = read_pool(&dir.join("dev"))?;
    let mut ood = BTreeMap::new();
    for entry in sorted_entries(dir)? {
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(domain) = name.strip_prefix("ood-") {
            ood.insert(domain.to_string(), read_pool(&entry.path())?);
        }
    }
    let mut workflow_eval = BTreeMap::new();
    let wf_dir = dir.join("workflow_eval");
    if wf_dir.is_dir() {
        for entry in sorted_entries(&wf_dir)? {
            let name = entry.file_name().to_string_lossy().to_string();
            if let Some(label) = name.strip_suffix(".jsonl") {
                workflow_eval.insert(label.to_string(), read_pair_file(&entry.path())?);
            }
        }
    }
    let report_path = dir.join("build_report.json");
    let report = serde_json::from_str(&fs::read_to_string(&report_path)?)
        .map_err(DatasetIoError::Report)?;
    Ok(DatasetBuild {
        train,
        dev,
        ood,
        workflow_eval,
        report,
    })
}

fn read_pair_file(path: &Path) -> Result<Vec<InstructionPair>, DatasetIoError> {
    let text = fs::read_to_string(path)?;
    read_pairs_jsonl(&text).map_err(|source| DatasetIoError::Pairs {
        path: path.display().to_string(),
        source,
    })
}

fn read_pool(dir: &Path) -> Result<BTreeMap<String, Vec<InstructionPair>>, DatasetIoError> {
    let mut pool = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(pool);
    }
    for entry in sorted_entries(dir)? {
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(group) = name.strip_suffix(".jsonl") {
            pool.insert(group.to_string(), read_pair_file(&entry.path())?);
        }
    }
    Ok(pool)
}

fn sorted_entries(dir: &Path) -> io::Result<Vec<fs::DirEntry>> {
    let mut entries: Vec<fs::DirEntry> = fs::read_dir(dir)?.collect::<io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{catalog_from_corpus, parse_workflow, testdoc::EXAMPLE_DOC};
    use crate::synth::{generate_corpus, CorpusConfig, OodDomainSpec};
    use proptest::prelude::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn step_element(name: &str, scope: &str) -> Element {
        Element::new(ElementKind::Step, name).with_scope(scope)
    }

    fn positive(target: TargetRef, doc: &str, step: usize) -> InstructionPair {
        InstructionPair {
            task: match target.kind {
                ElementKind::Step => TaskId::StepFromRequirement,
                ElementKind::Table => TaskId::TableFromText,
                ElementKind::Field => TaskId::FieldFromText,
                ElementKind::CatalogItem => TaskId::CatalogItemFromDescription,
                ElementKind::Workflow => TaskId::WorkflowFromText,
            },
            template_id: "T01".to_string(),
            instruction: format!("q:{doc}:{step}"),
            target,
            label: Label::Positive,
            negative_kind: NegativeKind::None,
            provenance: Provenance::Doc {
                doc: doc.to_string(),
                step,
            },
        }
    }

    fn step_target(name: &str) -> TargetRef {
        TargetRef {
            kind: ElementKind::Step,
            name: name.to_string(),
            parent: None,
        }
    }

    #[test]
    fn factor_hits_its_anchors() {
        let policy = DownsamplePolicy::default();
        assert_eq!(policy.factor(50), 4.0);
        assert_eq!(policy.factor(500), 16.0);
        assert_eq!(policy.factor(5), 1.0);
        assert_eq!(policy.factor(1), 1.0);
        assert_eq!(policy.factor(0), 1.0);
        assert_eq!(policy.factor(50_000), 64.0);
        let mut last = 0.0;
        for f in 1..2_000 {
            let factor = policy.factor(f);
            assert!(factor >= last, "factor dipped at {f}");
            last = factor;
        }
    }

    #[test]
    fn keep_rate_tracks_the_factor() {
        let policy = DownsamplePolicy::default();
        for (occurrences, factor) in [(500u64, 16.0f64), (50, 4.0)] {
            let pairs: Vec<InstructionPair> = (0..occurrences)
                .map(|i| positive(step_target("head_step"), &format!("train:{i:04}"), 0))
                .collect();
            let kept = downsample(&pairs, &policy).len() as f64;
            let n = occurrences as f64;
            let expected = n / factor;
            let sigma = (n * (1.0 / factor) * (1.0 - 1.0 / factor)).sqrt();
            assert!(
                (kept - expected).abs() <= 3.0 * sigma,
                "kept {kept} of {n}, expected {expected} within {bound:.2}",
                bound = 3.0 * sigma
            );
        }
    }

    #[test]
    fn rare_targets_are_never_dropped() {
        let policy = DownsamplePolicy::default();
        let pairs: Vec<InstructionPair> = (0..5)
            .map(|i| positive(step_target("tail_step"), &format!("train:{i:04}"), 0))
            .collect();
        assert_eq!(downsample(&pairs, &policy).len(), 5);
    }

    #[test]
    fn negatives_share_their_positives_fate() {
        let policy = DownsamplePolicy::default();
        let mut pairs = Vec::new();
        for i in 0..300 {
            let pos = positive(step_target("head_step"), &format!("train:{i:04}"), 0);
            let mut neg = pos.clone();
            neg.label = Label::Negative;
            neg.negative_kind = NegativeKind::Random;
            neg.target = step_target("other_step");
            pairs.push(pos);
            pairs.push(neg.clone());
            pairs.push(neg);
        }
        let kept = downsample(&pairs, &policy);
        assert!(!kept.is_empty());
        assert!(kept.len() < pairs.len());
        assert_eq!(kept.len() % 3, 0, "negatives must travel with positives");
        for chunk in kept.chunks(3) {
            assert_eq!(chunk[0].label, Label::Positive);
            assert_eq!(chunk[1].label, Label::Negative);
            assert_eq!(chunk[2].label, Label::Negative);
            assert_eq!(chunk[0].provenance, chunk[1].provenance);
        }
    }

    #[test]
    fn downsample_decisions_ignore_list_order() {
        let policy = DownsamplePolicy::default();
        let pairs: Vec<InstructionPair> = (0..400)
            .map(|i| positive(step_target("head_step"), &format!("train:{i:04}"), 0))
            .collect();
        let mut reversed = pairs.clone();
        reversed.reverse();
        let kept: BTreeSet<Provenance> = downsample(&pairs, &policy)
            .into_iter()
            .map(|p| p.provenance)
            .collect();
        let kept_reversed: BTreeSet<Provenance> = downsample(&reversed, &policy)
            .into_iter()
            .map(|p| p.provenance)
            .collect();
        assert_eq!(kept, kept_reversed);
    }

    #[test]
    fn random_negative_avoids_every_gold_target() {
        let mut catalog = ElementCatalog::new();
        for name in ["alpha_step", "beta_step", "gamma_step"] {
            catalog.insert(step_element(name, "itsm")).unwrap();
        }
        let pos = positive(step_target("alpha_step"), "train:0000", 0);
        let gold: BTreeSet<ElementKey> = [
            step_target("alpha_step").key(),
            step_target("beta_step").key(),
        ]
        .into();
        let mut rng = SplitMix64::stream(1, "test");
        for _ in 0..50 {
            let neg = mine_random_negative(&pos, &gold, &catalog, &mut rng).unwrap();
            assert_eq!(neg.target.name, "gamma_step");
            assert_eq!(neg.label, Label::Negative);
            assert_eq!(neg.negative_kind, NegativeKind::Random);
            assert_eq!(neg.instruction, pos.instruction);
            assert_eq!(neg.provenance, pos.provenance);
        }
    }

    #[test]
    fn random_negative_errors_when_no_candidate_exists() {
        let mut catalog = ElementCatalog::new();
        catalog.insert(step_element("alpha_step", "itsm")).unwrap();
        let pos = positive(step_target("alpha_step"), "train:0000", 0);
        let gold = BTreeSet::from([step_target("alpha_step").key()]);
        let mut rng = SplitMix64::stream(1, "test");
        assert!(mine_random_negative(&pos, &gold, &catalog, &mut rng).is_err());
    }

    #[test]
    fn random_negative_draws_are_uniform() {
        let mut catalog = ElementCatalog::new();
        for i in 0..100 {
            catalog
                .insert(step_element(&format!("step_{i:03}"), "itsm"))
                .unwrap();
        }
        let pos = positive(step_target("step_000"), "train:0000", 0);
        let gold = BTreeSet::from([pos.target.key()]);
        let mut rng = SplitMix64::stream(9, "uniformity");
        let draws = 9_900;
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for _ in 0..draws {
            let neg = mine_random_negative(&pos, &gold, &catalog, &mut rng).unwrap();
            *counts.entry(neg.target.name).or_default() += 1;
        }
        assert_eq!(counts.len(), 99);
        let expected = draws as f64 / 99.0;
        let statistic: f64 = counts
            .values()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        let critical = ChiSquared::new(98.0).unwrap().inverse_cdf(0.99);
        assert!(
            statistic < critical,
            "chi-square {statistic:.1} >= {critical:.1}"
        );
    }

    #[test]
    fn hard_negative_shares_the_positive_scope() {
        let mut catalog = ElementCatalog::new();
        catalog.insert(step_element("alpha_step", "itsm")).unwrap();
        catalog.insert(step_element("beta_step", "itsm")).unwrap();
        catalog.insert(step_element("gamma_step", "hr")).unwrap();
        let pos = positive(step_target("alpha_step"), "train:0000", 0);
        let gold = BTreeSet::from([pos.target.key()]);
        let mut rng = SplitMix64::stream(2, "test");
        for _ in 0..20 {
            let neg = mine_hard_negative(&pos, &gold, &catalog, &mut rng).unwrap();
            assert_eq!(neg.target.name, "beta_step");
            assert_eq!(neg.negative_kind, NegativeKind::Hard);
        }
    }

    #[test]
    fn hard_negative_falls_back_to_random_when_the_scope_is_spent() {
        let mut catalog = ElementCatalog::new();
        catalog.insert(step_element("alpha_step", "itsm")).unwrap();
        catalog.insert(step_element("gamma_step", "hr")).unwrap();
        let pos = positive(step_target("alpha_step"), "train:0000", 0);
        let gold = BTreeSet::from([pos.target.key()]);
        let mut rng = SplitMix64::stream(3, "test");
        let neg = mine_hard_negative(&pos, &gold, &catalog, &mut rng).unwrap();
        assert_eq!(neg.target.name, "gamma_step");
        assert_eq!(neg.negative_kind, NegativeKind::Random);
    }

    #[test]
    fn hard_negative_for_a_field_stays_on_the_parent_table() {
        let mut catalog = ElementCatalog::new();
        for (name, parent) in [
            ("assigned_to", "incident_task"),
            ("state", "incident_task"),
            ("amount", "expense_line"),
        ] {
            catalog
                .insert(Element::new(ElementKind::Field, name).with_parent(parent))
                .unwrap();
        }
        let pos = positive(
            TargetRef {
                kind: ElementKind::Field,
                name: "assigned_to".to_string(),
                parent: Some("incident_task".to_string()),
            },
            "train:0000",
            0,
        );
        let gold = BTreeSet::from([pos.target.key()]);
        let mut rng = SplitMix64::stream(4, "test");
        for _ in 0..20 {
            let neg = mine_hard_negative(&pos, &gold, &catalog, &mut rng).unwrap();
            assert_eq!(neg.target.name, "state");
            assert_eq!(neg.target.parent.as_deref(), Some("incident_task"));
            assert_eq!(neg.negative_kind, NegativeKind::Hard);
        }
    }

    fn example_catalog_with_fields() -> (WorkflowDoc, ElementCatalog, Vec<Element>) {
        let doc = parse_workflow(EXAMPLE_DOC).unwrap();
        let extracts = vec![
            Element::new(ElementKind::Table, "incident_task")
                .with_scope("sn_ms_teams_ah")
                .with_description("tasks spawned from incidents"),
            Element::new(ElementKind::Field, "assigned_to")
                .with_parent("incident_task")
                .with_description("the user working the task"),
            Element::new(ElementKind::Field, "state")
                .with_parent("incident_task")
                .with_description("lifecycle state of the task"),
        ];
        let catalog = catalog_from_corpus(std::slice::from_ref(&doc), &extracts).unwrap();
        (doc, catalog, extracts)
    }

    #[test]
    fn example_document_yields_pairs_for_all_three_steps() {
        let (doc, catalog, _) = example_catalog_with_fields();
        let extraction = extract_positive_pairs("train:0000", &doc, &catalog, registry());
        assert!(extraction.skipped.is_empty());
        let requirement_targets: BTreeSet<&str> = extraction
            .pairs
            .iter()
            .filter(|p| p.task == TaskId::StepFromRequirement)
            .map(|p| p.target.name.as_str())
            .collect();
        assert_eq!(
            requirement_targets,
            BTreeSet::from(["look_up_records", "FOREACH", "update_record"])
        );
        let field_targets: BTreeSet<(&str, Option<&str>)> = extraction
            .pairs
            .iter()
            .filter(|p| p.target.kind == ElementKind::Field)
            .map(|p| (p.target.name.as_str(), p.target.parent.as_deref()))
            .collect();
        assert_eq!(
            field_targets,
            BTreeSet::from([("assigned_to", Some("incident_task"))])
        );
        let table_pairs = extraction
            .pairs
            .iter()
            .filter(|p| p.target.kind == ElementKind::Table)
            .count();
        // Steps 0 and 2 bind incident_task; each yields one context pair and
        // one annotation pair.
        assert_eq!(table_pairs, 4);
        assert!(extraction.pairs.iter().all(|p| p.label == Label::Positive));
        assert!(extraction.pairs.iter().all(|p| p.template_id != "T15"));
    }

    #[test]
    fn missing_catalog_elements_become_skip_entries() {
        let doc = parse_workflow(EXAMPLE_DOC).unwrap();
        // No field extracts: the condition field cannot be resolved.
        let catalog = catalog_from_corpus(std::slice::from_ref(&doc), &[]).unwrap();
        let extraction = extract_positive_pairs("train:0000", &doc, &catalog, registry());
        let skipped_tasks: Vec<TaskId> = extraction.skipped.iter().map(|s| s.task).collect();
        assert_eq!(
            skipped_tasks,
            [TaskId::FieldFromText, TaskId::FieldFromTableContext]
        );
        assert!(extraction
            .skipped
            .iter()
            .all(|s| s.target.name == "assigned_to"));
        assert!(!extraction
            .pairs
            .iter()
            .any(|p| p.target.kind == ElementKind::Field));
    }

    #[test]
    fn extract_rows_power_the_extract_side_tasks() {
        let (_, catalog, extracts) = example_catalog_with_fields();
        assert_eq!(extract_rows(&catalog).len(), 3);
        let extraction = pairs_from_extracts(&extracts, registry());
        let by_template: BTreeMap<&str, usize> =
            extraction
                .pairs
                .iter()
                .fold(BTreeMap::new(), |mut acc, p| {
                    *acc.entry(p.template_id.as_str()).or_default() += 1;
                    acc
                });
        assert_eq!(
            by_template,
            BTreeMap::from([("T08", 1), ("T10", 2), ("T12", 2)])
        );
        let t12 = extraction
            .pairs
            .iter()
            .find(|p| p.template_id == "T12")
            .unwrap();
        assert!(t12
            .instruction
            .ends_with("table: incident_task\ndescription: tasks spawned from incidents"));
        assert_eq!(t12.target.kind, ElementKind::Field);
    }

    fn small_config() -> CorpusConfig {
        CorpusConfig {
            seed: 11,
            n_scopes: 4,
            steps_per_scope: 5,
            n_core_steps: 8,
            n_tables: 8,
            fields_per_table: (3, 5),
            n_train_flows: 24,
            steps_per_flow: (2, 5),
            ood_domains: vec![OodDomainSpec {
                name: "hr".to_string(),
                n_flows: 5,
                scope_overlap: 0.5,
            }],
            ..CorpusConfig::default()
        }
    }

    fn docs_by_label(split: &SplitSet) -> BTreeMap<String, WorkflowDoc> {
        let mut docs = BTreeMap::new();
        for (label, slice) in split.splits() {
            for (index, doc) in slice.iter().enumerate() {
                docs.insert(doc_label(&label, index), doc.clone());
            }
        }
        docs
    }

    #[test]
    fn dataset_build_is_deterministic_and_balanced() {
        let split = generate_corpus(&small_config()).unwrap();
        let extracts = extract_rows(&split.catalogs["train"]);
        let negatives = NegativesPerPositive::default();
        let build = build_dataset(&split, &extracts, registry(), negatives, None, 3);
        let again = build_dataset(&split, &extracts, registry(), negatives, None, 3);
        assert_eq!(build, again);

        let report = &build.report;
        assert_eq!(report.train_total, build.train.len());
        assert_eq!(
            report.train_positives,
            report.positives_before_downsample,
            "no policy, no thinning"
        );
        assert_eq!(
            report.train_total,
            report.train_positives + report.train_negatives_random + report.train_negatives_hard
        );
        assert_eq!(
            report.train_negatives_random + report.train_negatives_hard + report.exhausted_negatives,
            2 * report.train_positives
        );
        assert!(report.extract_origin_positives <= report.workflow_origin_positives);
        assert!(report.train_negatives_hard > 0);

        for pair in &build.train {
            assert_eq!(
                pair.label == Label::Positive,
                pair.negative_kind == NegativeKind::None
            );
            assert_ne!(pair.template_id, "T15");
            assert_ne!(pair.task, TaskId::WorkflowFromText);
        }
    }

    #[test]
    fn eval_pools_are_positives_grouped_by_kind() {
        let split = generate_corpus(&small_config()).unwrap();
        let extracts = extract_rows(&split.catalogs["train"]);
        let build = build_dataset(
            &split,
            &extracts,
            registry(),
            NegativesPerPositive::default(),
            None,
            3,
        );
        for group in build.dev.keys() {
            assert!(
                ["steps", "tables", "fields"].contains(&group.as_str()),
                "unexpected dev group {group}"
            );
        }
        for pairs in build.dev.values() {
            for pair in pairs {
                assert_eq!(pair.label, Label::Positive);
                assert_ne!(pair.task, TaskId::CatalogItemFromDescription);
            }
        }
        let hr = &build.ood["hr"];
        assert!(!hr["steps"].is_empty());
        assert!(hr["steps"]
            .iter()
            .all(|p| p.provenance != Provenance::Extract { row: 0 }));

        assert_eq!(
            build.workflow_eval.keys().cloned().collect::<Vec<_>>(),
            ["dev", "ood-hr"]
        );
        for pairs in build.workflow_eval.values() {
            for pair in pairs {
                assert_eq!(pair.task, TaskId::WorkflowFromText);
                assert_eq!(pair.target.kind, ElementKind::Workflow);
                parse_workflow(&pair.target.name).expect("workflow target holds the document");
            }
        }
    }

    #[test]
    fn every_stored_instruction_rerenders_identically() {
        let split = generate_corpus(&small_config()).unwrap();
        let extracts = extract_rows(&split.catalogs["train"]);
        let build = build_dataset(
            &split,
            &extracts,
            registry(),
            NegativesPerPositive::default(),
            None,
            3,
        );
        let docs = docs_by_label(&split);
        let all = build
            .train
            .iter()
            .chain(build.dev.values().flatten())
            .chain(build.ood.values().flat_map(|pool| pool.values().flatten()))
            .chain(build.workflow_eval.values().flatten());
        for pair in all {
            let rendered = rerender_instruction(pair, &docs, &extracts).unwrap();
            assert_eq!(rendered, pair.instruction, "pair {:?}", pair.provenance);
        }
    }

    #[test]
    fn plentiful_extracts_are_subsampled_to_parity() {
        let mut config = small_config();
        config.n_train_flows = 2;
        config.n_tables = 12;
        config.fields_per_table = (5, 8);
        let split = generate_corpus(&config).unwrap();
        let extracts = extract_rows(&split.catalogs["train"]);
        let build = build_dataset(
            &split,
            &extracts,
            registry(),
            NegativesPerPositive::default(),
            None,
            3,
        );
        let report = &build.report;
        assert_eq!(
            report.extract_subsampled_to,
            Some(report.workflow_origin_positives)
        );
        assert_eq!(
            report.extract_origin_positives,
            report.workflow_origin_positives
        );
    }

    #[test]
    fn downsampling_thins_the_head_of_the_train_file() {
        let mut config = small_config();
        config.n_train_flows = 60;
        config.zipf_exponent = 1.4;
        let split = generate_corpus(&config).unwrap();
        let extracts = extract_rows(&split.catalogs["train"]);
        let negatives = NegativesPerPositive::default();
        let flat = build_dataset(&split, &extracts, registry(), negatives, None, 3);
        let policy = DownsamplePolicy::default();
        let thinned = build_dataset(&split, &extracts, registry(), negatives, Some(&policy), 3);
        assert!(
            thinned.report.train_total < flat.report.train_total,
            "downsampling kept {} of {}",
            thinned.report.train_total,
            flat.report.train_total
        );
        assert_eq!(
            thinned.report.positives_before_downsample,
            flat.report.train_positives
        );
        assert_eq!(
            thinned.report.train_total,
            thinned.report.train_positives
                + thinned.report.train_negatives_random
                + thinned.report.train_negatives_hard
        );
    }

    #[test]
    fn dataset_files_round_trip() {
        let split = generate_corpus(&small_config()).unwrap();
        let extracts = extract_rows(&split.catalogs["train"]);
        let build = build_dataset(
            &split,
            &extracts,
            registry(),
            NegativesPerPositive::default(),
            Some(&DownsamplePolicy::default()),
            3,
        );
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &build).unwrap();
        let reread = read_dataset(dir.path()).unwrap();
        assert_eq!(build, reread);
    }

    #[test]
    fn pair_lines_round_trip_through_jsonl() {
        let pos = positive(step_target("alpha_step"), "train:0000", 2);
        let mut neg = pos.clone();
        neg.label = Label::Negative;
        neg.negative_kind = NegativeKind::Hard;
        neg.provenance = Provenance::Extract { row: 7 };
        let text = write_pairs_jsonl(&[pos.clone(), neg.clone()]);
        assert_eq!(read_pairs_jsonl(&text).unwrap(), vec![pos, neg]);
    }

    proptest! {
        #[test]
        fn factor_is_bounded_and_monotone(
            anchor in 2.0f64..10.0,
            base in 2.0f64..6.0,
            cap in 8.0f64..128.0,
            freq in 1u64..100_000,
        ) {
            let policy = DownsamplePolicy { anchor, base, cap, seed: 0 };
            let factor = policy.factor(freq);
            prop_assert!(factor >= 1.0);
            prop_assert!(factor <= cap);
            prop_assert!(policy.factor(freq + 1) >= factor);
        }

        #[test]
        fn downsample_returns_an_attached_subsequence(
            spec in proptest::collection::vec((0u8..6, 0usize..3), 0..80),
            seed in 0u64..u64::MAX,
        ) {
            let mut pairs = Vec::new();
            for (i, (target, negs)) in spec.iter().enumerate() {
                let pos = positive(
                    step_target(&format!("step_{target}")),
                    &format!("train:{i:04}"),
                    0,
                );
                let mut attached = Vec::new();
                for _ in 0..*negs {
                    let mut neg = pos.clone();
                    neg.label = Label::Negative;
                    neg.negative_kind = NegativeKind::Random;
                    neg.target = step_target("decoy_step");
                    attached.push(neg);
                }
                pairs.push(pos);
                pairs.extend(attached);
            }
            let policy = DownsamplePolicy { seed, ..DownsamplePolicy::default() };
            let kept = downsample(&pairs, &policy);

            // Subsequence of the input.
            let mut cursor = pairs.iter();
            for pair in &kept {
                prop_assert!(cursor.any(|p| p == pair));
            }
            // Labels still pair up: a negative only ever follows its own
            // positive, and positives keep all their negatives.
            let mut index = 0usize;
            for pair in &kept {
                if pair.label == Label::Negative {
                    prop_assert!(index > 0);
                    prop_assert_eq!(&kept[index - 1].provenance, &pair.provenance);
                }
                index += 1;
            }
        }
    }
}
