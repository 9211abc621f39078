//! Domain model for structured workflow data: workflow documents, the
//! elements they reference (steps, tables, fields, catalog items), and the
//! element catalog used for retrieval and negative mining.

mod catalog;
mod parse;
mod serialize;

#[cfg(test)]
pub(crate) mod testdoc {
    /// Reconstruction of the daily incident-task example: requirement,
    /// daily trigger, and the look-up / for-each / update step sequence.
    pub(crate) const EXAMPLE_DOC: &str = "\
type: flow
scope: sn_ms_teams_ah
requirement: Every day, look up incident tasks that do not have assignees and close them.
trigger:
  annotation: every day
  type: daily
  inputs:
  - name: time
    value: '1970-01-02 00:00:00'
steps:
- annotation: look up incident tasks that do not have assignees
  definition: look_up_records
  inputs:
  - name: table
    table: incident_task
  - name: condition
    condition: assigned_to ISEMPTY
- annotation: for each record found
  definition: FOREACH
- annotation: close the incident task
  definition: update_record
  inputs:
  - name: table
    table: incident_task
  - name: values
    value: state=closed
";
}

pub use catalog::{catalog_from_corpus, read_extracts_jsonl, write_extracts_jsonl};
pub use parse::parse_workflow;
pub use serialize::serialize_workflow;

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

/// Document kind of a parsed workflow document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocType {
    Flow,
    Playbook,
}

impl DocType {
    pub fn as_str(self) -> &'static str {
        match self {
            DocType::Flow => "flow",
            DocType::Playbook => "playbook",
        }
    }
}

impl std::str::FromStr for DocType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "flow" => Ok(DocType::Flow),
            "playbook" => Ok(DocType::Playbook),
            other => Err(format!("unknown document type {other:?}")),
        }
    }
}

/// One input binding of a step or trigger.
///
/// Values, table references, and condition expressions are kept as raw
/// strings; only the structural keys are interpreted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputBinding {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
    /// Table referenced by this binding, when the binding names one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<String>,
    /// Condition expression over field names, e.g. `assigned_to ISEMPTY`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
    /// Unknown keys, preserved verbatim for round-tripping.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub payload: BTreeMap<String, String>,
}

/// Trigger block of a workflow document.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerSpec {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub annotation: String,
    /// Trigger type string (`daily`, `record_created`, ...).
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub trigger_type: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<InputBinding>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub payload: BTreeMap<String, String>,
}

impl TriggerSpec {
    pub fn is_empty(&self) -> bool {
        self.annotation.is_empty()
            && self.trigger_type.is_empty()
            && self.inputs.is_empty()
            && self.payload.is_empty()
    }
}

/// One step of a workflow.
///
/// `definition` is absent on steps that are still being authored (the "last
/// step" position of context instructions); when present it must match the
/// step identifier grammar.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepInstance {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub annotation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub definition: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<InputBinding>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub payload: BTreeMap<String, String>,
}

impl StepInstance {
    /// Tables referenced by this step's inputs, in input order, deduplicated.
    pub fn table_refs(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        let mut refs = Vec::new();
        for binding in &self.inputs {
            if let Some(table) = binding.table.as_deref() {
                if seen.insert(table) {
                    refs.push(table);
                }
            }
        }
        refs
    }

    /// Field names referenced by this step's condition expressions, in input
    /// order, deduplicated. A condition references fields as identifier
    /// tokens; operator words are uppercase and therefore never collide with
    /// the lowercase field grammar.
    pub fn field_refs(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut refs = Vec::new();
        for binding in &self.inputs {
            if let Some(cond) = binding.condition.as_deref() {
                for token in condition_field_tokens(cond) {
                    if seen.insert(token.clone()) {
                        refs.push(token);
                    }
                }
            }
        }
        refs
    }
}

/// Extract lowercase identifier tokens from a condition expression.
fn condition_field_tokens(cond: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in cond.chars() {
        if ch.is_ascii_lowercase() || ch.is_ascii_digit() || ch == '_' || ch == '.' {
            current.push(ch);
        } else {
            if is_identifier(&current) {
                tokens.push(std::mem::take(&mut current));
            } else {
                current.clear();
            }
        }
    }
    if is_identifier(&current) {
        tokens.push(current);
    }
    tokens
}

/// Step/table/field identifier grammar: ASCII letters, digits, `_` and `.`,
/// with at least one letter. Control-flow steps such as `FOREACH` are
/// conventionally uppercase, so both cases are accepted.
pub fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
        && s.chars().any(|c| c.is_ascii_alphabetic())
}

/// A parsed annotated workflow document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowDoc {
    pub doc_type: DocType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<String>,
    pub requirement: String,
    #[serde(default, skip_serializing_if = "TriggerSpec::is_empty")]
    pub trigger: TriggerSpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub steps: Vec<StepInstance>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub payload: BTreeMap<String, String>,
}

impl WorkflowDoc {
    pub fn new(doc_type: DocType, requirement: impl Into<String>) -> Self {
        Self {
            doc_type,
            scope: None,
            requirement: requirement.into(),
            trigger: TriggerSpec::default(),
            steps: Vec::new(),
            payload: BTreeMap::new(),
        }
    }

    /// Scope a step element should be attributed to: the step's own scope,
    /// falling back to the document scope.
    pub fn step_scope<'a>(&'a self, step: &'a StepInstance) -> Option<&'a str> {
        step.scope.as_deref().or(self.scope.as_deref())
    }
}

/// Kind of a retrievable element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Step,
    Table,
    Field,
    CatalogItem,
    Workflow,
}

impl ElementKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ElementKind::Step => "step",
            ElementKind::Table => "table",
            ElementKind::Field => "field",
            ElementKind::CatalogItem => "catalog_item",
            ElementKind::Workflow => "workflow",
        }
    }

    pub const ALL: [ElementKind; 5] = [
        ElementKind::Step,
        ElementKind::Table,
        ElementKind::Field,
        ElementKind::CatalogItem,
        ElementKind::Workflow,
    ];
}

impl std::str::FromStr for ElementKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "step" => Ok(ElementKind::Step),
            "table" => Ok(ElementKind::Table),
            "field" => Ok(ElementKind::Field),
            "catalog_item" => Ok(ElementKind::CatalogItem),
            "workflow" => Ok(ElementKind::Workflow),
            other => Err(format!("unknown element kind {other:?}")),
        }
    }
}

impl fmt::Display for ElementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Identity of an element inside a catalog: (kind, name, parent).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ElementKey {
    pub kind: ElementKind,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
}

impl fmt::Display for ElementKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.parent {
            Some(parent) => write!(f, "{}:{}/{}", self.kind, parent, self.name),
            None => write!(f, "{}:{}", self.kind, self.name),
        }
    }
}

/// Any retrievable target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Element {
    pub kind: ElementKind,
    /// Identifier, or the serialized document string for workflow elements.
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<String>,
    /// Owning table for field elements.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub payload: BTreeMap<String, String>,
}

impl Element {
    pub fn new(kind: ElementKind, name: impl Into<String>) -> Self {
        Self {
            kind,
            name: name.into(),
            scope: None,
            parent: None,
            description: None,
            payload: BTreeMap::new(),
        }
    }

    pub fn with_scope(mut self, scope: impl Into<String>) -> Self {
        self.scope = Some(scope.into());
        self
    }

    pub fn with_parent(mut self, parent: impl Into<String>) -> Self {
        self.parent = Some(parent.into());
        self
    }

    pub fn with_description(mut self, description: impl Into<String>) -> Self {
        self.description = Some(description.into());
        self
    }

    pub fn key(&self) -> ElementKey {
        ElementKey {
            kind: self.kind,
            name: self.name.clone(),
            parent: self.parent.clone(),
        }
    }

    /// Canonical document-side rendering, shared by the dense encoder and the
    /// BM25 index. Workflow elements render as their serialized document;
    /// everything else as a key/value block with absent keys omitted.
    pub fn document_text(&self) -> String {
        if self.kind == ElementKind::Workflow {
            return self.name.clone();
        }
        let mut lines = vec![
            format!("kind: {}", self.kind),
            format!("name: {}", self.name),
        ];
        if let Some(parent) = &self.parent {
            lines.push(format!("parent: {parent}"));
        }
        if let Some(scope) = &self.scope {
            lines.push(format!("scope: {scope}"));
        }
        if let Some(description) = &self.description {
            lines.push(format!("description: {description}"));
        }
        lines.join("\n")
    }
}

/// Catalog errors.
#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("duplicate element {key} with conflicting descriptions ({first:?} vs {second:?})")]
    DuplicateElement {
        key: ElementKey,
        first: String,
        second: String,
    },
}

/// Set of retrievable elements with derived indexes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementCatalog {
    elements: BTreeMap<ElementKey, Element>,
    /// scope -> element names in that scope.
    scope_index: BTreeMap<String, BTreeSet<String>>,
    /// table -> field names of that table.
    table_index: BTreeMap<String, BTreeSet<String>>,
}

impl ElementCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert an element, merging with an existing record of the same
    /// identity. Conflicting descriptions are an error; missing metadata is
    /// filled from whichever record has it.
    pub fn insert(&mut self, element: Element) -> Result<(), CatalogError> {
        let key = element.key();
        if let Some(existing) = self.elements.get_mut(&key) {
            match (&existing.description, &element.description) {
                (Some(a), Some(b)) if a != b => {
                    return Err(CatalogError::DuplicateElement {
                        key,
                        first: a.clone(),
                        second: b.clone(),
                    });
                }
                (None, Some(b)) => existing.description = Some(b.clone()),
                _ => {}
            }
            if existing.scope.is_none() {
                existing.scope = element.scope.clone();
                if let Some(scope) = &element.scope {
                    self.scope_index
                        .entry(scope.clone())
                        .or_default()
                        .insert(element.name.clone());
                }
            }
            for (k, v) in element.payload {
                existing.payload.entry(k).or_insert(v);
            }
            return Ok(());
        }
        if let Some(scope) = &element.scope {
            self.scope_index
                .entry(scope.clone())
                .or_default()
                .insert(element.name.clone());
        }
        if element.kind == ElementKind::Field {
            if let Some(table) = &element.parent {
                self.table_index
                    .entry(table.clone())
                    .or_default()
                    .insert(element.name.clone());
            }
        }
        self.elements.insert(key, element);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn get(&self, key: &ElementKey) -> Option<&Element> {
        self.elements.get(key)
    }

    pub fn contains(&self, key: &ElementKey) -> bool {
        self.elements.contains_key(key)
    }

    /// All elements in deterministic (key) order.
    pub fn elements(&self) -> impl Iterator<Item = &Element> {
        self.elements.values()
    }

    /// Elements of one kind, in deterministic order.
    pub fn elements_of_kind(&self, kind: ElementKind) -> Vec<&Element> {
        self.elements.values().filter(|e| e.kind == kind).collect()
    }

    pub fn count_of_kind(&self, kind: ElementKind) -> usize {
        self.elements.values().filter(|e| e.kind == kind).count()
    }

    pub fn scope_index(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.scope_index
    }

    pub fn table_index(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.table_index
    }

    /// Elements of a kind within one scope, in deterministic order.
    pub fn elements_in_scope(&self, kind: ElementKind, scope: &str) -> Vec<&Element> {
        self.elements
            .values()
            .filter(|e| e.kind == kind && e.scope.as_deref() == Some(scope))
            .collect()
    }

    /// Field elements of one table, in deterministic order.
    pub fn fields_of_table(&self, table: &str) -> Vec<&Element> {
        self.elements
            .values()
            .filter(|e| e.kind == ElementKind::Field && e.parent.as_deref() == Some(table))
            .collect()
    }

    /// Rebuild both indexes from the element set; used to check consistency.
    pub fn rebuild_indexes(&self) -> (BTreeMap<String, BTreeSet<String>>, BTreeMap<String, BTreeSet<String>>) {
        let mut scope_index: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        let mut table_index: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for element in self.elements.values() {
            if let Some(scope) = &element.scope {
                scope_index
                    .entry(scope.clone())
                    .or_default()
                    .insert(element.name.clone());
            }
            if element.kind == ElementKind::Field {
                if let Some(table) = &element.parent {
                    table_index
                        .entry(table.clone())
                        .or_default()
                        .insert(element.name.clone());
                }
            }
        }
        (scope_index, table_index)
    }

    /// True when the stored indexes equal a rebuild from the element set.
    pub fn indexes_consistent(&self) -> bool {
        let (scope_index, table_index) = self.rebuild_indexes();
        scope_index == self.scope_index && table_index == self.table_index
    }

    /// Persist as JSONL of element records, one per line, deterministic order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for element in self.elements.values() {
            out.push_str(&serde_json::to_string(element).expect("element serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let mut catalog = Self::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let element: Element = serde_json::from_str(line)?;
            catalog
                .insert(element)
                .expect("jsonl catalog has no conflicting duplicates");
        }
        Ok(catalog)
    }
}

/// Errors produced by the workflow document parser.
#[derive(Debug, Error, PartialEq, Eq)]
#[error("parse error at line {line}, column {column}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl ParseError {
    pub fn new(line: usize, column: usize, message: impl Into<String>) -> Self {
        Self {
            line,
            column,
            message: message.into(),
        }
    }
}
