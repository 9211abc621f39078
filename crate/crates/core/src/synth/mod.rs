//! Seeded synthetic corpus generation.
//!
//! A corpus is a universe of scopes, steps, tables, and catalog items plus
//! three kinds of splits: train flows, dev flows drawn from the same
//! universe, and OOD domains that mix train material with fresh scopes and
//! tables the train split never sees. Step usage follows a Zipf law over the
//! inventory rank, so a handful of core steps dominates, mirroring real
//! workflow data.
//!
//! All randomness comes from named [`SplitMix64`] streams derived from the
//! config seed, one stream per flow, so the same config always produces a
//! byte-identical corpus and adding a generation stage never perturbs
//! existing output.

pub(crate) mod grammar;
pub(crate) mod universe;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{
    catalog_from_corpus, parse_workflow, serialize_workflow, DocType, ElementCatalog,
    ElementKind, InputBinding, ParseError, StepInstance, TriggerSpec, WorkflowDoc,
};
use crate::rng::SplitMix64;

use grammar::{
    capitalize, clause_for_step, cond_kind_for, render_condition, requirement_sentence,
    table_singular, trigger_phrase, CondTerm, StepCtx, CHANNELS,
};
use universe::{Role, StepDef, TableDef, Universe, FIELD_POOL};

/// One out-of-domain evaluation split: `scope_overlap` is the fraction of its
/// flow content drawn from train scopes; the rest comes from scopes and
/// tables exclusive to this domain. Every domain owns at least one fresh
/// scope and table regardless of overlap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodDomainSpec {
    pub name: String,
    pub n_flows: usize,
    pub scope_overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_scopes: usize,
    pub steps_per_scope: usize,
    /// Number of curated high-frequency steps at the top of the Zipf ranking.
    pub n_core_steps: usize,
    pub zipf_exponent: f64,
    pub n_tables: usize,
    /// Inclusive range of fields per table; every table always gets the
    /// assignment and state fields, so the minimum is 2.
    pub fields_per_table: (usize, usize),
    pub n_train_flows: usize,
    /// Inclusive range of steps per flow. The underlying data gives no
    /// distribution for this, so it is an explicit knob.
    pub steps_per_flow: (usize, usize),
    pub ood_domains: Vec<OodDomainSpec>,
    pub annotation_grammar_version: String,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 7,
            n_scopes: 12,
            steps_per_scope: 20,
            n_core_steps: 20,
            zipf_exponent: 1.1,
            n_tables: 24,
            fields_per_table: (4, 10),
            n_train_flows: 200,
            steps_per_flow: (2, 8),
            ood_domains: Vec::new(),
            annotation_grammar_version: "g1".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid corpus config: {0}")]
pub struct ConfigError(pub String);

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError(m));
        if self.n_scopes == 0 || self.steps_per_scope == 0 {
            return fail("n_scopes and steps_per_scope must be positive".into());
        }
        if self.n_core_steps == 0 || self.n_core_steps > 20 {
            return fail(format!("n_core_steps must be in 1..=20, got {}", self.n_core_steps));
        }
        if self.n_core_steps > self.n_scopes * self.steps_per_scope {
            return fail(format!(
                "n_core_steps {} exceeds inventory size {}",
                self.n_core_steps,
                self.n_scopes * self.steps_per_scope
            ));
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent > 0.0) {
            return fail(format!("zipf_exponent must be positive, got {}", self.zipf_exponent));
        }
        if self.n_tables == 0 {
            return fail("n_tables must be positive".into());
        }
        let (flo, fhi) = self.fields_per_table;
        if flo < 2 || fhi < flo || fhi > FIELD_POOL.len() {
            return fail(format!(
                "fields_per_table must satisfy 2 <= lo <= hi <= {}, got ({flo}, {fhi})",
                FIELD_POOL.len()
            ));
        }
        if self.n_train_flows == 0 {
            return fail("n_train_flows must be positive".into());
        }
        let (slo, shi) = self.steps_per_flow;
        if slo < 1 || shi < slo || shi > 20 {
            return fail(format!(
                "steps_per_flow must satisfy 1 <= lo <= hi <= 20, got ({slo}, {shi})"
            ));
        }
        if self.annotation_grammar_version != "g1" {
            return fail(format!(
                "unknown annotation_grammar_version {:?}",
                self.annotation_grammar_version
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.ood_domains {
            if d.name.is_empty()
                || !d.name.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
            {
                return fail(format!("ood domain name {:?} must be lowercase snake case", d.name));
            }
            if !seen.insert(d.name.as_str()) {
                return fail(format!("duplicate ood domain {:?}", d.name));
            }
            if d.n_flows == 0 {
                return fail(format!("ood domain {:?} needs at least one flow", d.name));
            }
            if !(0.0..=1.0).contains(&d.scope_overlap) {
                return fail(format!(
                    "ood domain {:?} scope_overlap {} outside [0, 1]",
                    d.name, d.scope_overlap
                ));
            }
        }
        Ok(())
    }
}

/// Generated corpus: documents per split plus one element catalog per split.
/// The dev split shares the train catalog; each OOD catalog is the train
/// universe extended with the domain's fresh elements.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitSet {
    pub train: Vec<WorkflowDoc>,
    pub dev: Vec<WorkflowDoc>,
    pub ood: BTreeMap<String, Vec<WorkflowDoc>>,
    pub catalogs: BTreeMap<String, ElementCatalog>,
}

impl SplitSet {
    /// Split label to document list, in the split order train, dev, ood-*.
    pub fn splits(&self) -> Vec<(String, &[WorkflowDoc])> {
        let mut out = vec![
            ("train".to_string(), self.train.as_slice()),
            ("dev".to_string(), self.dev.as_slice()),
        ];
        for (name, docs) in &self.ood {
            out.push((format!("ood-{name}"), docs.as_slice()));
        }
        out
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Pick {
    Train(usize),
    Fresh(usize),
}

fn generate_flow(
    u: &Universe,
    config: &CorpusConfig,
    label: &str,
    domain: Option<&OodDomainSpec>,
    index: usize,
) -> WorkflowDoc {
    let mut rng = SplitMix64::stream(config.seed, &format!("flow/{label}/{index}"));
    let fresh_pool = domain.map(|d| (&u.fresh_steps[&d.name], &u.fresh_tables[&d.name]));

    let doc_type = if rng.next_f64() < 0.85 { DocType::Flow } else { DocType::Playbook };

    let fresh_scope = match domain {
        Some(d) => rng.next_f64() >= d.scope_overlap,
        None => false,
    };
    let scope = if fresh_scope {
        let fs = &u.fresh_scopes[&domain.unwrap().name];
        fs[rng.next_index(fs.len())].clone()
    } else {
        u.train_scopes[rng.next_index(u.train_scopes.len())].clone()
    };

    let (slo, shi) = config.steps_per_flow;
    let n_steps = rng.next_in_range(slo as u64, shi as u64) as usize;

    let def = |p: Pick| -> &StepDef {
        match p {
            Pick::Train(i) => &u.steps[i],
            Pick::Fresh(i) => &fresh_pool.unwrap().0[i],
        }
    };
    let table_of = |p: Pick, t: usize| -> &TableDef {
        match p {
            Pick::Train(_) => &u.tables[t],
            Pick::Fresh(_) => &fresh_pool.unwrap().1[t],
        }
    };

    // First slot is a lookup so the flow has a record source; later slots
    // follow the Zipf law, mixing in fresh domain steps per the overlap.
    let mut picks: Vec<Pick> = Vec::new();
    if fresh_scope {
        let fs = fresh_pool.unwrap().0;
        let in_scope: Vec<usize> = fs
            .iter()
            .enumerate()
            .filter(|(_, s)| s.scope == scope && s.role == Role::Lookup)
            .map(|(i, _)| i)
            .collect();
        let any_lookup: Vec<usize> = fs
            .iter()
            .enumerate()
            .filter(|(_, s)| s.role == Role::Lookup)
            .map(|(i, _)| i)
            .collect();
        let idx = if !in_scope.is_empty() {
            in_scope[rng.next_index(in_scope.len())]
        } else if !any_lookup.is_empty() {
            any_lookup[rng.next_index(any_lookup.len())]
        } else {
            rng.next_index(fs.len())
        };
        picks.push(Pick::Fresh(idx));
    } else {
        picks.push(Pick::Train(u.sample_lookup_step(&mut rng)));
    }
    for _ in 1..n_steps {
        let mut pick = Pick::Train(0);
        for _ in 0..10 {
            pick = match domain {
                Some(d) if rng.next_f64() >= d.scope_overlap => {
                    let fs = fresh_pool.unwrap().0;
                    Pick::Fresh(rng.next_index(fs.len()))
                }
                _ => Pick::Train(u.sample_step(&mut rng)),
            };
            if !picks.contains(&pick) {
                break;
            }
        }
        picks.push(pick);
    }

    // The first flow of every OOD domain is guaranteed to exercise a fresh
    // step that binds a fresh table, so the split tests unseen elements even
    // at full scope overlap.
    if domain.is_some() && index == 0 && !picks.iter().any(|p| matches!(p, Pick::Fresh(_))) {
        let fs = fresh_pool.unwrap().0;
        let candidates: Vec<usize> = fs
            .iter()
            .enumerate()
            .filter(|(_, s)| {
                s.noun_table.is_some()
                    && matches!(s.role, Role::Lookup | Role::Mutate | Role::Delete)
            })
            .map(|(i, _)| i)
            .collect();
        let idx = if candidates.is_empty() {
            rng.next_index(fs.len())
        } else {
            candidates[rng.next_index(candidates.len())]
        };
        let last = picks.len() - 1;
        picks[last] = Pick::Fresh(idx);
    }

    // Flow-level primary table: the first step's noun table when it has one,
    // otherwise a table of the flow scope.
    let slot0 = def(picks[0]);
    let primary: &TableDef = match slot0.noun_table {
        Some(nt) => table_of(picks[0], nt),
        None => {
            if fresh_scope {
                let ft = fresh_pool.unwrap().1;
                let in_scope: Vec<usize> = ft
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| t.scope == scope)
                    .map(|(i, _)| i)
                    .collect();
                if !in_scope.is_empty() {
                    &ft[in_scope[rng.next_index(in_scope.len())]]
                } else if !ft.is_empty() {
                    &ft[rng.next_index(ft.len())]
                } else {
                    &u.tables[rng.next_index(u.tables.len())]
                }
            } else {
                match u.tables_by_scope.get(&scope) {
                    Some(ts) if !ts.is_empty() => &u.tables[ts[rng.next_index(ts.len())]],
                    _ => &u.tables[rng.next_index(u.tables.len())],
                }
            }
        }
    };

    let mut steps_out = Vec::new();
    let mut contexts: Vec<(Option<&TableDef>, Vec<CondTerm>, &'static str)> = Vec::new();
    for (pos, &p) in picks.iter().enumerate() {
        let sd = def(p);
        let channel = CHANNELS[rng.next_index(CHANNELS.len())];
        let bound: Option<&TableDef> = match sd.role {
            Role::Lookup | Role::Mutate | Role::Delete | Role::Create | Role::Branch
            | Role::Wait => Some(match sd.noun_table {
                Some(nt) => table_of(p, nt),
                None => primary,
            }),
            Role::Misc => match sd.noun_table {
                Some(nt) => Some(table_of(p, nt)),
                None if sd.name == "attach_file" => Some(primary),
                None => None,
            },
            Role::Notify | Role::Loop | Role::Approve => None,
        };
        let n_terms = match sd.role {
            Role::Lookup => {
                if rng.next_f64() < 0.2 {
                    2
                } else {
                    1
                }
            }
            Role::Branch | Role::Wait => 1,
            Role::Delete => {
                if rng.next_f64() < 0.7 {
                    1
                } else {
                    0
                }
            }
            Role::Mutate => {
                if rng.next_f64() < 0.4 {
                    1
                } else {
                    0
                }
            }
            _ => 0,
        };
        let mut terms = Vec::new();
        if let Some(t) = bound {
            let mut fields: Vec<usize> = (0..t.fields.len()).collect();
            rng.shuffle(&mut fields);
            for &fidx in fields.iter().take(n_terms) {
                let kind = cond_kind_for(t.fields[fidx].pool, &mut rng);
                terms.push(CondTerm { field: fidx, kind });
            }
        }
        let annotation = capitalize(&clause_for_step(
            sd,
            &StepCtx { table: bound, terms: &terms, channel, position: pos },
            &mut rng,
        ));
        let mut inputs = Vec::new();
        if let Some(t) = bound {
            inputs.push(InputBinding {
                name: Some("table".into()),
                table: Some(t.name.clone()),
                ..Default::default()
            });
            if !terms.is_empty() {
                inputs.push(InputBinding {
                    name: Some("condition".into()),
                    condition: Some(render_condition(t, &terms)),
                    ..Default::default()
                });
            }
        }
        if sd.role == Role::Notify && sd.name != "send_email" && sd.name != "publish_event" {
            inputs.push(InputBinding {
                name: Some("channel".into()),
                value: Some(format!("#{channel}")),
                ..Default::default()
            });
        }
        steps_out.push(StepInstance {
            annotation,
            definition: Some(sd.name.clone()),
            scope: if sd.scope != scope { Some(sd.scope.clone()) } else { None },
            inputs,
            payload: BTreeMap::new(),
        });
        contexts.push((bound, terms, channel));
    }

    let r = rng.next_f64();
    let trigger_type = if r < 0.25 {
        "daily"
    } else if r < 0.40 {
        "weekly"
    } else if r < 0.45 {
        "hourly"
    } else if r < 0.65 {
        "record_created"
    } else if r < 0.80 {
        "record_updated"
    } else {
        "manual"
    };
    let trig_table =
        matches!(trigger_type, "record_created" | "record_updated").then_some(primary);
    let phrase = trigger_phrase(trigger_type, trig_table);
    let time_binding = |value: &str| InputBinding {
        name: Some("time".into()),
        value: Some(value.into()),
        ..Default::default()
    };
    let trigger = TriggerSpec {
        annotation: match trigger_type {
            "daily" => "Run this flow every day".to_string(),
            "weekly" => "Run this flow every week".to_string(),
            "hourly" => "Run this flow every hour".to_string(),
            "record_created" => {
                format!("Run when a {} record is created", table_singular(primary))
            }
            "record_updated" => {
                format!("Run when a {} record is updated", table_singular(primary))
            }
            _ => "Run on request".to_string(),
        },
        trigger_type: trigger_type.to_string(),
        inputs: match trigger_type {
            "daily" => vec![time_binding("1970-01-02 00:00:00")],
            "weekly" => vec![time_binding("1970-01-08 00:00:00")],
            "hourly" => vec![time_binding("1970-01-01 01:00:00")],
            "record_created" | "record_updated" => vec![InputBinding {
                name: Some("table".into()),
                table: Some(primary.name.clone()),
                ..Default::default()
            }],
            _ => Vec::new(),
        },
        payload: BTreeMap::new(),
    };

    // Requirement: the trigger phrase, the source clause, and the clause of
    // the last consequential step, re-rendered so its surface wording varies
    // from the annotations.
    let (t0, terms0, ch0) = &contexts[0];
    let mut clauses = vec![clause_for_step(
        def(picks[0]),
        &StepCtx { table: *t0, terms: terms0, channel: ch0, position: 0 },
        &mut rng,
    )];
    let last_idx = (1..picks.len()).rev().find(|&i| {
        matches!(
            def(picks[i]).role,
            Role::Mutate | Role::Create | Role::Delete | Role::Notify
        )
    });
    if let Some(li) = last_idx {
        let (tl, termsl, chl) = &contexts[li];
        clauses.push(clause_for_step(
            def(picks[li]),
            &StepCtx { table: *tl, terms: termsl, channel: chl, position: li },
            &mut rng,
        ));
    }
    let requirement = requirement_sentence(&phrase, &clauses);

    let mut doc = WorkflowDoc::new(doc_type, requirement);
    doc.scope = Some(scope);
    doc.trigger = trigger;
    doc.steps = steps_out;
    doc
}

/// Generate a complete corpus from the config. Pure in the config: the same
/// input yields a byte-identical corpus.
pub fn generate_corpus(config: &CorpusConfig) -> Result<SplitSet, ConfigError> {
    let u = Universe::build(config)?;

    let train: Vec<WorkflowDoc> = (0..config.n_train_flows)
        .map(|i| generate_flow(&u, config, "train", None, i))
        .collect();
    let n_dev = (config.n_train_flows / 10).max(1);
    let dev: Vec<WorkflowDoc> = (0..n_dev)
        .map(|i| generate_flow(&u, config, "dev", None, i))
        .collect();
    let mut ood = BTreeMap::new();
    for d in &config.ood_domains {
        let docs: Vec<WorkflowDoc> = (0..d.n_flows)
            .map(|i| generate_flow(&u, config, &format!("ood-{}", d.name), Some(d), i))
            .collect();
        ood.insert(d.name.clone(), docs);
    }

    let train_extracts = u.extract_elements();
    let mut train_and_dev = train.clone();
    train_and_dev.extend(dev.iter().cloned());
    let train_catalog = catalog_from_corpus(&train_and_dev, &train_extracts)
        .expect("universe elements carry consistent metadata");

    let mut catalogs = BTreeMap::new();
    catalogs.insert("train".to_string(), train_catalog.clone());
    catalogs.insert("dev".to_string(), train_catalog);
    for d in &config.ood_domains {
        let mut extracts = train_extracts.clone();
        extracts.extend(u.fresh_extract_elements(&d.name));
        let catalog = catalog_from_corpus(&ood[&d.name], &extracts)
            .expect("universe elements carry consistent metadata");
        catalogs.insert(format!("ood-{}", d.name), catalog);
    }

    Ok(SplitSet { train, dev, ood, catalogs })
}

/// Shape report over a generated corpus.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub flow_counts: BTreeMap<String, usize>,
    /// Per split, element count by kind.
    pub element_counts: BTreeMap<String, BTreeMap<String, usize>>,
    pub step_occurrences: u64,
    /// Step definition name to occurrence count across train flows.
    pub step_histogram: BTreeMap<String, u64>,
}

impl CorpusStats {
    /// Fraction of train step occurrences covered by the `k` most frequent
    /// steps.
    pub fn top_share(&self, k: usize) -> f64 {
        if self.step_occurrences == 0 {
            return 0.0;
        }
        let mut counts: Vec<u64> = self.step_histogram.values().copied().collect();
        counts.sort_unstable_by(|a, b| b.cmp(a));
        let top: u64 = counts.iter().take(k).sum();
        top as f64 / self.step_occurrences as f64
    }
}

pub fn corpus_stats(set: &SplitSet) -> CorpusStats {
    let mut stats = CorpusStats::default();
    for (label, docs) in set.splits() {
        stats.flow_counts.insert(label.clone(), docs.len());
    }
    for (label, catalog) in &set.catalogs {
        let by_kind = stats.element_counts.entry(label.clone()).or_default();
        for kind in ElementKind::ALL {
            let n = catalog.count_of_kind(kind);
            if n > 0 {
                by_kind.insert(kind.as_str().to_string(), n);
            }
        }
    }
    for doc in &set.train {
        for step in &doc.steps {
            if let Some(def) = &step.definition {
                *stats.step_histogram.entry(def.clone()).or_insert(0) += 1;
                stats.step_occurrences += 1;
            }
        }
    }
    stats
}

#[derive(Debug, thiserror::Error)]
pub enum SplitIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Doc {
        path: PathBuf,
        #[source]
        source: ParseError,
    },
    #[error("{path}: {source}")]
    Catalog {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SplitIoError + '_ {
    move |source| SplitIoError::Io { path: path.to_path_buf(), source }
}

/// Write a corpus under `dir` as one directory per split, each holding
/// `flows/flow_NNNN.yaml` and `catalog.jsonl`.
pub fn write_split_set(dir: &Path, set: &SplitSet) -> Result<(), SplitIoError> {
    for (label, docs) in set.splits() {
        let split_dir = dir.join(&label);
        let flows_dir = split_dir.join("flows");
        fs::create_dir_all(&flows_dir).map_err(io_err(&flows_dir))?;
        for (i, doc) in docs.iter().enumerate() {
            let path = flows_dir.join(format!("flow_{i:04}.yaml"));
            fs::write(&path, serialize_workflow(doc)).map_err(io_err(&path))?;
        }
        if let Some(catalog) = set.catalogs.get(&label) {
            let path = split_dir.join("catalog.jsonl");
            fs::write(&path, catalog.to_jsonl()).map_err(io_err(&path))?;
        }
    }
    Ok(())
}

/// Read a corpus previously written by [`write_split_set`].
pub fn read_split_set(dir: &Path) -> Result<SplitSet, SplitIoError> {
    let mut set = SplitSet::default();
    let mut labels: Vec<String> = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        if entry.path().is_dir() {
            labels.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    labels.sort();
    for label in labels {
        let is_ood = label.strip_prefix("ood-");
        if label != "train" && label != "dev" && is_ood.is_none() {
            continue;
        }
        let split_dir = dir.join(&label);
        let flows_dir = split_dir.join("flows");
        let mut docs = Vec::new();
        if flows_dir.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(&flows_dir)
                .map_err(io_err(&flows_dir))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "yaml"))
                .collect();
            files.sort();
            for path in files {
                let text = fs::read_to_string(&path).map_err(io_err(&path))?;
                let doc = parse_workflow(&text)
                    .map_err(|source| SplitIoError::Doc { path: path.clone(), source })?;
                docs.push(doc);
            }
        }
        let catalog_path = split_dir.join("catalog.jsonl");
        if catalog_path.is_file() {
            let text = fs::read_to_string(&catalog_path).map_err(io_err(&catalog_path))?;
            let catalog = ElementCatalog::from_jsonl(&text)
                .map_err(|source| SplitIoError::Catalog { path: catalog_path, source })?;
            set.catalogs.insert(label.clone(), catalog);
        }
        match is_ood {
            Some(name) => {
                set.ood.insert(name.to_string(), docs);
            }
            None if label == "train" => set.train = docs,
            _ => set.dev = docs,
        }
    }
    Ok(set)
}
