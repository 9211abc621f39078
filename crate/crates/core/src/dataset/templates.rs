//! Instruction templates. Every query side of a training pair is rendered
//! from one of fifteen fixed templates: a header naming what is being
//! represented and what is being searched for, followed by context lines
//! drawn from the workflow document or a catalog extract row.

use super::TaskId;
use crate::corpus::{serialize_workflow, StepInstance, WorkflowDoc};
use std::collections::BTreeMap;
use thiserror::Error;

/// A single context line (or block) of an instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextField {
    /// `type: flow` line from the document.
    DocType,
    /// `scope:` line; omitted when the document has no scope.
    Scope,
    /// `requirement:` line.
    Requirement,
    /// `annotation:` line of the step at the given position.
    Annotation,
    /// `table:` line, from the extra map or the step's first table binding.
    TableName,
    /// `description:` line from the extra map.
    Description,
    /// The serialized document cut at the given position: earlier steps in
    /// full, the step at the position reduced to its annotation (plus its
    /// definition when `through_definition` holds), later steps dropped.
    ContextPrefix { through_definition: bool },
}

/// One of the fifteen instruction templates.
#[derive(Debug, Clone, Copy)]
pub struct InstructionTemplate {
    pub id: &'static str,
    pub task: TaskId,
    pub header: &'static str,
    pub context_fields: &'static [ContextField],
    /// Evaluation-only templates never produce training pairs.
    pub eval_only: bool,
}

use ContextField as F;

const REGISTRY: [InstructionTemplate; 15] = [
    InstructionTemplate {
        id: "T01",
        task: TaskId::StepFromRequirement,
        header: "Represent this requirement for searching relevant steps:",
        context_fields: &[F::Requirement],
        eval_only: false,
    },
    InstructionTemplate {
        id: "T02",
        task: TaskId::StepFromRequirement,
        header: "Represent this flow for searching relevant steps:",
        context_fields: &[F::DocType, F::Scope, F::Requirement],
        eval_only: false,
    },
    InstructionTemplate {
        id: "T03",
        task: TaskId::StepFromContext,
        header: "Represent this flow for searching relevant steps for the last step:",
        context_fields: &[F::ContextPrefix {
            through_definition: false,
        }],
        eval_only: false,
    },
    InstructionTemplate {
        id: "T04",
        task: TaskId::StepFromAnnotation,
        header: "Represent this annotation for searching relevant steps:",
        context_fields: &[F::Annotation],
        eval_only: false,
    },
    InstructionTemplate {
        id: "T05",
        task: TaskId::StepFromAnnotation,
        header: "Represent this annotated step for searching relevant steps:",
        context_fields: &[F::DocType, F::Scope, F::Annotation],
        eval_only: false,
    },
    InstructionTemplate {
        id: "T06",
        task: TaskId::TableFromContext,
        header: "Represent this flow for searching relevant tables for the last step:",
        context_fields: &[F::ContextPrefix {
            through_definition: true,
        }],
        eval_only: false,
    },
    InstructionTemplate {
        id: "T07",
        task: TaskId::TableFromText,
        header: "Represent this annotation for searching relevant tables:",
        context_fields: &[F::Annotation],
        eval_only: false,
    },
    InstructionTemplate {
        id: "T08",
        task: TaskId::TableFromText,
        header: "Represent this description for searching relevant tables:",
        context_fields: &[F::Description],
        eval_only: false,
    },
    InstructionTemplate {
        id: "T09",
        task: TaskId::FieldFromText,
        header: "Represent this annotation for searching relevant fields:",
        context_fields: &[F::Annotation],
        eval_only: false,
    },
    InstructionTemplate {
        id: "T10",
        task: TaskId::FieldFromText,
        header: "Represent this description for searching relevant fields:",
        context_fields: &[F::Description],
        eval_only: false,
    },
    InstructionTemplate {
        id: "T11",
        task: TaskId::FieldFromTableContext,
        header: "Represent this step for searching relevant fields:",
        context_fields: &[F::DocType, F::Scope, F::Annotation, F::TableName],
        eval_only: false,
    },
    InstructionTemplate {
        id: "T12",
        task: TaskId::FieldFromTableContext,
        header: "Represent this table for searching relevant fields:",
        context_fields: &[F::TableName, F::Description],
        eval_only: false,
    },
    InstructionTemplate {
        id: "T13",
        task: TaskId::CatalogItemFromDescription,
        header: "Represent this description for searching relevant catalog items:",
        context_fields: &[F::Description],
        eval_only: false,
    },
    InstructionTemplate {
        id: "T14",
        task: TaskId::CatalogItemFromDescription,
        header: "Represent this request for searching relevant catalog items:",
        context_fields: &[F::Description],
        eval_only: false,
    },
    InstructionTemplate {
        id: "T15",
        task: TaskId::WorkflowFromText,
        header: "Represent this requirement for searching relevant workflows:",
        context_fields: &[F::Requirement],
        eval_only: true,
    },
];

/// All fifteen templates, in id order.
pub fn registry() -> &'static [InstructionTemplate] {
    &REGISTRY
}

/// Look a template up by id ("T01" .. "T15").
pub fn template(id: &str) -> Option<&'static InstructionTemplate> {
    REGISTRY.iter().find(|t| t.id == id)
}

pub fn templates_for_task(task: TaskId) -> Vec<&'static InstructionTemplate> {
    REGISTRY.iter().filter(|t| t.task == task).collect()
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template {template} requires a workflow document")]
    MissingDoc { template: &'static str },
    #[error("template {template} requires a step position")]
    MissingPosition { template: &'static str },
    #[error("step position {position} out of range for a document with {len} steps")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("template {template} is missing required context field {field}")]
    MissingContext {
        template: &'static str,
        field: &'static str,
    },
}

/// Render an instruction: the template header followed by its context
/// lines. `doc` and `position` feed document-side fields; `extra` supplies
/// text for extract-side fields ("table", "description"). Optional fields
/// (scope) are omitted when absent; all other missing context is an error,
/// so an instruction never carries an empty context line.
pub fn render_instruction(
    template: &InstructionTemplate,
    doc: Option<&WorkflowDoc>,
    position: Option<usize>,
    extra: &BTreeMap<String, String>,
) -> Result<String, TemplateError> {
    let mut out = String::from(template.header);
    for field in template.context_fields {
        match field {
            F::DocType => {
                let doc = need_doc(template, doc)?;
                push_line(&mut out, "type", doc.doc_type.as_str());
            }
            F::Scope => {
                let doc = need_doc(template, doc)?;
                if let Some(scope) = &doc.scope {
                    push_line(&mut out, "scope", scope);
                }
            }
            F::Requirement => {
                let doc = need_doc(template, doc)?;
                if doc.requirement.is_empty() {
                    return Err(missing(template, "requirement"));
                }
                push_line(&mut out, "requirement", &doc.requirement);
            }
            F::Annotation => {
                let step = need_step(template, doc, position)?;
                if step.annotation.is_empty() {
                    return Err(missing(template, "annotation"));
                }
                push_line(&mut out, "annotation", &step.annotation);
            }
            F::TableName => {
                let table = match extra.get("table") {
                    Some(t) if !t.is_empty() => t.clone(),
                    _ => {
                        let step = need_step(template, doc, position)?;
                        match step.table_refs().first() {
                            Some(t) => (*t).to_string(),
                            None => return Err(missing(template, "table")),
                        }
                    }
                };
                push_line(&mut out, "table", &table);
            }
            F::Description => match extra.get("description") {
                Some(d) if !d.is_empty() => push_line(&mut out, "description", d),
                _ => return Err(missing(template, "description")),
            },
            F::ContextPrefix { through_definition } => {
                let doc = need_doc(template, doc)?;
                let position = position.ok_or(TemplateError::MissingPosition {
                    template: template.id,
                })?;
                if position >= doc.steps.len() {
                    return Err(TemplateError::PositionOutOfRange {
                        position,
                        len: doc.steps.len(),
                    });
                }
                let body = serialize_workflow(&cut_document(doc, position, *through_definition));
                out.push('\n');
                out.push_str(body.trim_end());
            }
        }
    }
    Ok(out)
}

/// The document prefix visible when predicting the element of the step at
/// `position`: everything before it in full, the step itself stripped to
/// its annotation (and definition, for table prediction), nothing after.
fn cut_document(doc: &WorkflowDoc, position: usize, through_definition: bool) -> WorkflowDoc {
    let mut cut = doc.clone();
    cut.steps.truncate(position + 1);
    let last = &mut cut.steps[position];
    *last = StepInstance {
        annotation: last.annotation.clone(),
        definition: if through_definition {
            last.definition.clone()
        } else {
            None
        },
        scope: None,
        inputs: Vec::new(),
        payload: BTreeMap::new(),
    };
    cut
}

fn need_doc<'a>(
    template: &InstructionTemplate,
    doc: Option<&'a WorkflowDoc>,
) -> Result<&'a WorkflowDoc, TemplateError> {
    doc.ok_or(TemplateError::MissingDoc {
        template: template.id,
    })
}

fn need_step<'a>(
    template: &InstructionTemplate,
    doc: Option<&'a WorkflowDoc>,
    position: Option<usize>,
) -> Result<&'a StepInstance, TemplateError> {
    let doc = need_doc(template, doc)?;
    let position = position.ok_or(TemplateError::MissingPosition {
        template: template.id,
    })?;
    doc.steps
        .get(position)
        .ok_or(TemplateError::PositionOutOfRange {
            position,
            len: doc.steps.len(),
        })
}

fn missing(template: &InstructionTemplate, field: &'static str) -> TemplateError {
    TemplateError::MissingContext {
        template: template.id,
        field,
    }
}

fn push_line(out: &mut String, key: &str, value: &str) {
    out.push('\n');
    out.push_str(key);
    out.push_str(": ");
    out.push_str(value);
}

/// The line label a lone free-text context field renders under.
fn free_text_key(field: &ContextField) -> Option<&'static str> {
    match field {
        F::Requirement => Some("requirement"),
        F::Annotation => Some("annotation"),
        F::Description => Some("description"),
        _ => None,
    }
}

/// The template used when a caller supplies bare query text for a task:
/// the first registered template whose whole context is a single free-text
/// line. Tasks whose templates all read from a workflow document have none
/// and cannot be queried this way.
pub fn raw_text_template(task: TaskId) -> Option<&'static InstructionTemplate> {
    REGISTRY.iter().find(|t| {
        t.task == task && t.context_fields.len() == 1 && free_text_key(&t.context_fields[0]).is_some()
    })
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RawTextError {
    #[error("task {task} needs workflow context and cannot be queried with bare text")]
    NeedsContext { task: TaskId },
    #[error("query text is empty")]
    EmptyText,
}

/// Render bare query text as an instruction for `task`, using the task's
/// raw-text template. Surrounding whitespace is trimmed first.
pub fn render_raw_text(task: TaskId, text: &str) -> Result<String, RawTextError> {
    let template = raw_text_template(task).ok_or(RawTextError::NeedsContext { task })?;
    let text = text.trim();
    if text.is_empty() {
        return Err(RawTextError::EmptyText);
    }
    let key = free_text_key(&template.context_fields[0]).expect("raw-text template");
    let mut out = String::from(template.header);
    push_line(&mut out, key, text);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_workflow, testdoc::EXAMPLE_DOC};

    fn example() -> WorkflowDoc {
        parse_workflow(EXAMPLE_DOC).unwrap()
    }

    fn no_extra() -> BTreeMap<String, String> {
        BTreeMap::new()
    }

    #[test]
    fn registry_covers_every_task_once() {
        assert_eq!(registry().len(), 15);
        let mut ids: Vec<&str> = registry().iter().map(|t| t.id).collect();
        ids.dedup();
        assert_eq!(ids.len(), 15);
        for task in TaskId::ALL {
            assert!(
                registry().iter().any(|t| t.task == task),
                "no template for {task}"
            );
        }
        let eval_only: Vec<&str> = registry()
            .iter()
            .filter(|t| t.eval_only)
            .map(|t| t.id)
            .collect();
        assert_eq!(eval_only, ["T15"]);
    }

    #[test]
    fn headers_share_one_shape() {
        for t in registry() {
            assert!(t.header.starts_with("Represent this "), "{}", t.id);
            assert!(t.header.contains(" for searching relevant "), "{}", t.id);
            assert!(t.header.ends_with(':'), "{}", t.id);
        }
    }

    #[test]
    fn requirement_instruction_is_two_lines() {
        let doc = example();
        let text = render_instruction(template("T01").unwrap(), Some(&doc), None, &no_extra())
            .unwrap();
        assert_eq!(
            text,
            "Represent this requirement for searching relevant steps:\n\
             requirement: Every day, look up incident tasks that do not have assignees and close them."
        );
    }

    #[test]
    fn scoped_instruction_adds_type_and_scope() {
        let doc = example();
        let text = render_instruction(template("T02").unwrap(), Some(&doc), None, &no_extra())
            .unwrap();
        assert_eq!(
            text,
            "Represent this flow for searching relevant steps:\n\
             type: flow\n\
             scope: sn_ms_teams_ah\n\
             requirement: Every day, look up incident tasks that do not have assignees and close them."
        );
    }

    #[test]
    fn scope_line_is_dropped_when_absent() {
        let mut doc = example();
        doc.scope = None;
        let text = render_instruction(template("T02").unwrap(), Some(&doc), None, &no_extra())
            .unwrap();
        assert!(!text.contains("scope:"));
        assert!(text.contains("type: flow\nrequirement:"));
    }

    #[test]
    fn context_instruction_cuts_at_the_first_step() {
        let doc = example();
        let text = render_instruction(template("T03").unwrap(), Some(&doc), Some(0), &no_extra())
            .unwrap();
        assert_eq!(
            text,
            "Represent this flow for searching relevant steps for the last step:\n\
             type: flow\n\
             scope: sn_ms_teams_ah\n\
             requirement: Every day, look up incident tasks that do not have assignees and close them.\n\
             trigger:\n\
             \u{20}\u{20}annotation: every day\n\
             \u{20}\u{20}type: daily\n\
             \u{20}\u{20}inputs:\n\
             \u{20}\u{20}- name: time\n\
             \u{20}\u{20}\u{20}\u{20}value: 1970-01-02 00:00:00\n\
             steps:\n\
             - annotation: look up incident tasks that do not have assignees"
        );
    }

    #[test]
    fn context_instruction_keeps_earlier_steps_in_full() {
        let doc = example();
        let text = render_instruction(template("T03").unwrap(), Some(&doc), Some(2), &no_extra())
            .unwrap();
        assert!(text.contains("definition: look_up_records"));
        assert!(text.contains("condition: assigned_to ISEMPTY"));
        assert!(text.contains("definition: FOREACH"));
        assert!(text.ends_with("- annotation: close the incident task"));
        assert!(!text.contains("update_record"));
        assert!(!text.contains("state=closed"));
    }

    #[test]
    fn table_context_keeps_the_definition_but_not_the_inputs() {
        let doc = example();
        let text = render_instruction(template("T06").unwrap(), Some(&doc), Some(0), &no_extra())
            .unwrap();
        assert!(text.starts_with("Represent this flow for searching relevant tables for the last step:"));
        assert!(text.ends_with(
            "steps:\n- annotation: look up incident tasks that do not have assignees\n\
             \u{20}\u{20}definition: look_up_records"
        ));
        assert!(!text.contains("incident_task"));
    }

    #[test]
    fn annotation_instruction_uses_the_addressed_step() {
        let doc = example();
        let text = render_instruction(template("T04").unwrap(), Some(&doc), Some(1), &no_extra())
            .unwrap();
        assert_eq!(
            text,
            "Represent this annotation for searching relevant steps:\n\
             annotation: for each record found"
        );
    }

    #[test]
    fn field_instruction_includes_the_bound_table() {
        let doc = example();
        let text = render_instruction(template("T11").unwrap(), Some(&doc), Some(0), &no_extra())
            .unwrap();
        assert!(text.ends_with(
            "annotation: look up incident tasks that do not have assignees\ntable: incident_task"
        ));
    }

    #[test]
    fn extract_side_rendering_reads_the_extra_map() {
        let mut extra = BTreeMap::new();
        extra.insert("table".to_string(), "incident_task".to_string());
        extra.insert(
            "description".to_string(),
            "tasks spawned from incidents".to_string(),
        );
        let text = render_instruction(template("T12").unwrap(), None, None, &extra).unwrap();
        assert_eq!(
            text,
            "Represent this table for searching relevant fields:\n\
             table: incident_task\n\
             description: tasks spawned from incidents"
        );
    }

    #[test]
    fn missing_context_is_an_error_not_an_empty_line() {
        let doc = example();
        assert_eq!(
            render_instruction(template("T08").unwrap(), None, None, &no_extra()),
            Err(TemplateError::MissingContext {
                template: "T08",
                field: "description"
            })
        );
        assert_eq!(
            render_instruction(template("T03").unwrap(), Some(&doc), None, &no_extra()),
            Err(TemplateError::MissingPosition { template: "T03" })
        );
        assert_eq!(
            render_instruction(template("T04").unwrap(), Some(&doc), Some(9), &no_extra()),
            Err(TemplateError::PositionOutOfRange { position: 9, len: 3 })
        );
        assert_eq!(
            render_instruction(template("T01").unwrap(), None, None, &no_extra()),
            Err(TemplateError::MissingDoc { template: "T01" })
        );
    }

    #[test]
    fn raw_text_templates_cover_exactly_the_context_free_tasks() {
        let expected = [
            (TaskId::StepFromRequirement, Some("T01")),
            (TaskId::StepFromAnnotation, Some("T04")),
            (TaskId::StepFromContext, None),
            (TaskId::TableFromContext, None),
            (TaskId::TableFromText, Some("T07")),
            (TaskId::FieldFromText, Some("T09")),
            (TaskId::FieldFromTableContext, None),
            (TaskId::CatalogItemFromDescription, Some("T13")),
            (TaskId::WorkflowFromText, Some("T15")),
        ];
        for (task, want) in expected {
            assert_eq!(raw_text_template(task).map(|t| t.id), want, "{task}");
        }
    }

    #[test]
    fn raw_text_rendering_matches_the_template_line_shape() {
        assert_eq!(
            render_raw_text(TaskId::TableFromText, "  look up open incidents\n").unwrap(),
            "Represent this annotation for searching relevant tables:\n\
             annotation: look up open incidents"
        );
        assert_eq!(
            render_raw_text(TaskId::WorkflowFromText, "escalate stale approvals").unwrap(),
            "Represent this requirement for searching relevant workflows:\n\
             requirement: escalate stale approvals"
        );
        assert_eq!(
            render_raw_text(TaskId::StepFromContext, "anything"),
            Err(RawTextError::NeedsContext {
                task: TaskId::StepFromContext
            })
        );
        assert_eq!(
            render_raw_text(TaskId::FieldFromText, "   "),
            Err(RawTextError::EmptyText)
        );
    }
}
