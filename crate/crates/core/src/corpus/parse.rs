//! Parser for the workflow document format: a restricted indentation-based
//! subset (maps, lists of maps, scalar strings) with two-space indentation.
//! Anchors, multi-document streams, and other generic-markup features are
//! rejected so that documents admit a bit-exact canonical rendering.

use super::{
    is_identifier, DocType, InputBinding, ParseError, StepInstance, TriggerSpec, WorkflowDoc,
};
use std::collections::BTreeMap;

/// Parse a workflow document.
///
/// Unknown keys are preserved in the payload map of the block they appear in.
/// Duplicate keys, malformed indentation, and missing required keys (`type`,
/// `requirement`) are reported with line and column.
pub fn parse_workflow(text: &str) -> Result<WorkflowDoc, ParseError> {
    let lines = scan_lines(text)?;
    let mut cursor = Cursor { lines, pos: 0 };
    let block = parse_block(&mut cursor, 0)?;
    if cursor.pos < cursor.lines.len() {
        let line = &cursor.lines[cursor.pos];
        return Err(ParseError::new(
            line.number,
            line.indent + 1,
            "unexpected content after top-level block",
        ));
    }
    doc_from_block(block)
}

/// One meaningful line of the document.
#[derive(Debug, Clone)]
struct Line {
    number: usize,
    indent: usize,
    dash: bool,
    key: String,
    /// None for block keys (`trigger:`), Some for scalar entries.
    value: Option<String>,
    /// True for a bare dash introducing a nested block item.
    bare_dash: bool,
}

/// A parsed block: scalar entries and nested structures in source order.
#[derive(Debug, Default)]
struct Block {
    entries: Vec<(String, Entry, usize, usize)>, // key, entry, line, column
}

#[derive(Debug)]
enum Entry {
    Scalar(String),
    Map(Block),
    List(Vec<Block>),
}

struct Cursor {
    lines: Vec<Line>,
    pos: usize,
}

fn scan_lines(text: &str) -> Result<Vec<Line>, ParseError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let number = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let indent = raw.len() - raw.trim_start_matches(' ').len();
        let mut rest = &raw[indent..];
        if rest.starts_with('\t') {
            return Err(ParseError::new(number, indent + 1, "tab indentation is not supported"));
        }
        if indent % 2 != 0 {
            return Err(ParseError::new(
                number,
                indent + 1,
                format!("indentation of {indent} spaces is not a multiple of two"),
            ));
        }
        let mut dash = false;
        let mut effective_indent = indent;
        if rest == "-" {
            out.push(Line {
                number,
                indent,
                dash: true,
                key: String::new(),
                value: None,
                bare_dash: true,
            });
            continue;
        }
        if let Some(stripped) = rest.strip_prefix("- ") {
            dash = true;
            rest = stripped;
            effective_indent = indent + 2;
        }
        let (key, value) = split_key_value(rest, number, indent + 1)?;
        out.push(Line {
            number,
            indent: effective_indent,
            dash,
            key,
            value,
            bare_dash: false,
        });
    }
    Ok(out)
}

fn split_key_value(rest: &str, line: usize, column: usize) -> Result<(String, Option<String>), ParseError> {
    let colon = rest
        .find(':')
        .ok_or_else(|| ParseError::new(line, column, format!("expected `key: value`, got {rest:?}")))?;
    let key = rest[..colon].trim().to_string();
    if key.is_empty() {
        return Err(ParseError::new(line, column, "empty key"));
    }
    if key.contains(' ') {
        return Err(ParseError::new(line, column, format!("key {key:?} contains whitespace")));
    }
    let after = &rest[colon + 1..];
    if after.is_empty() {
        return Ok((key, None));
    }
    let Some(value_raw) = after.strip_prefix(' ') else {
        return Err(ParseError::new(
            line,
            column,
            format!("expected a space after `{key}:`"),
        ));
    };
    Ok((key, Some(unquote(value_raw.trim_end()))))
}

/// Strip optional single quotes; `''` inside a quoted scalar escapes a quote.
fn unquote(value: &str) -> String {
    if value.len() >= 2 && value.starts_with('\'') && value.ends_with('\'') {
        let inner = &value[1..value.len() - 1];
        return inner.replace("''", "'");
    }
    value.to_string()
}

/// Parse a map block whose entries sit at `indent`.
fn parse_block(cursor: &mut Cursor, indent: usize) -> Result<Block, ParseError> {
    let mut block = Block::default();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    while cursor.pos < cursor.lines.len() {
        let line = cursor.lines[cursor.pos].clone();
        let line_indent = if line.dash { line.indent - 2 } else { line.indent };
        if line_indent < indent {
            break;
        }
        if line.dash && line_indent == indent {
            // List item belonging to the preceding key, handled there.
            break;
        }
        if line_indent > indent {
            return Err(ParseError::new(
                line.number,
                line.indent + 1,
                "unexpected indentation",
            ));
        }
        if let Some(prev) = seen.get(&line.key) {
            return Err(ParseError::new(
                line.number,
                line.indent + 1,
                format!("duplicate key {:?} (first seen on line {prev})", line.key),
            ));
        }
        seen.insert(line.key.clone(), line.number);
        cursor.pos += 1;
        let entry = match line.value {
            Some(value) => Entry::Scalar(value),
            None => {
                // Block key: either a list (dash items at the same or deeper
                // indent) or a nested map (entries one level deeper).
                match cursor.lines.get(cursor.pos) {
                    Some(next) if next.dash && list_item_indent(next) >= indent => {
                        Entry::List(parse_list(cursor, list_item_indent(next))?)
                    }
                    Some(next) if !next.dash && next.indent == indent + 2 => {
                        Entry::Map(parse_block(cursor, indent + 2)?)
                    }
                    _ => Entry::Map(Block::default()),
                }
            }
        };
        block
            .entries
            .push((line.key, entry, line.number, line.indent + 1));
    }
    Ok(block)
}

fn list_item_indent(line: &Line) -> usize {
    if line.bare_dash {
        line.indent
    } else {
        line.indent - 2
    }
}

/// Parse consecutive `- ` items whose dashes sit at `dash_indent`.
fn parse_list(cursor: &mut Cursor, dash_indent: usize) -> Result<Vec<Block>, ParseError> {
    let mut items = Vec::new();
    while cursor.pos < cursor.lines.len() {
        let line = cursor.lines[cursor.pos].clone();
        if !line.dash || list_item_indent(&line) != dash_indent {
            break;
        }
        cursor.pos += 1;
        let mut item = Block::default();
        if !line.bare_dash {
            let entry = match line.value {
                Some(value) => Entry::Scalar(value),
                None => match cursor.lines.get(cursor.pos) {
                    Some(next) if next.dash && list_item_indent(next) == dash_indent + 2 => {
                        Entry::List(parse_list(cursor, dash_indent + 2)?)
                    }
                    Some(next) if !next.dash && next.indent == dash_indent + 4 => {
                        Entry::Map(parse_block(cursor, dash_indent + 4)?)
                    }
                    _ => Entry::Map(Block::default()),
                },
            };
            item.entries.push((line.key, entry, line.number, line.indent + 1));
        }
        // Continuation keys of this item sit two past the dash.
        let continuation = parse_block(cursor, dash_indent + 2)?;
        for (key, entry, ln, col) in continuation.entries {
            if item.entries.iter().any(|(k, _, _, _)| *k == key) {
                return Err(ParseError::new(ln, col, format!("duplicate key {key:?} in list item")));
            }
            item.entries.push((key, entry, ln, col));
        }
        items.push(item);
    }
    Ok(items)
}

fn doc_from_block(block: Block) -> Result<WorkflowDoc, ParseError> {
    let mut doc_type: Option<(DocType, usize, usize)> = None;
    let mut scope = None;
    let mut requirement: Option<String> = None;
    let mut trigger = TriggerSpec::default();
    let mut steps = Vec::new();
    let mut payload = BTreeMap::new();
    let mut last = (1, 1);

    for (key, entry, line, column) in block.entries {
        last = (line, column);
        match (key.as_str(), entry) {
            ("type", Entry::Scalar(v)) => {
                let parsed = v
                    .parse::<DocType>()
                    .map_err(|e| ParseError::new(line, column, e))?;
                doc_type = Some((parsed, line, column));
            }
            ("scope", Entry::Scalar(v)) => scope = Some(v),
            ("requirement", Entry::Scalar(v)) => requirement = Some(v),
            ("trigger", Entry::Map(inner)) => trigger = trigger_from_block(inner)?,
            ("steps", Entry::List(items)) => {
                steps = items
                    .into_iter()
                    .map(step_from_block)
                    .collect::<Result<Vec<_>, _>>()?;
            }
            ("type" | "scope" | "requirement", _) => {
                return Err(ParseError::new(line, column, format!("key {key:?} must be a scalar")));
            }
            ("trigger", _) => {
                return Err(ParseError::new(line, column, "trigger must be a map block"));
            }
            ("steps", _) => {
                return Err(ParseError::new(line, column, "steps must be a list block"));
            }
            (_, Entry::Scalar(v)) => {
                payload.insert(key, v);
            }
            (_, _) => {
                return Err(ParseError::new(
                    line,
                    column,
                    format!("unknown key {key:?} must be a scalar to be preserved"),
                ));
            }
        }
    }

    let Some((doc_type, _, _)) = doc_type else {
        return Err(ParseError::new(last.0, last.1, "missing required key `type`"));
    };
    let Some(requirement) = requirement else {
        return Err(ParseError::new(last.0, last.1, "missing required key `requirement`"));
    };
    if requirement.is_empty() {
        return Err(ParseError::new(last.0, last.1, "requirement must be non-empty"));
    }

    Ok(WorkflowDoc {
        doc_type,
        scope,
        requirement,
        trigger,
        steps,
        payload,
    })
}

fn trigger_from_block(block: Block) -> Result<TriggerSpec, ParseError> {
    let mut trigger = TriggerSpec::default();
    for (key, entry, line, column) in block.entries {
        match (key.as_str(), entry) {
            ("annotation", Entry::Scalar(v)) => trigger.annotation = v,
            ("type", Entry::Scalar(v)) => trigger.trigger_type = v,
            ("inputs", Entry::List(items)) => {
                trigger.inputs = items
                    .into_iter()
                    .map(binding_from_block)
                    .collect::<Result<Vec<_>, _>>()?;
            }
            (_, Entry::Scalar(v)) => {
                trigger.payload.insert(key, v);
            }
            (_, _) => {
                return Err(ParseError::new(line, column, format!("unexpected block under trigger key {key:?}")));
            }
        }
    }
    Ok(trigger)
}

fn step_from_block(block: Block) -> Result<StepInstance, ParseError> {
    let mut step = StepInstance::default();
    for (key, entry, line, column) in block.entries {
        match (key.as_str(), entry) {
            ("annotation", Entry::Scalar(v)) => step.annotation = v,
            ("definition", Entry::Scalar(v)) => {
                if !is_identifier(&v) {
                    return Err(ParseError::new(
                        line,
                        column,
                        format!("step definition {v:?} does not match the identifier grammar"),
                    ));
                }
                step.definition = Some(v);
            }
            ("scope", Entry::Scalar(v)) => step.scope = Some(v),
            ("inputs", Entry::List(items)) => {
                step.inputs = items
                    .into_iter()
                    .map(binding_from_block)
                    .collect::<Result<Vec<_>, _>>()?;
            }
            (_, Entry::Scalar(v)) => {
                step.payload.insert(key, v);
            }
            (_, _) => {
                return Err(ParseError::new(line, column, format!("unexpected block under step key {key:?}")));
            }
        }
    }
    Ok(step)
}

fn binding_from_block(block: Block) -> Result<InputBinding, ParseError> {
    let mut binding = InputBinding::default();
    for (key, entry, line, column) in block.entries {
        match (key.as_str(), entry) {
            ("name", Entry::Scalar(v)) => binding.name = Some(v),
            ("value", Entry::Scalar(v)) => binding.value = Some(v),
            ("table", Entry::Scalar(v)) => binding.table = Some(v),
            ("condition", Entry::Scalar(v)) => binding.condition = Some(v),
            (_, Entry::Scalar(v)) => {
                binding.payload.insert(key, v);
            }
            (_, _) => {
                return Err(ParseError::new(line, column, format!("unexpected block under input key {key:?}")));
            }
        }
    }
    Ok(binding)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::serialize_workflow;
    use crate::corpus::testdoc::EXAMPLE_DOC;

    #[test]
    fn parses_the_example_document() {
        let doc = parse_workflow(EXAMPLE_DOC).unwrap();
        assert_eq!(doc.doc_type, DocType::Flow);
        assert_eq!(doc.scope.as_deref(), Some("sn_ms_teams_ah"));
        assert_eq!(
            doc.requirement,
            "Every day, look up incident tasks that do not have assignees and close them."
        );
        assert_eq!(doc.trigger.trigger_type, "daily");
        assert_eq!(doc.trigger.annotation, "every day");
        assert_eq!(doc.trigger.inputs.len(), 1);
        assert_eq!(doc.trigger.inputs[0].value.as_deref(), Some("1970-01-02 00:00:00"));
        assert!(doc.steps.len() >= 3);
        assert_eq!(doc.steps[0].definition.as_deref(), Some("look_up_records"));
        assert_eq!(doc.steps[1].definition.as_deref(), Some("FOREACH"));
        assert_eq!(doc.steps[2].definition.as_deref(), Some("update_record"));
        assert_eq!(doc.steps[0].table_refs(), vec!["incident_task"]);
        assert_eq!(doc.steps[0].field_refs(), vec!["assigned_to"]);
    }

    #[test]
    fn minimal_document() {
        let doc = parse_workflow("type: flow\nrequirement: r\n").unwrap();
        assert!(doc.steps.is_empty());
        assert!(doc.trigger.is_empty());
        assert_eq!(doc.requirement, "r");
    }

    #[test]
    fn missing_requirement_is_rejected_with_diagnostic() {
        let err = parse_workflow("type: flow\nscope: x\n").unwrap_err();
        assert!(err.message.contains("requirement"), "{err}");
        assert!(err.line > 0);
    }

    #[test]
    fn missing_type_is_rejected() {
        let err = parse_workflow("requirement: r\n").unwrap_err();
        assert!(err.message.contains("type"), "{err}");
    }

    #[test]
    fn empty_requirement_is_rejected() {
        // `requirement:` with no value parses as an empty block, which is
        // also a missing scalar.
        let err = parse_workflow("type: flow\nrequirement: ''\n").unwrap_err();
        assert!(err.message.contains("requirement"), "{err}");
    }

    #[test]
    fn duplicate_keys_are_rejected_with_position() {
        let err = parse_workflow("type: flow\nrequirement: a\nrequirement: b\n").unwrap_err();
        assert_eq!(err.line, 3);
        assert!(err.message.contains("duplicate"), "{err}");
    }

    #[test]
    fn odd_indentation_is_rejected() {
        let err = parse_workflow("type: flow\nrequirement: r\ntrigger:\n   type: daily\n").unwrap_err();
        assert_eq!(err.line, 4);
        assert!(err.message.contains("indentation"), "{err}");
    }

    #[test]
    fn rcope_is_not_a_scope() {
        // The misspelled key is preserved as payload, never treated as scope.
        let doc = parse_workflow("type: flow\nrcope: sn_ms_teams_ah\nrequirement: r\n").unwrap();
        assert_eq!(doc.scope, None);
        assert_eq!(doc.payload.get("rcope").map(String::as_str), Some("sn_ms_teams_ah"));
    }

    #[test]
    fn unknown_keys_are_preserved_and_round_trip() {
        let text = "type: flow\nrequirement: r\nsys_id: abc123\n";
        let doc = parse_workflow(text).unwrap();
        assert_eq!(doc.payload.get("sys_id").map(String::as_str), Some("abc123"));
        let rendered = serialize_workflow(&doc);
        assert!(rendered.contains("sys_id: abc123"), "{rendered}");
    }

    #[test]
    fn unquotes_single_quoted_scalars() {
        let doc =
            parse_workflow("type: flow\nrequirement: 'it''s quoted'\n").unwrap();
        assert_eq!(doc.requirement, "it's quoted");
    }

    #[test]
    fn annotation_only_last_step_parses() {
        let text = "\
type: flow
requirement: r
steps:
- annotation: look up incident tasks that do not have assignees
";
        let doc = parse_workflow(text).unwrap();
        assert_eq!(doc.steps.len(), 1);
        assert_eq!(doc.steps[0].definition, None);
    }

    #[test]
    fn bad_definition_grammar_is_rejected() {
        let text = "type: flow\nrequirement: r\nsteps:\n- definition: not valid!\n";
        let err = parse_workflow(text).unwrap_err();
        assert!(err.message.contains("identifier"), "{err}");
    }

    #[test]
    fn unknown_doc_type_is_rejected() {
        let err = parse_workflow("type: pipeline\nrequirement: r\n").unwrap_err();
        assert!(err.message.contains("pipeline"), "{err}");
    }
}
