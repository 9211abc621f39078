//! Canonical rendering of workflow documents: two-space indentation, fixed
//! key order (type, scope, requirement, trigger, steps, then preserved
//! unknown keys), stable across calls. `parse(serialize(doc)) == doc` for
//! every valid document.

use super::{InputBinding, StepInstance, TriggerSpec, WorkflowDoc};
use std::collections::BTreeMap;
use std::fmt::Write;

/// Render a workflow document in canonical form.
pub fn serialize_workflow(doc: &WorkflowDoc) -> String {
    let mut out = String::new();
    scalar(&mut out, 0, "type", doc.doc_type.as_str());
    if let Some(scope) = &doc.scope {
        scalar(&mut out, 0, "scope", scope);
    }
    scalar(&mut out, 0, "requirement", &doc.requirement);
    if !doc.trigger.is_empty() {
        out.push_str("trigger:\n");
        trigger(&mut out, 2, &doc.trigger);
    }
    if !doc.steps.is_empty() {
        out.push_str("steps:\n");
        for step_instance in &doc.steps {
            step(&mut out, 0, step_instance);
        }
    }
    payload(&mut out, 0, &doc.payload);
    out
}

fn trigger(out: &mut String, indent: usize, t: &TriggerSpec) {
    if !t.annotation.is_empty() {
        scalar(out, indent, "annotation", &t.annotation);
    }
    if !t.trigger_type.is_empty() {
        scalar(out, indent, "type", &t.trigger_type);
    }
    bindings(out, indent, &t.inputs);
    payload(out, indent, &t.payload);
}

fn step(out: &mut String, dash_indent: usize, s: &StepInstance) {
    let mut first = ItemHead::new(out, dash_indent);
    if !s.annotation.is_empty() {
        first.scalar("annotation", &s.annotation);
    }
    if let Some(definition) = &s.definition {
        first.scalar("definition", definition);
    }
    if let Some(scope) = &s.scope {
        first.scalar("scope", scope);
    }
    let inner = first.finish();
    bindings(out, inner, &s.inputs);
    payload(out, inner, &s.payload);
}

fn bindings(out: &mut String, indent: usize, items: &[InputBinding]) {
    if items.is_empty() {
        return;
    }
    pad(out, indent);
    out.push_str("inputs:\n");
    for binding in items {
        let mut first = ItemHead::new(out, indent);
        if let Some(name) = &binding.name {
            first.scalar("name", name);
        }
        if let Some(value) = &binding.value {
            first.scalar("value", value);
        }
        if let Some(table) = &binding.table {
            first.scalar("table", table);
        }
        if let Some(condition) = &binding.condition {
            first.scalar("condition", condition);
        }
        let inner = first.finish();
        payload(out, inner, &binding.payload);
    }
}

fn payload(out: &mut String, indent: usize, map: &BTreeMap<String, String>) {
    for (key, value) in map {
        scalar(out, indent, key, value);
    }
}

/// Writes the `- ` head of a list item, then continuation keys two deeper.
struct ItemHead<'a> {
    out: &'a mut String,
    dash_indent: usize,
    started: bool,
}

impl<'a> ItemHead<'a> {
    fn new(out: &'a mut String, dash_indent: usize) -> Self {
        Self {
            out,
            dash_indent,
            started: false,
        }
    }

    fn scalar(&mut self, key: &str, value: &str) {
        if self.started {
            scalar(self.out, self.dash_indent + 2, key, value);
        } else {
            pad(self.out, self.dash_indent);
            self.out.push_str("- ");
            write_scalar(self.out, key, value);
            self.started = true;
        }
    }

    /// Emit a bare dash if no scalar opened the item; returns the indent for
    /// nested blocks of this item.
    fn finish(self) -> usize {
        if !self.started {
            pad(self.out, self.dash_indent);
            self.out.push_str("-\n");
        }
        self.dash_indent + 2
    }
}

fn scalar(out: &mut String, indent: usize, key: &str, value: &str) {
    pad(out, indent);
    write_scalar(out, key, value);
}

fn write_scalar(out: &mut String, key: &str, value: &str) {
    debug_assert!(!value.contains('\n'), "scalar values are single-line");
    if needs_quote(value) {
        let escaped = value.replace('\'', "''");
        let _ = writeln!(out, "{key}: '{escaped}'");
    } else {
        let _ = writeln!(out, "{key}: {value}");
    }
}

fn needs_quote(value: &str) -> bool {
    value.is_empty()
        || value.starts_with(' ')
        || value.ends_with(' ')
        || value.starts_with('\'')
        || value.starts_with("- ")
        || value == "-"
}

fn pad(out: &mut String, indent: usize) {
    for _ in 0..indent {
        out.push(' ');
    }
}
