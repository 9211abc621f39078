//! Catalog construction from workflow corpora and table extracts.

use super::{CatalogError, Element, ElementCatalog, ElementKind, WorkflowDoc};

/// Build an element catalog from a workflow corpus plus table extracts.
///
/// Steps come from the documents (one element per distinct definition, with
/// the step's scope or the document scope); tables come from both step input
/// references and extract rows; fields and catalog items come from extract
/// rows.
pub fn catalog_from_corpus(
    docs: &[WorkflowDoc],
    extracts: &[Element],
) -> Result<ElementCatalog, CatalogError> {
    let mut catalog = ElementCatalog::new();
    for doc in docs {
        for step in &doc.steps {
            if let Some(definition) = &step.definition {
                let mut element = Element::new(ElementKind::Step, definition.clone());
                if let Some(scope) = doc.step_scope(step) {
                    element = element.with_scope(scope.to_string());
                }
                catalog.insert(element)?;
            }
            for table in step.table_refs() {
                catalog.insert(Element::new(ElementKind::Table, table.to_string()))?;
            }
        }
    }
    for extract in extracts {
        catalog.insert(extract.clone())?;
    }
    Ok(catalog)
}

/// Read table-extract rows from JSONL text, one element per line.
pub fn read_extracts_jsonl(text: &str) -> Result<Vec<Element>, serde_json::Error> {
    text.lines()
        .filter(|line| !line.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// Write table-extract rows as JSONL, one element per line.
pub fn write_extracts_jsonl(extracts: &[Element]) -> String {
    let mut out = String::new();
    for element in extracts {
        out.push_str(&serde_json::to_string(element).expect("element serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::testdoc::EXAMPLE_DOC;
    use crate::corpus::{parse_workflow, ElementKey};

    #[test]
    fn builds_catalog_from_the_example_document() {
        let doc = parse_workflow(EXAMPLE_DOC).unwrap();
        let extracts = vec![
            Element::new(ElementKind::Field, "assigned_to")
                .with_parent("incident_task")
                .with_description("user assigned to the task"),
            Element::new(ElementKind::Field, "state").with_parent("incident_task"),
        ];
        let catalog = catalog_from_corpus(&[doc], &extracts).unwrap();
        assert_eq!(catalog.count_of_kind(ElementKind::Step), 3);
        assert_eq!(catalog.count_of_kind(ElementKind::Table), 1);
        assert_eq!(catalog.count_of_kind(ElementKind::Field), 2);
        // Steps inherit the document scope and land in the scope index.
        assert!(catalog.scope_index()["sn_ms_teams_ah"].contains("look_up_records"));
        assert!(catalog.scope_index()["sn_ms_teams_ah"].contains("FOREACH"));
        assert!(catalog.indexes_consistent());
    }

    #[test]
    fn empty_corpus_gives_empty_catalog() {
        let catalog = catalog_from_corpus(&[], &[]).unwrap();
        assert!(catalog.is_empty());
        assert!(catalog.scope_index().is_empty());
        assert!(catalog.table_index().is_empty());
    }

    #[test]
    fn extract_jsonl_round_trips() {
        let extracts = vec![
            Element::new(ElementKind::Table, "incident_task")
                .with_scope("itsm")
                .with_description("tasks attached to incidents"),
            Element::new(ElementKind::CatalogItem, "standing_desk")
                .with_description("Adjustable standing desk"),
        ];
        let text = write_extracts_jsonl(&extracts);
        assert_eq!(read_extracts_jsonl(&text).unwrap(), extracts);
    }

    #[test]
    fn catalog_jsonl_round_trips() {
        let doc = parse_workflow(EXAMPLE_DOC).unwrap();
        let catalog = catalog_from_corpus(&[doc], &[]).unwrap();
        let text = catalog.to_jsonl();
        let restored = ElementCatalog::from_jsonl(&text).unwrap();
        assert_eq!(catalog, restored);
    }

    #[test]
    fn conflicting_extract_descriptions_error() {
        let extracts = vec![
            Element::new(ElementKind::CatalogItem, "laptop").with_description("a laptop"),
            Element::new(ElementKind::CatalogItem, "laptop").with_description("a different laptop"),
        ];
        let err = catalog_from_corpus(&[], &extracts).unwrap_err();
        let key = ElementKey {
            kind: ElementKind::CatalogItem,
            name: "laptop".into(),
            parent: None,
        };
        let CatalogError::DuplicateElement { key: got, .. } = err;
        assert_eq!(got, key);
    }
}
