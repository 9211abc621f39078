//! Closed phrase grammar for annotations, requirements, and triggers.
//!
//! Every phrase is built from surface forms of real catalog elements. Each
//! table and field has several surface aliases (plural, synonym, spelled-out
//! name), drawn independently per occurrence, so the same element is asked
//! for in lexically different ways across the corpus.

use crate::rng::SplitMix64;

use super::universe::{FieldDef, Role, StepDef, TableDef, FIELD_POOL, TABLE_POOL};

pub(crate) const CHANNELS: &[&str] = &[
    "ops", "support", "triage", "alerts", "oncall", "helpdesk", "announcements", "release",
];

const EQ_VALUES: &[(&str, &str)] = &[
    ("OPEN", "open"),
    ("CLOSED", "closed"),
    ("NEW", "new"),
    ("RESOLVED", "resolved"),
    ("PENDING", "pending"),
    ("BLOCKED", "blocked"),
];

/// Condition operator applied to one field. Equality values are kept as an
/// uppercase token for the condition expression plus a lowercase surface for
/// phrases, so value words never collide with the lowercase field grammar.
#[derive(Debug, Clone)]
pub(crate) enum CondKind {
    IsEmpty,
    Equals { token: String, surface: String },
    Above(u32),
}

#[derive(Debug, Clone)]
pub(crate) struct CondTerm {
    /// Index into the bound table's `fields`.
    pub field: usize,
    pub kind: CondKind,
}

/// Pick a condition operator that reads naturally for the field.
pub(crate) fn cond_kind_for(pool: usize, rng: &mut SplitMix64) -> CondKind {
    const NUMERIC: &[usize] = &[2, 8, 10, 17, 23, 28];
    const ENUM_STATE: &[usize] = &[1, 22];
    fn pick(values: &[(&str, &str)], rng: &mut SplitMix64) -> CondKind {
        let (token, surface) = values[rng.next_index(values.len())];
        CondKind::Equals {
            token: token.to_string(),
            surface: surface.to_string(),
        }
    }
    if NUMERIC.contains(&pool) {
        let n = rng.next_in_range(1, 5) as u32;
        if rng.next_f64() < 0.5 {
            CondKind::Above(n)
        } else {
            CondKind::Equals {
                token: n.to_string(),
                surface: n.to_string(),
            }
        }
    } else if ENUM_STATE.contains(&pool) {
        pick(EQ_VALUES, rng)
    } else if pool == 7 {
        pick(
            &[
                ("HARDWARE", "hardware"),
                ("SOFTWARE", "software"),
                ("NETWORK", "network"),
                ("ACCESS", "access"),
            ],
            rng,
        )
    } else if pool == 11 {
        pick(&[("USD", "usd"), ("EUR", "eur"), ("GBP", "gbp")], rng)
    } else if pool == 14 {
        pick(
            &[
                ("SALES", "sales"),
                ("ENGINEERING", "engineering"),
                ("FINANCE", "finance"),
                ("SUPPORT", "support"),
            ],
            rng,
        )
    } else if pool == 15 {
        pick(
            &[
                ("BERLIN", "berlin"),
                ("LONDON", "london"),
                ("AUSTIN", "austin"),
                ("TOKYO", "tokyo"),
            ],
            rng,
        )
    } else if pool == 21 {
        pick(&[("TRUE", "true"), ("FALSE", "false")], rng)
    } else if pool == 24 {
        pick(&[("EMEA", "emea"), ("AMER", "amer"), ("APAC", "apac")], rng)
    } else {
        CondKind::IsEmpty
    }
}

/// Render condition terms as the structured expression stored on the step,
/// e.g. `assigned_to ISEMPTY AND priority > 2`.
pub(crate) fn render_condition(table: &TableDef, terms: &[CondTerm]) -> String {
    terms
        .iter()
        .map(|t| {
            let field = &table.fields[t.field].name;
            match &t.kind {
                CondKind::IsEmpty => format!("{field} ISEMPTY"),
                CondKind::Equals { token, .. } => format!("{field} = {token}"),
                CondKind::Above(n) => format!("{field} > {n}"),
            }
        })
        .collect::<Vec<_>>()
        .join(" AND ")
}

/// Qualify a pool surface with whatever the table name adds around the pool
/// base, so `hr_incident` reads as "hr incidents" and `ticket_2` as
/// "tickets 2".
fn decorate(surface: String, table: &TableDef) -> String {
    let base = TABLE_POOL[table.pool].0;
    let name = table.name.as_str();
    if name == base {
        return surface;
    }
    match name.find(base) {
        Some(pos) => {
            let prefix = name[..pos].trim_end_matches('_').replace('_', " ");
            let suffix = name[pos + base.len()..].trim_start_matches('_').replace('_', " ");
            let mut out = surface;
            if !prefix.is_empty() {
                out = format!("{prefix} {out}");
            }
            if !suffix.is_empty() {
                out = format!("{out} {suffix}");
            }
            out
        }
        None => name.replace('_', " "),
    }
}

pub(crate) fn table_plural(table: &TableDef, rng: &mut SplitMix64) -> String {
    let (name, plural, synonym, _) = TABLE_POOL[table.pool];
    let r = rng.next_f64();
    let surface = if r < 0.35 {
        plural.to_string()
    } else if r < 0.65 {
        synonym.to_string()
    } else if r < 0.85 {
        name.replace('_', " ")
    } else {
        format!("{} records", name.replace('_', " "))
    };
    decorate(surface, table)
}

pub(crate) fn table_singular(table: &TableDef) -> String {
    decorate(TABLE_POOL[table.pool].0.replace('_', " "), table)
}

pub(crate) fn field_surface(field: &FieldDef, rng: &mut SplitMix64) -> String {
    let (name, plain, synonym, _) = FIELD_POOL[field.pool];
    let r = rng.next_f64();
    if r < 0.40 {
        plain.to_string()
    } else if r < 0.75 {
        synonym.to_string()
    } else {
        name.replace('_', " ")
    }
}

fn cond_phrase(table: &TableDef, term: &CondTerm, rng: &mut SplitMix64) -> String {
    let f = field_surface(&table.fields[term.field], rng);
    match &term.kind {
        CondKind::IsEmpty => {
            let forms = [
                format!("that do not have {f}"),
                format!("where {f} is empty"),
                format!("missing {f}"),
                format!("with no {f}"),
                format!("whose {f} is blank"),
            ];
            forms[rng.next_index(forms.len())].clone()
        }
        CondKind::Equals { surface, .. } => {
            let forms = [
                format!("where {f} is {surface}"),
                format!("with {f} set to {surface}"),
                format!("whose {f} equals {surface}"),
                format!("with {f} marked {surface}"),
            ];
            forms[rng.next_index(forms.len())].clone()
        }
        CondKind::Above(n) => {
            let forms = [
                format!("where {f} is above {n}"),
                format!("with {f} over {n}"),
                format!("whose {f} exceeds {n}"),
            ];
            forms[rng.next_index(forms.len())].clone()
        }
    }
}

fn lookup_heads(verb: &str) -> &'static [&'static str] {
    match verb {
        "fetch" => &["fetch", "pull", "grab"],
        "query" => &["query", "search", "look through"],
        "find" => &["find", "locate", "search for"],
        "collect" => &["collect", "gather", "pull together"],
        _ => &["look up", "find", "search for", "fetch", "get", "list"],
    }
}

fn pick<'a>(options: &[&'a str], rng: &mut SplitMix64) -> &'a str {
    options[rng.next_index(options.len())]
}

fn pick_owned(options: Vec<String>, rng: &mut SplitMix64) -> String {
    let i = rng.next_index(options.len());
    options.into_iter().nth(i).unwrap()
}

/// Context a clause is rendered against: the step's bound table, its
/// condition terms, a notification channel, and the step's position in the
/// flow (position 0 never uses anaphoric phrases like "close them").
pub(crate) struct StepCtx<'a> {
    pub table: Option<&'a TableDef>,
    pub terms: &'a [CondTerm],
    pub channel: &'a str,
    pub position: usize,
}

/// Render a lowercase clause describing one step. Used both for step
/// annotations (capitalized) and for requirement sentences.
pub(crate) fn clause_for_step(step: &StepDef, ctx: &StepCtx, rng: &mut SplitMix64) -> String {
    let verb = step.name.split('_').next().unwrap_or("run");
    let tp = |rng: &mut SplitMix64| match ctx.table {
        Some(t) => table_plural(t, rng),
        None => "records".to_string(),
    };
    let ts = || match ctx.table {
        Some(t) => table_singular(t),
        None => "record".to_string(),
    };
    // First condition term's field surface, for phrases naming one field.
    let f1 = |rng: &mut SplitMix64| {
        ctx.table.and_then(|t| {
            ctx.terms
                .first()
                .map(|term| field_surface(&t.fields[term.field], rng))
        })
    };
    let eq_surface = ctx.terms.iter().find_map(|t| match &t.kind {
        CondKind::Equals { surface, .. } => Some(surface.clone()),
        _ => None,
    });

    match step.role {
        Role::Lookup => {
            let head = {
                let heads = lookup_heads(verb);
                if rng.next_f64() < 0.5 {
                    heads[0]
                } else {
                    heads[rng.next_index(heads.len())]
                }
            };
            let plural = tp(rng);
            if ctx.terms.is_empty() || ctx.table.is_none() {
                format!("{head} all {plural}")
            } else {
                let table = ctx.table.unwrap();
                let conds: Vec<String> = ctx
                    .terms
                    .iter()
                    .map(|t| cond_phrase(table, t, rng))
                    .collect();
                format!("{head} {plural} {}", conds.join(" and "))
            }
        }
        Role::Mutate => {
            let mut options = Vec::new();
            if let Some(f) = f1(rng) {
                let sing = ts();
                options.push(format!("update the {f} on each {sing} record"));
                options.push(format!("change the {f} of the {sing}"));
                if let Some(v) = &eq_surface {
                    options.push(format!("set {f} to {v} for the matching {sing}"));
                }
            }
            match verb {
                "close" | "resolve" => {
                    options.push(format!("{verb} the open {}", tp(rng)));
                    if ctx.position > 0 {
                        options.push(format!("{verb} them"));
                    }
                }
                "update" | "set" | "change" => {
                    if ctx.position > 0 {
                        options.push("update them".to_string());
                        options.push("close them".to_string());
                    }
                }
                _ => {
                    options.push(format!("{verb} the {}", tp(rng)));
                    if ctx.position > 0 {
                        options.push(format!("{verb} them"));
                    }
                }
            }
            if options.is_empty() {
                options.push(format!("update the {}", tp(rng)));
            }
            pick_owned(options, rng)
        }
        Role::Create => {
            let sing = ts();
            match step.name.as_str() {
                "create_task" => pick(
                    &["create a follow-up task", "open a task for each result"],
                    rng,
                )
                .to_string(),
                _ => pick_owned(
                    vec![
                        format!("create a new {sing} record"),
                        format!("open a {sing} for the request"),
                        format!("add a {sing} entry"),
                    ],
                    rng,
                ),
            }
        }
        Role::Delete => pick_owned(
            vec![
                format!("delete the matching {} records", ts()),
                format!("remove stale {}", tp(rng)),
                format!("purge old {}", tp(rng)),
            ],
            rng,
        ),
        Role::Notify => {
            let c = ctx.channel;
            match step.name.as_str() {
                "send_email" => pick(
                    &[
                        "send an email to the record owner",
                        "email the assignment group",
                        "send an email notification",
                    ],
                    rng,
                )
                .to_string(),
                "publish_event" => pick(
                    &["publish an event for subscribers", "emit a completion event"],
                    rng,
                )
                .to_string(),
                _ => pick_owned(
                    vec![
                        format!("post a message to the {c} channel"),
                        format!("post an update in {c}"),
                        format!("send a message to the {c} channel"),
                        format!("announce it in {c}"),
                    ],
                    rng,
                ),
            }
        }
        Role::Loop => pick(
            &[
                "for each record found",
                "repeat for every matching record",
                "iterate over the results",
            ],
            rng,
        )
        .to_string(),
        Role::Branch => match (ctx.table, ctx.terms.first()) {
            (Some(table), Some(term)) => {
                let phrase = cond_phrase(table, term, rng);
                pick_owned(
                    vec![
                        format!("if {phrase}"),
                        format!("only when {phrase}"),
                        format!("when {phrase}"),
                    ],
                    rng,
                )
            }
            _ => "if a match is found".to_string(),
        },
        Role::Wait => match f1(rng) {
            Some(f) => pick_owned(
                vec![
                    format!("wait until {f} changes"),
                    format!("pause until {f} is set"),
                    format!("hold until the {} is updated", ts()),
                ],
                rng,
            ),
            None => "wait for the condition to clear".to_string(),
        },
        Role::Approve => pick(
            &[
                "ask for approval before continuing",
                "request sign off from the owner",
                "wait for an approval decision",
            ],
            rng,
        )
        .to_string(),
        Role::Misc => {
            let sing = ts();
            match step.name.as_str() {
                "log_message" => pick(&["log the result", "write a log line"], rng).to_string(),
                "set_flow_variables" => pick(
                    &[
                        "store the results for later steps",
                        "save the values to flow variables",
                    ],
                    rng,
                )
                .to_string(),
                "attach_file" => pick_owned(
                    vec![
                        format!("attach the file to the {sing}"),
                        "add the attachment to the record".to_string(),
                    ],
                    rng,
                ),
                "parse_json" => pick(
                    &["parse the response payload", "read the returned json"],
                    rng,
                )
                .to_string(),
                "call_subflow" => {
                    pick(&["run the cleanup subflow", "call the shared subflow"], rng).to_string()
                }
                "schedule_job" => {
                    pick(&["schedule the nightly job", "queue a background job"], rng).to_string()
                }
                _ => match verb {
                    "sync" => pick_owned(
                        vec![
                            format!("sync {} from the source", tp(rng)),
                            format!("refresh the {} data", tp(rng)),
                        ],
                        rng,
                    ),
                    "refresh" => pick_owned(
                        vec![
                            format!("refresh the {} data", tp(rng)),
                            format!("reload {}", tp(rng)),
                        ],
                        rng,
                    ),
                    "archive" => pick_owned(
                        vec![
                            format!("archive old {}", tp(rng)),
                            format!("move stale {} to the archive", tp(rng)),
                        ],
                        rng,
                    ),
                    "export" => pick_owned(
                        vec![
                            format!("export the {} report", tp(rng)),
                            format!("export {} to a file", tp(rng)),
                        ],
                        rng,
                    ),
                    "validate" => pick_owned(
                        vec![
                            format!("validate the {sing} payload"),
                            format!("check the {sing} for errors"),
                        ],
                        rng,
                    ),
                    "recalculate" => pick_owned(
                        vec![
                            format!("recalculate totals for {}", tp(rng)),
                            format!("recompute the {} numbers", tp(rng)),
                        ],
                        rng,
                    ),
                    _ => format!("process the {} data", tp(rng)),
                },
            }
        }
    }
}

pub(crate) fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Leading phrase of a requirement sentence for a trigger type.
pub(crate) fn trigger_phrase(trigger_type: &str, table: Option<&TableDef>) -> String {
    let sing = table.map(table_singular).unwrap_or_else(|| "record".to_string());
    match trigger_type {
        "daily" => "Every day".to_string(),
        "weekly" => "Every week".to_string(),
        "hourly" => "Every hour".to_string(),
        "record_created" => format!("When a {sing} is created"),
        "record_updated" => format!("When a {sing} is updated"),
        _ => "On request".to_string(),
    }
}

pub(crate) fn requirement_sentence(trigger_phrase: &str, clauses: &[String]) -> String {
    format!("{trigger_phrase}, {}.", clauses.join(" and "))
}
