//! Element universe backing corpus generation: scopes, tables with their
//! fields, the Zipf-ranked step inventory, and orderable catalog items.

use std::collections::{BTreeMap, BTreeSet};

use crate::corpus::{Element, ElementKind};
use crate::rng::SplitMix64;

use super::{ConfigError, CorpusConfig};

/// Broad behavioral family of a step, driving which annotation phrases and
/// input bindings it can receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Role {
    Lookup,
    Mutate,
    Create,
    Delete,
    Notify,
    Loop,
    Branch,
    Wait,
    Approve,
    Misc,
}

#[derive(Debug, Clone)]
pub(crate) struct StepDef {
    pub name: String,
    pub scope: String,
    pub role: Role,
    pub description: String,
    /// Table this step's name and description are derived from, as an index
    /// into the owning table list. Core steps are table-generic and carry
    /// none.
    pub noun_table: Option<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct FieldDef {
    pub name: String,
    /// Index into `FIELD_POOL` for surface forms.
    pub pool: usize,
    pub description: String,
}

#[derive(Debug, Clone)]
pub(crate) struct TableDef {
    pub name: String,
    pub scope: String,
    /// Index into `TABLE_POOL` for surface forms.
    pub pool: usize,
    pub description: String,
    pub fields: Vec<FieldDef>,
}

#[derive(Debug, Clone)]
pub(crate) struct ItemDef {
    pub name: String,
    pub description: String,
}

/// Fixed, highest-ranked step definitions. Inventory order doubles as Zipf
/// rank order, so `look_up_records` is the most frequent step overall.
const CORE_STEPS: &[(&str, Role, &str)] = &[
    ("look_up_records", Role::Lookup, "Queries a table for records that match a condition."),
    ("update_record", Role::Mutate, "Writes new values to fields on an existing record."),
    ("FOREACH", Role::Loop, "Repeats the nested steps once per record in a list."),
    ("create_record", Role::Create, "Inserts a new record into a table."),
    ("IF", Role::Branch, "Runs the nested steps only when a condition holds."),
    ("post_a_message", Role::Notify, "Posts a message to a collaboration channel."),
    ("send_email", Role::Notify, "Sends an email notification."),
    ("delete_record", Role::Delete, "Removes a record from a table."),
    ("create_task", Role::Create, "Opens a task record for follow-up work."),
    ("close_task", Role::Mutate, "Marks a task record as closed."),
    ("ask_for_approval", Role::Approve, "Requests an approval decision from a user."),
    ("wait_for_condition", Role::Wait, "Pauses the flow until a condition becomes true."),
    ("get_user", Role::Lookup, "Looks up a user record by identifier."),
    ("log_message", Role::Misc, "Writes a line to the flow execution log."),
    ("set_flow_variables", Role::Misc, "Stores values in flow variables for later steps."),
    ("attach_file", Role::Misc, "Attaches a file to a record."),
    ("parse_json", Role::Misc, "Parses a JSON payload into flow variables."),
    ("call_subflow", Role::Misc, "Invokes another flow and waits for it to finish."),
    ("schedule_job", Role::Misc, "Schedules a background job."),
    ("publish_event", Role::Notify, "Publishes an event to subscribers."),
];

const SCOPE_THEMES: &[&str] = &[
    "itsm", "hr_core", "finance_ops", "slack", "ms_teams", "crm", "inventory",
    "security_ops", "devops", "facilities", "legal_docs", "marketing",
    "procurement", "support_desk", "sales_ops", "network_mgmt", "telemetry",
    "billing", "service_catalog", "identity_mgmt",
];

/// Verbs used to mint tail step names, with the role each verb implies.
const TAIL_VERBS: &[(&str, Role)] = &[
    ("sync", Role::Misc),
    ("fetch", Role::Lookup),
    ("escalate", Role::Mutate),
    ("archive", Role::Misc),
    ("assign", Role::Mutate),
    ("query", Role::Lookup),
    ("resolve", Role::Mutate),
    ("export", Role::Misc),
    ("validate", Role::Misc),
    ("merge", Role::Mutate),
    ("route", Role::Mutate),
    ("find", Role::Lookup),
    ("tag", Role::Mutate),
    ("classify", Role::Mutate),
    ("broadcast", Role::Notify),
    ("reopen", Role::Mutate),
    ("collect", Role::Lookup),
    ("link", Role::Mutate),
    ("recalculate", Role::Misc),
    ("refresh", Role::Misc),
];

/// Table name pool: (identifier, plural surface, synonym surface, description).
pub(crate) const TABLE_POOL: &[(&str, &str, &str, &str)] = &[
    ("incident", "incidents", "outage reports", "Records of service outages and disruptions."),
    ("incident_task", "incident tasks", "follow-up tasks on incidents", "Tasks spawned from incidents for follow-up work."),
    ("change_request", "change requests", "planned changes", "Requests to modify production systems."),
    ("problem", "problems", "root cause investigations", "Underlying causes tracked across incidents."),
    ("user_account", "user accounts", "people profiles", "Accounts for people in the organization."),
    ("group", "groups", "assignment teams", "Groups of users that share assignments."),
    ("asset", "assets", "equipment items", "Physical and virtual equipment under management."),
    ("invoice", "invoices", "vendor bills", "Bills received from vendors."),
    ("purchase_order", "purchase orders", "procurement orders", "Orders placed with suppliers."),
    ("ticket", "tickets", "support requests", "Requests submitted to the support desk."),
    ("employee", "employees", "staff members", "People employed by the organization."),
    ("candidate", "candidates", "job applicants", "People applying for open positions."),
    ("contract", "contracts", "signed agreements", "Agreements with customers and vendors."),
    ("vendor", "vendors", "suppliers", "Companies that supply goods or services."),
    ("expense", "expenses", "spending entries", "Costs submitted for reimbursement."),
    ("device", "devices", "managed machines", "Laptops, phones, and servers under management."),
    ("alert", "alerts", "monitoring signals", "Signals raised by monitoring systems."),
    ("order", "orders", "customer orders", "Orders placed by customers."),
    ("shipment", "shipments", "outbound deliveries", "Packages moving through the delivery chain."),
    ("account", "accounts", "customer organizations", "Organizations that buy the product."),
    ("lead", "leads", "sales prospects", "Potential customers under qualification."),
    ("opportunity", "opportunities", "open deals", "Deals being pursued by sales."),
    ("campaign", "campaigns", "marketing pushes", "Coordinated marketing activities."),
    ("knowledge_article", "knowledge articles", "help articles", "Published documentation for self-service."),
    ("support_case", "support cases", "customer escalations", "Escalations opened by customers."),
    ("release", "releases", "version rollouts", "Planned rollouts of new versions."),
    ("sprint", "sprints", "iteration plans", "Time-boxed development iterations."),
    ("build_job", "build jobs", "pipeline runs", "Runs of the build pipeline."),
    ("deployment", "deployments", "production pushes", "Pushes of code to environments."),
    ("access_request", "access requests", "permission asks", "Requests for system permissions."),
    ("badge", "badges", "door passes", "Credentials for building entry."),
    ("room_booking", "room bookings", "meeting room reservations", "Reservations of shared rooms."),
    ("timesheet", "timesheets", "hour logs", "Logged working hours."),
    ("payroll_run", "payroll runs", "salary batches", "Batches of salary payments."),
    ("benefit_plan", "benefit plans", "insurance packages", "Employee benefit offerings."),
];

/// Field name pool: (identifier, plain surface, synonym surface, description).
pub(crate) const FIELD_POOL: &[(&str, &str, &str, &str)] = &[
    ("assigned_to", "assignees", "the assigned user", "User responsible for the record."),
    ("state", "state", "status", "Lifecycle state of the record."),
    ("priority", "priority", "urgency level", "How urgent the record is."),
    ("short_description", "short description", "summary", "One line summary of the record."),
    ("opened_at", "opened at", "creation time", "When the record was opened."),
    ("closed_at", "closed at", "closing time", "When the record was closed."),
    ("due_date", "due date", "deadline", "When the work is due."),
    ("category", "category", "classification", "Classification bucket for the record."),
    ("impact", "impact", "blast radius", "How broadly the issue is felt."),
    ("owner", "owner", "responsible person", "Person accountable for the record."),
    ("amount", "amount", "total value", "Monetary value of the record."),
    ("currency", "currency", "money unit", "Currency of the amount."),
    ("email_address", "email address", "contact email", "Email address on the record."),
    ("phone_number", "phone number", "contact number", "Phone number on the record."),
    ("department", "department", "business unit", "Business unit the record belongs to."),
    ("location", "location", "site", "Site associated with the record."),
    ("serial_number", "serial number", "hardware id", "Manufacturer serial of the asset."),
    ("quantity", "quantity", "unit count", "Number of units."),
    ("approved_by", "approved by", "the approver", "User who approved the record."),
    ("created_by", "created by", "the author", "User who created the record."),
    ("updated_at", "updated at", "last modified time", "When the record last changed."),
    ("active", "active", "enabled flag", "Whether the record is active."),
    ("stage", "stage", "pipeline phase", "Phase within the pipeline."),
    ("score", "score", "rating", "Numeric rating of the record."),
    ("region", "region", "geography", "Geographic region of the record."),
    ("manager", "manager", "reporting lead", "Manager linked to the record."),
    ("cost_center", "cost center", "budget code", "Budget code charged for the record."),
    ("resolution_notes", "resolution notes", "fix summary", "Notes describing the fix."),
    ("escalation_level", "escalation level", "support tier", "Support tier handling the record."),
    ("vendor_name", "vendor name", "supplier", "Supplier named on the record."),
];

const ITEM_POOL: &[(&str, &str)] = &[
    ("laptop_standard", "Standard issue laptop for general work."),
    ("laptop_developer", "High memory laptop for engineering work."),
    ("external_monitor", "27 inch external display."),
    ("docking_station", "USB-C docking station with dual display output."),
    ("mechanical_keyboard", "Mechanical keyboard with quiet switches."),
    ("wireless_mouse", "Wireless ergonomic mouse."),
    ("noise_cancelling_headset", "Over ear headset with noise cancelling and a microphone."),
    ("desk_phone", "VoIP desk phone."),
    ("standing_desk", "Motorized sit stand desk."),
    ("office_chair", "Adjustable ergonomic office chair."),
    ("webcam_hd", "1080p external webcam."),
    ("ide_license", "Annual license for the standard development environment."),
    ("vpn_access", "Remote access to the corporate network."),
    ("shared_mailbox", "Shared team mailbox with delegated access."),
    ("parking_permit", "Monthly parking permit for the office garage."),
    ("building_badge", "Replacement access badge for office entry."),
    ("conference_room_kit", "Portable speakerphone and camera kit for meetings."),
    ("mobile_phone", "Company managed mobile phone."),
    ("data_sim_card", "Data SIM for travel."),
    ("travel_adapter", "Universal power adapter for travel."),
];

/// Everything corpus generation draws from. The train inventory is
/// Zipf-ranked; each OOD domain additionally owns fresh scopes, steps, and
/// tables the train split never sees.
pub(crate) struct Universe {
    pub train_scopes: Vec<String>,
    pub steps: Vec<StepDef>,
    pub tables: Vec<TableDef>,
    pub items: Vec<ItemDef>,
    /// Indices into `steps` with `Role::Lookup`.
    pub lookup_steps: Vec<usize>,
    /// Cumulative Zipf weights over `steps`, normalized to end at 1.
    zipf_cum: Vec<f64>,
    /// Cumulative Zipf weights restricted to `lookup_steps`.
    lookup_cum: Vec<f64>,
    /// Indices into `tables`, grouped by scope.
    pub tables_by_scope: BTreeMap<String, Vec<usize>>,
    pub fresh_scopes: BTreeMap<String, Vec<String>>,
    pub fresh_steps: BTreeMap<String, Vec<StepDef>>,
    pub fresh_tables: BTreeMap<String, Vec<TableDef>>,
}

fn scope_name(i: usize) -> String {
    let theme = SCOPE_THEMES[i % SCOPE_THEMES.len()];
    if i < SCOPE_THEMES.len() {
        theme.to_string()
    } else {
        format!("{}_{}", theme, i / SCOPE_THEMES.len() + 1)
    }
}

fn tail_step_description(role: Role, noun: &str, scope: &str) -> String {
    let spoken = noun.replace('_', " ");
    match role {
        Role::Lookup => format!("Queries {spoken} data for matching entries."),
        Role::Mutate => format!("Updates {spoken} records as part of a flow."),
        Role::Notify => format!("Sends a notification about {spoken} activity."),
        _ => format!("Processes {spoken} data for the {scope} scope."),
    }
}

fn build_tables(
    scopes: &[String],
    count: usize,
    fields_per_table: (usize, usize),
    rng: &mut SplitMix64,
    cycle_offset: usize,
) -> Vec<TableDef> {
    let mut tables = Vec::new();
    for i in 0..count {
        let pool = (cycle_offset + i) % TABLE_POOL.len();
        let cycle = (cycle_offset + i) / TABLE_POOL.len();
        let base = TABLE_POOL[pool].0;
        let name = if cycle == 0 {
            base.to_string()
        } else {
            format!("{}_{}", base, cycle + 1)
        };
        let scope = scopes[i % scopes.len()].clone();
        let (lo, hi) = fields_per_table;
        let n_fields = rng.next_in_range(lo as u64, hi as u64) as usize;
        // Every table gets the assignment and state fields so lookup
        // conditions always have something to filter on; the rest are drawn
        // without replacement.
        let mut chosen: Vec<usize> = vec![0, 1];
        let mut available: Vec<usize> = (2..FIELD_POOL.len()).collect();
        rng.shuffle(&mut available);
        chosen.extend(available.into_iter().take(n_fields.saturating_sub(2)));
        let fields = chosen
            .into_iter()
            .map(|f| FieldDef {
                name: FIELD_POOL[f].0.to_string(),
                pool: f,
                description: FIELD_POOL[f].3.to_string(),
            })
            .collect();
        tables.push(TableDef {
            name,
            scope,
            pool,
            description: TABLE_POOL[pool].3.to_string(),
            fields,
        });
    }
    tables
}

/// Mint tail steps for `scopes`, tying each step's name and description to a
/// table of its own scope so annotations about that table teach the step's
/// vocabulary.
fn build_tail_steps(
    scopes: &[String],
    total: usize,
    tables: &[TableDef],
    tables_by_scope: &BTreeMap<String, Vec<usize>>,
    name_suffix: Option<&str>,
    taken: &mut BTreeSet<String>,
    out: &mut Vec<StepDef>,
) {
    let start = out.len();
    let mut verb_cursor = 0usize;
    while out.len() < start + total {
        let slot = out.len() - start;
        let scope = scopes[slot % scopes.len()].clone();
        let (verb, role) = TAIL_VERBS[verb_cursor % TAIL_VERBS.len()];
        verb_cursor += 1;
        let scoped = tables_by_scope.get(&scope).map(Vec::as_slice).unwrap_or(&[]);
        let noun_table = if !scoped.is_empty() {
            Some(scoped[(slot / scopes.len()) % scoped.len()])
        } else if !tables.is_empty() {
            Some((slot * 7 + verb_cursor) % tables.len())
        } else {
            None
        };
        let noun = noun_table
            .map(|t| TABLE_POOL[tables[t].pool].0)
            .unwrap_or("record");
        let mut name = match name_suffix {
            None => format!("{verb}_{noun}"),
            Some(sfx) => format!("{verb}_{noun}_{sfx}"),
        };
        let mut suffix = 2usize;
        while taken.contains(&name) {
            name = match name_suffix {
                None => format!("{verb}_{noun}_{suffix}"),
                Some(sfx) => format!("{verb}_{noun}_{sfx}_{suffix}"),
            };
            suffix += 1;
        }
        taken.insert(name.clone());
        let description = tail_step_description(role, noun, &scope);
        out.push(StepDef {
            name,
            scope,
            role,
            description,
            noun_table,
        });
    }
}

fn group_by_scope(tables: &[TableDef]) -> BTreeMap<String, Vec<usize>> {
    let mut map: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, table) in tables.iter().enumerate() {
        map.entry(table.scope.clone()).or_default().push(i);
    }
    map
}

fn cumulative_zipf(ranks: impl Iterator<Item = usize>, exponent: f64) -> Vec<f64> {
    let mut cum = Vec::new();
    let mut total = 0.0;
    for rank in ranks {
        total += (rank as f64).powf(-exponent);
        cum.push(total);
    }
    for w in &mut cum {
        *w /= total;
    }
    cum
}

impl Universe {
    pub fn build(config: &CorpusConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let train_scopes: Vec<String> = (0..config.n_scopes).map(scope_name).collect();

        let mut table_rng = SplitMix64::stream(config.seed, "universe/tables");
        let tables = build_tables(
            &train_scopes,
            config.n_tables,
            config.fields_per_table,
            &mut table_rng,
            0,
        );
        let tables_by_scope = group_by_scope(&tables);

        let mut taken = BTreeSet::new();
        let mut steps = Vec::new();
        for (i, (name, role, desc)) in CORE_STEPS.iter().take(config.n_core_steps).enumerate() {
            taken.insert((*name).to_string());
            steps.push(StepDef {
                name: (*name).to_string(),
                scope: train_scopes[i % train_scopes.len()].clone(),
                role: *role,
                description: (*desc).to_string(),
                noun_table: None,
            });
        }
        let total = config.n_scopes * config.steps_per_scope;
        build_tail_steps(
            &train_scopes,
            total - steps.len(),
            &tables,
            &tables_by_scope,
            None,
            &mut taken,
            &mut steps,
        );
        // Shuffle the tail so Zipf rank does not correlate with scope; the
        // core block keeps its curated order at the top.
        let n_core = config.n_core_steps.min(steps.len());
        let mut rank_rng = SplitMix64::stream(config.seed, "universe/rank");
        rank_rng.shuffle(&mut steps[n_core..]);

        let n_items = config.n_tables.clamp(4, ITEM_POOL.len());
        let items = ITEM_POOL
            .iter()
            .take(n_items)
            .map(|(name, desc)| ItemDef {
                name: (*name).to_string(),
                description: (*desc).to_string(),
            })
            .collect();

        let zipf_cum = cumulative_zipf(1..=steps.len(), config.zipf_exponent);
        let lookup_steps: Vec<usize> = steps
            .iter()
            .enumerate()
            .filter(|(_, s)| s.role == Role::Lookup)
            .map(|(i, _)| i)
            .collect();
        let lookup_cum = cumulative_zipf(
            lookup_steps.iter().map(|&i| i + 1),
            config.zipf_exponent,
        );

        // Fresh per-domain material for OOD splits: at least one scope and
        // one table each, more when the overlap fraction is low.
        let mut fresh_scopes = BTreeMap::new();
        let mut fresh_steps = BTreeMap::new();
        let mut fresh_tables = BTreeMap::new();
        let mut scope_cursor = config.n_scopes;
        let mut table_cursor = config.n_tables;
        for domain in &config.ood_domains {
            let n_fresh = (((1.0 - domain.scope_overlap) * 4.0).round() as usize).max(1);
            let scopes: Vec<String> = (0..n_fresh)
                .map(|k| format!("{}_{}", domain.name, scope_name(scope_cursor + k)))
                .collect();
            scope_cursor += n_fresh;

            let mut dom_table_rng = SplitMix64::stream(
                config.seed,
                &format!("universe/tables/{}", domain.name),
            );
            let mut dom_tables = build_tables(
                &scopes,
                n_fresh,
                config.fields_per_table,
                &mut dom_table_rng,
                table_cursor,
            );
            // Domain-qualified names keep fresh tables disjoint from train
            // tables even after pool cycling.
            for t in &mut dom_tables {
                t.name = format!("{}_{}", domain.name, t.name);
            }
            table_cursor += n_fresh;

            let mut dom_steps = Vec::new();
            let per_domain = (config.steps_per_scope.min(8)) * scopes.len();
            build_tail_steps(
                &scopes,
                per_domain,
                &dom_tables,
                &group_by_scope(&dom_tables),
                Some(&domain.name),
                &mut taken,
                &mut dom_steps,
            );

            fresh_scopes.insert(domain.name.clone(), scopes);
            fresh_steps.insert(domain.name.clone(), dom_steps);
            fresh_tables.insert(domain.name.clone(), dom_tables);
        }

        Ok(Universe {
            train_scopes,
            steps,
            tables,
            items,
            lookup_steps,
            zipf_cum,
            lookup_cum,
            tables_by_scope,
            fresh_scopes,
            fresh_steps,
            fresh_tables,
        })
    }

    /// Draw a step index from the Zipf distribution over the train inventory.
    pub fn sample_step(&self, rng: &mut SplitMix64) -> usize {
        let u = rng.next_f64();
        self.zipf_cum.partition_point(|&c| c < u).min(self.steps.len() - 1)
    }

    /// Draw a lookup-role step index, Zipf-weighted within the lookup subset.
    pub fn sample_lookup_step(&self, rng: &mut SplitMix64) -> usize {
        if self.lookup_steps.is_empty() {
            return self.sample_step(rng);
        }
        let u = rng.next_f64();
        let pos = self
            .lookup_cum
            .partition_point(|&c| c < u)
            .min(self.lookup_steps.len() - 1);
        self.lookup_steps[pos]
    }

    /// All train-universe elements with descriptions: steps, tables, fields,
    /// and catalog items.
    pub fn extract_elements(&self) -> Vec<Element> {
        let mut out = step_elements(&self.steps);
        for table in &self.tables {
            out.extend(table_extracts(table));
        }
        for item in &self.items {
            out.push(
                Element::new(ElementKind::CatalogItem, item.name.clone())
                    .with_description(item.description.clone()),
            );
        }
        out
    }

    /// Elements exclusive to one OOD domain.
    pub fn fresh_extract_elements(&self, domain: &str) -> Vec<Element> {
        let mut out = Vec::new();
        if let Some(steps) = self.fresh_steps.get(domain) {
            out.extend(step_elements(steps));
        }
        for table in self.fresh_tables.get(domain).map(Vec::as_slice).unwrap_or(&[]) {
            out.extend(table_extracts(table));
        }
        out
    }
}

pub(crate) fn step_elements(steps: &[StepDef]) -> Vec<Element> {
    steps
        .iter()
        .map(|s| {
            Element::new(ElementKind::Step, s.name.clone())
                .with_scope(s.scope.clone())
                .with_description(s.description.clone())
        })
        .collect()
}

pub(crate) fn table_extracts(table: &TableDef) -> Vec<Element> {
    let mut out = vec![Element::new(ElementKind::Table, table.name.clone())
        .with_scope(table.scope.clone())
        .with_description(table.description.clone())];
    for field in &table.fields {
        out.push(
            Element::new(ElementKind::Field, field.name.clone())
                .with_parent(table.name.clone())
                .with_description(field.description.clone()),
        );
    }
    out
}
