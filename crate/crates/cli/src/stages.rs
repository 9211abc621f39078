//! Pipeline stages behind the subcommands. Each stage reads upstream
//! artifact directories, builds its own under the data dir, and is
//! idempotent through the manifest layer.

use crate::config::AppConfig;
use crate::error::{err, CliError};
use crate::manifest::{hash_outputs, run_stage, upstream_input, StageOutcome};
use flowrag_core::corpus::Element;
use flowrag_core::dataset::{
    build_dataset, extract_rows, read_dataset, registry, InstructionPair,
};
use flowrag_core::encoder::{load_model, save_model, train, training_pairs, EncoderModel};
use flowrag_core::eval::{
    compare_ablations, evaluate, specs_from_pairs, workflow_retrieval_eval, EvalReport, EvalSplit,
    WorkflowEvalReport,
};
use flowrag_core::retrieval::{
    load_dense_index, save_dense_index, Bm25Index, DenseIndex, DenseRetriever, Retriever,
};
use flowrag_core::synth::{corpus_stats, generate_corpus, read_split_set, write_split_set, SplitSet};
use serde_json::json;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::new("io", format!("cannot serialize {}: {e}", path.display())))?;
    fs::write(path, text + "\n")
        .map_err(|e| CliError::new("io", format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

pub fn run_synth(cfg: &AppConfig) -> Result<StageOutcome, CliError> {
    let config = serde_json::to_value(&cfg.corpus).expect("corpus config serializes");
    run_stage(
        &cfg.corpus_dir(),
        "corpus",
        config,
        BTreeMap::new(),
        |tmp| {
            let set = generate_corpus(&cfg.corpus).map_err(|e| err("config", e))?;
            write_split_set(tmp, &set).map_err(|e| err("corpus-io", e))?;
            write_json(&tmp.join("stats.json"), &corpus_stats(&set))?;
            Ok(())
        },
    )
}

fn read_corpus(cfg: &AppConfig) -> Result<SplitSet, CliError> {
    read_split_set(&cfg.corpus_dir()).map_err(|e| err("corpus-io", e))
}

fn train_extracts(set: &SplitSet) -> Result<Vec<Element>, CliError> {
    let catalog = set
        .catalogs
        .get("train")
        .ok_or_else(|| CliError::new("corpus-io", "corpus has no train catalog"))?;
    Ok(extract_rows(catalog))
}

pub fn run_build_dataset(cfg: &AppConfig) -> Result<StageOutcome, CliError> {
    let inputs = BTreeMap::from([upstream_input(&cfg.corpus_dir(), "corpus", "synth")?]);
    let config = json!({
        "negatives": cfg.dataset.negatives,
        "downsample": cfg.dataset.downsample,
        "policy": cfg.dataset.policy,
        "seed": cfg.dataset.seed,
    });
    run_stage(&cfg.dataset_dir(), "dataset", config, inputs, |tmp| {
        let set = read_corpus(cfg)?;
        let extracts = train_extracts(&set)?;
        let policy = cfg.dataset.downsample.then_some(&cfg.dataset.policy);
        let build = build_dataset(
            &set,
            &extracts,
            registry(),
            cfg.dataset.negatives,
            policy,
            cfg.dataset.seed,
        );
        flowrag_core::dataset::write_dataset(tmp, &build).map_err(|e| err("dataset-io", e))?;
        Ok(())
    })
}

pub fn run_train(cfg: &AppConfig) -> Result<StageOutcome, CliError> {
    let inputs = BTreeMap::from([
        upstream_input(&cfg.corpus_dir(), "corpus", "synth")?,
        upstream_input(&cfg.dataset_dir(), "dataset", "build-dataset")?,
    ]);
    let config = json!({
        "featurizer": cfg.encoder.featurizer,
        "embed_dim": cfg.encoder.embed_dim,
        "init_seed": cfg.encoder.init_seed,
        "train": cfg.train,
    });
    run_stage(&cfg.model_dir(), "model", config, inputs, |tmp| {
        let set = read_corpus(cfg)?;
        let catalog = set
            .catalogs
            .get("train")
            .ok_or_else(|| CliError::new("corpus-io", "corpus has no train catalog"))?;
        let build = read_dataset(&cfg.dataset_dir()).map_err(|e| err("dataset-io", e))?;
        let pairs = training_pairs(&build.train, catalog);
        let init = EncoderModel::random_init(
            cfg.encoder.featurizer,
            cfg.encoder.embed_dim,
            cfg.encoder.init_seed,
        );
        let (model, trace) = train(&init, &pairs, &cfg.train).map_err(|e| err("train", e))?;
        save_model(&model, &tmp.join("encoder.frag")).map_err(|e| err("model-io", e))?;
        let tail = trace.len().saturating_sub(100);
        let tail_mean = if trace.is_empty() {
            0.0
        } else {
            trace[tail..].iter().sum::<f64>() / (trace.len() - tail) as f64
        };
        write_json(
            &tmp.join("train_summary.json"),
            &json!({
                "model_fingerprint": format!("{:016x}", model.fingerprint()),
                "init_fingerprint": format!("{:016x}", init.fingerprint()),
                "train_pairs": pairs.len(),
                "steps": trace.len(),
                "final_loss_mean_100": tail_mean,
                "loss_trace": trace,
            }),
        )?;
        Ok(())
    })
}

pub fn run_index(cfg: &AppConfig) -> Result<StageOutcome, CliError> {
    let inputs = BTreeMap::from([
        upstream_input(&cfg.corpus_dir(), "corpus", "synth")?,
        upstream_input(&cfg.model_dir(), "model", "train")?,
    ]);
    run_stage(&cfg.index_dir(), "index", json!({}), inputs, |tmp| {
        let set = read_corpus(cfg)?;
        let model = load_model(&cfg.model_path()).map_err(|e| err("model-io", e))?;
        for (name, catalog) in &set.catalogs {
            let elements: Vec<Element> = catalog.elements().cloned().collect();
            let index = DenseIndex::build(&model, &elements);
            save_dense_index(&index, &tmp.join(format!("{name}.fragix")))
                .map_err(|e| err("index-io", e))?;
        }
        Ok(())
    })
}

fn flatten_pool(pool: &BTreeMap<String, Vec<InstructionPair>>) -> Vec<InstructionPair> {
    pool.values().flatten().cloned().collect()
}

/// Evaluate one engine per split plus the workflow-retrieval protocol,
/// given an engine lookup by split name.
fn eval_with_engines(
    engine_label: &str,
    fingerprint: u64,
    split_pairs: &[(String, Vec<InstructionPair>)],
    workflow_pools: &BTreeMap<String, Vec<InstructionPair>>,
    engines: &BTreeMap<String, &dyn Retriever>,
) -> Result<(EvalReport, WorkflowEvalReport), CliError> {
    let mut splits = Vec::new();
    for (name, pairs) in split_pairs {
        let engine = engines
            .get(name)
            .ok_or_else(|| CliError::new("eval", format!("no engine for split {name}")))?;
        splits.push(EvalSplit {
            name: name.clone(),
            engine: *engine,
            specs: specs_from_pairs(pairs),
        });
    }
    let report = evaluate(engine_label, fingerprint, &splits).map_err(|e| err("eval", e))?;

    let mut wf_splits = Vec::new();
    for (name, pairs) in workflow_pools {
        let engine = engines
            .get(name)
            .ok_or_else(|| CliError::new("eval", format!("no engine for split {name}")))?;
        wf_splits.push(EvalSplit {
            name: name.clone(),
            engine: *engine,
            specs: specs_from_pairs(pairs),
        });
    }
    let workflow = workflow_retrieval_eval(engine_label, &wf_splits).map_err(|e| err("eval", e))?;
    Ok((report, workflow))
}

fn eval_split_labels(build: &flowrag_core::dataset::DatasetBuild) -> Vec<(String, Vec<InstructionPair>)> {
    let mut out = vec![("dev".to_string(), flatten_pool(&build.dev))];
    for (domain, pool) in &build.ood {
        out.push((format!("ood-{domain}"), flatten_pool(pool)));
    }
    out
}

pub fn run_eval(cfg: &AppConfig, engine: &str) -> Result<StageOutcome, CliError> {
    if engine != "dense" && engine != "bm25" {
        return Err(CliError::config(format!(
            "unknown engine {engine:?}; expected \"dense\" or \"bm25\""
        )));
    }
    let mut inputs = BTreeMap::from([
        upstream_input(&cfg.corpus_dir(), "corpus", "synth")?,
        upstream_input(&cfg.dataset_dir(), "dataset", "build-dataset")?,
    ]);
    let mut config = json!({ "engine": engine });
    if engine == "dense" {
        inputs.extend([
            upstream_input(&cfg.model_dir(), "model", "train")?,
            upstream_input(&cfg.index_dir(), "index", "index")?,
        ]);
    } else {
        config["bm25"] = serde_json::to_value(cfg.bm25).expect("params serialize");
    }
    run_stage(&cfg.eval_dir(), "eval", config, inputs, |tmp| {
        let set = read_corpus(cfg)?;
        let build = read_dataset(&cfg.dataset_dir()).map_err(|e| err("dataset-io", e))?;
        let split_pairs = eval_split_labels(&build);

        let (report, workflow) = match engine {
            "dense" => {
                let model = load_model(&cfg.model_path()).map_err(|e| err("model-io", e))?;
                let mut indexes = Vec::new();
                for (name, _) in &split_pairs {
                    indexes.push((
                        name.clone(),
                        load_dense_index(&cfg.index_path(name)).map_err(|e| err("index-io", e))?,
                    ));
                }
                let retrievers: Vec<(String, DenseRetriever)> = indexes
                    .iter()
                    .map(|(name, index)| {
                        (
                            name.clone(),
                            DenseRetriever {
                                index,
                                model: &model,
                            },
                        )
                    })
                    .collect();
                let engines: BTreeMap<String, &dyn Retriever> = retrievers
                    .iter()
                    .map(|(name, r)| (name.clone(), r as &dyn Retriever))
                    .collect();
                eval_with_engines(
                    "dense",
                    model.fingerprint(),
                    &split_pairs,
                    &build.workflow_eval,
                    &engines,
                )?
            }
            _ => {
                let mut bm25_indexes = Vec::new();
                for (name, _) in &split_pairs {
                    let catalog = set.catalogs.get(name).ok_or_else(|| {
                        CliError::new("corpus-io", format!("corpus has no {name} catalog"))
                    })?;
                    let elements: Vec<Element> = catalog.elements().cloned().collect();
                    bm25_indexes.push((name.clone(), Bm25Index::build(&elements, cfg.bm25)));
                }
                let engines: BTreeMap<String, &dyn Retriever> = bm25_indexes
                    .iter()
                    .map(|(name, ix)| (name.clone(), ix as &dyn Retriever))
                    .collect();
                eval_with_engines("bm25", 0, &split_pairs, &build.workflow_eval, &engines)?
            }
        };

        write_json(&tmp.join("report.json"), &report)?;
        fs::write(tmp.join("report.txt"), report.text_table())?;
        fs::write(tmp.join("report.csv"), report.to_csv())?;
        write_json(&tmp.join("workflow.json"), &workflow)?;
        fs::write(tmp.join("workflow.txt"), workflow.text_table())?;
        Ok(())
    })
}

pub fn run_compare(cfg: &AppConfig) -> Result<StageOutcome, CliError> {
    let inputs = BTreeMap::from([upstream_input(&cfg.corpus_dir(), "corpus", "synth")?]);
    let config = json!({
        "negatives": cfg.dataset.negatives,
        "policy": cfg.dataset.policy,
        "seed": cfg.dataset.seed,
        "featurizer": cfg.encoder.featurizer,
        "embed_dim": cfg.encoder.embed_dim,
        "init_seed": cfg.encoder.init_seed,
        "train": cfg.train,
    });
    run_stage(&cfg.ablations_dir(), "ablations", config, inputs, |tmp| {
        let set = read_corpus(cfg)?;
        let extracts = train_extracts(&set)?;
        let multi = build_dataset(
            &set,
            &extracts,
            registry(),
            cfg.dataset.negatives,
            None,
            cfg.dataset.seed,
        );
        let downsampled = build_dataset(
            &set,
            &extracts,
            registry(),
            cfg.dataset.negatives,
            Some(&cfg.dataset.policy),
            cfg.dataset.seed,
        );
        let init = EncoderModel::random_init(
            cfg.encoder.featurizer,
            cfg.encoder.embed_dim,
            cfg.encoder.init_seed,
        );
        let table = compare_ablations(&init, &set, &multi, &downsampled, &cfg.train)
            .map_err(|e| err("ablation", e))?;
        write_json(&tmp.join("ablations.json"), &table)?;
        fs::write(tmp.join("ablations.txt"), table.text_table())?;
        Ok(())
    })
}

/// Paths the retrieval service needs, checked together so one diagnostic
/// lists everything missing.
pub fn check_service_artifacts(cfg: &AppConfig, split: &str) -> Result<(), CliError> {
    let mut missing = Vec::new();
    if !cfg.corpus_dir().join(crate::manifest::MANIFEST_FILE).is_file() {
        missing.push(format!(
            "corpus at {} (run `flowrag synth`)",
            cfg.corpus_dir().display()
        ));
    }
    if !cfg.model_path().is_file() {
        missing.push(format!(
            "model at {} (run `flowrag train`)",
            cfg.model_path().display()
        ));
    }
    if !cfg.index_path(split).is_file() {
        missing.push(format!(
            "index at {} (run `flowrag index`)",
            cfg.index_path(split).display()
        ));
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::new(
            "missing-artifact",
            format!("missing artifacts:\n  - {}", missing.join("\n  - ")),
        ))
    }
}

/// Recompute an artifact directory's output hashes and compare with its
/// manifest; used by tests and doctors, not the normal flow.
pub fn verify_artifact(dir: &Path) -> Result<bool, CliError> {
    match crate::manifest::read_manifest(dir) {
        Some(manifest) => Ok(hash_outputs(dir)? == manifest.outputs),
        None => Ok(false),
    }
}
