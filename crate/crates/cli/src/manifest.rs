//! Build manifests. Every pipeline stage owns one artifact directory and
//! records a manifest beside its outputs: the settings it ran with, the
//! content hashes of its inputs, and the content hashes of everything it
//! wrote. A rerun whose prospective manifest matches what is on disk (and
//! whose outputs still hash clean) short-circuits without touching
//! anything; any difference rebuilds the directory from scratch. Stages
//! build into a sibling temp directory that replaces the target only on
//! success, so a failed run leaves no partial artifact behind.

use crate::error::CliError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifact: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    /// Input label -> sha256 of the upstream manifest (or source file).
    pub inputs: BTreeMap<String, String>,
    /// Output path relative to the artifact directory -> sha256.
    pub outputs: BTreeMap<String, String>,
}

pub fn tool_version() -> String {
    env!("CARGO_PKG_VERSION").to_string()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

pub fn hash_file(path: &Path) -> Result<String, CliError> {
    let mut file = fs::File::open(path)
        .map_err(|e| CliError::new("io", format!("cannot open {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file
            .read(&mut buf)
            .map_err(|e| CliError::new("io", format!("cannot read {}: {e}", path.display())))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    Ok(out)
}

/// The manifest an artifact directory carries, or None when there is no
/// readable manifest (missing or corrupt both mean "rebuild").
pub fn read_manifest(dir: &Path) -> Option<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

/// Hash of an upstream artifact's manifest, for use as a stage input.
/// A missing upstream artifact is an error naming the command that
/// produces it.
pub fn upstream_input(
    dir: &Path,
    label: &str,
    produced_by: &str,
) -> Result<(String, String), CliError> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(CliError::new(
            "missing-artifact",
            format!(
                "no {label} artifact at {}; run `flowrag {produced_by}` first",
                dir.display()
            ),
        ));
    }
    Ok((label.to_string(), hash_file(&path)?))
}

fn walk_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| CliError::new("io", format!("cannot list {}: {e}", dir.display())))?
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::new("io", format!("cannot list {}: {e}", dir.display())))?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        if path.is_dir() {
            walk_files(root, &path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

fn relative_label(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().to_string())
        .collect::<Vec<_>>()
        .join("/")
}

/// Hash every file under `dir` (except the manifest itself), keyed by
/// slash-separated relative path.
pub fn hash_outputs(dir: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut files = Vec::new();
    walk_files(dir, dir, &mut files)?;
    let mut outputs = BTreeMap::new();
    for path in files {
        let label = relative_label(dir, &path);
        if label == MANIFEST_FILE {
            continue;
        }
        outputs.insert(label, hash_file(&path)?);
    }
    Ok(outputs)
}

fn outputs_clean(dir: &Path, outputs: &BTreeMap<String, String>) -> bool {
    match hash_outputs(dir) {
        Ok(current) => current == *outputs,
        Err(_) => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Built,
    UpToDate,
}

impl StageOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            StageOutcome::Built => "built",
            StageOutcome::UpToDate => "up-to-date",
        }
    }
}

/// Run one stage against its artifact directory. `build` receives a fresh
/// temp directory and must write every output into it.
pub fn run_stage(
    dir: &Path,
    artifact: &str,
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
    build: impl FnOnce(&Path) -> Result<(), CliError>,
) -> Result<StageOutcome, CliError> {
    let version = tool_version();
    if let Some(existing) = read_manifest(dir) {
        if existing.artifact == artifact
            && existing.tool_version == version
            && existing.config == config
            && existing.inputs == inputs
            && outputs_clean(dir, &existing.outputs)
        {
            return Ok(StageOutcome::UpToDate);
        }
    }

    let tmp = temp_sibling(dir)?;
    if tmp.exists() {
        fs::remove_dir_all(&tmp)
            .map_err(|e| CliError::new("io", format!("cannot clear {}: {e}", tmp.display())))?;
    }
    fs::create_dir_all(&tmp)
        .map_err(|e| CliError::new("io", format!("cannot create {}: {e}", tmp.display())))?;

    if let Err(e) = build(&tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }

    let finalize = || -> Result<(), CliError> {
        let outputs = hash_outputs(&tmp)?;
        let manifest = Manifest {
            artifact: artifact.to_string(),
            tool_version: version,
            config,
            inputs,
            outputs,
        };
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| CliError::new("io", format!("cannot serialize manifest: {e}")))?;
        fs::write(tmp.join(MANIFEST_FILE), text + "\n")
            .map_err(|e| CliError::new("io", format!("cannot write manifest: {e}")))?;
        if dir.exists() {
            fs::remove_dir_all(dir)
                .map_err(|e| CliError::new("io", format!("cannot replace {}: {e}", dir.display())))?;
        }
        fs::rename(&tmp, dir).map_err(|e| {
            CliError::new(
                "io",
                format!("cannot move {} to {}: {e}", tmp.display(), dir.display()),
            )
        })?;
        Ok(())
    };

    match finalize() {
        Ok(()) => Ok(StageOutcome::Built),
        Err(e) => {
            let _ = fs::remove_dir_all(&tmp);
            Err(e)
        }
    }
}

fn temp_sibling(dir: &Path) -> Result<PathBuf, CliError> {
    let name = dir
        .file_name()
        .ok_or_else(|| CliError::new("io", format!("bad artifact path {}", dir.display())))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(".tmp");
    let parent = dir.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent)
        .map_err(|e| CliError::new("io", format!("cannot create {}: {e}", parent.display())))?;
    Ok(parent.join(tmp_name))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_build(marker: &'static str) -> impl FnOnce(&Path) -> Result<(), CliError> {
        move |dir: &Path| {
            fs::create_dir_all(dir.join("sub"))?;
            fs::write(dir.join("a.txt"), marker)?;
            fs::write(dir.join("sub/b.txt"), "nested")?;
            Ok(())
        }
    }

    #[test]
    fn sha256_matches_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn second_identical_run_is_up_to_date_and_leaves_the_manifest_alone() {
        let root = tempfile::tempdir().unwrap();
        let dir = root.path().join("stage");
        let config = serde_json::json!({"n": 3});
        let outcome = run_stage(&dir, "demo", config.clone(), BTreeMap::new(), demo_build("one"))
            .unwrap();
        assert_eq!(outcome, StageOutcome::Built);
        let first = fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap();

        let outcome = run_stage(&dir, "demo", config, BTreeMap::new(), |_| {
            panic!("up-to-date stage must not rebuild")
        })
        .unwrap();
        assert_eq!(outcome, StageOutcome::UpToDate);
        let second = fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn config_change_rebuilds() {
        let root = tempfile::tempdir().unwrap();
        let dir = root.path().join("stage");
        run_stage(
            &dir,
            "demo",
            serde_json::json!({"n": 3}),
            BTreeMap::new(),
            demo_build("one"),
        )
        .unwrap();
        let outcome = run_stage(
            &dir,
            "demo",
            serde_json::json!({"n": 4}),
            BTreeMap::new(),
            demo_build("two"),
        )
        .unwrap();
        assert_eq!(outcome, StageOutcome::Built);
        assert_eq!(fs::read_to_string(dir.join("a.txt")).unwrap(), "two");
    }

    #[test]
    fn tampered_output_rebuilds() {
        let root = tempfile::tempdir().unwrap();
        let dir = root.path().join("stage");
        let config = serde_json::json!({});
        run_stage(&dir, "demo", config.clone(), BTreeMap::new(), demo_build("one")).unwrap();
        fs::write(dir.join("a.txt"), "tampered").unwrap();
        let outcome =
            run_stage(&dir, "demo", config, BTreeMap::new(), demo_build("one")).unwrap();
        assert_eq!(outcome, StageOutcome::Built);
        assert_eq!(fs::read_to_string(dir.join("a.txt")).unwrap(), "one");
    }

    #[test]
    fn failed_build_cleans_up_and_keeps_the_previous_artifact() {
        let root = tempfile::tempdir().unwrap();
        let dir = root.path().join("stage");
        run_stage(
            &dir,
            "demo",
            serde_json::json!({"n": 1}),
            BTreeMap::new(),
            demo_build("one"),
        )
        .unwrap();

        let result = run_stage(
            &dir,
            "demo",
            serde_json::json!({"n": 2}),
            BTreeMap::new(),
            |tmp: &Path| {
                fs::write(tmp.join("partial.txt"), "half-written")?;
                Err(CliError::new("boom", "simulated failure"))
            },
        );
        assert_eq!(result.unwrap_err().code, "boom");
        assert!(dir.join("a.txt").is_file());
        assert!(!dir.join("partial.txt").exists());
        assert!(!root.path().join("stage.tmp").exists());
        let manifest = read_manifest(&dir).unwrap();
        assert_eq!(manifest.config, serde_json::json!({"n": 1}));
    }

    #[test]
    fn missing_upstream_artifact_names_the_producing_command() {
        let root = tempfile::tempdir().unwrap();
        let err = upstream_input(&root.path().join("corpus"), "corpus", "synth").unwrap_err();
        assert_eq!(err.code, "missing-artifact");
        assert!(err.message.contains("flowrag synth"), "{err}");
    }
}
