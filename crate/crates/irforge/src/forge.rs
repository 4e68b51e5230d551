//! IR artifact emission and container recipe rendering.
//!
//! Once a plan exists, each distinct translation unit is emitted exactly
//! once into a content-addressed store. Every configuration gets an install
//! manifest — the instructions for turning stored IR plus deferred
//! architecture flags into objects at deployment — and the whole bundle is
//! described by a container recipe that ships the toolchain, the store, the
//! source tree, and the manifests, while GPU runtime layers stay symbolic
//! until deployment binds them.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::buildscan::{substitute_placeholder, FlagSet, Language};
use crate::dedup::{DedupPlan, PlacementKind, TUKey};
use crate::driver::{DriverError, ToolchainDriver};

/// Placeholder for the architecture profile slot in install manifests,
/// resolved at deployment from the selected vectorization level.
pub const ARCH_PLACEHOLDER: &str = "«ARCH»";

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("driver failure on {target}: {stderr}")]
    Driver { target: String, stderr: String },
    #[error("store corruption: {id} does not match its content")]
    StoreCorruption { id: String },
    #[error("config {0} not present in plan")]
    ConfigNotInPlan(String),
    #[error("config {0} has no targets")]
    EmptyConfig(String),
    #[error("missing artifact for {artifact_id} ({src})")]
    MissingArtifact { artifact_id: String, src: String },
    #[error("plan has no configurations")]
    EmptyPlan,
    #[error("artifact {0} absent from store index")]
    NotInStore(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed store index: {0}")]
    BadIndex(serde_json::Error),
}

impl From<DriverError> for ForgeError {
    fn from(err: DriverError) -> Self {
        match err {
            DriverError::Failure { target, stderr } => ForgeError::Driver { target, stderr },
            other => ForgeError::Driver { target: String::new(), stderr: other.to_string() },
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ForgeError + '_ {
    move |source| ForgeError::Io { path: path.to_path_buf(), source }
}

fn digest_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}

// --- Content-addressed store ---------------------------------------------------

/// One emitted IR artifact. `id` is the content digest of the IR bytes;
/// `plan_id` is the key-derived handle the plan and manifests use.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IrArtifact {
    pub id: String,
    pub plan_id: String,
    pub tu_key: TUKey,
    pub path: PathBuf,
    pub emission_flags: FlagSet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreEntry {
    /// Content digest of the stored bytes.
    pub ir_digest: String,
    /// Path relative to the store root.
    pub rel_path: String,
    pub tu_key: TUKey,
    pub emission_flags: FlagSet,
}

type StoreIndex = BTreeMap<String, StoreEntry>;

/// Filesystem layout: `store/<2-char prefix>/<digest>.ir` plus
/// `store/index.json` mapping plan ids to content digests.
pub struct IrStore {
    root: PathBuf,
}

impl IrStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ForgeError> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(IrStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn index_path(&self) -> PathBuf {
        self.root.join("index.json")
    }

    pub fn read_index(&self) -> Result<StoreIndex, ForgeError> {
        let path = self.index_path();
        if !path.exists() {
            return Ok(StoreIndex::new());
        }
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(ForgeError::BadIndex)
    }

    fn write_index(&self, index: &StoreIndex) -> Result<(), ForgeError> {
        let mut text = serde_json::to_string_pretty(index).expect("index serializes");
        text.push('\n');
        self.write_atomic(&self.index_path(), text.as_bytes())
    }

    fn rel_path_for(digest: &str) -> String {
        format!("{}/{}.ir", &digest[..2], digest)
    }

    /// Write bytes under their content digest, temp-then-rename so
    /// concurrent duplicate emissions stay idempotent. Returns the digest.
    pub fn put(&self, bytes: &[u8]) -> Result<String, ForgeError> {
        let digest = digest_hex(bytes);
        let rel = Self::rel_path_for(&digest);
        let path = self.root.join(&rel);
        if path.exists() {
            let existing = std::fs::read(&path).map_err(io_err(&path))?;
            if digest_hex(&existing) != digest {
                return Err(ForgeError::StoreCorruption { id: digest });
            }
            return Ok(digest);
        }
        let parent = path.parent().expect("store paths have parents");
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        self.write_atomic(&path, bytes)?;
        Ok(digest)
    }

    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> Result<(), ForgeError> {
        let parent = path.parent().expect("paths have parents");
        let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(io_err(parent))?;
        tmp.write_all(bytes).map_err(io_err(path))?;
        tmp.flush().map_err(io_err(path))?;
        tmp.persist(path)
            .map_err(|e| ForgeError::Io { path: path.to_path_buf(), source: e.error })?;
        Ok(())
    }

    /// Fetch artifact bytes by plan id, verifying content addressing.
    pub fn get(&self, plan_id: &str) -> Result<Vec<u8>, ForgeError> {
        let index = self.read_index()?;
        let entry = index
            .get(plan_id)
            .ok_or_else(|| ForgeError::NotInStore(plan_id.to_string()))?;
        let path = self.root.join(&entry.rel_path);
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        if digest_hex(&bytes) != entry.ir_digest {
            return Err(ForgeError::StoreCorruption { id: entry.ir_digest.clone() });
        }
        Ok(bytes)
    }
}

/// Result of materializing a plan into the store.
#[derive(Debug)]
pub struct EmitOutcome {
    pub artifacts: Vec<IrArtifact>,
    pub emitted: usize,
    pub reused: usize,
}

/// Emit exactly one artifact per distinct key in the plan. Artifacts are
/// content-addressed; keys already present in the store index are verified
/// and reused, making re-runs idempotent.
pub fn emit_ir_set(
    plan: &DedupPlan,
    driver: &ToolchainDriver,
    store: &IrStore,
) -> Result<EmitOutcome, ForgeError> {
    let mut index = store.read_index()?;
    let groups = plan.all_groups();

    let mut artifacts = Vec::with_capacity(groups.len());
    let mut reused = 0usize;
    let mut to_emit = Vec::new();
    for group in &groups {
        if let Some(entry) = index.get(&group.artifact_id) {
            let path = store.root().join(&entry.rel_path);
            let bytes = std::fs::read(&path).map_err(io_err(&path))?;
            if digest_hex(&bytes) != entry.ir_digest {
                return Err(ForgeError::StoreCorruption { id: entry.ir_digest.clone() });
            }
            artifacts.push(IrArtifact {
                id: entry.ir_digest.clone(),
                plan_id: group.artifact_id.clone(),
                tu_key: entry.tu_key.clone(),
                path,
                emission_flags: entry.emission_flags.clone(),
            });
            reused += 1;
        } else {
            to_emit.push(*group);
        }
    }

    let root = plan.build_root.as_str();
    let emissions: Vec<Result<(String, StoreEntry), ForgeError>> = to_emit
        .par_iter()
        .map(|group| {
            let representative = group
                .members
                .first()
                .ok_or_else(|| ForgeError::MissingArtifact {
                    artifact_id: group.artifact_id.clone(),
                    src: "group without members".into(),
                })?;
            let source = substitute_placeholder(&representative.source, root);
            let flags: Vec<String> = group
                .key
                .residual_flags
                .iter()
                .map(|f| substitute_placeholder(f, root))
                .collect();
            let bytes = driver.emit_ir(
                Path::new(&source),
                &flags,
                group.key.language,
                root,
            )?;
            let digest = store.put(&bytes)?;
            Ok((
                group.artifact_id.clone(),
                StoreEntry {
                    rel_path: IrStore::rel_path_for(&digest),
                    ir_digest: digest,
                    tu_key: group.key.clone(),
                    emission_flags: group.key.residual_flags.clone(),
                },
            ))
        })
        .collect();

    let mut emitted = 0usize;
    for result in emissions {
        let (plan_id, entry) = result?;
        artifacts.push(IrArtifact {
            id: entry.ir_digest.clone(),
            plan_id: plan_id.clone(),
            tu_key: entry.tu_key.clone(),
            path: store.root().join(&entry.rel_path),
            emission_flags: entry.emission_flags.clone(),
        });
        index.insert(plan_id, entry);
        emitted += 1;
    }
    store.write_index(&index)?;

    artifacts.sort_by(|a, b| a.plan_id.cmp(&b.plan_id));
    Ok(EmitOutcome { artifacts, emitted, reused })
}

// --- Install manifests ------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManifestEntryKind {
    /// Compile from a stored IR artifact.
    Ir,
    /// System-dependent: compile from source at deployment.
    Source,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub source: String,
    pub output: String,
    pub language: Language,
    pub kind: ManifestEntryKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact_id: Option<String>,
    /// Residual flags applied at lowering.
    pub flags: FlagSet,
    /// Unresolved architecture slot; deployment substitutes codegen flags.
    pub arch: String,
    /// Original architecture profile recorded at scan time.
    pub arch_profile: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opt_level: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkPhase {
    /// Linking is delegated to the project's own build system.
    pub mode: String,
}

impl Default for LinkPhase {
    fn default() -> Self {
        LinkPhase { mode: "build-system".into() }
    }
}

/// Per-configuration installation instructions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstallManifest {
    pub config: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub assignments: BTreeMap<String, String>,
    pub entries: Vec<ManifestEntry>,
    pub link: LinkPhase,
}

impl InstallManifest {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        text
    }
}

/// Render the install manifest for one configuration of the plan: one line
/// per target, referencing either a stored artifact or (for SD targets) the
/// source path, with the architecture slot left unresolved.
pub fn render_install_manifest(
    config: &str,
    plan: &DedupPlan,
) -> Result<InstallManifest, ForgeError> {
    let placements = plan
        .placements
        .get(config)
        .ok_or_else(|| ForgeError::ConfigNotInPlan(config.to_string()))?;
    if placements.is_empty() {
        return Err(ForgeError::EmptyConfig(config.to_string()));
    }
    let mut entries = Vec::with_capacity(placements.len());
    for placement in placements {
        let kind = match placement.kind {
            PlacementKind::Sd => ManifestEntryKind::Source,
            PlacementKind::Core | PlacementKind::Delta => ManifestEntryKind::Ir,
        };
        if kind == ManifestEntryKind::Ir && placement.artifact_id.is_none() {
            return Err(ForgeError::MissingArtifact {
                artifact_id: String::new(),
                src: placement.source.clone(),
            });
        }
        entries.push(ManifestEntry {
            source: placement.source.clone(),
            output: placement.output.clone(),
            language: placement.language,
            kind,
            artifact_id: placement.artifact_id.clone(),
            flags: placement.residual_flags.clone(),
            arch: ARCH_PLACEHOLDER.to_string(),
            arch_profile: placement.arch_profile.tokens.clone(),
            opt_level: placement.opt_level.clone(),
        });
    }
    entries.sort_by(|a, b| (&a.source, &a.output).cmp(&(&b.source, &b.output)));
    Ok(InstallManifest {
        config: config.to_string(),
        assignments: plan
            .config_assignments
            .get(config)
            .cloned()
            .unwrap_or_default(),
        entries,
        link: LinkPhase::default(),
    })
}

// --- Container recipes ---------------------------------------------------------------

/// Container GPU build metadata recorded for deploy-time compatibility
/// checks (runtime version, PTX, embedded device binaries).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ContainerGpuInfo {
    pub runtime_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ptx_version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ptx_capability: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cubin_capabilities: Vec<String>,
}

/// Base-layer references supplied to the build step (`--bases FILE`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMap {
    pub toolchain: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_tree: Option<String>,
    /// GPU runtime layer templates by lowercase backend name;
    /// `{version}` is substituted at deployment.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub gpu_layers: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpu: Option<ContainerGpuInfo>,
}

/// The shippable description of an IR container: layers, store, source
/// tree, per-configuration manifests, and specialization annotations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerRecipe {
    pub build_root: String,
    pub toolchain_layer: String,
    pub ir_store_mount: String,
    pub source_tree: String,
    pub manifests: BTreeMap<String, InstallManifest>,
    pub annotations: BTreeMap<String, String>,
    /// Layers reassembled at deployment instead of being baked in.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub deferred_layers: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub gpu_layers: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpu: Option<ContainerGpuInfo>,
    pub dockerfile: String,
}

impl ContainerRecipe {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("recipe serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Render the container recipe: toolchain layer, IR store, source tree and
/// manifests are copied in; GPU runtime layers are referenced symbolically
/// and bound at deployment.
pub fn render_container_recipe(
    plan: &DedupPlan,
    manifests: &BTreeMap<String, InstallManifest>,
    bases: &LayerMap,
) -> Result<ContainerRecipe, ForgeError> {
    if plan.placements.is_empty() || manifests.is_empty() {
        return Err(ForgeError::EmptyPlan);
    }

    let mut deferred: BTreeSet<String> = BTreeSet::new();
    for assignments in plan.config_assignments.values() {
        if let Some(backend) = assignments.get("gpu") {
            deferred.insert(backend.to_lowercase());
        }
    }

    let mut annotations = BTreeMap::new();
    let mut point_names: BTreeSet<String> = BTreeSet::new();
    for (config, assignments) in &plan.config_assignments {
        point_names.extend(assignments.keys().cloned());
        let rendered: Vec<String> = assignments
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        annotations.insert(format!("xaas.config.{config}"), rendered.join(","));
    }
    annotations.insert(
        "xaas.specialization.points".into(),
        point_names.into_iter().collect::<Vec<_>>().join(","),
    );
    if !deferred.is_empty() {
        annotations.insert(
            "xaas.deferred.layers".into(),
            deferred.iter().cloned().collect::<Vec<_>>().join(","),
        );
    }

    let source_tree = bases.source_tree.clone().unwrap_or_else(|| "src/".into());
    let mut dockerfile = String::new();
    dockerfile.push_str(&format!("FROM {} AS toolchain\n", bases.toolchain));
    dockerfile.push_str("WORKDIR /xaas\n");
    dockerfile.push_str("COPY store/ /xaas/store/\n");
    dockerfile.push_str(&format!("COPY {source_tree} /xaas/src/\n"));
    dockerfile.push_str("COPY manifests/ /xaas/manifests/\n");
    for (key, value) in &annotations {
        dockerfile.push_str(&format!("LABEL {key}=\"{value}\"\n"));
    }
    for layer in &deferred {
        dockerfile.push_str(&format!(
            "# deferred layer (bound at deployment): {layer}\n"
        ));
    }

    Ok(ContainerRecipe {
        build_root: plan.build_root.clone(),
        toolchain_layer: bases.toolchain.clone(),
        ir_store_mount: "/xaas/store".into(),
        source_tree,
        manifests: manifests.clone(),
        annotations,
        deferred_layers: deferred.into_iter().collect(),
        gpu_layers: bases.gpu_layers.clone(),
        gpu: bases.gpu.clone(),
        dockerfile,
    })
}
